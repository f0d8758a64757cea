//! On-disk formats: the chunked array container, per-sample metadata,
//! manifests and checkpoint sidecars.
//!
//! # Array container (`.arr`)
//!
//! ```text
//! magic   8 bytes  b"SFARR001"
//! u32 LE  header length
//! header  JSON: {"dtype":"f32"|"u8","shape":[h,w],"chunk_rows":n}
//! chunks  per chunk: u32 LE payload length, u32 LE crc32, raw LE payload
//! ```
//!
//! Rows are stored row-major in chunks of `chunk_rows` rows; each chunk
//! carries a crc32 so corrupted artifacts are detected at the consuming
//! stage. Integer arrays round-trip bit-exactly; f32 arrays are stored raw
//! and therefore also round-trip bit-exactly.
//!
//! # Sample layout
//!
//! ```text
//! <root>/manifest.jsonl            {"id","split","domain"} per line
//! <root>/samples/<id>/image.arr
//! <root>/samples/<id>/mask.arr     ground truth; target masks are eval-only
//! <root>/samples/<id>/meta.json    {"id","value_range","spacing_mm"}
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfda_core::{BinaryMask, Grid2, Image2D};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SFARR001";
const CHUNK_ROWS: usize = 16;

#[derive(Serialize, Deserialize)]
struct ArrHeader {
    dtype: String,
    shape: [usize; 2],
    chunk_rows: usize,
}

enum ArrData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

fn write_arr(path: &Path, shape: (usize, usize), data: &ArrData) -> Result<()> {
    let (h, w) = shape;
    let (dtype, elem_size) = match data {
        ArrData::F32(_) => ("f32", 4),
        ArrData::U8(_) => ("u8", 1),
    };
    let header = serde_json::to_vec(&ArrHeader {
        dtype: dtype.to_string(),
        shape: [h, w],
        chunk_rows: CHUNK_ROWS,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + h * w * elem_size);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let mut row = 0usize;
    while row < h {
        let rows = CHUNK_ROWS.min(h - row);
        let payload: Vec<u8> = match data {
            ArrData::F32(v) => v[row * w..(row + rows) * w]
                .iter()
                .flat_map(|x| x.to_le_bytes())
                .collect(),
            ArrData::U8(v) => v[row * w..(row + rows) * w].to_vec(),
        };
        buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        buf.extend_from_slice(&payload);
        row += rows;
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_arr(path: &Path) -> Result<(usize, usize, ArrData)> {
    let malformed = |message: &str| Error::Malformed {
        what: "array container",
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(malformed("missing magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(malformed("truncated header"));
    }
    let header: ArrHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| malformed(&format!("bad header: {e}")))?;
    let [h, w] = header.shape;
    let elem_size = match header.dtype.as_str() {
        "f32" => 4,
        "u8" => 1,
        other => return Err(malformed(&format!("unknown dtype {other}"))),
    };
    let mut cursor = 12 + header_len;
    let mut raw = Vec::with_capacity(h * w * elem_size);
    let mut row = 0usize;
    while row < h {
        let rows = header.chunk_rows.min(h - row);
        let expect = rows * w * elem_size;
        if bytes.len() < cursor + 8 + expect {
            return Err(malformed("truncated chunk"));
        }
        let len = u32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[cursor + 4..cursor + 8].try_into().unwrap());
        if len != expect {
            return Err(malformed("chunk length mismatch"));
        }
        let payload = &bytes[cursor + 8..cursor + 8 + len];
        if crc32fast::hash(payload) != crc {
            return Err(malformed("chunk crc mismatch (corrupted artifact)"));
        }
        raw.extend_from_slice(payload);
        cursor += 8 + len;
        row += rows;
    }
    let data = match header.dtype.as_str() {
        "f32" => ArrData::F32(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        _ => ArrData::U8(raw),
    };
    Ok((h, w, data))
}

pub fn write_f32_grid(path: &Path, grid: &Grid2<f32>) -> Result<()> {
    write_arr(path, grid.shape(), &ArrData::F32(grid.as_slice().to_vec()))
}

pub fn read_f32_grid(path: &Path) -> Result<Grid2<f32>> {
    let (h, w, data) = read_arr(path)?;
    match data {
        ArrData::F32(v) => Ok(Grid2::from_vec(h, w, v)?),
        ArrData::U8(_) => Err(Error::Malformed {
            what: "array container",
            path: path.to_path_buf(),
            message: "expected f32 payload, found u8".to_string(),
        }),
    }
}

pub fn write_u8_grid(path: &Path, grid: &Grid2<u8>) -> Result<()> {
    write_arr(path, grid.shape(), &ArrData::U8(grid.as_slice().to_vec()))
}

pub fn read_u8_grid(path: &Path) -> Result<Grid2<u8>> {
    let (h, w, data) = read_arr(path)?;
    match data {
        ArrData::U8(v) => Ok(Grid2::from_vec(h, w, v)?),
        ArrData::F32(_) => Err(Error::Malformed {
            what: "array container",
            path: path.to_path_buf(),
            message: "expected u8 payload, found f32".to_string(),
        }),
    }
}

/// Per-sample metadata sidecar.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub value_range: (f32, f32),
    pub spacing_mm: (f32, f32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One manifest line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub domain: Domain,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
            what: "manifest",
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Root directory helpers for the sample layout.
pub fn sample_dir(root: &Path, id: &str) -> PathBuf {
    root.join("samples").join(id)
}

pub fn write_sample(root: &Path, image: &Image2D, mask: Option<&BinaryMask>) -> Result<()> {
    let dir = sample_dir(root, &image.id);
    write_f32_grid(&dir.join("image.arr"), &image.pixels)?;
    if let Some(mask) = mask {
        write_u8_grid(&dir.join("mask.arr"), &mask.pixels)?;
    }
    let meta = SampleMeta {
        id: image.id.clone(),
        value_range: image.value_range,
        spacing_mm: image.spacing_mm,
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(meta_path, e))
}

pub fn read_image(root: &Path, id: &str) -> Result<Image2D> {
    let dir = sample_dir(root, id);
    let meta_path = dir.join("meta.json");
    let meta: SampleMeta = serde_json::from_slice(
        &fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )?;
    let pixels = read_f32_grid(&dir.join("image.arr"))?;
    Ok(Image2D {
        pixels,
        value_range: meta.value_range,
        spacing_mm: meta.spacing_mm,
        id: meta.id,
    })
}

pub fn read_mask(root: &Path, id: &str) -> Result<BinaryMask> {
    let pixels = read_u8_grid(&sample_dir(root, id).join("mask.arr"))?;
    Ok(BinaryMask::new(pixels, id))
}

/// Append-style JSONL writer for logs and provenance records.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Malformed {
            what: "jsonl",
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sfda_core::seed;

    #[test]
    fn f32_arrays_roundtrip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.arr");
        let mut rng = seed::rng(3);
        let grid = Grid2::from_fn(37, 21, |_, _| seed::standard_normal(&mut rng));
        write_f32_grid(&path, &grid).unwrap();
        let back = read_f32_grid(&path).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn u8_arrays_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.arr");
        let grid = Grid2::from_fn(16, 16, |r, c| ((r + c) % 2) as u8);
        write_u8_grid(&path, &grid).unwrap();
        assert_eq!(read_u8_grid(&path).unwrap(), grid);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.arr");
        write_f32_grid(&path, &Grid2::filled(20, 20, 0.5f32)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        let err = read_f32_grid(&path).unwrap_err();
        assert!(err.to_string().contains("crc"), "{err}");
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let records = vec![
            ManifestRecord {
                id: "a".into(),
                split: Split::Train,
                domain: Domain::Source,
            },
            ManifestRecord {
                id: "b".into(),
                split: Split::Test,
                domain: Domain::Target,
            },
        ];
        write_manifest(&path, &records).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].id, "b");
        assert_eq!(back[1].split, Split::Test);
    }
}
