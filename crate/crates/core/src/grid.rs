//! Dense row-major 2D array used by every domain type.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// A dense `H x W` grid stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid2<T> {
    /// Grid filled with a constant value.
    pub fn filled(h: usize, w: usize, value: T) -> Self {
        Grid2 {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    /// Wrap an existing row-major buffer.
    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::BadLength {
                h,
                w,
                len: data.len(),
            });
        }
        Ok(Grid2 { h, w, data })
    }

    /// Build a grid by evaluating `f(row, col)`.
    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Grid2 { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.w + c] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape<U: Copy>(&self, other: &Grid2<U>) -> bool {
        self.shape() == other.shape()
    }

    /// Elementwise map into a new grid.
    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid2<U> {
        Grid2 {
            h: self.h,
            w: self.w,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Iterate `(row, col, value)`.
    pub fn iter_indexed(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        let w = self.w;
        self.data
            .iter()
            .copied()
            .enumerate()
            .map(move |(i, v)| (i / w, i % w, v))
    }
}

/// Shape-check two grids, with a context string for the error.
pub fn check_same_shape<A: Copy, B: Copy>(
    a: &Grid2<A>,
    b: &Grid2<B>,
    context: &'static str,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
            context,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Grid2::from_vec(2, 3, vec![0u8; 5]).is_err());
        assert!(Grid2::from_vec(2, 3, vec![0u8; 6]).is_ok());
    }

    #[test]
    fn indexing_is_row_major() {
        let g = Grid2::from_fn(2, 3, |r, c| (r * 10 + c) as i32);
        assert_eq!(g.get(0, 2), 2);
        assert_eq!(g.get(1, 0), 10);
        assert_eq!(g.as_slice(), &[0, 1, 2, 10, 11, 12]);
    }
}
