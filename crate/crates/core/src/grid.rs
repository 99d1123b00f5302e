//! Periodic lattice geometry.
//!
//! Sites are stored row-major: the last axis varies fastest. All fields in the
//! crate are flat `Vec<f64>` buffers indexed by [`LatticeGrid::index`], with
//! any per-site components stored contiguously after the site index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeGrid {
    dim: usize,
    side: usize,
}

impl LatticeGrid {
    pub fn new(dim: usize, side: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidGrid("dimension must be at least 1".into()));
        }
        if side < 4 || !side.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "side must be even and at least 4, got {side}"
            )));
        }
        let total = (side as u128).checked_pow(dim as u32);
        match total {
            Some(t) if t <= (1u128 << 34) => Ok(Self { dim, side }),
            _ => Err(Error::InvalidGrid(format!(
                "{side}^{dim} sites do not fit in memory"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Lattice spacing in coefficient units.
    pub fn spacing(&self) -> f64 {
        1.0
    }

    pub fn len(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Stride of `axis` in the flat layout.
    pub fn stride(&self, axis: usize) -> usize {
        self.side.pow((self.dim - 1 - axis) as u32)
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .fold(0, |acc, &c| acc * self.side + (c % self.side))
    }

    /// Index of a site given signed coordinates, wrapped onto the torus.
    pub fn index_wrapped(&self, coords: &[i64]) -> usize {
        let n = self.side as i64;
        coords
            .iter()
            .fold(0, |acc, &c| acc * self.side + c.rem_euclid(n) as usize)
    }

    pub fn coords(&self, mut index: usize, out: &mut [usize]) {
        for axis in (0..self.dim).rev() {
            out[axis] = index % self.side;
            index /= self.side;
        }
    }

    /// Coordinate of `index` along `axis`.
    pub fn coord(&self, index: usize, axis: usize) -> usize {
        (index / self.stride(axis)) % self.side
    }

    /// Index of the forward neighbour `x + e_axis`.
    #[inline]
    pub fn forward(&self, index: usize, axis: usize) -> usize {
        let stride = self.stride(axis);
        if self.coord(index, axis) + 1 == self.side {
            index + stride - self.side * stride
        } else {
            index + stride
        }
    }

    /// Index of the backward neighbour `x - e_axis`.
    #[inline]
    pub fn backward(&self, index: usize, axis: usize) -> usize {
        let stride = self.stride(axis);
        if self.coord(index, axis) == 0 {
            index + self.side * stride - stride
        } else {
            index - stride
        }
    }

    /// Minimum-image signed displacement of a coordinate from the origin.
    pub fn min_image(&self, c: usize) -> i64 {
        let c = c as i64;
        let n = self.side as i64;
        if c > n / 2 {
            c - n
        } else {
            c
        }
    }

    /// Euclidean norm of the minimum-image displacement of site `index`.
    pub fn min_image_norm(&self, index: usize) -> f64 {
        let mut r2 = 0.0;
        for axis in 0..self.dim {
            let m = self.min_image(self.coord(index, axis)) as f64;
            r2 += m * m;
        }
        r2.sqrt()
    }

    /// Angular frequency `2 pi k / N` of the coordinate `k` along an axis.
    pub fn frequency(&self, k: usize) -> f64 {
        2.0 * std::f64::consts::PI * k as f64 / self.side as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_odd_or_tiny_sides() {
        assert!(LatticeGrid::new(2, 7).is_err());
        assert!(LatticeGrid::new(2, 2).is_err());
        assert!(LatticeGrid::new(0, 8).is_err());
        assert!(LatticeGrid::new(3, 8).is_ok());
    }

    #[test]
    fn neighbours_wrap() {
        let g = LatticeGrid::new(2, 4).unwrap();
        let i = g.index(&[3, 0]);
        assert_eq!(g.forward(i, 0), g.index(&[0, 0]));
        assert_eq!(g.backward(i, 1), g.index(&[3, 3]));
        assert_eq!(g.forward(g.backward(i, 1), 1), i);
        let mut c = [0; 2];
        g.coords(g.index(&[2, 1]), &mut c);
        assert_eq!(c, [2, 1]);
        assert_eq!(g.index_wrapped(&[-1, 5]), g.index(&[3, 1]));
    }
}
