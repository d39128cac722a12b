//! Index layout of the stacked vector `z_i = col(δ_i, u_i, u_{-i}, w_i, w_{-i})`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMap {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// Neighbor indices (0-based) in the order their blocks appear.
    pub neighbors: Vec<usize>,
}

impl BlockMap {
    pub fn new(n: usize, p: usize, q: usize, neighbors: Vec<usize>) -> Self {
        Self { n, p, q, neighbors }
    }

    pub fn n_neighbors(&self) -> usize {
        self.neighbors.len()
    }

    pub fn dim(&self) -> usize {
        let k = 1 + self.n_neighbors();
        self.n + self.p * k + self.q * k
    }

    pub fn delta(&self) -> Range<usize> {
        0..self.n
    }

    pub fn u_self(&self) -> Range<usize> {
        self.n..self.n + self.p
    }

    pub fn u_neighbors(&self) -> Range<usize> {
        let s = self.n + self.p;
        s..s + self.p * self.n_neighbors()
    }

    pub fn u_neighbor(&self, k: usize) -> Range<usize> {
        let s = self.n + self.p + k * self.p;
        s..s + self.p
    }

    pub fn w_self(&self) -> Range<usize> {
        let s = self.n + self.p * (1 + self.n_neighbors());
        s..s + self.q
    }

    pub fn w_neighbors(&self) -> Range<usize> {
        let s = self.w_self().end;
        s..s + self.q * self.n_neighbors()
    }

    pub fn w_neighbor(&self, k: usize) -> Range<usize> {
        let s = self.w_self().end + k * self.q;
        s..s + self.q
    }

    /// All action coordinates `(u_i, u_{-i}, w_i, w_{-i})`.
    pub fn actions(&self) -> Range<usize> {
        self.n..self.dim()
    }

    /// Everything agent `i` treats as adversarial in the minmax game:
    /// `(u_{-i}, w_i, w_{-i})`, which is contiguous in this layout.
    pub fn adversarial(&self) -> Range<usize> {
        self.u_neighbors().start..self.dim()
    }

    /// Named, ordered partition of `0..dim()`.
    pub fn named_ranges(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("delta".to_string(), self.delta()),
            ("u_self".to_string(), self.u_self()),
        ];
        for (k, j) in self.neighbors.iter().enumerate() {
            out.push((format!("u_{}", j + 1), self.u_neighbor(k)));
        }
        out.push(("w_self".to_string(), self.w_self()));
        for (k, j) in self.neighbors.iter().enumerate() {
            out.push((format!("w_{}", j + 1), self.w_neighbor(k)));
        }
        out
    }

    pub fn assemble(
        &self,
        delta: &Vector,
        u_self: &Vector,
        u_nb: &[Vector],
        w_self: &Vector,
        w_nb: &[Vector],
    ) -> Result<Vector> {
        let check = |context: &'static str, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { context, expected, got })
            }
        };
        check("delta", self.n, delta.len())?;
        check("u_self", self.p, u_self.len())?;
        check("w_self", self.q, w_self.len())?;
        check("neighbor controls", self.n_neighbors(), u_nb.len())?;
        check("neighbor disturbances", self.n_neighbors(), w_nb.len())?;
        let mut z = Vector::zeros(self.dim());
        z.rows_mut(0, self.n).copy_from(delta);
        z.rows_mut(self.u_self().start, self.p).copy_from(u_self);
        for (k, u) in u_nb.iter().enumerate() {
            check("neighbor control", self.p, u.len())?;
            z.rows_mut(self.u_neighbor(k).start, self.p).copy_from(u);
        }
        z.rows_mut(self.w_self().start, self.q).copy_from(w_self);
        for (k, w) in w_nb.iter().enumerate() {
            check("neighbor disturbance", self.q, w.len())?;
            z.rows_mut(self.w_neighbor(k).start, self.q).copy_from(w);
        }
        Ok(z)
    }

    /// Number of free parameters of a symmetric `dim × dim` kernel.
    pub fn n_params(&self) -> usize {
        let m = self.dim();
        m * (m + 1) / 2
    }
}

/// Copies the sub-block `rows × cols` of `m`.
pub fn sub(m: &Mat, rows: Range<usize>, cols: Range<usize>) -> Mat {
    m.view((rows.start, cols.start), (rows.len(), cols.len()))
        .into_owned()
}

/// Half-vectorised quadratic features: `zᵀ S z = features(z) · half_vec(S)`.
/// Off-diagonal entries carry a factor of two.
pub fn quadratic_features(z: &Vector) -> Vector {
    let m = z.len();
    let mut out = Vector::zeros(m * (m + 1) / 2);
    let mut idx = 0;
    for a in 0..m {
        for b in a..m {
            out[idx] = if a == b { z[a] * z[a] } else { 2.0 * z[a] * z[b] };
            idx += 1;
        }
    }
    out
}

pub fn half_vec(s: &Mat) -> Vector {
    let m = s.nrows();
    let mut out = Vector::zeros(m * (m + 1) / 2);
    let mut idx = 0;
    for a in 0..m {
        for b in a..m {
            out[idx] = s[(a, b)];
            idx += 1;
        }
    }
    out
}

pub fn from_half_vec(h: &Vector, m: usize) -> Mat {
    let mut s = Mat::zeros(m, m);
    let mut idx = 0;
    for a in 0..m {
        for b in a..m {
            s[(a, b)] = h[idx];
            s[(b, a)] = h[idx];
            idx += 1;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_partition_the_kernel() {
        let b = BlockMap::new(2, 1, 1, vec![1, 3]);
        assert_eq!(b.dim(), 8);
        let ranges = b.named_ranges();
        let mut next = 0;
        for (_, r) in &ranges {
            assert_eq!(r.start, next);
            next = r.end;
        }
        assert_eq!(next, b.dim());
        assert_eq!(b.adversarial(), 3..8);
        assert_eq!(b.n_params(), 36);
    }

    #[test]
    fn agent4_block_widths() {
        let b = BlockMap::new(2, 1, 1, vec![0]);
        let widths: Vec<usize> = b.named_ranges().iter().map(|(_, r)| r.len()).collect();
        assert_eq!(widths, vec![2, 1, 1, 1, 1]);
    }

    #[test]
    fn features_reproduce_quadratic_form() {
        let z = Vector::from_vec(vec![0.3, -1.2, 2.0]);
        let s = Mat::from_row_slice(3, 3, &[2.0, 0.5, -1.0, 0.5, 1.0, 0.25, -1.0, 0.25, -3.0]);
        let lhs = z.dot(&(&s * &z));
        let rhs = quadratic_features(&z).dot(&half_vec(&s));
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(from_half_vec(&half_vec(&s), 3), s);
    }
}
