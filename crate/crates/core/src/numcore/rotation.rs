use crate::error::{invalid, Result};
use crate::numcore::Matrix;

/// Per-row 2×2 rotations applied to fixed column pairs.
///
/// Row `r`, pair `p` = columns `(a, b)` maps `(x_a, x_b)` to
/// `(x_a·cos − x_b·sin, x_a·sin + x_b·cos)` with `cos = cos[r][p]`.
#[derive(Clone, Debug)]
pub struct PairRotation {
    pub(crate) pairs: Vec<(usize, usize)>,
    pub(crate) cos: Matrix,
    pub(crate) sin: Matrix,
}

impl PairRotation {
    pub fn new(pairs: Vec<(usize, usize)>, cos: Matrix, sin: Matrix) -> Result<Self> {
        if cos.shape() != sin.shape() || cos.cols() != pairs.len() {
            return Err(invalid("rotation tables must be rows x pairs"));
        }
        Ok(Self { pairs, cos, sin })
    }

    pub fn rows(&self) -> usize {
        self.cos.rows()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Rotates `x`; `inverse` applies the transposed rotation.
    pub fn apply(&self, x: &Matrix, inverse: bool) -> Result<Matrix> {
        if x.rows() != self.rows() {
            return Err(invalid(format!(
                "rotation prepared for {} rows, input has {}",
                self.rows(),
                x.rows()
            )));
        }
        if let Some(&(a, b)) = self.pairs.iter().find(|&&(a, b)| a >= x.cols() || b >= x.cols()) {
            return Err(invalid(format!("pair ({a},{b}) outside {} columns", x.cols())));
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            for (p, &(a, b)) in self.pairs.iter().enumerate() {
                let c = self.cos.get(r, p);
                let s = sign * self.sin.get(r, p);
                let (xa, xb) = (row[a], row[b]);
                row[a] = xa * c - xb * s;
                row[b] = xa * s + xb * c;
            }
        }
        Ok(out)
    }
}
