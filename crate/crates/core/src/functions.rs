//! Declarative bounded functions of overlaps.
//!
//! `OverlapFn` is a function of a single overlap (the `psi` and `f_l` of the
//! identities), `MatrixFn` a function of a whole overlap matrix built as a
//! scaled product of pairwise factors, and `WeightedFn` additionally reads
//! partition weights. Replica indices in configs are 1-based.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::overlap::OverlapMatrix;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OverlapFn {
    Constant { value: f64 },
    /// `scale * I(x >= at)`
    Threshold {
        at: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `scale * I(|x - center| < half_width)`
    Window {
        center: f64,
        half_width: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `sum_k coeffs[k] * x^k`
    Polynomial { coeffs: Vec<f64> },
}

impl OverlapFn {
    pub fn threshold(at: f64) -> Self {
        OverlapFn::Threshold { at, scale: 1.0 }
    }

    pub fn window(center: f64, half_width: f64) -> Self {
        OverlapFn::Window { center, half_width, scale: 1.0 }
    }

    pub fn zero() -> Self {
        OverlapFn::Constant { value: 0.0 }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            OverlapFn::Constant { value } => *value,
            OverlapFn::Threshold { at, scale } => {
                if x >= *at {
                    *scale
                } else {
                    0.0
                }
            }
            OverlapFn::Window { center, half_width, scale } => {
                if (x - center).abs() < *half_width {
                    *scale
                } else {
                    0.0
                }
            }
            OverlapFn::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c),
        }
    }

    /// Uniform bound of `|f|` on `[-q_star, q_star]`.
    pub fn bound(&self, q_star: f64) -> f64 {
        match self {
            OverlapFn::Constant { value } => value.abs(),
            OverlapFn::Threshold { scale, .. } | OverlapFn::Window { scale, .. } => scale.abs(),
            OverlapFn::Polynomial { coeffs } => {
                let r = q_star.abs();
                coeffs.iter().enumerate().map(|(k, c)| c.abs() * r.powi(k as i32)).sum()
            }
        }
    }

    /// Multiplies the function by `t`.
    pub fn scaled(&self, t: f64) -> Self {
        match self {
            OverlapFn::Constant { value } => OverlapFn::Constant { value: value * t },
            OverlapFn::Threshold { at, scale } => OverlapFn::Threshold { at: *at, scale: scale * t },
            OverlapFn::Window { center, half_width, scale } => {
                OverlapFn::Window { center: *center, half_width: *half_width, scale: scale * t }
            }
            OverlapFn::Polynomial { coeffs } => OverlapFn::Polynomial { coeffs: coeffs.iter().map(|c| c * t).collect() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = match self {
            OverlapFn::Constant { value } => value.is_finite(),
            OverlapFn::Threshold { at, scale } => at.is_finite() && scale.is_finite(),
            OverlapFn::Window { center, half_width, scale } => {
                if !(*half_width > 0.0) {
                    return invalid("window half_width must be positive");
                }
                center.is_finite() && half_width.is_finite() && scale.is_finite()
            }
            OverlapFn::Polynomial { coeffs } => coeffs.iter().all(|c| c.is_finite()),
        };
        if finite {
            Ok(())
        } else {
            invalid("function parameters must be finite")
        }
    }
}

/// One pairwise factor `f(R_{i,j})` of a [`MatrixFn`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFactor {
    pub i: usize,
    pub j: usize,
    pub f: OverlapFn,
}

/// `scale * prod_k f_k(R_{i_k, j_k})`; the empty product is the constant `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixFn {
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub factors: Vec<PairFactor>,
}

impl MatrixFn {
    pub fn constant(value: f64) -> Self {
        MatrixFn { scale: value, factors: Vec::new() }
    }

    /// Single factor `f(R_{i,j})`.
    pub fn pair(i: usize, j: usize, f: OverlapFn) -> Self {
        MatrixFn { scale: 1.0, factors: vec![PairFactor { i, j, f }] }
    }

    pub fn and(mut self, i: usize, j: usize, f: OverlapFn) -> Self {
        self.factors.push(PairFactor { i, j, f });
        self
    }

    /// Evaluates on the leading block of `r` (which may hold extra replicas).
    #[inline]
    pub fn eval(&self, r: &OverlapMatrix) -> f64 {
        let mut v = self.scale;
        for PairFactor { i, j, f } in &self.factors {
            v *= f.eval(r.get(i - 1, j - 1));
        }
        v
    }

    pub fn bound(&self, q_star: f64) -> f64 {
        self.factors.iter().fold(self.scale.abs(), |acc, p| acc * p.f.bound(q_star))
    }

    /// Largest replica index referenced.
    pub fn arity(&self) -> usize {
        self.factors.iter().map(|p| p.i.max(p.j)).max().unwrap_or(0)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !self.scale.is_finite() {
            return invalid("scale must be finite");
        }
        for p in &self.factors {
            if p.i == 0 || p.j == 0 || p.i > n || p.j > n {
                return invalid(format!("factor R_({},{}) outside 1..={n}", p.i, p.j));
            }
            if p.i == p.j {
                return invalid(format!("factor R_({},{}) is a self-overlap", p.i, p.j));
            }
            p.f.validate()?;
        }
        Ok(())
    }
}

/// Open window `W_cell in (lo, hi)` on a partition weight (cells are 1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightWindow {
    pub cell: usize,
    pub lo: f64,
    pub hi: f64,
}

/// `m(R^n) * prod I(W_cell in (lo, hi))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedFn {
    pub overlap: MatrixFn,
    #[serde(default)]
    pub windows: Vec<WeightWindow>,
}

impl WeightedFn {
    pub fn eval(&self, r: &OverlapMatrix, w: &[f64]) -> f64 {
        let inside = self.windows.iter().all(|win| {
            let x = w[win.cell - 1];
            x > win.lo && x < win.hi
        });
        if inside {
            self.overlap.eval(r)
        } else {
            0.0
        }
    }

    pub fn validate(&self, n: usize, cells: usize) -> Result<()> {
        self.overlap.validate(n)?;
        for win in &self.windows {
            if win.cell == 0 || win.cell > cells {
                return invalid(format!("weight window references cell {} of {cells}", win.cell));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_and_window() {
        let f = OverlapFn::threshold(0.5);
        assert_eq!(f.eval(0.5), 1.0);
        assert_eq!(f.eval(0.49), 0.0);
        let w = OverlapFn::window(0.8, 0.01);
        assert_eq!(w.eval(0.8), 1.0);
        assert_eq!(w.eval(0.79), 0.0);
        assert_eq!(OverlapFn::threshold(0.5).scaled(0.25).eval(0.7), 0.25);
    }

    #[test]
    fn polynomial_horner() {
        let p = OverlapFn::Polynomial { coeffs: vec![1.0, -2.0, 3.0] };
        assert_eq!(p.eval(2.0), 1.0 - 4.0 + 12.0);
        assert_eq!(p.bound(0.5), 1.0 + 1.0 + 0.75);
    }

    #[test]
    fn matrix_fn_product() {
        let r = OverlapMatrix::from_fn(3, 0.8, |i, j| if (i, j) == (0, 1) { 0.8 } else { 0.2 });
        let f = MatrixFn::pair(1, 2, OverlapFn::window(0.8, 0.01)).and(2, 3, OverlapFn::threshold(0.5));
        assert_eq!(f.eval(&r), 0.0);
        let g = MatrixFn::pair(1, 2, OverlapFn::window(0.8, 0.01)).and(1, 3, OverlapFn::window(0.2, 0.01));
        assert_eq!(g.eval(&r), 1.0);
        assert_eq!(MatrixFn::constant(2.0).eval(&r), 2.0);
        assert_eq!(g.arity(), 3);
        assert!(g.validate(2).is_err());
        assert!(MatrixFn::pair(1, 1, OverlapFn::zero()).validate(2).is_err());
    }

    #[test]
    fn weighted_windows_are_open() {
        let r = OverlapMatrix::from_fn(2, 0.8, |_, _| 0.8);
        let f = WeightedFn { overlap: MatrixFn::constant(1.0), windows: vec![WeightWindow { cell: 1, lo: 0.2, hi: 0.8 }] };
        assert_eq!(f.eval(&r, &[0.5, 0.5]), 1.0);
        assert_eq!(f.eval(&r, &[0.8, 0.2]), 0.0);
        assert!(f.validate(2, 1).is_ok());
        assert!(f.validate(2, 0).is_err());
    }

    #[test]
    fn config_syntax() {
        let f: OverlapFn = serde_json::from_str(r#"{"kind":"threshold","at":0.5}"#).unwrap();
        assert_eq!(f, OverlapFn::threshold(0.5));
        let m: MatrixFn = serde_json::from_str(r#"{"factors":[{"i":1,"j":2,"f":{"kind":"window","center":0.8,"half_width":0.01}}]}"#).unwrap();
        assert_eq!(m.scale, 1.0);
    }
}
