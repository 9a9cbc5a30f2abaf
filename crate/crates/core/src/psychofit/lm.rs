//! Box-constrained Levenberg-Marquardt on small dense problems.

use nalgebra::{DMatrix, DVector};

pub(crate) struct Problem<'a> {
    /// Weighted residuals at a parameter vector.
    pub residuals: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct Solution {
    pub x: Vec<f64>,
    pub sse: f64,
}

fn sse(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

impl Problem<'_> {
    fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Central-difference Jacobian; one-sided at a bound.
    fn jacobian(&self, x: &[f64], r0: &[f64]) -> DMatrix<f64> {
        let m = r0.len();
        let mut j = DMatrix::zeros(m, x.len());
        let mut probe = x.to_vec();
        for c in 0..x.len() {
            let h = 1e-6 * x[c].abs().max(1e-3);
            let up = (x[c] + h).min(self.upper[c]);
            let down = (x[c] - h).max(self.lower[c]);
            if up <= down {
                continue;
            }
            probe[c] = up;
            let ru = (self.residuals)(&probe);
            probe[c] = down;
            let rd = (self.residuals)(&probe);
            probe[c] = x[c];
            for i in 0..m {
                j[(i, c)] = (ru[i] - rd[i]) / (up - down);
            }
        }
        j
    }

    /// Iterates until the largest relative parameter step drops below
    /// `1e-6` or `max_iter` is reached.
    pub fn solve(&self, x0: &[f64], max_iter: usize) -> Solution {
        let mut x = x0.to_vec();
        self.project(&mut x);
        let mut r = (self.residuals)(&x);
        let mut cost = sse(&r);
        let mut mu = 1e-3;
        for _ in 0..max_iter {
            let j = self.jacobian(&x, &r);
            let jt = j.transpose();
            let jtj = &jt * &j;
            let g = &jt * DVector::from_column_slice(&r);
            let mut improved = false;
            for _ in 0..30 {
                let mut a = jtj.clone();
                for d in 0..x.len() {
                    a[(d, d)] += mu * jtj[(d, d)].max(1e-12);
                }
                let Some(step) = a.lu().solve(&(-&g)) else {
                    mu *= 10.0;
                    continue;
                };
                let mut cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                self.project(&mut cand);
                let rc = (self.residuals)(&cand);
                let cc = sse(&rc);
                if cc.is_finite() && cc <= cost {
                    let rel = x
                        .iter()
                        .zip(&cand)
                        .map(|(a, b)| (a - b).abs() / a.abs().max(1e-12))
                        .fold(0.0, f64::max);
                    x = cand;
                    r = rc;
                    cost = cc;
                    mu = (mu / 3.0).max(1e-12);
                    improved = true;
                    if rel < 1e-6 {
                        return Solution { x, sse: cost };
                    }
                    break;
                }
                mu *= 4.0;
            }
            if !improved {
                break;
            }
        }
        Solution { x, sse: cost }
    }
}
