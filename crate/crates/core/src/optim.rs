//! Derivative-free minimizers.
//!
//! [`Cobyla`] is Powell's linear-approximation trust-region method restricted
//! to the unconstrained case: a simplex of `n + 1` points defines a linear
//! model, the trial step moves a distance `rho` down the model gradient, and
//! `rho` shrinks once steps stop paying off on a well-shaped simplex.
//! [`NelderMead`] is the classic simplex search and serves as a cross-check.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
}

/// Objective callback. Errors abort the run.
pub type ObjectiveFn<'a> = dyn FnMut(&[f64]) -> Result<f64> + 'a;

pub trait Minimizer {
    fn minimize(&self, f: &mut ObjectiveFn<'_>, x0: &[f64], max_evals: usize) -> Result<OptimOutcome>;
}

/// Counts evaluations, rejects non-finite values and remembers the best point seen.
struct Tracked<'a, 'b> {
    f: &'a mut ObjectiveFn<'b>,
    evals: usize,
    best_x: Vec<f64>,
    best_f: f64,
}

impl<'a, 'b> Tracked<'a, 'b> {
    fn new(f: &'a mut ObjectiveFn<'b>) -> Self {
        Tracked {
            f,
            evals: 0,
            best_x: Vec::new(),
            best_f: f64::INFINITY,
        }
    }

    fn eval(&mut self, x: &[f64]) -> Result<f64> {
        let v = (self.f)(x)?;
        self.evals += 1;
        if !v.is_finite() {
            return Err(Error::Optimization {
                value: v,
                params: x.to_vec(),
            });
        }
        if v < self.best_f {
            self.best_f = v;
            self.best_x = x.to_vec();
        }
        Ok(v)
    }

    fn outcome(self) -> OptimOutcome {
        OptimOutcome {
            x: self.best_x,
            f: self.best_f,
            evals: self.evals,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cobyla {
    pub rho_begin: f64,
    pub rho_end: f64,
}

impl Default for Cobyla {
    fn default() -> Self {
        Cobyla {
            rho_begin: 1.0,
            rho_end: 1e-4,
        }
    }
}

// Simplex acceptability constants from Powell's method.
const ALPHA: f64 = 0.25;
const BETA: f64 = 2.1;
const GAMMA: f64 = 0.5;
const GOOD_RATIO: f64 = 0.1;

struct Simplex {
    /// pivot (best) vertex
    x0: Vec<f64>,
    f0: f64,
    /// other vertices as displacements from the pivot
    disp: Vec<Vec<f64>>,
    fv: Vec<f64>,
}

impl Simplex {
    fn n(&self) -> usize {
        self.x0.len()
    }

    /// Columns are the displacement vectors.
    fn displacement_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.disp[j][i])
    }

    fn vertex(&self, j: usize) -> Vec<f64> {
        self.x0.iter().zip(&self.disp[j]).map(|(a, b)| a + b).collect()
    }

    /// Makes the lowest vertex the pivot.
    fn repivot(&mut self) {
        let Some((j, _)) = self
            .fv
            .iter()
            .enumerate()
            .filter(|(_, &v)| v < self.f0)
            .min_by(|a, b| a.1.total_cmp(b.1))
        else {
            return;
        };
        let shift = self.disp[j].clone();
        let new_x0 = self.vertex(j);
        for (k, d) in self.disp.iter_mut().enumerate() {
            if k == j {
                // old pivot seen from the new one
                for v in d.iter_mut() {
                    *v = -*v;
                }
            } else {
                for (v, s) in d.iter_mut().zip(&shift) {
                    *v -= s;
                }
            }
        }
        std::mem::swap(&mut self.fv[j], &mut self.f0);
        self.x0 = new_x0;
    }

    fn replace(&mut self, j: usize, step: Vec<f64>, value: f64) {
        self.disp[j] = step;
        self.fv[j] = value;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Minimizer for Cobyla {
    fn minimize(&self, f: &mut ObjectiveFn<'_>, x0: &[f64], max_evals: usize) -> Result<OptimOutcome> {
        let n = x0.len();
        let mut t = Tracked::new(f);
        if n == 0 || max_evals == 0 {
            if max_evals > 0 {
                t.eval(x0)?;
            }
            return Ok(t.outcome());
        }
        let mut rho = self.rho_begin;
        let f0 = t.eval(x0)?;
        let mut s = Simplex {
            x0: x0.to_vec(),
            f0,
            disp: Vec::with_capacity(n),
            fv: Vec::with_capacity(n),
        };
        for j in 0..n {
            if t.evals >= max_evals {
                return Ok(t.outcome());
            }
            let mut d = vec![0.0; n];
            d[j] = rho;
            let xj: Vec<f64> = s.x0.iter().zip(&d).map(|(a, b)| a + b).collect();
            let v = t.eval(&xj)?;
            s.disp.push(d);
            s.fv.push(v);
        }

        while t.evals < max_evals {
            s.repivot();
            let dmat = s.displacement_matrix();
            let Some(inv) = dmat.clone().try_inverse() else {
                // collapsed simplex: rebuild around the pivot
                for j in 0..n {
                    let mut d = vec![0.0; n];
                    d[j] = rho;
                    s.disp[j] = d;
                    if t.evals >= max_evals {
                        return Ok(t.outcome());
                    }
                    s.fv[j] = t.eval(&s.vertex(j))?;
                }
                continue;
            };
            let df = DVector::from_iterator(n, s.fv.iter().map(|v| v - s.f0));
            // D^T g = df
            let grad = inv.transpose() * &df;

            // distance of each vertex to the face opposite it, and its length
            let face_dist: Vec<f64> = (0..n).map(|j| 1.0 / inv.row(j).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
            let lengths: Vec<f64> = s.disp.iter().map(|d| norm(d)).collect();
            let acceptable = face_dist.iter().all(|&v| v >= ALPHA * rho) && lengths.iter().all(|&l| l <= BETA * rho);

            let gnorm = grad.norm();
            if gnorm > 0.0 && gnorm.is_finite() {
                let step: Vec<f64> = grad.iter().map(|g| -rho * g / gnorm).collect();
                let predicted = rho * gnorm;
                let x_new: Vec<f64> = s.x0.iter().zip(&step).map(|(a, b)| a + b).collect();
                let f_new = t.eval(&x_new)?;
                let ratio = (s.f0 - f_new) / predicted;

                // vertex whose replacement keeps the simplex volume largest
                let lambda = &inv * DVector::from_column_slice(&step);
                let mut best_j = None;
                let mut best_w = if f_new < s.f0 { 0.0 } else { 1.0 };
                for j in 0..n {
                    let far: Vec<f64> = s.disp[j].iter().zip(&step).map(|(a, b)| a - b).collect();
                    let w = lambda[j].abs() * (norm(&far) / rho).max(1.0).powi(3);
                    if w > best_w {
                        best_w = w;
                        best_j = Some(j);
                    }
                }
                if let Some(j) = best_j {
                    s.replace(j, step, f_new);
                }
                if ratio >= GOOD_RATIO {
                    continue;
                }
            }

            if acceptable || gnorm == 0.0 {
                if rho <= self.rho_end {
                    break;
                }
                rho *= 0.5;
                if rho <= 1.5 * self.rho_end {
                    rho = self.rho_end;
                }
                continue;
            }

            // geometry improvement: move the worst-placed vertex perpendicular to its face
            let j = match lengths
                .iter()
                .enumerate()
                .filter(|(_, &l)| l > BETA * rho)
                .max_by(|a, b| a.1.total_cmp(b.1))
            {
                Some((j, _)) => j,
                None => face_dist
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(j, _)| j)
                    .unwrap_or(0),
            };
            let row: Vec<f64> = inv.row(j).iter().copied().collect();
            let rn = norm(&row);
            let mut dir: Vec<f64> = row.iter().map(|r| GAMMA * rho * r / rn).collect();
            // pick the sign the linear model prefers
            let slope: f64 = dir.iter().zip(grad.iter()).map(|(a, b)| a * b).sum();
            if slope > 0.0 {
                for v in &mut dir {
                    *v = -*v;
                }
            }
            if t.evals >= max_evals {
                break;
            }
            let xj: Vec<f64> = s.x0.iter().zip(&dir).map(|(a, b)| a + b).collect();
            let v = t.eval(&xj)?;
            s.replace(j, dir, v);
        }
        Ok(t.outcome())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NelderMead {
    pub initial_step: f64,
    pub f_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            initial_step: 0.5,
            f_tol: 1e-10,
        }
    }
}

impl Minimizer for NelderMead {
    fn minimize(&self, f: &mut ObjectiveFn<'_>, x0: &[f64], max_evals: usize) -> Result<OptimOutcome> {
        let n = x0.len();
        let mut t = Tracked::new(f);
        if max_evals == 0 {
            return Ok(t.outcome());
        }
        let mut pts: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        pts.push((x0.to_vec(), t.eval(x0)?));
        for j in 0..n {
            if t.evals >= max_evals {
                return Ok(t.outcome());
            }
            let mut x = x0.to_vec();
            x[j] += self.initial_step;
            let v = t.eval(&x)?;
            pts.push((x, v));
        }
        while t.evals < max_evals {
            pts.sort_by(|a, b| a.1.total_cmp(&b.1));
            if (pts[n].1 - pts[0].1).abs() <= self.f_tol {
                break;
            }
            let centroid: Vec<f64> = (0..n).map(|i| pts[..n].iter().map(|p| p.0[i]).sum::<f64>() / n as f64).collect();
            let along = |c: f64| -> Vec<f64> { centroid.iter().zip(&pts[n].0).map(|(m, w)| m + c * (m - w)).collect() };
            let xr = along(1.0);
            let fr = t.eval(&xr)?;
            if fr < pts[0].1 {
                if t.evals >= max_evals {
                    pts[n] = (xr, fr);
                    break;
                }
                let xe = along(2.0);
                let fe = t.eval(&xe)?;
                pts[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < pts[n - 1].1 {
                pts[n] = (xr, fr);
            } else {
                if t.evals >= max_evals {
                    break;
                }
                let (xc, fc) = if fr < pts[n].1 {
                    let x = along(0.5);
                    let v = t.eval(&x)?;
                    (x, v)
                } else {
                    let x = along(-0.5);
                    let v = t.eval(&x)?;
                    (x, v)
                };
                if fc < pts[n].1.min(fr) {
                    pts[n] = (xc, fc);
                } else {
                    let best = pts[0].0.clone();
                    for p in pts.iter_mut().skip(1) {
                        if t.evals >= max_evals {
                            break;
                        }
                        let x: Vec<f64> = best.iter().zip(&p.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
                        let v = t.eval(&x)?;
                        *p = (x, v);
                    }
                }
            }
        }
        Ok(t.outcome())
    }
}

/// Minimizer selection carried in training configurations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Optimizer {
    Cobyla(Cobyla),
    NelderMead(NelderMead),
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Cobyla(Cobyla::default())
    }
}

impl Minimizer for Optimizer {
    fn minimize(&self, f: &mut ObjectiveFn<'_>, x0: &[f64], max_evals: usize) -> Result<OptimOutcome> {
        match self {
            Optimizer::Cobyla(c) => c.minimize(f, x0, max_evals),
            Optimizer::NelderMead(m) => m.minimize(f, x0, max_evals),
        }
    }
}
