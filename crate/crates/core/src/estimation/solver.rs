//! Gauss-Newton over poses, time derivatives and landmarks.
//!
//! Frame variables are laid out as all pose perturbations first, then all
//! velocities, then all accelerations, so that the pose rows touched by one
//! landmark form a contiguous block for the Schur complement.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::models::{linearize, residual, MeasurementModel};
use super::prior::{covariance_inverse, prior_error, prior_jacobian, Flavor, KnotState, PriorConfig};
use crate::error::{MvoError, Result};
use crate::se3::exp_map;
use crate::StereoCalib;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub rel_cost_tol: f64,
    pub step_tol: f64,
    /// Landmarks are eliminated by Schur complement above this count.
    pub schur_threshold: usize,
    pub max_halvings: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            rel_cost_tol: 1e-6,
            step_tol: 1e-8,
            schur_threshold: 50,
            max_halvings: 12,
        }
    }
}

/// Observations of one landmark: `(window frame, stereo measurement)`.
#[derive(Debug, Clone)]
pub struct LandmarkTrack {
    pub observations: Vec<(usize, Vector3<f64>)>,
}

pub struct Problem<'a> {
    pub model: &'a dyn MeasurementModel,
    pub calib: &'a StereoCalib,
    pub flavor: Flavor,
    pub prior: &'a PriorConfig,
    pub dt: f64,
    pub tracks: &'a [LandmarkTrack],
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub knots: Vec<KnotState>,
    pub landmarks: Vec<Vector3<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
}

struct LandmarkBlock {
    a_ll: Matrix3<f64>,
    b_l: Vector3<f64>,
    /// Pose-landmark coupling `A_{k,l}` for every unlocked observing frame.
    cross: Vec<(usize, Matrix6x3<f64>)>,
    pose_diag: Vec<(usize, Matrix6<f64>, Vector6<f64>)>,
}

struct Evaluation {
    cost: f64,
    invalid: usize,
}

impl Problem<'_> {
    fn weight(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from_fn(|i, _| 1.0 / self.prior.r_diag[i]))
    }

    fn frame_dim(&self, n: usize) -> usize {
        6 * n * (self.flavor.order() + 1)
    }

    fn evaluate(&self, knots: &[KnotState], landmarks: &[Vector3<f64>]) -> Result<Evaluation> {
        let w = self.weight();
        // per-landmark terms are summed sequentially so the total does not
        // depend on how rayon splits the work
        let terms: Vec<(f64, usize)> = self
            .tracks
            .par_iter()
            .zip(landmarks.par_iter())
            .map(|(track, p)| {
                let mut cost = 0.0;
                let mut invalid = 0;
                for (k, y) in &track.observations {
                    match residual(self.model, self.calib, *k, &knots[*k].pose, p, y) {
                        Ok(e) => cost += 0.5 * e.dot(&(w * e)),
                        Err(_) => invalid += 1,
                    }
                }
                (cost, invalid)
            })
            .collect();
        let (cost, invalid) = terms.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        let mut total = cost;
        if self.flavor != Flavor::PoseOnly {
            let qinv = covariance_inverse(self.flavor, self.dt, &self.prior.qc_inverse());
            for pair in knots.windows(2) {
                let e = prior_error(self.flavor, &pair[0], &pair[1], self.dt)?;
                total += 0.5 * e.dot(&(&qinv * &e));
            }
        }
        Ok(Evaluation {
            cost: total,
            invalid,
        })
    }

    fn linearize_landmarks(&self, knots: &[KnotState], landmarks: &[Vector3<f64>]) -> Vec<LandmarkBlock> {
        let w = self.weight();
        self.tracks
            .par_iter()
            .zip(landmarks.par_iter())
            .map(|(track, p)| {
                let mut block = LandmarkBlock {
                    a_ll: Matrix3::zeros(),
                    b_l: Vector3::zeros(),
                    cross: Vec::with_capacity(track.observations.len()),
                    pose_diag: Vec::with_capacity(track.observations.len()),
                };
                for (k, y) in &track.observations {
                    let Ok((e, gp, gl)) = linearize(self.model, self.calib, *k, &knots[*k].pose, p, y)
                    else {
                        continue;
                    };
                    let gpw = gp.transpose() * w;
                    let glw = gl.transpose() * w;
                    block.a_ll += glw * gl;
                    block.b_l += glw * e;
                    if *k > 0 {
                        block.cross.push((*k, gpw * gl));
                        block.pose_diag.push((*k, gpw * gp, gpw * e));
                    }
                }
                block
            })
            .collect()
    }

    /// Frame-only normal equations: measurement pose blocks plus the prior.
    fn frame_system(
        &self,
        knots: &[KnotState],
        blocks: &[LandmarkBlock],
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = knots.len();
        let dim = self.frame_dim(n);
        let mut a = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        for block in blocks {
            for (k, h, g) in &block.pose_diag {
                let mut view = a.view_mut((6 * k, 6 * k), (6, 6));
                view += h;
                let mut bv = b.rows_mut(6 * k, 6);
                bv += g;
            }
        }
        if self.flavor != Flavor::PoseOnly {
            let order = self.flavor.order() + 1;
            let qinv = covariance_inverse(self.flavor, self.dt, &self.prior.qc_inverse());
            for k in 0..n - 1 {
                let e = prior_error(self.flavor, &knots[k], &knots[k + 1], self.dt)?;
                let jac = prior_jacobian(
                    self.flavor,
                    &knots[k],
                    &knots[k + 1],
                    self.dt,
                    self.prior.inv_jacobian,
                )?;
                let jt_q = jac.transpose() * &qinv;
                let h = &jt_q * &jac;
                let g = &jt_q * &e;
                // column block c of E maps to (knot, derivative)
                let offset = |c: usize| {
                    let (knot, deriv) = (k + c / order, c % order);
                    6 * (deriv * n + knot)
                };
                for r in 0..2 * order {
                    let mut bv = b.rows_mut(offset(r), 6);
                    bv += g.rows(6 * r, 6);
                    for c in 0..2 * order {
                        let mut view = a.view_mut((offset(r), offset(c)), (6, 6));
                        view += h.view((6 * r, 6 * c), (6, 6));
                    }
                }
            }
        }
        // gauge: lock the first pose
        for i in 0..6 {
            a.row_mut(i).fill(0.0);
            a.column_mut(i).fill(0.0);
            a[(i, i)] = 1.0;
            b[i] = 0.0;
        }
        Ok((a, b))
    }

    fn solve_schur(
        &self,
        knots: &[KnotState],
        blocks: &[LandmarkBlock],
    ) -> Result<(DVector<f64>, Vec<Vector3<f64>>)> {
        let (mut a, mut b) = self.frame_system(knots, blocks)?;
        let dim = a.nrows();
        let inverses: Vec<Matrix3<f64>> = blocks
            .iter()
            .map(|blk| blk.a_ll.try_inverse().ok_or(MvoError::RankDeficient))
            .collect::<Result<_>>()?;
        for (blk, inv) in blocks.iter().zip(&inverses) {
            if blk.cross.is_empty() {
                continue;
            }
            let m = blk.cross.len();
            let mut c = DMatrix::zeros(6 * m, 3);
            for (i, (_, cb)) in blk.cross.iter().enumerate() {
                c.view_mut((6 * i, 0), (6, 3)).copy_from(cb);
            }
            let ci = &c * inv;
            let frames: Vec<usize> = blk.cross.iter().map(|(k, _)| *k).collect();
            let contiguous = frames[m - 1] - frames[0] + 1 == m;
            if contiguous {
                let k0 = 6 * frames[0];
                let mut view = a.view_mut((k0, k0), (6 * m, 6 * m));
                view.gemm(-1.0, &ci, &c.transpose(), 1.0);
            } else {
                for (i, ki) in frames.iter().enumerate() {
                    for (j, kj) in frames.iter().enumerate() {
                        let upd = ci.view((6 * i, 0), (6, 3)) * c.view((6 * j, 0), (6, 3)).transpose();
                        let mut view = a.view_mut((6 * ki, 6 * kj), (6, 6));
                        view -= upd;
                    }
                }
            }
            let r = inv * blk.b_l;
            for (i, k) in frames.iter().enumerate() {
                let mut bv = b.rows_mut(6 * k, 6);
                bv -= c.view((6 * i, 0), (6, 3)) * r;
            }
        }
        let chol = a.cholesky().ok_or(MvoError::RankDeficient)?;
        let dx = chol.solve(&b);
        debug_assert_eq!(dx.len(), dim);
        let dl = blocks
            .iter()
            .zip(&inverses)
            .map(|(blk, inv)| {
                let mut rhs = blk.b_l;
                for (k, cb) in &blk.cross {
                    rhs -= cb.transpose() * dx.fixed_rows::<6>(6 * k);
                }
                inv * rhs
            })
            .collect();
        Ok((dx, dl))
    }

    fn solve_dense(
        &self,
        a_ff: DMatrix<f64>,
        b_f: DVector<f64>,
        blocks: &[LandmarkBlock],
    ) -> Result<(DVector<f64>, Vec<Vector3<f64>>)> {
        let f = a_ff.nrows();
        let total = f + 3 * blocks.len();
        let mut a = DMatrix::zeros(total, total);
        let mut b = DVector::zeros(total);
        a.view_mut((0, 0), (f, f)).copy_from(&a_ff);
        b.rows_mut(0, f).copy_from(&b_f);
        for (j, blk) in blocks.iter().enumerate() {
            let o = f + 3 * j;
            a.view_mut((o, o), (3, 3)).copy_from(&blk.a_ll);
            b.rows_mut(o, 3).copy_from(&blk.b_l);
            for (k, cb) in &blk.cross {
                a.view_mut((6 * k, o), (6, 3)).copy_from(cb);
                a.view_mut((o, 6 * k), (3, 6)).copy_from(&cb.transpose());
            }
        }
        let x = a.cholesky().ok_or(MvoError::RankDeficient)?.solve(&b);
        let dl = (0..blocks.len())
            .map(|j| x.fixed_rows::<3>(f + 3 * j).into_owned())
            .collect();
        Ok((x.rows(0, f).into_owned(), dl))
    }

    fn apply(
        &self,
        knots: &[KnotState],
        landmarks: &[Vector3<f64>],
        dx: &DVector<f64>,
        dl: &[Vector3<f64>],
        alpha: f64,
    ) -> (Vec<KnotState>, Vec<Vector3<f64>>) {
        let n = knots.len();
        let order = self.flavor.order();
        let new_knots = knots
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let mut s = *s;
                let d = |deriv: usize| -> Vector6<f64> { dx.fixed_rows::<6>(6 * (deriv * n + k)) * alpha };
                s.pose = exp_map(&d(0)) * s.pose;
                if order >= 1 {
                    s.velocity += d(1);
                }
                if order >= 2 {
                    s.acceleration += d(2);
                }
                s
            })
            .collect();
        let new_landmarks = landmarks
            .iter()
            .zip(dl)
            .map(|(p, d)| p + d * alpha)
            .collect();
        (new_knots, new_landmarks)
    }

    /// Runs Gauss-Newton with a halving line search from the given state.
    pub fn solve(
        &self,
        mut knots: Vec<KnotState>,
        mut landmarks: Vec<Vector3<f64>>,
        cfg: &SolverConfig,
    ) -> Result<Solution> {
        assert_eq!(landmarks.len(), self.tracks.len());
        if knots.is_empty() {
            return Err(MvoError::InvalidInput("empty trajectory".into()));
        }
        let mut current = self.evaluate(&knots, &landmarks)?;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < cfg.max_iterations {
            iterations += 1;
            let blocks = self.linearize_landmarks(&knots, &landmarks);
            let (dx, dl) = if landmarks.len() > cfg.schur_threshold {
                self.solve_schur(&knots, &blocks)?
            } else {
                let (a, b) = self.frame_system(&knots, &blocks)?;
                self.solve_dense(a, b, &blocks)?
            };
            let step_norm = dx.amax().max(dl.iter().map(|d| d.amax()).fold(0.0, f64::max));
            if !step_norm.is_finite() {
                return Err(MvoError::RankDeficient);
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let (k2, l2) = self.apply(&knots, &landmarks, &dx, &dl, alpha);
                let eval = self.evaluate(&k2, &l2)?;
                if eval.invalid <= current.invalid && eval.cost <= current.cost {
                    accepted = Some((k2, l2, eval));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((k2, l2, eval)) = accepted else {
                converged = true;
                break;
            };
            let rel = (current.cost - eval.cost) / current.cost.max(f64::MIN_POSITIVE);
            knots = k2;
            landmarks = l2;
            current = eval;
            if rel < cfg.rel_cost_tol || step_norm * alpha < cfg.step_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!(
                "estimator stopped after {iterations} iterations without converging (cost {:.6e})",
                current.cost
            );
        }
        Ok(Solution {
            knots,
            landmarks,
            converged,
            iterations,
            cost: current.cost,
        })
    }
}
