//! White-noise-on-acceleration and white-noise-on-jerk motion priors.

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::se3::{curlywedge, inv_left_jacobian, inv_left_jacobian_derivative, log_map, InvJacobian};
use crate::{Pose, Twist};

/// Which trajectory state and prior an estimator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    /// Poses only, no motion prior.
    PoseOnly,
    /// Poses and body-centric velocities, constant-velocity prior.
    #[default]
    #[serde(alias = "pose-velocity")]
    Wnoa,
    /// Poses, velocities and accelerations, constant-acceleration prior.
    #[serde(alias = "pose-velocity-acceleration")]
    Wnoj,
}

impl Flavor {
    /// Number of time derivatives carried next to each pose.
    pub fn order(self) -> usize {
        match self {
            Flavor::PoseOnly => 0,
            Flavor::Wnoa => 1,
            Flavor::Wnoj => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Flavor::PoseOnly => "pose-only",
            Flavor::Wnoa => "wnoa",
            Flavor::Wnoj => "wnoj",
        }
    }
}

impl std::str::FromStr for Flavor {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pose-only" => Ok(Flavor::PoseOnly),
            "wnoa" | "pose-velocity" => Ok(Flavor::Wnoa),
            "wnoj" | "pose-velocity-acceleration" => Ok(Flavor::Wnoj),
            other => Err(format!("unknown estimator flavor '{other}'")),
        }
    }
}

/// Noise densities of the prior and the measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Diagonal of the power spectral density `Q_c`.
    pub qc_diag: [f64; 6],
    /// Diagonal of the stereo measurement covariance, pixels squared.
    pub r_diag: [f64; 3],
    /// Inverse left Jacobian used along the pose chain of the prior.
    pub inv_jacobian: InvJacobian,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            qc_diag: [1.0; 6],
            r_diag: [1.0; 3],
            inv_jacobian: InvJacobian::FirstOrder,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self
            .qc_diag
            .iter()
            .chain(&self.r_diag)
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(crate::MvoError::InvalidInput(
                "prior and measurement covariances must be positive definite".into(),
            ));
        }
        Ok(())
    }

    pub fn qc(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from_row_slice(&self.qc_diag))
    }

    pub fn qc_inverse(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from_fn(|i, _| 1.0 / self.qc_diag[i]))
    }
}

fn kron6(coeffs: &DMatrix<f64>, block: &Matrix6<f64>) -> DMatrix<f64> {
    let n = coeffs.nrows();
    let mut out = DMatrix::zeros(6 * n, 6 * n);
    for i in 0..n {
        for j in 0..n {
            out.view_mut((6 * i, 6 * j), (6, 6))
                .copy_from(&(block * coeffs[(i, j)]));
        }
    }
    out
}

/// State transition `Phi(tau, t_k)` over `dt = tau - t_k`.
pub fn transition(flavor: Flavor, dt: f64) -> DMatrix<f64> {
    let n = flavor.order() + 1;
    let mut coeffs = DMatrix::identity(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let p = (j - i) as i32;
            let fact: f64 = (1..=p).map(f64::from).product();
            coeffs[(i, j)] = dt.powi(p) / fact;
        }
    }
    kron6(&coeffs, &Matrix6::identity())
}

/// Covariance `Q_k(tau)` accumulated over `dt`.
pub fn covariance(flavor: Flavor, dt: f64, qc: &Matrix6<f64>) -> DMatrix<f64> {
    let coeffs = match flavor {
        Flavor::PoseOnly => DMatrix::from_element(1, 1, dt),
        Flavor::Wnoa => DMatrix::from_row_slice(
            2,
            2,
            &[dt.powi(3) / 3.0, dt.powi(2) / 2.0, dt.powi(2) / 2.0, dt],
        ),
        Flavor::Wnoj => DMatrix::from_row_slice(
            3,
            3,
            &[
                dt.powi(5) / 20.0,
                dt.powi(4) / 8.0,
                dt.powi(3) / 6.0,
                dt.powi(4) / 8.0,
                dt.powi(3) / 3.0,
                dt.powi(2) / 2.0,
                dt.powi(3) / 6.0,
                dt.powi(2) / 2.0,
                dt,
            ],
        ),
    };
    kron6(&coeffs, qc)
}

/// Closed-form inverse of [`covariance`].
pub fn covariance_inverse(flavor: Flavor, dt: f64, qc_inv: &Matrix6<f64>) -> DMatrix<f64> {
    let coeffs = match flavor {
        Flavor::PoseOnly => DMatrix::from_element(1, 1, 1.0 / dt),
        Flavor::Wnoa => DMatrix::from_row_slice(
            2,
            2,
            &[
                12.0 / dt.powi(3),
                -6.0 / dt.powi(2),
                -6.0 / dt.powi(2),
                4.0 / dt,
            ],
        ),
        Flavor::Wnoj => DMatrix::from_row_slice(
            3,
            3,
            &[
                720.0 / dt.powi(5),
                -360.0 / dt.powi(4),
                60.0 / dt.powi(3),
                -360.0 / dt.powi(4),
                192.0 / dt.powi(3),
                -36.0 / dt.powi(2),
                60.0 / dt.powi(3),
                -36.0 / dt.powi(2),
                9.0 / dt,
            ],
        ),
    };
    kron6(&coeffs, qc_inv)
}

/// Pose, velocity and acceleration at one time step. Missing derivatives of
/// lower-order flavors are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnotState {
    pub pose: Pose,
    pub velocity: Twist,
    pub acceleration: Twist,
}

impl KnotState {
    pub fn new(pose: Pose, velocity: Twist, acceleration: Twist) -> Self {
        Self {
            pose,
            velocity,
            acceleration,
        }
    }
}

/// Local prior state at `t_{k+1}` relative to knot `k`: the relative pose in
/// the algebra and the velocity and acceleration carried back to knot `k`.
pub fn local_state(flavor: Flavor, from: &KnotState, to: &KnotState) -> Result<DVector<f64>> {
    let xi = log_map(&(to.pose * from.pose.inverse()))?;
    let jt = inv_left_jacobian(&xi, InvJacobian::FirstOrder);
    let n = flavor.order() + 1;
    let mut g = DVector::zeros(6 * n);
    g.rows_mut(0, 6).copy_from(&xi);
    if n > 1 {
        g.rows_mut(6, 6).copy_from(&(jt * to.velocity));
    }
    if n > 2 {
        let carried = jt * to.velocity;
        let acc = -curlywedge(&carried) * to.velocity * 0.5 + jt * to.acceleration;
        g.rows_mut(12, 6).copy_from(&acc);
    }
    Ok(g)
}

/// Like [`local_state`] but with the exact inverse Jacobian and its time
/// derivative. Interpolation uses this; it costs a series evaluation.
pub fn local_state_exact(flavor: Flavor, from: &KnotState, to: &KnotState) -> Result<DVector<f64>> {
    let xi = log_map(&(to.pose * from.pose.inverse()))?;
    let jt = inv_left_jacobian(&xi, InvJacobian::Exact);
    let n = flavor.order() + 1;
    let mut g = DVector::zeros(6 * n);
    g.rows_mut(0, 6).copy_from(&xi);
    let carried = jt * to.velocity;
    if n > 1 {
        g.rows_mut(6, 6).copy_from(&carried);
    }
    if n > 2 {
        let acc = inv_left_jacobian_derivative(&xi, &carried) * to.velocity + jt * to.acceleration;
        g.rows_mut(12, 6).copy_from(&acc);
    }
    Ok(g)
}

/// Local prior state at knot `k` itself: zero pose, the knot's derivatives.
pub fn knot_local(flavor: Flavor, knot: &KnotState) -> DVector<f64> {
    let n = flavor.order() + 1;
    let mut g = DVector::zeros(6 * n);
    if n > 1 {
        g.rows_mut(6, 6).copy_from(&knot.velocity);
    }
    if n > 2 {
        g.rows_mut(12, 6).copy_from(&knot.acceleration);
    }
    g
}

/// Prior error `gamma_k(t_{k+1}) - Phi(t_{k+1}, t_k) gamma_k(t_k)`.
pub fn prior_error(flavor: Flavor, from: &KnotState, to: &KnotState, dt: f64) -> Result<DVector<f64>> {
    Ok(local_state(flavor, from, to)? - transition(flavor, dt) * knot_local(flavor, from))
}

/// Jacobian `E_k` of the prior error, sign-flipped so that
/// `e(x (+) dx) ~ e(x) - E dx`. Columns are ordered as the perturbations of
/// knot `k` (pose, velocity, acceleration) followed by those of knot `k + 1`.
pub fn prior_jacobian(
    flavor: Flavor,
    from: &KnotState,
    to: &KnotState,
    dt: f64,
    mode: InvJacobian,
) -> Result<DMatrix<f64>> {
    let n = flavor.order() + 1;
    let rel = to.pose * from.pose.inverse();
    let xi = log_map(&rel)?;
    let jm = inv_left_jacobian(&xi, mode);
    let jt = inv_left_jacobian(&xi, InvJacobian::FirstOrder);
    let ad = rel.adjoint();
    let jm_ad = jm * ad;
    let identity = Matrix6::<f64>::identity();
    let mut e = DMatrix::zeros(6 * n, 12 * n);
    let mut put = |r: usize, c: usize, m: &Matrix6<f64>| {
        e.view_mut((6 * r, 6 * c), (6, 6)).copy_from(m);
    };
    let phi = transition(flavor, dt);
    for r in 0..n {
        for c in 0..n {
            if c > r {
                put(r, c, &(identity * phi[(6 * r, 6 * c)]));
            }
        }
        put(r, r, &identity);
    }
    put(0, 0, &jm_ad);
    put(0, n, &(-jm));
    if n > 1 {
        let vw = curlywedge(&to.velocity);
        put(1, 0, &(vw * jm_ad * 0.5));
        put(1, n, &(-(vw * jm) * 0.5));
        put(1, n + 1, &(-jt));
        if n > 2 {
            let aw = curlywedge(&to.acceleration);
            let m = vw * vw * 0.25 + aw * 0.5;
            put(2, 0, &(m * jm_ad));
            put(2, n, &(-(m * jm)));
            let carried = curlywedge(&(jt * to.velocity));
            put(2, n + 1, &((carried - vw * jt) * 0.5));
            put(2, n + 2, &(-jt));
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::exp_map;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn covariance_inverse_is_inverse() {
        let qc = Matrix6::from_diagonal(&Vector6::new(1.0, 2.0, 0.5, 0.1, 0.3, 4.0));
        let qc_inv = qc.try_inverse().unwrap();
        for flavor in [Flavor::Wnoa, Flavor::Wnoj] {
            for dt in [0.05, 0.1, 1.0] {
                let q = covariance(flavor, dt, &qc);
                let qi = covariance_inverse(flavor, dt, &qc_inv);
                let prod = &q * &qi;
                let err = (prod - DMatrix::identity(q.nrows(), q.nrows())).amax();
                assert!(err < 1e-8, "{flavor:?} dt={dt}: {err}");
            }
        }
    }

    #[test]
    fn transition_blocks() {
        let phi = transition(Flavor::Wnoj, 0.5);
        assert_eq!(phi[(0, 6)], 0.5);
        assert_eq!(phi[(0, 12)], 0.125);
        assert_eq!(phi[(6, 12)], 0.5);
        assert_eq!(phi[(12, 0)], 0.0);
        assert_eq!(transition(Flavor::Wnoa, 0.5).nrows(), 12);
    }

    #[test]
    fn prior_error_vanishes_on_constant_velocity() {
        let v = Vector6::new(0.3, -0.1, 0.2, 0.05, 0.1, -0.2);
        let dt = 0.1;
        let t0 = exp_map(&Vector6::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3));
        let a = KnotState::new(t0, v, Twist::zeros());
        let b = KnotState::new(exp_map(&(v * dt)) * t0, v, Twist::zeros());
        assert!(prior_error(Flavor::Wnoa, &a, &b, dt).unwrap().amax() < 1e-12);
        assert!(prior_error(Flavor::Wnoj, &a, &b, dt).unwrap().amax() < 1e-12);
    }

    #[test]
    fn prior_error_vanishes_on_commuting_constant_acceleration() {
        let v = Vector6::new(0.3, -0.1, 0.2, 0.05, 0.1, -0.2);
        let acc = v * 0.7;
        let dt = 0.1;
        let pose_at = |t: f64| exp_map(&(v * t + acc * (0.5 * t * t)));
        for k in 0..5 {
            let (ta, tb) = (k as f64 * dt, (k + 1) as f64 * dt);
            let a = KnotState::new(pose_at(ta), v + acc * ta, acc);
            let b = KnotState::new(pose_at(tb), v + acc * tb, acc);
            assert!(prior_error(Flavor::Wnoj, &a, &b, dt).unwrap().amax() < 1e-12);
        }
    }

    fn perturb(state: &KnotState, flavor: Flavor, block: usize, delta: &Vector6<f64>) -> KnotState {
        let mut s = *state;
        match block {
            0 => s.pose = exp_map(delta) * s.pose,
            1 if flavor.order() >= 1 => s.velocity += delta,
            2 if flavor.order() >= 2 => s.acceleration += delta,
            _ => {}
        }
        s
    }

    fn random_knot(rng: &mut ChaCha8Rng) -> KnotState {
        let mut r = || Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        KnotState::new(exp_map(&r()), r(), r())
    }

    #[test]
    fn exact_mode_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for flavor in [Flavor::Wnoa, Flavor::Wnoj] {
            let n = flavor.order() + 1;
            for _ in 0..50 {
                let a = random_knot(&mut rng);
                let step = Vector6::from_fn(|_, _| rng.random_range(-0.5..0.5));
                let b = KnotState::new(exp_map(&step) * a.pose, a.velocity * 1.1, a.acceleration);
                let dt = 0.1;
                let e = prior_jacobian(flavor, &a, &b, dt, InvJacobian::Exact).unwrap();
                let h = 1e-6;
                let mut fd = DMatrix::zeros(6 * n, 12 * n);
                for col in 0..12 * n {
                    let (knot, block, i) = (col / (6 * n), (col % (6 * n)) / 6, col % 6);
                    let mut d = Vector6::zeros();
                    d[i] = h;
                    let (ap, bp, am, bm) = if knot == 0 {
                        (perturb(&a, flavor, block, &d), b, perturb(&a, flavor, block, &-d), b)
                    } else {
                        (a, perturb(&b, flavor, block, &d), a, perturb(&b, flavor, block, &-d))
                    };
                    let plus = prior_error(flavor, &ap, &bp, dt).unwrap();
                    let minus = prior_error(flavor, &am, &bm, dt).unwrap();
                    fd.set_column(col, &(-(plus - minus) / (2.0 * h)));
                }
                let rel = (&e - &fd).amax() / fd.amax();
                assert!(rel < 1e-5, "{flavor:?}: {rel}");
            }
        }
    }
}
