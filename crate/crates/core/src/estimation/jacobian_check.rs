//! Finite-difference checks of every analytic Jacobian used by the estimators.

use nalgebra::{DMatrix, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::models::{linearize, EgoModel, GeoModel, MeasurementModel};
use super::prior::{prior_error, prior_jacobian, Flavor, KnotState};
use crate::error::Result;
use crate::se3::{exp_map, InvJacobian};
use crate::{Pose, StereoCalib, Twist};

const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianReport {
    pub name: String,
    pub samples: usize,
    pub max_rel_error: f64,
}

impl JacobianReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn rel_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).amax() / numeric.amax().max(1e-12)
}

/// Central differences of `f` over `dim` coordinates.
fn central<F>(dim: usize, rows: usize, mut f: F) -> Result<DMatrix<f64>>
where
    F: FnMut(usize, f64) -> Result<nalgebra::DVector<f64>>,
{
    let mut out = DMatrix::zeros(rows, dim);
    for i in 0..dim {
        let plus = f(i, STEP)?;
        let minus = f(i, -STEP)?;
        out.set_column(i, &((plus - minus) / (2.0 * STEP)));
    }
    Ok(out)
}

fn unit6(i: usize, h: f64) -> Vector6<f64> {
    let mut d = Vector6::zeros();
    d[i] = h;
    d
}

fn unit3(i: usize, h: f64) -> Vector3<f64> {
    let mut d = Vector3::zeros();
    d[i] = h;
    d
}

fn random_twist(rng: &mut ChaCha8Rng, scale: f64) -> Twist {
    Twist::from_fn(|_, _| rng.random_range(-scale..scale))
}

fn random_visible_point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-1.5..1.5),
        rng.random_range(2.0..10.0),
    )
}

fn model_blocks(
    model: &dyn MeasurementModel,
    calib: &StereoCalib,
    k: usize,
    pose: &Pose,
    p: &Vector3<f64>,
) -> Result<(f64, f64)> {
    let y = Vector3::zeros();
    let (_, gp, gl) = linearize(model, calib, k, pose, p, &y)?;
    // residual is y - s(z), so its derivative is -G
    let fd_pose = central(6, 3, |i, h| {
        let (e, _, _) = linearize(model, calib, k, &(exp_map(&unit6(i, h)) * *pose), p, &y)?;
        Ok(nalgebra::DVector::from_column_slice((-e).as_slice()))
    })?;
    let fd_land = central(3, 3, |i, h| {
        let (e, _, _) = linearize(model, calib, k, pose, &(p + unit3(i, h)), &y)?;
        Ok(nalgebra::DVector::from_column_slice((-e).as_slice()))
    })?;
    let gp = DMatrix::from_column_slice(3, 6, gp.as_slice());
    let gl = DMatrix::from_column_slice(3, 3, gl.as_slice());
    Ok((rel_error(&gp, &fd_pose), rel_error(&gl, &fd_land)))
}

fn perturb_knot(s: &KnotState, block: usize, d: &Vector6<f64>) -> KnotState {
    let mut s = *s;
    match block {
        0 => s.pose = exp_map(d) * s.pose,
        1 => s.velocity += d,
        _ => s.acceleration += d,
    }
    s
}

fn prior_check(flavor: Flavor, a: &KnotState, b: &KnotState, dt: f64) -> Result<f64> {
    let n = flavor.order() + 1;
    let e = prior_jacobian(flavor, a, b, dt, InvJacobian::Exact)?;
    let fd = central(12 * n, 6 * n, |col, h| {
        let (knot, block, i) = (col / (6 * n), (col % (6 * n)) / 6, col % 6);
        let d = unit6(i, h);
        let (a2, b2) = if knot == 0 {
            (perturb_knot(a, block, &d), *b)
        } else {
            (*a, perturb_knot(b, block, &d))
        };
        Ok(-prior_error(flavor, &a2, &b2, dt)?)
    })?;
    Ok(rel_error(&e, &fd))
}

/// Runs `samples` random states through every Jacobian and reports the
/// worst relative error of each.
pub fn run(samples: usize, seed: u64, calib: &StereoCalib) -> Result<Vec<JacobianReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = [
        "stereo-projection",
        "ego-pose",
        "ego-landmark",
        "geo-pose",
        "geo-landmark",
        "prior-wnoa",
        "prior-wnoj",
    ];
    let mut worst = [0.0f64; 7];
    for _ in 0..samples {
        // projection, xyz columns only: the homogeneous column never meets a
        // nonzero perturbation
        let h = random_visible_point(&mut rng).push(1.0);
        let s = calib.projection_jacobian(&h)?;
        let fd = central(3, 3, |i, step| {
            let mut h2 = h;
            h2[i] += step;
            Ok(nalgebra::DVector::from_column_slice(
                calib.project_homogeneous(&h2)?.to_vector().as_slice(),
            ))
        })?;
        let s3 = DMatrix::from_fn(3, 3, |r, c| s[(r, c)]);
        worst[0] = worst[0].max(rel_error(&s3, &fd));

        let pose = exp_map(&random_twist(&mut rng, 0.5));
        let p = pose.inverse().transform_point(&random_visible_point(&mut rng));
        let (ep, el) = model_blocks(&EgoModel, calib, 0, &pose, &p)?;
        worst[1] = worst[1].max(ep);
        worst[2] = worst[2].max(el);

        let anchor = exp_map(&random_twist(&mut rng, 1.0));
        let camera = vec![Pose::identity(), exp_map(&random_twist(&mut rng, 0.3))];
        let geo_pose = exp_map(&random_twist(&mut rng, 0.5));
        let model = GeoModel::new(&camera, anchor);
        let p = model.initial_landmark(1, &geo_pose, &random_visible_point(&mut rng));
        let (gp, gl) = model_blocks(&model, calib, 1, &geo_pose, &p)?;
        worst[3] = worst[3].max(gp);
        worst[4] = worst[4].max(gl);

        let a = KnotState::new(
            exp_map(&random_twist(&mut rng, 1.0)),
            random_twist(&mut rng, 1.0),
            random_twist(&mut rng, 1.0),
        );
        let b = KnotState::new(
            exp_map(&random_twist(&mut rng, 0.5)) * a.pose,
            random_twist(&mut rng, 1.0),
            random_twist(&mut rng, 1.0),
        );
        let dt = rng.random_range(0.05..0.2);
        worst[5] = worst[5].max(prior_check(Flavor::Wnoa, &a, &b, dt)?);
        worst[6] = worst[6].max(prior_check(Flavor::Wnoj, &a, &b, dt)?);
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(name, max_rel_error)| JacobianReport {
            name: name.to_string(),
            samples,
            max_rel_error,
        })
        .collect())
}
