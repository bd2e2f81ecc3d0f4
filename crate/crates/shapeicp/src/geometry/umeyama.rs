use nalgebra::{Matrix3, Vector3};

use super::{GeometryError, PointCloud, Sim3Pose};

/// Weighted least-squares SIM(3) alignment of `source` onto `target`:
/// minimizes `sum_i w_i ||s R p_i + t - q_i||^2` in closed form.
///
/// Reflections are resolved by the standard determinant sign correction. A
/// source whose centered covariance has smallest singular value below
/// `1e-12 x largest` (collinear or coincident points) is rejected as
/// degenerate so the caller can skip the pose step for this iteration.
pub fn umeyama(
    source: &PointCloud,
    target: &PointCloud,
    weights: &[f64],
) -> Result<Sim3Pose, GeometryError> {
    let p = source.points();
    let q = target.points();
    if p.len() != q.len() || p.len() != weights.len() {
        return Err(GeometryError::DegenerateConfiguration(
            "source/target/weight lengths differ".into(),
        ));
    }
    if weights.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
        return Err(GeometryError::DegenerateConfiguration(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let effective = weights.iter().filter(|&&w| w > 0.0).count();
    let total_w: f64 = weights.iter().sum();
    if effective < 3 || total_w <= 0.0 {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "need >= 3 effectively weighted points, got {effective}"
        )));
    }

    let mut p_mean = Vector3::zeros();
    let mut q_mean = Vector3::zeros();
    for i in 0..p.len() {
        p_mean += weights[i] * p[i];
        q_mean += weights[i] * q[i];
    }
    p_mean /= total_w;
    q_mean /= total_w;

    // Cross-covariance (target x source) and source variance.
    let mut cross = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut src_var = 0.0;
    for i in 0..p.len() {
        let dp = p[i] - p_mean;
        let dq = q[i] - q_mean;
        cross += weights[i] * dq * dp.transpose();
        src_cov += weights[i] * dp * dp.transpose();
        src_var += weights[i] * dp.norm_squared();
    }
    cross /= total_w;
    src_cov /= total_w;
    src_var /= total_w;

    let src_svals = src_cov.svd(false, false).singular_values;
    let (smax, smin) = (src_svals.max(), src_svals.min());
    if smax <= 0.0 || smin < 1e-12 * smax {
        return Err(GeometryError::DegenerateConfiguration(
            "zero-variance or collinear source points".into(),
        ));
    }

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd vt");
    let d = svd.singular_values;
    let mut s_fix = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * vt.determinant()) < 0.0 {
        s_fix[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_fix) * vt;
    let scale = d.dot(&s_fix) / src_var;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "recovered nonpositive scale {scale}"
        )));
    }
    let translation = q_mean - scale * (rotation * p_mean);
    Sim3Pose::new(super::pose::renormalize(rotation), translation, scale)
}
