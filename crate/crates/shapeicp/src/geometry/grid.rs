use nalgebra::{Matrix3, Quaternion, UnitQuaternion};

/// Deterministic near-uniform cover of SO(3).
///
/// Built by crossing an equal-area layered S^2 cell grid (12 * 4^level cells)
/// with a uniform circle grid of 12 * 4^level samples via the Hopf fibration,
/// so level 1 yields 48 x 48 = 2304 rotations.
#[derive(Debug, Clone)]
pub struct RotationGrid {
    rotations: Vec<Matrix3<f64>>,
    level: u32,
}

impl RotationGrid {
    /// Custom grid from explicit rotations (level is reported as 0).
    pub fn from_rotations(rotations: Vec<Matrix3<f64>>) -> Self {
        Self {
            rotations,
            level: 0,
        }
    }

    pub fn rotations(&self) -> &[Matrix3<f64>] {
        &self.rotations
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }
}

/// Equal-area layered cell centers on S^2 as (colatitude, longitude) pairs,
/// 12 * nside^2 cells in rings (the nested-cap layout used by sky pixelization
/// schemes).
fn sphere_cell_centers(nside: u32) -> Vec<(f64, f64)> {
    let n = nside as i64;
    let mut centers = Vec::with_capacity((12 * n * n) as usize);
    let mut push_ring = |z: f64, count: i64, phase: f64| {
        let theta = z.clamp(-1.0, 1.0).acos();
        for j in 0..count {
            let phi = (2.0 * std::f64::consts::PI / count as f64) * (j as f64 + phase);
            centers.push((theta, phi));
        }
    };
    // North polar cap.
    for i in 1..n {
        let z = 1.0 - (i * i) as f64 / (3 * n * n) as f64;
        push_ring(z, 4 * i, 0.5);
    }
    // Equatorial belt (rings i = n ..= 3n), alternating half-cell phase.
    for i in n..=3 * n {
        let z = 4.0 / 3.0 - (2 * i) as f64 / (3 * n) as f64;
        let phase = if (i - n) % 2 == 0 { 0.5 } else { 0.0 };
        push_ring(z, 4 * n, phase);
    }
    // South polar cap, mirror of the north.
    for i in (1..n).rev() {
        let z = -(1.0 - (i * i) as f64 / (3 * n * n) as f64);
        push_ring(z, 4 * i, 0.5);
    }
    centers
}

/// Unit quaternion from Hopf coordinates: S^2 base point (theta, phi) crossed
/// with fiber angle psi in [0, 2pi), which covers SO(3) exactly once.
pub(crate) fn hopf_quaternion(theta: f64, phi: f64, psi: f64) -> UnitQuaternion<f64> {
    let (ct, st) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    let q = Quaternion::new(
        ct * (psi / 2.0).cos(),
        ct * (psi / 2.0).sin(),
        st * (phi + psi / 2.0).cos(),
        st * (phi + psi / 2.0).sin(),
    );
    UnitQuaternion::from_quaternion(q)
}

/// Deterministic rotation grid with 144 * 16^level elements
/// (level 0: 144, level 1: 2304).
pub fn so3_grid(level: u32) -> RotationGrid {
    assert!(level <= 1, "grid levels beyond 1 are not supported");
    let nside = 1u32 << level;
    let circle_count = 12 * 4u32.pow(level);
    let centers = sphere_cell_centers(nside);
    let mut rotations = Vec::with_capacity(centers.len() * circle_count as usize);
    for &(theta, phi) in &centers {
        for j in 0..circle_count {
            let psi =
                2.0 * std::f64::consts::PI * (j as f64 + 0.5) / circle_count as f64;
            rotations.push(*hopf_quaternion(theta, phi, psi).to_rotation_matrix().matrix());
        }
    }
    RotationGrid { rotations, level }
}

/// Geodesic angle between two rotations in degrees:
/// `acos((trace(r1^T r2) - 1) / 2)` clamped to [0, 180].
pub fn geodesic_angle(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let c = ((r1.transpose() * r2).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}
