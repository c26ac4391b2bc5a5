//! Deterministic random streams and a few sampling helpers.
//!
//! Every parallel work item draws from its own ChaCha stream keyed by
//! `(seed, item index)`, so results never depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Vec3;

pub type StreamRng = ChaCha8Rng;

/// Independent generator for work item `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform variate in [0, 1).
#[inline]
pub fn uniform(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}

/// Uniformly distributed unit vector.
pub fn uniform_sphere(rng: &mut impl Rng) -> Vec3 {
    let z = 1.0 - 2.0 * uniform(rng);
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * std::f64::consts::PI * uniform(rng);
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Orthonormal basis `(t, b)` completing the unit vector `n` (Duff et al.).
pub fn orthonormal_basis(n: &Vec3) -> (Vec3, Vec3) {
    let sign = 1.0f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let t = Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let bt = Vec3::new(b, sign + n.y * n.y * a, -n.y);
    (t, bt)
}

/// Unit vector at polar angle `acos(cos_theta)` and azimuth `phi` around `axis`.
pub fn direction_around(axis: &Vec3, cos_theta: f64, phi: f64) -> Vec3 {
    let (t, b) = orthonormal_basis(axis);
    let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
    (t * (sin_theta * phi.cos()) + b * (sin_theta * phi.sin()) + axis * cos_theta).normalize()
}
