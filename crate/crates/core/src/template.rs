//! Diffuse (spherical shell) and highlight (light ray) sampling templates.
//!
//! Diffuse layers are generated at unit outer radius, their uniformity `D`
//! measured there, and then scaled by the layer radius
//! `r_i = 2^(i-1) / (256·D) · ξ_i`. Points are spread with Mitchell's
//! best-candidate sampling, which directly maximises the nearest-neighbour
//! distance that `D` averages.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::rng::{orthonormal_basis, stream_rng, uniform, uniform_sphere, StreamRng};
use crate::volume::VoxelLayout;
use crate::Vec3;

pub const DEFAULT_DIFFUSE_COUNTS: [usize; 8] = [6, 8, 12, 16, 24, 32, 48, 48];
pub const DEFAULT_HIGHLIGHT_COUNTS: [usize; 4] = [32, 16, 16, 8];
pub const BEST_CANDIDATE_TRIALS: usize = 64;
/// Resolution of the first mipmap level in the radius law.
pub const MIPMAP_RESOLUTION: f64 = 256.0;
pub const DEFAULT_CONE_HALF_ANGLE: f64 = 5.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("uniformity needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("uniformity at unit radius must be positive, got {0}")]
    NonPositiveUniformity(f64),
    #[error("layer index must be at least 1")]
    LayerIndex,
    #[error("expected {expected} layer counts, got {got}")]
    LayerCount { expected: usize, got: usize },
    #[error("layer {0} has zero points")]
    ZeroCount(usize),
    #[error("entry-to-particle distance must be positive, got {0}")]
    ZeroDistance(f64),
    #[error("cone half-angle {0} outside [0, π/2)")]
    ConeAngle(f64),
    #[error("layer {0} radius does not exceed the previous layer's")]
    RadiusNotIncreasing(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("template json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateKind {
    Diffuse,
    Highlight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateLayer {
    pub index: usize,
    /// Outer radius (diffuse) or outer axial distance from the entry (highlight).
    pub radius: f64,
    pub inner_radius: f64,
    /// Nearest-neighbour uniformity at unit scale.
    pub uniformity: f64,
    /// Radius of the sphere each point stands for, used for the phase cap.
    pub cap_radius: f64,
    /// Inner radius of the unit-scale region the points were drawn from.
    pub unit_inner: f64,
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingTemplate {
    pub kind: TemplateKind,
    pub seed: u64,
    pub counts: Vec<usize>,
    /// Length of the entry→particle segment the highlight template was built for.
    pub reference_length: f64,
    pub cone_half_angle: f64,
    pub layers: Vec<TemplateLayer>,
}

impl SamplingTemplate {
    pub fn total_points(&self) -> usize {
        self.layers.iter().map(|l| l.points.len()).sum()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.points.len()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TemplateError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn to_json(&self) -> Result<String, TemplateError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// World units per template unit for a placement.
    pub fn placement_scale(&self, p: &Vec3, entry: &Vec3, template_scale: f64) -> f64 {
        match self.kind {
            TemplateKind::Diffuse => template_scale,
            TemplateKind::Highlight => (p - entry).norm() / self.reference_length,
        }
    }
}

/// Mean over points of the distance to their nearest other point.
pub fn uniformity_metric(points: &[[f64; 3]]) -> Result<f64, TemplateError> {
    if points.len() < 2 {
        return Err(TemplateError::TooFewPoints(points.len()));
    }
    let v: Vec<Vec3> = points.iter().map(|p| Vec3::from(*p)).collect();
    Ok(uniformity_of(&v))
}

fn uniformity_of(points: &[Vec3]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for (i, a) in points.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, b) in points.iter().enumerate() {
            if i != j {
                best = best.min((a - b).norm());
            }
        }
        total += best;
    }
    total / n as f64
}

/// ξ_i = 1 − 0.08·min(i, 5).
pub fn overlap_factor(i: usize) -> f64 {
    1.0 - 0.08 * i.min(5) as f64
}

/// r_i = 2^(i−1) / (2^8 · D) · ξ_i.
pub fn layer_radius(i: usize, d_unit: f64) -> Result<f64, TemplateError> {
    if i == 0 {
        return Err(TemplateError::LayerIndex);
    }
    if !(d_unit > 0.0) {
        return Err(TemplateError::NonPositiveUniformity(d_unit));
    }
    Ok(2f64.powi(i as i32 - 1) / (MIPMAP_RESOLUTION * d_unit) * overlap_factor(i))
}

/// Appends `count` best-candidate points drawn from `region` to `points`.
fn best_candidate(
    points: &mut Vec<Vec3>,
    count: usize,
    trials: usize,
    rng: &mut StreamRng,
    mut region: impl FnMut(&mut StreamRng) -> Vec3,
) {
    for _ in 0..count {
        let mut best = region(rng);
        let mut best_dist = nearest(points, &best);
        for _ in 1..trials {
            let c = region(rng);
            let d = nearest(points, &c);
            if d > best_dist {
                best = c;
                best_dist = d;
            }
        }
        points.push(best);
    }
}

fn nearest(points: &[Vec3], c: &Vec3) -> f64 {
    points
        .iter()
        .map(|p| (p - c).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Uniform point in the shell between radii `inner` and 1.
fn shell_point(rng: &mut impl Rng, inner: f64) -> Vec3 {
    let i3 = inner * inner * inner;
    let r = (i3 + uniform(rng) * (1.0 - i3)).cbrt();
    uniform_sphere(rng) * r
}

/// Unit-scale points of diffuse layer `layer`, drawn in the shell
/// `[inner, 1]` (layer 0 additionally holds the centre point).
pub fn diffuse_layer_unit_points(
    seed: u64,
    layer: usize,
    count: usize,
    inner: f64,
    trials: usize,
) -> Vec<Vec3> {
    let mut rng = stream_rng(seed, layer as u64);
    let mut pts = Vec::with_capacity(count);
    let mut remaining = count;
    if layer == 0 && count > 0 {
        pts.push(Vec3::zeros());
        remaining -= 1;
    }
    best_candidate(&mut pts, remaining, trials.max(1), &mut rng, |r| {
        shell_point(r, inner)
    });
    pts
}

fn check_counts(counts: &[usize], expected: usize, min: usize) -> Result<(), TemplateError> {
    if counts.len() != expected {
        return Err(TemplateError::LayerCount {
            expected,
            got: counts.len(),
        });
    }
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(TemplateError::ZeroCount(i));
        }
        if c < min {
            return Err(TemplateError::TooFewPoints(c));
        }
    }
    Ok(())
}

fn to_arrays(points: &[Vec3], scale: f64) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|p| [p.x * scale, p.y * scale, p.z * scale])
        .collect()
}

pub fn generate_diffuse_template(
    counts: &[usize],
    seed: u64,
) -> Result<SamplingTemplate, TemplateError> {
    generate_diffuse_template_with(counts, seed, BEST_CANDIDATE_TRIALS)
}

/// Diffuse template with an explicit best-candidate trial count (1 gives
/// plain uniform random layers).
pub fn generate_diffuse_template_with(
    counts: &[usize],
    seed: u64,
    trials: usize,
) -> Result<SamplingTemplate, TemplateError> {
    check_counts(counts, 8, 2)?;
    let trials = trials.max(1);

    // Layer 0: the centre plus points inside the unit ball.
    let core = diffuse_layer_unit_points(seed, 0, counts[0], 0.0, trials);

    // Layer 1 sits on [r_1/2, r_1] since r_0 = r_1 / 2.
    let first = diffuse_layer_unit_points(seed, 1, counts[1], 0.5, trials);
    let d1 = uniformity_of(&first);
    let r1 = layer_radius(1, d1)?;
    let r0 = r1 / 2.0;
    let d0 = uniformity_of(&core);

    let mut layers = vec![
        TemplateLayer {
            index: 0,
            radius: r0,
            inner_radius: 0.0,
            uniformity: d0,
            cap_radius: 0.5 * d0 * r0,
            unit_inner: 0.0,
            points: to_arrays(&core, r0),
        },
        TemplateLayer {
            index: 1,
            radius: r1,
            inner_radius: r0,
            uniformity: d1,
            cap_radius: 0.5 * d1 * r1,
            unit_inner: 0.5,
            points: to_arrays(&first, r1),
        },
    ];

    for i in 2..8 {
        let prev = layers[i - 1].radius;
        // Fixed-point iteration on the inner radius ratio.
        let mut inner = 0.5;
        let mut accepted = None;
        for _ in 0..64 {
            let pts = diffuse_layer_unit_points(seed, i, counts[i], inner, trials);
            let d = uniformity_of(&pts);
            let r = layer_radius(i, d)?;
            let needed = prev / r;
            if needed >= 1.0 {
                return Err(TemplateError::RadiusNotIncreasing(i));
            }
            let contained = pts
                .iter()
                .all(|p| p.norm() * r > prev && p.norm() * r <= r * (1.0 + 1e-12));
            if needed <= inner && contained {
                accepted = Some((pts, d, r, inner));
                break;
            }
            inner = needed.max(inner) + 1e-6;
        }
        let (pts, d, r, unit_inner) = accepted.ok_or(TemplateError::RadiusNotIncreasing(i))?;
        layers.push(TemplateLayer {
            index: i,
            radius: r,
            inner_radius: prev,
            uniformity: d,
            cap_radius: 0.5 * d * r,
            unit_inner,
            points: to_arrays(&pts, r),
        });
    }

    Ok(SamplingTemplate {
        kind: TemplateKind::Diffuse,
        seed,
        counts: counts.to_vec(),
        reference_length: 1.0,
        cone_half_angle: 0.0,
        layers,
    })
}

/// Highlight template in local coordinates: `z` runs from the light's entry
/// point (0) to the particle (`entry_to_p_distance`), split into equal
/// quarters; points fill the cone with apex at the particle.
pub fn generate_highlight_template(
    counts: &[usize],
    entry_to_p_distance: f64,
    cone_half_angle: f64,
    seed: u64,
) -> Result<SamplingTemplate, TemplateError> {
    check_counts(counts, 4, 1)?;
    if !(entry_to_p_distance > 0.0 && entry_to_p_distance.is_finite()) {
        return Err(TemplateError::ZeroDistance(entry_to_p_distance));
    }
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&cone_half_angle) {
        return Err(TemplateError::ConeAngle(cone_half_angle));
    }
    let len = entry_to_p_distance;
    let tan = cone_half_angle.tan();
    let n_layers = counts.len();
    let mut layers = Vec::with_capacity(n_layers);
    for (k, &count) in counts.iter().enumerate() {
        let z0 = len * k as f64 / n_layers as f64;
        let z1 = len * (k + 1) as f64 / n_layers as f64;
        let mut rng = stream_rng(seed, 100 + k as u64);
        let mut pts = Vec::with_capacity(count);
        best_candidate(&mut pts, count, BEST_CANDIDATE_TRIALS, &mut rng, |r| {
            // Distance to the apex w = len − z has density ∝ w² inside a cone.
            let (a, b) = (len - z1, len - z0);
            let w = if tan > 0.0 {
                (a * a * a + uniform(r) * (b * b * b - a * a * a)).cbrt()
            } else {
                a + uniform(r) * (b - a)
            };
            let z = (len - w).clamp(z0, z1);
            let radial = w * tan * uniform(r).sqrt();
            let phi = 2.0 * std::f64::consts::PI * uniform(r);
            Vec3::new(radial * phi.cos(), radial * phi.sin(), z)
        });
        let uniformity = if pts.len() >= 2 {
            uniformity_of(&pts)
        } else {
            z1 - z0
        };
        layers.push(TemplateLayer {
            index: k,
            radius: z1,
            inner_radius: z0,
            uniformity,
            cap_radius: 0.5 * uniformity,
            unit_inner: z0,
            points: to_arrays(&pts, 1.0),
        });
    }
    Ok(SamplingTemplate {
        kind: TemplateKind::Highlight,
        seed,
        counts: counts.to_vec(),
        reference_length: len,
        cone_half_angle,
        layers,
    })
}

/// Where a ray from `p` towards the light (against `light`) leaves the grid,
/// at least half a voxel from `p`.
pub fn light_entry_point(layout: &VoxelLayout, p: &Vec3, light: &Vec3) -> Vec3 {
    let back = -light.normalize();
    let t = layout
        .ray_interval(p, &back)
        .map(|(_, t1)| t1)
        .unwrap_or(0.0);
    p + back * t.max(0.5 * layout.voxel_size)
}

/// World-space sample positions of a template centred on `p`.
pub fn place_template(
    template: &SamplingTemplate,
    p: &Vec3,
    omega: &Vec3,
    light: &Vec3,
    entry: &Vec3,
    template_scale: f64,
) -> Vec<Vec3> {
    let pts = template
        .layers
        .iter()
        .flat_map(|l| l.points.iter().map(|q| Vec3::from(*q)));
    match template.kind {
        TemplateKind::Diffuse => pts.map(|q| p + q * template_scale).collect(),
        TemplateKind::Highlight => {
            let (origin, frame, scale) = highlight_frame(template, p, omega, light, entry);
            pts.map(|q| origin + frame * q * scale).collect()
        }
    }
}

fn highlight_frame(
    template: &SamplingTemplate,
    p: &Vec3,
    omega: &Vec3,
    light: &Vec3,
    entry: &Vec3,
) -> (Vec3, nalgebra::Matrix3<f64>, f64) {
    let axis = p - entry;
    let len = axis.norm();
    let z = if len > 0.0 {
        axis / len
    } else {
        light.normalize()
    };
    let ortho = omega - z * omega.dot(&z);
    let x = if ortho.norm() > 1e-9 {
        ortho.normalize()
    } else {
        orthonormal_basis(&z).0
    };
    let y = z.cross(&x);
    let frame = nalgebra::Matrix3::from_columns(&[x, y, z]);
    (*entry, frame, len / template.reference_length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};

    #[test]
    fn uniformity_examples() {
        let two = [[0.0, 0.0, 0.0], [0.0, 3.0, 4.0]];
        assert!((uniformity_metric(&two).unwrap() - 5.0).abs() < 1e-15);
        let h = 3f64.sqrt() / 2.0;
        let tri = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 2.0 * h, 0.0]];
        assert!((uniformity_metric(&tri).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            uniformity_metric(&two[..1]),
            Err(TemplateError::TooFewPoints(1))
        ));
    }

    #[test]
    fn radius_law_examples() {
        assert!((overlap_factor(1) - 0.92).abs() < 1e-15);
        for i in 5..=7 {
            assert!((overlap_factor(i) - 0.60).abs() < 1e-15);
        }
        assert!((layer_radius(1, 1.0).unwrap() - 0.00359375).abs() < 1e-15);
        for i in 1..7 {
            let ratio = layer_radius(i + 1, 0.7).unwrap() / layer_radius(i, 0.7).unwrap();
            assert!((ratio - 2.0 * overlap_factor(i + 1) / overlap_factor(i)).abs() < 1e-12);
            assert!(ratio > 1.0);
        }
        assert!(layer_radius(2, 0.0).is_err());
        assert!(layer_radius(0, 1.0).is_err());
    }

    #[test]
    fn diffuse_counts_and_shells() {
        let t = generate_diffuse_template(&DEFAULT_DIFFUSE_COUNTS, 11).unwrap();
        assert_eq!(t.layer_sizes(), DEFAULT_DIFFUSE_COUNTS.to_vec());
        assert_eq!(t.total_points(), 194);
        assert_eq!(t.layers[0].points[0], [0.0, 0.0, 0.0]);
        for l in &t.layers {
            for p in &l.points {
                let n = Vec3::from(*p).norm();
                assert!(n <= l.radius * (1.0 + 1e-12));
                if l.index > 0 {
                    assert!(n > t.layers[l.index - 1].radius);
                }
            }
        }
        assert!((t.layers[0].radius - t.layers[1].radius / 2.0).abs() < 1e-15);
    }

    #[test]
    fn diffuse_errors() {
        assert!(matches!(
            generate_diffuse_template(&[6, 8], 1),
            Err(TemplateError::LayerCount { .. })
        ));
        let mut counts = DEFAULT_DIFFUSE_COUNTS;
        counts[3] = 0;
        assert!(matches!(
            generate_diffuse_template(&counts, 1),
            Err(TemplateError::ZeroCount(3))
        ));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_diffuse_template(&DEFAULT_DIFFUSE_COUNTS, 5).unwrap();
        let b = generate_diffuse_template(&DEFAULT_DIFFUSE_COUNTS, 5).unwrap();
        let c = generate_diffuse_template(&DEFAULT_DIFFUSE_COUNTS, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn best_candidate_beats_first_candidate() {
        for seed in 0..10 {
            let t = generate_diffuse_template(&DEFAULT_DIFFUSE_COUNTS, seed).unwrap();
            for l in &t.layers {
                let n = l.points.len();
                let raw = diffuse_layer_unit_points(seed, l.index, n, l.unit_inner, 1);
                assert!(
                    l.uniformity > uniformity_of(&raw),
                    "seed {seed} layer {}",
                    l.index
                );
            }
        }
    }

    #[test]
    fn highlight_template_layers() {
        let t =
            generate_highlight_template(&DEFAULT_HIGHLIGHT_COUNTS, 2.0, DEFAULT_CONE_HALF_ANGLE, 3)
                .unwrap();
        assert_eq!(t.layer_sizes(), vec![32, 16, 16, 8]);
        assert_eq!(t.total_points(), 72);
        let tan = DEFAULT_CONE_HALF_ANGLE.tan();
        for (k, l) in t.layers.iter().enumerate() {
            for p in &l.points {
                assert!(p[2] >= 0.5 * k as f64 - 1e-12 && p[2] <= 0.5 * (k + 1) as f64 + 1e-12);
                let lateral = (p[0] * p[0] + p[1] * p[1]).sqrt();
                assert!(lateral <= (2.0 - p[2]) * tan + 1e-12);
            }
        }
        let line = generate_highlight_template(&DEFAULT_HIGHLIGHT_COUNTS, 2.0, 0.0, 3).unwrap();
        assert!(line
            .layers
            .iter()
            .flat_map(|l| &l.points)
            .all(|p| p[0] == 0.0 && p[1] == 0.0));
        assert!(matches!(
            generate_highlight_template(&DEFAULT_HIGHLIGHT_COUNTS, 0.0, 0.1, 3),
            Err(TemplateError::ZeroDistance(_))
        ));
        assert!(matches!(
            generate_highlight_template(&[32, 0, 16, 8], 1.0, 0.1, 3),
            Err(TemplateError::ZeroCount(1))
        ));
    }

    #[test]
    fn placement() {
        let d = generate_diffuse_template(&DEFAULT_DIFFUSE_COUNTS, 1).unwrap();
        let placed = place_template(
            &d,
            &Vec3::zeros(),
            &Vec3::x(),
            &Vec3::y(),
            &Vec3::zeros(),
            1.0,
        );
        let orig: Vec<Vec3> = d
            .layers
            .iter()
            .flat_map(|l| l.points.iter().map(|p| Vec3::from(*p)))
            .collect();
        assert_eq!(placed, orig);

        let h =
            generate_highlight_template(&DEFAULT_HIGHLIGHT_COUNTS, 1.0, DEFAULT_CONE_HALF_ANGLE, 1)
                .unwrap();
        let l = Vec3::new(0.2, -0.3, 0.9).normalize();
        let p = Vec3::new(0.4, 0.5, 0.6);
        let big_l = 0.8;
        let entry = p - l * big_l;
        let placed = place_template(&h, &p, &Vec3::z(), &l, &entry, 1.0);
        for q in &placed[..32] {
            let axial = (q - entry).dot(&l);
            assert!((-1e-12..=big_l / 4.0 + 1e-12).contains(&axial));
        }
    }

    #[test]
    fn highlight_placement_rotates_with_inputs() {
        let h = generate_highlight_template(&DEFAULT_HIGHLIGHT_COUNTS, 1.0, 0.2, 9).unwrap();
        let mut rng = stream_rng(4, 0);
        for _ in 0..10 {
            let l = uniform_sphere(&mut rng);
            let w = uniform_sphere(&mut rng);
            let p = uniform_sphere(&mut rng);
            let entry = p - l * 0.7;
            let r =
                Rotation3::from_axis_angle(&Unit::new_normalize(uniform_sphere(&mut rng)), 1.234);
            let a = place_template(&h, &p, &w, &l, &entry, 1.0);
            let b = place_template(&h, &(r * p), &(r * w), &(r * l), &(r * entry), 1.0);
            for (qa, qb) in a.iter().zip(&b) {
                let rotated = r * (qa - entry) + r * entry;
                assert!((rotated - qb).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let t = generate_diffuse_template(&DEFAULT_DIFFUSE_COUNTS, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vtmpl");
        t.save(&path).unwrap();
        assert_eq!(SamplingTemplate::load(&path).unwrap(), t);
    }

    #[test]
    fn entry_point_on_box_face() {
        let layout = VoxelLayout {
            dims: [8; 3],
            voxel_size: 0.125,
            origin: Vec3::zeros(),
        };
        let e = light_entry_point(
            &layout,
            &Vec3::new(0.5, 0.5, 0.5),
            &Vec3::new(0.0, 0.0, -1.0),
        );
        assert!((e - Vec3::new(0.5, 0.5, 1.0)).norm() < 1e-12);
    }
}
