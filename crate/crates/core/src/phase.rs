//! Phase functions, solid-angle cap integrals ("volume phase") and the
//! per-template-point phase feature.
//!
//! Angles follow the propagation convention: `cos_theta = 1` means the light
//! keeps travelling in its original direction, so `g > 0` is forward
//! scattering.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::rng::{direction_around, uniform};
use crate::volume::MaterialClass;
use crate::Vec3;

pub const INV_4PI: f64 = 1.0 / (4.0 * PI);

#[derive(Debug, Error, PartialEq)]
pub enum PhaseError {
    #[error("lobe weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("negative lobe weight {0}")]
    NegativeWeight(f64),
    #[error("asymmetry parameter {0} outside (-1, 1)")]
    Asymmetry(f64),
    #[error("{kind:?} expects {expected} lobe(s), got {got}")]
    LobeCount {
        kind: PhaseKind,
        expected: &'static str,
        got: usize,
    },
    #[error("cosine {0} outside [-1, 1]")]
    Cosine(f64),
    #[error("cap half-angle {0} outside (0, π]")]
    DegenerateCap(f64),
    #[error("template point coincides with the shading point")]
    CoincidentPoint,
    #[error("quadrature needs at least {min} nodes, got {got}")]
    TooFewNodes { min: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseKind {
    Isotropic,
    Hg,
    MultiHg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub weight: f64,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PhaseSpec {
    kind: PhaseKind,
    lobes: Vec<Lobe>,
}

/// Validated isotropic / HG / multi-lobe HG phase function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PhaseSpec", into = "PhaseSpec")]
pub struct PhaseModel {
    kind: PhaseKind,
    lobes: Vec<Lobe>,
}

impl TryFrom<PhaseSpec> for PhaseModel {
    type Error = PhaseError;
    fn try_from(spec: PhaseSpec) -> Result<Self, PhaseError> {
        PhaseModel::new(spec.kind, spec.lobes)
    }
}

impl From<PhaseModel> for PhaseSpec {
    fn from(m: PhaseModel) -> Self {
        PhaseSpec {
            kind: m.kind,
            lobes: m.lobes,
        }
    }
}

/// Henyey-Greenstein density for one lobe.
#[inline]
pub fn hg(cos_theta: f64, g: f64) -> f64 {
    let denom = 1.0 + g * g - 2.0 * g * cos_theta;
    INV_4PI * (1.0 - g * g) / (denom * denom.sqrt())
}

/// Cosine of an HG-distributed scattering angle for uniform `u`.
pub fn sample_hg_cos(g: f64, u: f64) -> f64 {
    if g.abs() < 1e-3 {
        return 1.0 - 2.0 * u;
    }
    let s = (1.0 - g * g) / (1.0 - g + 2.0 * g * u);
    ((1.0 + g * g - s * s) / (2.0 * g)).clamp(-1.0, 1.0)
}

impl PhaseModel {
    pub fn new(kind: PhaseKind, lobes: Vec<Lobe>) -> Result<Self, PhaseError> {
        match kind {
            PhaseKind::Isotropic if !lobes.is_empty() => {
                return Err(PhaseError::LobeCount {
                    kind,
                    expected: "0",
                    got: lobes.len(),
                })
            }
            PhaseKind::Hg if lobes.len() != 1 => {
                return Err(PhaseError::LobeCount {
                    kind,
                    expected: "1",
                    got: lobes.len(),
                })
            }
            PhaseKind::MultiHg if lobes.len() < 2 => {
                return Err(PhaseError::LobeCount {
                    kind,
                    expected: "at least 2",
                    got: lobes.len(),
                })
            }
            _ => {}
        }
        for l in &lobes {
            if !(l.g > -1.0 && l.g < 1.0) {
                return Err(PhaseError::Asymmetry(l.g));
            }
            if !(l.weight >= 0.0) {
                return Err(PhaseError::NegativeWeight(l.weight));
            }
        }
        if !lobes.is_empty() {
            let sum: f64 = lobes.iter().map(|l| l.weight).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(PhaseError::WeightSum(sum));
            }
        }
        Ok(Self { kind, lobes })
    }

    pub fn isotropic() -> Self {
        Self {
            kind: PhaseKind::Isotropic,
            lobes: Vec::new(),
        }
    }

    pub fn hg(g: f64) -> Result<Self, PhaseError> {
        Self::new(PhaseKind::Hg, vec![Lobe { weight: 1.0, g }])
    }

    pub fn multi_hg(lobes: &[(f64, f64)]) -> Result<Self, PhaseError> {
        Self::new(
            PhaseKind::MultiHg,
            lobes
                .iter()
                .map(|&(weight, g)| Lobe { weight, g })
                .collect(),
        )
    }

    /// Default two-lobe model for solid/liquid media.
    pub fn solid_liquid_preset() -> Self {
        Self::multi_hg(&[(0.7, 0.857), (0.3, -0.4)]).unwrap()
    }

    /// Default three-lobe model for skin.
    pub fn skin_preset() -> Self {
        Self::multi_hg(&[(0.5, 0.9), (0.3, 0.3), (0.2, -0.5)]).unwrap()
    }

    /// Model family used for a material class; `g_values` supplies one
    /// asymmetry per lobe (equal weights unless a preset is wanted).
    pub fn for_material(class: MaterialClass, g_values: &[f64]) -> Result<Self, PhaseError> {
        match class {
            MaterialClass::Air => Ok(Self::isotropic()),
            MaterialClass::Gas => match g_values {
                [g] => Self::hg(*g),
                _ => Err(PhaseError::LobeCount {
                    kind: PhaseKind::Hg,
                    expected: "1",
                    got: g_values.len(),
                }),
            },
            MaterialClass::SolidLiquid | MaterialClass::Skin => {
                let want = class.lobe_count();
                if g_values.len() != want {
                    return Err(PhaseError::LobeCount {
                        kind: PhaseKind::MultiHg,
                        expected: if want == 2 { "2" } else { "3" },
                        got: g_values.len(),
                    });
                }
                let w = 1.0 / want as f64;
                Self::new(
                    PhaseKind::MultiHg,
                    g_values.iter().map(|&g| Lobe { weight: w, g }).collect(),
                )
            }
        }
    }

    pub fn kind(&self) -> PhaseKind {
        self.kind
    }

    pub fn lobes(&self) -> &[Lobe] {
        &self.lobes
    }

    /// Asymmetry values in lobe order (empty for isotropic).
    pub fn g_values(&self) -> Vec<f64> {
        self.lobes.iter().map(|l| l.g).collect()
    }

    /// Analytic mean cosine Σλ_k g_k.
    pub fn effective_g(&self) -> f64 {
        self.lobes.iter().map(|l| l.weight * l.g).sum()
    }

    /// Phase density at a scattering-angle cosine; `cos_theta` is clamped.
    #[inline]
    pub fn eval(&self, cos_theta: f64) -> f64 {
        let c = cos_theta.clamp(-1.0, 1.0);
        match self.kind {
            PhaseKind::Isotropic => INV_4PI,
            _ => self.lobes.iter().map(|l| l.weight * hg(c, l.g)).sum(),
        }
    }

    /// Largest value the density takes over all angles.
    pub fn max_value(&self) -> f64 {
        match self.kind {
            PhaseKind::Isotropic => INV_4PI,
            _ => self.eval(1.0).max(self.eval(-1.0)),
        }
    }

    /// Draws a direction whose cosine to `axis` follows this phase function.
    pub fn sample(&self, axis: &Vec3, rng: &mut impl Rng) -> Vec3 {
        let cos = match self.kind {
            PhaseKind::Isotropic => 1.0 - 2.0 * uniform(rng),
            _ => {
                let pick = uniform(rng);
                let mut acc = 0.0;
                let mut g = self.lobes.last().unwrap().g;
                for l in &self.lobes {
                    acc += l.weight;
                    if pick < acc {
                        g = l.g;
                        break;
                    }
                }
                sample_hg_cos(g, uniform(rng))
            }
        };
        direction_around(axis, cos, 2.0 * PI * uniform(rng))
    }
}

/// Checked phase evaluation.
pub fn eval_phase(model: &PhaseModel, cos_theta: f64) -> Result<f64, PhaseError> {
    if !(cos_theta.abs() <= 1.0) {
        return Err(PhaseError::Cosine(cos_theta));
    }
    Ok(model.eval(cos_theta))
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 {
                1.0
            } else if n == 1 {
                x
            } else {
                p1
            };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn integrate_over_cos(model: &PhaseModel, nodes: usize, moment: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = gauss_legendre(nodes);
    // Azimuthal symmetry contributes the 2π factor.
    2.0 * PI
        * x.iter()
            .zip(&w)
            .map(|(&c, &wi)| wi * model.eval(c) * moment(c))
            .sum::<f64>()
}

/// ∫ f_p dω over the sphere.
pub fn normalization(model: &PhaseModel, nodes: usize) -> f64 {
    integrate_over_cos(model, nodes, |_| 1.0)
}

/// ∫ f_p(θ) cos θ dω over the sphere.
pub fn mean_cosine(model: &PhaseModel, nodes: usize) -> Result<f64, PhaseError> {
    if nodes < 16 {
        return Err(PhaseError::TooFewNodes {
            min: 16,
            got: nodes,
        });
    }
    Ok(integrate_over_cos(model, nodes, |c| c))
}

/// Cone of directions within `half_angle` of `axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolidAngleCap {
    axis: Vec3,
    half_angle: f64,
}

impl SolidAngleCap {
    pub fn new(axis: Vec3, half_angle: f64) -> Result<Self, PhaseError> {
        if !(half_angle > 0.0 && half_angle <= PI) {
            return Err(PhaseError::DegenerateCap(half_angle));
        }
        let n = axis.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(PhaseError::CoincidentPoint);
        }
        Ok(Self {
            axis: axis / n,
            half_angle,
        })
    }

    pub fn axis(&self) -> Vec3 {
        self.axis
    }

    pub fn half_angle(&self) -> f64 {
        self.half_angle
    }

    pub fn solid_angle(&self) -> f64 {
        cap_solid_angle(self.half_angle)
    }
}

pub fn cap_solid_angle(half_angle: f64) -> f64 {
    2.0 * PI * (1.0 - half_angle.cos())
}

/// ∫ over a cap of half-angle `half` whose axis makes angle `acos(cos_beta)`
/// with the fixed direction. The integrand is symmetric in azimuth, so the
/// azimuth runs over [0, π] with the midpoint rule and is doubled.
fn cap_quadrature(
    model: &PhaseModel,
    cos_beta: f64,
    half: f64,
    polar_nodes: usize,
    azimuth_nodes: usize,
) -> f64 {
    let (x, w) = gauss_legendre(polar_nodes);
    let cb = cos_beta.clamp(-1.0, 1.0);
    let sb = (1.0 - cb * cb).max(0.0).sqrt();
    let dphi = PI / azimuth_nodes as f64;
    let cos_phi: Vec<f64> = (0..azimuth_nodes)
        .map(|k| ((k as f64 + 0.5) * dphi).cos())
        .collect();
    let mut total = 0.0;
    for (&xi, &wi) in x.iter().zip(&w) {
        let theta = 0.5 * half * (xi + 1.0);
        let (st, ct) = theta.sin_cos();
        let ring: f64 = cos_phi
            .iter()
            .map(|&cp| model.eval(sb * st * cp + cb * ct))
            .sum();
        total += wi * st * ring;
    }
    total * 0.5 * half * 2.0 * dphi
}

/// f* = ∫_cap f(angle(fixed_dir, φ)) dφ by polar Gauss–Legendre × azimuthal
/// midpoint quadrature (`nodes` polar, `2·nodes` azimuthal).
pub fn volume_phase(
    model: &PhaseModel,
    fixed_dir: &Vec3,
    cap: &SolidAngleCap,
    nodes: usize,
) -> Result<f64, PhaseError> {
    if nodes < 8 {
        return Err(PhaseError::TooFewNodes { min: 8, got: nodes });
    }
    let cos_beta = fixed_dir.normalize().dot(&cap.axis);
    if model.kind == PhaseKind::Isotropic {
        return Ok(INV_4PI * cap.solid_angle());
    }
    Ok(cap_quadrature(
        model,
        cos_beta,
        cap.half_angle,
        nodes,
        2 * nodes,
    ))
}

/// Something that can integrate a phase model over a cap, given the cosine
/// between the fixed direction and the cap axis.
pub trait VolumePhaseEval: Sync {
    fn cap_integral(&self, model: &PhaseModel, cos_beta: f64, half_angle: f64) -> f64;
}

/// Direct quadrature; the reference path.
#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub nodes: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self { nodes: 32 }
    }
}

impl VolumePhaseEval for Quadrature {
    fn cap_integral(&self, model: &PhaseModel, cos_beta: f64, half_angle: f64) -> f64 {
        if model.kind == PhaseKind::Isotropic {
            return INV_4PI * cap_solid_angle(half_angle);
        }
        cap_quadrature(model, cos_beta, half_angle, self.nodes, 2 * self.nodes)
    }
}

pub const TABLE_G_RANGE: (f64, f64) = (-0.95, 0.95);
pub const TABLE_DIMS: [usize; 3] = [64, 128, 32];

/// Precomputed cap-averaged HG phase over (g, angle to axis, half-angle).
/// Entries hold `volume_phase / cap_solid_angle`; the zero-aperture slice is
/// the plain phase value.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePhaseTable {
    dims: [usize; 3],
    g_range: (f64, f64),
    values: Vec<f32>,
}

impl VolumePhaseTable {
    pub fn build() -> Self {
        Self::build_with(TABLE_DIMS, TABLE_G_RANGE, 16)
    }

    pub fn build_with(dims: [usize; 3], g_range: (f64, f64), polar_nodes: usize) -> Self {
        let [ng, nb, nh] = dims;
        let values: Vec<f32> = (0..ng * nb)
            .into_par_iter()
            .flat_map_iter(|gb| {
                let (ig, ib) = (gb / nb, gb % nb);
                let g = axis_value(g_range.0, g_range.1, ng, ig);
                let beta = axis_value(0.0, PI, nb, ib);
                let model = PhaseModel::hg(g).expect("table g inside (-1, 1)");
                (0..nh).map(move |ih| {
                    let half = axis_value(0.0, PI, nh, ih);
                    let avg = if ih == 0 {
                        model.eval(beta.cos())
                    } else {
                        cap_quadrature(&model, beta.cos(), half, polar_nodes, 2 * polar_nodes)
                            / cap_solid_angle(half)
                    };
                    avg as f32
                })
            })
            .collect();
        Self {
            dims,
            g_range,
            values,
        }
    }

    pub fn from_parts(dims: [usize; 3], g_range: (f64, f64), values: Vec<f32>) -> Option<Self> {
        (values.len() == dims[0] * dims[1] * dims[2] && dims.iter().all(|&d| d >= 2)).then_some(
            Self {
                dims,
                g_range,
                values,
            },
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn g_range(&self) -> (f64, f64) {
        self.g_range
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Cap-averaged single-lobe phase; `g` is clamped to the table range.
    pub fn average_hg(&self, g: f64, cos_beta: f64, half_angle: f64) -> f64 {
        let [ng, nb, nh] = self.dims;
        let (fg, ig) = axis_coord(self.g_range.0, self.g_range.1, ng, g);
        let (fb, ib) = axis_coord(0.0, PI, nb, cos_beta.clamp(-1.0, 1.0).acos());
        let (fh, ih) = axis_coord(0.0, PI, nh, half_angle);
        let at = |a: usize, b: usize, c: usize| self.values[(a * nb + b) * nh + c] as f64;
        let mut acc = 0.0;
        for (da, wa) in [(0, 1.0 - fg), (1, fg)] {
            for (db, wb) in [(0, 1.0 - fb), (1, fb)] {
                for (dc, wc) in [(0, 1.0 - fh), (1, fh)] {
                    let w = wa * wb * wc;
                    if w != 0.0 {
                        acc += w * at(ig + da, ib + db, ih + dc);
                    }
                }
            }
        }
        acc
    }
}

fn axis_value(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    lo + (hi - lo) * i as f64 / (n - 1) as f64
}

/// Fractional position and base cell index, clamped so `index + 1 < n`.
fn axis_coord(lo: f64, hi: f64, n: usize, x: f64) -> (f64, usize) {
    let u = ((x - lo) / (hi - lo) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
    let i = (u.floor() as usize).min(n - 2);
    (u - i as f64, i)
}

impl VolumePhaseEval for VolumePhaseTable {
    fn cap_integral(&self, model: &PhaseModel, cos_beta: f64, half_angle: f64) -> f64 {
        let omega = cap_solid_angle(half_angle);
        match model.kind {
            PhaseKind::Isotropic => INV_4PI * omega,
            _ => {
                model
                    .lobes
                    .iter()
                    .map(|l| l.weight * self.average_hg(l.g, cos_beta, half_angle))
                    .sum::<f64>()
                    * omega
            }
        }
    }
}

/// Scalar phase feature of one template point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseFeature {
    pub value: f64,
}

/// f_i = f*(ω, s_i − p) · f*(s_i − p, l), both caps centred on `s_i − p`.
pub fn phase_feature(
    model: &PhaseModel,
    eval: &impl VolumePhaseEval,
    omega: &Vec3,
    light: &Vec3,
    p: &Vec3,
    s_i: &Vec3,
    cap_half_angle: f64,
) -> Result<PhaseFeature, PhaseError> {
    let offset = s_i - p;
    if offset.norm() == 0.0 {
        return Err(PhaseError::CoincidentPoint);
    }
    let cap = SolidAngleCap::new(offset, cap_half_angle)?;
    Ok(PhaseFeature {
        value: cap_pair_product(model, eval, omega, light, &cap.axis, cap_half_angle),
    })
}

pub(crate) fn cap_pair_product(
    model: &PhaseModel,
    eval: &impl VolumePhaseEval,
    omega: &Vec3,
    light: &Vec3,
    axis: &Vec3,
    half_angle: f64,
) -> f64 {
    let view = eval.cap_integral(model, omega.dot(axis), half_angle);
    let incident = eval.cap_integral(model, light.dot(axis), half_angle);
    view * incident
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, uniform_sphere};
    use nalgebra::Rotation3;

    #[test]
    fn eval_examples() {
        let iso = PhaseModel::isotropic();
        assert!((eval_phase(&iso, 0.3).unwrap() - 0.0795775).abs() < 1e-7);
        let g0 = PhaseModel::hg(0.0).unwrap();
        for c in [-1.0, -0.2, 0.5, 1.0] {
            assert!((g0.eval(c) - INV_4PI).abs() < 1e-15);
        }
        let g5 = PhaseModel::hg(0.5).unwrap();
        assert!((g5.eval(1.0) - 6.0 * INV_4PI).abs() < 1e-12);
        assert!((g5.eval(1.0) - 0.477465).abs() < 1e-6);
        assert!(matches!(eval_phase(&g5, 1.5), Err(PhaseError::Cosine(_))));
    }

    #[test]
    fn rejects_bad_models() {
        assert!(matches!(
            PhaseModel::multi_hg(&[(0.5, 0.2), (0.4, 0.1)]),
            Err(PhaseError::WeightSum(_))
        ));
        assert!(matches!(PhaseModel::hg(1.0), Err(PhaseError::Asymmetry(_))));
        assert!(matches!(
            PhaseModel::multi_hg(&[(1.2, 0.2), (-0.2, 0.1)]),
            Err(PhaseError::NegativeWeight(_))
        ));
        assert!(PhaseModel::new(PhaseKind::Hg, vec![]).is_err());
    }

    #[test]
    fn serde_round_trip_validates() {
        let m = PhaseModel::skin_preset();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<PhaseModel>(&json).unwrap(), m);
        let bad = r#"{"kind":"MultiHg","lobes":[{"weight":0.5,"g":0.1},{"weight":0.2,"g":0.3}]}"#;
        assert!(serde_json::from_str::<PhaseModel>(bad).is_err());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(5);
        let integral: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * xi.powi(8)).sum();
        assert!((integral - 2.0 / 9.0).abs() < 1e-13);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
    }

    #[test]
    fn mean_cosine_examples() {
        assert!(mean_cosine(&PhaseModel::isotropic(), 64).unwrap().abs() < 1e-6);
        assert!((mean_cosine(&PhaseModel::hg(0.7).unwrap(), 64).unwrap() - 0.7).abs() < 1e-3);
        let sym = PhaseModel::multi_hg(&[(0.5, 0.8), (0.5, -0.8)]).unwrap();
        assert!(mean_cosine(&sym, 64).unwrap().abs() < 1e-3);
        assert!(mean_cosine(&sym, 8).is_err());
    }

    #[test]
    fn normalization_all_kinds() {
        let models = [
            PhaseModel::isotropic(),
            PhaseModel::hg(0.9).unwrap(),
            PhaseModel::hg(-0.5).unwrap(),
            PhaseModel::solid_liquid_preset(),
            PhaseModel::skin_preset(),
        ];
        for m in &models {
            assert!((normalization(m, 64) - 1.0).abs() < 1e-3, "{m:?}");
        }
    }

    #[test]
    fn mhg_is_linear_combination() {
        let m = PhaseModel::skin_preset();
        for k in 0..=20 {
            let c = -1.0 + 0.1 * k as f64;
            let want: f64 = m.lobes().iter().map(|l| l.weight * hg(c, l.g)).sum();
            assert_eq!(m.eval(c), want);
        }
    }

    #[test]
    fn volume_phase_examples() {
        let g = PhaseModel::hg(0.857).unwrap();
        let dir = Vec3::new(0.3, -0.5, 0.8).normalize();
        let full = SolidAngleCap::new(Vec3::new(0.0, 1.0, 0.0), PI).unwrap();
        assert!((volume_phase(&g, &dir, &full, 64).unwrap() - 1.0).abs() < 1e-3);

        let iso = PhaseModel::isotropic();
        let half = SolidAngleCap::new(Vec3::z(), PI / 2.0).unwrap();
        assert!((volume_phase(&iso, &dir, &half, 16).unwrap() - 0.5).abs() < 1e-3);
        // Non-isotropic quadrature path with a flat lobe.
        let flat = PhaseModel::hg(0.0).unwrap();
        assert!((volume_phase(&flat, &dir, &half, 16).unwrap() - 0.5).abs() < 1e-3);

        let g5 = PhaseModel::hg(0.5).unwrap();
        let axis = Vec3::new(1.0, 1.0, 0.0).normalize();
        let tiny = SolidAngleCap::new(axis, 1e-3).unwrap();
        let ratio = volume_phase(&g5, &dir, &tiny, 16).unwrap() / tiny.solid_angle();
        assert!((ratio - g5.eval(dir.dot(&axis))).abs() < 1e-3);

        assert!(matches!(
            SolidAngleCap::new(Vec3::z(), 0.0),
            Err(PhaseError::DegenerateCap(_))
        ));
        assert!(volume_phase(&g5, &dir, &tiny, 4).is_err());
    }

    #[test]
    fn volume_phase_monotone_in_half_angle() {
        let m = PhaseModel::solid_liquid_preset();
        let dir = Vec3::new(0.1, 0.7, -0.2).normalize();
        let mut prev = 0.0;
        for k in 1..=40 {
            let cap = SolidAngleCap::new(Vec3::z(), PI * k as f64 / 40.0).unwrap();
            let v = volume_phase(&m, &dir, &cap, 48).unwrap();
            assert!(v >= prev - 1e-12, "{k}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn phase_feature_examples() {
        let iso = PhaseModel::isotropic();
        let q = Quadrature { nodes: 32 };
        let p = Vec3::new(0.1, 0.2, 0.3);
        let s = p + Vec3::new(0.0, 0.0, 0.5);
        let w = Vec3::new(0.0, 1.0, 0.0);
        let l = Vec3::new(1.0, 0.0, 0.0);
        let f = phase_feature(&iso, &q, &w, &l, &p, &s, PI / 2.0).unwrap();
        assert!((f.value - 0.25).abs() < 2e-3);
        let g0 = PhaseModel::hg(0.0).unwrap();
        let f0 = phase_feature(&g0, &q, &w, &l, &p, &s, 0.4).unwrap();
        let fi = phase_feature(&iso, &q, &w, &l, &p, &s, 0.4).unwrap();
        assert!((f0.value - fi.value).abs() < 1e-12);
        assert_eq!(
            phase_feature(&iso, &q, &w, &l, &p, &p, 0.4),
            Err(PhaseError::CoincidentPoint)
        );
    }

    #[test]
    fn phase_feature_matches_monte_carlo_caps() {
        // s_i − p along l, ω opposite l: one forward and one backward cap.
        let m = PhaseModel::hg(0.857).unwrap();
        let l = Vec3::new(0.0, 0.0, 1.0);
        let w = -l;
        let p = Vec3::zeros();
        let s = l * 0.3;
        let half = 0.35;
        let got = phase_feature(&m, &Quadrature { nodes: 48 }, &w, &l, &p, &s, half)
            .unwrap()
            .value;
        // Oracle: uniform sampling of directions inside the cap.
        let mut rng = stream_rng(99, 0);
        let n = 400_000;
        let (mut fw, mut fl) = (0.0, 0.0);
        let omega = cap_solid_angle(half);
        for _ in 0..n {
            let cos = 1.0 - uniform(&mut rng) * (1.0 - half.cos());
            let d = direction_around(&l, cos, 2.0 * PI * uniform(&mut rng));
            fw += m.eval(w.dot(&d));
            fl += m.eval(l.dot(&d));
        }
        let oracle = (fw / n as f64 * omega) * (fl / n as f64 * omega);
        assert!(((got - oracle) / oracle).abs() < 0.01, "{got} vs {oracle}");
    }

    #[test]
    fn phase_feature_rotation_invariant() {
        let m = PhaseModel::skin_preset();
        let q = Quadrature { nodes: 24 };
        let mut rng = stream_rng(5, 0);
        for _ in 0..20 {
            let w = uniform_sphere(&mut rng);
            let l = uniform_sphere(&mut rng);
            let p = uniform_sphere(&mut rng);
            let s = p + uniform_sphere(&mut rng) * 0.4;
            let axis = uniform_sphere(&mut rng);
            let r = Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                2.0 * PI * uniform(&mut rng),
            );
            let a = phase_feature(&m, &q, &w, &l, &p, &s, 0.3).unwrap().value;
            let b = phase_feature(&m, &q, &(r * w), &(r * l), &(r * p), &(r * s), 0.3)
                .unwrap()
                .value;
            assert!(((a - b) / a).abs() < 1e-6);
        }
    }

    #[test]
    fn table_tracks_quadrature() {
        let table = VolumePhaseTable::build_with([24, 48, 16], TABLE_G_RANGE, 12);
        let q = Quadrature { nodes: 48 };
        let m = PhaseModel::hg(0.3).unwrap();
        for &(cb, h) in &[(0.9, 0.2), (-0.3, 0.8), (0.1, 2.5)] {
            let a = table.cap_integral(&m, cb, h);
            let b = q.cap_integral(&m, cb, h);
            assert!(((a - b) / b).abs() < 0.02, "{a} vs {b}");
        }
        let iso = PhaseModel::isotropic();
        assert_eq!(
            table.cap_integral(&iso, 0.2, 0.5),
            INV_4PI * cap_solid_angle(0.5)
        );
    }

    #[test]
    fn sampling_matches_density() {
        // Histogram of sampled cosines against the analytic phase.
        let m = PhaseModel::solid_liquid_preset();
        let axis = Vec3::new(0.0, 0.6, 0.8);
        let mut rng = stream_rng(3, 0);
        let bins = 10;
        let n = 200_000;
        let mut hist = vec![0usize; bins];
        for _ in 0..n {
            let d = m.sample(&axis, &mut rng);
            let c = d.dot(&axis);
            hist[(((c + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let (x, w) = gauss_legendre(32);
        for (b, &count) in hist.iter().enumerate() {
            let (lo, hi) = (
                -1.0 + 2.0 * b as f64 / bins as f64,
                -1.0 + 2.0 * (b + 1) as f64 / bins as f64,
            );
            let p: f64 = x
                .iter()
                .zip(&w)
                .map(|(&xi, &wi)| wi * 0.5 * (hi - lo) * m.eval(lo + (xi + 1.0) * 0.5 * (hi - lo)))
                .sum::<f64>()
                * 2.0
                * PI;
            let expected = p * n as f64;
            assert!(
                (count as f64 - expected).abs() < 5.0 * expected.sqrt() + 5.0,
                "bin {b}: {count} vs {expected}"
            );
        }
    }
}
