//! Monte Carlo radiative-transfer oracle: transmittance, single scattering,
//! the Neumann-series operator, a volumetric path tracer, labelled datasets
//! and reference renders.
//!
//! Direction conventions: `omega` is the direction from the viewer to the
//! shading point, the light travels along `light.direction()`, so single
//! scattering evaluates the phase function at `omega · (−l)`.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::camera::Camera;
use crate::features::{FeatureTable, SampleFeatureBlock};
use crate::image::Image;
use crate::medium::{DistantLight, Medium};
use crate::phase::{PhaseModel, INV_4PI};
use crate::rng::{stream_rng, uniform, uniform_sphere, StreamRng};
use crate::{Rgb, Vec3};

pub const DEFAULT_MAX_DEPTH: usize = 64;
pub const RUSSIAN_ROULETTE_DEPTH: usize = 16;
pub const VDATA_MAGIC: &[u8; 4] = b"VDAT";
pub const VDATA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RteError {
    #[error("step {0} must be positive")]
    Step(f64),
    #[error("at least one sample is required")]
    NoSamples,
    #[error("camera frustum misses the medium")]
    MissesMedium,
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("dataset manifest: {0}")]
    Json(#[from] serde_json::Error),
}

fn check_step(step: f64) -> Result<(), RteError> {
    if step > 0.0 {
        Ok(())
    } else {
        Err(RteError::Step(step))
    }
}

#[inline]
fn mul(a: Rgb, b: Rgb) -> Rgb {
    [a[0] * b[0], a[1] * b[1], a[2] * b[2]]
}

#[inline]
fn scale(a: Rgb, k: f64) -> Rgb {
    [a[0] * k, a[1] * k, a[2] * k]
}

#[inline]
fn add(a: Rgb, b: Rgb) -> Rgb {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Per-channel `exp(−σ_c · ∫ρ ds)` along `p → q` (midpoint rule).
pub fn transmittance(medium: &Medium, p: &Vec3, q: &Vec3, step: f64) -> Result<Rgb, RteError> {
    check_step(step)?;
    Ok(transmittance_unchecked(medium, p, q, step))
}

fn transmittance_unchecked(medium: &Medium, p: &Vec3, q: &Vec3, step: f64) -> Rgb {
    let tau = medium.grid().march(p, q, step);
    medium.sigma_t_scale().map(|s| (-s * tau).exp())
}

/// Point where the ray from `p` towards the light leaves the grid (`p` itself
/// if that ray misses the grid).
pub fn light_exit(medium: &Medium, light: &DistantLight, p: &Vec3) -> Vec3 {
    let back = light.to_light();
    match medium.layout().ray_interval(p, &back) {
        Some((_, t1)) => p + back * t1,
        None => *p,
    }
}

/// Transmittance from `p` to the light.
pub fn light_transmittance(medium: &Medium, light: &DistantLight, p: &Vec3, step: f64) -> Rgb {
    transmittance_unchecked(medium, p, &light_exit(medium, light, p), step)
}

/// `F_0(p, ω) = f_p(ω · (−l)) · T(p → light) · I`.
pub fn single_scatter(
    medium: &Medium,
    light: &DistantLight,
    p: &Vec3,
    omega: &Vec3,
    step: f64,
) -> Result<Rgb, RteError> {
    check_step(step)?;
    let f = medium.phase().eval(omega.dot(&light.to_light()));
    Ok(scale(
        mul(
            light_transmittance(medium, light, p, step),
            light.intensity(),
        ),
        f,
    ))
}

/// An in-scattering field `F(p, ω)`.
pub trait ScatterField: Sync {
    fn eval(&self, p: &Vec3, omega: &Vec3) -> Rgb;
}

impl<F: Fn(&Vec3, &Vec3) -> Rgb + Sync> ScatterField for F {
    fn eval(&self, p: &Vec3, omega: &Vec3) -> Rgb {
        self(p, omega)
    }
}

/// `F_0` with a deterministic ray-marched transmittance.
pub struct SingleScatterField<'a> {
    pub medium: &'a Medium,
    pub light: &'a DistantLight,
    pub step: f64,
}

impl ScatterField for SingleScatterField<'_> {
    fn eval(&self, p: &Vec3, omega: &Vec3) -> Rgb {
        let f = self.medium.phase().eval(omega.dot(&self.light.to_light()));
        scale(
            mul(
                light_transmittance(self.medium, self.light, p, self.step),
                self.light.intensity(),
            ),
            f,
        )
    }
}

enum Flight {
    Collision { t: f64, weight: Rgb },
    Escape { weight: Rgb },
}

/// Spectral tracking along `o + t·d`, `t ∈ [t0, t1]`: samples a collision
/// with density ∝ σ̄·T̄ and returns per-channel weights that make
/// `weight_c · g(x)` an unbiased estimate of `∫ T_c σ_c g dt`, or an escape
/// whose weight estimates `T_c` over the whole interval.
fn track(medium: &Medium, o: &Vec3, d: &Vec3, t0: f64, t1: f64, rng: &mut impl Rng) -> Flight {
    let majorant = medium.majorant();
    let mut weight = [1.0; 3];
    if majorant <= 0.0 {
        return Flight::Escape { weight };
    }
    let mut t = t0;
    loop {
        t -= (1.0 - uniform(rng)).ln() / majorant;
        if t >= t1 {
            return Flight::Escape { weight };
        }
        let sigma = medium.sigma_t(&(o + d * t));
        let ratio = sigma.map(|s| s / majorant);
        let p_real = (ratio[0] + ratio[1] + ratio[2]) / 3.0;
        if p_real <= 0.0 {
            continue;
        }
        if uniform(rng) < p_real {
            for c in 0..3 {
                weight[c] *= ratio[c] / p_real;
            }
            return Flight::Collision { t, weight };
        }
        for c in 0..3 {
            weight[c] *= (1.0 - ratio[c]) / (1.0 - p_real);
        }
    }
}

fn track_from(medium: &Medium, o: &Vec3, d: &Vec3, rng: &mut impl Rng) -> Flight {
    match medium.layout().ray_interval(o, d) {
        Some((t0, t1)) => track(medium, o, d, t0, t1, rng),
        None => Flight::Escape { weight: [1.0; 3] },
    }
}

/// Unbiased transmittance to the light: closed form for homogeneous grids,
/// ratio tracking otherwise.
fn stochastic_light_transmittance(
    medium: &Medium,
    light: &DistantLight,
    p: &Vec3,
    rng: &mut impl Rng,
) -> Rgb {
    let back = light.to_light();
    let Some((t0, t1)) = medium.layout().ray_interval(p, &back) else {
        return [1.0; 3];
    };
    let majorant = medium.majorant();
    if majorant <= 0.0 {
        return [1.0; 3];
    }
    if medium.is_homogeneous() {
        let rho = medium.grid().values()[0] as f64;
        return medium.sigma_t_scale().map(|s| (-s * rho * (t1 - t0)).exp());
    }
    let mut tr = [1.0; 3];
    let mut t = t0;
    loop {
        t -= (1.0 - uniform(rng)).ln() / majorant;
        if t >= t1 {
            return tr;
        }
        let sigma = medium.sigma_t(&(p + back * t));
        for c in 0..3 {
            tr[c] *= 1.0 - sigma[c] / majorant;
        }
    }
}

/// Termination controls of the path tracer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub max_depth: usize,
    pub rr_depth: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
            rr_depth: RUSSIAN_ROULETTE_DEPTH,
        }
    }
}

/// One path-traced sample of `F(p, ω)`: next-event estimation at every
/// vertex, phase-sampled continuation, spectral tracking between vertices.
fn trace_path(
    medium: &Medium,
    light: &DistantLight,
    p: &Vec3,
    omega: &Vec3,
    cfg: &TraceConfig,
    rng: &mut impl Rng,
) -> Rgb {
    let phase = medium.phase();
    let albedo = medium.albedo();
    let survival = medium.max_albedo();
    let to_light = light.to_light();
    let mut total = [0.0; 3];
    let mut beta = [1.0; 3];
    let mut x = *p;
    let mut dir = *omega;
    let mut depth = 0;
    loop {
        let tr = stochastic_light_transmittance(medium, light, &x, rng);
        let f = phase.eval(dir.dot(&to_light));
        total = add(total, scale(mul(mul(beta, tr), light.intensity()), f));
        if depth >= cfg.max_depth || survival <= 0.0 {
            return total;
        }
        let next = phase.sample(&dir, rng);
        match track_from(medium, &x, &next, rng) {
            Flight::Escape { .. } => return total,
            Flight::Collision { t, weight } => {
                x += next * t;
                dir = next;
                beta = mul(mul(beta, weight), albedo);
                depth += 1;
            }
        }
        if depth > cfg.rr_depth {
            if uniform(rng) >= survival {
                return total;
            }
            beta = scale(beta, 1.0 / survival);
        }
    }
}

/// Running mean and standard error per channel.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    sum: Rgb,
    sum_sq: Rgb,
}

impl Moments {
    fn push(&mut self, v: Rgb) {
        self.n += 1;
        for c in 0..3 {
            self.sum[c] += v[c];
            self.sum_sq[c] += v[c] * v[c];
        }
    }

    fn mean(&self) -> Rgb {
        scale(self.sum, 1.0 / self.n.max(1) as f64)
    }

    fn stderr(&self) -> Rgb {
        let n = self.n as f64;
        if self.n < 2 {
            return [0.0; 3];
        }
        std::array::from_fn(|c| {
            let m = self.sum[c] / n;
            ((self.sum_sq[c] / n - m * m).max(0.0) / (n - 1.0)).sqrt()
        })
    }
}

/// Monte Carlo estimate with per-channel standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: Rgb,
    pub stderr: Rgb,
    pub samples: usize,
}

impl From<Moments> for Estimate {
    fn from(m: Moments) -> Self {
        Self {
            mean: m.mean(),
            stderr: m.stderr(),
            samples: m.n,
        }
    }
}

/// Path-traced in-scatter value at one centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterLabel {
    pub f: Rgb,
    pub stderr: Rgb,
    pub spp: usize,
    pub p: [f64; 3],
    pub omega: [f64; 3],
}

/// Unbiased estimate of `F(p, ω)` from `spp` independent paths.
pub fn path_trace_inscatter(
    medium: &Medium,
    light: &DistantLight,
    p: &Vec3,
    omega: &Vec3,
    spp: usize,
    cfg: &TraceConfig,
    seed: u64,
) -> Result<ScatterLabel, RteError> {
    path_trace_with(medium, light, p, omega, spp, cfg, &mut stream_rng(seed, 0))
}

fn path_trace_with(
    medium: &Medium,
    light: &DistantLight,
    p: &Vec3,
    omega: &Vec3,
    spp: usize,
    cfg: &TraceConfig,
    rng: &mut StreamRng,
) -> Result<ScatterLabel, RteError> {
    if spp == 0 {
        return Err(RteError::NoSamples);
    }
    let omega = omega.normalize();
    let mut m = Moments::default();
    for _ in 0..spp {
        m.push(trace_path(medium, light, p, &omega, cfg, rng));
    }
    Ok(ScatterLabel {
        f: m.mean(),
        stderr: m.stderr(),
        spp,
        p: (*p).into(),
        omega: omega.into(),
    })
}

/// Direction sampling inside the transport operator: half uniform, half
/// phase-distributed. Returns the direction and `f_p / pdf`.
fn defensive_direction(medium: &Medium, omega: &Vec3, rng: &mut impl Rng) -> (Vec3, f64) {
    let phase = medium.phase();
    let d = if uniform(rng) < 0.5 {
        uniform_sphere(rng)
    } else {
        phase.sample(omega, rng)
    };
    let f = phase.eval(omega.dot(&d));
    (d, f / (0.5 * INV_4PI + 0.5 * f))
}

/// One Monte Carlo estimate of `(ΠF)(p, ω) = ∫ f_p ∫ T σ_t F(x, ω_i) dx dω_i`.
pub fn neumann_apply(
    medium: &Medium,
    field: &impl ScatterField,
    p: &Vec3,
    omega: &Vec3,
    samples: usize,
    seed: u64,
) -> Result<Estimate, RteError> {
    if samples == 0 {
        return Err(RteError::NoSamples);
    }
    let omega = omega.normalize();
    let mut rng = stream_rng(seed, 0);
    let mut m = Moments::default();
    for _ in 0..samples {
        let (d, w) = defensive_direction(medium, &omega, &mut rng);
        let v = match track_from(medium, p, &d, &mut rng) {
            Flight::Escape { .. } => [0.0; 3],
            Flight::Collision { t, weight } => scale(mul(weight, field.eval(&(p + d * t), &d)), w),
        };
        m.push(v);
    }
    Ok(m.into())
}

/// Whether the phase function sits inside the operator or is factored out as
/// a constant per order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeriesMode {
    Regular,
    /// Directions uniform, no phase inside the integrals; order `i` is
    /// multiplied by `(1/4π)^(i+1)`. Exact for isotropic scattering.
    CoDirectional,
}

/// Orders `F_0..F_k` and their albedo-weighted partial sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannTerms {
    pub terms: Vec<Rgb>,
    pub stderr: Vec<Rgb>,
    /// Standard error of the full sum, from per-walk totals.
    pub total_stderr: Rgb,
    pub albedo: Rgb,
    pub samples: usize,
}

impl NeumannTerms {
    /// `Σ_{i≤k} η^i F_i` for every `k`.
    pub fn partial_sums(&self) -> Vec<Rgb> {
        let mut acc = [0.0; 3];
        self.terms
            .iter()
            .enumerate()
            .map(|(i, t)| {
                acc = add(acc, mul(*t, self.albedo.map(|a| a.powi(i as i32))));
                acc
            })
            .collect()
    }

    pub fn sum(&self) -> Rgb {
        *self.partial_sums().last().unwrap()
    }

    pub fn sum_stderr(&self) -> Rgb {
        self.total_stderr
    }
}

/// Random walks estimating every order of `F = Σ η^i F_i` up to `order`,
/// with `F_{i+1} = Π F_i` and a ray-marched `F_0`.
#[allow(clippy::too_many_arguments)]
pub fn neumann_series(
    medium: &Medium,
    light: &DistantLight,
    p: &Vec3,
    omega: &Vec3,
    order: usize,
    samples: usize,
    mode: SeriesMode,
    seed: u64,
) -> Result<NeumannTerms, RteError> {
    if samples == 0 {
        return Err(RteError::NoSamples);
    }
    let omega = omega.normalize();
    let step = medium.grid().default_step();
    let f0 = |x: &Vec3, d: &Vec3| -> Rgb {
        let tr = mul(
            light_transmittance(medium, light, x, step),
            light.intensity(),
        );
        match mode {
            SeriesMode::Regular => scale(tr, medium.phase().eval(d.dot(&light.to_light()))),
            SeriesMode::CoDirectional => tr,
        }
    };
    let factor = |i: usize| match mode {
        SeriesMode::Regular => 1.0,
        SeriesMode::CoDirectional => INV_4PI.powi(i as i32 + 1),
    };
    let mut moments = vec![Moments::default(); order + 1];
    let mut total = Moments::default();
    let albedo = medium.albedo();
    let base = f0(p, &omega);
    let mut rng = stream_rng(seed, 0);
    for _ in 0..samples {
        let mut beta = [1.0; 3];
        let mut x = *p;
        let mut dir = omega;
        let mut alive = true;
        let mut walk = [0.0; 3];
        for (i, m) in moments.iter_mut().enumerate().skip(1) {
            if alive {
                let (d, w) = match mode {
                    SeriesMode::Regular => defensive_direction(medium, &dir, &mut rng),
                    SeriesMode::CoDirectional => (uniform_sphere(&mut rng), 4.0 * PI),
                };
                match track_from(medium, &x, &d, &mut rng) {
                    Flight::Escape { .. } => alive = false,
                    Flight::Collision { t, weight } => {
                        x += d * t;
                        dir = d;
                        beta = scale(mul(beta, weight), w);
                    }
                }
            }
            let v = if alive {
                mul(beta, f0(&x, &dir))
            } else {
                [0.0; 3]
            };
            let w = scale(albedo.map(|a| a.powi(i as i32)), factor(i));
            walk = add(walk, mul(v, w));
            m.push(v);
        }
        total.push(walk);
    }
    let mut terms: Vec<Rgb> = moments
        .iter()
        .enumerate()
        .map(|(i, m)| scale(m.mean(), factor(i)))
        .collect();
    let mut stderr: Vec<Rgb> = moments
        .iter()
        .enumerate()
        .map(|(i, m)| scale(m.stderr(), factor(i)))
        .collect();
    terms[0] = scale(base, factor(0));
    stderr[0] = [0.0; 3];
    Ok(NeumannTerms {
        terms,
        stderr,
        total_stderr: total.stderr(),
        albedo,
        samples,
    })
}

/// Labels for every centre of a feature table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub medium_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub spp: usize,
    pub trace: TraceConfig,
    pub stderr_ceiling: Option<f64>,
    pub diffuse_counts: Vec<usize>,
    pub highlight_counts: Vec<usize>,
    pub albedo: Rgb,
    pub phase: PhaseModel,
    pub light: [f64; 3],
    pub entries: usize,
    /// Indices whose relative standard error exceeded the ceiling.
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub diffuse: SampleFeatureBlock,
    pub highlight: SampleFeatureBlock,
    pub label: ScatterLabel,
    pub flagged: bool,
}

/// Feature blocks paired with path-traced labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetZ {
    pub manifest: DatasetManifest,
    pub entries: Vec<DatasetEntry>,
}

/// Identity of a dataset run, recorded in its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRequest {
    pub medium_id: String,
    pub config_digest: String,
    pub spp: usize,
    pub trace: TraceConfig,
    pub seed: u64,
    /// Entries whose largest per-channel `stderr / F` exceeds this are flagged.
    pub stderr_ceiling: Option<f64>,
}

/// Path-traces a label at every centre of `table` (stream = centre index).
pub fn generate_dataset(
    medium: &Medium,
    light: &DistantLight,
    table: &FeatureTable,
    req: &DatasetRequest,
) -> Result<DatasetZ, RteError> {
    if req.spp == 0 {
        return Err(RteError::NoSamples);
    }
    let labels: Vec<ScatterLabel> = table
        .centers
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = stream_rng(req.seed, i as u64);
            path_trace_with(
                medium,
                light,
                &Vec3::from(c.p),
                &Vec3::from(c.omega),
                req.spp,
                &req.trace,
                &mut rng,
            )
        })
        .collect::<Result<_, _>>()?;
    let mut flagged = Vec::new();
    let entries = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let bad = req.stderr_ceiling.is_some_and(|ceil| {
                (0..3).any(|c| {
                    label.stderr[c] > ceil * label.f[c].abs().max(1e-12) || !label.f[c].is_finite()
                })
            });
            if bad {
                flagged.push(i);
            }
            DatasetEntry {
                diffuse: table.diffuse[i].clone(),
                highlight: table.highlight[i].clone(),
                label,
                flagged: bad,
            }
        })
        .collect::<Vec<_>>();
    Ok(DatasetZ {
        manifest: DatasetManifest {
            medium_id: req.medium_id.clone(),
            seed: req.seed,
            config_digest: req.config_digest.clone(),
            spp: req.spp,
            trace: req.trace,
            stderr_ceiling: req.stderr_ceiling,
            diffuse_counts: table.diffuse_counts.clone(),
            highlight_counts: table.highlight_counts.clone(),
            albedo: medium.albedo(),
            phase: medium.phase().clone(),
            light: light.direction().into(),
            entries: entries.len(),
            flagged,
        },
        entries,
    })
}

impl DatasetZ {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// "VDAT", version, manifest length + JSON, then per entry: centre and
    /// view (f64), label and stderr (f32), flag byte, feature blocks (f32).
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), RteError> {
        let json = serde_json::to_vec(&self.manifest)?;
        w.write_all(VDATA_MAGIC)?;
        w.write_u32::<LittleEndian>(VDATA_VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for e in &self.entries {
            for v in e.label.p.iter().chain(&e.label.omega) {
                w.write_f64::<LittleEndian>(*v)?;
            }
            for v in e.label.f.iter().chain(&e.label.stderr) {
                w.write_f32::<LittleEndian>(*v as f32)?;
            }
            w.write_u8(e.flagged as u8)?;
            for b in [&e.diffuse, &e.highlight] {
                for v in b.density.iter().chain(&b.transmittance).chain(&b.phase) {
                    w.write_f32::<LittleEndian>(*v)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    /// Labels are stored as f32; the round trip is exact for the stored values.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RteError> {
        let mut r = bytes;
        let eof = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                RteError::Format("truncated".into())
            } else {
                e.into()
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != VDATA_MAGIC {
            return Err(RteError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != VDATA_VERSION {
            return Err(RteError::Format(format!("unsupported version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(eof)? as usize;
        if len > r.len() {
            return Err(RteError::Format("truncated manifest".into()));
        }
        let manifest: DatasetManifest = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let nd: usize = manifest.diffuse_counts.iter().sum();
        let nh: usize = manifest.highlight_counts.iter().sum();
        let per_entry = 48 + 24 + 1 + 12 * (nd + nh);
        if r.len() != per_entry * manifest.entries {
            return Err(RteError::Format(format!(
                "payload {} bytes, expected {}",
                r.len(),
                per_entry * manifest.entries
            )));
        }
        let mut entries = Vec::with_capacity(manifest.entries);
        for _ in 0..manifest.entries {
            let mut pv = [0.0; 6];
            for v in &mut pv {
                *v = r.read_f64::<LittleEndian>()?;
            }
            let mut fv = [0.0; 6];
            for v in &mut fv {
                *v = r.read_f32::<LittleEndian>()? as f64;
            }
            let flagged = r.read_u8()? != 0;
            let (p, omega) = ([pv[0], pv[1], pv[2]], [pv[3], pv[4], pv[5]]);
            let mut block =
                |kind, counts: &Vec<usize>, n: usize| -> Result<SampleFeatureBlock, RteError> {
                    let mut read = |n: usize| {
                        (0..n)
                            .map(|_| r.read_f32::<LittleEndian>())
                            .collect::<Result<Vec<_>, _>>()
                    };
                    Ok(SampleFeatureBlock {
                        kind,
                        center: p,
                        omega,
                        light: manifest.light,
                        layer_sizes: counts.clone(),
                        density: read(n)?,
                        transmittance: read(n)?,
                        phase: read(n)?,
                    })
                };
            let diffuse = block(
                crate::template::TemplateKind::Diffuse,
                &manifest.diffuse_counts,
                nd,
            )?;
            let highlight = block(
                crate::template::TemplateKind::Highlight,
                &manifest.highlight_counts,
                nh,
            )?;
            let label = ScatterLabel {
                f: [fv[0], fv[1], fv[2]],
                stderr: [fv[3], fv[4], fv[5]],
                spp: manifest.spp,
                p,
                omega,
            };
            entries.push(DatasetEntry {
                diffuse,
                highlight,
                label,
                flagged,
            });
        }
        Ok(Self { manifest, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), RteError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RteError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn check_frustum(medium: &Medium, camera: &Camera) -> Result<(), RteError> {
    let (w, h) = (camera.width(), camera.height());
    let o = camera.origin();
    let probes = [
        (0, 0),
        (w - 1, 0),
        (0, h - 1),
        (w - 1, h - 1),
        (w / 2, h / 2),
    ];
    let hits_probe = probes.iter().any(|&(i, j)| {
        medium
            .layout()
            .ray_interval(&o, &camera.pixel_ray(i, j))
            .is_some()
    });
    let center = (medium.layout().bbox_min() + medium.layout().bbox_max()) / 2.0;
    let to_center = (center - o).normalize();
    let facing = to_center.dot(&camera.ray(w as f64 / 2.0, h as f64 / 2.0)) > 0.0;
    if hits_probe || facing {
        Ok(())
    } else {
        Err(RteError::MissesMedium)
    }
}

/// Unbiased per-pixel estimate of `L = T·L_bg + ∫ T σ_s F dx`: spectral
/// tracking along the view ray, one path-traced `F` sample per collision.
pub fn render_reference(
    medium: &Medium,
    light: &DistantLight,
    camera: &Camera,
    spp: usize,
    cfg: &TraceConfig,
    background: Rgb,
    seed: u64,
) -> Result<Image, RteError> {
    if spp == 0 {
        return Err(RteError::NoSamples);
    }
    check_frustum(medium, camera)?;
    let (w, h) = (camera.width(), camera.height());
    let albedo = medium.albedo();
    let o = camera.origin();
    let pixels = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let mut rng = stream_rng(seed, idx as u64);
            let dir = camera.pixel_ray(idx % w, idx / w);
            let mut sum = [0.0; 3];
            for _ in 0..spp {
                let v = match track_from(medium, &o, &dir, &mut rng) {
                    Flight::Escape { weight } => mul(weight, background),
                    Flight::Collision { t, weight } => {
                        let x = o + dir * t;
                        mul(
                            mul(weight, albedo),
                            trace_path(medium, light, &x, &dir, cfg, &mut rng),
                        )
                    }
                };
                sum = add(sum, v);
            }
            scale(sum, 1.0 / spp as f64)
        })
        .collect();
    Ok(Image {
        width: w,
        height: h,
        pixels,
    })
}

/// Deterministic march of one view ray: per segment of constant extinction,
/// `∫ T σ_s F = T_start · η · F · (1 − e^(−σ h))`.
pub fn march_ray(
    medium: &Medium,
    origin: &Vec3,
    dir: &Vec3,
    step: f64,
    background: Rgb,
    field: &impl ScatterField,
) -> Rgb {
    let Some((t0, t1)) = medium.layout().ray_interval(origin, dir) else {
        return background;
    };
    let len = t1 - t0;
    if len <= 0.0 {
        return background;
    }
    let n = (len / step - 1e-9).ceil().max(1.0) as usize;
    let h = len / n as f64;
    let albedo = medium.albedo();
    let mut tr = [1.0; 3];
    let mut radiance = [0.0; 3];
    for s in 0..n {
        let x = origin + dir * (t0 + (s as f64 + 0.5) * h);
        let sigma = medium.sigma_t(&x);
        if sigma.iter().all(|&v| v == 0.0) {
            continue;
        }
        let f = field.eval(&x, dir);
        for c in 0..3 {
            let att = (-sigma[c] * h).exp();
            radiance[c] += tr[c] * albedo[c] * f[c] * (1.0 - att);
            tr[c] *= att;
        }
    }
    add(radiance, mul(tr, background))
}

/// Renders by marching every pixel through `field`.
pub fn render_with_field(
    medium: &Medium,
    camera: &Camera,
    step: f64,
    background: Rgb,
    field: &impl ScatterField,
) -> Result<Image, RteError> {
    check_step(step)?;
    check_frustum(medium, camera)?;
    let (w, h) = (camera.width(), camera.height());
    let o = camera.origin();
    let pixels = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            march_ray(
                medium,
                &o,
                &camera.pixel_ray(idx % w, idx / w),
                step,
                background,
                field,
            )
        })
        .collect();
    Ok(Image {
        width: w,
        height: h,
        pixels,
    })
}

/// Single-scattering baseline: the marcher with `F = F_0`.
pub fn render_single_scatter(
    medium: &Medium,
    light: &DistantLight,
    camera: &Camera,
    step: f64,
    background: Rgb,
) -> Result<Image, RteError> {
    let field = SingleScatterField {
        medium,
        light,
        step: medium.grid().default_step(),
    };
    render_with_field(medium, camera, step, background, &field)
}

/// Upper bound on any pixel: each scattering order contributes at most
/// `I·f_max` and `∫ T σ_s ≤ η`, so `L ≤ L_bg + I·f_max·η/(1−η)`.
pub fn radiance_bound(medium: &Medium, light: &DistantLight, background: Rgb) -> f64 {
    let eta = medium.max_albedo();
    let i = light.intensity().iter().cloned().fold(0.0, f64::max);
    let bg = background.iter().cloned().fold(0.0, f64::max);
    bg + i * medium.phase().max_value() * eta / (1.0 - eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraSpec;
    use crate::volume::DensityGrid;

    fn cube_medium(n: usize, rho: f32, sigma: f64, albedo: f64, phase: PhaseModel) -> Medium {
        let g = DensityGrid::constant([n; 3], 1.0 / n as f64, Vec3::zeros(), rho).unwrap();
        Medium::new(g, [sigma; 3], [albedo; 3], phase).unwrap()
    }

    fn light() -> DistantLight {
        DistantLight::new(Vec3::new(0.2, -1.0, 0.3), [1.0; 3]).unwrap()
    }

    fn close(a: f64, b: f64, sigma: f64) -> bool {
        (a - b).abs() <= 3.0 * sigma
    }

    #[test]
    fn transmittance_examples() {
        let vac = cube_medium(4, 0.0, 1.0, 0.5, PhaseModel::isotropic());
        let t = transmittance(
            &vac,
            &Vec3::new(0.1, 0.1, 0.1),
            &Vec3::new(0.9, 0.8, 0.7),
            0.01,
        )
        .unwrap();
        assert_eq!(t, [1.0; 3]);
        let m = cube_medium(4, 1.0, 1.0, 0.5, PhaseModel::isotropic());
        let t = transmittance(
            &m,
            &Vec3::new(0.0, 0.5, 0.5),
            &Vec3::new(1.0, 0.5, 0.5),
            0.01,
        )
        .unwrap();
        assert!((t[0] - (-1.0f64).exp()).abs() < 1e-3);
        let (p, q, r) = (
            Vec3::new(0.1, 0.2, 0.3),
            Vec3::new(0.4, 0.5, 0.5),
            Vec3::new(0.7, 0.8, 0.7),
        );
        let a = transmittance(&m, &p, &q, 0.01).unwrap()[0]
            * transmittance(&m, &q, &r, 0.01).unwrap()[0];
        assert!((a - transmittance(&m, &p, &r, 0.01).unwrap()[0]).abs() < 1e-5);
        assert!(matches!(
            transmittance(&m, &p, &q, 0.0),
            Err(RteError::Step(_))
        ));
    }

    #[test]
    fn single_scatter_examples() {
        let vac = cube_medium(4, 0.0, 1.0, 0.5, PhaseModel::isotropic());
        let f =
            single_scatter(&vac, &light(), &Vec3::new(0.5, 0.5, 0.5), &Vec3::x(), 0.01).unwrap();
        assert!((f[0] - INV_4PI).abs() < 1e-15);
        let opaque = cube_medium(4, 1.0, 1e4, 0.5, PhaseModel::isotropic());
        let f = single_scatter(
            &opaque,
            &light(),
            &Vec3::new(0.5, 0.5, 0.5),
            &Vec3::x(),
            0.01,
        )
        .unwrap();
        assert_eq!(f, [0.0; 3]);
    }

    #[test]
    fn path_tracer_in_vacuum_is_direct_light_only() {
        let vac = cube_medium(4, 0.0, 1.0, 0.9, PhaseModel::hg(0.5).unwrap());
        let l = light();
        let omega = Vec3::new(0.3, 0.4, -0.5).normalize();
        let label = path_trace_inscatter(
            &vac,
            &l,
            &Vec3::new(0.5, 0.5, 0.5),
            &omega,
            64,
            &TraceConfig::default(),
            1,
        )
        .unwrap();
        let want = vac.phase().eval(omega.dot(&l.to_light()));
        for c in 0..3 {
            assert!((label.f[c] - want).abs() < 1e-15);
            assert_eq!(label.stderr[c], 0.0);
        }
    }

    #[test]
    fn path_tracer_is_linear_in_intensity() {
        let m = cube_medium(8, 1.0, 2.0, 0.8, PhaseModel::hg(0.3).unwrap());
        let l = light();
        let p = Vec3::new(0.5, 0.4, 0.6);
        let a =
            path_trace_inscatter(&m, &l, &p, &Vec3::x(), 200, &TraceConfig::default(), 3).unwrap();
        let b = path_trace_inscatter(
            &m,
            &l.scaled(2.0),
            &p,
            &Vec3::x(),
            200,
            &TraceConfig::default(),
            3,
        )
        .unwrap();
        for c in 0..3 {
            assert!((b.f[c] - 2.0 * a.f[c]).abs() < 1e-12 * a.f[c].max(1.0));
        }
        assert!(
            path_trace_inscatter(&m, &l, &p, &Vec3::x(), 0, &TraceConfig::default(), 3).is_err()
        );
    }

    #[test]
    fn operator_of_zero_field_is_zero_and_linear() {
        let m = cube_medium(8, 1.0, 2.0, 0.8, PhaseModel::hg(0.6).unwrap());
        let p = Vec3::new(0.5, 0.5, 0.5);
        let zero =
            neumann_apply(&m, &|_: &Vec3, _: &Vec3| [0.0; 3], &p, &Vec3::z(), 500, 1).unwrap();
        assert_eq!(zero.mean, [0.0; 3]);
        let l = light();
        let f0 = SingleScatterField {
            medium: &m,
            light: &l,
            step: 0.01,
        };
        let a = neumann_apply(&m, &f0, &p, &Vec3::z(), 4000, 2).unwrap();
        let tripled = |x: &Vec3, d: &Vec3| scale(f0.eval(x, d), 3.0);
        let b = neumann_apply(&m, &tripled, &p, &Vec3::z(), 4000, 9).unwrap();
        let sigma = (9.0 * a.stderr[0].powi(2) + b.stderr[0].powi(2)).sqrt();
        assert!(
            close(3.0 * a.mean[0], b.mean[0], sigma),
            "{} vs {}",
            3.0 * a.mean[0],
            b.mean[0]
        );
    }

    #[test]
    fn series_at_zero_albedo_is_single_scatter() {
        let m = cube_medium(8, 1.0, 2.0, 0.0, PhaseModel::hg(0.857).unwrap());
        let l = light();
        let p = Vec3::new(0.5, 0.5, 0.5);
        let s = neumann_series(&m, &l, &p, &Vec3::y(), 6, 200, SeriesMode::Regular, 1).unwrap();
        let f0 = single_scatter(&m, &l, &p, &Vec3::y(), m.grid().default_step()).unwrap();
        assert_eq!(s.sum(), f0);
        let sums = neumann_series(
            &cube_medium(8, 1.0, 2.0, 0.9, PhaseModel::hg(0.857).unwrap()),
            &l,
            &p,
            &Vec3::y(),
            6,
            200,
            SeriesMode::Regular,
            1,
        )
        .unwrap()
        .partial_sums();
        assert!(sums.windows(2).all(|w| w[1][0] >= w[0][0]));
    }

    #[test]
    fn co_directional_series_matches_regular_for_isotropic_media() {
        let m = cube_medium(8, 1.0, 2.0, 0.8, PhaseModel::isotropic());
        let l = light();
        let p = Vec3::new(0.4, 0.5, 0.6);
        let a = neumann_series(&m, &l, &p, &Vec3::x(), 5, 4000, SeriesMode::Regular, 4).unwrap();
        let b = neumann_series(
            &m,
            &l,
            &p,
            &Vec3::x(),
            5,
            4000,
            SeriesMode::CoDirectional,
            5,
        )
        .unwrap();
        assert!((a.terms[0][0] - b.terms[0][0]).abs() < 1e-15);
        for k in 1..=5 {
            let sigma = (a.stderr[k][0].powi(2) + b.stderr[k][0].powi(2)).sqrt();
            assert!(
                close(a.terms[k][0], b.terms[k][0], sigma),
                "order {k}: {} vs {}",
                a.terms[k][0],
                b.terms[k][0]
            );
        }
    }

    #[test]
    fn one_operator_application_matches_depth_two_paths() {
        let m = cube_medium(8, 1.0, 2.0, 0.9, PhaseModel::hg(0.857).unwrap());
        let l = light();
        let p = Vec3::new(0.5, 0.5, 0.5);
        let omega = Vec3::new(0.1, 0.9, -0.2).normalize();
        let f0 = SingleScatterField {
            medium: &m,
            light: &l,
            step: m.grid().default_step(),
        };
        let pi_f0 = neumann_apply(&m, &f0, &p, &omega, 20000, 11).unwrap();
        let one = path_trace_inscatter(
            &m,
            &l,
            &p,
            &omega,
            20000,
            &TraceConfig {
                max_depth: 1,
                rr_depth: 16,
            },
            12,
        )
        .unwrap();
        let zero = single_scatter(&m, &l, &p, &omega, m.grid().default_step()).unwrap();
        // Depth-1 paths estimate F_0 + η·F_1.
        let via_series = zero[0] + 0.9 * pi_f0.mean[0];
        let sigma = (one.stderr[0].powi(2) + (0.9 * pi_f0.stderr[0]).powi(2)).sqrt();
        assert!(
            close(one.f[0], via_series, sigma),
            "{} vs {} (σ {sigma})",
            one.f[0],
            via_series
        );
    }

    #[test]
    fn series_increments_shrink_geometrically() {
        let m = cube_medium(8, 1.0, 2.0, 0.9, PhaseModel::hg(0.857).unwrap());
        let s = neumann_series(
            &m,
            &light(),
            &Vec3::new(0.5, 0.5, 0.5),
            &Vec3::z(),
            10,
            20000,
            SeriesMode::Regular,
            8,
        )
        .unwrap();
        for k in 3..10 {
            let inc = |i: usize| 0.9f64.powi(i as i32) * s.terms[i][0];
            let err = |i: usize| 0.9f64.powi(i as i32) * s.stderr[i][0];
            let slack = 3.0 * (err(k + 1).powi(2) + (err(k) * 1.0).powi(2)).sqrt();
            assert!(inc(k + 1) <= inc(k) * 1.0 + slack, "order {k}");
        }
    }

    fn camera(n: usize) -> Camera {
        Camera::new(CameraSpec {
            position: [0.5, 0.5, -2.0],
            look_at: [0.5, 0.5, 0.5],
            up: [0.0, 1.0, 0.0],
            vfov_deg: 35.0,
            width: n,
            height: n,
        })
        .unwrap()
    }

    #[test]
    fn zero_density_renders_background() {
        let vac = cube_medium(4, 0.0, 1.0, 0.5, PhaseModel::isotropic());
        let bg = [0.1, 0.2, 0.3];
        let r = render_reference(
            &vac,
            &light(),
            &camera(6),
            4,
            &TraceConfig::default(),
            bg,
            1,
        )
        .unwrap();
        assert!(r.pixels.iter().all(|p| *p == bg));
        let s = render_single_scatter(&vac, &light(), &camera(6), 0.01, bg).unwrap();
        assert!(s.pixels.iter().all(|p| *p == bg));
    }

    #[test]
    fn reference_respects_energy_bound() {
        let m = cube_medium(8, 1.0, 6.0, 0.9, PhaseModel::hg(0.7).unwrap());
        let l = DistantLight::new(Vec3::new(0.0, 0.0, 1.0), [1.0; 3]).unwrap();
        let img = render_reference(
            &m,
            &l,
            &camera(8),
            16,
            &TraceConfig::default(),
            [0.05; 3],
            2,
        )
        .unwrap();
        let bound = radiance_bound(&m, &l, [0.05; 3]);
        assert!(img.pixels.iter().flatten().all(|&v| v >= 0.0 && v <= bound));
    }

    #[test]
    fn reference_agrees_with_single_scatter_when_albedo_is_tiny() {
        // With no multiple scattering the two renderers estimate the same integral.
        let m = cube_medium(8, 1.0, 1.5, 0.05, PhaseModel::isotropic());
        let l = light();
        let cam = camera(4);
        let a = render_reference(
            &m,
            &l,
            &cam,
            4000,
            &TraceConfig {
                max_depth: 0,
                rr_depth: 16,
            },
            [0.0; 3],
            3,
        )
        .unwrap();
        let b = render_single_scatter(&m, &l, &cam, 0.005, [0.0; 3]).unwrap();
        let m = crate::image::compare_images(&a, &b).unwrap();
        assert!(m.relative_rmse < 0.05, "{}", m.relative_rmse);
    }

    #[test]
    fn rejects_cameras_that_miss() {
        let m = cube_medium(4, 1.0, 1.0, 0.5, PhaseModel::isotropic());
        let away = Camera::new(CameraSpec {
            position: [0.5, 0.5, -2.0],
            look_at: [0.5, 0.5, -5.0],
            up: [0.0, 1.0, 0.0],
            vfov_deg: 30.0,
            width: 4,
            height: 4,
        })
        .unwrap();
        assert!(matches!(
            render_single_scatter(&m, &light(), &away, 0.01, [0.0; 3]),
            Err(RteError::MissesMedium)
        ));
    }
}
