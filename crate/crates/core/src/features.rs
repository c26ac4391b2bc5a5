//! Graded transmittance fields, the convolutional level combiner, and the
//! per-centre feature blocks (density, transmittance, phase) sampled through
//! the templates.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::nn::{
    conv3d_backward, conv3d_forward, AdamConfig, Conv3dShape, NnError, ParamSet, Tensor, TrainState,
};
use crate::phase::{cap_pair_product, PhaseModel, VolumePhaseEval, VolumePhaseTable};
use crate::rng::{stream_rng, uniform, uniform_sphere};
use crate::template::{light_entry_point, place_template, SamplingTemplate, TemplateKind};
use crate::volume::{DensityGrid, DensityPyramid, VoxelLayout};
use crate::Vec3;

pub const DEFAULT_LAMBDA: f64 = 0.6;
pub const MAX_LEVELS: usize = 11;
pub const VFEAT_MAGIC: &[u8; 4] = b"VFEA";
pub const VFEAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("level {level} outside a pyramid of {levels} levels")]
    Level { level: usize, levels: usize },
    #[error("lambda {0} outside (0, 1)")]
    Lambda(f64),
    #[error("step {0} must be positive")]
    Step(f64),
    #[error("light direction must be non-zero")]
    LightDirection,
    #[error("fields were computed for different light directions")]
    LightMismatch,
    #[error("no fields to combine")]
    NoFields,
    #[error("combiner has {kernels} kernels and {scalars} scalars for {levels} levels")]
    CombinerShape {
        kernels: usize,
        scalars: usize,
        levels: usize,
    },
    #[error("medium has no voxel with positive density")]
    EmptyMedium,
    #[error("no centres requested")]
    NoCenters,
    #[error("target volume has {got} values, expected {expected}")]
    TargetShape { expected: usize, got: usize },
    #[error("malformed feature table: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// T̄_i at every voxel centre of pyramid level `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedTransmittanceField {
    pub level: usize,
    pub layout: VoxelLayout,
    pub values: Vec<f32>,
    /// Unit travel direction of the light.
    pub light_dir: Vec3,
    pub lambda: f64,
}

/// `exp(−λ^(i+1) · ∫ρ_i ds)` from each voxel centre to where the ray towards
/// the light leaves the grid.
pub fn graded_transmittance(
    pyramid: &DensityPyramid,
    level: usize,
    light: &Vec3,
    lambda: f64,
    step: f64,
) -> Result<GradedTransmittanceField, FeatureError> {
    graded_transmittance_scaled(pyramid, level, light, lambda, step, 1.0)
}

/// As [`graded_transmittance`] with the density multiplied by `density_scale`
/// (the medium's extinction per unit density).
pub fn graded_transmittance_scaled(
    pyramid: &DensityPyramid,
    level: usize,
    light: &Vec3,
    lambda: f64,
    step: f64,
    density_scale: f64,
) -> Result<GradedTransmittanceField, FeatureError> {
    let grid = pyramid.level(level).ok_or(FeatureError::Level {
        level,
        levels: pyramid.len(),
    })?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(FeatureError::Lambda(lambda));
    }
    if !(step > 0.0) {
        return Err(FeatureError::Step(step));
    }
    let light_dir = unit(light).ok_or(FeatureError::LightDirection)?;
    let back = -light_dir;
    let layout = *grid.layout();
    let coeff = lambda.powi(level as i32 + 1) * density_scale;
    let values = (0..layout.voxel_count())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = layout.coords(idx);
            let p = layout.voxel_center(i, j, k);
            let exit = layout
                .ray_interval(&p, &back)
                .map(|(_, t1)| t1)
                .unwrap_or(0.0);
            let tau = grid.march(&p, &(p + back * exit), step);
            ((-coeff * tau).exp() as f32).clamp(f32::MIN_POSITIVE, 1.0)
        })
        .collect();
    Ok(GradedTransmittanceField {
        level,
        layout,
        values,
        light_dir,
        lambda,
    })
}

fn unit(v: &Vec3) -> Option<Vec3> {
    let n = v.norm();
    (n > 0.0 && n.is_finite()).then(|| v / n)
}

/// One 3×3×3 kernel and one scalar per level; no bias, so the combiner is
/// linear in its input fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combiner {
    pub kernel_size: usize,
    pub kernels: Vec<Vec<f64>>,
    pub scalars: Vec<f64>,
}

impl Combiner {
    /// Identity kernels and uniform scalars 1/L: the plain mean of levels.
    pub fn identity(levels: usize) -> Self {
        let k = 3;
        let mut kernel = vec![0.0; k * k * k];
        kernel[k * k * k / 2] = 1.0;
        Self {
            kernel_size: k,
            kernels: vec![kernel; levels],
            scalars: vec![1.0 / levels as f64; levels],
        }
    }

    pub fn levels(&self) -> usize {
        self.scalars.len()
    }

    fn check(&self, levels: usize) -> Result<(), FeatureError> {
        let k3 = self.kernel_size.pow(3);
        if self.kernels.len() != levels
            || self.scalars.len() != levels
            || self.kernels.iter().any(|k| k.len() != k3)
        {
            return Err(FeatureError::CombinerShape {
                kernels: self.kernels.len(),
                scalars: self.scalars.len(),
                levels,
            });
        }
        Ok(())
    }

    fn conv_shape(&self, dims: [usize; 3]) -> Conv3dShape {
        Conv3dShape {
            in_channels: 1,
            out_channels: 1,
            dims,
            kernel: self.kernel_size,
        }
    }
}

/// Per-voxel transmittance feature at the finest level's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmittanceFeatureVolume {
    pub layout: VoxelLayout,
    pub values: Vec<f32>,
    pub light_dir: Vec3,
    pub combiner: Combiner,
}

impl TransmittanceFeatureVolume {
    /// Trilinear sample; 1 outside the grid.
    pub fn sample(&self, p: &Vec3) -> f64 {
        self.layout.trilinear(&self.values, p, 1.0)
    }
}

type Taps = Vec<[(usize, f64); 8]>;

/// Trilinear taps of `src` at every voxel centre of `dst`.
fn upsample_taps(src: &VoxelLayout, dst: &VoxelLayout) -> Taps {
    (0..dst.voxel_count())
        .map(|idx| {
            let [i, j, k] = dst.coords(idx);
            src.trilinear_taps(&dst.voxel_center(i, j, k))
                .expect("voxel centres lie inside the shared box")
        })
        .collect()
}

fn finest(fields: &[GradedTransmittanceField]) -> Result<&GradedTransmittanceField, FeatureError> {
    let first = fields.first().ok_or(FeatureError::NoFields)?;
    for f in fields {
        if (f.light_dir - first.light_dir).norm() > 1e-12 {
            return Err(FeatureError::LightMismatch);
        }
    }
    Ok(fields
        .iter()
        .max_by_key(|f| f.layout.voxel_count())
        .unwrap())
}

struct CombinePass {
    /// Convolved level values.
    conv: Vec<Vec<f64>>,
    /// Convolved levels upsampled to the output grid.
    up: Vec<Vec<f64>>,
    taps: Vec<Taps>,
    out: Vec<f64>,
}

fn combine_pass(
    fields: &[GradedTransmittanceField],
    combiner: &Combiner,
    target: &VoxelLayout,
) -> Result<CombinePass, FeatureError> {
    combiner.check(fields.len())?;
    let mut pass = CombinePass {
        conv: Vec::new(),
        up: Vec::new(),
        taps: Vec::new(),
        out: vec![0.0; target.voxel_count()],
    };
    for (f, (kernel, &s)) in fields
        .iter()
        .zip(combiner.kernels.iter().zip(&combiner.scalars))
    {
        let x: Vec<f64> = f.values.iter().map(|&v| v as f64).collect();
        let c = conv3d_forward(&x, kernel, None, &combiner.conv_shape(f.layout.dims))?;
        let taps = upsample_taps(&f.layout, target);
        let up: Vec<f64> = taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| c[i] * w).sum())
            .collect();
        for (o, u) in pass.out.iter_mut().zip(&up) {
            *o += s * u;
        }
        pass.conv.push(c);
        pass.up.push(up);
        pass.taps.push(taps);
    }
    Ok(pass)
}

/// Convolve each level, upsample it trilinearly to the finest resolution and
/// sum with the per-level scalars.
pub fn combine_transmittance(
    fields: &[GradedTransmittanceField],
    combiner: &Combiner,
) -> Result<TransmittanceFeatureVolume, FeatureError> {
    let target = finest(fields)?;
    let pass = combine_pass(fields, combiner, &target.layout)?;
    Ok(TransmittanceFeatureVolume {
        layout: target.layout,
        values: pass.out.iter().map(|&v| v as f32).collect(),
        light_dir: target.light_dir,
        combiner: combiner.clone(),
    })
}

/// Fits combiner weights to a target volume (mean squared error, Adam).
/// Returns the fitted combiner and the loss before each step.
pub fn fit_combiner(
    fields: &[GradedTransmittanceField],
    initial: &Combiner,
    target: &[f64],
    steps: usize,
    lr: f64,
) -> Result<(Combiner, Vec<f64>), FeatureError> {
    let layout = finest(fields)?.layout;
    if target.len() != layout.voxel_count() {
        return Err(FeatureError::TargetShape {
            expected: layout.voxel_count(),
            got: target.len(),
        });
    }
    let levels = fields.len();
    let mut params = ParamSet::<f64>::new();
    for (i, k) in initial.kernels.iter().enumerate() {
        params.add(
            &format!("kernel{i}"),
            Tensor::new(vec![k.len()], k.clone())?,
        )?;
    }
    params.add(
        "scalars",
        Tensor::new(vec![levels], initial.scalars.clone())?,
    )?;
    let mut state = TrainState::new(
        &params,
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
    );
    let mut current = initial.clone();
    let mut losses = Vec::with_capacity(steps);
    let n = target.len() as f64;
    for _ in 0..steps {
        let pass = combine_pass(fields, &current, &layout)?;
        let dv: Vec<f64> = pass
            .out
            .iter()
            .zip(target)
            .map(|(o, t)| 2.0 * (o - t) / n)
            .collect();
        losses.push(
            pass.out
                .iter()
                .zip(target)
                .map(|(o, t)| (o - t) * (o - t))
                .sum::<f64>()
                / n,
        );
        let mut grads = params.zero_grads();
        for (i, f) in fields.iter().enumerate() {
            grads[levels][i] = pass.up[i].iter().zip(&dv).map(|(u, d)| u * d).sum();
            let s = current.scalars[i];
            let mut dc = vec![0.0; pass.conv[i].len()];
            for (taps, d) in pass.taps[i].iter().zip(&dv) {
                for &(j, w) in taps {
                    dc[j] += s * w * d;
                }
            }
            let x: Vec<f64> = f.values.iter().map(|&v| v as f64).collect();
            let (_, dk, _) = conv3d_backward(
                &x,
                &current.kernels[i],
                &dc,
                &current.conv_shape(f.layout.dims),
            )?;
            grads[i] = dk;
        }
        state.adam_step(&mut params, &grads, lr)?;
        for (i, (_, t)) in params.iter().enumerate() {
            if i < levels {
                current.kernels[i] = t.data().to_vec();
            } else {
                current.scalars = t.data().to_vec();
            }
        }
    }
    Ok((current, losses))
}

/// Knobs of the feature pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub lambda: f64,
    /// World units per diffuse-template unit.
    pub template_scale: f64,
    /// Extinction per unit density used inside the graded fields.
    pub extinction_scale: f64,
    pub max_levels: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            template_scale: 1.0,
            extinction_scale: 1.0,
            max_levels: MAX_LEVELS,
        }
    }
}

/// Shading point and view direction of one template sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Center {
    pub p: [f64; 3],
    pub omega: [f64; 3],
}

/// Uniform over voxels with positive density, jittered inside the voxel,
/// with a uniformly distributed view direction.
pub fn sample_centers(
    grid: &DensityGrid,
    count: usize,
    seed: u64,
) -> Result<Vec<Center>, FeatureError> {
    if count == 0 {
        return Err(FeatureError::NoCenters);
    }
    let occupied = grid.nonzero_voxels();
    if occupied.is_empty() {
        return Err(FeatureError::EmptyMedium);
    }
    let layout = grid.layout();
    Ok((0..count)
        .map(|n| {
            let mut rng = stream_rng(seed, n as u64);
            let v = occupied
                [((uniform(&mut rng) * occupied.len() as f64) as usize).min(occupied.len() - 1)];
            let [i, j, k] = layout.coords(v);
            let jitter =
                Vec3::new(uniform(&mut rng), uniform(&mut rng), uniform(&mut rng)).add_scalar(-0.5);
            let p = layout.voxel_center(i, j, k) + jitter * layout.voxel_size;
            Center {
                p: p.into(),
                omega: uniform_sphere(&mut rng).into(),
            }
        })
        .collect())
}

/// Features of every template point for one centre.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatureBlock {
    pub kind: TemplateKind,
    pub center: [f64; 3],
    pub omega: [f64; 3],
    pub light: [f64; 3],
    pub layer_sizes: Vec<usize>,
    pub density: Vec<f32>,
    pub transmittance: Vec<f32>,
    pub phase: Vec<f32>,
}

impl SampleFeatureBlock {
    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    /// Feature vector of one type (0 density, 1 phase, 2 transmittance).
    pub fn feature(&self, tau: usize) -> &[f32] {
        match tau {
            0 => &self.density,
            1 => &self.phase,
            _ => &self.transmittance,
        }
    }
}

/// Cap half-angle subtended by a sphere of radius `r` at distance `d`; the
/// whole sphere of directions when the point lies inside it.
pub fn cap_half_angle(r: f64, d: f64) -> f64 {
    if d <= r {
        std::f64::consts::PI
    } else {
        (r / d).asin()
    }
}

/// Everything needed to sample feature blocks for arbitrary centres under one
/// light direction.
#[derive(Debug, Clone)]
pub struct FeaturePipeline {
    pub grid: DensityGrid,
    pub volume: TransmittanceFeatureVolume,
    pub phase: PhaseModel,
    pub table: VolumePhaseTable,
    pub diffuse: SamplingTemplate,
    pub highlight: SamplingTemplate,
    pub light: Vec3,
    pub config: FeatureConfig,
}

impl FeaturePipeline {
    /// Builds the graded fields (step = half a voxel per level) and combines them.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        pyramid: &DensityPyramid,
        phase: PhaseModel,
        table: VolumePhaseTable,
        diffuse: SamplingTemplate,
        highlight: SamplingTemplate,
        light: &Vec3,
        config: FeatureConfig,
        combiner: Option<Combiner>,
    ) -> Result<Self, FeatureError> {
        let light = unit(light).ok_or(FeatureError::LightDirection)?;
        let levels = pyramid.len().min(config.max_levels.max(1));
        let fields = (0..levels)
            .map(|i| {
                let step = pyramid.levels()[i].default_step();
                graded_transmittance_scaled(
                    pyramid,
                    i,
                    &light,
                    config.lambda,
                    step,
                    config.extinction_scale,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let combiner = combiner.unwrap_or_else(|| Combiner::identity(levels));
        let volume = combine_transmittance(&fields, &combiner)?;
        Ok(Self {
            grid: pyramid.levels()[0].clone(),
            volume,
            phase,
            table,
            diffuse,
            highlight,
            light,
            config,
        })
    }

    pub fn template(&self, kind: TemplateKind) -> &SamplingTemplate {
        match kind {
            TemplateKind::Diffuse => &self.diffuse,
            TemplateKind::Highlight => &self.highlight,
        }
    }

    pub fn sample(&self, kind: TemplateKind, p: &Vec3, omega: &Vec3) -> SampleFeatureBlock {
        sample_features(
            &FeatureSources {
                grid: &self.grid,
                volume: &self.volume,
                phase: &self.phase,
                eval: &self.table,
                template_scale: self.config.template_scale,
            },
            self.template(kind),
            p,
            omega,
            &self.light,
        )
    }

    /// Diffuse and highlight blocks of one centre.
    pub fn blocks(&self, c: &Center) -> [SampleFeatureBlock; 2] {
        let (p, w) = (Vec3::from(c.p), Vec3::from(c.omega));
        [
            self.sample(TemplateKind::Diffuse, &p, &w),
            self.sample(TemplateKind::Highlight, &p, &w),
        ]
    }

    pub fn precompute(&self, centers: &[Center]) -> Result<FeatureTable, FeatureError> {
        if centers.is_empty() {
            return Err(FeatureError::NoCenters);
        }
        let blocks: Vec<[SampleFeatureBlock; 2]> =
            centers.par_iter().map(|c| self.blocks(c)).collect();
        let (diffuse, highlight) = blocks.into_iter().map(|[d, h]| (d, h)).unzip();
        Ok(FeatureTable {
            light: self.light.into(),
            config: self.config,
            diffuse_counts: self.diffuse.layer_sizes(),
            highlight_counts: self.highlight.layer_sizes(),
            centers: centers.to_vec(),
            diffuse,
            highlight,
            phase_table: self.table.clone(),
            combiner: self.volume.combiner.clone(),
        })
    }
}

/// Read-only inputs of [`sample_features`].
pub struct FeatureSources<'a, E: VolumePhaseEval> {
    pub grid: &'a DensityGrid,
    pub volume: &'a TransmittanceFeatureVolume,
    pub phase: &'a PhaseModel,
    pub eval: &'a E,
    pub template_scale: f64,
}

/// Places the template at `p` and samples density, transmittance and the
/// phase feature at each point.
pub fn sample_features<E: VolumePhaseEval>(
    src: &FeatureSources<'_, E>,
    template: &SamplingTemplate,
    p: &Vec3,
    omega: &Vec3,
    light: &Vec3,
) -> SampleFeatureBlock {
    let entry = light_entry_point(src.grid.layout(), p, light);
    let points = place_template(template, p, omega, light, &entry, src.template_scale);
    let scale = template.placement_scale(p, &entry, src.template_scale);
    let n = points.len();
    let mut block = SampleFeatureBlock {
        kind: template.kind,
        center: (*p).into(),
        omega: (*omega).into(),
        light: (*light).into(),
        layer_sizes: template.layer_sizes(),
        density: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        phase: Vec::with_capacity(n),
    };
    let cap_radii = template
        .layers
        .iter()
        .flat_map(|l| std::iter::repeat_n(l.cap_radius * scale, l.points.len()));
    for (s, r) in points.iter().zip(cap_radii) {
        block.density.push(src.grid.sample_trilinear(s) as f32);
        block.transmittance.push(src.volume.sample(s) as f32);
        let offset = s - p;
        let d = offset.norm();
        let half = cap_half_angle(r, d);
        let axis = if d > 0.0 { offset / d } else { Vec3::z() };
        block
            .phase
            .push(cap_pair_product(src.phase, src.eval, omega, light, &axis, half) as f32);
    }
    block
}

/// Feature blocks of every centre for both template kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub light: [f64; 3],
    pub config: FeatureConfig,
    pub diffuse_counts: Vec<usize>,
    pub highlight_counts: Vec<usize>,
    pub centers: Vec<Center>,
    pub diffuse: Vec<SampleFeatureBlock>,
    pub highlight: Vec<SampleFeatureBlock>,
    pub phase_table: VolumePhaseTable,
    pub combiner: Combiner,
}

/// One block per centre per template kind.
pub fn precompute_tables(
    pipeline: &FeaturePipeline,
    centers: &[Center],
) -> Result<FeatureTable, FeatureError> {
    pipeline.precompute(centers)
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(VFEAT_MAGIC)?;
        w.write_u32::<LittleEndian>(VFEAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.centers.len() as u32)?;
        for counts in [&self.diffuse_counts, &self.highlight_counts] {
            w.write_u32::<LittleEndian>(counts.len() as u32)?;
            for &c in counts {
                w.write_u32::<LittleEndian>(c as u32)?;
            }
        }
        let t = &self.phase_table;
        for d in t.dims() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        w.write_f64::<LittleEndian>(t.g_range().0)?;
        w.write_f64::<LittleEndian>(t.g_range().1)?;
        let c = &self.config;
        for v in [c.lambda, c.template_scale, c.extinction_scale] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u32::<LittleEndian>(c.max_levels as u32)?;
        for v in self.light {
            w.write_f64::<LittleEndian>(v)?;
        }
        for ctr in &self.centers {
            for v in ctr.p.iter().chain(&ctr.omega) {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        for (d, h) in self.diffuse.iter().zip(&self.highlight) {
            for b in [d, h] {
                for v in b.density.iter().chain(&b.transmittance).chain(&b.phase) {
                    w.write_f32::<LittleEndian>(*v)?;
                }
            }
        }
        for v in t.values() {
            w.write_f32::<LittleEndian>(*v)?;
        }
        let cb = &self.combiner;
        w.write_u32::<LittleEndian>(cb.levels() as u32)?;
        w.write_u32::<LittleEndian>(cb.kernel_size as u32)?;
        for v in cb.kernels.iter().flatten().chain(&cb.scalars) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        let mut r = bytes;
        read_table(&mut r)
            .map_err(|e| match e {
                FeatureError::Io(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                    FeatureError::Format("truncated".into())
                }
                e => e,
            })
            .and_then(|t| {
                if r.is_empty() {
                    Ok(t)
                } else {
                    Err(FeatureError::Format(format!("{} trailing bytes", r.len())))
                }
            })
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_counts(r: &mut &[u8]) -> Result<Vec<usize>, FeatureError> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > 64 {
        return Err(FeatureError::Format(format!("{n} template layers")));
    }
    (0..n)
        .map(|_| Ok(r.read_u32::<LittleEndian>()? as usize))
        .collect()
}

fn read_f32s(r: &mut &[u8], n: usize) -> Result<Vec<f32>, FeatureError> {
    if r.len() < n * 4 {
        return Err(FeatureError::Format("truncated".into()));
    }
    (0..n).map(|_| Ok(r.read_f32::<LittleEndian>()?)).collect()
}

fn read_table(r: &mut &[u8]) -> Result<FeatureTable, FeatureError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VFEAT_MAGIC {
        return Err(FeatureError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VFEAT_VERSION {
        return Err(FeatureError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let diffuse_counts = read_counts(r)?;
    let highlight_counts = read_counts(r)?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let g_range = (r.read_f64::<LittleEndian>()?, r.read_f64::<LittleEndian>()?);
    let config = FeatureConfig {
        lambda: r.read_f64::<LittleEndian>()?,
        template_scale: r.read_f64::<LittleEndian>()?,
        extinction_scale: r.read_f64::<LittleEndian>()?,
        max_levels: r.read_u32::<LittleEndian>()? as usize,
    };
    let light = [
        r.read_f64::<LittleEndian>()?,
        r.read_f64::<LittleEndian>()?,
        r.read_f64::<LittleEndian>()?,
    ];
    if r.len() < count * 48 {
        return Err(FeatureError::Format("truncated".into()));
    }
    let mut centers = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = [0.0; 6];
        for x in &mut v {
            *x = r.read_f64::<LittleEndian>()?;
        }
        centers.push(Center {
            p: [v[0], v[1], v[2]],
            omega: [v[3], v[4], v[5]],
        });
    }
    let mut diffuse = Vec::with_capacity(count);
    let mut highlight = Vec::with_capacity(count);
    for ctr in &centers {
        for (kind, counts) in [
            (TemplateKind::Diffuse, &diffuse_counts),
            (TemplateKind::Highlight, &highlight_counts),
        ] {
            let n: usize = counts.iter().sum();
            let block = SampleFeatureBlock {
                kind,
                center: ctr.p,
                omega: ctr.omega,
                light,
                layer_sizes: counts.clone(),
                density: read_f32s(r, n)?,
                transmittance: read_f32s(r, n)?,
                phase: read_f32s(r, n)?,
            };
            match kind {
                TemplateKind::Diffuse => diffuse.push(block),
                TemplateKind::Highlight => highlight.push(block),
            }
        }
    }
    let values = read_f32s(r, dims.iter().product())?;
    let phase_table = VolumePhaseTable::from_parts(dims, g_range, values)
        .ok_or_else(|| FeatureError::Format("phase table".into()))?;
    let levels = r.read_u32::<LittleEndian>()? as usize;
    let kernel_size = r.read_u32::<LittleEndian>()? as usize;
    if levels > MAX_LEVELS
        || kernel_size > 7
        || r.len() != (levels * kernel_size.pow(3) + levels) * 8
    {
        return Err(FeatureError::Format("combiner block".into()));
    }
    let mut read_n = |n: usize| -> Result<Vec<f64>, FeatureError> {
        (0..n).map(|_| Ok(r.read_f64::<LittleEndian>()?)).collect()
    };
    let kernels = (0..levels)
        .map(|_| read_n(kernel_size.pow(3)))
        .collect::<Result<Vec<_>, _>>()?;
    let scalars = read_n(levels)?;
    Ok(FeatureTable {
        light,
        config,
        diffuse_counts,
        highlight_counts,
        centers,
        diffuse,
        highlight,
        phase_table,
        combiner: Combiner {
            kernel_size,
            kernels,
            scalars,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{phase_feature, Quadrature};
    use crate::template::{
        generate_diffuse_template, generate_highlight_template, DEFAULT_DIFFUSE_COUNTS,
        DEFAULT_HIGHLIGHT_COUNTS,
    };
    use crate::volume::build_pyramid;
    use proptest::prelude::*;

    fn cube(n: usize, value: f32) -> DensityGrid {
        DensityGrid::constant([n; 3], 1.0 / n as f64, Vec3::zeros(), value).unwrap()
    }

    fn blob(n: usize) -> DensityGrid {
        DensityGrid::from_fn([n; 3], 1.0 / n as f64, Vec3::zeros(), |c| {
            let r = (c - Vec3::repeat(0.5)).norm();
            (1.0 - 2.5 * r).max(0.0) as f32
        })
        .unwrap()
    }

    fn small_table() -> VolumePhaseTable {
        VolumePhaseTable::build_with([16, 32, 8], crate::phase::TABLE_G_RANGE, 8)
    }

    #[test]
    fn zero_density_level_is_fully_transmissive() {
        let pyr = build_pyramid(&cube(8, 0.0)).unwrap();
        for lvl in 0..pyr.len() {
            let f = graded_transmittance(&pyr, lvl, &Vec3::new(0.3, -1.0, 0.2), 0.6, 0.01).unwrap();
            assert!(f.values.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn homogeneous_matches_closed_form() {
        let rho = 3.0;
        let pyr = build_pyramid(&cube(16, rho as f32)).unwrap();
        let light = Vec3::new(0.2, -1.0, 0.35).normalize();
        for lvl in 0..pyr.len() {
            let f =
                graded_transmittance(&pyr, lvl, &light, 0.6, pyr.levels()[lvl].voxel_size() / 4.0)
                    .unwrap();
            let l = f.layout;
            for idx in (0..l.voxel_count()).step_by(7) {
                let [i, j, k] = l.coords(idx);
                let p = l.voxel_center(i, j, k);
                let d = l.ray_interval(&p, &-light).unwrap().1;
                let want = (-0.6f64.powi(lvl as i32 + 1) * rho * d).exp();
                assert!(
                    (f.values[idx] as f64 - want).abs() < 1e-3,
                    "level {lvl} voxel {idx}"
                );
            }
        }
    }

    #[test]
    fn coarser_levels_transmit_more() {
        let pyr = build_pyramid(&cube(16, 2.0)).unwrap();
        let light = -Vec3::z();
        let p = Vec3::new(0.5, 0.5, 0.25);
        let mut prev = 0.0;
        for lvl in 0..pyr.len() {
            let f = graded_transmittance(&pyr, lvl, &light, 0.6, 0.01).unwrap();
            let v = f.layout.trilinear(&f.values, &p, 1.0);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn graded_errors() {
        let pyr = build_pyramid(&cube(4, 1.0)).unwrap();
        assert!(matches!(
            graded_transmittance(&pyr, 3, &Vec3::z(), 0.6, 0.1),
            Err(FeatureError::Level { .. })
        ));
        assert!(matches!(
            graded_transmittance(&pyr, 0, &Vec3::z(), 1.0, 0.1),
            Err(FeatureError::Lambda(_))
        ));
        assert!(matches!(
            graded_transmittance(&pyr, 0, &Vec3::z(), 0.0, 0.1),
            Err(FeatureError::Lambda(_))
        ));
        assert!(matches!(
            graded_transmittance(&pyr, 0, &Vec3::z(), 0.6, 0.0),
            Err(FeatureError::Step(_))
        ));
    }

    fn random_fields(seed: u64) -> Vec<GradedTransmittanceField> {
        let pyr = build_pyramid(&cube(8, 1.0)).unwrap();
        let mut rng = stream_rng(seed, 0);
        pyr.levels()
            .iter()
            .enumerate()
            .map(|(i, g)| GradedTransmittanceField {
                level: i,
                layout: *g.layout(),
                values: (0..g.values().len())
                    .map(|_| uniform(&mut rng) as f32)
                    .collect(),
                light_dir: Vec3::z(),
                lambda: 0.6,
            })
            .collect()
    }

    #[test]
    fn identity_combiner_is_the_mean_of_upsampled_levels() {
        let fields = random_fields(4);
        let c = Combiner::identity(fields.len());
        let v = combine_transmittance(&fields, &c).unwrap();
        let l = fields[0].layout;
        for idx in 0..l.voxel_count() {
            let [i, j, k] = l.coords(idx);
            let p = l.voxel_center(i, j, k);
            let mean: f64 = fields
                .iter()
                .map(|f| f.layout.trilinear(&f.values, &p, 0.0))
                .sum::<f64>()
                / fields.len() as f64;
            assert!((v.values[idx] as f64 - mean).abs() < 1e-6);
        }
        let mut ones = fields.clone();
        ones.iter_mut().for_each(|f| f.values.fill(1.0));
        let v = combine_transmittance(&ones, &c).unwrap();
        assert!(v.values.iter().all(|&x| (x - 1.0).abs() < 1e-6));
        let mut zeroed = c.clone();
        zeroed.scalars.fill(0.0);
        assert!(combine_transmittance(&fields, &zeroed)
            .unwrap()
            .values
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn combiner_errors() {
        let fields = random_fields(1);
        assert!(matches!(
            combine_transmittance(&fields, &Combiner::identity(2)),
            Err(FeatureError::CombinerShape { .. })
        ));
        assert!(matches!(
            combine_transmittance(&[], &Combiner::identity(0)),
            Err(FeatureError::NoFields)
        ));
        let mut mixed = fields.clone();
        mixed[1].light_dir = Vec3::x();
        assert!(matches!(
            combine_transmittance(&mixed, &Combiner::identity(fields.len())),
            Err(FeatureError::LightMismatch)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn combiner_is_linear(seed_a in 0u64..1000, seed_b in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let (fa, fb) = (random_fields(seed_a), random_fields(seed_b));
            let mut rng = stream_rng(seed_a ^ seed_b, 9);
            let mut c = Combiner::identity(fa.len());
            c.kernels.iter_mut().flatten().for_each(|w| *w = uniform(&mut rng) - 0.5);
            c.scalars.iter_mut().for_each(|s| *s = uniform(&mut rng));
            let mix: Vec<_> = fa.iter().zip(&fb).map(|(x, y)| {
                let mut f = x.clone();
                f.values = x.values.iter().zip(&y.values).map(|(u, v)| (a * *u as f64 + b * *v as f64) as f32).collect();
                f
            }).collect();
            let va = combine_transmittance(&fa, &c).unwrap();
            let vb = combine_transmittance(&fb, &c).unwrap();
            let vm = combine_transmittance(&mix, &c).unwrap();
            let scale = va.values.iter().map(|v| v.abs() as f64).fold(1e-3, f64::max);
            for i in 0..vm.values.len() {
                let want = a * va.values[i] as f64 + b * vb.values[i] as f64;
                prop_assert!((vm.values[i] as f64 - want).abs() < 1e-6 * scale * (a.abs() + b.abs() + 1.0) * 10.0);
            }
        }
    }

    #[test]
    fn fitting_recovers_a_target_combination() {
        let fields = random_fields(8);
        let mut truth = Combiner::identity(fields.len());
        truth.scalars = vec![0.5, 0.3, 0.1, 0.1];
        let target: Vec<f64> = combine_transmittance(&fields, &truth)
            .unwrap()
            .values
            .iter()
            .map(|&v| v as f64)
            .collect();
        let (_, losses) = fit_combiner(
            &fields,
            &Combiner::identity(fields.len()),
            &target,
            300,
            0.01,
        )
        .unwrap();
        assert!(
            losses.last().unwrap() < &(0.05 * losses[0]),
            "{} -> {}",
            losses[0],
            losses.last().unwrap()
        );
    }

    fn pipeline(grid: &DensityGrid, phase: PhaseModel) -> FeaturePipeline {
        let pyr = build_pyramid(grid).unwrap();
        let diffuse = generate_diffuse_template(&DEFAULT_DIFFUSE_COUNTS, 1).unwrap();
        let highlight = generate_highlight_template(
            &DEFAULT_HIGHLIGHT_COUNTS,
            1.0,
            crate::template::DEFAULT_CONE_HALF_ANGLE,
            1,
        )
        .unwrap();
        let config = FeatureConfig {
            template_scale: 1.0,
            extinction_scale: 5.0,
            ..FeatureConfig::default()
        };
        FeaturePipeline::build(
            &pyr,
            phase,
            small_table(),
            diffuse,
            highlight,
            &Vec3::new(0.3, -1.0, 0.1),
            config,
            None,
        )
        .unwrap()
    }

    #[test]
    fn block_lengths_and_vacuum() {
        let pl = pipeline(&blob(16), PhaseModel::solid_liquid_preset());
        let p = Vec3::new(0.5, 0.5, 0.5);
        let [d, h] = pl.blocks(&Center {
            p: p.into(),
            omega: [0.0, 0.0, 1.0],
        });
        assert_eq!(d.len(), 194);
        assert_eq!(h.len(), 72);
        assert!(d
            .density
            .iter()
            .chain(&d.transmittance)
            .chain(&d.phase)
            .all(|v| v.is_finite()));
        let far = Vec3::new(10.0, 10.0, 10.0);
        let b = pl.sample(TemplateKind::Diffuse, &far, &Vec3::z());
        assert!(b.density.iter().all(|&v| v == 0.0));
        assert!(b.transmittance.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn isotropic_phase_features_depend_only_on_aperture() {
        let pl = pipeline(&blob(16), PhaseModel::isotropic());
        let p = Vec3::new(0.45, 0.55, 0.5);
        let a = pl.sample(TemplateKind::Diffuse, &p, &Vec3::x());
        let b = pl.sample(TemplateKind::Diffuse, &p, &Vec3::new(0.0, -0.6, 0.8));
        assert_eq!(a.phase, b.phase);
        let r = pl.diffuse.layers[3].cap_radius;
        let start: usize = pl.diffuse.layer_sizes()[..3].iter().sum();
        for (k, q) in pl.diffuse.layers[3].points.iter().enumerate() {
            let half = cap_half_angle(r, Vec3::from(*q).norm());
            let omega = crate::phase::cap_solid_angle(half) / (4.0 * std::f64::consts::PI);
            assert!((a.phase[start + k] as f64 - omega * omega).abs() < 1e-6);
        }
    }

    #[test]
    fn spot_check_against_scalar_evaluation() {
        let pl = pipeline(&blob(16), PhaseModel::solid_liquid_preset());
        let mut rng = stream_rng(77, 0);
        let p = Vec3::new(0.47, 0.52, 0.49);
        let omega = uniform_sphere(&mut rng);
        for kind in [TemplateKind::Diffuse, TemplateKind::Highlight] {
            let block = pl.sample(kind, &p, &omega);
            let t = pl.template(kind);
            let entry = light_entry_point(pl.grid.layout(), &p, &pl.light);
            let pts = place_template(t, &p, &omega, &pl.light, &entry, pl.config.template_scale);
            let scale = t.placement_scale(&p, &entry, pl.config.template_scale);
            let radii: Vec<f64> = t
                .layers
                .iter()
                .flat_map(|l| vec![l.cap_radius * scale; l.points.len()])
                .collect();
            for _ in 0..5 {
                let i = (uniform(&mut rng) * pts.len() as f64) as usize;
                assert_eq!(block.density[i], pl.grid.sample_trilinear(&pts[i]) as f32);
                assert_eq!(block.transmittance[i], pl.volume.sample(&pts[i]) as f32);
                let d = (pts[i] - p).norm();
                if d > 0.0 {
                    let f = phase_feature(
                        &pl.phase,
                        &pl.table,
                        &omega,
                        &pl.light,
                        &p,
                        &pts[i],
                        cap_half_angle(radii[i], d),
                    )
                    .unwrap();
                    assert_eq!(block.phase[i], f.value as f32);
                }
            }
        }
    }

    #[test]
    fn table_matches_direct_quadrature() {
        let pl = pipeline(&blob(16), PhaseModel::hg(0.5).unwrap());
        let p = Vec3::new(0.5, 0.5, 0.5);
        let fast = pl.sample(TemplateKind::Diffuse, &p, &Vec3::x());
        let src = FeatureSources {
            grid: &pl.grid,
            volume: &pl.volume,
            phase: &pl.phase,
            eval: &Quadrature { nodes: 32 },
            template_scale: 1.0,
        };
        let slow = sample_features(&src, &pl.diffuse, &p, &Vec3::x(), &pl.light);
        for (a, b) in fast.phase.iter().zip(&slow.phase) {
            assert!((a - b).abs() <= 0.05 * b.abs() + 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn centres_sit_in_occupied_voxels() {
        let g = blob(16);
        let centers = sample_centers(&g, 200, 5).unwrap();
        assert_eq!(centers.len(), 200);
        for c in &centers {
            assert!(
                g.sample_trilinear(&Vec3::from(c.p)) > 0.0 || g.layout().contains(&Vec3::from(c.p))
            );
            assert!((Vec3::from(c.omega).norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(centers, sample_centers(&g, 200, 5).unwrap());
        assert!(matches!(
            sample_centers(&cube(4, 0.0), 3, 1),
            Err(FeatureError::EmptyMedium)
        ));
        assert!(matches!(
            sample_centers(&g, 0, 1),
            Err(FeatureError::NoCenters)
        ));
    }

    #[test]
    fn table_round_trip_and_determinism() {
        let g = blob(16);
        let pl = pipeline(&g, PhaseModel::solid_liquid_preset());
        let one = pl.precompute(&sample_centers(&g, 1, 2).unwrap()).unwrap();
        assert_eq!((one.diffuse.len(), one.highlight.len()), (1, 1));
        let centers = sample_centers(&g, 12, 3).unwrap();
        let table = pl.precompute(&centers).unwrap();
        let bytes = table.to_bytes();
        let back = FeatureTable::from_bytes(&bytes).unwrap();
        assert_eq!(back, table);
        assert_eq!(bytes, pl.precompute(&centers).unwrap().to_bytes());
        assert!(FeatureTable::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FeatureTable::from_bytes(&bad).is_err());
        assert!(matches!(pl.precompute(&[]), Err(FeatureError::NoCenters)));
    }
}
