//! The layerwise-fused backbone: six stacks (density, phase, transmittance ×
//! diffuse, highlight), configuration conditioning, merge head, the
//! log-compressed loss, training, inference and neural rendering.
//!
//! Per template layer, each feature type enters as its values sorted in
//! descending order followed by their mean and maximum. Phase values pass
//! through `ln(1 + x)` first. Every input coordinate is then standardized
//! with statistics fitted on the training split and stored with the weights.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::camera::Camera;
use crate::digest::sha256_hex;
use crate::features::{Center, FeatureError, FeaturePipeline, FeatureTable, SampleFeatureBlock};
use crate::image::Image;
use crate::medium::Medium;
use crate::nn::{
    attention_weight, he_uniform, lit, AdamConfig, AttentionMode, NnError, ParamId, ParamSet,
    Scalar, SqueezeExcite, Tape, Tensor, TrainState, Var,
};
use crate::phase::PhaseModel;
use crate::rng::stream_rng;
use crate::rte::{render_with_field, DatasetZ, RteError, ScatterField};
use crate::template::TemplateKind;
use crate::volume::{MaterialClass, VoxelLayout};
use crate::{Rgb, Vec3};

/// Exponent of the albedo normalisation in the loss.
pub const DEFAULT_GAMMA: f64 = 4.0;
/// `[g1, g2, g3, η_r, η_g, η_b, α]`, unused lobes zero.
pub const CONFIG_WIDTH: usize = 7;
pub const VNET_MAGIC: &[u8; 4] = b"VNET";
pub const VNET_VERSION: u32 = 1;
/// Gradients are accumulated per fixed-size chunk and summed in chunk order.
pub const GRADIENT_CHUNK: usize = 16;
/// Initial bias of the output layer.
const OUTPUT_BIAS: f64 = 0.1;
/// Initial weight scale of the output layer.
const OUTPUT_GAIN: f64 = 0.1;
/// Initial bias of every hidden layer.
const HIDDEN_BIAS: f64 = 0.1;

const KINDS: [TemplateKind; 2] = [TemplateKind::Diffuse, TemplateKind::Highlight];
const TYPE_NAMES: [&str; 3] = ["density", "phase", "transmittance"];

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("feature block has layer sizes {found:?}, network expects {expected:?}")]
    CountMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid configuration parameters: {0}")]
    Params(String),
    #[error("label {0} is negative")]
    NegativeLabel(f64),
    #[error("albedo {0} must lie in (0, 1)")]
    Albedo(f64),
    #[error("dataset has no usable entries")]
    EmptyDataset,
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("malformed network file: {0}")]
    Format(String),
    #[error("architecture digest {found} does not match {expected}")]
    Architecture { expected: String, found: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Rte(#[from] RteError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("network config: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-centre conditioning: phase asymmetries, albedo and `angle(ω, l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigParams {
    pub g_params: Vec<f64>,
    /// Weighted mean asymmetry, fed to the attention vector.
    pub g_eff: f64,
    pub albedo: Rgb,
    pub alpha: f64,
}

impl ConfigParams {
    /// `light_dir` is the direction the light travels.
    pub fn new(phase: &PhaseModel, albedo: Rgb, omega: &Vec3, light_dir: &Vec3) -> Self {
        let c = omega
            .normalize()
            .dot(&light_dir.normalize())
            .clamp(-1.0, 1.0);
        Self {
            g_params: phase.g_values(),
            g_eff: phase.effective_g(),
            albedo,
            alpha: c.acos(),
        }
    }

    /// Lobe count and albedo range of a material class.
    pub fn validate(&self, class: MaterialClass) -> Result<(), PredictorError> {
        if self.g_params.len() != class.lobe_count() {
            return Err(PredictorError::Params(format!(
                "{:?} needs {} asymmetry values, got {}",
                class,
                class.lobe_count(),
                self.g_params.len()
            )));
        }
        let (lo, hi) = class.albedo_range();
        if let Some(a) = self.albedo.iter().find(|&&a| !(lo..=hi).contains(&a)) {
            return Err(PredictorError::Params(format!(
                "albedo {a} outside [{lo}, {hi}] for {class:?}"
            )));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.alpha) {
            return Err(PredictorError::Params(format!(
                "angle {} outside [0, π]",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn vector(&self) -> Result<[f64; CONFIG_WIDTH], PredictorError> {
        if self.g_params.is_empty() || self.g_params.len() > 3 {
            return Err(PredictorError::Params(format!(
                "{} asymmetry values",
                self.g_params.len()
            )));
        }
        let mut v = [0.0; CONFIG_WIDTH];
        v[..self.g_params.len()].copy_from_slice(&self.g_params);
        v[3..6].copy_from_slice(&self.albedo);
        v[6] = self.alpha;
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Squeeze-excite bottleneck, one weight per feature type.
    Learned,
    /// `sigmoid(mean(relu(v)))`, one weight shared by the feature types.
    Literal,
}

/// Architecture of the backbone. Everything here goes into the architecture digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub diffuse_counts: Vec<usize>,
    pub highlight_counts: Vec<usize>,
    /// Width of the fusion blocks.
    pub hidden: usize,
    /// Width of the per-type and cross-type merge layers.
    pub merge: usize,
    /// Width of the head's hidden layers.
    pub head: usize,
    pub gamma: f64,
    pub attention: AttentionKind,
    /// Feed the configuration vector to every layer embedding instead of layer 0 only.
    pub cfg_every_layer: bool,
}

impl BackboneConfig {
    pub fn new(diffuse_counts: Vec<usize>, highlight_counts: Vec<usize>) -> Self {
        Self {
            diffuse_counts,
            highlight_counts,
            hidden: 32,
            merge: 64,
            head: 64,
            gamma: DEFAULT_GAMMA,
            attention: AttentionKind::Learned,
            cfg_every_layer: false,
        }
    }

    pub fn counts(&self, kind: TemplateKind) -> &[usize] {
        match kind {
            TemplateKind::Diffuse => &self.diffuse_counts,
            TemplateKind::Highlight => &self.highlight_counts,
        }
    }

    fn validate(&self) -> Result<(), PredictorError> {
        if self.diffuse_counts.is_empty() || self.highlight_counts.is_empty() {
            return Err(PredictorError::Config(
                "both templates need at least one layer".into(),
            ));
        }
        if self
            .diffuse_counts
            .iter()
            .chain(&self.highlight_counts)
            .any(|&n| n == 0)
        {
            return Err(PredictorError::Config("empty template layer".into()));
        }
        if self.hidden == 0 || self.merge == 0 || self.head == 0 {
            return Err(PredictorError::Config("zero layer width".into()));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(PredictorError::Config(format!("gamma {}", self.gamma)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the architecture.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn layout(&self) -> InputLayout {
        let mut offset = 0;
        let mut layers: [[Vec<(usize, usize)>; 3]; 2] = Default::default();
        for (k, kind) in KINDS.iter().enumerate() {
            for slot in layers[k].iter_mut() {
                for &n in self.counts(*kind) {
                    slot.push((offset, n + 2));
                    offset += n + 2;
                }
            }
        }
        InputLayout {
            layers,
            cfg: offset,
            total: offset + CONFIG_WIDTH,
        }
    }
}

/// Where each `(template, feature type, layer)` vector sits in the flat input.
#[derive(Debug, Clone, PartialEq)]
struct InputLayout {
    layers: [[Vec<(usize, usize)>; 3]; 2],
    cfg: usize,
    total: usize,
}

/// Unstandardized network input of one centre.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInput {
    pub x: Vec<f64>,
    pub g_eff: f64,
    pub alpha: f64,
}

/// Standardized network input of one centre.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub x: Vec<f64>,
    pub g_eff: f64,
    pub alpha: f64,
}

/// Flat input vector: per template, per feature type, per layer the sorted
/// values then mean and max; followed by the configuration vector.
pub fn raw_input(
    config: &BackboneConfig,
    diffuse: &SampleFeatureBlock,
    highlight: &SampleFeatureBlock,
    params: &ConfigParams,
) -> Result<RawInput, PredictorError> {
    let mut x = Vec::with_capacity(config.layout().total);
    for (kind, block) in KINDS.iter().zip([diffuse, highlight]) {
        let expected = config.counts(*kind);
        if block.kind != *kind || block.layer_sizes != expected {
            return Err(PredictorError::CountMismatch {
                expected: expected.to_vec(),
                found: block.layer_sizes.clone(),
            });
        }
        for tau in 0..3 {
            let values = block.feature(tau);
            let mut start = 0;
            for &n in expected {
                let mut layer: Vec<f64> = values[start..start + n]
                    .iter()
                    .map(|&v| {
                        if tau == 1 {
                            (v as f64).ln_1p()
                        } else {
                            v as f64
                        }
                    })
                    .collect();
                start += n;
                layer.sort_by(|a, b| b.total_cmp(a));
                let mean = layer.iter().sum::<f64>() / n as f64;
                let max = layer[0];
                x.extend_from_slice(&layer);
                x.push(mean);
                x.push(max);
            }
        }
    }
    x.extend_from_slice(&params.vector()?);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PredictorError::Params("non-finite feature".into()));
    }
    Ok(RawInput {
        x,
        g_eff: params.g_eff,
        alpha: params.alpha,
    })
}

/// Per-coordinate affine standardization `(x − mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Mean and standard deviation per coordinate; near-constant coordinates keep scale 1.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a RawInput>) -> Result<Self, PredictorError> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for r in rows {
            if sum.is_empty() {
                sum = vec![0.0; r.x.len()];
                sum_sq = vec![0.0; r.x.len()];
            }
            if r.x.len() != sum.len() {
                return Err(PredictorError::Config("inputs of different widths".into()));
            }
            n += 1;
            for (i, v) in r.x.iter().enumerate() {
                sum[i] += v;
                sum_sq[i] += v * v;
            }
        }
        if n == 0 {
            return Err(PredictorError::EmptyDataset);
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sum_sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / nf - m * m).max(0.0).sqrt();
                if sd > 1e-6 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, raw: &RawInput) -> Result<Encoded, PredictorError> {
        if raw.x.len() != self.mean.len() {
            return Err(PredictorError::Config(format!(
                "input width {} vs statistics {}",
                raw.x.len(),
                self.mean.len()
            )));
        }
        let x = raw
            .x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        Ok(Encoded {
            x,
            g_eff: raw.g_eff,
            alpha: raw.alpha,
        })
    }
}

/// `y = ln(F/η^γ + 1)` per channel.
pub fn encode_target(f: Rgb, albedo: Rgb, gamma: f64) -> Result<Rgb, PredictorError> {
    let mut y = [0.0; 3];
    for c in 0..3 {
        if f[c] < 0.0 {
            return Err(PredictorError::NegativeLabel(f[c]));
        }
        if !(albedo[c] > 0.0 && albedo[c] < 1.0) {
            return Err(PredictorError::Albedo(albedo[c]));
        }
        y[c] = (f[c] / albedo[c].powf(gamma)).ln_1p();
    }
    Ok(y)
}

/// `F̂ = η^γ (e^y − 1)`.
pub fn decode_prediction(y: Rgb, albedo: Rgb, gamma: f64) -> Rgb {
    std::array::from_fn(|c| albedo[c].powf(gamma) * y[c].exp_m1())
}

/// Mean over batch and channels of the squared difference of log-compressed values.
pub fn loss_ls(
    pred: &[Rgb],
    label: &[Rgb],
    albedo: &[Rgb],
    gamma: f64,
) -> Result<f64, PredictorError> {
    if pred.len() != label.len() || pred.len() != albedo.len() {
        return Err(PredictorError::Config(
            "loss inputs of different lengths".into(),
        ));
    }
    if pred.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let mut s = 0.0;
    for ((p, l), a) in pred.iter().zip(label).zip(albedo) {
        let (yp, yl) = (encode_target(*p, *a, gamma)?, encode_target(*l, *a, gamma)?);
        s += (0..3).map(|c| (yp[c] - yl[c]).powi(2)).sum::<f64>();
    }
    Ok(s / (3 * pred.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DenseIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct StackIds {
    embed: Vec<DenseIds>,
    attention: Vec<AttentionMode>,
    fc1: Vec<DenseIds>,
    fc2: Vec<DenseIds>,
}

#[derive(Debug, Clone, PartialEq)]
struct Wiring {
    stacks: [[StackIds; 3]; 2],
    merge: [DenseIds; 3],
    cross: DenseIds,
    head: [DenseIds; 3],
}

/// Registers parameters when `rng` is given, looks them up otherwise.
struct Wirer<'a, T: Scalar> {
    params: &'a mut ParamSet<T>,
    rng: Option<&'a mut crate::rng::StreamRng>,
}

impl<T: Scalar> Wirer<'_, T> {
    /// `gain` scales the He-uniform weights.
    fn dense(
        &mut self,
        name: &str,
        input: usize,
        output: usize,
        gain: f64,
        bias: f64,
    ) -> Result<DenseIds, PredictorError> {
        let (wn, bn) = (format!("{name}.w"), format!("{name}.b"));
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let mut w: Tensor<T> = he_uniform(vec![output, input], input, rng);
                w.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = *v * lit::<T>(gain));
                Ok(DenseIds {
                    w: self.params.add(&wn, w)?,
                    b: self.params.add(
                        &bn,
                        Tensor::new(vec![output], vec![lit::<T>(bias); output])?,
                    )?,
                })
            }
            None => {
                let ids = DenseIds {
                    w: self.params.id(&wn)?,
                    b: self.params.id(&bn)?,
                };
                if self.params.get(ids.w).shape() != [output, input]
                    || self.params.get(ids.b).shape() != [output]
                {
                    return Err(PredictorError::Format(format!(
                        "parameter {name} has the wrong shape"
                    )));
                }
                Ok(ids)
            }
        }
    }

    fn attention(
        &mut self,
        name: &str,
        kind: AttentionKind,
    ) -> Result<AttentionMode, PredictorError> {
        Ok(match (kind, self.rng.as_deref_mut()) {
            (AttentionKind::Literal, _) => AttentionMode::Literal,
            (AttentionKind::Learned, Some(rng)) => {
                AttentionMode::Learned(SqueezeExcite::register(self.params, name, rng)?)
            }
            (AttentionKind::Learned, None) => {
                AttentionMode::Learned(SqueezeExcite::lookup(self.params, name)?)
            }
        })
    }

    fn wire(&mut self, c: &BackboneConfig) -> Result<Wiring, PredictorError> {
        let h = c.hidden;
        let mut stacks: [[Option<StackIds>; 3]; 2] = Default::default();
        for (k, kind) in KINDS.iter().enumerate() {
            let kname = kind_name(*kind);
            for (tau, tname) in TYPE_NAMES.iter().enumerate() {
                let prefix = format!("{kname}.{tname}");
                let counts = c.counts(*kind);
                let residual_gain = 1.0 / (counts.len() as f64).sqrt();
                let mut s = StackIds {
                    embed: vec![],
                    attention: vec![],
                    fc1: vec![],
                    fc2: vec![],
                };
                for (i, &n) in counts.iter().enumerate() {
                    let width = n
                        + 2
                        + if i == 0 || c.cfg_every_layer {
                            CONFIG_WIDTH
                        } else {
                            0
                        };
                    s.embed.push(self.dense(
                        &format!("{prefix}.embed{i}"),
                        width,
                        h,
                        1.0,
                        HIDDEN_BIAS,
                    )?);
                }
                for i in 0..counts.len() {
                    s.attention
                        .push(self.attention(&format!("{prefix}.se{i}"), c.attention)?);
                    s.fc1
                        .push(self.dense(&format!("{prefix}.fc1_{i}"), h, h, 1.0, HIDDEN_BIAS)?);
                    s.fc2.push(self.dense(
                        &format!("{prefix}.fc2_{i}"),
                        2 * h,
                        h,
                        residual_gain,
                        0.0,
                    )?);
                }
                stacks[k][tau] = Some(s);
            }
        }
        let mut merge = Vec::new();
        for tname in TYPE_NAMES {
            merge.push(self.dense(&format!("merge.{tname}"), 2 * h, c.merge, 1.0, HIDDEN_BIAS)?);
        }
        let cross = self.dense("cross", 3 * c.merge, c.merge, 1.0, HIDDEN_BIAS)?;
        let head = [
            self.dense("head0", c.merge, c.head, 1.0, HIDDEN_BIAS)?,
            self.dense("head1", c.head, c.head, 1.0, HIDDEN_BIAS)?,
            self.dense("head2", c.head, 3, OUTPUT_GAIN, OUTPUT_BIAS)?,
        ];
        Ok(Wiring {
            stacks: stacks.map(|row| row.map(|s| s.expect("every stack wired"))),
            merge: [merge[0], merge[1], merge[2]],
            cross,
            head,
        })
    }
}

fn kind_name(kind: TemplateKind) -> &'static str {
    match kind {
        TemplateKind::Diffuse => "diffuse",
        TemplateKind::Highlight => "highlight",
    }
}

/// Fusion blocks visited per feature type (diffuse plus highlight) for each centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardStats {
    pub fusion_blocks: [usize; 3],
}

/// The backbone network with its input statistics.
#[derive(Debug, Clone)]
pub struct Backbone<T: Scalar = f32> {
    config: BackboneConfig,
    stats: InputStats,
    params: ParamSet<T>,
    wiring: Wiring,
    layout: InputLayout,
}

impl<T: Scalar> Backbone<T> {
    /// Fresh network with He-uniform weights drawn from `seed`.
    pub fn new(
        config: BackboneConfig,
        stats: InputStats,
        seed: u64,
    ) -> Result<Self, PredictorError> {
        config.validate()?;
        let layout = config.layout();
        if stats.mean.len() != layout.total || stats.scale.len() != layout.total {
            return Err(PredictorError::Config(format!(
                "statistics width {} vs input width {}",
                stats.mean.len(),
                layout.total
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = stream_rng(seed, 0);
        let wiring = Wirer {
            params: &mut params,
            rng: Some(&mut rng),
        }
        .wire(&config)?;
        Ok(Self {
            config,
            stats,
            params,
            wiring,
            layout,
        })
    }

    /// Rebuilds the wiring over existing parameters (names and shapes must match).
    pub fn from_parts(
        config: BackboneConfig,
        stats: InputStats,
        mut params: ParamSet<T>,
    ) -> Result<Self, PredictorError> {
        config.validate()?;
        let layout = config.layout();
        if stats.mean.len() != layout.total || stats.scale.len() != layout.total {
            return Err(PredictorError::Config(
                "statistics width does not match the architecture".into(),
            ));
        }
        let wiring = Wirer {
            params: &mut params,
            rng: None,
        }
        .wire(&config)?;
        let expected = Self::new(config.clone(), stats.clone(), 0)?.params.len();
        if params.len() != expected {
            return Err(PredictorError::Format(format!(
                "{} parameter blocks, expected {expected}",
                params.len()
            )));
        }
        Ok(Self {
            config,
            stats,
            params,
            wiring,
            layout,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn stats(&self) -> &InputStats {
        &self.stats
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.layout.total
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            stats: self.stats.clone(),
            params: self.params.cast(),
            wiring: self.wiring.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn with_stats(mut self, stats: InputStats) -> Result<Self, PredictorError> {
        if stats.mean.len() != self.layout.total {
            return Err(PredictorError::Config(
                "statistics width does not match the architecture".into(),
            ));
        }
        self.stats = stats;
        Ok(self)
    }

    pub fn encode(
        &self,
        diffuse: &SampleFeatureBlock,
        highlight: &SampleFeatureBlock,
        params: &ConfigParams,
    ) -> Result<Encoded, PredictorError> {
        self.stats
            .apply(&raw_input(&self.config, diffuse, highlight, params)?)
    }

    /// Records the forward pass of a batch; returns the `B × 3` output node.
    pub fn record<'t>(
        &'t self,
        tape: &mut Tape<'t, T>,
        batch: &[&Encoded],
    ) -> Result<(Var, ForwardStats), PredictorError> {
        let (_, y, stats) = self.record_parts(tape, batch)?;
        Ok((y, stats))
    }

    /// Output node before and after the output activation.
    fn record_parts<'t>(
        &'t self,
        tape: &mut Tape<'t, T>,
        batch: &[&Encoded],
    ) -> Result<(Var, Var, ForwardStats), PredictorError> {
        let b = batch.len();
        if b == 0 {
            return Err(PredictorError::EmptyDataset);
        }
        if let Some(e) = batch.iter().find(|e| e.x.len() != self.layout.total) {
            return Err(PredictorError::Config(format!(
                "input width {} vs {}",
                e.x.len(),
                self.layout.total
            )));
        }
        let gather = |tape: &mut Tape<'t, T>, start: usize, width: usize| {
            let data = batch
                .iter()
                .flat_map(|e| e.x[start..start + width].iter().map(|&v| lit::<T>(v)))
                .collect();
            tape.input(b, width, data)
        };
        let cfg = gather(tape, self.layout.cfg, CONFIG_WIDTH)?;
        let h = self.config.hidden;
        let mut stats = ForwardStats::default();
        let mut outputs = [[None; 3]; 2];
        for (k, kind) in KINDS.iter().enumerate() {
            let layers = self.config.counts(*kind).len();
            let slots = &self.layout.layers[k];
            let mut attention_inputs = Vec::with_capacity(layers);
            for i in 0..layers {
                let data = batch
                    .iter()
                    .flat_map(|e| {
                        let pool = |tau: usize, which: usize| {
                            let (start, width) = slots[tau][i];
                            e.x[start + width - 2 + which]
                        };
                        [
                            pool(0, 0),
                            pool(1, 0),
                            pool(2, 0),
                            pool(0, 1),
                            pool(1, 1),
                            pool(2, 1),
                            e.g_eff,
                            e.alpha,
                        ]
                        .map(lit::<T>)
                    })
                    .collect();
                attention_inputs.push(tape.input(b, 8, data)?);
            }
            for tau in 0..3 {
                let ids = &self.wiring.stacks[k][tau];
                let embed = |tape: &mut Tape<'t, T>, i: usize| -> Result<Var, PredictorError> {
                    let (start, width) = slots[tau][i];
                    let mut x = gather(tape, start, width)?;
                    if i == 0 || self.config.cfg_every_layer {
                        x = tape.concat(&[x, cfg])?;
                    }
                    let e = tape.dense(x, ids.embed[i].w, ids.embed[i].b)?;
                    Ok(tape.relu(e))
                };
                let mut cur = embed(tape, 0)?;
                for i in 0..layers {
                    let w = attention_weight(tape, attention_inputs[i], &ids.attention[i])?;
                    let col = match ids.attention[i] {
                        AttentionMode::Literal => 0,
                        AttentionMode::Learned(_) => tau,
                    };
                    let a = tape.scale_by_col(cur, w, col)?;
                    let u = tape.dense(a, ids.fc1[i].w, ids.fc1[i].b)?;
                    let u = tape.relu(u);
                    let next = if i + 1 < layers {
                        embed(tape, i + 1)?
                    } else {
                        tape.zeros(b, h)
                    };
                    let joined = tape.concat(&[u, next])?;
                    let o = tape.dense(joined, ids.fc2[i].w, ids.fc2[i].b)?;
                    let o = tape.relu(o);
                    cur = tape.add(o, cur)?;
                    stats.fusion_blocks[tau] += 1;
                }
                outputs[k][tau] = Some(cur);
            }
        }
        let mut merged = Vec::with_capacity(3);
        for tau in 0..3 {
            let joined = tape.concat(&[outputs[0][tau].unwrap(), outputs[1][tau].unwrap()])?;
            let m = tape.dense(joined, self.wiring.merge[tau].w, self.wiring.merge[tau].b)?;
            merged.push(tape.relu(m));
        }
        let joined = tape.concat(&merged)?;
        let c = tape.dense(joined, self.wiring.cross.w, self.wiring.cross.b)?;
        let mut y = tape.relu(c);
        let mut z = y;
        for d in &self.wiring.head {
            z = tape.dense(y, d.w, d.b)?;
            y = tape.relu(z);
        }
        Ok((z, y, stats))
    }

    /// `y` per input, evaluated in fixed chunks in parallel; rows never interact.
    pub fn forward(&self, inputs: &[Encoded]) -> Result<Vec<Rgb>, PredictorError> {
        let chunks: Vec<Vec<Rgb>> = inputs
            .par_chunks(GRADIENT_CHUNK)
            .map(|chunk| {
                let refs: Vec<&Encoded> = chunk.iter().collect();
                let mut tape = Tape::new(&self.params);
                let (y, _) = self.record(&mut tape, &refs)?;
                Ok(tape
                    .value(y)
                    .chunks(3)
                    .map(|r| [0, 1, 2].map(|c| r[c].to_f64().unwrap()))
                    .collect())
            })
            .collect::<Result<_, PredictorError>>()?;
        Ok(chunks.concat())
    }

    /// Fusion-block counts of one forward pass.
    pub fn forward_stats(&self, input: &Encoded) -> Result<ForwardStats, PredictorError> {
        let mut tape = Tape::new(&self.params);
        Ok(self.record(&mut tape, &[input])?.1)
    }

    /// Sum of squared errors of the output pre-activation over `batch`
    /// divided by `denom`, with parameter gradients.
    pub fn loss_and_grads(
        &self,
        batch: &[&Encoded],
        targets: &[Rgb],
        denom: f64,
    ) -> Result<(f64, Vec<Vec<T>>), PredictorError> {
        let mut tape = Tape::new(&self.params);
        let (z, _, _) = self.record_parts(&mut tape, batch)?;
        let flat: Vec<f64> = targets.iter().flatten().copied().collect();
        let loss = tape.squared_error(z, &flat, denom)?;
        let value = tape.value(loss)[0].to_f64().unwrap();
        Ok((value, tape.backward(loss).params))
    }
}

/// Training example in y-space.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Encoded,
    pub target: Rgb,
    pub albedo: Rgb,
}

/// Non-flagged dataset entries as raw inputs and y-space targets.
pub fn dataset_inputs(
    config: &BackboneConfig,
    data: &DatasetZ,
) -> Result<Vec<(RawInput, Rgb, Rgb)>, PredictorError> {
    let light = Vec3::from(data.manifest.light);
    let albedo = data.manifest.albedo;
    let rows = data
        .entries
        .iter()
        .filter(|e| !e.flagged)
        .map(|e| {
            let params = ConfigParams::new(
                &data.manifest.phase,
                albedo,
                &Vec3::from(e.label.omega),
                &light,
            );
            Ok((
                raw_input(config, &e.diffuse, &e.highlight, &params)?,
                encode_target(e.label.f, albedo, config.gamma)?,
                albedo,
            ))
        })
        .collect::<Result<Vec<_>, PredictorError>>()?;
    if rows.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    Ok(rows)
}

/// Whether an entry index belongs to the validation split.
pub fn is_validation(index: usize, fraction: f64) -> bool {
    if fraction <= 0.0 {
        return false;
    }
    let digest = sha256_hex(&(index as u64).to_le_bytes());
    let bucket = u64::from_str_radix(&digest[..8], 16).unwrap() as f64 / u32::MAX as f64;
    bucket < fraction
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    /// The learning rate ramps linearly from `lr / warmup` to `lr` over this many steps.
    pub warmup: usize,
    /// Full-set losses are logged every this many steps (and at the ends).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            validation_fraction: 0.1,
            warmup: 100,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_size: usize,
    pub val_size: usize,
}

impl TrainReport {
    /// `step,train_loss,val_loss` with an empty last column when there is no validation split.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,train_loss,val_loss\n");
        for p in &self.curve {
            let val = p.val_loss.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", p.step, p.train_loss, val));
        }
        s
    }
}

/// Mean squared y-error over a set (`L_total`).
pub fn dataset_loss<T: Scalar>(
    net: &Backbone<T>,
    examples: &[&Example],
) -> Result<f64, PredictorError> {
    if examples.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let inputs: Vec<Encoded> = examples.iter().map(|e| e.input.clone()).collect();
    let y = net.forward(&inputs)?;
    let s: f64 = y
        .iter()
        .zip(examples)
        .map(|(p, e)| (0..3).map(|c| (p[c] - e.target[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(s / (3 * examples.len()) as f64)
}

/// Fits input statistics on the training split and returns a fresh network
/// with the encoded examples (training entries first, then validation).
pub fn prepare_training(
    config: BackboneConfig,
    data: &DatasetZ,
    train: &TrainConfig,
) -> Result<(Backbone<f32>, Vec<Example>, usize), PredictorError> {
    let rows = dataset_inputs(&config, data)?;
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, row) in rows.into_iter().enumerate() {
        if is_validation(i, train.validation_fraction) {
            va.push(row)
        } else {
            tr.push(row)
        }
    }
    if tr.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let stats = InputStats::fit(tr.iter().map(|r| &r.0))?;
    let net = Backbone::new(config, stats, train.seed)?;
    let n_train = tr.len();
    let examples = tr
        .into_iter()
        .chain(va)
        .map(|(raw, target, albedo)| {
            Ok(Example {
                input: net.stats.apply(&raw)?,
                target,
                albedo,
            })
        })
        .collect::<Result<Vec<_>, PredictorError>>()?;
    Ok((net, examples, n_train))
}

/// Adam on `L_total` over `examples[..n_train]`, validating on the rest.
/// Batches follow a per-epoch shuffle; gradients are summed over fixed
/// chunks in order, so results do not depend on the thread count.
pub fn train<T: Scalar>(
    net: &mut Backbone<T>,
    examples: &[Example],
    n_train: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport, PredictorError> {
    if n_train == 0 || n_train > examples.len() {
        return Err(PredictorError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(PredictorError::Config("batch size 0".into()));
    }
    let train_set: Vec<&Example> = examples[..n_train].iter().collect();
    let val_set: Vec<&Example> = examples[n_train..].iter().collect();
    let evaluate = |net: &Backbone<T>, step: usize| -> Result<CurvePoint, PredictorError> {
        let train_loss = dataset_loss(net, &train_set)?;
        if !train_loss.is_finite() {
            return Err(PredictorError::Diverged {
                step,
                detail: format!("training loss {train_loss}"),
            });
        }
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(dataset_loss(net, &val_set)?)
        };
        Ok(CurvePoint {
            step,
            train_loss,
            val_loss,
        })
    };
    let mut curve = vec![evaluate(net, 0)?];
    let initial_loss = curve[0].train_loss;
    let mut state = TrainState::new(
        &net.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let batch = cfg.batch_size.min(n_train);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut cursor = n_train;
    let mut epoch = 0u64;
    for step in 1..=cfg.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == n_train {
                epoch += 1;
                order.shuffle(&mut stream_rng(cfg.seed, epoch));
                cursor = 0;
            }
            picked.push(train_set[order[cursor]]);
            cursor += 1;
        }
        let denom = (3 * batch) as f64;
        let parts: Vec<(f64, Vec<Vec<T>>)> = picked
            .par_chunks(GRADIENT_CHUNK)
            .map(|chunk| {
                let inputs: Vec<&Encoded> = chunk.iter().map(|e| &e.input).collect();
                let targets: Vec<Rgb> = chunk.iter().map(|e| e.target).collect();
                net.loss_and_grads(&inputs, &targets, denom)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| match e {
                PredictorError::Nn(NnError::NonFinite(what)) => PredictorError::Diverged {
                    step,
                    detail: format!("non-finite {what}"),
                },
                other => other,
            })?;
        let mut grads = net.params.zero_grads();
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (acc, part) in grads.iter_mut().zip(g) {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a = *a + p;
                }
            }
        }
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(PredictorError::Diverged {
                step,
                detail: format!("batch loss {loss}"),
            });
        }
        let lr = cfg.lr * (step as f64 / cfg.warmup.max(1) as f64).min(1.0);
        state.adam_step(&mut net.params, &grads, lr)?;
        if step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            curve.push(evaluate(net, step)?);
        }
    }
    let final_loss = curve.last().unwrap().train_loss;
    Ok(TrainReport {
        curve,
        initial_loss,
        final_loss,
        train_size: n_train,
        val_size: val_set.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetHeader {
    config: BackboneConfig,
    stats: InputStats,
}

impl Backbone<f32> {
    /// "VNET", version, architecture digest, JSON header (architecture and
    /// input statistics), then named little-endian f32 parameter blocks.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), PredictorError> {
        let digest = self.config.digest();
        let header = serde_json::to_vec(&NetHeader {
            config: self.config.clone(),
            stats: self.stats.clone(),
        })?;
        w.write_all(VNET_MAGIC)?;
        w.write_u32::<LittleEndian>(VNET_VERSION)?;
        w.write_u32::<LittleEndian>(digest.len() as u32)?;
        w.write_all(digest.as_bytes())?;
        w.write_u64::<LittleEndian>(header.len() as u64)?;
        w.write_all(&header)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in self.params.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PredictorError> {
        let mut r = bytes;
        let truncated = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                PredictorError::Format("truncated".into())
            } else {
                e.into()
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != VNET_MAGIC {
            return Err(PredictorError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != VNET_VERSION {
            return Err(PredictorError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let read_bytes = |r: &mut &[u8], n: usize| -> Result<Vec<u8>, PredictorError> {
            if n > r.len() {
                return Err(PredictorError::Format("truncated".into()));
            }
            let (head, tail) = r.split_at(n);
            *r = tail;
            Ok(head.to_vec())
        };
        let n = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let digest = String::from_utf8(read_bytes(&mut r, n)?)
            .map_err(|_| PredictorError::Format("digest is not UTF-8".into()))?;
        let n = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let header: NetHeader = serde_json::from_slice(&read_bytes(&mut r, n)?)?;
        let expected = header.config.digest();
        if digest != expected {
            return Err(PredictorError::Architecture {
                expected,
                found: digest,
            });
        }
        let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let n = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, n)?)
                .map_err(|_| PredictorError::Format("name is not UTF-8".into()))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            if ndim > 8 {
                return Err(PredictorError::Format(format!("{name}: {ndim} dimensions")));
            }
            let shape = (0..ndim)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()
                .map_err(truncated)?;
            let len: usize = shape.iter().product();
            if len * 4 > r.len() {
                return Err(PredictorError::Format(format!("{name}: truncated data")));
            }
            let data = (0..len)
                .map(|_| r.read_f32::<LittleEndian>())
                .collect::<Result<Vec<_>, _>>()?;
            params.add(&name, Tensor::new(shape, data)?)?;
        }
        if !r.is_empty() {
            return Err(PredictorError::Format(format!(
                "{} trailing bytes",
                r.len()
            )));
        }
        if !params.all_finite() {
            return Err(PredictorError::Format("non-finite weights".into()));
        }
        Self::from_parts(header.config, header.stats, params)
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Decoded `F̂` for each (diffuse, highlight) block pair.
pub fn predict_blocks<T: Scalar>(
    net: &Backbone<T>,
    blocks: &[(&SampleFeatureBlock, &SampleFeatureBlock)],
    phase: &PhaseModel,
    albedo: Rgb,
) -> Result<Vec<Rgb>, PredictorError> {
    let inputs = blocks
        .par_iter()
        .map(|(d, h)| {
            let params =
                ConfigParams::new(phase, albedo, &Vec3::from(d.omega), &Vec3::from(d.light));
            net.encode(d, h, &params)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let y = net.forward(&inputs)?;
    Ok(y.into_iter()
        .map(|y| decode_prediction(y, albedo, net.config.gamma))
        .collect())
}

/// `F̂` at every centre of a precomputed feature table.
pub fn predict_table<T: Scalar>(
    net: &Backbone<T>,
    table: &FeatureTable,
    phase: &PhaseModel,
    albedo: Rgb,
) -> Result<Vec<Rgb>, PredictorError> {
    let pairs: Vec<_> = table.diffuse.iter().zip(&table.highlight).collect();
    predict_blocks(net, &pairs, phase, albedo)
}

/// `F̂` at arbitrary centres, sampling features on the fly.
pub fn predict_field<T: Scalar>(
    net: &Backbone<T>,
    pipeline: &FeaturePipeline,
    centers: &[Center],
    albedo: Rgb,
) -> Result<Vec<Rgb>, PredictorError> {
    let blocks: Vec<[SampleFeatureBlock; 2]> =
        centers.par_iter().map(|c| pipeline.blocks(c)).collect();
    let pairs: Vec<_> = blocks.iter().map(|[d, h]| (d, h)).collect();
    predict_blocks(net, &pairs, &pipeline.phase, albedo)
}

/// Scatter values on a half-resolution node grid, trilinearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField {
    pub layout: VoxelLayout,
    pub values: [Vec<f32>; 3],
}

impl ScatterField for NodeField {
    fn eval(&self, p: &Vec3, _omega: &Vec3) -> Rgb {
        match self.layout.trilinear_taps(p) {
            Some(taps) => std::array::from_fn(|c| {
                taps.iter()
                    .map(|&(i, w)| w * self.values[c][i] as f64)
                    .sum()
            }),
            None => [0.0; 3],
        }
    }
}

/// Node layout at half the grid resolution and the nodes whose neighbourhood
/// holds any density, each with its view direction from `eye`.
pub fn occupied_nodes(medium: &Medium, eye: &Vec3) -> (VoxelLayout, Vec<usize>, Vec<Center>) {
    let grid = medium.layout();
    let dims = grid.dims.map(|d| d.div_ceil(2));
    let layout = VoxelLayout {
        dims,
        voxel_size: grid.voxel_size * 2.0,
        origin: grid.origin,
    };
    let mut occupied = vec![false; layout.voxel_count()];
    for v in medium.grid().nonzero_voxels() {
        let [i, j, k] = grid.coords(v).map(|c| c / 2);
        for dk in -1i64..=1 {
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                    if a >= 0
                        && b >= 0
                        && c >= 0
                        && (a as usize) < dims[0]
                        && (b as usize) < dims[1]
                        && (c as usize) < dims[2]
                    {
                        occupied[layout.index(a as usize, b as usize, c as usize)] = true;
                    }
                }
            }
        }
    }
    let nodes: Vec<usize> = (0..occupied.len()).filter(|&n| occupied[n]).collect();
    let centers = nodes
        .iter()
        .map(|&n| {
            let [i, j, k] = layout.coords(n);
            let p = layout.voxel_center(i, j, k);
            let d = p - eye;
            let omega = if d.norm() > 0.0 {
                d.normalize()
            } else {
                Vec3::z()
            };
            Center {
                p: p.into(),
                omega: omega.into(),
            }
        })
        .collect();
    (layout, nodes, centers)
}

/// Scatters per-node values into a [`NodeField`].
pub fn node_field(layout: VoxelLayout, nodes: &[usize], values: &[Rgb]) -> NodeField {
    let mut channels: [Vec<f32>; 3] = std::array::from_fn(|_| vec![0.0; layout.voxel_count()]);
    for (&n, v) in nodes.iter().zip(values) {
        for c in 0..3 {
            channels[c][n] = v[c] as f32;
        }
    }
    NodeField {
        layout,
        values: channels,
    }
}

/// Marches every pixel with `F̂` predicted on the occupied nodes.
pub fn render_neural<T: Scalar>(
    medium: &Medium,
    pipeline: &FeaturePipeline,
    net: &Backbone<T>,
    camera: &Camera,
    step: f64,
    background: Rgb,
) -> Result<Image, PredictorError> {
    let (layout, nodes, centers) = occupied_nodes(medium, &camera.origin());
    let values = if centers.is_empty() {
        Vec::new()
    } else {
        predict_field(net, pipeline, &centers, medium.albedo())?
    };
    let field = node_field(layout, &nodes, &values);
    Ok(render_with_field(medium, camera, step, background, &field)?)
}
