//! One function per pipeline stage. Every stage verifies its inputs against
//! their manifests, skips work when its own manifest already matches, and
//! otherwise writes the artifact followed by a fresh manifest.

use clap::ValueEnum;
use scatterfield_core::camera::{Camera, CameraSpec};
use scatterfield_core::digest::file_sha256_hex;
use scatterfield_core::features::{sample_centers, FeaturePipeline, FeatureTable};
use scatterfield_core::image::{compare_images, Image, ImageMetrics};
use scatterfield_core::phase::VolumePhaseTable;
use scatterfield_core::predictor::{prepare_training, render_neural, train as fit, Backbone};
use scatterfield_core::rte::{
    generate_dataset, render_reference, render_single_scatter, DatasetRequest, DatasetZ,
};
use scatterfield_core::template::{
    generate_diffuse_template, generate_highlight_template, SamplingTemplate,
};
use scatterfield_core::volume::{build_pyramid, DensityGrid};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{digest_of, SceneConfig};
use crate::error::CliError;
use crate::manifest::{cached, merge_lineage, short, verify, InputRef, Manifest};
use crate::media::{generate, MediumKind};
use crate::pyramid_file;

pub const GEN_MEDIUM: &str = "gen-medium";
pub const BUILD_PYRAMID: &str = "build-pyramid";
pub const GEN_TEMPLATE: &str = "gen-template";
pub const PRECOMPUTE: &str = "precompute";
pub const GEN_DATASET: &str = "gen-dataset";
pub const TRAIN: &str = "train";
pub const RENDER: &str = "render";

/// Length of the light segment the highlight template is generated for; the
/// template is rescaled to the actual segment at placement.
const HIGHLIGHT_REFERENCE_LENGTH: f64 = 1.0;

/// Lineage keys two renders must share before they can be compared.
const COMPARE_KEYS: [&str; 4] = ["medium", "optics", "light", "camera"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RenderMode {
    /// Monte Carlo path tracing.
    Reference,
    /// Ray march with direct light only.
    SingleScatter,
    /// Ray march with the network's in-scattering prediction.
    Neural,
}

impl RenderMode {
    pub fn name(self) -> &'static str {
        match self {
            RenderMode::Reference => "reference",
            RenderMode::SingleScatter => "single-scatter",
            RenderMode::Neural => "neural",
        }
    }
}

/// Working directory plus the scene configuration.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub dir: PathBuf,
    pub config: SceneConfig,
    /// Rebuild even when the manifest says the artifact is current.
    pub force: bool,
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Built(Manifest),
    Cached(Manifest),
}

impl Outcome {
    pub fn manifest(&self) -> &Manifest {
        match self {
            Outcome::Built(m) | Outcome::Cached(m) => m,
        }
    }

    pub fn is_cached(&self) -> bool {
        matches!(self, Outcome::Cached(_))
    }

    pub fn summary(&self) -> String {
        let m = self.manifest();
        match self {
            Outcome::Built(_) => format!(
                "{}: wrote {} ({}) in {:.2}s",
                m.stage,
                m.artifact,
                short(&m.digest),
                m.timings.get("total").copied().unwrap_or(0.0)
            ),
            Outcome::Cached(_) => format!(
                "{}: {} is up to date ({})",
                m.stage,
                m.artifact,
                short(&m.digest)
            ),
        }
    }
}

/// Inputs and identity of one stage run.
struct Job {
    stage: &'static str,
    artifact: PathBuf,
    config_digest: String,
    inputs: BTreeMap<String, InputRef>,
    lineage: BTreeMap<String, String>,
}

impl Job {
    fn new(stage: &'static str, artifact: PathBuf, config_digest: String) -> Self {
        Self {
            stage,
            artifact,
            config_digest,
            inputs: BTreeMap::new(),
            lineage: BTreeMap::new(),
        }
    }

    fn input(&mut self, name: &str, path: &Path, m: &Manifest) -> Result<(), CliError> {
        self.inputs.insert(
            name.into(),
            InputRef {
                path: path.display().to_string(),
                digest: m.digest.clone(),
            },
        );
        self.lineage = merge_lineage([&self.lineage, &m.lineage])?;
        Ok(())
    }

    fn tag(&mut self, key: &str, digest: String) -> Result<(), CliError> {
        let extra = BTreeMap::from([(key.to_string(), digest)]);
        self.lineage = merge_lineage([&self.lineage, &extra])?;
        Ok(())
    }

    fn cached(&self, ws: &Workspace) -> Option<Outcome> {
        if ws.force {
            return None;
        }
        cached(
            &self.artifact,
            self.stage,
            &self.config_digest,
            &self.inputs,
        )
        .map(Outcome::Cached)
    }

    fn finish(
        self,
        key: &str,
        mut timings: BTreeMap<String, f64>,
        started: Instant,
        info: serde_json::Value,
    ) -> Result<Outcome, CliError> {
        let digest = file_sha256_hex(&self.artifact)?;
        let mut lineage = self.lineage;
        lineage.insert(key.into(), digest.clone());
        timings.insert("total".into(), started.elapsed().as_secs_f64());
        let m = Manifest {
            stage: self.stage.into(),
            artifact: self
                .artifact
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            digest,
            config_digest: self.config_digest,
            inputs: self.inputs,
            lineage,
            timings,
            info,
        };
        m.save(&self.artifact)?;
        Ok(Outcome::Built(m))
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>, config: SceneConfig) -> Self {
        Self {
            dir: dir.into(),
            config,
            force: false,
        }
    }

    pub fn path(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.dir.join(rel)
        }
    }

    pub fn medium_path(&self) -> PathBuf {
        self.path(&self.config.paths.medium)
    }

    pub fn pyramid_path(&self) -> PathBuf {
        self.path(&self.config.paths.pyramid)
    }

    pub fn template_paths(&self) -> (PathBuf, PathBuf) {
        (
            self.path(&self.config.paths.diffuse_template),
            self.path(&self.config.paths.highlight_template),
        )
    }

    pub fn features_path(&self) -> PathBuf {
        self.path(&self.config.paths.features)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.path(&self.config.paths.dataset)
    }

    pub fn network_path(&self) -> PathBuf {
        self.path(&self.config.paths.network)
    }

    pub fn render_path(&self, mode: RenderMode) -> PathBuf {
        self.path(&self.config.paths.renders)
            .join(format!("{}.pfm", mode.name()))
    }

    /// A medium made by `gen-medium` is verified against its manifest; a
    /// hand-supplied grid without one is taken as a root input.
    fn medium_manifest(&self) -> Result<Manifest, CliError> {
        let path = self.medium_path();
        if !path.is_file() {
            return Err(CliError::Validation(format!(
                "missing medium {} (run `gen-medium` or point paths.medium at a .vgrid)",
                path.display()
            )));
        }
        if crate::manifest::manifest_path(&path).is_file() {
            return verify(&path, GEN_MEDIUM);
        }
        let digest = file_sha256_hex(&path)?;
        Ok(Manifest {
            stage: "external".into(),
            artifact: path.display().to_string(),
            digest: digest.clone(),
            config_digest: String::new(),
            inputs: BTreeMap::new(),
            lineage: BTreeMap::from([("medium".to_string(), digest)]),
            timings: BTreeMap::new(),
            info: serde_json::Value::Null,
        })
    }

    fn load_medium(&self) -> Result<scatterfield_core::medium::Medium, CliError> {
        self.config.medium(DensityGrid::load(&self.medium_path())?)
    }

    fn tag_optics(&self, job: &mut Job) -> Result<(), CliError> {
        job.tag("optics", self.config.optics_digest()?)?;
        job.tag("light", self.config.light_digest())
    }
}

pub fn gen_medium(
    ws: &Workspace,
    kind: MediumKind,
    dims: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let artifact = out.map(|p| ws.path(&p)).unwrap_or_else(|| ws.medium_path());
    let job = Job::new(GEN_MEDIUM, artifact, digest_of(&(kind, dims, seed)));
    if let Some(hit) = job.cached(ws) {
        return Ok(hit);
    }
    let grid = generate(kind, dims, seed)?;
    ensure_parent(&job.artifact)?;
    grid.save(&job.artifact)?;
    let info = json!({
        "kind": kind,
        "dims": dims,
        "seed": seed,
        "occupied_voxels": grid.nonzero_voxels().len(),
    });
    job.finish("medium", BTreeMap::new(), started, info)
}

pub fn build_pyramid_stage(ws: &Workspace) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let mut job = Job::new(BUILD_PYRAMID, ws.pyramid_path(), digest_of(&BUILD_PYRAMID));
    job.input("medium", &ws.medium_path(), &ws.medium_manifest()?)?;
    if let Some(hit) = job.cached(ws) {
        return Ok(hit);
    }
    let pyramid = build_pyramid(&DensityGrid::load(&ws.medium_path())?)?;
    ensure_parent(&job.artifact)?;
    pyramid_file::save(&pyramid, &job.artifact)?;
    let info = json!({ "levels": pyramid.len() });
    job.finish("pyramid", BTreeMap::new(), started, info)
}

/// Writes both templates; returns (diffuse, highlight).
pub fn gen_template(ws: &Workspace) -> Result<(Outcome, Outcome), CliError> {
    let t = &ws.config.templates;
    let (dpath, hpath) = ws.template_paths();
    let build = |kind: &str, path: PathBuf| -> Result<Outcome, CliError> {
        let started = Instant::now();
        let job = Job::new(GEN_TEMPLATE, path, digest_of(&(kind, t)));
        if let Some(hit) = job.cached(ws) {
            return Ok(hit);
        }
        let template = if kind == "diffuse" {
            generate_diffuse_template(&t.diffuse_counts, t.seed)?
        } else {
            generate_highlight_template(
                &t.highlight_counts,
                HIGHLIGHT_REFERENCE_LENGTH,
                t.cone_half_angle_deg.to_radians(),
                t.seed,
            )?
        };
        ensure_parent(&job.artifact)?;
        template.save(&job.artifact)?;
        let info = json!({ "kind": kind, "layer_sizes": template.layer_sizes() });
        job.finish(&format!("{kind}_template"), BTreeMap::new(), started, info)
    };
    Ok((build("diffuse", dpath)?, build("highlight", hpath)?))
}

fn load_templates(ws: &Workspace) -> Result<(SamplingTemplate, SamplingTemplate), CliError> {
    let (dpath, hpath) = ws.template_paths();
    let d = SamplingTemplate::load(&dpath)?;
    let h = SamplingTemplate::load(&hpath)?;
    let t = &ws.config.templates;
    if d.counts != t.diffuse_counts || h.counts != t.highlight_counts {
        return Err(CliError::Provenance(format!(
            "templates have counts {:?}/{:?}, config asks for {:?}/{:?}; rerun gen-template",
            d.counts, h.counts, t.diffuse_counts, t.highlight_counts
        )));
    }
    Ok((d, h))
}

pub fn precompute(ws: &Workspace) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let cfg = &ws.config;
    let (dpath, hpath) = ws.template_paths();
    let feature_config = cfg.feature_config();
    let mut job = Job::new(
        PRECOMPUTE,
        ws.features_path(),
        digest_of(&(&cfg.features, feature_config, cfg.phase()?)),
    );
    job.input(
        "pyramid",
        &ws.pyramid_path(),
        &verify(&ws.pyramid_path(), BUILD_PYRAMID)?,
    )?;
    job.input("diffuse_template", &dpath, &verify(&dpath, GEN_TEMPLATE)?)?;
    job.input("highlight_template", &hpath, &verify(&hpath, GEN_TEMPLATE)?)?;
    ws.tag_optics(&mut job)?;
    if let Some(hit) = job.cached(ws) {
        return Ok(hit);
    }
    let mut timings = BTreeMap::new();
    let pyramid = pyramid_file::load(&ws.pyramid_path())?;
    let (diffuse, highlight) = load_templates(ws)?;
    let t = Instant::now();
    let table = VolumePhaseTable::build();
    timings.insert("phase_table".into(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let pipeline = FeaturePipeline::build(
        &pyramid,
        cfg.phase()?,
        table,
        diffuse,
        highlight,
        &cfg.light()?.direction(),
        feature_config,
        None,
    )?;
    timings.insert("graded_fields".into(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let centers = sample_centers(&pipeline.grid, cfg.features.centers, cfg.features.seed)?;
    let features = pipeline.precompute(&centers)?;
    timings.insert("sampling".into(), t.elapsed().as_secs_f64());
    ensure_parent(&job.artifact)?;
    features.save(&job.artifact)?;
    let info = json!({ "centers": features.len(), "levels": pipeline.volume.combiner.levels() });
    job.finish("features", timings, started, info)
}

pub fn gen_dataset(ws: &Workspace) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let cfg = &ws.config;
    let mut job = Job::new(
        GEN_DATASET,
        ws.dataset_path(),
        digest_of(&(&cfg.dataset, cfg.optics_digest()?, cfg.light_digest())),
    );
    let medium_manifest = ws.medium_manifest()?;
    job.input("medium", &ws.medium_path(), &medium_manifest)?;
    job.input(
        "features",
        &ws.features_path(),
        &verify(&ws.features_path(), PRECOMPUTE)?,
    )?;
    ws.tag_optics(&mut job)?;
    if let Some(hit) = job.cached(ws) {
        return Ok(hit);
    }
    let medium = ws.load_medium()?;
    let table = FeatureTable::load(&ws.features_path())?;
    let req = DatasetRequest {
        medium_id: medium_manifest.digest.clone(),
        config_digest: job.config_digest.clone(),
        spp: cfg.dataset.spp,
        trace: cfg.trace(),
        seed: cfg.dataset.seed,
        stderr_ceiling: cfg.dataset.stderr_ceiling,
    };
    let data = generate_dataset(&medium, &cfg.light()?, &table, &req)?;
    if let Some(e) = data
        .entries
        .iter()
        .find(|e| e.label.f.iter().any(|v| !v.is_finite()))
    {
        return Err(CliError::Numeric(format!(
            "non-finite label at centre {:?}",
            e.label.p
        )));
    }
    ensure_parent(&job.artifact)?;
    data.save(&job.artifact)?;
    let info = json!({
        "entries": data.len(),
        "flagged": data.manifest.flagged.len(),
        "spp": cfg.dataset.spp,
    });
    job.finish("dataset", BTreeMap::new(), started, info)
}

pub fn train(ws: &Workspace) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let cfg = &ws.config;
    let backbone = cfg.backbone();
    let mut job = Job::new(TRAIN, ws.network_path(), digest_of(&(&backbone, cfg.train)));
    job.input(
        "dataset",
        &ws.dataset_path(),
        &verify(&ws.dataset_path(), GEN_DATASET)?,
    )?;
    let curve_path = ws.path(&cfg.paths.loss_curve);
    if curve_path.is_file() {
        if let Some(hit) = job.cached(ws) {
            return Ok(hit);
        }
    }
    let data = DatasetZ::load(&ws.dataset_path())?;
    let (mut net, examples, n_train) = prepare_training(backbone, &data, &cfg.train)?;
    let report = fit(&mut net, &examples, n_train, &cfg.train)?;
    ensure_parent(&job.artifact)?;
    net.save(&job.artifact)?;
    ensure_parent(&curve_path)?;
    std::fs::write(&curve_path, report.to_csv())?;
    let info = json!({
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "reduction": 1.0 - report.final_loss / report.initial_loss,
        "train_size": report.train_size,
        "val_size": report.val_size,
        "parameters": net.params().scalar_count(),
        "loss_curve": curve_path.display().to_string(),
    });
    job.finish("network", BTreeMap::new(), started, info)
}

/// Per-invocation overrides of the configured view.
#[derive(Debug, Clone, Default)]
pub struct RenderOptions {
    pub camera: Option<CameraSpec>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub spp: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn render(ws: &Workspace, mode: RenderMode, opts: &RenderOptions) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let cfg = &ws.config;
    let mut spec = opts.camera.clone().unwrap_or_else(|| cfg.camera.clone());
    spec.width = opts.width.unwrap_or(spec.width);
    spec.height = opts.height.unwrap_or(spec.height);
    let camera = Camera::new(spec.clone()).map_err(|e| CliError::Validation(e.to_string()))?;
    let spp = opts.spp.unwrap_or(cfg.render.reference_spp);
    if spp == 0 {
        return Err(CliError::Validation("spp must be positive".into()));
    }
    let artifact = opts
        .out
        .as_ref()
        .map(|p| ws.path(p))
        .unwrap_or_else(|| ws.render_path(mode));
    let config_digest = match mode {
        RenderMode::Reference => {
            digest_of(&(mode, cfg.background, cfg.render.seed, spp, cfg.trace()))
        }
        _ => digest_of(&(mode, cfg.background, cfg.render.step)),
    };
    let mut job = Job::new(RENDER, artifact, config_digest);
    job.input("medium", &ws.medium_path(), &ws.medium_manifest()?)?;
    let (dpath, hpath) = ws.template_paths();
    if mode == RenderMode::Neural {
        job.input(
            "pyramid",
            &ws.pyramid_path(),
            &verify(&ws.pyramid_path(), BUILD_PYRAMID)?,
        )?;
        job.input("diffuse_template", &dpath, &verify(&dpath, GEN_TEMPLATE)?)?;
        job.input("highlight_template", &hpath, &verify(&hpath, GEN_TEMPLATE)?)?;
        job.input(
            "features",
            &ws.features_path(),
            &verify(&ws.features_path(), PRECOMPUTE)?,
        )?;
        job.input(
            "network",
            &ws.network_path(),
            &verify(&ws.network_path(), TRAIN)?,
        )?;
    }
    ws.tag_optics(&mut job)?;
    job.tag("camera", digest_of(&spec))?;
    if let Some(hit) = job.cached(ws) {
        return Ok(hit);
    }
    let medium = ws.load_medium()?;
    let light = cfg.light()?;
    let step = cfg.render.step.unwrap_or(medium.grid().default_step());
    let mut timings = BTreeMap::new();
    let image = match mode {
        RenderMode::Reference => render_reference(
            &medium,
            &light,
            &camera,
            spp,
            &cfg.trace(),
            cfg.background,
            cfg.render.seed,
        )?,
        RenderMode::SingleScatter => {
            render_single_scatter(&medium, &light, &camera, step, cfg.background)?
        }
        RenderMode::Neural => {
            let t = Instant::now();
            let pyramid = pyramid_file::load(&ws.pyramid_path())?;
            let (diffuse, highlight) = load_templates(ws)?;
            let table = FeatureTable::load(&ws.features_path())?;
            let net = Backbone::<f32>::load(&ws.network_path())?;
            timings.insert("load".into(), t.elapsed().as_secs_f64());
            let t = Instant::now();
            let pipeline = FeaturePipeline::build(
                &pyramid,
                cfg.phase()?,
                table.phase_table,
                diffuse,
                highlight,
                &light.direction(),
                table.config,
                Some(table.combiner),
            )?;
            timings.insert("graded_fields".into(), t.elapsed().as_secs_f64());
            let t = Instant::now();
            let image = render_neural(&medium, &pipeline, &net, &camera, step, cfg.background)?;
            timings.insert("predict_and_march".into(), t.elapsed().as_secs_f64());
            image
        }
    };
    if image.pixels.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::Numeric(format!(
            "{} render produced non-finite radiance",
            mode.name()
        )));
    }
    ensure_parent(&job.artifact)?;
    image.save_pfm(&job.artifact)?;
    image.save_ppm(&job.artifact.with_extension("ppm"))?;
    let info = json!({
        "mode": mode,
        "width": spec.width,
        "height": spec.height,
        "spp": if mode == RenderMode::Reference { Some(spp) } else { None },
        "step": if mode == RenderMode::Reference { None } else { Some(step) },
    });
    job.finish("image", timings, started, info)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub digest: String,
    pub mode: serde_json::Value,
    pub render_seconds: f64,
}

/// Error of a test render against a reference render, on linear radiance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub test: ImageRef,
    pub reference: ImageRef,
    #[serde(flatten)]
    pub metrics: ImageMetrics,
    pub width: usize,
    pub height: usize,
}

impl CompareReport {
    pub fn table(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        s.push_str(&format!("{:<22}{}\n", "test", self.test.path));
        s.push_str(&format!("{:<22}{}\n", "reference", self.reference.path));
        s.push_str(&format!(
            "{:<22}{}x{}\n",
            "resolution", self.width, self.height
        ));
        s.push_str(&format!("{:<22}{:.6}\n", "relative rmse", m.relative_rmse));
        s.push_str(&format!(
            "{:<22}{:.6} {:.6} {:.6}\n",
            "mean abs error (rgb)", m.mean_abs_error[0], m.mean_abs_error[1], m.mean_abs_error[2]
        ));
        s.push_str(&format!("{:<22}{:.6}\n", "max abs error", m.max_abs_error));
        s.push_str(&format!(
            "{:<22}{:.3}s\n",
            "test render time", self.test.render_seconds
        ));
        s.push_str(&format!(
            "{:<22}{:.3}s\n",
            "reference time", self.reference.render_seconds
        ));
        s
    }
}

/// Compares `test` against `reference`; both must be renders of the same
/// medium, optics, light and camera.
pub fn compare(
    ws: &Workspace,
    test: &Path,
    reference: &Path,
    out: Option<PathBuf>,
) -> Result<CompareReport, CliError> {
    let (tp, rp) = (ws.path(test), ws.path(reference));
    let (mt, mr) = (verify(&tp, RENDER)?, verify(&rp, RENDER)?);
    for key in COMPARE_KEYS {
        if !(mt.lineage.contains_key(key) && mr.lineage.contains_key(key)) {
            return Err(CliError::Provenance(format!(
                "a render manifest lacks the {key} digest"
            )));
        }
    }
    for (key, a) in &mt.lineage {
        match mr.lineage.get(key) {
            Some(b) if key != "image" && a != b => {
                return Err(CliError::Provenance(format!(
                    "renders differ in {key}: {} vs {}",
                    short(a),
                    short(b)
                )))
            }
            _ => {}
        }
    }
    let (a, b) = (Image::load_pfm(&tp)?, Image::load_pfm(&rp)?);
    let metrics = compare_images(&a, &b)?;
    let image_ref = |path: &Path, m: &Manifest| ImageRef {
        path: path.display().to_string(),
        digest: m.digest.clone(),
        mode: m.info.get("mode").cloned().unwrap_or_default(),
        render_seconds: m.timings.get("total").copied().unwrap_or(0.0),
    };
    let report = CompareReport {
        test: image_ref(&tp, &mt),
        reference: image_ref(&rp, &mr),
        metrics,
        width: a.width,
        height: a.height,
    };
    let out = out
        .map(|p| ws.path(&p))
        .unwrap_or_else(|| ws.dir.join("compare.json"));
    ensure_parent(&out)?;
    std::fs::write(
        &out,
        serde_json::to_string_pretty(&report).expect("report serialises") + "\n",
    )?;
    Ok(report)
}
