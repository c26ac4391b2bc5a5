//! Scene configuration file.

use scatterfield_core::camera::CameraSpec;
use scatterfield_core::digest::sha256_hex;
use scatterfield_core::features::{FeatureConfig, DEFAULT_LAMBDA, MAX_LEVELS};
use scatterfield_core::medium::{DistantLight, Medium};
use scatterfield_core::phase::PhaseModel;
use scatterfield_core::predictor::{AttentionKind, BackboneConfig, TrainConfig, DEFAULT_GAMMA};
use scatterfield_core::rte::{TraceConfig, DEFAULT_MAX_DEPTH, RUSSIAN_ROULETTE_DEPTH};
use scatterfield_core::template::{
    DEFAULT_CONE_HALF_ANGLE, DEFAULT_DIFFUSE_COUNTS, DEFAULT_HIGHLIGHT_COUNTS,
};
use scatterfield_core::volume::{DensityGrid, MaterialClass, MediumProperties};
use scatterfield_core::{Rgb, Vec3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub medium: MediumConfig,
    pub light: LightConfig,
    pub camera: CameraSpec,
    pub background: Rgb,
    pub templates: TemplateConfig,
    pub features: FeaturesConfig,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub paths: PathsConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            medium: MediumConfig::default(),
            light: LightConfig::default(),
            camera: CameraSpec {
                position: [0.5, 0.6, -1.6],
                look_at: [0.5, 0.5, 0.5],
                up: [0.0, 1.0, 0.0],
                vfov_deg: 40.0,
                width: 64,
                height: 64,
            },
            background: [0.0; 3],
            templates: TemplateConfig::default(),
            features: FeaturesConfig::default(),
            dataset: DatasetConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig {
                seed: 1,
                ..TrainConfig::default()
            },
            render: RenderConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Density file plus the homogeneous optics laid over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MediumConfig {
    pub sigma_t_scale: [f64; 3],
    pub albedo: [f64; 3],
    pub material_class: MaterialClass,
    /// Defaults to the preset of the material class.
    pub phase: Option<PhaseModel>,
}

impl Default for MediumConfig {
    fn default() -> Self {
        Self {
            sigma_t_scale: [20.0; 3],
            albedo: [0.9; 3],
            material_class: MaterialClass::SolidLiquid,
            phase: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightConfig {
    /// Travel direction of the light.
    pub direction: [f64; 3],
    pub intensity: Rgb,
}

impl Default for LightConfig {
    fn default() -> Self {
        Self {
            direction: [0.3, -1.0, 0.2],
            intensity: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub diffuse_counts: Vec<usize>,
    pub highlight_counts: Vec<usize>,
    pub seed: u64,
    pub cone_half_angle_deg: f64,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            diffuse_counts: DEFAULT_DIFFUSE_COUNTS.to_vec(),
            highlight_counts: DEFAULT_HIGHLIGHT_COUNTS.to_vec(),
            seed: 1,
            cone_half_angle_deg: DEFAULT_CONE_HALF_ANGLE.to_degrees(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesConfig {
    pub centers: usize,
    pub seed: u64,
    pub lambda: f64,
    pub template_scale: f64,
    /// Extinction per unit density in the graded fields; defaults to the
    /// channel mean of `medium.sigma_t_scale`.
    pub extinction_scale: Option<f64>,
    pub max_levels: usize,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        Self {
            centers: 512,
            seed: 1,
            lambda: DEFAULT_LAMBDA,
            template_scale: 1.0,
            extinction_scale: None,
            max_levels: MAX_LEVELS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub spp: usize,
    pub seed: u64,
    pub max_depth: usize,
    pub rr_depth: usize,
    pub stderr_ceiling: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            spp: 256,
            seed: 1,
            max_depth: DEFAULT_MAX_DEPTH,
            rr_depth: RUSSIAN_ROULETTE_DEPTH,
            stderr_ceiling: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub merge: usize,
    pub head: usize,
    pub gamma: f64,
    pub attention: AttentionKind,
    pub cfg_every_layer: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let b = BackboneConfig::new(Vec::new(), Vec::new());
        Self {
            hidden: b.hidden,
            merge: b.merge,
            head: b.head,
            gamma: DEFAULT_GAMMA,
            attention: b.attention,
            cfg_every_layer: b.cfg_every_layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub reference_spp: usize,
    pub seed: u64,
    /// March step for the single-scatter and neural modes; defaults to half a voxel.
    pub step: Option<f64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            reference_spp: 1024,
            seed: 1,
            step: None,
        }
    }
}

/// Artifact locations, relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub medium: PathBuf,
    pub pyramid: PathBuf,
    pub diffuse_template: PathBuf,
    pub highlight_template: PathBuf,
    pub features: PathBuf,
    pub dataset: PathBuf,
    pub network: PathBuf,
    pub loss_curve: PathBuf,
    pub renders: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            medium: "medium.vgrid".into(),
            pyramid: "medium.vpyr".into(),
            diffuse_template: "diffuse.vtmpl".into(),
            highlight_template: "highlight.vtmpl".into(),
            features: "features.vfeat".into(),
            dataset: "dataset.vdata".into(),
            network: "model.vnet".into(),
            loss_curve: "loss.csv".into(),
            renders: "renders".into(),
        }
    }
}

/// Canonical digest of any serialisable config fragment.
pub fn digest_of(value: &impl Serialize) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config values serialise"))
}

impl SceneConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.properties()?;
        self.phase()?;
        self.light()?;
        let f = &self.features;
        if f.centers == 0 {
            return Err(CliError::Validation(
                "features.centers must be positive".into(),
            ));
        }
        if !(f.lambda > 0.0 && f.lambda < 1.0) {
            return Err(CliError::Validation(format!(
                "features.lambda {} outside (0, 1)",
                f.lambda
            )));
        }
        if !(f.template_scale > 0.0 && f.template_scale.is_finite()) {
            return Err(CliError::Validation(
                "features.template_scale must be positive".into(),
            ));
        }
        if self.dataset.spp == 0 || self.render.reference_spp == 0 {
            return Err(CliError::Validation(
                "sample counts must be positive".into(),
            ));
        }
        if let Some(step) = self.render.step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(CliError::Validation(format!(
                    "render.step {step} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn properties(&self) -> Result<MediumProperties, CliError> {
        let m = &self.medium;
        MediumProperties::new(m.sigma_t_scale, m.albedo, m.material_class)
            .map_err(|e| CliError::Validation(format!("medium: {e}")))
    }

    pub fn phase(&self) -> Result<PhaseModel, CliError> {
        let phase = match &self.medium.phase {
            Some(p) => p.clone(),
            None => match self.medium.material_class {
                MaterialClass::Air => PhaseModel::hg(0.0).expect("valid asymmetry"),
                MaterialClass::Gas => PhaseModel::hg(0.857).expect("valid asymmetry"),
                MaterialClass::SolidLiquid => PhaseModel::solid_liquid_preset(),
                MaterialClass::Skin => PhaseModel::skin_preset(),
            },
        };
        let want = self.medium.material_class.lobe_count();
        if phase.lobes().len() != want {
            return Err(CliError::Validation(format!(
                "{:?} media take {want} phase lobes, got {}",
                self.medium.material_class,
                phase.lobes().len()
            )));
        }
        Ok(phase)
    }

    pub fn light(&self) -> Result<DistantLight, CliError> {
        DistantLight::new(Vec3::from(self.light.direction), self.light.intensity)
            .map_err(|e| CliError::Validation(format!("light: {e}")))
    }

    pub fn medium(&self, grid: DensityGrid) -> Result<Medium, CliError> {
        Medium::from_properties(grid, &self.properties()?, self.phase()?)
            .map_err(|e| CliError::Validation(format!("medium: {e}")))
    }

    pub fn feature_config(&self) -> FeatureConfig {
        let f = &self.features;
        let s = self.medium.sigma_t_scale;
        FeatureConfig {
            lambda: f.lambda,
            template_scale: f.template_scale,
            extinction_scale: f.extinction_scale.unwrap_or((s[0] + s[1] + s[2]) / 3.0),
            max_levels: f.max_levels,
        }
    }

    pub fn trace(&self) -> TraceConfig {
        TraceConfig {
            max_depth: self.dataset.max_depth,
            rr_depth: self.dataset.rr_depth,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        let n = &self.network;
        BackboneConfig {
            hidden: n.hidden,
            merge: n.merge,
            head: n.head,
            gamma: n.gamma,
            attention: n.attention,
            cfg_every_layer: n.cfg_every_layer,
            ..BackboneConfig::new(
                self.templates.diffuse_counts.clone(),
                self.templates.highlight_counts.clone(),
            )
        }
    }

    /// Digest of the optical description (extinction, albedo, class, phase).
    pub fn optics_digest(&self) -> Result<String, CliError> {
        Ok(digest_of(&(self.properties()?, self.phase()?)))
    }

    pub fn light_digest(&self) -> String {
        digest_of(&self.light)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = SceneConfig::default();
        cfg.validate().unwrap();
        let back: SceneConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let partial: SceneConfig =
            serde_json::from_str(r#"{"background": [0.1, 0.1, 0.1]}"#).unwrap();
        assert_eq!(partial.features, cfg.features);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = SceneConfig::default();
        cfg.medium.albedo = [0.1; 3];
        assert!(matches!(cfg.validate(), Err(CliError::Validation(_))));
        let mut cfg = SceneConfig::default();
        cfg.medium.phase = Some(PhaseModel::hg(0.3).unwrap());
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<SceneConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn extinction_defaults_to_channel_mean() {
        let mut cfg = SceneConfig::default();
        cfg.medium.sigma_t_scale = [10.0, 20.0, 30.0];
        assert_eq!(cfg.feature_config().extinction_scale, 20.0);
        cfg.features.extinction_scale = Some(4.0);
        assert_eq!(cfg.feature_config().extinction_scale, 4.0);
    }
}
