//! Per-artifact JSON manifests: content digests, input digests and lineage.

use scatterfield_core::digest::file_sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: String,
    pub digest: String,
}

/// Written next to every artifact as `<artifact>.manifest.json`.
///
/// `lineage` maps every upstream artifact kind and config fragment that the
/// artifact depends on to its digest. Two artifacts can only be combined if
/// they agree on every key they share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub artifact: String,
    pub digest: String,
    pub config_digest: String,
    pub inputs: BTreeMap<String, InputRef>,
    pub lineage: BTreeMap<String, String>,
    pub timings: BTreeMap<String, f64>,
    #[serde(default)]
    pub info: serde_json::Value,
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

impl Manifest {
    pub fn load(artifact: &Path) -> Result<Self, CliError> {
        let path = manifest_path(artifact);
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Provenance(format!("no manifest for {}: {e}", artifact.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Provenance(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, artifact: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(manifest_path(artifact), text + "\n")?;
        Ok(())
    }
}

/// Loads the manifest of an upstream artifact and checks that it was made by
/// `stage` and that the file still has the recorded digest.
pub fn verify(artifact: &Path, stage: &str) -> Result<Manifest, CliError> {
    if !artifact.is_file() {
        return Err(CliError::Validation(format!(
            "missing input {} (run `{stage}` first)",
            artifact.display()
        )));
    }
    let m = Manifest::load(artifact)?;
    if m.stage != stage {
        return Err(CliError::Provenance(format!(
            "{} was produced by `{}`, expected `{stage}`",
            artifact.display(),
            m.stage
        )));
    }
    let actual = file_sha256_hex(artifact)?;
    if actual != m.digest {
        return Err(CliError::Provenance(format!(
            "{} has digest {actual}, its manifest records {}",
            artifact.display(),
            m.digest
        )));
    }
    Ok(m)
}

/// Union of lineages; any key with two different digests is a provenance error.
pub fn merge_lineage<'a>(
    parts: impl IntoIterator<Item = &'a BTreeMap<String, String>>,
) -> Result<BTreeMap<String, String>, CliError> {
    let mut out: BTreeMap<String, String> = BTreeMap::new();
    for part in parts {
        for (k, v) in part {
            match out.get(k) {
                Some(existing) if existing != v => {
                    return Err(CliError::Provenance(format!(
                        "inputs disagree on {k}: {} vs {}",
                        short(existing),
                        short(v)
                    )));
                }
                _ => {
                    out.insert(k.clone(), v.clone());
                }
            }
        }
    }
    Ok(out)
}

/// The existing manifest when `artifact` was already built from exactly
/// these inputs and config, and the file is unchanged.
pub fn cached(
    artifact: &Path,
    stage: &str,
    config_digest: &str,
    inputs: &BTreeMap<String, InputRef>,
) -> Option<Manifest> {
    let m = Manifest::load(artifact).ok()?;
    let same_inputs = m.inputs.len() == inputs.len()
        && m.inputs
            .iter()
            .zip(inputs)
            .all(|((ka, a), (kb, b))| ka == kb && a.digest == b.digest);
    if m.stage != stage || m.config_digest != config_digest || !same_inputs {
        return None;
    }
    (file_sha256_hex(artifact).ok()? == m.digest).then_some(m)
}

pub fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lineage(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn lineage_merges_and_conflicts() {
        let a = lineage(&[("medium", "aa"), ("light", "ll")]);
        let b = lineage(&[("medium", "aa"), ("network", "nn")]);
        assert_eq!(merge_lineage([&a, &b]).unwrap().len(), 3);
        let c = lineage(&[("medium", "bb")]);
        assert!(matches!(
            merge_lineage([&a, &c]),
            Err(CliError::Provenance(_))
        ));
    }

    #[test]
    fn verify_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("x.bin");
        std::fs::write(&art, b"payload").unwrap();
        assert!(matches!(verify(&art, "s"), Err(CliError::Provenance(_))));
        let digest = file_sha256_hex(&art).unwrap();
        let inputs: BTreeMap<String, InputRef> = [(
            "up".to_string(),
            InputRef {
                path: "u".into(),
                digest: "d".into(),
            },
        )]
        .into();
        let m = Manifest {
            stage: "s".into(),
            artifact: "x.bin".into(),
            digest,
            config_digest: "c".into(),
            inputs: inputs.clone(),
            lineage: BTreeMap::new(),
            timings: BTreeMap::new(),
            info: serde_json::Value::Null,
        };
        m.save(&art).unwrap();
        assert_eq!(verify(&art, "s").unwrap(), m);
        assert!(matches!(verify(&art, "t"), Err(CliError::Provenance(_))));
        assert!(cached(&art, "s", "c", &inputs).is_some());
        assert!(cached(&art, "s", "other", &inputs).is_none());
        std::fs::write(&art, b"tampered").unwrap();
        assert!(matches!(verify(&art, "s"), Err(CliError::Provenance(_))));
        assert!(cached(&art, "s", "c", &inputs).is_none());
        assert!(matches!(
            verify(&dir.path().join("missing"), "s"),
            Err(CliError::Validation(_))
        ));
    }
}
