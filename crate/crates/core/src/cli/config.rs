//! Run files: JSON documents with a strict schema, environment overrides and
//! an explicit defaults dump.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    load_idx, make_gaussian_shift, make_two_moons_rotated, Dataset, Domain, SyntheticSpec,
};
use crate::engine::TrainConfig;
use crate::error::{Error, Result};

/// Prefix of environment variables that override run-file keys. Nested keys
/// are joined with `__`, e.g. `CLOTH_TRAIN__ALPHA=0.5`.
pub const ENV_PREFIX: &str = "CLOTH_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_log_every() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    GaussianShift(GaussianShiftConfig),
    TwoMoons(TwoMoonsConfig),
    Idx(IdxConfig),
}

/// Synthetic Gaussian shift; every field defaults to the three-class
/// benchmark. `seed` defaults to the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianShiftConfig {
    pub n_per_domain: usize,
    pub class_means: Vec<Vec<f64>>,
    pub covariances: Option<Vec<Vec<Vec<f64>>>>,
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub target_proportions: Vec<f64>,
    pub noise_scale: f64,
    pub seed: Option<u64>,
}

impl Default for GaussianShiftConfig {
    fn default() -> Self {
        let b = SyntheticSpec::three_class_benchmark(0);
        Self {
            n_per_domain: b.n_per_domain,
            class_means: b.class_means,
            covariances: b.covariances,
            rotation_deg: b.rotation_deg,
            translation: b.translation,
            target_proportions: b.target_proportions,
            noise_scale: b.noise_scale,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoMoonsConfig {
    pub n: usize,
    pub angle_deg: f64,
    pub noise: f64,
    pub seed: Option<u64>,
}

impl Default for TwoMoonsConfig {
    fn default() -> Self {
        Self {
            n: 600,
            angle_deg: 30.0,
            noise: 0.1,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub source_images: PathBuf,
    pub source_labels: PathBuf,
    pub target_images: PathBuf,
    pub target_labels: PathBuf,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_limit")]
    pub limit: usize,
}

fn default_side() -> usize {
    8
}

fn default_limit() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Cost gap above which a row counts for the gapped agreement rate.
    pub gap: f64,
    /// Target rows used for the comparison.
    pub max_rows: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            max_iter: 2000,
            gap: 0.1,
            max_rows: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub ps: Vec<usize>,
    pub qs: Vec<u32>,
    pub batch_size: usize,
    pub classes: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ps: vec![8, 16],
            qs: vec![2, 3],
            batch_size: 128,
            classes: 3,
            repeats: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub qs: Vec<u32>,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            qs: vec![1, 2, 3, 4],
            workers: 1,
        }
    }
}

impl RunConfigFile {
    /// Synthetic-benchmark run with every default spelled out.
    pub fn example(seed: u64) -> Self {
        Self {
            seed,
            dataset: DatasetConfig::GaussianShift(GaussianShiftConfig::default()),
            train: TrainConfig::default(),
            out_dir: default_out_dir(),
            log_every: default_log_every(),
            compare: CompareConfig::default(),
            bench: BenchConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// Parses a run file, applies overrides from `env` (pairs of variable
    /// name and value) and validates the result.
    pub fn from_json_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("run file: {e}")))?;
        apply_env_overrides(&mut doc, env)?;
        let cfg: RunConfigFile =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("run file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_with_env(&text, std::env::vars())
    }

    /// Training config with the run-level seed and logging interval copied in.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t.log_every = self.log_every;
        t
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if let DatasetConfig::Idx(c) = &self.dataset {
            if c.side == 0 {
                return Err(Error::Config("dataset.side: must be >= 1".into()));
            }
        }
        if !(self.compare.epsilon > 0.0) {
            return Err(Error::Config("compare.epsilon: must be positive".into()));
        }
        check_q_list(&self.sweep.qs)?;
        Ok(())
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Builds the source and target datasets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::GaussianShift(c) => make_gaussian_shift(&SyntheticSpec {
                num_classes: c.class_means.len(),
                n_per_domain: c.n_per_domain,
                class_means: c.class_means.clone(),
                covariances: c.covariances.clone(),
                rotation_deg: c.rotation_deg,
                translation: c.translation.clone(),
                target_proportions: c.target_proportions.clone(),
                noise_scale: c.noise_scale,
                seed: c.seed.unwrap_or(self.seed),
            })
            .map_err(|e| Error::Config(format!("dataset: {e}"))),
            DatasetConfig::TwoMoons(c) => {
                make_two_moons_rotated(c.n, c.angle_deg, c.noise, c.seed.unwrap_or(self.seed))
                    .map_err(|e| Error::Config(format!("dataset: {e}")))
            }
            DatasetConfig::Idx(c) => {
                let s = load_idx(&c.source_images, &c.source_labels, c.side, c.limit)?;
                let t = load_idx(&c.target_images, &c.target_labels, c.side, c.limit)?;
                let m = s.num_classes().max(t.num_classes());
                Ok((
                    s.with_classes(m, Domain::Source)?,
                    t.with_classes(m, Domain::Target)?,
                ))
            }
        }
    }
}

/// Rejects empty lists, duplicates and orders outside `1..=8`.
pub fn check_q_list(qs: &[u32]) -> Result<()> {
    if qs.is_empty() {
        return Err(Error::Config("q list is empty".into()));
    }
    for (i, q) in qs.iter().enumerate() {
        if !(1..=crate::hmm::MomentOrder::MAX).contains(q) {
            return Err(Error::Config(format!("q = {q} outside 1..=8")));
        }
        if qs[..i].contains(q) {
            return Err(Error::Config(format!("duplicate q = {q}")));
        }
    }
    Ok(())
}

/// Sets `doc[a][b]... = value` for every `CLOTH_A__B...=value`. Values are
/// parsed as JSON when possible and kept as strings otherwise.
pub fn apply_env_overrides<I>(doc: &mut Value, env: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::Config(format!("malformed override variable {key}")));
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let mut node = &mut *doc;
        for (i, part) in path.iter().enumerate() {
            let Value::Object(map) = node else {
                return Err(Error::Config(format!(
                    "{key}: {} is not an object",
                    path[..i].join(".")
                )));
            };
            if i + 1 == path.len() {
                map.insert(part.clone(), value.clone());
                break;
            }
            node = map
                .entry(part.clone())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"seed": 4, "dataset": {"kind": "gaussian_shift"}}"#;

    fn none() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn minimal_file_fills_defaults() {
        let c = RunConfigFile::from_json_with_env(MINIMAL, none()).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.log_every, 100);
        assert_eq!(c.train_config().seed, 4);
        let (s, t) = c.datasets().unwrap();
        assert_eq!((s.len(), t.len()), (1500, 1500));
    }

    #[test]
    fn seed_and_dataset_are_required() {
        assert!(
            RunConfigFile::from_json_with_env(r#"{"dataset": {"kind": "two_moons"}}"#, none())
                .is_err()
        );
        assert!(RunConfigFile::from_json_with_env(r#"{"seed": 1}"#, none()).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"seed": 1, "dataset": {"kind": "two_moons"}, "extra": 1}"#,
            r#"{"seed": 1, "dataset": {"kind": "two_moons", "angel_deg": 3}}"#,
            r#"{"seed": 1, "dataset": {"kind": "two_moons"}, "train": {"aplha": 1}}"#,
            r#"{"seed": 1, "dataset": {"kind": "spirals"}}"#,
        ] {
            let e = RunConfigFile::from_json_with_env(text, none()).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        }
    }

    #[test]
    fn field_errors_name_the_field() {
        let e = RunConfigFile::from_json_with_env(
            r#"{"seed": 1, "dataset": {"kind": "two_moons"}, "train": {"batch_size": 1}}"#,
            none(),
        )
        .unwrap_err();
        assert!(e.to_string().contains("batch_size"), "{e}");
    }

    #[test]
    fn env_overrides_nested_keys() {
        let env = vec![
            ("CLOTH_TRAIN__ALPHA".to_string(), "0.5".to_string()),
            ("CLOTH_SEED".to_string(), "9".to_string()),
            ("CLOTH_OUT_DIR".to_string(), "/tmp/x".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let c = RunConfigFile::from_json_with_env(MINIMAL, env).unwrap();
        assert_eq!(c.train.alpha, 0.5);
        assert_eq!(c.seed, 9);
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
        let bad = vec![("CLOTH_TRAIN__NOPE".to_string(), "1".to_string())];
        assert!(RunConfigFile::from_json_with_env(MINIMAL, bad).is_err());
    }

    #[test]
    fn example_round_trips() {
        let c = RunConfigFile::example(3);
        let text = c.to_pretty_json().unwrap();
        assert_eq!(RunConfigFile::from_json_with_env(&text, none()).unwrap(), c);
    }

    #[test]
    fn q_lists() {
        check_q_list(&[1, 2, 3]).unwrap();
        assert!(check_q_list(&[1, 2, 2]).is_err());
        assert!(check_q_list(&[0]).is_err());
        assert!(check_q_list(&[]).is_err());
        assert!(SweepConfig::default().qs.contains(&3));
    }
}
