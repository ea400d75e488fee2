//! The JSON run configuration. Every field has a default, so `{}` is valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swinpg::data::euvp::{load_euvp_dir, Split};
use swinpg::data::synth::generate_dataset;
use swinpg::data::ImagePair;
use swinpg::generator::ModelConfig;
use swinpg::metrics::report::sha256_hex;
use swinpg::train::adam::AdamConfig;
use swinpg::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Overrides `model.lambda_l1`.
    pub lambda_l1: f32,
    pub batch_size: usize,
    pub epochs: u64,
    /// Overrides `model.seed`; also seeds the simulated training set.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainingConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            lambda_l1: 100.0,
            batch_size: 16,
            epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Simulated,
    Euvp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: Source,
    /// Dataset root for `euvp`, resolved against the config file's directory.
    pub root: Option<PathBuf>,
    /// Simulated pairs per split.
    pub n_pairs: usize,
    /// Defaults to `model.input_size`, which it must equal.
    pub image_size: Option<usize>,
    /// Seed of the held-out simulated set; defaults to `training.seed + 1`.
    pub eval_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: Source::Simulated,
            root: None,
            n_pairs: 64,
            image_size: None,
            eval_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint_path: PathBuf,
    pub report_path: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            checkpoint_path: "checkpoint.swpg".into(),
            report_path: "report.json".into(),
        }
    }
}

/// Generator fields a checkpoint must agree on to be used with a config.
const ARCHITECTURE: [&str; 7] = [
    "input_size",
    "patch_size",
    "embed_dim",
    "depths",
    "heads",
    "window_size",
    "block_kind",
];

impl RunConfig {
    /// Parse strictly, apply the training overrides and validate. Relative
    /// data roots are taken relative to the file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        let mut cfg = RunConfig::parse(&text)?;
        if let Some(root) = &cfg.data.root {
            if root.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                cfg.data.root = Some(base.join(root));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.model.lambda_l1 = cfg.training.lambda_l1;
        cfg.model.seed = cfg.training.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |msg: String| Err(Error::Config(msg));
        let t = &self.training;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return fail(format!("training.lr must be positive, got {}", t.lr));
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2)) {
            return fail(format!(
                "training betas must lie in [0, 1), got {} and {}",
                t.beta1, t.beta2
            ));
        }
        if t.batch_size == 0 {
            return fail("training.batch_size must be positive".into());
        }
        if self.data.n_pairs == 0 {
            return fail("data.n_pairs must be positive".into());
        }
        if let Some(size) = self.data.image_size {
            if size != self.model.input_size {
                return fail(format!(
                    "data.image_size {size} differs from model.input_size {}",
                    self.model.input_size
                ));
            }
        }
        if self.data.source == Source::Euvp && self.data.root.is_none() {
            return fail("data.root is required for the euvp source".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.training.lr,
            beta1: self.training.beta1,
            beta2: self.training.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn image_size(&self) -> usize {
        self.model.input_size
    }

    /// Hash of the effective configuration, recorded in reports.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("configs serialize"))
    }

    pub fn training_pairs(&self) -> Result<Vec<ImagePair>> {
        match self.data.source {
            Source::Simulated => generate_dataset(self.data.n_pairs, self.image_size(), self.training.seed),
            Source::Euvp => self.euvp(Split::Train),
        }
    }

    pub fn evaluation_pairs(&self) -> Result<Vec<ImagePair>> {
        match self.data.source {
            Source::Simulated => {
                let seed = self.data.eval_seed.unwrap_or(self.training.seed.wrapping_add(1));
                generate_dataset(self.data.n_pairs, self.image_size(), seed)
            }
            Source::Euvp => self.euvp(Split::Validation),
        }
    }

    fn euvp(&self, split: Split) -> Result<Vec<ImagePair>> {
        let root = self.data.root.as_deref().expect("validated");
        let pairs = load_euvp_dir(root, split, self.image_size())?;
        if pairs.is_empty() {
            return Err(Error::Config(format!("no image pairs under {}", root.display())));
        }
        Ok(pairs)
    }
}

/// Architecture fields on which `found` (from a checkpoint) differs from
/// `expected`, rendered as `name: expected vs found`.
pub fn architecture_mismatch(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let (e, f) = (
        serde_json::to_value(expected).expect("configs serialize"),
        serde_json::to_value(found).expect("configs serialize"),
    );
    ARCHITECTURE
        .iter()
        .filter(|k| e[**k] != f[**k])
        .map(|k| format!("model.{k}: config {} vs checkpoint {}", e[*k], f[*k]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.training.batch_size, 16);
        assert_eq!(cfg.image_size(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"trainig":{}}"#,
            r#"{"training":{"lr":1e-3,"b1":0.5}}"#,
            r#"{"model":{"depth":[2]}}"#,
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn training_overrides_model() {
        let cfg =
            RunConfig::parse(r#"{"model":{"seed":3,"lambda_l1":1},"training":{"seed":9,"lambda_l1":50}}"#).unwrap();
        assert_eq!((cfg.model.seed, cfg.model.lambda_l1), (9, 50.0));
    }

    #[test]
    fn inconsistent_sizes_fail() {
        assert!(RunConfig::parse(r#"{"data":{"image_size":32}}"#).is_err());
        assert!(RunConfig::parse(r#"{"model":{"input_size":32},"data":{"image_size":32}}"#).is_ok());
        assert!(RunConfig::parse(r#"{"data":{"source":"euvp"}}"#).is_err());
    }

    #[test]
    fn mismatch_names_fields() {
        let a = ModelConfig::desk();
        let b = ModelConfig {
            embed_dim: 16,
            seed: 4,
            ..ModelConfig::desk()
        };
        let m = architecture_mismatch(&a, &b);
        assert_eq!(m, vec!["model.embed_dim: config 32 vs checkpoint 16".to_string()]);
    }
}
