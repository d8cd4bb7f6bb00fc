use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tcpl::corpus::{GeneratorConfig, SplitMode};
use tcpl::{LossVariant, TcplConfig};

use crate::error::{CliError, ConfigError};

/// Where the training tracklets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Generate a synthetic corpus from `corpus_seed`.
    Synthetic(GeneratorConfig),
    /// Read JSON-lines files; relative paths resolve against the config file's directory.
    Files {
        corpus: PathBuf,
        #[serde(default)]
        eval_split: Option<PathBuf>,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(GeneratorConfig::default())
    }
}

/// One experiment: data, split protocol, hyperparameters, seeds and output location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub split: SplitMode,
    pub corpus_seed: u64,
    /// Hyperparameters; `training.seed` drives the labeled split, initialisation and sampling.
    pub training: TcplConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::default(),
            split: SplitMode::OneShot,
            corpus_seed: 0,
            training: TcplConfig::default(),
            output_dir: None,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    /// Replaces both `corpus_seed` and `training.seed`.
    pub seed: Option<u64>,
    pub variant: Option<LossVariant>,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.output_dir = Some(out.clone());
        }
        if let Some(seed) = o.seed {
            self.corpus_seed = seed;
            self.training.seed = seed;
        }
        if let Some(v) = o.variant {
            self.training.variant = v;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let CorpusSource::Synthetic(g) = &self.corpus {
            check_generator(g)?;
        }
        if let SplitMode::Fraction { q } = self.split {
            if !(q > 0.0 && q <= 1.0) {
                return Err(ConfigError::new("split.q", format!("{q} must lie in (0, 1]")));
            }
        }
        self.training
            .check()
            .map_err(|(key, msg)| ConfigError::new(format!("training.{key}"), msg))
    }

    pub fn output_dir(&self) -> Result<&Path, ConfigError> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| ConfigError::new("output_dir", "no output directory given (set it or pass --out)"))
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let CorpusSource::Files { corpus, eval_split } = &mut self.corpus {
            *corpus = base.join(&*corpus);
            if let Some(split) = eval_split {
                *split = base.join(&*split);
            }
        }
    }
}

fn check_generator(g: &GeneratorConfig) -> Result<(), ConfigError> {
    let sigmas = [
        ("sigma_identity", g.sigma_identity),
        ("sigma_camera", g.sigma_camera),
        ("sigma_drift", g.sigma_drift),
        ("sigma_noise", g.sigma_noise),
    ];
    for (name, s) in sigmas {
        if !s.is_finite() || s < 0.0 {
            return Err(ConfigError::new(format!("corpus.synthetic.{name}"), "noise must be ≥ 0"));
        }
    }
    g.validate().map_err(|e| {
        let msg = match e {
            tcpl::CorpusError::InvalidConfig(m) => m,
            other => other.to_string(),
        };
        let field = msg.split_whitespace().next().unwrap_or_default();
        ConfigError::new(format!("corpus.synthetic.{field}"), msg)
    })
}

/// Parses and validates a JSON config; every failure names the offending key.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        ConfigError::new(key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path`, applies `overrides`, resolves corpus paths and validates.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = parse_config(&text)?;
    cfg.apply(overrides);
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn arbitrary_text_never_panics(text in "\\PC{0,64}") {
            let _ = parse_config(&text);
        }

        #[test]
        fn arbitrary_training_values_are_keyed(
            key in prop::sample::select(vec!["lambda", "rho", "rank", "batch_size", "momentum", "tau", "seed", "variant"]),
            value in prop_oneof![
                any::<f64>().prop_map(|v| serde_json::json!(v)),
                any::<i64>().prop_map(|v| serde_json::json!(v)),
                "[a-z-]{0,8}".prop_map(|v| serde_json::json!(v)),
                Just(serde_json::json!(null)),
            ],
        ) {
            let text = serde_json::json!({ "training": { key: value } }).to_string();
            if let Err(e) = parse_config(&text) {
                prop_assert_eq!(e.key, format!("training.{key}"));
            }
        }
    }

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(parse_config("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = parse_config(r#"{"training": {"lamda": 1}}"#).unwrap_err();
        assert_eq!(e.key, "training.lamda");
        assert!(e.message.contains("unknown field"));
        let e = parse_config(r#"{"bogus": 1}"#).unwrap_err();
        assert_eq!(e.key, "bogus");
    }

    #[test]
    fn type_errors_name_the_field() {
        let e = parse_config(r#"{"training": {"momentum": "high"}}"#).unwrap_err();
        assert_eq!(e.key, "training.momentum");
        let e = parse_config(r#"{"corpus": {"synthetic": {"cameras": -1}}}"#).unwrap_err();
        assert_eq!(e.key, "corpus.synthetic.cameras");
    }

    #[test]
    fn negative_noise_is_rejected() {
        let e = parse_config(r#"{"corpus": {"synthetic": {"sigma_noise": -0.5}}}"#).unwrap_err();
        assert_eq!(e.key, "corpus.synthetic.sigma_noise");
        assert_eq!(e.message, "noise must be ≥ 0");
    }

    #[test]
    fn range_errors_are_keyed() {
        let cases = [
            (r#"{"training": {"enlarging_factor": 0}}"#, "training.enlarging_factor"),
            (r#"{"training": {"rho": 0.9}}"#, "training.rho"),
            (r#"{"training": {"momentum": 1.0}}"#, "training.momentum"),
            (r#"{"split": {"mode": "fraction", "q": 2}}"#, "split.q"),
            (r#"{"corpus": {"synthetic": {"cameras": 1}}}"#, "corpus.synthetic.cameras"),
        ];
        for (text, key) in cases {
            assert_eq!(parse_config(text).unwrap_err().key, key, "{text}");
        }
    }

    #[test]
    fn garbage_is_a_config_error() {
        for text in ["", "[", "null", "42", r#"{"split": {"mode": "two-shot"}}"#] {
            assert!(parse_config(text).is_err(), "{text}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.training.variant = LossVariant::InterOnly;
        cfg.split = SplitMode::Fraction { q: 0.25 };
        cfg.corpus = CorpusSource::Files { corpus: "c.jsonl".into(), eval_split: None };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn seed_override_sets_both_seeds() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides { seed: Some(9), variant: Some(LossVariant::CeOnly), ..Default::default() });
        assert_eq!((cfg.corpus_seed, cfg.training.seed), (9, 9));
        assert_eq!(cfg.training.variant, LossVariant::CeOnly);
    }
}
