//! Service configuration: a TOML file layered over defaults, then `TRIAGE_`
//! environment variables. Nested keys use a double underscore, e.g.
//! `TRIAGE_TRAIN__HEAD_FRACTION=0.6` or `TRIAGE_INPUTS__RULES=rules.txt`.

use std::path::{Path, PathBuf};

use figment::providers::{Env, Format, Serialized, Toml};
use figment::Figment;
use serde::{Deserialize, Serialize};
use triage_core::corpus::CorpusSpec;
use triage_core::pipeline::TrainConfig;

pub const ENV_PREFIX: &str = "TRIAGE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    /// Holds the event log, the registry file and versioned artifacts.
    pub data_dir: PathBuf,
    pub bind: String,
    pub inputs: Inputs,
    pub generator: CorpusSpec,
    pub train: TrainConfig,
}

/// Base data files. Optional inputs switch their stage off when unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    pub corpus: PathBuf,
    pub mapping: PathBuf,
    pub senders: PathBuf,
    /// Defaults to one consultant per admin group.
    pub roster: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub intents: Option<PathBuf>,
}

impl Default for Inputs {
    fn default() -> Self {
        Self {
            corpus: "corpus/corpus.csv".into(),
            mapping: "corpus/mapping.csv".into(),
            senders: "corpus/senders.csv".into(),
            roster: None,
            rules: None,
            intents: None,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            data_dir: "triage-data".into(),
            bind: "127.0.0.1:8080".into(),
            inputs: Inputs::default(),
            generator: CorpusSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    /// Defaults, then `path` (which must exist when given), then the
    /// environment. `seed` overrides everything.
    #[allow(clippy::result_large_err)]
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, figment::Error> {
        let mut fig = Figment::from(Serialized::defaults(Config::default()));
        if let Some(p) = path {
            if !p.exists() {
                return Err(figment::Error::from(format!("config file {} not found", p.display())));
            }
            fig = fig.merge(Toml::file_exact(p));
        }
        let mut cfg: Config = fig.merge(Env::prefixed(ENV_PREFIX).split("__")).extract()?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.generator.seed = cfg.seed;
        Ok(cfg)
    }

    /// Relative input paths resolve against `base` (the config file's
    /// directory, typically).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.inputs.corpus);
        fix(&mut self.inputs.mapping);
        fix(&mut self.inputs.senders);
        for p in [
            &mut self.inputs.roster,
            &mut self.inputs.rules,
            &mut self.inputs.intents,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

#[cfg(test)]
#[allow(clippy::result_large_err)]
mod tests {
    use super::*;
    use figment::Jail;

    #[test]
    fn file_then_env_then_seed() {
        Jail::expect_with(|jail| {
            jail.create_file(
                "triage.toml",
                r#"
                seed = 5
                bind = "0.0.0.0:9000"
                [inputs]
                rules = "rules.txt"
                [train]
                head_fraction = 0.5
                "#,
            )?;
            jail.set_env("TRIAGE_TRAIN__HEAD_FRACTION", "0.6");
            jail.set_env("TRIAGE_DATA_DIR", "/var/triage");
            let cfg = Config::load(Some(Path::new("triage.toml")), None)?;
            assert_eq!(cfg.seed, 5);
            assert_eq!(cfg.generator.seed, 5);
            assert_eq!(cfg.bind, "0.0.0.0:9000");
            assert_eq!(cfg.inputs.rules, Some(PathBuf::from("rules.txt")));
            assert_eq!(cfg.train.head_fraction, 0.6);
            assert_eq!(cfg.data_dir, PathBuf::from("/var/triage"));
            assert_eq!(cfg.train.valid_ratio, 0.2);

            let cfg = Config::load(Some(Path::new("triage.toml")), Some(9))?;
            assert_eq!((cfg.seed, cfg.generator.seed), (9, 9));
            Ok(())
        });
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(Config::load(Some(Path::new("/nonexistent/triage.toml")), None).is_err());
    }

    #[test]
    fn bad_value_is_an_error() {
        Jail::expect_with(|jail| {
            jail.set_env("TRIAGE_SEED", "many");
            assert!(Config::load(None, None).is_err());
            Ok(())
        });
    }

    #[test]
    fn relative_paths_resolve() {
        let mut cfg = Config {
            inputs: Inputs {
                rules: Some("r.txt".into()),
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.data_dir = "/abs".into();
        cfg.resolve_paths(Path::new("/etc/triage"));
        assert_eq!(cfg.data_dir, PathBuf::from("/abs"));
        assert_eq!(cfg.inputs.rules, Some(PathBuf::from("/etc/triage/r.txt")));
        assert_eq!(cfg.inputs.corpus, PathBuf::from("/etc/triage/corpus/corpus.csv"));
    }
}
