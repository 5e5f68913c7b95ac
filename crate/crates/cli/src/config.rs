//! Flat TOML run configuration: dataset paths, augmenter settings and every
//! training hyperparameter in one table.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ckg::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Stub,
    Replay,
    Http,
}

/// Keys that are not training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub interactions: Option<PathBuf>,
    pub ia: Option<PathBuf>,
    /// Derived from shared attributes when absent.
    pub ii: Option<PathBuf>,
    /// Pairs kept per `(relation, attribute)` group when deriving II triplets.
    pub ii_cap: usize,
    pub split: [f64; 3],
    /// Defaults to `seed`.
    pub split_seed: Option<u64>,
    pub backend: BackendKind,
    /// Transcript read by the replay backend.
    pub transcript: Option<PathBuf>,
    /// Where to save every prompt/response pair of a run.
    pub record_transcript: Option<PathBuf>,
    pub stub_seed: u64,
    pub llm_batch_size: usize,
    pub llm_concurrency: usize,
    pub llm_budget: Option<usize>,
    /// Defaults to `seed`.
    pub augment_seed: Option<u64>,
    /// Explanation threshold on raw confidence.
    pub mu: f64,
    pub context_size: usize,
    pub explain_seed: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            interactions: None,
            ia: None,
            ii: None,
            ii_cap: 500,
            split: [0.8, 0.1, 0.1],
            split_seed: None,
            backend: BackendKind::Stub,
            transcript: None,
            record_transcript: None,
            stub_seed: 0,
            llm_batch_size: 32,
            llm_concurrency: 4,
            llm_budget: None,
            augment_seed: None,
            mu: 0.0,
            context_size: ckg::explain::DEFAULT_CONTEXT_SIZE,
            explain_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run: RunSettings,
    pub train: TrainConfig,
    /// Relative paths are resolved against this directory.
    pub base_dir: PathBuf,
}

fn keys_of<T: Serialize>(v: &T) -> BTreeSet<String> {
    match toml::Value::try_from(v) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_owned()))?;
        let run_keys = keys_of(&RunSettings {
            split_seed: Some(0),
            augment_seed: Some(0),
            ..Default::default()
        });
        let run_keys: BTreeSet<String> = run_keys
            .into_iter()
            .chain(
                [
                    "interactions",
                    "ia",
                    "ii",
                    "transcript",
                    "record_transcript",
                    "llm_budget",
                ]
                .map(String::from),
            )
            .collect();
        let train_keys = keys_of(&TrainConfig::default());
        let (mut run, mut train) = (toml::Table::new(), toml::Table::new());
        let mut unknown = Vec::new();
        for (k, v) in table {
            if v.is_table() {
                return Err(CliError::Config(format!(
                    "`{k}`: nested tables are not allowed; use flat keys"
                )));
            }
            if run_keys.contains(&k) {
                run.insert(k, v);
            } else if train_keys.contains(&k) {
                train.insert(k, v);
            } else {
                unknown.push(k);
            }
        }
        if !unknown.is_empty() {
            return Err(CliError::Config(format!(
                "unknown key(s): {}",
                unknown.join(", ")
            )));
        }
        let run: RunSettings = toml::Value::Table(run)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_owned()))?;
        let train: TrainConfig = toml::Value::Table(train)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_owned()))?;
        let cfg = RunConfig {
            run,
            train,
            base_dir: base_dir.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let r = &self.run;
        if r.interactions.is_none() || r.ia.is_none() {
            return Err(CliError::Config(
                "`interactions` and `ia` paths are required".into(),
            ));
        }
        let [a, b, c] = r.split;
        if [a, b, c].iter().any(|v| !(0.0..=1.0).contains(v)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "split {:?} must be fractions summing to 1",
                r.split
            )));
        }
        if r.ii_cap == 0 || r.llm_batch_size == 0 || r.llm_concurrency == 0 {
            return Err(CliError::Config(
                "ii_cap, llm_batch_size and llm_concurrency must be positive".into(),
            ));
        }
        if r.mu.is_nan() {
            return Err(CliError::Config("mu must be a number".into()));
        }
        if r.backend == BackendKind::Replay && r.transcript.is_none() {
            return Err(CliError::Config(
                "the replay backend needs `transcript`".into(),
            ));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn interactions_path(&self) -> PathBuf {
        self.resolve(self.run.interactions.as_deref().expect("validated"))
    }

    pub fn ia_path(&self) -> PathBuf {
        self.resolve(self.run.ia.as_deref().expect("validated"))
    }

    pub fn ii_path(&self) -> Option<PathBuf> {
        self.run.ii.as_deref().map(|p| self.resolve(p))
    }

    pub fn split_seed(&self) -> u64 {
        self.run.split_seed.unwrap_or(self.train.seed)
    }

    pub fn augment_seed(&self) -> u64 {
        self.run.augment_seed.unwrap_or(self.train.seed)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON of both tables.
    pub fn hash(&self) -> String {
        let body = serde_json::json!({ "run": self.run, "train": self.train });
        let digest = Sha256::digest(body.to_string().as_bytes());
        hex::encode(digest)[..16].to_owned()
    }

    /// Flat TOML with every key, as accepted by [`RunConfig::parse`].
    pub fn to_toml(&self) -> String {
        let mut t = toml::Table::new();
        for v in [
            toml::Value::try_from(&self.run),
            toml::Value::try_from(&self.train),
        ] {
            if let Ok(toml::Value::Table(part)) = v {
                t.extend(part);
            }
        }
        toml::to_string(&t).expect("flat table serializes")
    }
}
