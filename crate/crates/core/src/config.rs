//! Flat `key = value` run settings shared by every subcommand.
//!
//! Lines starting with `#` are comments. Later assignments win, so CLI
//! overrides are applied after the file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datagen::{GridSpec, SynthSpec};
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::scorer::{ScorerConfig, Variant};
use crate::trainer::{Objective, Optimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub scorer: ScorerConfig,
    pub train: TrainConfig,
    pub engine: EngineConfig,
    pub chain_hops: usize,
    pub grid: GridSpec,
    pub synth: SynthSpec,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            scorer: ScorerConfig::default(),
            train: TrainConfig::default(),
            engine: EngineConfig::default(),
            chain_hops: 3,
            grid: GridSpec {
                side: 8,
                hop_bucket: (2, 4),
                counts: (10_000, 1_000, 2_000),
                seed: 0,
            },
            synth: SynthSpec::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

/// `2:1275,3:1649`
fn parse_hop_mix(value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|part| {
            let (h, c) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad hop_mix entry {part:?}")))?;
            Ok((parse("hop_mix", h.trim())?, parse("hop_mix", c.trim())?))
        })
        .collect()
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => {
                self.seed = parse(key, v)?;
                self.scorer.seed = self.seed;
                self.train.seed = self.seed;
                self.grid.seed = self.seed;
                self.synth.seed = self.seed;
            }
            "variant" => self.scorer.variant = v.parse::<Variant>()?,
            "dim" => self.scorer.dim = parse(key, v)?,
            "positional" => self.scorer.positional = parse_bool(key, v)?,
            "max_positions" => self.scorer.max_positions = parse(key, v)?,
            "init_scale" => self.scorer.init_scale = parse(key, v)?,
            "margin" => self.train.margin = parse(key, v)?,
            "lr" | "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "optimizer" => {
                self.train.optimizer = match v {
                    "sgd" => Optimizer::Sgd,
                    "rmsprop" => Optimizer::RmsProp {
                        rho: 0.9,
                        eps: 1e-8,
                    },
                    _ => return Err(Error::Config(format!("unknown optimizer {v:?}"))),
                }
            }
            "rho" | "eps" => match &mut self.train.optimizer {
                Optimizer::RmsProp { rho, eps } => {
                    if key.trim() == "rho" {
                        *rho = parse(key, v)?;
                    } else {
                        *eps = parse(key, v)?;
                    }
                }
                Optimizer::Sgd => {
                    return Err(Error::Config(format!("{key} only applies to rmsprop")))
                }
            },
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "dynamic" => {
                let b = parse_bool(key, v)?;
                self.train.use_dynamic_question = b;
                self.engine.use_dynamic_question = b;
            }
            "objective" => {
                self.train.objective = match v {
                    "uhop" => Objective::Uhop,
                    "chain" => Objective::Chain {
                        max_hops: self.chain_hops,
                    },
                    _ => return Err(Error::Config(format!("unknown objective {v:?}"))),
                }
            }
            "hop_cap" => self.engine.hop_cap = parse(key, v)?,
            "chain_budget" => self.engine.chain_budget = parse(key, v)?,
            "chain_hops" => {
                self.chain_hops = parse(key, v)?;
                if let Objective::Chain { max_hops } = &mut self.train.objective {
                    *max_hops = self.chain_hops;
                }
            }
            "side" => self.grid.side = parse(key, v)?,
            "min_hops" => self.grid.hop_bucket.0 = parse(key, v)?,
            "max_hops" => self.grid.hop_bucket.1 = parse(key, v)?,
            "n_train" => self.grid.counts.0 = parse(key, v)?,
            "n_valid" => self.grid.counts.1 = parse(key, v)?,
            "n_test" => self.grid.counts.2 = parse(key, v)?,
            "n_entities" => self.synth.n_entities = parse(key, v)?,
            "n_relations" => self.synth.n_relations = parse(key, v)?,
            "branching" => self.synth.branching = parse(key, v)?,
            "n_templates" => self.synth.n_templates = parse(key, v)?,
            "hop_mix" => self.synth.hop_mix = parse_hop_mix(v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// `key=value` overrides, e.g. from repeated `--set` flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| {
                Error::Config(format!("override {:?} is not key=value", o.as_ref()))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Fully resolved settings in the same `key = value` format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("variant", self.scorer.variant.to_string());
        kv("dim", self.scorer.dim.to_string());
        kv("positional", self.scorer.positional.to_string());
        kv("max_positions", self.scorer.max_positions.to_string());
        kv("init_scale", self.scorer.init_scale.to_string());
        kv("margin", self.train.margin.to_string());
        kv("lr", self.train.learning_rate.to_string());
        match self.train.optimizer {
            Optimizer::Sgd => kv("optimizer", "sgd".into()),
            Optimizer::RmsProp { rho, eps } => {
                kv("optimizer", "rmsprop".into());
                kv("rho", rho.to_string());
                kv("eps", eps.to_string());
            }
        }
        kv("epochs", self.train.epochs.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("patience", self.train.patience.to_string());
        kv("dynamic", self.train.use_dynamic_question.to_string());
        kv("hop_cap", self.engine.hop_cap.to_string());
        kv("chain_budget", self.engine.chain_budget.to_string());
        kv("chain_hops", self.chain_hops.to_string());
        kv(
            "objective",
            match self.train.objective {
                Objective::Uhop => "uhop".into(),
                Objective::Chain { .. } => "chain".into(),
            },
        );
        kv("side", self.grid.side.to_string());
        kv("min_hops", self.grid.hop_bucket.0.to_string());
        kv("max_hops", self.grid.hop_bucket.1.to_string());
        kv("n_train", self.grid.counts.0.to_string());
        kv("n_valid", self.grid.counts.1.to_string());
        kv("n_test", self.grid.counts.2.to_string());
        kv("n_entities", self.synth.n_entities.to_string());
        kv("n_relations", self.synth.n_relations.to_string());
        kv("branching", self.synth.branching.to_string());
        kv("n_templates", self.synth.n_templates.to_string());
        kv(
            "hop_mix",
            self.synth
                .hop_mix
                .iter()
                .map(|(h, c)| format!("{h}:{c}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        out
    }

    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved.conf");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}
