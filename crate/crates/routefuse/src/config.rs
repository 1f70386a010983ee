//! `key = value` configuration files layered over a named preset.
//!
//! A file may set `preset = "paper" | "desk"` at top level; every other key
//! overrides the preset's value and must already exist in it. File paths
//! live in an optional `[paths]` section.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use routefuse_core::config::{Preset, RunConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `train.jsonl`, `test.jsonl` and `vocab.txt`.
    pub data: Option<PathBuf>,
    /// Vocabulary file overriding the one in the data directory.
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub run: RunConfig,
    pub paths: Paths,
}

fn merge(base: &mut Table, over: Table, prefix: &str) -> Result<()> {
    for (key, value) in over {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let Some(slot) = base.get_mut(&key) else {
            bail!("unknown configuration key `{path}`");
        };
        match (slot, value) {
            (Value::Table(b), Value::Table(o)) => merge(b, o, &path)?,
            (Value::Table(_), _) => bail!("`{path}` is a section, not a value"),
            (slot, v) => *slot = v,
        }
    }
    Ok(())
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        Config { run: RunConfig::preset(preset), paths: Paths::default() }
    }

    /// Parse `text`, starting from `preset` if given, else the file's
    /// `preset` key, else desk.
    pub fn parse(text: &str, preset: Option<Preset>) -> Result<Self> {
        let mut table: Table = text.parse().context("malformed configuration")?;
        let paths = match table.remove("paths") {
            Some(v) => v.try_into::<Paths>().context("in section [paths]")?,
            None => Paths::default(),
        };
        let file_preset = match table.remove("preset") {
            Some(Value::String(s)) => Some(s.parse::<Preset>()?),
            Some(other) => bail!("`preset` must be a string, got {other}"),
            None => None,
        };
        let chosen = preset.or(file_preset).unwrap_or(Preset::Desk);
        let mut base = match Value::try_from(RunConfig::preset(chosen))? {
            Value::Table(t) => t,
            _ => unreachable!("configuration serializes to a table"),
        };
        base.remove("preset");
        merge(&mut base, table, "")?;
        base.insert("preset".into(), Value::String(chosen.name().into()));
        let run: RunConfig = Value::Table(base).try_into().context("invalid configuration value")?;
        run.validate()?;
        Ok(Config { run, paths })
    }

    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text, preset).with_context(|| format!("in {}", p.display()))
            }
            None => Ok(Self::preset(preset.unwrap_or(Preset::Desk))),
        }
    }

    /// The fully resolved configuration as a file that [`Config::parse`]
    /// reads back to the same value.
    pub fn to_toml(&self) -> String {
        let mut out = toml::to_string(&self.run).expect("configuration serializes");
        if self.paths != Paths::default() {
            out.push_str("\n[paths]\n");
            out.push_str(&toml::to_string(&self.paths).expect("paths serialize"));
        }
        out
    }

    /// Hash of everything that determines generated scenes.
    pub fn data_hash(&self) -> String {
        let r = &self.run;
        let key = toml::to_string(&DataKey {
            roi: &r.model.roi,
            image_size: r.model.image_size,
            token_dim: r.model.token_dim,
            vocab_seed: r.model.vocab_seed,
            sim: &r.sim,
        })
        .expect("serializes");
        let digest = Sha256::digest(key.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Serialize)]
struct DataKey<'a> {
    roi: &'a routefuse_core::voxel::RoiSpec,
    image_size: [usize; 2],
    token_dim: usize,
    vocab_seed: u64,
    sim: &'a routefuse_core::config::SimConfig,
}
