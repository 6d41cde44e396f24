use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Code;

#[derive(Parser, Debug)]
#[command(name = "mscale", version, about = "Multiscale learning of dynamical-system forcing functions")]
pub struct Cli {
    /// JSON file with the command's settings; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a benchmark system and write a dataset CSV plus metadata.
    Generate(GenerateArgs),
    /// Fit a model to a dataset with the pu, svd or shosvd method.
    Fit(FitArgs),
    /// Integrate a learned model and the true system from one initial condition.
    Rollout(RolloutArgs),
    /// Write per-mode macro/micro component CSVs of a model.
    Components(ComponentsArgs),
    /// Score a model on the test split of a dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateArgs {
    /// sin_exp, two_freq, duffing or pendulum.
    #[arg(long)]
    pub system: Option<String>,
    /// Defaults to $MSCALE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_trajectories: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// System parameter override, `NAME=VALUE` (two_freq: A, c, k, const).
    #[arg(long = "param", value_name = "NAME=VALUE", value_parser = parse_param, allow_hyphen_values = true)]
    #[serde(default, with = "pairs_as_map")]
    pub params: Option<Vec<(String, f64)>>,
    /// Initial-condition box, one `LO:HI` per state component.
    #[arg(long = "ic-range", value_name = "LO:HI", value_parser = parse_range, allow_hyphen_values = true)]
    pub ic_ranges: Option<Vec<(f64, f64)>>,
    /// Existing directory for the outputs.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// File stem; defaults to the system name.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitArgs {
    /// pu, svd or shosvd.
    #[arg(long)]
    pub method: Option<String>,
    /// Dataset CSV. Its `<stem>.meta.json`, when present, supplies the system.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// System whose domain and defaults to use; shosvd samples it when no data is given.
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Macro elements m.
    #[arg(long = "macro")]
    #[serde(rename = "macro")]
    pub macro_count: Option<usize>,
    /// Fine nodes per macro element n.
    #[arg(long = "micro")]
    #[serde(rename = "micro")]
    pub micro_count: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// MSE threshold for adaptive enrichment (pu) and mode selection (svd).
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_modes: Option<usize>,
    /// Mini-batch size; 0 for full batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Micro vector length (pu).
    #[arg(long)]
    pub micro_len: Option<usize>,
    /// `auto` or a fixed mode count (svd).
    #[arg(long)]
    pub modes: Option<String>,
    /// Hidden fraction of the matrix (shosvd).
    #[arg(long)]
    pub hidden: Option<f64>,
    #[arg(long)]
    pub stages: Option<usize>,
    /// Rank of each stage (shosvd).
    #[arg(long)]
    pub latent_dim: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutArgs {
    /// Model JSON, or `truth` to use the exact right-hand side.
    #[arg(long)]
    pub model: Option<String>,
    /// Required with `--model truth`; otherwise taken from the model file when absent.
    #[arg(long)]
    pub system: Option<String>,
    /// Comma-separated initial state; defaults to 0.5 in every component.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

mod pairs_as_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<(String, f64)>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(|pairs| pairs.iter().cloned().collect::<BTreeMap<_, _>>()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<(String, f64)>>, D::Error> {
        Ok(Option::<BTreeMap<String, f64>>::deserialize(d)?.map(|m| m.into_iter().collect()))
    }
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got '{s}'"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("'{v}' is not a number"))?;
    Ok((k.trim().to_string(), v))
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected LO:HI, got '{s}'"))?;
    let p = |x: &str| x.trim().parse::<f64>().map_err(|_| format!("'{x}' is not a number"));
    Ok((p(lo)?, p(hi)?))
}

/// Overlays the flags that were given on top of the config file's object.
pub fn merge<A: Serialize + DeserializeOwned>(config: Option<&Path>, flags: &A) -> anyhow::Result<A> {
    let mut base = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .context(Code::Usage)?;
            let v: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .context(Code::Usage)?;
            match v {
                Value::Object(map) => map,
                _ => bail!(crate::coded(Code::Usage, "config file must hold a JSON object")),
            }
        }
        None => serde_json::Map::new(),
    };
    if let Value::Object(over) = serde_json::to_value(flags)? {
        for (k, v) in over {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base)).context("invalid configuration").context(Code::Usage)
}

/// Flag, then config, then `MSCALE_SEED`, then 0.
pub fn resolve_seed(seed: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var("MSCALE_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("MSCALE_SEED='{v}' is not an unsigned integer"))
            .context(Code::Usage),
        Err(_) => Ok(0),
    }
}

pub fn params_map(params: &Option<Vec<(String, f64)>>) -> BTreeMap<String, f64> {
    params.iter().flatten().cloned().collect()
}
