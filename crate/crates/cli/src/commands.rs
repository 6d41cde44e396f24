use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use log::{info, warn};
use mscale::dynamics::{self, DatasetConfig, SystemKind, SystemSpec, TrajectoryDataset};
use mscale::io;
use mscale::mesh::MultiscaleMesh;
use mscale::nn;
use mscale::pu::{self, TrainConfig};
use mscale::shosvd;
use mscale::svdscale;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::args::{params_map, resolve_seed, ComponentsArgs, EvaluateArgs, FitArgs, GenerateArgs, RolloutArgs};
use crate::model::ModelFile;
use crate::{coded, Code};

const FORMAT_VERSION: u32 = 1;
const DEFAULT_GRID: (usize, usize) = (100, 100);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::anyhow!(coded(Code::Usage, msg))
}

/// Output directories must already exist.
fn out_dir(dir: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let dir = dir.clone().unwrap_or_else(|| PathBuf::from("."));
    if !dir.is_dir() {
        bail!(coded(Code::Io, format!("output directory {} does not exist", dir.display())));
    }
    Ok(dir)
}

fn system_spec(name: &str, params: &BTreeMap<String, f64>) -> anyhow::Result<SystemSpec<f64>> {
    let kind: SystemKind = name.parse().context(Code::Usage)?;
    let mut spec = SystemSpec::new(kind);
    for (k, &v) in params {
        if !spec.parameters.contains_key(k) {
            return Err(usage(format!("{kind} has no parameter '{k}'")));
        }
        spec.parameters.insert(k.clone(), v);
    }
    spec.validate().context(Code::Usage)?;
    Ok(spec)
}

fn write_timing(dir: &Path, started: Instant) -> anyhow::Result<()> {
    io::write_json(&dir.join("timing.json"), &json!({ "wall_seconds": started.elapsed().as_secs_f64() }))?;
    Ok(())
}

/// Dataset metadata written next to the CSV as `<stem>.meta.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: SystemSpec<f64>,
    pub dataset: DatasetConfig<f64>,
    pub n_samples: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub csv: String,
    pub version: u32,
}

fn meta_path(data: &Path) -> PathBuf {
    data.with_extension("meta.json")
}

pub fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let name = args.system.as_deref().ok_or_else(|| usage("generate needs --system"))?;
    let system = system_spec(name, &params_map(&args.params))?;
    let defaults = DatasetConfig::<f64>::default();
    let dataset = DatasetConfig {
        n_trajectories: args.n_trajectories.unwrap_or(defaults.n_trajectories),
        steps: args.steps.unwrap_or(defaults.steps),
        dt: args.dt.unwrap_or(defaults.dt),
        ic_ranges: Some(args.ic_ranges.clone().unwrap_or_else(|| system.default_ic_ranges())),
        seed: resolve_seed(args.seed)?,
    };
    let dir = out_dir(&args.out_dir)?;
    let stem = args.name.clone().unwrap_or_else(|| system.kind.to_string());
    let data = dynamics::generate_dataset(&system, &dataset).context(Code::Usage)?;
    let csv = dir.join(format!("{stem}.csv"));
    io::write_dataset(&csv, &data)?;
    let meta = DatasetMeta {
        system,
        dataset,
        n_samples: data.len(),
        n_train: data.train_indices().len(),
        n_test: data.test_indices().len(),
        csv: format!("{stem}.csv"),
        version: FORMAT_VERSION,
    };
    io::write_json(&meta_path(&csv), &meta)?;
    info!("wrote {} samples to {}", data.len(), csv.display());
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<TrajectoryDataset<f64>> {
    io::read_dataset(path).with_context(|| format!("reading dataset {}", path.display())).context(Code::Usage)
}

/// MSE and relative loss (percent) of a model over the given samples.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Score {
    pub n: usize,
    pub mse: f64,
    pub relative_loss: f64,
}

fn score(model: &ModelFile, data: &TrajectoryDataset<f64>, indices: &[usize]) -> anyhow::Result<(Score, Vec<Vec<f64>>)> {
    if indices.is_empty() {
        return Err(usage("split is empty"));
    }
    let states: Vec<Vec<f64>> = indices.iter().map(|&k| data.samples()[k].state.clone()).collect();
    let preds = model.predict(&states)?;
    let flat_pred: Vec<f64> = preds.iter().flatten().copied().collect();
    let flat_true: Vec<f64> = indices.iter().flat_map(|&k| data.samples()[k].derivative.iter().copied()).collect();
    let mse = nn::mse(&flat_pred, &flat_true)?;
    let relative_loss = nn::relative_loss(&flat_pred, &flat_true).context(Code::Usage)?;
    Ok((Score { n: indices.len(), mse, relative_loss }, preds))
}

fn hull(values: impl IntoIterator<Item = f64>) -> anyhow::Result<(f64, f64)> {
    let (lo, hi) = values.into_iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !(lo < hi) {
        return Err(usage("data does not span an interval"));
    }
    Ok((lo, hi))
}

/// System from the flag, else from the dataset's metadata file.
fn fit_system(args: &FitArgs) -> anyhow::Result<Option<SystemSpec<f64>>> {
    if let Some(name) = &args.system {
        return Ok(Some(system_spec(name, &BTreeMap::new())?));
    }
    if let Some(data) = &args.data {
        let meta = meta_path(data);
        if meta.is_file() {
            let m: DatasetMeta = io::read_json(&meta)
                .with_context(|| format!("reading {}", meta.display()))
                .context(Code::Usage)?;
            return Ok(Some(m.system));
        }
    }
    Ok(None)
}

#[derive(Debug, Serialize)]
struct ResolvedFit {
    method: String,
    data: Option<PathBuf>,
    system: Option<SystemSpec<f64>>,
    out_dir: PathBuf,
    seed: u64,
    #[serde(rename = "macro")]
    macro_count: usize,
    #[serde(rename = "micro")]
    micro_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    modes: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stages: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    latent_dim: Option<usize>,
}

fn train_config(args: &FitArgs, base: TrainConfig<f64>, seed: u64) -> TrainConfig<f64> {
    TrainConfig {
        epochs: args.epochs.unwrap_or(base.epochs),
        learning_rate: args.learning_rate.unwrap_or(base.learning_rate),
        weight_decay: args.weight_decay.unwrap_or(base.weight_decay),
        mse_threshold: args.threshold.unwrap_or(base.mse_threshold),
        max_modes: args.max_modes.unwrap_or(base.max_modes),
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        micro_len: args.micro_len.or(base.micro_len),
        seed,
    }
}

pub fn fit(args: FitArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let method = args.method.clone().unwrap_or_else(|| "pu".to_string());
    let dir = out_dir(&args.out_dir)?;
    let seed = resolve_seed(args.seed)?;
    let system = fit_system(&args)?;
    match method.as_str() {
        "pu" => fit_pu(&args, system, dir.clone(), seed)?,
        "svd" => fit_svd(&args, system, dir.clone(), seed)?,
        "shosvd" => fit_shosvd(&args, system, dir.clone(), seed)?,
        other => return Err(usage(format!("unknown method '{other}' (expected pu, svd or shosvd)"))),
    }
    write_timing(&dir, started)
}

fn fit_pu(args: &FitArgs, system: Option<SystemSpec<f64>>, dir: PathBuf, seed: u64) -> anyhow::Result<()> {
    let path = args.data.as_ref().ok_or_else(|| usage("fit --method pu needs --data"))?;
    let data = load_dataset(path)?;
    let d = data.state_dim();
    if let Some(s) = &system {
        if s.state_dim() != d {
            return Err(usage(format!("{} is a {}-state system but the dataset has {d} states", s.kind, s.state_dim())));
        }
    }
    let (m, n) = match (args.macro_count, args.micro_count, &system) {
        (Some(m), Some(n), _) => (m, n),
        (m, n, Some(s)) => {
            let (dm, dn) = s.default_pu_mesh();
            (m.unwrap_or(dm), n.unwrap_or(dn))
        }
        _ => return Err(usage("no system known: give --system or both --macro and --micro")),
    };
    let config = train_config(args, TrainConfig::default(), seed);
    config.validate().context(Code::Usage)?;
    let mesh_for = |k: usize| -> anyhow::Result<MultiscaleMesh<f64>> {
        let (lo, hi) = match &system {
            Some(s) => s.domain[k],
            None => hull(data.samples().iter().map(|s| s.state[k]))?,
        };
        MultiscaleMesh::new(lo, hi, m, n).context(Code::Usage)
    };

    let (model, details) = if d == 1 {
        let (tx, ty) = data.column_pair(data.train_indices(), 0, 0);
        let (vx, vy) = data.column_pair(data.test_indices(), 0, 0);
        if vx.is_empty() {
            return Err(usage("dataset test split is empty"));
        }
        let fit = pu::adaptive_fit((&tx, &ty), (&vx, &vy), &mesh_for(0)?, &config)?;
        let details = json!({
            "modes": fit.model.modes().len(),
            "validation_mse": fit.validation_mse,
            "rejected_mse": fit.rejected_mse,
            "converged": fit.converged,
            "final_relative_loss": fit.histories.iter().map(|h| h.last()).collect::<Vec<_>>(),
        });
        (ModelFile::Pu { system: system.clone(), model: fit.model }, details)
    } else {
        if data.test_indices().is_empty() {
            return Err(usage("dataset test split is empty"));
        }
        let fit = pu::fit_coupled(&data, &mesh_for(0)?, &mesh_for(1)?, &config)?;
        let part = |f: &pu::AdaptiveFit<f64>| {
            json!({
                "modes": f.model.modes().len(),
                "validation_mse": f.validation_mse,
                "rejected_mse": f.rejected_mse,
                "converged": f.converged,
                "final_relative_loss": f.histories.iter().map(|h| h.last()).collect::<Vec<_>>(),
            })
        };
        let details = json!({
            "modes": [fit.a.model.modes().len(), fit.b.model.modes().len()],
            "a": part(&fit.a),
            "b": part(&fit.b),
        });
        (ModelFile::PuCoupled { system: system.clone(), model: fit.model() }, details)
    };

    let resolved = ResolvedFit {
        method: "pu".into(),
        data: args.data.clone(),
        system,
        out_dir: dir.clone(),
        seed,
        macro_count: m,
        micro_count: n,
        train: Some(config),
        modes: None,
        threshold: None,
        hidden: None,
        stages: None,
        latent_dim: None,
    };
    finish_fit(&dir, &model, &data, resolved, details)
}

fn finish_fit(
    dir: &Path,
    model: &ModelFile,
    data: &TrajectoryDataset<f64>,
    resolved: ResolvedFit,
    details: serde_json::Value,
) -> anyhow::Result<()> {
    let (train, _) = score(model, data, data.train_indices())?;
    let (test, _) = score(model, data, data.test_indices())?;
    io::write_json(&dir.join("model.json"), model)?;
    let report = json!({
        "method": resolved.method,
        "config": resolved,
        "train_mse": train.mse,
        "test_mse": test.mse,
        "train_relative_loss": train.relative_loss,
        "test_relative_loss": test.relative_loss,
        "n_train": train.n,
        "n_test": test.n,
        "details": details,
        "version": FORMAT_VERSION,
    });
    io::write_json(&dir.join("report.json"), &report)?;
    info!("test MSE {:e}", test.mse);
    Ok(())
}

fn grid_mesh(args: &FitArgs, lo: f64, hi: f64) -> anyhow::Result<MultiscaleMesh<f64>> {
    let m = args.macro_count.unwrap_or(DEFAULT_GRID.0);
    let n = args.micro_count.unwrap_or(DEFAULT_GRID.1);
    MultiscaleMesh::new(lo, hi, m, n).context(Code::Usage)
}

/// Training split of a 1D dataset, interpolated onto the fine nodes of a mesh over its hull.
fn grid_from_data(args: &FitArgs, data: &TrajectoryDataset<f64>) -> anyhow::Result<(MultiscaleMesh<f64>, Vec<f64>)> {
    if data.state_dim() != 1 {
        return Err(usage("svd and shosvd fit 1D datasets only"));
    }
    let (tx, ty) = data.column_pair(data.train_indices(), 0, 0);
    let (lo, hi) = hull(tx.iter().copied())?;
    let mesh = grid_mesh(args, lo, hi)?;
    let pairs: Vec<(f64, f64)> = tx.into_iter().zip(ty).collect();
    let values = svdscale::interpolate_to_grid(&pairs, &mesh)?;
    Ok((mesh, values))
}

fn fit_svd(args: &FitArgs, system: Option<SystemSpec<f64>>, dir: PathBuf, seed: u64) -> anyhow::Result<()> {
    let path = args.data.as_ref().ok_or_else(|| usage("fit --method svd needs --data"))?;
    let data = load_dataset(path)?;
    let (mesh, values) = grid_from_data(args, &data)?;
    let threshold = args.threshold.unwrap_or(1e-2);
    if !(threshold > 0.0) {
        return Err(usage("threshold must be positive"));
    }
    let modes = args.modes.clone().unwrap_or_else(|| "auto".into());
    let decomposition = if modes == "auto" {
        svdscale::multiscale_decompose(&values, &mesh, threshold)?
    } else {
        let t: usize = modes.parse().map_err(|_| usage(format!("--modes must be 'auto' or a count, got '{modes}'")))?;
        let mut full = svdscale::multiscale_decompose(&values, &mesh, 0.0)?;
        if t == 0 || t > full.decomposition.rank() {
            return Err(usage(format!("--modes {t} outside 1..={}", full.decomposition.rank())));
        }
        full.decomposition = full.decomposition.truncate(t)?;
        full.mse_by_rank.truncate(t);
        full.modes = t;
        full.threshold_reached = full.mse_by_rank[t - 1] < threshold;
        full
    };
    let files = io::write_decomposition_components(&dir, &decomposition)?;
    let details = json!({
        "modes": decomposition.modes,
        "singular_values": decomposition.decomposition.singular_values,
        "grid_mse_by_rank": decomposition.mse_by_rank,
        "threshold_reached": decomposition.threshold_reached,
        "files": files.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect::<Vec<_>>(),
    });
    let resolved = ResolvedFit {
        method: "svd".into(),
        data: args.data.clone(),
        system: system.clone(),
        out_dir: dir.clone(),
        seed,
        macro_count: mesh.macro_count(),
        micro_count: mesh.micro_per_element(),
        train: None,
        modes: Some(modes),
        threshold: Some(threshold),
        hidden: None,
        stages: None,
        latent_dim: None,
    };
    let model = ModelFile::Svd { system, mesh, decomposition };
    finish_fit(&dir, &model, &data, resolved, details)
}

fn fit_shosvd(args: &FitArgs, system: Option<SystemSpec<f64>>, dir: PathBuf, seed: u64) -> anyhow::Result<()> {
    let data = args.data.as_deref().map(load_dataset).transpose()?;
    let (mesh, values, system) = match &data {
        Some(d) => {
            let (mesh, values) = grid_from_data(args, d)?;
            (mesh, values, system)
        }
        None => {
            let spec = match system {
                Some(s) => s,
                None => SystemSpec::new(SystemKind::TwoFreq),
            };
            if spec.state_dim() != 1 {
                return Err(usage("shosvd samples 1D systems only"));
            }
            let (lo, hi) = spec.domain[0];
            let mesh = grid_mesh(args, lo, hi)?;
            let values = mesh.fine_nodes().iter().map(|&x| Ok(spec.rhs(&[x])?[0])).collect::<mscale::Result<Vec<_>>>()?;
            (mesh, values, Some(spec))
        }
    };
    let matrix = mesh.fold(&values)?;
    let hidden_fraction = args.hidden.unwrap_or(0.7);
    let stages = args.stages.unwrap_or(2);
    let latent_dim = args.latent_dim.unwrap_or(1);
    if stages == 0 || latent_dim == 0 {
        return Err(usage("stages and latent_dim must be positive"));
    }
    let config = train_config(args, shosvd::default_stage_config(), seed);
    let (observed, hidden) = shosvd::mask(&matrix, hidden_fraction, seed).context(Code::Usage)?;
    let fit = shosvd::fit(&observed, stages, &config, latent_dim)?;
    let per_stage = (1..=stages)
        .map(|k| {
            let m = shosvd::evaluate_completion(&fit.model.truncated(k), &hidden, &matrix)?;
            Ok(json!({
                "stage": k,
                "observed_mse": fit.observed_mse[k - 1],
                "hidden_mse": m.hidden_mse,
                "full_mse": m.full_mse,
            }))
        })
        .collect::<mscale::Result<Vec<_>>>()?;
    io::write_observations(&dir.join("observed.csv"), &observed)?;
    io::write_observations(&dir.join("hidden.csv"), &hidden)?;
    let resolved = ResolvedFit {
        method: "shosvd".into(),
        data: args.data.clone(),
        system: system.clone(),
        out_dir: dir.clone(),
        seed,
        macro_count: mesh.macro_count(),
        micro_count: mesh.micro_per_element(),
        train: Some(config),
        modes: None,
        threshold: None,
        hidden: Some(hidden_fraction),
        stages: Some(stages),
        latent_dim: Some(latent_dim),
    };
    let details = json!({ "stages": per_stage, "n_observed": observed.len(), "n_hidden": hidden.len() });
    let model = ModelFile::Shosvd { system, mesh, model: fit.model };
    match data {
        Some(d) => finish_fit(&dir, &model, &d, resolved, details),
        None => {
            io::write_json(&dir.join("model.json"), &model)?;
            let report = json!({
                "method": "shosvd",
                "config": resolved,
                "details": details,
                "version": FORMAT_VERSION,
            });
            io::write_json(&dir.join("report.json"), &report)?;
            Ok(())
        }
    }
}

pub fn rollout(args: RolloutArgs) -> anyhow::Result<()> {
    let model_arg = args.model.as_deref().ok_or_else(|| usage("rollout needs --model (a file or 'truth')"))?;
    let model = if model_arg == "truth" { None } else { Some(ModelFile::load(Path::new(model_arg))?) };
    let system = match (&args.system, &model) {
        (Some(name), _) => system_spec(name, &BTreeMap::new())?,
        (None, Some(m)) => m.system().cloned().ok_or_else(|| usage("model records no system; pass --system"))?,
        (None, None) => return Err(usage("--model truth needs --system")),
    };
    if let Some(m) = &model {
        if m.state_dim() != system.state_dim() {
            return Err(usage(format!(
                "{}-state model does not match {}-state system {}",
                m.state_dim(),
                system.state_dim(),
                system.kind
            )));
        }
    }
    let x0 = args.x0.clone().unwrap_or_else(|| vec![0.5; system.state_dim()]);
    if x0.len() != system.state_dim() {
        return Err(usage(format!("x0 has {} components, {} expects {}", x0.len(), system.kind, system.state_dim())));
    }
    let dt = args.dt.unwrap_or(0.01);
    let steps = args.steps.unwrap_or(200);
    let dir = out_dir(&args.out_dir)?;

    let cmp = match &model {
        Some(m) => {
            let mut field = m.field()?;
            dynamics::rollout_compare(field.as_mut(), &system, &x0, dt, steps).context(Code::Usage)?
        }
        None => {
            let mut exact = system.clone();
            dynamics::rollout_compare(&mut exact, &system, &x0, dt, steps).context(Code::Usage)?
        }
    };
    if cmp.clamped {
        warn!("the learned model was queried outside its domain; inputs were clamped");
    }
    io::write_trajectory(&dir.join("learned.csv"), &cmp.learned)?;
    io::write_trajectory(&dir.join("truth.csv"), &cmp.truth)?;
    io::write_columns(&dir.join("error.csv"), &["t", "error"], &[&cmp.truth.times, &cmp.pointwise_error])?;
    let max_error = cmp.pointwise_error.iter().copied().fold(0.0, f64::max);
    let report = json!({
        "config": {
            "model": model_arg,
            "system": system,
            "x0": x0,
            "dt": dt,
            "steps": steps,
            "out_dir": dir,
        },
        "relative_l2": cmp.relative_l2,
        "max_error": max_error,
        "final_error": cmp.pointwise_error.last(),
        "clamped": cmp.clamped,
        "version": FORMAT_VERSION,
    });
    io::write_json(&dir.join("rollout.json"), &report)?;
    info!("relative L2 error {:e}", cmp.relative_l2);
    Ok(())
}

pub fn components(args: ComponentsArgs) -> anyhow::Result<()> {
    let path = args.model.as_ref().ok_or_else(|| usage("components needs --model"))?;
    let model = ModelFile::load(path)?;
    let dir = out_dir(&args.out_dir)?;
    let files = match &model {
        ModelFile::Pu { model, .. } => io::write_pu_components(&dir, model, "")?,
        ModelFile::PuCoupled { model, .. } => {
            let mut f = io::write_pu_components(&dir, &model.a, "a_")?;
            f.extend(io::write_pu_components(&dir, &model.b, "b_")?);
            f
        }
        ModelFile::Svd { decomposition, .. } => io::write_decomposition_components(&dir, decomposition)?,
        ModelFile::Shosvd { mesh, model, .. } => {
            let mut files = Vec::new();
            let local = mesh.local_offsets();
            let centers = mesh.element_centers();
            for (k, stage) in model.stages().iter().enumerate() {
                let rows = model.row_factors(stage)?;
                let cols = model.col_factors(stage)?;
                for (name, coord, label, factors) in
                    [("micro", &local, "local_coordinate", rows), ("macro", &centers, "macro_center", cols)]
                {
                    let header: Vec<String> = std::iter::once(label.to_string())
                        .chain((1..=stage.r).map(|l| format!("factor_{l}")))
                        .collect();
                    let header: Vec<&str> = header.iter().map(String::as_str).collect();
                    let mut columns = vec![coord.clone()];
                    columns.extend((0..stage.r).map(|l| factors.iter().map(|f| f[l]).collect::<Vec<f64>>()));
                    let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
                    let p = dir.join(format!("stage_{}_{name}.csv", k + 1));
                    io::write_columns(&p, &header, &refs)?;
                    files.push(p);
                }
            }
            files
        }
    };
    let names: Vec<String> =
        files.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect();
    io::write_json(&dir.join("components.json"), &json!({ "method": model.method(), "files": names }))?;
    info!("wrote {} component files", names.len());
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let model_path = args.model.as_ref().ok_or_else(|| usage("evaluate needs --model"))?;
    let data_path = args.data.as_ref().ok_or_else(|| usage("evaluate needs --data"))?;
    let model = ModelFile::load(model_path)?;
    let data = load_dataset(data_path)?;
    if data.state_dim() != model.state_dim() {
        return Err(usage(format!("{}-state model, {}-state dataset", model.state_dim(), data.state_dim())));
    }
    if data.test_indices().is_empty() {
        return Err(usage("dataset test split is empty"));
    }
    let dir = out_dir(&args.out_dir)?;
    let (test, preds) = score(&model, &data, data.test_indices())?;

    let d = data.state_dim();
    let base = io::dataset_header(d)?;
    let mut header: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    let suffix = |p: &str| if d == 1 { vec![p.to_string()] } else { (0..d).map(|k| format!("{p}{k}")).collect() };
    header.extend(suffix("prediction"));
    header.extend(suffix("residual"));
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); 4 * d];
    for (&k, p) in data.test_indices().iter().zip(&preds) {
        let s = &data.samples()[k];
        for c in 0..d {
            columns[c].push(s.state[c]);
            columns[d + c].push(s.derivative[c]);
            columns[2 * d + c].push(p[c]);
            columns[3 * d + c].push(p[c] - s.derivative[c]);
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
    io::write_columns(&dir.join("residuals.csv"), &header, &refs)?;
    let metrics = json!({
        "method": model.method(),
        "model": model_path,
        "data": data_path,
        "n_test": test.n,
        "test_mse": test.mse,
        "test_relative_loss": test.relative_loss,
        "residuals": "residuals.csv",
        "version": FORMAT_VERSION,
    });
    io::write_json(&dir.join("metrics.json"), &metrics)?;
    info!("test MSE {:e}", test.mse);
    Ok(())
}
