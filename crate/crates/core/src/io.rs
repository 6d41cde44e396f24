//! CSV and JSON artifacts.
//!
//! Numbers are written with `Display`, which yields the shortest decimal
//! string that parses back to the same value, so artifacts are byte-stable.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dynamics::{Sample, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::pu::PuModel;
use crate::scalar::Real;
use crate::shosvd::{Observation, ObservationSet};
use crate::svdscale::MultiscaleDecomposition;

pub const DATASET_1D_HEADER: [&str; 2] = ["x", "dxdt"];
pub const DATASET_2D_HEADER: [&str; 4] = ["x0", "x1", "dx0", "dx1"];
pub const OBSERVATION_HEADER: [&str; 3] = ["i", "j", "value"];

fn parse<T: Real>(field: &str, line: u64) -> Result<T> {
    let v = T::from_str_radix(field.trim(), 10)
        .map_err(|_| Error::Format(format!("line {line}: '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Format(format!("line {line}: non-finite value '{field}'")));
    }
    Ok(v)
}

fn parse_index(field: &str, line: u64) -> Result<usize> {
    field.trim().parse().map_err(|_| Error::Format(format!("line {line}: '{field}' is not an index")))
}

/// Writes `header` and then one row per index of the equally long `columns`.
pub fn write_columns<T: Real>(path: &Path, header: &[&str], columns: &[&[T]]) -> Result<()> {
    if header.len() != columns.len() {
        return Err(Error::Shape(format!("{} headers for {} columns", header.len(), columns.len())));
    }
    let rows = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != rows) {
        return Err(Error::Shape("columns differ in length".into()));
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    let mut record = Vec::with_capacity(columns.len());
    for r in 0..rows {
        record.clear();
        record.extend(columns.iter().map(|c| c[r].to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric CSV with exactly the given header; returns rows.
pub fn read_rows<T: Real>(path: &Path, header: &[&str]) -> Result<Vec<Vec<T>>> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let found: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if found != header {
        return Err(Error::Format(format!("expected header {}, found {}", header.join(","), found.join(","))));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Format(format!("line {line}: expected {} fields, got {}", header.len(), rec.len())));
        }
        rows.push(rec.iter().map(|f| parse(f, line)).collect::<Result<Vec<T>>>()?);
    }
    Ok(rows)
}

/// Header of the dataset CSV for a given state dimension.
pub fn dataset_header(state_dim: usize) -> Result<&'static [&'static str]> {
    match state_dim {
        1 => Ok(&DATASET_1D_HEADER),
        2 => Ok(&DATASET_2D_HEADER),
        d => Err(Error::Shape(format!("unsupported state dimension {d}"))),
    }
}

/// Writes samples in stored order (the first `round(0.8·N)` rows are the training split).
pub fn write_dataset<T: Real>(path: &Path, dataset: &TrajectoryDataset<T>) -> Result<()> {
    let header = dataset_header(dataset.state_dim())?;
    let d = dataset.state_dim();
    let columns: Vec<Vec<T>> = (0..2 * d)
        .map(|c| {
            dataset
                .samples()
                .iter()
                .map(|s| if c < d { s.state[c] } else { s.derivative[c - d] })
                .collect()
        })
        .collect();
    let refs: Vec<&[T]> = columns.iter().map(Vec::as_slice).collect();
    write_columns(path, header, &refs)
}

/// Reads a dataset CSV; the state dimension is inferred from the header.
pub fn read_dataset<T: Real>(path: &Path) -> Result<TrajectoryDataset<T>> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let width = r.headers()?.len();
    let d = match width {
        2 => 1,
        4 => 2,
        _ => return Err(Error::Format(format!("dataset has {width} columns; expected 2 or 4"))),
    };
    let rows = read_rows::<T>(path, dataset_header(d)?)?;
    if rows.is_empty() {
        return Err(Error::Format("dataset has no rows".into()));
    }
    let samples = rows.into_iter().map(|row| Sample { state: row[..d].to_vec(), derivative: row[d..].to_vec() }).collect();
    TrajectoryDataset::from_ordered(d, samples)
}

/// `t,x0[,x1]`.
pub fn write_trajectory<T: Real>(path: &Path, trajectory: &Trajectory<T>) -> Result<()> {
    let d = trajectory.states.first().map_or(0, Vec::len);
    let names: Vec<String> = std::iter::once("t".to_string()).chain((0..d).map(|k| format!("x{k}"))).collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut columns = vec![trajectory.times.clone()];
    columns.extend((0..d).map(|k| trajectory.states.iter().map(|s| s[k]).collect::<Vec<T>>()));
    let refs: Vec<&[T]> = columns.iter().map(Vec::as_slice).collect();
    write_columns(path, &header, &refs)
}

/// `i,j,value`, in stored order.
pub fn write_observations<T: Real>(path: &Path, observations: &ObservationSet<T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(OBSERVATION_HEADER)?;
    for o in observations.entries() {
        w.write_record([o.i.to_string(), o.j.to_string(), o.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_observations<T: Real>(path: &Path, n_rows: usize, n_cols: usize) -> Result<ObservationSet<T>> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let found: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if found != OBSERVATION_HEADER {
        return Err(Error::Format(format!("expected header i,j,value, found {}", found.join(","))));
    }
    let mut entries = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(Error::Format(format!("line {line}: expected 3 fields")));
        }
        entries.push(Observation { i: parse_index(&rec[0], line)?, j: parse_index(&rec[1], line)?, value: parse(&rec[2], line)? });
    }
    ObservationSet::new(n_rows, n_cols, entries)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// One `mode_{k}_micro.csv` (`local_coordinate,micro_value`) and one
/// `mode_{k}_macro.csv` (`macro_node,macro_value`) per mode, `k` from 1.
pub fn write_pu_components<T: Real>(dir: &Path, model: &PuModel<T>, prefix: &str) -> Result<Vec<PathBuf>> {
    let h = model.mesh().element_size();
    let mut written = Vec::new();
    for (k, mode) in model.modes().iter().enumerate() {
        let micro = dir.join(format!("{prefix}mode_{}_micro.csv", k + 1));
        write_columns(&micro, &["local_coordinate", "micro_value"], &[&mode.micro.coordinates(h), mode.micro.samples()])?;
        let macro_path = dir.join(format!("{prefix}mode_{}_macro.csv", k + 1));
        let coeffs = model.macro_coefficients(k)?;
        write_columns(&macro_path, &["macro_node", "macro_value"], &[model.mesh().macro_nodes(), &coeffs])?;
        written.push(micro);
        written.push(macro_path);
    }
    Ok(written)
}

/// Per-mode micro (`local_coordinate,micro_value`) and macro
/// (`macro_center,macro_value`) files plus `singular_values.csv`.
pub fn write_decomposition_components<T: Real>(dir: &Path, dec: &MultiscaleDecomposition<T>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for k in 0..dec.modes {
        let micro = dir.join(format!("mode_{}_micro.csv", k + 1));
        write_columns(&micro, &["local_coordinate", "micro_value"], &[&dec.local_coordinates, &dec.micro_component(k)])?;
        let macro_path = dir.join(format!("mode_{}_macro.csv", k + 1));
        write_columns(&macro_path, &["macro_center", "macro_value"], &[&dec.macro_centers, &dec.macro_component(k)])?;
        written.push(micro);
        written.push(macro_path);
    }
    let sv = dir.join("singular_values.csv");
    let index: Vec<T> = (1..=dec.modes).map(T::count).collect();
    let mut mse = dec.mse_by_rank.clone();
    mse.resize(dec.modes, T::nan());
    write_columns(&sv, &["mode", "singular_value", "mse"], &[&index, &dec.decomposition.singular_values, &mse])?;
    written.push(sv);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_dataset, DatasetConfig, SystemKind, SystemSpec};

    #[test]
    fn dataset_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SystemSpec::<f64>::new(SystemKind::Pendulum);
        let ds = generate_dataset(&spec, &DatasetConfig { n_trajectories: 3, steps: 20, ..DatasetConfig::default() }).unwrap();
        let p = dir.path().join("d.csv");
        write_dataset(&p, &ds).unwrap();
        let back: TrajectoryDataset<f64> = read_dataset(&p).unwrap();
        assert_eq!(back, ds);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("x0,x1,dx0,dx1\n"));
    }

    #[test]
    fn bad_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x,dxdt\n1,abc\n").unwrap();
        assert!(matches!(read_dataset::<f64>(&p), Err(Error::Format(_))));
        std::fs::write(&p, "a,b,c\n1,2,3\n").unwrap();
        assert!(matches!(read_dataset::<f64>(&p), Err(Error::Format(_))));
        std::fs::write(&p, "x,dxdt\n").unwrap();
        assert!(matches!(read_dataset::<f64>(&p), Err(Error::Format(_))));
        assert!(matches!(read_dataset::<f64>(&dir.path().join("none.csv")), Err(Error::Io(_))));
    }

    #[test]
    fn observations_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let obs = ObservationSet::new(
            2,
            3,
            vec![Observation { i: 0, j: 2, value: 0.1 }, Observation { i: 1, j: 0, value: -3.5e-9 }],
        )
        .unwrap();
        let p = dir.path().join("o.csv");
        write_observations(&p, &obs).unwrap();
        assert_eq!(read_observations::<f64>(&p, 2, 3).unwrap(), obs);
        assert!(read_observations::<f64>(&p, 1, 3).is_err());
    }

    #[test]
    fn shortest_roundtrip_formatting() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_columns(&p, &["a"], &[&[0.1f64, 1.0, 1e-20]]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a\n0.1\n1\n0.00000000000000000001\n");
    }
}
