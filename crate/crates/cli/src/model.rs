use std::path::Path;

use anyhow::{bail, Context};
use mscale::dynamics::{SystemSpec, VectorField};
use mscale::mesh::MultiscaleMesh;
use mscale::pu::{CoupledPuField, CoupledPuModel, PuField, PuModel};
use mscale::shosvd::ShosvdModel;
use mscale::svdscale::MultiscaleDecomposition;
use serde::{Deserialize, Serialize};

use crate::Code;

/// Everything `fit` can produce, tagged by `kind`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFile {
    Pu { system: Option<SystemSpec<f64>>, model: PuModel<f64> },
    PuCoupled { system: Option<SystemSpec<f64>>, model: CoupledPuModel<f64> },
    Svd { system: Option<SystemSpec<f64>>, mesh: MultiscaleMesh<f64>, decomposition: MultiscaleDecomposition<f64> },
    Shosvd { system: Option<SystemSpec<f64>>, mesh: MultiscaleMesh<f64>, model: ShosvdModel<f64> },
}

impl ModelFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        mscale::io::read_json(path).with_context(|| format!("loading model {}", path.display())).context(Code::Usage)
    }

    pub fn method(&self) -> &'static str {
        match self {
            ModelFile::Pu { .. } | ModelFile::PuCoupled { .. } => "pu",
            ModelFile::Svd { .. } => "svd",
            ModelFile::Shosvd { .. } => "shosvd",
        }
    }

    pub fn system(&self) -> Option<&SystemSpec<f64>> {
        match self {
            ModelFile::Pu { system, .. }
            | ModelFile::PuCoupled { system, .. }
            | ModelFile::Svd { system, .. }
            | ModelFile::Shosvd { system, .. } => system.as_ref(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ModelFile::PuCoupled { .. } => 2,
            _ => 1,
        }
    }

    /// Vector field with inputs clamped to the model domain.
    pub fn field(&self) -> anyhow::Result<Box<dyn VectorField<f64> + '_>> {
        Ok(match self {
            ModelFile::Pu { model, .. } => Box::new(PuField::new(model)),
            ModelFile::PuCoupled { model, .. } => Box::new(CoupledPuField::new(model)),
            ModelFile::Svd { mesh, decomposition, .. } => {
                let values = mesh.unfold(&decomposition.decomposition.reconstruct())?;
                Box::new(GridField::new(mesh.fine_nodes().to_vec(), values)?)
            }
            ModelFile::Shosvd { mesh, model, .. } => {
                let values = mesh.unfold(&model.predict_matrix()?)?;
                Box::new(GridField::new(mesh.fine_nodes().to_vec(), values)?)
            }
        })
    }

    /// Predicted derivative for each state.
    pub fn predict(&self, states: &[Vec<f64>]) -> anyhow::Result<Vec<Vec<f64>>> {
        if let Some(s) = states.iter().find(|s| s.len() != self.state_dim()) {
            bail!(crate::coded(
                Code::Usage,
                format!("{}-state model applied to a {}-state sample", self.state_dim(), s.len()),
            ));
        }
        match self {
            ModelFile::Pu { model, .. } => {
                let xs: Vec<f64> = states.iter().map(|s| s[0]).collect();
                Ok(model.eval_many(&xs)?.into_iter().map(|y| vec![y]).collect())
            }
            ModelFile::PuCoupled { model, .. } => {
                let x0: Vec<f64> = states.iter().map(|s| s[0]).collect();
                let x1: Vec<f64> = states.iter().map(|s| s[1]).collect();
                let a = model.a.eval_many(&x0)?;
                let b = model.b.eval_many(&x1)?;
                Ok(b.into_iter().zip(a).map(|(d0, d1)| vec![d0, d1]).collect())
            }
            _ => {
                let mut field = self.field()?;
                states.iter().map(|s| Ok(field.eval(s)?)).collect()
            }
        }
    }
}

/// Piecewise-linear function through grid values, constant beyond the ends.
pub struct GridField {
    nodes: Vec<f64>,
    values: Vec<f64>,
    clamped: bool,
}

impl GridField {
    pub fn new(nodes: Vec<f64>, values: Vec<f64>) -> anyhow::Result<Self> {
        if nodes.len() != values.len() || nodes.is_empty() {
            bail!("grid of {} nodes with {} values", nodes.len(), values.len());
        }
        Ok(Self { nodes, values, clamped: false })
    }

    pub fn value(&mut self, x: f64) -> f64 {
        let (first, last) = (self.nodes[0], self.nodes[self.nodes.len() - 1]);
        if x <= first || x >= last {
            self.clamped |= x < first || x > last;
            return if x <= first { self.values[0] } else { self.values[self.values.len() - 1] };
        }
        let k = self.nodes.partition_point(|&n| n <= x) - 1;
        let w = (x - self.nodes[k]) / (self.nodes[k + 1] - self.nodes[k]);
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }
}

impl VectorField<f64> for GridField {
    fn eval(&mut self, state: &[f64]) -> mscale::Result<Vec<f64>> {
        if state.len() != 1 {
            return Err(mscale::Error::Shape(format!("grid model evaluated on a {}-state", state.len())));
        }
        Ok(vec![self.value(state[0])])
    }

    fn clamped(&self) -> bool {
        self.clamped
    }
}
