//! One-dimensional two-level discretization: `m` macro elements with hat
//! shape functions, each sampled by `n` fine nodes.
//!
//! Folding maps the fine-node vector of length `C = m·n` onto an `n × m`
//! matrix: row `k` is the element-local fine index, column `e` the macro
//! element.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Real;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "MeshRepr<T>", into = "MeshRepr<T>")]
pub struct MultiscaleMesh<T> {
    start: T,
    end: T,
    macro_count: usize,
    micro_per_element: usize,
    macro_nodes: Vec<T>,
    fine_nodes: Vec<T>,
}

/// Support interval `[x_i − h, x_i + h]` of the enrichment attached to macro node `x_i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MicroDomain<T> {
    pub center: T,
    pub half_width: T,
}

impl<T: Real> MicroDomain<T> {
    /// Bounds clipped to `[start, end]`.
    pub fn clipped_bounds(&self, start: T, end: T) -> (T, T) {
        ((self.center - self.half_width).max(start), (self.center + self.half_width).min(end))
    }
}

/// Position of a point relative to the macro elements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Location<T> {
    /// Element `e` with `macro_nodes[e] ≤ x ≤ macro_nodes[e + 1]`.
    pub element: usize,
    /// Local coordinate in `[0, 1]`; the hats of nodes `e` and `e + 1` are `1 − local` and `local`.
    pub local: T,
}

impl<T: Real> Location<T> {
    /// Macro nodes with a nonzero hat at this point, with their hat values.
    pub fn support(&self) -> impl Iterator<Item = (usize, T)> {
        let left = (self.element, T::one() - self.local);
        let right = (self.element + 1, self.local);
        [left, right].into_iter().filter(|&(_, w)| w != T::zero())
    }
}

impl<T: Real> MultiscaleMesh<T> {
    pub fn new(start: T, end: T, macro_count: usize, micro_per_element: usize) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || end <= start {
            return Err(domain_err!("mesh needs finite bounds with end > start, got [{start}, {end}]"));
        }
        if macro_count < 1 {
            return Err(domain_err!("mesh needs at least one macro element"));
        }
        if micro_per_element < 2 {
            return Err(domain_err!("mesh needs at least two fine nodes per element, got {micro_per_element}"));
        }
        let m = T::count(macro_count);
        let len = end - start;
        let mut macro_nodes: Vec<T> = (0..=macro_count).map(|i| start + len * T::count(i) / m).collect();
        macro_nodes[macro_count] = end;
        let n = T::count(micro_per_element);
        let mut fine_nodes = Vec::with_capacity(macro_count * micro_per_element);
        for e in 0..macro_count {
            let (a, b) = (macro_nodes[e], macro_nodes[e + 1]);
            for k in 0..micro_per_element {
                fine_nodes.push(a + (b - a) * T::count(k) / n);
            }
        }
        Ok(Self { start, end, macro_count, micro_per_element, macro_nodes, fine_nodes })
    }

    pub fn start(&self) -> T {
        self.start
    }

    pub fn end(&self) -> T {
        self.end
    }

    /// Number of macro elements `m`.
    pub fn macro_count(&self) -> usize {
        self.macro_count
    }

    /// Fine nodes per element `n`.
    pub fn micro_per_element(&self) -> usize {
        self.micro_per_element
    }

    /// `C = m·n`.
    pub fn fine_count(&self) -> usize {
        self.macro_count * self.micro_per_element
    }

    /// Macro element size `h`.
    pub fn element_size(&self) -> T {
        (self.end - self.start) / T::count(self.macro_count)
    }

    pub fn macro_nodes(&self) -> &[T] {
        &self.macro_nodes
    }

    pub fn fine_nodes(&self) -> &[T] {
        &self.fine_nodes
    }

    /// Centers of the macro elements.
    pub fn element_centers(&self) -> Vec<T> {
        self.macro_nodes.windows(2).map(|w| (w[0] + w[1]) / T::lit(2.0)).collect()
    }

    /// Offsets of the fine nodes from their element's left node (`k·h/n`).
    pub fn local_offsets(&self) -> Vec<T> {
        let h = self.element_size();
        let n = T::count(self.micro_per_element);
        (0..self.micro_per_element).map(|k| h * T::count(k) / n).collect()
    }

    pub fn contains(&self, x: T) -> bool {
        x >= self.start && x <= self.end
    }

    pub fn micro_domain(&self, i: usize) -> Result<MicroDomain<T>> {
        if i > self.macro_count {
            return Err(domain_err!("macro node index {i} out of range 0..={}", self.macro_count));
        }
        Ok(MicroDomain { center: self.macro_nodes[i], half_width: self.element_size() })
    }

    pub fn locate(&self, x: T) -> Result<Location<T>> {
        if !self.contains(x) {
            return Err(domain_err!("x = {x} outside mesh domain [{}, {}]", self.start, self.end));
        }
        let m = self.macro_count;
        let guess = ((x - self.start) / self.element_size()).floor().to_usize().unwrap_or(0);
        let mut e = guess.min(m - 1);
        while e > 0 && x < self.macro_nodes[e] {
            e -= 1;
        }
        while e + 1 < m && x >= self.macro_nodes[e + 1] {
            e += 1;
        }
        let (a, b) = (self.macro_nodes[e], self.macro_nodes[e + 1]);
        let local = ((x - a) / (b - a)).max(T::zero()).min(T::one());
        Ok(Location { element: e, local })
    }

    /// Hat function `N_i(x)`.
    pub fn hat(&self, i: usize, x: T) -> Result<T> {
        if i > self.macro_count {
            return Err(domain_err!("macro node index {i} out of range 0..={}", self.macro_count));
        }
        let loc = self.locate(x)?;
        Ok(if i == loc.element {
            T::one() - loc.local
        } else if i == loc.element + 1 {
            loc.local
        } else {
            T::zero()
        })
    }

    /// `Σ_i N_i(x)`, which is one everywhere in the domain.
    pub fn pu_sum(&self, x: T) -> Result<T> {
        self.locate(x)?;
        (0..=self.macro_count).map(|i| self.hat(i, x)).sum()
    }

    /// Reshapes a fine-node vector into the `n × m` matrix whose column `e`
    /// holds element `e`'s fine values.
    pub fn fold(&self, values: &[T]) -> Result<DenseMatrix<T>> {
        if values.len() != self.fine_count() {
            return Err(shape_err!("fold expects {} values, got {}", self.fine_count(), values.len()));
        }
        let n = self.micro_per_element;
        Ok(DenseMatrix::from_fn(n, self.macro_count, |k, e| values[e * n + k]))
    }

    /// Inverse of [`fold`](Self::fold).
    pub fn unfold(&self, matrix: &DenseMatrix<T>) -> Result<Vec<T>> {
        let n = self.micro_per_element;
        if matrix.shape() != (n, self.macro_count) {
            return Err(shape_err!(
                "unfold expects a {}x{} matrix, got {:?}",
                n,
                self.macro_count,
                matrix.shape()
            ));
        }
        let mut out = Vec::with_capacity(self.fine_count());
        for e in 0..self.macro_count {
            for k in 0..n {
                out.push(matrix[(k, e)]);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct MeshRepr<T> {
    start: T,
    end: T,
    m: usize,
    n: usize,
    version: u32,
}

impl<T: Real> TryFrom<MeshRepr<T>> for MultiscaleMesh<T> {
    type Error = Error;

    fn try_from(r: MeshRepr<T>) -> Result<Self> {
        if r.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported mesh format version {}", r.version)));
        }
        Self::new(r.start, r.end, r.m, r.n)
    }
}

impl<T: Real> From<MultiscaleMesh<T>> for MeshRepr<T> {
    fn from(mesh: MultiscaleMesh<T>) -> Self {
        MeshRepr {
            start: mesh.start,
            end: mesh.end,
            m: mesh.macro_count,
            n: mesh.micro_per_element,
            version: FORMAT_VERSION,
        }
    }
}
