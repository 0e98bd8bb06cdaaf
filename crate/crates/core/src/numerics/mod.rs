//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod graph;
mod linalg;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch in {op} at node {node}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        node: usize,
        expected: String,
        actual: String,
    },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable {id} does not belong to this graph ({len} nodes)")]
    UnknownVar { id: usize, len: usize },
    #[error("backward called on an empty graph; run a forward pass first")]
    EmptyGraph,
    #[error("invalid argument to {op}: {message}")]
    InvalidArgument { op: &'static str, message: String },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
    #[error("non-finite gradient estimate at component {component} (analytic {analytic}, central {central})")]
    NonFinite {
        component: usize,
        analytic: f64,
        central: f64,
    },
}

/// Tape and central-difference gradients of a scalar function, component by
/// component.
#[derive(Debug, Clone, PartialEq)]
pub struct FdComparison {
    pub analytic: Vec<f64>,
    pub central: Vec<f64>,
}

impl FdComparison {
    /// Largest per-component `|a - c| / (|a| + |c| + 1e-12)`.
    pub fn max_relative(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.central)
            .map(|(a, c)| (a - c).abs() / (a.abs() + c.abs() + 1e-12))
            .fold(0.0, f64::max)
    }

    /// `‖a - c‖ / (‖a‖ + ‖c‖ + 1e-12)` over the whole gradient vector.
    ///
    /// Unlike [`Self::max_relative`] this is not dominated by components whose
    /// true value sits below the roundoff floor of the central difference.
    pub fn normwise_relative(&self) -> f64 {
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut self.analytic.iter().zip(&self.central).map(|(a, c)| a - c));
        diff / (norm(&mut self.analytic.iter().copied()) + norm(&mut self.central.iter().copied()) + 1e-12)
    }
}

/// Tape gradient of `f` at `x` next to central differences with step `h`.
///
/// `f` builds a scalar from its input variable on the given graph.
pub fn finite_diff_gradients<F>(f: F, x: &Tensor, h: f64) -> Result<FdComparison, NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(NumericsError::InvalidStep(h));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).expect("param has a gradient").to_vec();

    let eval = |t: Tensor| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        g.value(out).item()
    };

    let mut central = Vec::with_capacity(analytic.len());
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let c = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !a.is_finite() || !c.is_finite() {
            return Err(NumericsError::NonFinite {
                component: i,
                analytic: a,
                central: c,
            });
        }
        central.push(c);
    }
    Ok(FdComparison { analytic, central })
}

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// Returns the largest per-component `|a - c| / (|a| + |c| + 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    Ok(finite_diff_gradients(f, x, h)?.max_relative())
}
