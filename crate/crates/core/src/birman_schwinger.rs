//! Restriction to measure atoms and the operators T, W_l, Q_l.

use ndarray::{Array1, Array2, Axis};

use crate::elliptic::{Grid, OperatorMatrix};
use crate::error::{invalid, Result};
use crate::linalg;
use crate::measures::DiscreteMeasure;
use crate::weights::Perturbation;

/// Sparse interpolation rows: one row per atom, at most 2^N entries each.
#[derive(Clone, Debug, PartialEq)]
pub struct RestrictionMatrix {
    rows: Vec<Vec<(usize, f64)>>,
    n_nodes: usize,
}

impl RestrictionMatrix {
    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn n_atoms(&self) -> usize {
        self.rows.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows.len(), self.n_nodes));
        for (k, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[[k, j]] += w;
            }
        }
        out
    }

    /// γ u for a grid vector u.
    pub fn apply(&self, u: &Array1<f64>) -> Array1<f64> {
        self.rows.iter().map(|r| r.iter().map(|&(j, w)| w * u[j]).sum()).collect()
    }
}

/// Multilinear interpolation with coordinates clamped to the node hull.
///
/// Clamping keeps the rows a partition of unity up to ∂Ω, consistent with
/// the reflection closure of the grid operator.
pub fn restriction_matrix(grid: &Grid, m: &DiscreteMeasure) -> Result<RestrictionMatrix> {
    if m.ambient_dim() != grid.dim() {
        return invalid("measure and grid live in different dimensions");
    }
    let mut rows = Vec::with_capacity(m.len());
    for k in 0..m.len() {
        let x = m.atom(k);
        if !grid.bbox().contains(x) {
            return invalid(format!("atom {k} lies outside the grid box"));
        }
        let mut row: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
        for a in 0..grid.dim() {
            let n = grid.shape()[a];
            let s = ((x[a] - grid.bbox().lo[a]) / grid.spacing()[a] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (s.floor() as usize).min(n - 2);
            let f = s - i0 as f64;
            let mut next = Vec::with_capacity(row.len() * 2);
            for (idx, w) in &row {
                for (i, wi) in [(i0, 1.0 - f), (i0 + 1, f)] {
                    if wi != 0.0 {
                        let mut j = idx.clone();
                        j.push(i);
                        next.push((j, w * wi));
                    }
                }
            }
            row = next;
        }
        rows.push(row.into_iter().map(|(idx, w)| (grid.linear(&idx), w)).collect());
    }
    Ok(RestrictionMatrix { rows, n_nodes: grid.len() })
}

/// Symmetric Birman–Schwinger type operator A^{-l} γᵀ diag(h^{-N} wV) γ A^{-l}.
#[derive(Clone, Debug)]
pub struct BSOperator {
    pub matrix: Array2<f64>,
    pub l: f64,
}

impl BSOperator {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn eigenvalues(&self) -> Result<Array1<f64>> {
        linalg::eigvalsh(&self.matrix.view())
    }
}

fn check_half_integer(l: f64) -> Result<()> {
    if !(l >= 0.5 && (2.0 * l).fract() == 0.0) {
        return invalid(format!("power {l} must be a half-integer ≥ 1/2"));
    }
    Ok(())
}

fn check_sizes(a: &OperatorMatrix, g: &RestrictionMatrix, p: &Perturbation) -> Result<()> {
    if g.n_nodes() != a.dim() || g.n_atoms() != p.values().len() {
        return invalid("operator, restriction and weight sizes do not match");
    }
    Ok(())
}

/// Per-atom coupling h^{-N} w_k V_k under the Euclidean convention.
pub fn coupling(a: &OperatorMatrix, p: &Perturbation) -> Array1<f64> {
    p.weighted() / a.grid().cell_volume()
}

/// γ A^{-l} as a dense atoms × nodes matrix.
pub fn restricted_inverse_power(a: &OperatorMatrix, g: &RestrictionMatrix, l: f64) -> Result<Array2<f64>> {
    if g.n_nodes() != a.dim() {
        return invalid("restriction matrix does not match the operator");
    }
    Ok(a.apply_inverse_power(l, &g.to_dense().reversed_axes())?.reversed_axes())
}

pub fn bs_operator(a: &OperatorMatrix, g: &RestrictionMatrix, p: &Perturbation, l: f64) -> Result<BSOperator> {
    check_half_integer(l)?;
    check_sizes(a, g, p)?;
    let x = restricted_inverse_power(a, g, l)?;
    let c = coupling(a, p);
    let cx = &x * &c.insert_axis(Axis(1));
    let matrix = linalg::symmetrized(&x.t().dot(&cx).view());
    Ok(BSOperator { matrix, l })
}

/// Q_l = diag((h^{-N} w)^{1/2} G) γ A^{-l}; QᵀQ is the operator with V = G².
pub fn q_operator(a: &OperatorMatrix, g: &RestrictionMatrix, density: &Perturbation, l: f64) -> Result<Array2<f64>> {
    check_half_integer(l)?;
    check_sizes(a, g, density)?;
    if density.values().iter().any(|&v| v < 0.0) {
        return invalid("Q_l density must be nonnegative");
    }
    let scale = (density.measure().weights() / a.grid().cell_volume()).mapv(f64::sqrt) * density.values();
    let x = restricted_inverse_power(a, g, l)?;
    Ok(x * &scale.insert_axis(Axis(1)))
}

/// min eig(I + T).
pub fn positivity_margin(t: &BSOperator) -> Result<f64> {
    let ev = t.eigenvalues()?;
    Ok(1.0 + ev.first().copied().unwrap_or(0.0))
}
