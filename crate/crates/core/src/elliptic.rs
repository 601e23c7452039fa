//! Finite-difference Neumann and Robin realizations of A = L + t on box grids.
//!
//! Nodes are cell centers, x_i = lo + (i + ½)h, with reflection (ghost node)
//! closure at the boundary. Matrices act on node values with the Euclidean
//! inner product: the h^N cell volume is divided out of every form once, at
//! assembly, so that ∫|u|² V dμ enters as h^{-N} γᵀ diag(wV) γ.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::birman_schwinger::{restriction_matrix, RestrictionMatrix};
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::measures::BBox;
use crate::weights::Perturbation;

pub const DEFAULT_NODE_CAP: usize = 5000;

/// Smallest admissible eigenvalue of a coefficient matrix.
pub const ELLIPTICITY_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    bbox: BBox,
    shape: Vec<usize>,
    spacing: Vec<f64>,
}

impl Grid {
    pub fn new(bbox: BBox, shape: &[usize]) -> Result<Self> {
        Self::with_cap(bbox, shape, DEFAULT_NODE_CAP)
    }

    pub fn with_cap(bbox: BBox, shape: &[usize], cap: usize) -> Result<Self> {
        let n = bbox.dim();
        if !(1..=2).contains(&n) || shape.len() != n {
            return invalid("grids are 1D or 2D with one node count per axis");
        }
        if shape.iter().any(|&s| s < 3) {
            return invalid("at least 3 nodes per axis");
        }
        if (0..n).any(|a| bbox.extent(a) <= 0.0) {
            return invalid("grid box must have positive extent");
        }
        let count: usize = shape.iter().product();
        if count > cap {
            return Err(Error::Cap { what: "node", count, cap });
        }
        let spacing = (0..n).map(|a| bbox.extent(a) / shape[a] as f64).collect();
        Ok(Self { bbox, shape: shape.to_vec(), spacing })
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Axis 0 varies slowest.
    pub fn linear(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn multi(&self, mut k: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            out[a] = k % self.shape[a];
            k /= self.shape[a];
        }
        out
    }

    pub fn coordinate(&self, axis: usize, i: usize) -> f64 {
        self.bbox.lo[axis] + (i as f64 + 0.5) * self.spacing[axis]
    }

    pub fn node(&self, k: usize) -> Vec<f64> {
        self.multi(k).iter().enumerate().map(|(a, &i)| self.coordinate(a, i)).collect()
    }

    pub fn nodes(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), self.dim()));
        for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for (a, x) in self.node(k).into_iter().enumerate() {
                row[a] = x;
            }
        }
        out
    }
}

/// Symmetric coefficient matrices a(X) per node and the shift t.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    dim: usize,
    /// Row-major N×N blocks, one per node.
    a: Vec<f64>,
    shift: f64,
    constant: bool,
}

fn min_eig_small(m: &[f64], n: usize) -> f64 {
    match n {
        1 => m[0],
        2 => {
            let (p, q, r) = (m[0], 0.5 * (m[1] + m[2]), m[3]);
            0.5 * (p + r) - (0.25 * (p - r).powi(2) + q * q).sqrt()
        }
        _ => f64::NAN,
    }
}

impl CoefficientField {
    pub fn constant(grid: &Grid, a: ArrayView2<f64>, shift: f64) -> Result<Self> {
        let n = grid.dim();
        if a.dim() != (n, n) {
            return invalid("coefficient matrix must be N×N");
        }
        let block: Vec<f64> = a.iter().copied().collect();
        let mut field = Self::from_blocks(n, block.repeat(grid.len()), shift)?;
        field.constant = true;
        Ok(field)
    }

    pub fn isotropic(grid: &Grid, c: f64, shift: f64) -> Result<Self> {
        let n = grid.dim();
        Self::constant(grid, (Array2::<f64>::eye(n) * c).view(), shift)
    }

    pub fn laplacian(grid: &Grid, shift: f64) -> Result<Self> {
        Self::isotropic(grid, 1.0, shift)
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> Array2<f64>, shift: f64) -> Result<Self> {
        let n = grid.dim();
        let mut blocks = Vec::with_capacity(grid.len() * n * n);
        for k in 0..grid.len() {
            let m = f(&grid.node(k));
            if m.dim() != (n, n) {
                return invalid("coefficient matrix must be N×N");
            }
            blocks.extend(m.iter().copied());
        }
        Self::from_blocks(n, blocks, shift)
    }

    fn from_blocks(dim: usize, a: Vec<f64>, shift: f64) -> Result<Self> {
        if !(shift > 0.0 && shift.is_finite()) {
            return invalid(format!("shift t = {shift} must be positive"));
        }
        for (k, b) in a.chunks(dim * dim).enumerate() {
            if b.iter().any(|x| !x.is_finite()) {
                return invalid(format!("non-finite coefficient at node {k}"));
            }
            if dim == 2 && (b[1] - b[2]).abs() > 1e-12 * (b[0].abs() + b[3].abs()) {
                return invalid(format!("coefficient at node {k} is not symmetric"));
            }
            let e = min_eig_small(b, dim);
            if !(e >= ELLIPTICITY_FLOOR) {
                return invalid(format!("coefficient at node {k} is not positive definite (min eig {e:e})"));
            }
        }
        Ok(Self { dim, a, shift, constant: false })
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn with_shift(&self, shift: f64) -> Result<Self> {
        let mut out = Self::from_blocks(self.dim, self.a.clone(), shift)?;
        out.constant = self.constant;
        Ok(out)
    }

    /// Stiffness scaled by `c > 0`, shift unchanged.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let mut out = Self::from_blocks(self.dim, self.a.iter().map(|x| x * c).collect(), self.shift)?;
        out.constant = self.constant;
        Ok(out)
    }

    pub fn at(&self, node: usize) -> Array2<f64> {
        let n = self.dim;
        Array2::from_shape_vec((n, n), self.a[node * n * n..(node + 1) * n * n].to_vec()).expect("block shape")
    }

    fn entry(&self, node: usize, i: usize, j: usize) -> f64 {
        self.a[node * self.dim * self.dim + i * self.dim + j]
    }

    fn nodes(&self) -> usize {
        self.a.len() / (self.dim * self.dim)
    }

    /// Diagonal entries when the field is constant with zero off-diagonal part.
    fn separable_diagonal(&self) -> Option<Vec<f64>> {
        if !self.constant {
            return None;
        }
        let n = self.dim;
        let off = (0..n).any(|i| (0..n).any(|j| i != j && self.entry(0, i, j) != 0.0));
        (!off).then(|| (0..n).map(|i| self.entry(0, i, i)).collect())
    }
}

/// Symmetric sparse rows, each sorted by column.
#[derive(Clone, Debug, PartialEq)]
struct SparseSym {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseSym {
    fn from_triplets(n: usize, trip: BTreeMap<(usize, usize), f64>) -> Self {
        let mut rows = vec![Vec::new(); n];
        for ((i, j), v) in trip {
            if v != 0.0 {
                rows[i].push((j, v));
            }
        }
        Self { rows }
    }

    fn to_dense(&self) -> Array2<f64> {
        let n = self.rows.len();
        let mut out = Array2::zeros((n, n));
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                out[[i, j]] = v;
            }
        }
        out
    }

    fn matvec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum()).collect()
    }
}

#[derive(Debug)]
enum Factor {
    Dense { values: Array1<f64>, vectors: Array2<f64> },
    Separable { axes: Vec<(Array1<f64>, Array2<f64>)>, values: Array1<f64> },
}

/// Closed-form eigenpairs of the unit-coefficient 1D reflection Laplacian (without shift).
pub fn neumann_1d_eigenpairs(n: usize, h: f64) -> (Array1<f64>, Array2<f64>) {
    let mu = Array1::from_shape_fn(n, |k| (4.0 / (h * h)) * (PI * k as f64 / (2.0 * n as f64)).sin().powi(2));
    let q = Array2::from_shape_fn((n, n), |(i, k)| {
        let c = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        c * (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos()
    });
    (mu, q)
}

/// Symmetric positive-definite matrix of A with a lazily computed eigendecomposition.
#[derive(Debug)]
pub struct OperatorMatrix {
    grid: Grid,
    shift: f64,
    sparse: SparseSym,
    separable: Option<Vec<f64>>,
    factor: OnceLock<std::result::Result<Factor, String>>,
}

impl Clone for OperatorMatrix {
    fn clone(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            shift: self.shift,
            sparse: self.sparse.clone(),
            separable: self.separable.clone(),
            factor: OnceLock::new(),
        }
    }
}

fn add(trip: &mut BTreeMap<(usize, usize), f64>, i: usize, j: usize, v: f64) {
    *trip.entry((i, j)).or_insert(0.0) += v;
}

/// Adds c·(u_i − u_j)² to the form.
fn add_edge(trip: &mut BTreeMap<(usize, usize), f64>, i: usize, j: usize, c: f64) {
    add(trip, i, i, c);
    add(trip, j, j, c);
    add(trip, i, j, -c);
    add(trip, j, i, -c);
}

/// Reflection-closure discretization of Σ a_jj' ∂_j u ∂_j' u + t|u|².
pub fn assemble_neumann(grid: &Grid, coeffs: &CoefficientField) -> Result<OperatorMatrix> {
    if coeffs.dim != grid.dim() || coeffs.nodes() != grid.len() {
        return invalid("coefficient field does not match the grid");
    }
    let mut trip = BTreeMap::new();
    let h = grid.spacing();
    match grid.dim() {
        1 => {
            for i in 0..grid.shape()[0] - 1 {
                let a = 0.5 * (coeffs.entry(i, 0, 0) + coeffs.entry(i + 1, 0, 0));
                add_edge(&mut trip, i, i + 1, a / (h[0] * h[0]));
            }
        }
        _ => {
            let (n0, n1) = (grid.shape()[0], grid.shape()[1]);
            // Dual cells: each corner contributes ¼ gᵀ a g with one-sided differences.
            for i in 0..n0 - 1 {
                for j in 0..n1 - 1 {
                    let c = [
                        grid.linear(&[i, j]),
                        grid.linear(&[i + 1, j]),
                        grid.linear(&[i, j + 1]),
                        grid.linear(&[i + 1, j + 1]),
                    ];
                    let mut a = [[0.0; 2]; 2];
                    for &k in &c {
                        for (p, row) in a.iter_mut().enumerate() {
                            for (q, v) in row.iter_mut().enumerate() {
                                *v += 0.25 * coeffs.entry(k, p, q);
                            }
                        }
                    }
                    // g = G u over the local nodes (00, 10, 01, 11).
                    let corners: [[[f64; 4]; 2]; 4] = [
                        [[-1.0, 1.0, 0.0, 0.0], [-1.0, 0.0, 1.0, 0.0]],
                        [[-1.0, 1.0, 0.0, 0.0], [0.0, -1.0, 0.0, 1.0]],
                        [[0.0, 0.0, -1.0, 1.0], [-1.0, 0.0, 1.0, 0.0]],
                        [[0.0, 0.0, -1.0, 1.0], [0.0, -1.0, 0.0, 1.0]],
                    ];
                    for g in &corners {
                        for r in 0..4 {
                            for s in 0..4 {
                                let mut v = 0.0;
                                for p in 0..2 {
                                    for q in 0..2 {
                                        v += g[p][r] / h[p] * a[p][q] * g[q][s] / h[q];
                                    }
                                }
                                if v != 0.0 {
                                    add(&mut trip, c[r], c[s], 0.25 * v);
                                }
                            }
                        }
                    }
                }
            }
            // Half-width strips between the outer node rows and ∂Ω carry tangential gradients only.
            for (axis, len, other_len) in [(0usize, n0, n1), (1usize, n1, n0)] {
                for side in [0, other_len - 1] {
                    for i in 0..len - 1 {
                        let (p, q) = if axis == 0 { ([i, side], [i + 1, side]) } else { ([side, i], [side, i + 1]) };
                        let (kp, kq) = (grid.linear(&p), grid.linear(&q));
                        let a = 0.5 * (coeffs.entry(kp, axis, axis) + coeffs.entry(kq, axis, axis));
                        add_edge(&mut trip, kp, kq, 0.5 * a / (h[axis] * h[axis]));
                    }
                }
            }
        }
    }
    for k in 0..grid.len() {
        add(&mut trip, k, k, coeffs.shift);
    }
    Ok(OperatorMatrix {
        grid: grid.clone(),
        shift: coeffs.shift,
        sparse: SparseSym::from_triplets(grid.len(), trip),
        separable: coeffs.separable_diagonal(),
        factor: OnceLock::new(),
    })
}

fn on_boundary(bbox: &BBox, x: &[f64]) -> bool {
    let tol = 1e-12 * bbox.diameter().max(1.0);
    x.iter().enumerate().any(|(a, &v)| (v - bbox.lo[a]).abs() <= tol || (v - bbox.hi[a]).abs() <= tol)
}

/// Neumann matrix plus the boundary coupling h^{-N} γᵀ diag(wV) γ.
pub fn assemble_robin(grid: &Grid, coeffs: &CoefficientField, boundary_p: &Perturbation) -> Result<OperatorMatrix> {
    let m = boundary_p.measure();
    if m.ambient_dim() != grid.dim() {
        return invalid("boundary weight lives in a different dimension");
    }
    if (0..m.len()).any(|k| !on_boundary(grid.bbox(), m.atom(k).as_slice().expect("contiguous"))) {
        return invalid("Robin weight must live on boundary atoms");
    }
    let base = assemble_neumann(grid, coeffs)?;
    let gamma = restriction_matrix(grid, m)?;
    let coupling = boundary_p.weighted() / grid.cell_volume();
    let mut trip = BTreeMap::new();
    for (i, row) in base.sparse.rows.iter().enumerate() {
        for &(j, v) in row {
            add(&mut trip, i, j, v);
        }
    }
    for (k, row) in gamma.rows().iter().enumerate() {
        let c = coupling[k];
        if c == 0.0 {
            continue;
        }
        for &(i, wi) in row {
            for &(j, wj) in row {
                add(&mut trip, i, j, c * wi * wj);
            }
        }
    }
    let out = OperatorMatrix {
        grid: grid.clone(),
        shift: coeffs.shift,
        sparse: SparseSym::from_triplets(grid.len(), trip),
        separable: if boundary_p.values().iter().all(|&v| v == 0.0) { base.separable.clone() } else { None },
        factor: OnceLock::new(),
    };
    let lmin = out.min_eigenvalue()?;
    if lmin <= 0.0 {
        return Err(Error::Positivity { margin: lmin, threshold: 0.0 });
    }
    Ok(out)
}

impl OperatorMatrix {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    pub fn is_separable(&self) -> bool {
        self.separable.is_some()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.sparse.to_dense()
    }

    pub fn matvec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.sparse.matvec(x)
    }

    /// Forces the dense eigensolver even where a closed-form factorization exists.
    pub fn without_fast_path(&self) -> Self {
        let mut out = self.clone();
        out.separable = None;
        out
    }

    fn factor(&self) -> Result<&Factor> {
        self.factor.get_or_init(|| self.compute_factor()).as_ref().map_err(|e| Error::Numerical(e.clone()))
    }

    fn compute_factor(&self) -> std::result::Result<Factor, String> {
        if let Some(diag) = &self.separable {
            let axes: Vec<(Array1<f64>, Array2<f64>)> = (0..self.grid.dim())
                .map(|a| {
                    let (mu, q) = neumann_1d_eigenpairs(self.grid.shape()[a], self.grid.spacing()[a]);
                    (mu * diag[a], q)
                })
                .collect();
            let values = match axes.len() {
                1 => &axes[0].0 + self.shift,
                _ => {
                    let (m0, m1) = (&axes[0].0, &axes[1].0);
                    Array1::from_shape_fn(m0.len() * m1.len(), |k| self.shift + m0[k / m1.len()] + m1[k % m1.len()])
                }
            };
            return Ok(Factor::Separable { axes, values });
        }
        let (values, vectors) = linalg::eigh(&self.to_dense().view()).map_err(|e| e.to_string())?;
        Ok(Factor::Dense { values, vectors })
    }

    /// Eigenvalues in mode order (matching the columns of [`Self::modal_vectors`]).
    pub fn modal_values(&self) -> Result<&Array1<f64>> {
        Ok(match self.factor()? {
            Factor::Dense { values, .. } => values,
            Factor::Separable { values, .. } => values,
        })
    }

    /// Orthonormal eigenvectors as columns, in mode order.
    pub fn modal_vectors(&self) -> Result<Array2<f64>> {
        Ok(match self.factor()? {
            Factor::Dense { vectors, .. } => vectors.clone(),
            Factor::Separable { axes, .. } => match axes.len() {
                1 => axes[0].1.clone(),
                _ => kron(&axes[0].1, &axes[1].1),
            },
        })
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Result<Array1<f64>> {
        let mut v = self.modal_values()?.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Array1::from(v))
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.modal_values()?.iter().copied().fold(f64::INFINITY, f64::min))
    }

    /// γQ: restriction rows expressed in the eigenbasis (atoms × modes).
    pub fn project(&self, gamma: &RestrictionMatrix) -> Result<Array2<f64>> {
        if gamma.n_nodes() != self.dim() {
            return invalid("restriction matrix does not match the operator");
        }
        let rows = gamma.rows();
        let mut out = Array2::zeros((rows.len(), self.dim()));
        match self.factor()? {
            Factor::Dense { vectors, .. } => {
                for (r, row) in rows.iter().enumerate() {
                    let mut dst = out.row_mut(r);
                    for &(node, w) in row {
                        dst.scaled_add(w, &vectors.row(node));
                    }
                }
            }
            Factor::Separable { axes, .. } => {
                for (r, row) in rows.iter().enumerate() {
                    let mut dst = out.row_mut(r);
                    for &(node, w) in row {
                        let idx = self.grid.multi(node);
                        match axes.len() {
                            1 => dst.scaled_add(w, &axes[0].1.row(idx[0])),
                            _ => {
                                let (q0, q1) = (axes[0].1.row(idx[0]), axes[1].1.row(idx[1]));
                                let n1 = q1.len();
                                for (k0, &a) in q0.iter().enumerate() {
                                    let wa = w * a;
                                    let mut seg = dst.slice_mut(ndarray::s![k0 * n1..(k0 + 1) * n1]);
                                    seg.scaled_add(wa, &q1);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Q diag(f(λ)) Qᵀ.
    pub fn spectral_function(&self, f: impl Fn(f64) -> f64) -> Result<Array2<f64>> {
        let values = self.modal_values()?.clone();
        let vectors = self.modal_vectors()?;
        Ok(linalg::spectral_apply(&values, &vectors, f))
    }

    /// A^{-s} X.
    pub fn apply_inverse_power(&self, s: f64, x: &Array2<f64>) -> Result<Array2<f64>> {
        if !(s > 0.0) {
            return invalid("inverse power exponent must be positive");
        }
        let values = self.modal_values()?;
        let q = self.modal_vectors()?;
        let mut y = q.t().dot(x);
        for (mut row, &l) in y.axis_iter_mut(Axis(0)).zip(values) {
            row *= l.powf(-s);
        }
        Ok(q.dot(&y))
    }
}

/// A^{-s} through the eigendecomposition.
pub fn inverse_power(a: &OperatorMatrix, s: f64) -> Result<Array2<f64>> {
    if !(s > 0.0 && s.is_finite()) {
        return invalid(format!("inverse power exponent {s} must be positive"));
    }
    a.spectral_function(|l| l.powf(-s))
}

fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(i, j)| a[[i / br, j / bc]] * b[[i % br, j % bc]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::boundary_measure;
    use ndarray_linalg::Solve;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn grid1(n: usize) -> Grid {
        Grid::new(BBox::unit(1), &[n]).unwrap()
    }

    fn grid2(n: usize, m: usize) -> Grid {
        Grid::new(BBox::new(vec![0.0, 0.0], vec![1.0, 1.5]).unwrap(), &[n, m]).unwrap()
    }

    #[test]
    fn one_dimensional_spectrum_closed_form() {
        for &(n, t) in &[(16usize, 1.0), (64, 0.3), (200, 5.0)] {
            let g = grid1(n);
            let a = assemble_neumann(&g, &CoefficientField::laplacian(&g, t).unwrap()).unwrap();
            let h = 1.0 / n as f64;
            let dense = a.without_fast_path().eigenvalues().unwrap();
            let fast = a.eigenvalues().unwrap();
            for k in 0..n {
                let oracle = t + (2.0 / (h * h)) * (1.0 - (k as f64 * PI / n as f64).cos());
                assert!((dense[k] - oracle).abs() <= 1e-10 * oracle, "k={k}");
                assert!((fast[k] - oracle).abs() <= 1e-10 * oracle);
            }
        }
    }

    #[test]
    fn tensor_spectrum_matches_pairwise_sums() {
        let g = grid2(7, 9);
        let t = 0.7;
        let a = assemble_neumann(&g, &CoefficientField::laplacian(&g, t).unwrap()).unwrap();
        let dense = a.without_fast_path().eigenvalues().unwrap();
        let mut sums = Vec::new();
        let e0 = assemble_neumann(
            &Grid::new(BBox::unit(1), &[7]).unwrap(),
            &CoefficientField::laplacian(&grid1(7), t).unwrap(),
        )
        .unwrap()
        .eigenvalues()
        .unwrap();
        let g1 = Grid::new(BBox::new(vec![0.0], vec![1.5]).unwrap(), &[9]).unwrap();
        let e1 = assemble_neumann(&g1, &CoefficientField::laplacian(&g1, t).unwrap()).unwrap().eigenvalues().unwrap();
        for x in &e0 {
            for y in &e1 {
                sums.push(x + y - t);
            }
        }
        sums.sort_by(f64::total_cmp);
        for (a, b) in dense.iter().zip(&sums) {
            assert!((a - b).abs() < 1e-10 * b.max(1.0));
        }
    }

    #[test]
    fn fast_path_matches_dense_factorization() {
        let g = grid2(6, 5);
        let f = CoefficientField::constant(&g, ndarray::arr2(&[[2.0, 0.0], [0.0, 0.5]]).view(), 1.3).unwrap();
        let a = assemble_neumann(&g, &f).unwrap();
        assert!(a.is_separable());
        let dense = a.without_fast_path();
        let (x, y) = (inverse_power(&a, 1.5).unwrap(), inverse_power(&dense, 1.5).unwrap());
        assert!(linalg::relative_residual(&x.view(), &y.view()) < 1e-12);
        let q = a.modal_vectors().unwrap();
        let recon = linalg::spectral_apply(a.modal_values().unwrap(), &q, |l| l);
        assert!(linalg::relative_residual(&recon.view(), &a.to_dense().view()) < 1e-12);
    }

    #[test]
    fn scaling_coefficients_scales_stiffness() {
        let g = grid2(5, 6);
        let f = CoefficientField::from_fn(&g, |x| ndarray::arr2(&[[1.0 + x[0], 0.2], [0.2, 1.0 + x[1] * x[1]]]), 0.5)
            .unwrap();
        let a = assemble_neumann(&g, &f).unwrap().to_dense();
        let b = assemble_neumann(&g, &f.scaled(3.0).unwrap()).unwrap().to_dense();
        let eye = Array2::<f64>::eye(g.len()) * 0.5;
        let lhs = &b - &eye;
        let rhs = (&a - &eye) * 3.0;
        assert!(linalg::relative_residual(&lhs.view(), &rhs.view()) < 1e-13);
    }

    #[test]
    fn variable_coefficients_are_positive() {
        let g = grid2(8, 7);
        let t = 0.25;
        let f = CoefficientField::from_fn(
            &g,
            |x| {
                let c = (3.0 * x[0]).cos() * 0.4;
                ndarray::arr2(&[[1.0 + x[1], c], [c, 0.6 + x[0]]])
            },
            t,
        )
        .unwrap();
        let a = assemble_neumann(&g, &f).unwrap();
        assert!(linalg::asymmetry(&a.to_dense().view()) < 1e-14);
        let ev = a.eigenvalues().unwrap();
        assert!(ev[0] >= t * (1.0 - 1e-10));
        let ones = Array1::ones(g.len());
        let r = a.matvec(&ones) - &ones * t;
        assert!(r.iter().all(|x| x.abs() < 1e-10));
        assert!(CoefficientField::from_fn(&g, |_| ndarray::arr2(&[[1.0, 2.0], [2.0, 1.0]]), t).is_err());
        assert!(CoefficientField::laplacian(&g, 0.0).is_err());
    }

    #[test]
    fn inverse_power_identities() {
        let g = grid2(6, 6);
        let f = CoefficientField::from_fn(&g, |x| ndarray::arr2(&[[1.0 + x[0], 0.0], [0.0, 2.0]]), 1.0).unwrap();
        let a = assemble_neumann(&g, &f).unwrap();
        let dense = a.to_dense();
        let inv = inverse_power(&a, 1.0).unwrap();
        let eye = Array2::<f64>::eye(g.len());
        assert!(linalg::relative_residual(&inv.dot(&dense).view(), &eye.view()) < 1e-10);
        let half = inverse_power(&a, 0.5).unwrap();
        assert!(linalg::relative_residual(&half.dot(&half).view(), &inv.view()) < 1e-10);
        let b = Array1::from_shape_fn(g.len(), |k| (k as f64).sin());
        let x = dense.solve(&b).unwrap();
        let y = inv.dot(&b);
        let err = (&x - &y).iter().map(|v| v * v).sum::<f64>().sqrt() / x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-10, "solve mismatch {err}");
        assert!(inverse_power(&a, 0.0).is_err());
    }

    #[test]
    fn inverse_power_matches_eigen_expansion_1d() {
        let n = 12;
        let g = grid1(n);
        let t = 2.0;
        let a = assemble_neumann(&g, &CoefficientField::laplacian(&g, t).unwrap()).unwrap();
        let inv = inverse_power(&a, 1.0).unwrap();
        let h = 1.0 / n as f64;
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    let c = if k == 0 { 1.0 / n as f64 } else { 2.0 / n as f64 };
                    let phi = |p: usize| (PI * k as f64 * (p as f64 + 0.5) / n as f64).cos();
                    let lam = t + (2.0 / (h * h)) * (1.0 - (k as f64 * PI / n as f64).cos());
                    s += c * phi(i) * phi(j) / lam;
                }
                assert!((inv[[i, j]] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn semigroup_property() {
        let g = grid2(5, 7);
        let a = assemble_neumann(&g, &CoefficientField::laplacian(&g, 0.8).unwrap()).unwrap().without_fast_path();
        for &s1 in &[0.5, 1.0, 1.5] {
            for &s2 in &[0.5, 1.0, 1.5] {
                let lhs = inverse_power(&a, s1).unwrap().dot(&inverse_power(&a, s2).unwrap());
                let rhs = inverse_power(&a, s1 + s2).unwrap();
                assert!(linalg::relative_residual(&lhs.view(), &rhs.view()) < 1e-9);
            }
        }
    }

    #[test]
    fn refinement_converges_quadratically() {
        let t = 1.0;
        let errs: Vec<f64> = [40usize, 80, 160]
            .iter()
            .map(|&n| {
                let g = grid1(n);
                let ev =
                    assemble_neumann(&g, &CoefficientField::laplacian(&g, t).unwrap()).unwrap().eigenvalues().unwrap();
                (0..10).map(|k| (ev[k] - t - (k as f64 * PI).powi(2)).abs()).fold(0.0, f64::max)
            })
            .collect();
        for w in errs.windows(2) {
            let rate = w[0] / w[1];
            assert!((rate - 4.0).abs() < 0.2, "rate {rate}");
        }
    }

    #[test]
    fn robin_zero_weight_and_monotonicity() {
        let g = grid2(6, 6);
        let f = CoefficientField::laplacian(&g, 1.0).unwrap();
        let m = Arc::new(boundary_measure(&g).unwrap());
        let zero = Perturbation::constant(m.clone(), 0.0).unwrap();
        let base = assemble_neumann(&g, &f).unwrap();
        let r0 = assemble_robin(&g, &f, &zero).unwrap();
        assert_eq!(r0.to_dense(), base.to_dense());
        let pos = Perturbation::from_fn(m.clone(), |x| 1.0 + x[0]).unwrap();
        let r = assemble_robin(&g, &f, &pos).unwrap();
        assert!(linalg::asymmetry(&r.to_dense().view()) < 1e-14);
        assert!(r.min_eigenvalue().unwrap() >= base.min_eigenvalue().unwrap() - 1e-12);
        let strong = Perturbation::constant(m, -50.0).unwrap();
        assert!(matches!(assemble_robin(&g, &f, &strong), Err(Error::Positivity { .. })));
    }

    #[test]
    fn robin_rank_one_in_one_dimension() {
        let n = 10;
        let g = grid1(n);
        let f = CoefficientField::laplacian(&g, 1.0).unwrap();
        let m = Arc::new(boundary_measure(&g).unwrap());
        let v = 2.5;
        let p = Perturbation::new(m, ndarray::arr1(&[v, 0.0])).unwrap();
        let diff = assemble_robin(&g, &f, &p).unwrap().to_dense() - assemble_neumann(&g, &f).unwrap().to_dense();
        let h = 1.0 / n as f64;
        let mut expect = Array2::<f64>::zeros((n, n));
        expect[[0, 0]] = v / h;
        assert!(linalg::relative_residual(&diff.view(), &expect.view()) < 1e-14);
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(BBox::unit(2), &[2, 5]).is_err());
        assert!(Grid::new(BBox::unit(2), &[80, 80]).is_err());
        assert!(Grid::with_cap(BBox::unit(2), &[80, 80], 6400).is_ok());
        let g = grid2(4, 3);
        for k in 0..g.len() {
            assert_eq!(g.linear(&g.multi(k)), k);
        }
        assert!((g.node(g.linear(&[1, 2]))[1] - 2.5 * 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn constant_vector_has_eigenvalue_t(n in 3usize..9, m in 3usize..9, t in 0.1f64..10.0, c in 0.2f64..5.0) {
            let g = grid2(n, m);
            let a = assemble_neumann(&g, &CoefficientField::isotropic(&g, c, t).unwrap()).unwrap();
            let ones = Array1::ones(g.len());
            let r = a.matvec(&ones) - &ones * t;
            prop_assert!(r.iter().all(|x| x.abs() < 1e-9 * c * (n * n + m * m) as f64));
            prop_assert!((a.min_eigenvalue().unwrap() - t).abs() < 1e-10 * t.max(1.0));
        }
    }
}
