//! Perturbed inverses, resolvent differences and differences of resolvent powers.
//!
//! Dense routines evaluate every identity on full node-space matrices. The
//! [`ModalCoupling`] route works in the eigenbasis of A and only ever forms
//! atom-sized matrices, which is what large spectral experiments use.

use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::QR;

use crate::birman_schwinger::{bs_operator, coupling, restricted_inverse_power, BSOperator, RestrictionMatrix};
use crate::elliptic::{inverse_power, OperatorMatrix};
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::weights::Perturbation;

/// Default lower bound on min eig(I + T).
pub const DEFAULT_MARGIN: f64 = 0.05;

/// Largest supported resolvent power.
pub const MAX_POWER: usize = 4;

/// A perturbation wired to an operator: T = T_V with l = 1/2 and its spectral data.
///
/// T = Xᵀ c X with X = γA^{-1/2} has rank at most the atom count k, so its
/// eigenpairs come from a thin QR of (|c|^{1/2}X)ᵀ and a k × k eigenproblem.
/// On the orthogonal complement of the returned vectors T vanishes.
pub struct BsSystem<'a> {
    a: &'a OperatorMatrix,
    gamma: &'a RestrictionMatrix,
    p: &'a Perturbation,
    t: BSOperator,
    t_values: Array1<f64>,
    /// A^{-1/2} V for the eigenvectors V of T (columns).
    half_vectors: Array2<f64>,
    a_inv: Array2<f64>,
    /// True when the eigenvectors span only part of node space.
    thin: bool,
}

impl<'a> BsSystem<'a> {
    pub fn new(a: &'a OperatorMatrix, gamma: &'a RestrictionMatrix, p: &'a Perturbation) -> Result<Self> {
        let t = bs_operator(a, gamma, p, 0.5)?;
        let n = a.dim();
        let (t_values, vectors, thin) = if gamma.n_atoms() < n {
            let x = restricted_inverse_power(a, gamma, 0.5)?;
            let c = coupling(a, p);
            let y = (&x * &c.mapv(|v| v.abs().sqrt()).insert_axis(Axis(1))).reversed_axes();
            let (q, r) = y.qr().map_err(|e| Error::Numerical(format!("qr: {e}")))?;
            let core = r.dot(&(&r.t() * &c.mapv(f64::signum).insert_axis(Axis(1))));
            let (values, p_vecs) = linalg::eigh(&core.view())?;
            (values, q.dot(&p_vecs), true)
        } else {
            let (values, vectors) = linalg::eigh(&t.matrix.view())?;
            (values, vectors, false)
        };
        let half_vectors = a.apply_inverse_power(0.5, &vectors)?;
        let a_inv = inverse_power(a, 1.0)?;
        Ok(Self { a, gamma, p, t, t_values, half_vectors, a_inv, thin })
    }

    pub fn operator(&self) -> &OperatorMatrix {
        self.a
    }

    pub fn t(&self) -> &BSOperator {
        &self.t
    }

    /// min eig(I + T).
    pub fn margin(&self) -> f64 {
        let lowest = self.t_values.first().copied().unwrap_or(0.0);
        1.0 + if self.thin { lowest.min(0.0) } else { lowest }
    }

    fn check(&self, threshold: f64) -> Result<()> {
        let margin = self.margin();
        if margin <= threshold {
            return Err(Error::Positivity { margin, threshold });
        }
        Ok(())
    }

    /// A^{-1/2} g(T) A^{-1/2} = g(0)A^{-1} + A^{-1/2}V (g(D) − g(0)) VᵀA^{-1/2}.
    fn sandwich(&self, g: impl Fn(f64) -> f64) -> Array2<f64> {
        let g0 = g(0.0);
        let shifted = self.t_values.mapv(|x| g(x) - g0);
        let scaled = &self.half_vectors * &shifted.insert_axis(Axis(0));
        let mut out = scaled.dot(&self.half_vectors.t());
        if g0 != 0.0 {
            out.scaled_add(g0, &self.a_inv);
        }
        out
    }

    /// W = A^{-1/2} T A^{-1/2}.
    fn w(&self) -> Array2<f64> {
        self.sandwich(|x| x)
    }

    /// Z = A^{-1/2} T(1+T)^{-1}T A^{-1/2}.
    fn z(&self) -> Array2<f64> {
        self.sandwich(|x| x * x / (1.0 + x))
    }
}

/// A difference matrix with its labeled decomposition and the two-path residual.
#[derive(Clone, Debug)]
pub struct ResolventReport {
    pub difference: Array2<f64>,
    pub terms: Vec<(String, Array2<f64>)>,
    /// Relative Frobenius distance between the two evaluation paths.
    pub residual: f64,
    pub margins: Vec<f64>,
}

impl ResolventReport {
    pub fn term(&self, label: &str) -> Option<&Array2<f64>> {
        self.terms.iter().find(|(l, _)| l == label).map(|(_, m)| m)
    }
}

/// A_V^{-1} = A^{-1/2}(I + T)^{-1}A^{-1/2}.
pub fn perturbed_inverse(sys: &BsSystem, threshold: f64) -> Result<Array2<f64>> {
    sys.check(threshold)?;
    Ok(sys.sandwich(|x| 1.0 / (1.0 + x)))
}

/// R_V = A^{-1} − A_V^{-1} = R¹ − R².
///
/// R¹ is evaluated as (FγA^{-1})* U (FγA^{-1}); the other path is the direct
/// difference of inverses.
pub fn resolvent_difference(sys: &BsSystem, threshold: f64) -> Result<ResolventReport> {
    sys.check(threshold)?;
    let x = restricted_inverse_power(sys.a, sys.gamma, 1.0)?;
    let c = coupling(sys.a, sys.p);
    let r1 = linalg::symmetrized(&x.t().dot(&(&x * &c.insert_axis(Axis(1)))).view());
    let r2 = sys.z();
    let diff = &r1 - &r2;
    let direct = &sys.a_inv - &perturbed_inverse(sys, threshold)?;
    let residual = linalg::relative_residual(&diff.view(), &direct.view());
    Ok(ResolventReport {
        difference: diff,
        terms: vec![("R1".into(), r1), ("R2".into(), r2)],
        residual,
        margins: vec![sys.margin()],
    })
}

/// R^{(1,2)} = A^{-1/2}(T₁ − T₂)A^{-1/2} − Z₁ + Z₂ = A_{V₂}^{-1} − A_{V₁}^{-1}.
pub fn two_weight_difference(s1: &BsSystem, s2: &BsSystem, threshold: f64) -> Result<ResolventReport> {
    if !std::ptr::eq(s1.a, s2.a) && s1.a.to_dense() != s2.a.to_dense() {
        return invalid("two-weight difference needs a common unperturbed operator");
    }
    s1.check(threshold)?;
    s2.check(threshold)?;
    let main = &s1.w() - &s2.w();
    let (z1, z2) = (s1.z(), s2.z());
    let diff = &main - &z1 + &z2;
    let direct = perturbed_inverse(s2, threshold)? - perturbed_inverse(s1, threshold)?;
    let residual = linalg::relative_residual(&diff.view(), &direct.view());
    Ok(ResolventReport {
        difference: diff,
        terms: vec![("main".into(), main), ("Z1".into(), z1), ("Z2".into(), z2)],
        residual,
        margins: vec![s1.margin(), s2.margin()],
    })
}

/// Σ over compositions of `total` into `parts` nonnegative integers.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// A_V^{-m} − A^{-m} with the H2/H3/H4 decomposition.
///
/// H2 carries the single −W insertions and H3 the double W insertions.
/// H4 is what remains of the expanded product (A^{-1} − W + W′)^m − A^{-m};
/// the residual compares that expansion against the direct power difference.
pub fn power_difference(sys: &BsSystem, m: usize, threshold: f64) -> Result<ResolventReport> {
    if !(1..=MAX_POWER).contains(&m) {
        return invalid(format!("power m = {m} outside 1..={MAX_POWER}"));
    }
    sys.check(threshold)?;
    let inv = &sys.a_inv;
    // pows[k] = A^{-k}; index 0 stands for the identity and is never multiplied.
    let mut pows = vec![Array2::<f64>::zeros((0, 0)), inv.clone()];
    for k in 2..=m {
        pows.push(pows[k - 1].dot(inv));
    }
    let sided = |k: usize, x: Array2<f64>, left: bool| -> Array2<f64> {
        match (k, left) {
            (0, _) => x,
            (_, true) => pows[k].dot(&x),
            (_, false) => x.dot(&pows[k]),
        }
    };
    let w = sys.w();
    let wp = sys.z();
    let p = perturbed_inverse(sys, threshold)?;
    let mut pm = p.clone();
    for _ in 1..m {
        pm = pm.dot(&p);
    }
    let direct = &pm - &pows[m];

    let n = sys.a.dim();
    let mut h2 = Array2::<f64>::zeros((n, n));
    for c in compositions(m - 1, 2) {
        h2 -= &sided(c[1], sided(c[0], w.clone(), true), false);
    }
    let mut h3 = Array2::<f64>::zeros((n, n));
    if m >= 2 {
        for c in compositions(m - 2, 3) {
            let mid = w.dot(&sided(c[1], w.clone(), true));
            h3 += &sided(c[2], sided(c[0], mid, true), false);
        }
    }
    let step = inv - &w + &wp;
    let mut total = step.clone();
    for _ in 1..m {
        total = total.dot(&step);
    }
    total -= &pows[m];
    let h4 = &total - &h2 - &h3;
    let residual = linalg::relative_residual(&total.view(), &direct.view());
    Ok(ResolventReport {
        difference: direct,
        terms: vec![("H2".into(), h2), ("H3".into(), h3), ("H4".into(), h4)],
        residual,
        margins: vec![sys.margin()],
    })
}

/// Atom-space view of A: B = γQ and the eigenvalues λ of A in mode order.
///
/// With E = BΛ^{-1} and a per-atom coupling c = h^{-N} wV, the resolvent
/// difference is R_V = Eᵀ N E with N = c(I + K₀c)^{-1}, K₀ = BΛ^{-1}Bᵀ.
pub struct ModalCoupling {
    b: Array2<f64>,
    lam: Array1<f64>,
    k0: Array2<f64>,
}

/// Signed spectra of a power difference and its leading expansion groups.
#[derive(Clone, Debug)]
pub struct PowerSpectra {
    pub m: usize,
    pub total: Array1<f64>,
    pub h2: Array1<f64>,
    pub h3: Array1<f64>,
    /// Relative distance between the telescoped and the direct projected differences.
    pub residual: f64,
}

impl ModalCoupling {
    pub fn new(a: &OperatorMatrix, gamma: &RestrictionMatrix) -> Result<Self> {
        let b = a.project(gamma)?;
        let lam = a.modal_values()?.clone();
        let k0 = Self::gram(&b, &lam, 1.0);
        Ok(Self { b, lam, k0 })
    }

    fn gram(b: &Array2<f64>, lam: &Array1<f64>, power: f64) -> Array2<f64> {
        let scaled = b * &lam.mapv(|l| l.powf(-power)).insert_axis(Axis(0));
        linalg::symmetrized(&scaled.dot(&b.t()).view())
    }

    pub fn n_atoms(&self) -> usize {
        self.b.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.b.ncols()
    }

    fn check_len(&self, c: &Array1<f64>) -> Result<()> {
        if c.len() != self.n_atoms() {
            return invalid("coupling vector length differs from atom count");
        }
        Ok(())
    }

    /// F, U and R = (F K_l F)^{1/2} for the coupling c = F U F.
    fn factors(&self, c: &Array1<f64>, l: f64) -> Result<(Array1<f64>, Array1<f64>, Array2<f64>)> {
        self.check_len(c)?;
        let kl = if l == 0.5 { self.k0.clone() } else { Self::gram(&self.b, &self.lam, 2.0 * l) };
        let f = c.mapv(|x| x.abs().sqrt());
        let u = c.mapv(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        let k = &kl * &f.view().insert_axis(Axis(1)) * f.view().insert_axis(Axis(0));
        Ok((f, u, linalg::psd_sqrt(&k.view())?))
    }

    /// Nonzero spectrum of T_l = A^{-l}γᵀ diag(c) γA^{-l}, padded with zeros to the atom count.
    pub fn bs_eigenvalues(&self, c: &Array1<f64>, l: f64) -> Result<Array1<f64>> {
        let (_, u, root) = self.factors(c, l)?;
        linalg::eigvalsh(&root.dot(&(&root * &u.insert_axis(Axis(1)))).view())
    }

    /// min eig(I + T) with T = T_{1/2}.
    pub fn margin(&self, c: &Array1<f64>) -> Result<f64> {
        let ev = self.bs_eigenvalues(c, 0.5)?;
        let lmin = ev.first().copied().unwrap_or(0.0);
        Ok(1.0 + lmin.min(0.0))
    }

    /// N = c(I + K₀c)^{-1}, evaluated symmetrically as F(U − UR(I + RUR)^{-1}RU)F.
    pub fn kernel(&self, c: &Array1<f64>, threshold: f64) -> Result<Array2<f64>> {
        let (f, u, root) = self.factors(c, 0.5)?;
        let ru = &root * &u.view().insert_axis(Axis(0));
        let (vals, vecs) = linalg::eigh(&ru.dot(&root).view())?;
        let margin = 1.0 + vals.first().copied().unwrap_or(0.0).min(0.0);
        if margin <= threshold {
            return Err(Error::Positivity { margin, threshold });
        }
        let inner = linalg::spectral_apply(&vals, &vecs, |x| 1.0 / (1.0 + x));
        let mut m = -ru.t().dot(&inner).dot(&ru);
        for (k, &uk) in u.iter().enumerate() {
            m[[k, k]] += uk;
        }
        let n = &m * &f.view().insert_axis(Axis(1)) * f.view().insert_axis(Axis(0));
        Ok(linalg::symmetrized(&n.view()))
    }

    /// E = BΛ^{-1}.
    fn e(&self) -> Array2<f64> {
        &self.b * &self.lam.mapv(|l| 1.0 / l).insert_axis(Axis(0))
    }

    /// Orthonormal modal basis containing the ranges of Λ^{-a}Eᵀ, a < depth.
    fn range_basis(&self, depth: usize) -> Result<Array2<f64>> {
        let et = self.e().reversed_axes();
        let mut blocks = Vec::with_capacity(depth);
        let mut cur = et;
        for _ in 0..depth {
            let mut normed = cur.clone();
            for mut col in normed.axis_iter_mut(Axis(1)) {
                let s = col.iter().map(|x| x * x).sum::<f64>().sqrt();
                if s > 0.0 {
                    col /= s;
                }
            }
            blocks.push(normed);
            cur = &cur * &self.lam.mapv(|l| 1.0 / l).insert_axis(Axis(1));
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let stacked = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Numerical(e.to_string()))?;
        let (q, _) = stacked.qr().map_err(|e| Error::Numerical(format!("qr: {e}")))?;
        Ok(q)
    }

    fn projected_spectrum(
        q: &Array2<f64>,
        op: impl Fn(&Array2<f64>) -> Array2<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let s = linalg::symmetrized(&q.t().dot(&op(q)).view());
        let ev = linalg::eigvalsh(&s.view())?;
        Ok((s, ev))
    }

    fn apply_diff(e: &Array2<f64>, nk: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
        e.t().dot(&nk.dot(&e.dot(x)))
    }

    /// Spectrum of the difference Eᵀ N E for a symmetric atom-space kernel N.
    pub fn kernel_spectrum(&self, nk: &Array2<f64>) -> Result<Array1<f64>> {
        let e = self.e();
        let q = self.range_basis(1)?;
        Ok(Self::projected_spectrum(&q, |x| Self::apply_diff(&e, nk, x))?.1)
    }

    /// Signed spectrum of R_V = A^{-1} − A_V^{-1}.
    pub fn resolvent_difference_spectrum(&self, c: &Array1<f64>, threshold: f64) -> Result<Array1<f64>> {
        self.check_len(c)?;
        self.kernel_spectrum(&self.kernel(c, threshold)?)
    }

    /// Signed spectrum of R^{(1,2)} = R_{V₁} − R_{V₂} = A_{V₂}^{-1} − A_{V₁}^{-1}.
    pub fn two_weight_spectrum(&self, c1: &Array1<f64>, c2: &Array1<f64>, threshold: f64) -> Result<Array1<f64>> {
        self.check_len(c1)?;
        self.check_len(c2)?;
        let nk = self.kernel(c1, threshold)? - self.kernel(c2, threshold)?;
        self.kernel_spectrum(&nk)
    }

    /// Spectra of A_V^{-m} − A^{-m}, H2 and H3 on a common projected basis.
    pub fn power_difference_spectra(&self, c: &Array1<f64>, m: usize, threshold: f64) -> Result<PowerSpectra> {
        if !(1..=MAX_POWER).contains(&m) {
            return invalid(format!("power m = {m} outside 1..={MAX_POWER}"));
        }
        self.check_len(c)?;
        let nk = self.kernel(c, threshold)?;
        let e = self.e();
        let inv = self.lam.mapv(|l| 1.0 / l).insert_axis(Axis(1));
        let a = |x: &Array2<f64>| x * &inv;
        let r = |x: &Array2<f64>| Self::apply_diff(&e, &nk, x);
        let w = |x: &Array2<f64>| e.t().dot(&(&e.dot(x) * &c.view().insert_axis(Axis(1))));
        let av = |x: &Array2<f64>| a(x) - r(x);
        let pow = |f: &dyn Fn(&Array2<f64>) -> Array2<f64>, k: usize, x: Array2<f64>| (0..k).fold(x, |y, _| f(&y));

        let q = self.range_basis(m)?;
        let telescoped = |x: &Array2<f64>| {
            let mut out = Array2::<f64>::zeros(x.dim());
            for j in 0..m {
                let y = pow(&a, m - 1 - j, x.clone());
                out -= &pow(&av, j, r(&y));
            }
            out
        };
        let direct = |x: &Array2<f64>| pow(&av, m, x.clone()) - pow(&a, m, x.clone());
        let h2 = |x: &Array2<f64>| {
            let mut out = Array2::<f64>::zeros(x.dim());
            for cmp in compositions(m - 1, 2) {
                out -= &pow(&a, cmp[0], w(&pow(&a, cmp[1], x.clone())));
            }
            out
        };
        let h3 = |x: &Array2<f64>| {
            let mut out = Array2::<f64>::zeros(x.dim());
            if m >= 2 {
                for cmp in compositions(m - 2, 3) {
                    let y = w(&pow(&a, cmp[2], x.clone()));
                    out += &pow(&a, cmp[0], w(&pow(&a, cmp[1], y)));
                }
            }
            out
        };
        let (st, total) = Self::projected_spectrum(&q, telescoped)?;
        let sd = linalg::symmetrized(&q.t().dot(&direct(&q)).view());
        let residual = linalg::relative_residual(&sd.view(), &st.view());
        let (_, h2s) = Self::projected_spectrum(&q, h2)?;
        let (_, h3s) = Self::projected_spectrum(&q, h3)?;
        Ok(PowerSpectra { m, total, h2: h2s, h3: h3s, residual })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::birman_schwinger::restriction_matrix;
    use crate::elliptic::{assemble_neumann, assemble_robin, CoefficientField, Grid};
    use crate::measures::{boundary_measure, segment_measure, BBox, DiscreteMeasure};
    use proptest::prelude::*;
    use std::sync::Arc;

    struct Setup {
        a: OperatorMatrix,
        m: Arc<DiscreteMeasure>,
        gamma: RestrictionMatrix,
    }

    fn setup(n: usize) -> Setup {
        let g = Grid::new(BBox::unit(2), &[n, n]).unwrap();
        let a = assemble_neumann(&g, &CoefficientField::laplacian(&g, 1.0).unwrap()).unwrap();
        let m = Arc::new(segment_measure(&[0.05, 0.3], &[0.95, 0.62], 3 * n).unwrap());
        let gamma = restriction_matrix(&g, &m).unwrap();
        Setup { a, m, gamma }
    }

    fn sorted_desc(v: &Array1<f64>) -> Vec<f64> {
        let mut out = v.to_vec();
        out.sort_by(|a, b| b.total_cmp(a));
        out
    }

    fn assert_spectra_close(dense: &Array2<f64>, modal: &Array1<f64>, tol: f64) {
        let d = sorted_desc(&linalg::eigvalsh(&dense.view()).unwrap());
        let mo = sorted_desc(modal);
        let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let (dn, mn): (Vec<f64>, Vec<f64>) = (
            d.iter().copied().filter(|x| x.abs() > 1e-9 * scale).collect(),
            mo.iter().copied().filter(|x| x.abs() > 1e-9 * scale).collect(),
        );
        assert_eq!(dn.len(), mn.len());
        for (x, y) in dn.iter().zip(&mn) {
            assert!((x - y).abs() < tol * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn zero_weight_cases() {
        let s = setup(6);
        let p = Perturbation::constant(s.m.clone(), 0.0).unwrap();
        let sys = BsSystem::new(&s.a, &s.gamma, &p).unwrap();
        let inv = inverse_power(&s.a, 1.0).unwrap();
        let pi = perturbed_inverse(&sys, DEFAULT_MARGIN).unwrap();
        assert!(linalg::relative_residual(&pi.view(), &inv.view()) < 1e-14);
        let r = resolvent_difference(&sys, DEFAULT_MARGIN).unwrap();
        assert!(r.difference.iter().all(|x| x.abs() < 1e-14));
        let pd = power_difference(&sys, 2, DEFAULT_MARGIN).unwrap();
        assert!(pd.difference.iter().all(|x| x.abs() < 1e-13));
    }

    #[test]
    fn single_atom_sherman_morrison() {
        let g = Grid::new(BBox::unit(2), &[6, 6]).unwrap();
        let a = assemble_neumann(&g, &CoefficientField::laplacian(&g, 1.0).unwrap()).unwrap();
        let x = [0.37, 0.52];
        let m = Arc::new(
            DiscreteMeasure::new(ndarray::arr2(&[[x[0], x[1]]]), ndarray::arr1(&[0.4]), 0.0, "pt", BBox::unit(2))
                .unwrap(),
        );
        let gamma = restriction_matrix(&g, &m).unwrap();
        let v = -0.8;
        let p = Perturbation::constant(m, v).unwrap();
        let sys = BsSystem::new(&a, &gamma, &p).unwrap();
        let pi = perturbed_inverse(&sys, DEFAULT_MARGIN).unwrap();
        // (A + c ggᵀ)^{-1} = A^{-1} − c A^{-1}g gᵀA^{-1} / (1 + c gᵀA^{-1}g)
        let inv = inverse_power(&a, 1.0).unwrap();
        let gv = gamma.to_dense().row(0).to_owned();
        let c = v * 0.4 / g.cell_volume();
        let ag = inv.dot(&gv);
        let denom = 1.0 + c * gv.dot(&ag);
        let outer = ag.view().insert_axis(Axis(1)).dot(&ag.view().insert_axis(Axis(0)));
        let sm = &inv - &(outer * (c / denom));
        assert!(linalg::relative_residual(&pi.view(), &sm.view()) < 1e-10);
    }

    #[test]
    fn robin_matches_direct_assembly() {
        let g = Grid::new(BBox::unit(2), &[7, 7]).unwrap();
        let f = CoefficientField::laplacian(&g, 1.0).unwrap();
        let a = assemble_neumann(&g, &f).unwrap();
        let m = Arc::new(boundary_measure(&g).unwrap());
        let gamma = restriction_matrix(&g, &m).unwrap();
        let p = Perturbation::constant(m, 0.75).unwrap();
        let sys = BsSystem::new(&a, &gamma, &p).unwrap();
        let pi = perturbed_inverse(&sys, DEFAULT_MARGIN).unwrap();
        let robin = assemble_robin(&g, &f, &p).unwrap();
        let direct = inverse_power(&robin, 1.0).unwrap();
        assert!(linalg::relative_residual(&pi.view(), &direct.view()) < 1e-8);
    }

    #[test]
    fn two_weight_reduces_to_single() {
        let s = setup(6);
        let p1 = Perturbation::from_fn(s.m.clone(), |x| 1.0 + x[0]).unwrap();
        let p0 = Perturbation::constant(s.m.clone(), 0.0).unwrap();
        let s1 = BsSystem::new(&s.a, &s.gamma, &p1).unwrap();
        let s0 = BsSystem::new(&s.a, &s.gamma, &p0).unwrap();
        let same = two_weight_difference(&s1, &s1, DEFAULT_MARGIN).unwrap();
        assert!(same.difference.iter().all(|x| x.abs() < 1e-14));
        let r = two_weight_difference(&s1, &s0, DEFAULT_MARGIN).unwrap();
        let single = resolvent_difference(&s1, DEFAULT_MARGIN).unwrap();
        assert!(linalg::relative_residual(&r.difference.view(), &single.difference.view()) < 1e-10);
        assert!(r.residual < 1e-8);
    }

    #[test]
    fn power_two_terms() {
        let s = setup(6);
        let p = Perturbation::from_fn(s.m.clone(), |x| (4.0 * x[0]).cos()).unwrap();
        let sys = BsSystem::new(&s.a, &s.gamma, &p).unwrap();
        let rep = power_difference(&sys, 2, DEFAULT_MARGIN).unwrap();
        let inv = inverse_power(&s.a, 1.0).unwrap();
        let w = sys.w();
        let h2 = -(inv.dot(&w) + w.dot(&inv));
        assert!(linalg::relative_residual(&rep.term("H2").unwrap().view(), &h2.view()) < 1e-12);
        assert!(linalg::relative_residual(&rep.term("H3").unwrap().view(), &w.dot(&w).view()) < 1e-12);
        let sum = rep.term("H2").unwrap() + rep.term("H3").unwrap() + rep.term("H4").unwrap();
        assert!(linalg::relative_residual(&sum.view(), &rep.difference.view()) < 1e-8);
        assert!(rep.residual < 1e-8);
        assert!(power_difference(&sys, 5, DEFAULT_MARGIN).is_err());
    }

    #[test]
    fn margin_violation_is_reported() {
        let s = setup(6);
        let p = Perturbation::constant(s.m.clone(), -40.0).unwrap();
        let sys = BsSystem::new(&s.a, &s.gamma, &p).unwrap();
        assert!(sys.margin() < DEFAULT_MARGIN);
        assert!(matches!(perturbed_inverse(&sys, DEFAULT_MARGIN), Err(Error::Positivity { .. })));
        let mc = ModalCoupling::new(&s.a, &s.gamma).unwrap();
        let c = coupling(&s.a, &p);
        assert!((mc.margin(&c).unwrap() - sys.margin()).abs() < 1e-9);
        assert!(mc.kernel(&c, DEFAULT_MARGIN).is_err());
    }

    #[test]
    fn modal_route_matches_dense() {
        let s = setup(7);
        for fast in [true, false] {
            let a = if fast { s.a.clone() } else { s.a.without_fast_path() };
            let p1 = Perturbation::from_fn(s.m.clone(), |x| 0.5 + x[0] * x[0]).unwrap();
            let p2 = Perturbation::from_fn(s.m.clone(), |x| (6.0 * x[0]).sin()).unwrap();
            let s1 = BsSystem::new(&a, &s.gamma, &p1).unwrap();
            let s2 = BsSystem::new(&a, &s.gamma, &p2).unwrap();
            let mc = ModalCoupling::new(&a, &s.gamma).unwrap();
            let (c1, c2) = (coupling(&a, &p1), coupling(&a, &p2));

            let t = mc.bs_eigenvalues(&c2, 0.5).unwrap();
            assert_spectra_close(&s2.t().matrix, &t, 1e-10);
            let t1 = mc.bs_eigenvalues(&c2, 1.0).unwrap();
            assert_spectra_close(&bs_operator(&a, &s.gamma, &p2, 1.0).unwrap().matrix, &t1, 1e-10);

            let r = resolvent_difference(&s2, DEFAULT_MARGIN).unwrap();
            assert_spectra_close(&r.difference, &mc.resolvent_difference_spectrum(&c2, DEFAULT_MARGIN).unwrap(), 1e-10);
            let tw = two_weight_difference(&s1, &s2, DEFAULT_MARGIN).unwrap();
            assert_spectra_close(&tw.difference, &mc.two_weight_spectrum(&c1, &c2, DEFAULT_MARGIN).unwrap(), 1e-10);
            for m in 1..=3 {
                let pd = power_difference(&s2, m, DEFAULT_MARGIN).unwrap();
                let ps = mc.power_difference_spectra(&c2, m, DEFAULT_MARGIN).unwrap();
                assert!(ps.residual < 1e-10);
                assert_spectra_close(&pd.difference, &ps.total, 1e-9);
                assert_spectra_close(pd.term("H2").unwrap(), &ps.h2, 1e-9);
                if m >= 2 {
                    assert_spectra_close(pd.term("H3").unwrap(), &ps.h3, 1e-9);
                }
            }
        }
    }

    fn arb_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..3.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn paths_agree_and_signs_hold(v1 in arb_values(15), v2 in arb_values(15)) {
            let s = setup(5);
            let p1 = Perturbation::new(s.m.clone(), Array1::from(v1)).unwrap();
            let p2 = Perturbation::new(s.m.clone(), Array1::from(v2)).unwrap();
            let s1 = BsSystem::new(&s.a, &s.gamma, &p1).unwrap();
            let s2 = BsSystem::new(&s.a, &s.gamma, &p2).unwrap();
            prop_assume!(s1.margin() > DEFAULT_MARGIN && s2.margin() > DEFAULT_MARGIN);
            prop_assert!(resolvent_difference(&s1, DEFAULT_MARGIN).unwrap().residual < 1e-8);
            prop_assert!(two_weight_difference(&s1, &s2, DEFAULT_MARGIN).unwrap().residual < 1e-8);
            for m in 2..=3 {
                prop_assert!(power_difference(&s1, m, DEFAULT_MARGIN).unwrap().residual < 1e-8);
            }
            // V₁ ≥ V₂ pointwise ⇒ R^{(1,2)} ⪰ 0.
            let hi = p1.with_values(p1.values().mapv(f64::abs) + 0.1).unwrap();
            let lo = p1.with_values(p1.values().mapv(|v| v.abs() * 0.5)).unwrap();
            let (sh, sl) = (BsSystem::new(&s.a, &s.gamma, &hi).unwrap(), BsSystem::new(&s.a, &s.gamma, &lo).unwrap());
            let d = two_weight_difference(&sh, &sl, DEFAULT_MARGIN).unwrap().difference;
            let ev = linalg::eigvalsh(&d.view()).unwrap();
            let scale = ev.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert!(ev[0] >= -1e-10 * scale);
            let rv = resolvent_difference(&sh, DEFAULT_MARGIN).unwrap().difference;
            let ev = linalg::eigvalsh(&rv.view()).unwrap();
            let scale = ev.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert!(ev[0] >= -1e-10 * scale);
        }
    }
}
