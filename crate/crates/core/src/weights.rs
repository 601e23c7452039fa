//! Weight functions on measure atoms and the L_(θ),μ norm family.

use std::sync::Arc;

use ndarray::Array1;

use crate::error::{invalid, Result};
use crate::measures::{dist, DiscreteMeasure};

/// A weight V on the atoms of a measure, with F = |V|^{1/2} and U = sgn V.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    measure: Arc<DiscreteMeasure>,
    values: Array1<f64>,
}

impl Perturbation {
    pub fn new(measure: Arc<DiscreteMeasure>, values: Array1<f64>) -> Result<Self> {
        if values.len() != measure.len() {
            return invalid(format!("{} values for {} atoms", values.len(), measure.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("weight values must be finite");
        }
        Ok(Self { measure, values })
    }

    pub fn constant(measure: Arc<DiscreteMeasure>, c: f64) -> Result<Self> {
        let n = measure.len();
        Self::new(measure, Array1::from_elem(n, c))
    }

    /// V evaluated at each atom position.
    pub fn from_fn(measure: Arc<DiscreteMeasure>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..measure.len()).map(|k| f(measure.atom(k).as_slice().expect("contiguous row"))).collect();
        Self::new(measure, values)
    }

    pub fn measure(&self) -> &Arc<DiscreteMeasure> {
        &self.measure
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn f(&self) -> Array1<f64> {
        self.values.mapv(|v| v.abs().sqrt())
    }

    pub fn u(&self) -> Array1<f64> {
        self.values.mapv(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Pointwise w_k V_k.
    pub fn weighted(&self) -> Array1<f64> {
        self.measure.weights() * &self.values
    }

    /// ∫ V dμ.
    pub fn integral(&self) -> f64 {
        self.weighted().sum()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.measure.clone(), &self.values * c)
    }

    /// Same measure, new values.
    pub fn with_values(&self, values: Array1<f64>) -> Result<Self> {
        Self::new(self.measure.clone(), values)
    }
}

/// Ψ(s) = (1+s)log(1+s) − s.
pub fn psi(s: f64) -> f64 {
    (1.0 + s) * s.ln_1p() - s
}

/// L_(θ),μ norm: ℓ^θ for θ > 1, L_1 for θ < 1 and the Luxemburg norm for θ = 1.
pub fn lp_theta_norm(p: &Perturbation, theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta.is_finite()) {
        return invalid(format!("theta {theta} must be positive"));
    }
    let w = p.measure.weights();
    let v = p.values.mapv(f64::abs);
    if theta > 1.0 {
        Ok(w.iter().zip(&v).map(|(w, v)| w * v.powf(theta)).sum::<f64>().powf(1.0 / theta))
    } else if theta < 1.0 {
        Ok(w.iter().zip(&v).map(|(w, v)| w * v).sum())
    } else {
        Ok(luxemburg(w, &v))
    }
}

/// Smallest λ with Σ w Ψ(v/λ) ≤ 1, returned from the feasible side of the bracket.
fn luxemburg(w: &Array1<f64>, v: &Array1<f64>) -> f64 {
    let g = |lam: f64| -> f64 { w.iter().zip(v).map(|(w, v)| w * psi(v / lam)).sum() };
    let l1: f64 = w.iter().zip(v).map(|(w, v)| w * v).sum();
    if l1 == 0.0 {
        return 0.0;
    }
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(*x));
    let mut hi = l1.max(vmax);
    while g(hi) > 1.0 {
        hi *= 2.0;
    }
    let mut lo = hi;
    while g(lo) <= 1.0 {
        lo *= 0.5;
    }
    while hi / lo - 1.0 > 1e-13 {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// (V₊, V₋) with V = V₊ − V₋ and disjoint supports.
pub fn split_signs(p: &Perturbation) -> (Perturbation, Perturbation) {
    let plus = p.values.mapv(|v| v.max(0.0));
    let minus = p.values.mapv(|v| (-v).max(0.0));
    (
        Perturbation { measure: p.measure.clone(), values: plus },
        Perturbation { measure: p.measure.clone(), values: minus },
    )
}

#[derive(Clone, Debug)]
pub struct Mollified {
    pub perturbation: Perturbation,
    /// Set when the radius is below the atom spacing and the input was returned unchanged.
    pub below_floor: bool,
}

/// Gaussian local average over atoms within 3·radius.
///
/// The kernel is symmetrically rescaled (Sinkhorn) so that it is stochastic
/// with respect to μ: constants are fixed and ∫V dμ is preserved.
pub fn mollify_weight(p: &Perturbation, radius: f64) -> Result<Mollified> {
    if !(radius > 0.0 && radius.is_finite()) {
        return invalid("mollification radius must be positive");
    }
    let m = &p.measure;
    if radius < m.min_spacing() {
        return Ok(Mollified { perturbation: p.clone(), below_floor: true });
    }
    let n = m.len();
    let w = m.weights();
    let cutoff = 3.0 * radius;
    let mut nbrs: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, row) in nbrs.iter_mut().enumerate() {
        for j in 0..n {
            let d = dist(m.atom(i), m.atom(j));
            if d <= cutoff && w[j] > 0.0 {
                row.push((j, (-0.5 * (d / radius).powi(2)).exp()));
            }
        }
    }
    // Symmetric Sinkhorn: find s with Σ_j s_i K_ij s_j w_j = 1 for every atom.
    let mut s = Array1::<f64>::ones(n);
    for _ in 0..10_000 {
        let row = |s: &Array1<f64>, i: usize| -> f64 { nbrs[i].iter().map(|&(j, k)| k * s[j] * w[j]).sum() };
        let mut worst = 0.0f64;
        let next: Array1<f64> = (0..n)
            .map(|i| {
                let r = row(&s, i);
                worst = worst.max((s[i] * r - 1.0).abs());
                (s[i] / r).sqrt()
            })
            .collect();
        if worst < 1e-14 {
            break;
        }
        s = next;
    }
    let v = p.values();
    let out: Array1<f64> = (0..n).map(|i| nbrs[i].iter().map(|&(j, k)| s[i] * k * s[j] * w[j] * v[j]).sum()).collect();
    Ok(Mollified { perturbation: p.with_values(out)?, below_floor: false })
}
