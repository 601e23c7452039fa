//! Invariant suites: path consistency, Ky Fan inequalities, norms, measures and closed forms.

use std::f64::consts::{E, PI};
use std::sync::Arc;

use bslab_core::birman_schwinger::restriction_matrix;
use bslab_core::elliptic::{assemble_neumann, neumann_1d_eigenpairs, CoefficientField, Grid, OperatorMatrix};
use bslab_core::linalg;
use bslab_core::measures::{
    boundary_measure, cantor_maps, default_radii, estimate_ahlfors_constants, ifs_measure, lebesgue_measure,
    segment_measure, solve_moran_dimension, union_measure, BBox, DiscreteMeasure, DEFAULT_MAX_ATOMS,
};
use bslab_core::resolvents::{
    power_difference, resolvent_difference, two_weight_difference, BsSystem, ModalCoupling, DEFAULT_MARGIN,
};
use bslab_core::spectra::{kyfan_check, kyfan_grid, weyl_density, KyFanReport};
use bslab_core::weights::{lp_theta_norm, split_signs, Perturbation};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{CliError, CliResult};

pub const SUITES: [&str; 5] = ["identities", "kyfan", "norms", "measures", "oracles"];

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Sizes of the randomized identity suite.
#[derive(Clone, Copy, Debug)]
pub struct IdentityPlan {
    pub n_1d: usize,
    pub draws_1d: usize,
    pub n_2d: usize,
    pub draws_2d: usize,
    pub seed: u64,
}

impl IdentityPlan {
    pub const FULL: Self = Self { n_1d: 512, draws_1d: 100, n_2d: 33, draws_2d: 20, seed: 20_240_601 };
    pub const QUICK: Self = Self { n_1d: 96, draws_1d: 12, n_2d: 13, draws_2d: 4, seed: 20_240_601 };
}

/// Worst residuals and sign checks over all identity draws.
#[derive(Clone, Debug, Default)]
pub struct IdentityStats {
    pub draws: usize,
    pub resolvent: f64,
    pub two_weight: f64,
    pub power2: f64,
    pub power3: f64,
    /// Draws with V ≥ 0 and the worst min eig(R_V)/‖R_V‖ among them.
    pub nonneg_draws: usize,
    pub nonneg_worst: f64,
    /// Draws with V1 ≥ V2 and the worst min eig(R^{(1,2)})/‖R^{(1,2)}‖ among them.
    pub ordered_draws: usize,
    pub ordered_worst: f64,
}

impl IdentityStats {
    pub fn max_residual(&self) -> f64 {
        self.resolvent.max(self.two_weight).max(self.power2).max(self.power3)
    }
}

fn min_relative_eigenvalue(m: &Array2<f64>) -> CliResult<f64> {
    let ev = linalg::eigvalsh(&m.view())?;
    let norm = ev.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    Ok(if norm > 0.0 { ev[0] / norm } else { 0.0 })
}

fn random_measure_1d(rng: &mut ChaCha20Rng, grid: &Grid) -> CliResult<DiscreteMeasure> {
    Ok(match rng.random_range(0..3) {
        0 => ifs_measure(&cantor_maps(), rng.random_range(4..8), DEFAULT_MAX_ATOMS)?,
        1 => {
            let a = rng.random_range(0.0..0.5);
            let b = rng.random_range(a + 0.1..1.0);
            segment_measure(&[a], &[b], rng.random_range(5..60))?
        }
        _ => {
            let a = rng.random_range(0.0..0.6);
            let region = BBox::new(vec![a], vec![a + 0.3])?;
            lebesgue_measure(grid, Some(&region))?
        }
    })
}

fn random_measure_2d(rng: &mut ChaCha20Rng, grid: &Grid) -> CliResult<DiscreteMeasure> {
    let seg = |rng: &mut ChaCha20Rng| -> CliResult<DiscreteMeasure> {
        let p: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..0.95)).collect();
        Ok(segment_measure(&p[..2], &p[2..], rng.random_range(10..80))?)
    };
    Ok(match rng.random_range(0..3) {
        0 => seg(rng)?,
        1 => boundary_measure(grid)?,
        _ => {
            let a = seg(rng)?;
            union_measure(&a, &seg(rng)?)?
        }
    })
}

/// Random V on the atoms of `m`, rescaled until the positivity margin exceeds the default.
fn admissible(
    rng: &mut ChaCha20Rng,
    mc: &ModalCoupling,
    a: &OperatorMatrix,
    m: &Arc<DiscreteMeasure>,
    nonneg: bool,
) -> CliResult<Perturbation> {
    let scale = 10f64.powf(rng.random_range(-1.0..1.5));
    let lo = if nonneg { 0.0 } else { -1.0 };
    let vals: Array1<f64> = (0..m.len()).map(|_| scale * rng.random_range(lo..1.0)).collect();
    let mut p = Perturbation::new(m.clone(), vals)?;
    for _ in 0..60 {
        let c = bslab_core::birman_schwinger::coupling(a, &p);
        if mc.margin(&c)? > 2.0 * DEFAULT_MARGIN {
            return Ok(p);
        }
        p = p.scaled(0.5)?;
    }
    Err(CliError::Numerical("could not find an admissible perturbation".into()))
}

fn identity_draw(
    rng: &mut ChaCha20Rng,
    a: &OperatorMatrix,
    grid: &Grid,
    k: usize,
    stats: &mut IdentityStats,
) -> CliResult<()> {
    let m = Arc::new(if grid.dim() == 1 { random_measure_1d(rng, grid)? } else { random_measure_2d(rng, grid)? });
    let gamma = restriction_matrix(grid, &m)?;
    let mc = ModalCoupling::new(a, &gamma)?;
    // Every other draw is sign-definite so the monotonicity checks see many cases.
    let nonneg = k.is_multiple_of(2);
    let p1 = admissible(rng, &mc, a, &m, nonneg)?;
    let p2 = if nonneg {
        // V2 = V1 − |δ| keeps V1 ≥ V2 pointwise.
        let shrink: Array1<f64> = p1.values().iter().map(|v| v - rng.random_range(0.0..1.0) * v.abs()).collect();
        p1.with_values(shrink)?
    } else {
        admissible(rng, &mc, a, &m, false)?
    };
    let s1 = BsSystem::new(a, &gamma, &p1)?;
    let s2 = BsSystem::new(a, &gamma, &p2)?;
    let r = resolvent_difference(&s1, DEFAULT_MARGIN)?;
    let tw = two_weight_difference(&s1, &s2, DEFAULT_MARGIN)?;
    let p2r = power_difference(&s1, 2, DEFAULT_MARGIN)?;
    let p3r = power_difference(&s1, 3, DEFAULT_MARGIN)?;
    stats.draws += 1;
    stats.resolvent = stats.resolvent.max(r.residual);
    stats.two_weight = stats.two_weight.max(tw.residual);
    stats.power2 = stats.power2.max(p2r.residual);
    stats.power3 = stats.power3.max(p3r.residual);
    if p1.is_nonnegative() {
        stats.nonneg_draws += 1;
        stats.nonneg_worst = stats.nonneg_worst.min(min_relative_eigenvalue(&r.difference)?);
    }
    if p1.values().iter().zip(p2.values()).all(|(a, b)| a >= b) {
        stats.ordered_draws += 1;
        stats.ordered_worst = stats.ordered_worst.min(min_relative_eigenvalue(&tw.difference)?);
    }
    Ok(())
}

/// Seeded random admissible perturbations on a 1D and a 2D grid.
pub fn identity_stats(plan: IdentityPlan) -> CliResult<IdentityStats> {
    let mut rng = ChaCha20Rng::seed_from_u64(plan.seed);
    let mut stats = IdentityStats::default();
    let g1 = Grid::new(BBox::unit(1), &[plan.n_1d])?;
    let a1 = assemble_neumann(&g1, &CoefficientField::laplacian(&g1, 1.0)?)?;
    for k in 0..plan.draws_1d {
        identity_draw(&mut rng, &a1, &g1, k, &mut stats)?;
    }
    let g2 = Grid::new(BBox::unit(2), &[plan.n_2d, plan.n_2d])?;
    let a2 = assemble_neumann(&g2, &CoefficientField::laplacian(&g2, 1.0)?)?;
    for k in 0..plan.draws_2d {
        identity_draw(&mut rng, &a2, &g2, k, &mut stats)?;
    }
    Ok(stats)
}

pub fn identities(plan: IdentityPlan) -> CliResult<SuiteReport> {
    let s = identity_stats(plan)?;
    let tol = 1e-8;
    let mut checks = vec![
        Check::new(
            "resolvent_difference paths",
            s.resolvent <= tol,
            format!("max residual {:.2e} over {} draws", s.resolvent, s.draws),
        ),
        Check::new("two_weight_difference paths", s.two_weight <= tol, format!("max residual {:.2e}", s.two_weight)),
        Check::new("power_difference m=2 paths", s.power2 <= tol, format!("max residual {:.2e}", s.power2)),
        Check::new("power_difference m=3 paths", s.power3 <= tol, format!("max residual {:.2e}", s.power3)),
    ];
    checks.push(Check::new(
        "V >= 0 gives R_V >= 0",
        s.nonneg_draws > 0 && s.nonneg_worst >= -1e-10,
        format!("{} draws, worst min eig/norm {:.2e}", s.nonneg_draws, s.nonneg_worst),
    ));
    checks.push(Check::new(
        "V1 >= V2 gives R12 >= 0",
        s.ordered_draws > 0 && s.ordered_worst >= -1e-10,
        format!("{} draws, worst min eig/norm {:.2e}", s.ordered_draws, s.ordered_worst),
    ));
    Ok(SuiteReport { checks })
}

fn random_symmetric(rng: &mut ChaCha20Rng, n: usize) -> Array2<f64> {
    let scale = 10f64.powf(rng.random_range(-2.0..2.0));
    let kind = rng.random_range(0..3);
    let mut m = Array2::<f64>::zeros((n, n));
    match kind {
        // Dense symmetric.
        0 => {
            for i in 0..n {
                for j in 0..=i {
                    let v = scale * rng.random_range(-1.0..1.0);
                    m[[i, j]] = v;
                    m[[j, i]] = v;
                }
            }
        }
        // Low rank, sign-indefinite.
        1 => {
            for _ in 0..rng.random_range(1..6) {
                let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s = scale * rng.random_range(-1.0..1.0);
                for i in 0..n {
                    for j in 0..n {
                        m[[i, j]] += s * u[i] * u[j];
                    }
                }
            }
        }
        // Diagonal with power-law decay, compact-operator-like.
        _ => {
            let p = rng.random_range(0.5..4.0);
            for i in 0..n {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                m[[i, i]] = sign * scale * ((i + 1) as f64).powf(-p);
            }
        }
    }
    m
}

/// Ky Fan inequalities over `trials` random symmetric pairs of size `n`.
pub fn kyfan_suite(trials: usize, n: usize, seed: u64) -> CliResult<KyFanReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut total = KyFanReport::default();
    for _ in 0..trials {
        let k1 = random_symmetric(&mut rng, n);
        let k2 = random_symmetric(&mut rng, n);
        let grid = kyfan_grid(&k1.view(), &k2.view());
        total = total.merge(kyfan_check(&k1.view(), &k2.view(), &grid)?);
    }
    Ok(total)
}

pub fn kyfan(trials: usize, seed: u64) -> CliResult<SuiteReport> {
    let rep = kyfan_suite(trials, 30, seed)?;
    Ok(SuiteReport {
        checks: vec![Check::new(
            "Ky Fan additive and multiplicative",
            rep.violations == 0,
            format!("{} violations in {} checks over {trials} pairs", rep.violations, rep.checks),
        )],
    })
}

pub fn norms() -> CliResult<SuiteReport> {
    let m = Arc::new(segment_measure(&[0.0], &[1.0], 200)?);
    let one = Perturbation::constant(m.clone(), 1.0)?;
    let lux = lp_theta_norm(&one, 1.0)?;
    let oracle = 1.0 / (E - 1.0);
    let mut checks =
        vec![Check::new("Luxemburg norm of 1", (lux - oracle).abs() <= 1e-9, format!("{lux:.12} vs {oracle:.12}"))];
    let p = Perturbation::from_fn(m.clone(), |x| (7.0 * x[0]).sin() * 3.0)?;
    let mut worst: f64 = 0.0;
    for th in [0.5, 1.0, 2.0] {
        for c in [-3.0, 0.25, 10.0] {
            let lhs = lp_theta_norm(&p.scaled(c)?, th)?;
            let rhs = f64::abs(c) * lp_theta_norm(&p, th)?;
            worst = worst.max((lhs - rhs).abs() / rhs);
        }
    }
    checks.push(Check::new("norm homogeneity", worst <= 1e-9, format!("worst relative error {worst:.2e}")));
    let (a, b) = split_signs(&p);
    let gap = (lp_theta_norm(&p, 0.5)? - lp_theta_norm(&a, 0.5)? - lp_theta_norm(&b, 0.5)?).abs();
    checks.push(Check::new("sign split additivity (theta < 1)", gap <= 1e-12, format!("gap {gap:.2e}")));
    Ok(SuiteReport { checks })
}

pub fn measures() -> CliResult<SuiteReport> {
    let d = solve_moran_dimension(&[1.0 / 3.0, 1.0 / 3.0])?;
    let oracle = 2f64.ln() / 3f64.ln();
    let mut checks =
        vec![Check::new("Moran {1/3, 1/3}", (d - oracle).abs() <= 1e-10, format!("{d:.12} vs {oracle:.12}"))];
    let c = ifs_measure(&cantor_maps(), 8, DEFAULT_MAX_ATOMS)?;
    let rep = estimate_ahlfors_constants(&c, c.nominal_dim(), &default_radii(&c))?;
    let ratio = rep.upper_const / rep.lower_const;
    checks.push(Check::new(
        "Cantor depth 8 Ahlfors ratio < 10",
        rep.lower_const > 0.0 && ratio < 10.0,
        format!("A+/A- = {ratio:.3}"),
    ));
    let g = Grid::new(BBox::unit(2), &[16, 16])?;
    let b = boundary_measure(&g)?;
    checks.push(Check::new(
        "unit square perimeter",
        (b.total_mass() - 4.0).abs() <= 1e-12,
        format!("mass {:.15}", b.total_mass()),
    ));
    Ok(SuiteReport { checks })
}

pub fn oracles() -> CliResult<SuiteReport> {
    let (n, t) = (256usize, 1.0);
    let h = 1.0 / n as f64;
    let g = Grid::new(BBox::unit(1), &[n])?;
    let a = assemble_neumann(&g, &CoefficientField::laplacian(&g, t)?)?;
    let dense = linalg::eigvalsh(&a.to_dense().view())?;
    let (closed, _) = neumann_1d_eigenpairs(n, h);
    let mut exact: Vec<f64> = closed.iter().map(|l| l + t).collect();
    exact.sort_by(f64::total_cmp);
    let formula: Vec<f64> = (0..n).map(|k| t + 2.0 / (h * h) * (1.0 - (k as f64 * PI / n as f64).cos())).collect();
    let top = formula.iter().fold(0.0f64, |m, x| m.max(*x));
    let worst = dense.iter().zip(&formula).map(|(x, y)| (x - y).abs() / top).fold(0.0f64, f64::max);
    let worst_fast = exact.iter().zip(&formula).map(|(x, y)| (x - y).abs() / top).fold(0.0f64, f64::max);
    let mut checks = vec![Check::new(
        "1D Neumann spectrum",
        worst <= 1e-10 && worst_fast <= 1e-10,
        format!("max |λ−λ_k|/λ_max: dense {worst:.2e}, separable {worst_fast:.2e}"),
    )];
    let m = Arc::new(segment_measure(&[0.0], &[1.0], 50)?);
    let lux = lp_theta_norm(&Perturbation::constant(m, 1.0)?, 1.0)?;
    checks.push(Check::new("Luxemburg norm of 1", (lux - 1.0 / (E - 1.0)).abs() <= 1e-9, format!("{lux:.12}")));
    let d = solve_moran_dimension(&[1.0 / 3.0, 1.0 / 3.0])?;
    checks.push(Check::new("Moran {1/3, 1/3}", (d - 2f64.ln() / 3f64.ln()).abs() <= 1e-10, format!("{d:.12}")));
    let om = weyl_density(&Array2::<f64>::eye(2).view(), &[0.0, 1.0], 1.0 / 3.0)?;
    let oracle = 4f64.powf(-1.0 / 3.0) / PI;
    checks.push(Check::new("Laplacian Weyl density", (om - oracle).abs() <= 1e-8, format!("{om:.12} vs {oracle:.12}")));
    Ok(SuiteReport { checks })
}

pub fn run_suite(name: &str, full: bool) -> CliResult<SuiteReport> {
    match name {
        "identities" => identities(if full { IdentityPlan::FULL } else { IdentityPlan::QUICK }),
        "kyfan" => kyfan(if full { 100 } else { 20 }, 7),
        "norms" => norms(),
        "measures" => measures(),
        "oracles" => oracles(),
        other => Err(CliError::Validation(format!("unknown suite {other}; expected one of {}", SUITES.join(", ")))),
    }
}
