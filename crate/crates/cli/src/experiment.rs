//! Builds grids, operators, measures and weights from a config and executes its tasks.

use std::collections::BTreeMap;
use std::sync::Arc;

use bslab_core::birman_schwinger::{bs_operator, coupling, restriction_matrix, RestrictionMatrix};
use bslab_core::elliptic::{assemble_neumann, assemble_robin, inverse_power, CoefficientField, Grid, OperatorMatrix};
use bslab_core::linalg;
use bslab_core::measures::{
    boundary_measure, boundary_measure_refined, cantor_maps, ifs_measure, lebesgue_measure, read_measure_csv,
    segment_measure, union_measure, BBox, DiscreteMeasure, Similitude, DEFAULT_MAX_ATOMS,
};
use bslab_core::resolvents::{power_difference, resolvent_difference, two_weight_difference, BsSystem, ModalCoupling};
use bslab_core::spectra::{
    log_periodic_residual, spectrum_from_eigenvalues, weyl_prediction, FitWindow, PowerFit, PrefactorConvention,
    SpectrumReport,
};
use bslab_core::weights::{mollify_weight, Perturbation};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::config::{
    CoefficientSpec, ExperimentConfig, IfsPreset, MeasureSpec, Route, TaskSpec, WeightShape, WeightSpec,
};
use crate::error::{CliError, CliResult};

/// RNG streams per weight slot, so V1 and V2 draws are independent.
const STREAM_V1: u64 = 1;
const STREAM_V2: u64 = 2;
/// Maximum number of t doublings.
pub const MAX_T_RAISES: usize = 3;

pub fn build_grid(cfg: &ExperimentConfig) -> CliResult<Grid> {
    let bbox = BBox::new(cfg.domain.lo.clone(), cfg.domain.hi.clone())?;
    Ok(Grid::with_cap(bbox, &cfg.domain.shape(), cfg.operator.node_cap)?)
}

/// Principal symbol a(x) of the configured coefficient.
pub fn symbol_at(spec: &CoefficientSpec, dim: usize, x: &[f64]) -> Array2<f64> {
    match spec {
        CoefficientSpec::Laplacian => Array2::eye(dim),
        CoefficientSpec::Isotropic { c } => Array2::eye(dim) * *c,
        CoefficientSpec::Constant { a } => Array2::from_shape_fn((dim, dim), |(i, j)| a[i][j]),
        CoefficientSpec::Graded { axis, amplitude } => {
            let mut m = Array2::eye(dim);
            m[[0, 0]] = 1.0 + amplitude * x[*axis];
            m
        }
    }
}

pub fn build_coefficients(cfg: &ExperimentConfig, grid: &Grid, t: f64) -> CliResult<CoefficientField> {
    let n = grid.dim();
    let spec = &cfg.operator.coefficient;
    let field = match spec {
        CoefficientSpec::Laplacian => CoefficientField::laplacian(grid, t)?,
        CoefficientSpec::Isotropic { c } => CoefficientField::isotropic(grid, *c, t)?,
        CoefficientSpec::Constant { a } => {
            if a.len() != n || a.iter().any(|r| r.len() != n) {
                return Err(CliError::Validation(format!("coefficient matrix must be {n}×{n}")));
            }
            CoefficientField::constant(grid, symbol_at(spec, n, &vec![0.0; n]).view(), t)?
        }
        CoefficientSpec::Graded { axis, .. } => {
            if *axis >= n {
                return Err(CliError::Validation(format!("graded axis {axis} outside dimension {n}")));
            }
            CoefficientField::from_fn(grid, |x| symbol_at(spec, n, x), t)?
        }
    };
    Ok(field)
}

pub fn build_measure(spec: &MeasureSpec, grid: &Grid) -> CliResult<DiscreteMeasure> {
    let n = grid.dim();
    let m = match spec {
        MeasureSpec::Ifs { preset, maps, depth } => {
            let sims = match preset {
                Some(IfsPreset::Cantor) => {
                    if n != 1 {
                        return Err(CliError::Validation("the cantor preset lives in one dimension".into()));
                    }
                    cantor_maps()
                }
                None => maps
                    .iter()
                    .map(|m| {
                        if m.translation.len() != n {
                            return Err(CliError::Validation("IFS translation dimension mismatch".into()));
                        }
                        let sim = if n == 2 {
                            Similitude::planar(m.ratio, m.angle, [m.translation[0], m.translation[1]])?
                        } else if m.angle != 0.0 {
                            return Err(CliError::Validation("rotations are supported for planar maps only".into()));
                        } else {
                            Similitude::scaling(m.ratio, &m.translation)?
                        };
                        Ok(sim)
                    })
                    .collect::<CliResult<Vec<_>>>()?,
            };
            ifs_measure(&sims, *depth, DEFAULT_MAX_ATOMS)?
        }
        MeasureSpec::Segment { a, b, count } => segment_measure(a, b, *count)?,
        MeasureSpec::Boundary { per_cell } => match per_cell {
            1 => boundary_measure(grid)?,
            k => boundary_measure_refined(grid, *k)?,
        },
        MeasureSpec::Lebesgue { region_lo, region_hi } => match (region_lo, region_hi) {
            (Some(lo), Some(hi)) => lebesgue_measure(grid, Some(&BBox::new(lo.clone(), hi.clone())?))?,
            (None, None) => lebesgue_measure(grid, None)?,
            _ => return Err(CliError::Validation("lebesgue region needs both region_lo and region_hi".into())),
        },
        MeasureSpec::Union { parts } => {
            let mut acc = DiscreteMeasure::null(n);
            for p in parts {
                acc = union_measure(&acc, &build_measure(p, grid)?)?;
            }
            acc
        }
        MeasureSpec::File { path } => read_measure_csv(path)?.0,
    };
    if m.ambient_dim() != n {
        return Err(CliError::Validation(format!("measure lives in R^{}, domain in R^{n}", m.ambient_dim())));
    }
    Ok(m)
}

fn read_v_column(path: &std::path::Path) -> CliResult<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h.trim() == "V")
        .ok_or_else(|| CliError::Validation(format!("{} has no V column", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v = rec
            .get(col)
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| CliError::Validation(format!("bad V entry in {}", path.display())))?;
        out.push(v);
    }
    Ok(out)
}

/// Builds a weight; the returned flag is set when mollification fell below the atom spacing.
pub fn build_weight(
    spec: &WeightSpec,
    m: &Arc<DiscreteMeasure>,
    seed: u64,
    stream: u64,
) -> CliResult<(Perturbation, bool)> {
    let p = match &spec.shape {
        WeightShape::Constant { value } => Perturbation::constant(m.clone(), *value)?,
        WeightShape::Step { axis, threshold, below, above } => {
            if *axis >= m.ambient_dim() {
                return Err(CliError::Validation(format!("step axis {axis} outside dimension")));
            }
            Perturbation::from_fn(m.clone(), |x| if x[*axis] < *threshold { *below } else { *above })?
        }
        WeightShape::Bump { center, radius, amplitude } => {
            if center.len() != m.ambient_dim() || !(*radius > 0.0) {
                return Err(CliError::Validation("bump needs a matching center and a positive radius".into()));
            }
            Perturbation::from_fn(m.clone(), |x| {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (radius * radius);
                if r2 < 1.0 {
                    amplitude * (1.0 - 1.0 / (1.0 - r2)).exp()
                } else {
                    0.0
                }
            })?
        }
        WeightShape::File { path } => Perturbation::new(m.clone(), Array1::from(read_v_column(path)?))?,
        WeightShape::Random { lo, hi } => {
            if !(lo < hi) {
                return Err(CliError::Validation("random weight needs lo < hi".into()));
            }
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let values = (0..m.len()).map(|_| rng.random_range(*lo..*hi)).collect();
            Perturbation::new(m.clone(), values)?
        }
    };
    match spec.mollify {
        Some(r) => {
            let out = mollify_weight(&p, r)?;
            Ok((out.perturbation, out.below_floor))
        }
        None => Ok((p, false)),
    }
}

/// Everything a task needs, at a fixed t.
pub struct Setup {
    pub grid: Grid,
    pub coeffs: CoefficientField,
    pub operator: OperatorMatrix,
    pub measure: Arc<DiscreteMeasure>,
    pub gamma: RestrictionMatrix,
    pub v1: Perturbation,
    pub v2: Option<Perturbation>,
    pub t: f64,
    pub warnings: Vec<String>,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, t: f64) -> CliResult<Self> {
        let grid = build_grid(cfg)?;
        let coeffs = build_coefficients(cfg, &grid, t)?;
        let operator = assemble_neumann(&grid, &coeffs)?;
        let measure = Arc::new(build_measure(&cfg.measure, &grid)?);
        let gamma = restriction_matrix(&grid, &measure)?;
        let mut warnings = Vec::new();
        let (v1, low1) = build_weight(&cfg.v1(), &measure, cfg.seed, STREAM_V1)?;
        if low1 {
            warnings.push("v1 mollification radius below atom spacing; weight left unchanged".into());
        }
        let v2 = match &cfg.weights.v2 {
            Some(spec) => {
                let (p, low) = build_weight(spec, &measure, cfg.seed, STREAM_V2)?;
                if low {
                    warnings.push("v2 mollification radius below atom spacing; weight left unchanged".into());
                }
                Some(p)
            }
            None => None,
        };
        Ok(Self { grid, coeffs, operator, measure, gamma, v1, v2, t, warnings })
    }

    fn v2(&self) -> CliResult<&Perturbation> {
        self.v2.as_ref().ok_or_else(|| CliError::Validation("weights.v2 is required".into()))
    }

    /// Positivity margins of the weights the tasks perturb A with.
    pub fn margins(&self, tasks: &[TaskSpec]) -> CliResult<Vec<f64>> {
        let needs_v1 = tasks.iter().any(|t| !matches!(t, TaskSpec::KreinFeller));
        let needs_v2 =
            tasks.iter().any(|t| matches!(t, TaskSpec::TwoWeightDiff | TaskSpec::RobinDiff | TaskSpec::WeylCheck));
        if !needs_v1 && !needs_v2 {
            return Ok(vec![]);
        }
        let mc = ModalCoupling::new(&self.operator, &self.gamma)?;
        let mut out = Vec::new();
        if needs_v1 {
            out.push(mc.margin(&coupling(&self.operator, &self.v1))?);
        }
        if needs_v2 {
            out.push(mc.margin(&coupling(&self.operator, self.v2()?))?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TRaise {
    pub from: f64,
    pub to: f64,
    pub margin: f64,
}

/// Builds the setup at the configured t, doubling t while a margin is at or below the threshold.
pub fn prepare(cfg: &ExperimentConfig) -> CliResult<(Setup, Vec<TRaise>, Vec<f64>)> {
    let mut t = cfg.operator.t;
    let mut raises = Vec::new();
    loop {
        let setup = Setup::new(cfg, t)?;
        let margins = setup.margins(&cfg.tasks)?;
        let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
        if worst > cfg.operator.margin {
            return Ok((setup, raises, margins));
        }
        if !cfg.operator.auto_raise || raises.len() == MAX_T_RAISES {
            return Err(CliError::Positivity { margin: worst, threshold: cfg.operator.margin, t });
        }
        raises.push(TRaise { from: t, to: 2.0 * t, margin: worst });
        t *= 2.0;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub name: String,
    pub positive: usize,
    pub negative: usize,
    pub norm: f64,
    pub floor: f64,
    pub fit: Option<PowerFit>,
    pub fit_error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeylSummary {
    pub theta: f64,
    pub predicted_plus: f64,
    pub predicted_minus: f64,
    pub predicted_plus_with_2pi_d: f64,
    pub predicted_minus_with_2pi_d: f64,
    /// mean of j·s_j^θ over the fit window of each signed part, θ fixed at the prediction.
    pub measured_plus: Option<f64>,
    pub measured_minus: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogPeriodicSummary {
    pub theta: f64,
    pub max_min_ratio: f64,
    pub decades: f64,
    pub period: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub route: String,
    pub t: f64,
    pub margins: Vec<f64>,
    pub residuals: BTreeMap<String, f64>,
    pub spectra: Vec<SpectrumSummary>,
    pub weyl: Option<WeylSummary>,
    pub log_periodic: Option<LogPeriodicSummary>,
}

impl TaskSummary {
    pub fn spectrum(&self, name: &str) -> Option<&SpectrumSummary> {
        self.spectra.iter().find(|s| s.name == name)
    }

    /// Fit of the `total` spectrum.
    pub fn fit(&self) -> Option<&PowerFit> {
        self.spectrum("total").and_then(|s| s.fit.as_ref())
    }
}

pub struct TaskOutcome {
    pub summary: TaskSummary,
    pub reports: Vec<(String, SpectrumReport)>,
}

fn analyze(
    name: &str,
    ev: &Array1<f64>,
    cfg: &ExperimentConfig,
    summary: &mut TaskSummary,
    reports: &mut Vec<(String, SpectrumReport)>,
) -> CliResult<()> {
    let norm = ev.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let base = spectrum_from_eigenvalues(ev.view(), Some(cfg.analysis.relative_floor * norm))?;
    let (report, fit_error) = match base.clone().with_fit(cfg.analysis.window) {
        Ok(r) => (r, None),
        // Window shape is validated with the config; what remains depends on the data.
        Err(e) => (base, Some(e.to_string())),
    };
    summary.spectra.push(SpectrumSummary {
        name: name.to_string(),
        positive: report.positive.len(),
        negative: report.negative.len(),
        norm: report.norm,
        floor: report.floor,
        fit: report.fit,
        fit_error,
    });
    reports.push((name.to_string(), report));
    Ok(())
}

fn use_dense(cfg: &ExperimentConfig, setup: &Setup) -> bool {
    match cfg.analysis.route {
        Route::Dense => true,
        Route::Modal => false,
        Route::Auto => setup.grid.len() <= cfg.analysis.dense_limit,
    }
}

fn dense_eigenvalues(m: &Array2<f64>) -> CliResult<Array1<f64>> {
    Ok(linalg::eigvalsh(&m.view())?)
}

/// Mean of j·s_j^θ over the upper half of a descending list, or None if too short.
fn fixed_theta_coefficient(desc: &[f64], theta: f64) -> Option<f64> {
    let k = desc.len();
    if k < 20 {
        return None;
    }
    let (first, last) = (k / 10 + 1, k / 2);
    let vals: Vec<f64> = (first..=last).map(|j| j as f64 * desc[j - 1].powf(theta)).collect();
    Some(vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn run_task(cfg: &ExperimentConfig, setup: &Setup, task: &TaskSpec, margins: &[f64]) -> CliResult<TaskOutcome> {
    let dense = use_dense(cfg, setup);
    let threshold = cfg.operator.margin;
    let mut summary = TaskSummary {
        task: task.slug(),
        route: if dense { "dense" } else { "modal" }.into(),
        t: setup.t,
        margins: margins.to_vec(),
        residuals: BTreeMap::new(),
        spectra: vec![],
        weyl: None,
        log_periodic: None,
    };
    let mut reports = Vec::new();
    let a = &setup.operator;
    let g = &setup.gamma;
    let modal = if dense { None } else { Some(ModalCoupling::new(a, g)?) };
    let two_weight = |summary: &mut TaskSummary| -> CliResult<Array1<f64>> {
        let v2 = setup.v2()?;
        if let Some(mc) = &modal {
            return Ok(mc.two_weight_spectrum(&coupling(a, &setup.v1), &coupling(a, v2), threshold)?);
        }
        let s1 = BsSystem::new(a, g, &setup.v1)?;
        let s2 = BsSystem::new(a, g, v2)?;
        let rep = two_weight_difference(&s1, &s2, threshold)?;
        summary.residuals.insert("two_path".into(), rep.residual);
        if matches!(task, TaskSpec::RobinDiff) {
            let r1 = assemble_robin(&setup.grid, &setup.coeffs, &setup.v1)?;
            let r2 = assemble_robin(&setup.grid, &setup.coeffs, v2)?;
            let direct = inverse_power(&r2, 1.0)? - inverse_power(&r1, 1.0)?;
            summary
                .residuals
                .insert("robin_assembly".into(), linalg::relative_residual(&rep.difference.view(), &direct.view()));
        }
        dense_eigenvalues(&rep.difference)
    };
    match task {
        TaskSpec::ResolventDiff => {
            let ev = match &modal {
                Some(mc) => mc.resolvent_difference_spectrum(&coupling(a, &setup.v1), threshold)?,
                None => {
                    let sys = BsSystem::new(a, g, &setup.v1)?;
                    let rep = resolvent_difference(&sys, threshold)?;
                    summary.residuals.insert("two_path".into(), rep.residual);
                    dense_eigenvalues(&rep.difference)?
                }
            };
            analyze("total", &ev, cfg, &mut summary, &mut reports)?;
        }
        TaskSpec::TwoWeightDiff | TaskSpec::RobinDiff => {
            let ev = two_weight(&mut summary)?;
            analyze("total", &ev, cfg, &mut summary, &mut reports)?;
        }
        TaskSpec::WeylCheck => {
            let ev = two_weight(&mut summary)?;
            analyze("total", &ev, cfg, &mut summary, &mut reports)?;
            summary.weyl = Some(weyl_summary(cfg, setup, &reports[0].1)?);
        }
        TaskSpec::PowerDiff { m } => match &modal {
            Some(mc) => {
                let ps = mc.power_difference_spectra(&coupling(a, &setup.v1), *m, threshold)?;
                summary.residuals.insert("telescoped_vs_direct".into(), ps.residual);
                analyze("total", &ps.total, cfg, &mut summary, &mut reports)?;
                analyze("H2", &ps.h2, cfg, &mut summary, &mut reports)?;
                if *m >= 2 {
                    analyze("H3", &ps.h3, cfg, &mut summary, &mut reports)?;
                }
            }
            None => {
                let sys = BsSystem::new(a, g, &setup.v1)?;
                let rep = power_difference(&sys, *m, threshold)?;
                summary.residuals.insert("expansion_vs_direct".into(), rep.residual);
                analyze("total", &dense_eigenvalues(&rep.difference)?, cfg, &mut summary, &mut reports)?;
                for (label, mat) in &rep.terms {
                    if label != "H3" || *m >= 2 {
                        analyze(label, &dense_eigenvalues(mat)?, cfg, &mut summary, &mut reports)?;
                    }
                }
            }
        },
        TaskSpec::KreinFeller => {
            let ev = match &modal {
                Some(mc) => mc.bs_eigenvalues(&coupling(a, &setup.v1), 0.5)?,
                None => bs_operator(a, g, &setup.v1, 0.5)?.eigenvalues()?,
            };
            analyze("total", &ev, cfg, &mut summary, &mut reports)?;
            let report = &reports[0].1;
            if let Some(fit) = report.fit {
                let (lo, hi) = match cfg.analysis.window {
                    FitWindow::Lambda { .. } | FitWindow::Ranks { .. } => (fit.window.0, fit.window.1),
                    _ => {
                        let (smax, smin) = (report.singular[fit.window.0 - 1], report.singular[fit.window.1 - 1]);
                        let idx: Vec<usize> = (0..report.counting.len())
                            .filter(|&k| report.counting[k].lambda <= smax && report.counting[k].lambda >= smin)
                            .collect();
                        (idx.first().copied().unwrap_or(0), idx.last().copied().unwrap_or(0))
                    }
                };
                let slice = &report.counting[lo..=hi];
                if let Ok(lp) = log_periodic_residual(slice, fit.theta) {
                    summary.log_periodic = Some(LogPeriodicSummary {
                        theta: fit.theta,
                        max_min_ratio: lp.max_min_ratio,
                        decades: (slice[0].lambda / slice[slice.len() - 1].lambda).log10(),
                        period: lp.period,
                    });
                }
            }
        }
    }
    Ok(TaskOutcome { summary, reports })
}

fn weyl_summary(cfg: &ExperimentConfig, setup: &Setup, report: &SpectrumReport) -> CliResult<WeylSummary> {
    let (a, b) = match &cfg.measure {
        MeasureSpec::Segment { a, b, .. } => (a.clone(), b.clone()),
        _ => return Err(CliError::Validation("weyl_check needs a segment measure".into())),
    };
    let dir = [b[0] - a[0], b[1] - a[1]];
    let normal = vec![-dir[1], dir[0]];
    let n = setup.grid.dim();
    let theta = (n as f64 - 1.0) / 3.0;
    let pred = weyl_prediction(
        &setup.measure,
        &setup.v1,
        setup.v2()?,
        |x| symbol_at(&cfg.operator.coefficient, n, x),
        |_| normal.clone(),
        theta,
        PrefactorConvention::Without,
    )?;
    let with = pred.in_convention(PrefactorConvention::With2PiD);
    Ok(WeylSummary {
        theta,
        predicted_plus: pred.coefficient_plus,
        predicted_minus: pred.coefficient_minus,
        predicted_plus_with_2pi_d: with.coefficient_plus,
        predicted_minus_with_2pi_d: with.coefficient_minus,
        measured_plus: fixed_theta_coefficient(&report.positive, theta),
        measured_minus: fixed_theta_coefficient(&report.negative, theta),
    })
}

/// Results of every task of a config, before anything is written.
pub struct Execution {
    pub outcomes: Vec<TaskOutcome>,
    pub raises: Vec<TRaise>,
    pub warnings: Vec<String>,
    pub t_used: f64,
}

/// Runs every task of a config in memory.
pub fn execute(cfg: &ExperimentConfig) -> CliResult<Execution> {
    let (setup, raises, margins) = prepare(cfg)?;
    let outcomes = cfg
        .tasks
        .iter()
        .map(|task| run_task(cfg, &setup, task, &margins))
        .collect::<CliResult<Vec<_>>>()
        .map_err(|e| match e {
            CliError::Positivity { margin, threshold, .. } => CliError::Positivity { margin, threshold, t: setup.t },
            other => other,
        })?;
    Ok(Execution { outcomes, raises, warnings: setup.warnings.clone(), t_used: setup.t })
}
