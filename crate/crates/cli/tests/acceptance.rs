//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bslab::config::ExperimentConfig;
use bslab::experiment::TaskSummary;
use bslab::output::{run_config, sweep, RunOutcome};
use bslab::verify::{identity_stats, kyfan_suite, oracles, IdentityPlan, IdentityStats};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict, String> {
    Ok(Verdict { pass, detail })
}

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"));
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn run(name: &str, root: &Path) -> Result<RunOutcome, String> {
    run_config(&config(name), root).map_err(|e| e.to_string())
}

fn task<'a>(run: &'a RunOutcome, slug: &str) -> Result<&'a TaskSummary, String> {
    run.summary.tasks.iter().find(|t| t.task == slug).ok_or_else(|| format!("no task {slug}"))
}

fn fit_slope(t: &TaskSummary) -> Result<(f64, f64), String> {
    let f = t.fit().ok_or_else(|| format!("{}: no fit", t.task))?;
    Ok((f.slope, f.r_squared))
}

/// Singular values of one spectrum of a task, read back from its CSV.
fn values(run: &RunOutcome, task: &str, spectrum: &str) -> Result<Vec<f64>, String> {
    let kind = format!("{spectrum}_values");
    let entry = run
        .manifest
        .outputs
        .iter()
        .find(|o| o.task == task && o.kind == kind)
        .ok_or_else(|| format!("no output {task}/{kind}"))?;
    let mut r = csv::Reader::from_path(run.dir.join(&entry.path)).map_err(|e| e.to_string())?;
    r.records().map(|rec| rec.map_err(|e| e.to_string())?[1].parse::<f64>().map_err(|e| e.to_string())).collect()
}

/// Least-squares slope of log s_j against log j over the 1-based range first..=last.
fn log_slope(s: &[f64], first: usize, last: usize) -> f64 {
    let pts: Vec<(f64, f64)> = (first..=last).map(|j| ((j as f64).ln(), s[j - 1].ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn identity_verdict(s: &IdentityStats) -> Result<Verdict, String> {
    verdict(
        s.draws == 120 && s.max_residual() <= 1e-8,
        format!(
            "{} draws; max residual resolvent {:.1e}, two-weight {:.1e}, power m=2 {:.1e}, m=3 {:.1e}",
            s.draws, s.resolvent, s.two_weight, s.power2, s.power3
        ),
    )
}

fn sign_verdict(s: &IdentityStats) -> Result<Verdict, String> {
    verdict(
        s.nonneg_draws > 0 && s.ordered_draws > 0 && s.nonneg_worst >= -1e-10 && s.ordered_worst >= -1e-10,
        format!(
            "V>=0: {} draws, worst min eig/norm {:.1e}; V1>=V2: {} draws, worst {:.1e}",
            s.nonneg_draws, s.nonneg_worst, s.ordered_draws, s.ordered_worst
        ),
    )
}

fn schrodinger(root: &Path) -> Result<Verdict, String> {
    let r = run("schrodinger_1d", root)?;
    let (slope, r2) = fit_slope(task(&r, "resolvent_diff")?)?;
    verdict((slope + 4.0).abs() <= 0.4 && r2 >= 0.98, format!("slope {slope:.3} (target -4 ± 0.4), R² {r2:.4}"))
}

fn segment(root: &Path) -> Result<Verdict, String> {
    let values = ["1.0".to_string(), "2.0".to_string()];
    let out = sweep(&config("segment_delta"), "weights.v2.value", &values, root).map_err(|e| e.to_string())?;
    let fits: Vec<_> = out
        .runs
        .iter()
        .map(|r| task(r, "two_weight_diff").and_then(|t| t.fit().copied().ok_or_else(|| "no fit".to_string())))
        .collect::<Result<_, _>>()?;
    let target = 2f64.powf(1.0 / 3.0);
    let ratio = fits[1].coefficient / fits[0].coefficient;
    let slopes_ok = fits.iter().all(|f| (f.slope + 3.0).abs() <= 0.45);
    verdict(
        slopes_ok && (ratio / target - 1.0).abs() <= 0.10,
        format!(
            "slopes {:.3}, {:.3} (target -3 ± 0.45); coefficient ratio {ratio:.4} (target {target:.4} ± 10%)",
            fits[0].slope, fits[1].slope
        ),
    )
}

fn robin(root: &Path) -> Result<Verdict, String> {
    let r = run("robin_square", root)?;
    let t = task(&r, "robin_diff")?;
    let (slope, r2) = fit_slope(t)?;
    verdict((slope + 3.0).abs() <= 0.5, format!("slope {slope:.3} (target -3 ± 0.5), R² {r2:.4}"))
}

fn krein_feller(root: &Path) -> Result<Verdict, String> {
    let r = run("krein_feller_cantor", root)?;
    let t = task(&r, "krein_feller")?;
    let theta = t.fit().ok_or("no fit")?.theta;
    let lp = t.log_periodic.as_ref().ok_or("no log-periodic summary")?;
    verdict(
        (0.367..=0.407).contains(&theta) && lp.max_min_ratio < 3.0 && lp.decades >= 2.0,
        format!(
            "theta {theta:.4} (target [0.367, 0.407]); n(λ)λ^θ max/min {:.3} over {:.2} decades",
            lp.max_min_ratio, lp.decades
        ),
    )
}

fn power_gap(root: &Path) -> Result<Verdict, String> {
    let r = run("power_gap", root)?;
    let mut orders = Vec::new();
    for m in 1..=3 {
        orders.push(1.0 / task(&r, &format!("power_diff_m{m}"))?.fit().ok_or(format!("m={m}: no fit"))?.theta);
    }
    // Segment measure: d = 1, predicted step 2/d.
    let predicted = 2.0;
    let gaps = [orders[1] - orders[0], orders[2] - orders[1]];
    let gaps_ok = gaps.iter().all(|g| (g / predicted - 1.0).abs() <= 0.30);
    let mut h_detail = Vec::new();
    let mut h_ok = true;
    for m in 2..=3 {
        let slug = format!("power_diff_m{m}");
        let (h2, h3) = (values(&r, &slug, "H2")?, values(&r, &slug, "H3")?);
        // Common index range above the noise floor of both groups.
        let last = 33.min(h2.len()).min(h3.len());
        let (s2, s3) = (log_slope(&h2, 4, last), log_slope(&h3, 4, last));
        h_ok &= s3 < s2;
        h_detail.push(format!("m={m}: H2 {s2:.2}, H3 {s3:.2} over j=4..{last}"));
    }
    verdict(
        gaps_ok && h_ok,
        format!(
            "1/theta {:.3}, {:.3}, {:.3}; gaps {:.3}, {:.3} (target {predicted} ± 30%); {}",
            orders[0],
            orders[1],
            orders[2],
            gaps[0],
            gaps[1],
            h_detail.join("; ")
        ),
    )
}

fn kyfan() -> Result<Verdict, String> {
    let rep = kyfan_suite(100, 30, 7).map_err(|e| e.to_string())?;
    verdict(rep.violations == 0, format!("{} violations in {} checks over 100 pairs", rep.violations, rep.checks))
}

fn closed_forms() -> Result<Verdict, String> {
    let rep = oracles().map_err(|e| e.to_string())?;
    let detail =
        rep.checks.iter().map(|c| format!("{} {}", c.name, if c.pass { "ok" } else { "FAILED" })).collect::<Vec<_>>();
    verdict(rep.passed(), detail.join("; "))
}

fn report(id: usize, name: &str, limit: Option<Duration>, elapsed: Duration, outcome: Result<Verdict, String>) -> bool {
    let (pass, detail) = match outcome {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let budget = limit.map(|l| format!(", limit {}s", l.as_secs())).unwrap_or_default();
    let ok = pass && in_time;
    println!(
        "criterion {id} {name}: {} ({detail}; {:.1}s{budget})",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn main() -> ExitCode {
    // Listing is a no-op: this target has no individually addressable tests.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let tmp = tempfile::tempdir().expect("temporary output root");
    let root: PathBuf = tmp.path().to_path_buf();
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    let mut ok = true;

    let (stats, t_id) = timed(|| identity_stats(IdentityPlan::FULL).map_err(|e| e.to_string()));
    ok &=
        report(1, "identity suite", minutes(5), t_id, stats.as_ref().map_err(Clone::clone).and_then(identity_verdict));
    let (v, t) = timed(|| schrodinger(&root));
    ok &= report(2, "regular Schrödinger order", minutes(10), t, v);
    let (v, t) = timed(|| segment(&root));
    ok &= report(3, "segment delta-interaction", minutes(15), t, v);
    let (v, t) = timed(|| robin(&root));
    ok &= report(4, "Robin difference order", minutes(15), t, v);
    let (v, t) = timed(|| krein_feller(&root));
    ok &= report(5, "Krein-Feller fractal exponent", minutes(10), t, v);
    let (v, t) = timed(|| power_gap(&root));
    ok &= report(6, "power-difference order gap", None, t, v);
    let (v, t) = timed(kyfan);
    ok &= report(7, "Ky Fan inequalities", minutes(1), t, v);
    let (v, t) = timed(closed_forms);
    ok &= report(8, "closed-form oracles", Some(Duration::from_secs(30)), t, v);
    // Shares the identity-suite draws; their runtime is accounted to criterion 1.
    ok &= report(9, "sign monotonicity", None, Duration::ZERO, stats.and_then(|s| sign_verdict(&s)));

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
