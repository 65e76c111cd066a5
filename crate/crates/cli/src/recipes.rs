//! The named experiments. Each writes its artifacts under `cfg.out` and returns
//! their file names; `checks` also reports whether every check passed.

use std::f64::consts::PI;

use anyhow::{Context, Result};
use nhflow::bubble_neck::{extract_bubbles, injected_shrinkers, neck_oscillation_profile, ExtractConfig};
use nhflow::construction::{
    annulus_energy_estimate, build_initial_map, total_energy_check, width_report, InitialMapSpec,
};
use nhflow::energy_analysis::{
    dissipation_check, pohozaev_balance, radial_comparison_map, radial_n_laplacian, TensionField,
};
use nhflow::equivariant_flow::{
    bubble, energy_gradient, reduced_energy, run, small_amplitude, BlowupEvent, FlowConfig, FlowStatus,
    FlowTrajectory,
};
use nhflow::fields::{DomainKind, RadialProfile};
use nhflow::io::{write_json, write_table, Cell, Versioned};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Initial};

pub struct Outcome {
    pub artifacts: Vec<String>,
    pub ok: bool,
}

fn status_name(s: FlowStatus) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn opt(x: Option<f64>) -> Cell {
    x.map(Cell::Num).unwrap_or_else(|| Cell::Text(String::new()))
}

/// Least-squares slope of `y` against `x`.
fn regression_slope(xy: &[(f64, f64)]) -> f64 {
    let k = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / k;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn simulate(cfg: &ExperimentConfig, n: usize, initial: &Initial) -> Result<(FlowTrajectory, Option<BlowupEvent>)> {
    let flow = FlowConfig { n, ..cfg.flow.clone() };
    let p = initial.profile(&flow)?;
    Ok(run(&p, &flow)?)
}

#[derive(Serialize)]
struct EventSummary {
    t_max: f64,
    location: f64,
    r_i: f64,
    r_series: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct FlowSummary {
    n: usize,
    status: FlowStatus,
    steps: usize,
    rejected_steps: usize,
    snapshots: usize,
    remeshes: usize,
    initial_energy: f64,
    final_energy: f64,
    energy_fraction: f64,
    final_time: f64,
    max_grad: f64,
    max_bookkeeping_residual: Option<f64>,
    max_step_increase: f64,
    event: Option<EventSummary>,
}

fn summarize(traj: &FlowTrajectory, event: Option<&BlowupEvent>) -> FlowSummary {
    let e0 = traj.snapshots[0].energy;
    let last = traj.last();
    FlowSummary {
        n: traj.n,
        status: traj.status,
        steps: traj.steps,
        rejected_steps: traj.rejected_steps,
        snapshots: traj.snapshots.len(),
        remeshes: traj.remeshes.len(),
        initial_energy: e0,
        final_energy: last.energy,
        energy_fraction: last.energy / e0,
        final_time: last.time,
        max_grad: last.max_grad,
        max_bookkeeping_residual: dissipation_check(traj, None).ok().map(|r| r.max_abs_residual()),
        max_step_increase: traj.max_step_increase,
        event: event.map(|e| EventSummary {
            t_max: e.t_max,
            location: e.location,
            r_i: e.r_i,
            r_series: e.r_series.clone(),
        }),
    }
}

fn energy_rows(traj: &FlowTrajectory) -> Vec<Vec<Cell>> {
    traj.snapshots
        .iter()
        .map(|s| {
            vec![
                Cell::from(s.time),
                Cell::from(s.step),
                Cell::from(s.energy),
                Cell::from(s.dissipation),
                Cell::from(s.remesh_jump),
                Cell::from(s.max_grad),
                Cell::from(s.dt),
            ]
        })
        .collect()
}

pub fn flow(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cfg.out;
    let (traj, event) = simulate(cfg, cfg.flow.n, &cfg.initial)?;
    traj.write_csv(&out.join("trajectory.csv"))?;
    write_table(
        &out.join("energy.csv"),
        &["t", "step", "energy", "dissipation", "remesh_jump", "max_grad", "dt"],
        &energy_rows(&traj),
    )?;
    write_json(&Versioned::new("flow_summary", summarize(&traj, event.as_ref())), &out.join("summary.json"))?;
    Ok(Outcome {
        artifacts: vec!["trajectory.csv".into(), "energy.csv".into(), "summary.json".into()],
        ok: true,
    })
}

pub fn blowup_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cfg.out;
    let mut points: Vec<(usize, f64)> = cfg
        .sweep
        .n
        .iter()
        .flat_map(|&n| cfg.sweep.amplitude.iter().map(move |&a| (n, a)))
        .collect();
    points.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    points.dedup();
    let results: Vec<_> = points
        .par_iter()
        .map(|&(n, a)| {
            let initial = Initial { amplitude: a, ..cfg.initial.clone() };
            simulate(cfg, n, &initial).with_context(|| format!("sweep point n = {n}, A = {a}"))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (&(n, a), (traj, event)) in points.iter().zip(&results) {
        let last = traj.last();
        let e0 = traj.snapshots[0].energy;
        rows.push(vec![
            Cell::from(n),
            Cell::from(a),
            Cell::Text(status_name(traj.status)),
            opt(event.as_ref().map(|e| e.t_max)),
            opt(event.as_ref().map(|e| e.r_i)),
            Cell::from(last.energy / e0),
            Cell::from(last.max_grad),
            Cell::from(last.time),
            Cell::from(traj.steps),
        ]);
        if let Some(e) = event {
            for &(t, r) in &e.r_series {
                series.push(vec![Cell::from(n), Cell::from(a), Cell::from(t), Cell::from(r)]);
            }
        }
    }
    write_table(
        &out.join("sweep.csv"),
        &["n", "amplitude", "status", "t_max", "r_final", "energy_fraction", "max_grad", "final_time", "steps"],
        &rows,
    )?;
    write_table(&out.join("r_series.csv"), &["n", "amplitude", "t", "r_i"], &series)?;
    Ok(Outcome {
        artifacts: vec!["sweep.csv".into(), "r_series.csv".into()],
        ok: true,
    })
}

pub fn bubble_analyze(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cfg.out;
    let (traj, event) = simulate(cfg, cfg.flow.n, &cfg.initial)?;
    let b = &cfg.bubble;
    let decomp = extract_bubbles(&traj, event.as_ref(), &b.extract)?;
    let neck = neck_oscillation_profile(&decomp, &traj.last().profile, b.neck_eps)?;
    write_json(&Versioned::new("bubble_decomposition", &decomp), &out.join("decomposition.json"))?;
    let bubbles: Vec<Vec<Cell>> = decomp
        .bubbles
        .iter()
        .enumerate()
        .map(|(i, x)| {
            vec![
                Cell::from(i),
                Cell::from(x.scale),
                Cell::from(x.center),
                Cell::from(x.fit.lambda),
                Cell::from(x.fit.sign),
                Cell::from(x.fit.residual),
                Cell::from(x.fit.max_error),
                Cell::from(x.lambda_physical),
                Cell::Text(x.unidentified.to_string()),
            ]
        })
        .collect();
    write_table(
        &out.join("bubbles.csv"),
        &["index", "scale", "center", "lambda", "sign", "fit_rms", "fit_max", "lambda_physical", "unidentified"],
        &bubbles,
    )?;
    let shells: Vec<Vec<Cell>> = neck
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::from(r.j as i64),
                Cell::from(r.r_lo),
                Cell::from(r.r_hi),
                Cell::from(r.energy),
                Cell::from(r.oscillation),
                Cell::Text(r.small.to_string()),
            ]
        })
        .collect();
    write_table(&out.join("shells.csv"), &["j", "r_lo", "r_hi", "energy", "oscillation", "small"], &shells)?;
    let mut deltas = b.deltas.clone();
    deltas.sort_by(|a, b| b.total_cmp(a));
    let rows = deltas
        .iter()
        .map(|&delta| {
            let d = extract_bubbles(&traj, event.as_ref(), &ExtractConfig { delta, ..b.extract })?;
            let p = neck_oscillation_profile(&d, &traj.last().profile, b.neck_eps)?;
            let l = d.ledger;
            Ok(vec![
                Cell::from(delta),
                Cell::from(l.total),
                Cell::from(l.base),
                Cell::from(l.bubbles),
                Cell::from(l.neck),
                Cell::from(l.neck / l.total),
                Cell::from(p.total_oscillation),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    write_table(
        &out.join("deltas.csv"),
        &["delta", "total", "base", "bubbles", "neck", "neck_share", "neck_oscillation"],
        &rows,
    )?;
    Ok(Outcome {
        artifacts: vec![
            "decomposition.json".into(),
            "bubbles.csv".into(),
            "shells.csv".into(),
            "deltas.csv".into(),
        ],
        ok: true,
    })
}

#[derive(Serialize)]
struct ScalingReport {
    n: usize,
    l: i64,
    /// Fitted slope of `ln E(annulus)` against `ln(−ln σ)`.
    slope: f64,
    expected_slope: f64,
    relative_slope_error: f64,
    rows: Vec<ScalingRow>,
}

#[derive(Serialize)]
struct ScalingRow {
    sigma: f64,
    computed: f64,
    exact: f64,
    formula: f64,
    total_energy: f64,
}

pub fn construct(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cfg.out;
    let c = &cfg.construct;
    let mut sigmas = c.sigmas.clone();
    sigmas.sort_by(|a, b| b.total_cmp(a));
    let rows: Vec<ScalingRow> = sigmas
        .par_iter()
        .map(|&sigma| {
            let b = build_initial_map(&InitialMapSpec { sigma, ..c.spec }, &c.cover)?;
            let a = annulus_energy_estimate(&b);
            let t = total_energy_check(&b)?;
            Ok(ScalingRow {
                sigma,
                computed: a.computed,
                exact: a.exact,
                formula: a.formula,
                total_energy: t.total,
            })
        })
        .collect::<Result<_>>()?;
    let xy: Vec<(f64, f64)> = rows.iter().map(|r| ((-r.sigma.ln()).ln(), r.computed.ln())).collect();
    let slope = regression_slope(&xy);
    let expected = -(c.spec.n as f64 - 1.0);
    let csv: Vec<Vec<Cell>> = rows
        .iter()
        .zip(&xy)
        .map(|(r, p)| {
            vec![
                Cell::from(r.sigma),
                Cell::from(p.0),
                Cell::from(r.computed),
                Cell::from(r.exact),
                Cell::from(r.formula),
                Cell::from(r.total_energy),
            ]
        })
        .collect();
    write_table(
        &out.join("scaling.csv"),
        &["sigma", "log_neg_log_sigma", "annulus_energy", "annulus_exact", "formula", "total_energy"],
        &csv,
    )?;
    let report = ScalingReport {
        n: c.spec.n,
        l: c.spec.l,
        slope,
        expected_slope: expected,
        relative_slope_error: (slope / expected - 1.0).abs(),
        rows,
    };
    write_json(&Versioned::new("annulus_scaling", report), &out.join("scaling.json"))?;
    Ok(Outcome {
        artifacts: vec!["scaling.csv".into(), "scaling.json".into()],
        ok: true,
    })
}

#[derive(Serialize)]
struct WidthRow {
    l: i64,
    width: f64,
    lower_bound: f64,
    upper_bound: f64,
    energy: f64,
    /// `2 E_n(h) + 1`.
    bound: f64,
    holds: bool,
}

pub fn width(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cfg.out;
    let c = &cfg.construct;
    let mut ls = c.windings.clone();
    ls.sort();
    ls.dedup();
    let rows: Vec<WidthRow> = ls
        .par_iter()
        .map(|&l| {
            let b = build_initial_map(&InitialMapSpec { l, ..c.spec }, &c.cover)?;
            let w = width_report(&b)?;
            let t = total_energy_check(&b)?;
            Ok(WidthRow {
                l,
                width: w.width,
                lower_bound: w.lower_bound,
                upper_bound: w.upper_bound,
                energy: t.total,
                bound: 2.0 * t.bump_energy + 1.0,
                holds: t.holds,
            })
        })
        .collect::<Result<_>>()?;
    let csv: Vec<Vec<Cell>> = rows
        .iter()
        .map(|r| {
            vec![
                Cell::from(r.l),
                Cell::from(r.width),
                Cell::from(r.lower_bound),
                Cell::from(r.upper_bound),
                Cell::from(r.energy),
                Cell::from(r.bound),
                Cell::Text(r.holds.to_string()),
            ]
        })
        .collect();
    write_table(
        &out.join("width.csv"),
        &["l", "width", "lower_bound", "upper_bound", "energy", "bound", "holds"],
        &csv,
    )?;
    write_json(&Versioned::new("width", &rows), &out.join("width.json"))?;
    Ok(Outcome {
        artifacts: vec!["width.csv".into(), "width.json".into()],
        ok: true,
    })
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    value: f64,
    threshold: f64,
    /// `"<"` or `">="`.
    relation: &'static str,
    pass: bool,
}

fn below(name: &'static str, value: f64, threshold: f64) -> Check {
    Check {
        name,
        value,
        threshold,
        relation: "<",
        pass: value < threshold,
    }
}

fn at_least(name: &'static str, value: f64, threshold: f64) -> Check {
    Check {
        name,
        value,
        threshold,
        relation: ">=",
        pass: value >= threshold,
    }
}

fn order(e: &[f64]) -> f64 {
    e.windows(2).map(|w| (w[0] / w[1]).log2()).fold(f64::INFINITY, f64::min)
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

fn gradient_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let coef: Vec<f64> = (1..=4).map(|j| rng.gen_range(-1.0..1.0) / j as f64).collect();
        let p = RadialProfile::from_fn(DomainKind::SpherePolar, 128, PI, |r| {
            coef.iter().enumerate().map(|(j, c)| c * ((j + 1) as f64 * r).sin()).sum()
        })?;
        for n in 2..=5 {
            let g = energy_gradient(&p, n, 0.0);
            let scale = sup(&g);
            for k in (1..p.cells()).step_by(5) {
                let h = 1e-6;
                let mut a = p.clone();
                let mut b = p.clone();
                a.values[k] += h;
                b.values[k] -= h;
                let fd = (reduced_energy(&a, n) - reduced_energy(&b, n)) / (2.0 * h);
                worst = worst.max((fd - g[k]).abs() / scale);
            }
        }
    }
    Ok(worst)
}

fn run_checks(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    out.push(below("gradient_fd_relative_error", gradient_check(seed)?, 1e-6));

    let tension = |k| -> Result<f64> {
        let p = bubble(DomainKind::FlatBall, k, 8.0, 1.0)?;
        Ok(TensionField::of_profile(&p, 3, 0.0)?.sup_norm())
    };
    let t = [tension(128)?, tension(256)?, tension(512)?];
    out.push(at_least("bubble_tension_order", order(&t), 1.8));

    let p = bubble(DomainKind::FlatBall, 1024, 4.0, 1.0)?;
    let rep = pohozaev_balance(&p, 3, 2.0, 0.0)?;
    out.push(below("pohozaev_identity_residual", rep.identity_residual.abs() / rep.lhs, 1e-3));

    let (traj, ev) = injected_shrinkers(&[1e-2, 3e-3, 1e-3], 3, 1500)?;
    let d = extract_bubbles(&traj, Some(&ev), &ExtractConfig::default())?;
    let lambda_err = d.bubbles.first().map_or(f64::INFINITY, |b| (b.lambda_physical / 1e-3 - 1.0).abs());
    out.push(below("injected_lambda_relative_error", lambda_err, 1e-2));
    out.push(below("ledger_additivity", d.ledger.additivity_error / d.ledger.total, 1e-8));

    let flow = FlowConfig {
        k: 128,
        max_time: 0.05,
        ..Default::default()
    };
    let (traj, _) = run(&small_amplitude(128, 0.1)?, &flow)?;
    let e0 = traj.snapshots[0].energy;
    let diss = dissipation_check(&traj, Some(1e-2 * e0))?;
    out.push(below("dissipation_residual_over_e0", diss.max_abs_residual() / e0, 1e-2));
    out.push(below("max_energy_increase", diss.max_increase.max(traj.max_step_increase), 1e-12));

    let cover = nhflow::construction::CoverModel::default();
    let xy: Vec<(f64, f64)> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&sigma| {
            let spec = InitialMapSpec {
                sigma,
                l: 1,
                resolution: 16,
                ..Default::default()
            };
            let b = build_initial_map(&spec, &cover)?;
            Ok(((-sigma.ln()).ln(), annulus_energy_estimate(&b).computed.ln()))
        })
        .collect::<Result<_>>()?;
    out.push(below("annulus_slope_error", (regression_slope(&xy) + 1.0).abs(), 0.05));

    let spec = InitialMapSpec {
        l: 2,
        resolution: 16,
        ..Default::default()
    };
    let w = width_report(&build_initial_map(&spec, &cover)?)?;
    out.push(at_least("width_l2", w.width, 1.8));

    let p = bubble(DomainKind::FlatBall, 1024, 1.0, 0.05)?;
    let lap = [32usize, 64, 128]
        .iter()
        .map(|&k| {
            let cm = radial_comparison_map(&p, 3, 2, 0.5, 8, k + 1)?;
            Ok(radial_n_laplacian(&cm.grid, &cm.values, 3).iter().flatten().fold(0.0f64, |a, x| a.max(x.abs())))
        })
        .collect::<Result<Vec<f64>>>()?;
    out.push(at_least("comparison_map_order", order(&lap), 1.8));
    Ok(out)
}

pub fn checks(cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cfg.out;
    let list = run_checks(cfg.seed)?;
    let ok = list.iter().all(|c| c.pass);
    let rows: Vec<Vec<Cell>> = list
        .iter()
        .map(|c| {
            vec![
                Cell::from(c.name),
                Cell::from(c.value),
                Cell::from(c.relation),
                Cell::from(c.threshold),
                Cell::Text(c.pass.to_string()),
            ]
        })
        .collect();
    write_table(&out.join("checks.csv"), &["name", "value", "relation", "threshold", "pass"], &rows)?;
    write_json(&Versioned::new("checks", &list), &out.join("checks.json"))?;
    for c in &list {
        eprintln!("{} {} = {:.3e} ({} {:.1e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.relation, c.threshold);
    }
    Ok(Outcome {
        artifacts: vec!["checks.csv".into(), "checks.json".into()],
        ok,
    })
}

pub fn dispatch(cfg: &ExperimentConfig) -> Result<Outcome> {
    use crate::config::Experiment::*;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create {}", cfg.out.display()))?;
    match cfg.experiment {
        Flow => flow(cfg),
        BlowupSweep => blowup_sweep(cfg),
        BubbleAnalyze => bubble_analyze(cfg),
        Construct => construct(cfg),
        Width => width(cfg),
        Checks => checks(cfg),
    }
}
