//! Rescaling of blowup snapshots, extraction of the canonical bubble and
//! shell-by-shell neck diagnostics.
//!
//! Concentration for corotational data happens at a pole of the domain chart.
//! Everything here works in the distance from that pole; a concentration point
//! at the far end of the sphere chart is handled by reflecting the profile.

use serde::{Deserialize, Serialize};

use crate::energy_analysis::ball_energy;
use crate::equivariant_flow::{interpolant, reduced_energy, BlowupEvent, FlowStatus, FlowTrajectory, Snapshot};
use crate::error::{domain, Error, Result};
use crate::fields::{latitude_diameter, pchip_eval, pchip_slopes, sphere_area, DomainKind, RadialProfile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    /// Outer radius of the neck region.
    pub delta: f64,
    /// The bubble window is `B_{R r_i}`.
    pub big_r: f64,
    /// Largest RMS deviation (radians) from the canonical family.
    pub fit_tol: f64,
    /// Number of trailing snapshots that are rescaled and fitted.
    pub last_k: usize,
    /// Log-spaced samples used by the fit.
    pub fit_samples: usize,
    /// Nodes of the rescaled profiles.
    pub resample_nodes: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            delta: 0.125,
            big_r: 32.0,
            fit_tol: 0.05,
            last_k: 4,
            fit_samples: 96,
            resample_nodes: 1025,
        }
    }
}

/// Profile seen from the concentration point: `ρ ↦ h(ρ)` at the origin,
/// `ρ ↦ h(π) − h(π − ρ)` at the far pole of the sphere chart.
fn about_center(p: &RadialProfile, center: f64) -> Result<RadialProfile> {
    let tol = 1e-9 * p.radius().max(1.0);
    if (center - p.grid[0]).abs() <= tol {
        return Ok(p.clone());
    }
    if p.kind == DomainKind::SpherePolar && (center - p.radius()).abs() <= tol {
        let b = p.radius();
        let grid = p.grid.iter().rev().map(|r| b - r).collect();
        let top = p.values[p.values.len() - 1];
        let values = p.values.iter().rev().map(|v| top - v).collect();
        return RadialProfile::new(p.kind, grid, values);
    }
    domain(format!("center {center} is not a pole of the profile"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rescaled {
    /// `ĥ(ξ)`, the profile seen from `center` at distance `scale·ξ`, on a flat-ball grid.
    pub profile: RadialProfile,
    pub center: f64,
    pub scale: f64,
    /// The requested window did not fit in the domain and was cut.
    pub truncated: bool,
}

/// Resample the profile seen from `center` at distance `scale·ξ` for `ξ ∈ [0, xi_max]` on `nodes` uniform
/// nodes by monotone cubic interpolation.
pub fn rescale(p: &RadialProfile, center: f64, scale: f64, xi_max: f64, nodes: usize) -> Result<Rescaled> {
    if !(scale > 0.0) || !(xi_max > 0.0) {
        return domain("scale and window must be positive");
    }
    if nodes < 2 {
        return domain("need at least two nodes");
    }
    let q = about_center(p, center)?;
    let avail = q.radius() / scale;
    let truncated = xi_max > avail * (1.0 + 1e-12);
    let xi_max = xi_max.min(avail);
    let d = pchip_slopes(&q.grid, &q.values);
    let grid: Vec<f64> = (0..nodes).map(|i| xi_max * i as f64 / (nodes - 1) as f64).collect();
    let values = grid
        .iter()
        .map(|x| pchip_eval(&q.grid, &q.values, &d, (x * scale).min(q.radius())))
        .collect();
    Ok(Rescaled {
        profile: RadialProfile::new(DomainKind::FlatBall, grid, values)?,
        center,
        scale,
        truncated,
    })
}

/// Least-squares fit of `h(0) + sign·2 arctan(ξ/λ)` to `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BubbleFit {
    pub lambda: f64,
    pub sign: f64,
    pub offset: f64,
    /// RMS deviation over the samples.
    pub residual: f64,
    /// Largest deviation over the samples.
    pub max_error: f64,
}

pub fn fit_canonical(p: &RadialProfile, xi_lo: f64, xi_hi: f64, samples: usize) -> Result<BubbleFit> {
    if !(xi_lo > 0.0 && xi_hi > xi_lo && xi_hi <= p.radius() * (1.0 + 1e-12)) || samples < 4 {
        return domain("bad fit window");
    }
    let d = pchip_slopes(&p.grid, &p.values);
    let offset = p.values[0];
    let (a, b) = (xi_lo.ln(), xi_hi.ln());
    let pts: Vec<(f64, f64)> = (0..samples)
        .map(|i| {
            let x = (a + (b - a) * i as f64 / (samples - 1) as f64).exp().min(p.radius());
            (x, pchip_eval(&p.grid, &p.values, &d, x) - offset)
        })
        .collect();
    let sign = if pts.iter().map(|(_, y)| y).sum::<f64>() >= 0.0 { 1.0 } else { -1.0 };
    let cost = |ll: f64| {
        let l = ll.exp();
        pts.iter().map(|(x, y)| (y - sign * 2.0 * (x / l).atan()).powi(2)).sum::<f64>()
    };
    // Coarse scan then golden section in log λ.
    let (lo, hi) = (a - 3.0, b + 3.0);
    let m = 200;
    let best = (0..=m)
        .map(|i| lo + (hi - lo) * i as f64 / m as f64)
        .min_by(|x, y| cost(*x).total_cmp(&cost(*y)))
        .unwrap();
    let step = (hi - lo) / m as f64;
    let (mut x0, mut x1) = (best - step, best + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    while x1 - x0 > 1e-12 {
        let c = x1 - g * (x1 - x0);
        let e = x0 + g * (x1 - x0);
        if cost(c) < cost(e) {
            x1 = e;
        } else {
            x0 = c;
        }
    }
    let ll = 0.5 * (x0 + x1);
    let l = ll.exp();
    Ok(BubbleFit {
        lambda: l,
        sign,
        offset,
        residual: (cost(ll) / samples as f64).sqrt(),
        max_error: pts
            .iter()
            .map(|(x, y)| (y - sign * 2.0 * (x / l).atan()).abs())
            .fold(0.0, f64::max),
    })
}

/// `E_n` of the canonical bubble on `R^n`, equal to the energy of the identity of `S^n`.
pub fn canonical_energy(n: usize) -> f64 {
    (n as f64).powf(0.5 * n as f64 - 1.0) * sphere_area(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bubble {
    pub scale: f64,
    pub center: f64,
    pub rescaled: Rescaled,
    pub fit: BubbleFit,
    /// Fitted width in domain units, `λ·scale`.
    pub lambda_physical: f64,
    /// `(time, λ_physical)` over the fitted snapshots.
    pub lambda_series: Vec<(f64, f64)>,
    pub unidentified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub total: f64,
    /// Outside `B_δ`.
    pub base: f64,
    /// Inside the bubble windows.
    pub bubbles: f64,
    /// `B_δ \ B_{R r_i}`.
    pub neck: f64,
    /// `|total − base − bubbles − neck|`.
    pub additivity_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleDecomposition {
    pub n: usize,
    pub time: f64,
    /// Last snapshot frozen at `h(δ)` inside `B_δ`; the unmodified final profile
    /// when nothing concentrated.
    pub base: RadialProfile,
    pub bubbles: Vec<Bubble>,
    /// `(R·r_i, δ)`, absent without bubbles or when the window swallows `B_δ`.
    pub neck: Option<(f64, f64)>,
    pub ledger: EnergyLedger,
    pub config: ExtractConfig,
}

pub fn extract_bubbles(
    traj: &FlowTrajectory,
    event: Option<&BlowupEvent>,
    cfg: &ExtractConfig,
) -> Result<BubbleDecomposition> {
    if !(cfg.delta > 0.0 && cfg.big_r > 0.0 && cfg.fit_tol > 0.0) || cfg.last_k == 0 {
        return Err(Error::Spec("delta, R, fit_tol and last_k must be positive".into()));
    }
    let n = traj.n;
    let last = traj.last();
    let total = reduced_energy(&last.profile, n);
    let Some(ev) = event else {
        return Ok(BubbleDecomposition {
            n,
            time: last.time,
            base: last.profile.clone(),
            bubbles: Vec::new(),
            neck: None,
            ledger: EnergyLedger {
                total,
                base: total,
                bubbles: 0.0,
                neck: 0.0,
                additivity_error: 0.0,
            },
            config: *cfg,
        });
    };
    let q = about_center(&last.profile, ev.location)?;
    if cfg.delta > q.radius() {
        return domain("delta exceeds the domain");
    }
    let start = traj.snapshots.len().saturating_sub(cfg.last_k);
    let mut series = Vec::new();
    let mut latest = None;
    for s in &traj.snapshots[start..] {
        let scale = if s.max_grad > 0.0 { 1.0 / s.max_grad } else { ev.r_i };
        let rs = rescale(&s.profile, ev.location, scale, cfg.big_r, cfg.resample_nodes)?;
        let hi = rs.profile.radius();
        let fit = fit_canonical(&rs.profile, hi * 2f64.powi(-10), hi, cfg.fit_samples)?;
        series.push((s.time, fit.lambda * scale));
        latest = Some((rs, fit, scale));
    }
    let (rescaled, fit, scale) = latest.expect("at least one snapshot");
    let window = (cfg.big_r * scale).min(q.radius());
    let e = |r: f64| ball_energy(&q, n, r) / n as f64;
    let (e_win, e_delta, e_all) = (e(window), e(cfg.delta), e(q.radius()));
    let neck = (window < cfg.delta).then_some((window, cfg.delta));
    let (bubble_e, neck_e, base_e) = match neck {
        Some(_) => (e_win, e_delta - e_win, e_all - e_delta),
        None => (e_win, 0.0, e_all - e_win),
    };
    let mut base = last.profile.clone();
    let (h_delta, _) = interpolant(&q, cfg.delta);
    let inside = |r: f64| {
        let d = if (ev.location - last.profile.grid[0]).abs() < 1e-12 { r } else { ev.location - r };
        d.abs() < cfg.delta
    };
    for (r, v) in base.grid.iter().zip(base.values.iter_mut()) {
        if inside(*r) {
            *v = h_delta;
        }
    }
    Ok(BubbleDecomposition {
        n,
        time: last.time,
        base,
        bubbles: vec![Bubble {
            scale,
            center: ev.location,
            unidentified: fit.residual > cfg.fit_tol,
            lambda_physical: fit.lambda * scale,
            rescaled,
            fit,
            lambda_series: series,
        }],
        neck,
        ledger: EnergyLedger {
            total,
            base: base_e,
            bubbles: bubble_e,
            neck: neck_e,
            additivity_error: (total - base_e - bubble_e - neck_e).abs(),
        },
        config: *cfg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellRow {
    pub j: i32,
    pub r_lo: f64,
    pub r_hi: f64,
    pub energy: f64,
    pub oscillation: f64,
    /// `energy ≤ ε^{2(n−1)}`.
    pub small: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeckProfile {
    pub eps: f64,
    pub rows: Vec<ShellRow>,
    pub total_oscillation: f64,
    pub skipped: Vec<i32>,
}

/// Oscillation and energy on the dyadic shells `B_{2^{1−j}} \ B_{2^{−j}}` lying
/// between `2 R r_i` and `2δ`.
pub fn neck_oscillation_profile(
    decomp: &BubbleDecomposition,
    profile: &RadialProfile,
    eps: f64,
) -> Result<NeckProfile> {
    let mut out = NeckProfile {
        eps,
        rows: Vec::new(),
        total_oscillation: 0.0,
        skipped: Vec::new(),
    };
    let (Some((inner, delta)), Some(b)) = (decomp.neck, decomp.bubbles.first()) else {
        return Ok(out);
    };
    let q = about_center(profile, b.center)?;
    let n = decomp.n;
    let j_min = (-(2.0 * delta).log2()).ceil() as i32 + 1;
    let j_max = (-(2.0 * inner).log2()).floor() as i32;
    let threshold = eps.powi(2 * (n as i32 - 1));
    for j in j_min..=j_max {
        let (lo, hi) = (2f64.powi(-j), 2f64.powi(1 - j));
        let interior: Vec<f64> = q
            .grid
            .iter()
            .zip(&q.values)
            .filter(|(r, _)| **r > lo && **r < hi)
            .map(|(_, h)| *h)
            .collect();
        if hi > q.radius() || interior.is_empty() {
            out.skipped.push(j);
            continue;
        }
        let mut hs = interior;
        hs.push(interpolant(&q, lo).0);
        hs.push(interpolant(&q, hi).0);
        let energy = (ball_energy(&q, n, hi) - ball_energy(&q, n, lo)) / n as f64;
        let oscillation = latitude_diameter(&hs);
        out.total_oscillation += oscillation;
        out.rows.push(ShellRow {
            j,
            r_lo: lo,
            r_hi: hi,
            energy,
            oscillation,
            small: energy <= threshold,
        });
    }
    Ok(out)
}

impl NeckProfile {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use crate::fields::fmt_f64;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["j", "energy", "oscillation"])?;
        for r in &self.rows {
            w.write_record([r.j.to_string(), fmt_f64(r.energy), fmt_f64(r.oscillation)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A synthetic blowup: canonical bubbles `2 arctan(ρ/λ)` on a log-graded unit
/// ball, one snapshot per `λ`, with the matching event.
pub fn injected_shrinkers(lambdas: &[f64], n: usize, nodes: usize) -> Result<(FlowTrajectory, BlowupEvent)> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0)) || nodes < 8 {
        return Err(Error::Spec("need positive scales and at least 8 nodes".into()));
    }
    let mut grid = vec![0.0];
    grid.extend((0..nodes).map(|i| 10f64.powf(-7.0 + 7.0 * i as f64 / (nodes - 1) as f64)));
    let mut snapshots = Vec::with_capacity(lambdas.len());
    for (i, &l) in lambdas.iter().enumerate() {
        let profile = RadialProfile::sample(DomainKind::FlatBall, grid.clone(), |r| 2.0 * (r / l).atan())?;
        snapshots.push(Snapshot {
            time: i as f64,
            energy: reduced_energy(&profile, n),
            dhdt: vec![0.0; profile.grid.len()],
            profile,
            dissipation: 0.0,
            remesh_jump: 0.0,
            max_grad: 2.0 / l,
            max_grad_at: 0.0,
            dt: 0.0,
            step: i,
        });
    }
    let event = BlowupEvent {
        t_max: lambdas.len() as f64,
        location: 0.0,
        r_i: 0.5 * lambdas[lambdas.len() - 1],
        r_series: lambdas.iter().enumerate().map(|(i, l)| (i as f64, 0.5 * l)).collect(),
        terminal_profile: snapshots[snapshots.len() - 1].profile.clone(),
    };
    let traj = FlowTrajectory {
        n,
        snapshots,
        status: FlowStatus::Blowup,
        steps: lambdas.len(),
        rejected_steps: 0,
        max_step_increase: 0.0,
        remeshes: Vec::new(),
        final_dt: 0.0,
    };
    Ok((traj, event))
}
