//! Corotational reduction of the n-harmonic map flow for maps `S^n → S^n`
//! (or `B^n → S^n`): discrete reduced energy, its exact gradient, time
//! stepping, remeshing and blowup detection.
//!
//! The discrete energy integrates the reduced density with 3-point Gauss
//! quadrature per cell. Inside a cell the profile is interpolated so that
//! `tan((h − c)/2)` is affine in a chart variable `ζ` (`ρ`, `tan(ρ/2)` or
//! `cot(ρ/2)`); conformal maps are exactly of this form, which keeps the
//! residual of the stationary solutions small right up to the poles. Where
//! `|h − c|` approaches `π` the interpolant is blended smoothly into the linear one.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::fields::{
    nodal_derivative, pchip_eval, pchip_slopes, sphere_area, DomainKind, EnergyReport,
    RadialProfile,
};

const GAUSS3_T: [f64; 3] = [
    0.5 - 0.387_298_334_620_741_7,
    0.5,
    0.5 + 0.387_298_334_620_741_7,
];
const GAUSS3_W: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

/// Blend window in `|h − c|/2`.
const BLEND_LO: f64 = 0.35 * PI;
const BLEND_HI: f64 = 0.45 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    /// Forward Euler under the parabolic CFL bound.
    Explicit,
    /// Backward Euler (minimizing movement) solved by Newton's method.
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub n: usize,
    pub kind: DomainKind,
    pub k: usize,
    pub radius: f64,
    pub scheme: TimeScheme,
    pub dt_init: f64,
    pub dt_min: f64,
    pub eps_reg: f64,
    pub cfl_safety: f64,
    pub blowup_grad_threshold: f64,
    pub snapshot_stride: usize,
    pub max_time: f64,
    pub max_steps: usize,
    pub tol_stationary: f64,
    /// Largest accepted sup-norm change of `h` per implicit step.
    pub max_change: f64,
    /// Regrid towards a pole once `r_i / Δρ_pole` drops below this.
    pub remesh_trigger: f64,
    /// Target `r_i / Δρ_pole` after regridding.
    pub remesh_resolution: f64,
    pub remesh: bool,
    /// Largest relative mismatch between the energy drop and the dissipated
    /// amount accepted in one step.
    pub bookkeeping_tol: f64,
    /// Blowup needs the concentration scale to fall below this.
    pub r_min: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n: 3,
            kind: DomainKind::SpherePolar,
            k: 512,
            radius: PI,
            scheme: TimeScheme::Implicit,
            dt_init: 1e-4,
            dt_min: 1e-30,
            eps_reg: 1e-8,
            cfl_safety: 0.2,
            blowup_grad_threshold: 1e4,
            snapshot_stride: 200,
            max_time: 1e6,
            max_steps: 2_000_000,
            tol_stationary: 1e-8,
            max_change: 0.02,
            remesh_trigger: 100.0,
            remesh_resolution: 600.0,
            remesh: true,
            bookkeeping_tol: 5e-3,
            r_min: 1e-3,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Spec(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.k < 4 {
            return bad("grid needs at least 4 cells");
        }
        if !(self.dt_min < self.dt_init) || !(self.dt_min > 0.0) {
            return bad("need 0 < dt_min < dt_init");
        }
        if !(self.eps_reg >= 0.0) {
            return bad("eps_reg must be nonnegative");
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety < 1.0) {
            return bad("cfl_safety must lie in (0, 1)");
        }
        if !(self.blowup_grad_threshold > 0.0
            && self.max_time > 0.0
            && self.tol_stationary > 0.0
            && self.max_change > 0.0
            && self.r_min > 0.0)
        {
            return bad("thresholds must be positive");
        }
        if self.snapshot_stride == 0 {
            return bad("snapshot_stride must be positive");
        }
        if self.kind == DomainKind::SpherePolar && (self.radius - PI).abs() > 1e-12 {
            return bad("sphere_polar domains have radius pi");
        }
        Ok(())
    }

    pub fn grid_profile(&self, f: impl Fn(f64) -> f64) -> Result<RadialProfile> {
        RadialProfile::from_fn(self.kind, self.k, self.radius, f)
    }
}

/// `(π + A)ρ(2 − ρ)` on the unit ball: the boundary value lies beyond the south pole.
pub fn over_the_pole(k: usize, a: f64) -> Result<RadialProfile> {
    let b = PI + a;
    let mut p = RadialProfile::from_fn(DomainKind::FlatBall, k, 1.0, |r| b * r * (2.0 - r))?;
    let last = p.values.len() - 1;
    p.values[last] = b;
    Ok(p)
}

/// `A sin ρ` on the sphere with `h(π) = 0`.
pub fn small_amplitude(k: usize, a: f64) -> Result<RadialProfile> {
    let mut p = RadialProfile::from_fn(DomainKind::SpherePolar, k, PI, |r| a * r.sin())?;
    let last = p.values.len() - 1;
    p.values[last] = 0.0;
    Ok(p)
}

/// Canonical bubble `2 arctan(ρ/λ)`.
pub fn bubble(kind: DomainKind, k: usize, radius: f64, lambda: f64) -> Result<RadialProfile> {
    RadialProfile::from_fn(kind, k, radius, |r| 2.0 * (r / lambda).atan())
}

#[derive(Clone, Copy)]
enum ChartKind {
    Flat,
    Tan,
    Cot,
}

fn chart_for(kind: DomainKind, ra: f64, rb: f64, b: f64) -> (ChartKind, f64) {
    match kind {
        DomainKind::FlatBall => (ChartKind::Flat, 0.0),
        DomainKind::SpherePolar if 0.5 * (ra + rb) < 0.5 * PI => (ChartKind::Tan, 0.0),
        DomainKind::SpherePolar => (ChartKind::Cot, b),
    }
}

#[inline]
fn zeta(chart: ChartKind, r: f64) -> (f64, f64) {
    match chart {
        ChartKind::Flat => (r, 1.0),
        ChartKind::Tan => {
            let c = (0.5 * r).cos();
            ((0.5 * r).tan(), 0.5 / (c * c))
        }
        ChartKind::Cot => {
            let s = (0.5 * r).sin();
            (1.0 / (0.5 * r).tan(), -0.5 / (s * s))
        }
    }
}

/// `1 − smoothstep` on the blend window and its derivative.
#[inline]
fn blend(x: f64) -> (f64, f64) {
    if x <= BLEND_LO {
        (1.0, 0.0)
    } else if x >= BLEND_HI {
        (0.0, 0.0)
    } else {
        let w = BLEND_HI - BLEND_LO;
        let t = (x - BLEND_LO) / w;
        let q = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
        let dq = 30.0 * t * t * (1.0 - t) * (1.0 - t);
        (1.0 - q, -dq / w)
    }
}

/// `f^{k/2}` for integer `k ≥ 0`.
#[inline]
fn pow_half(f: f64, k: usize) -> f64 {
    if k % 2 == 0 {
        f.powi((k / 2) as i32)
    } else {
        f.sqrt() * f.powi((k / 2) as i32)
    }
}

/// Interpolated value and slope at a quadrature point, with partials in the cell end values.
#[derive(Debug, Clone, Copy)]
struct PointEval {
    r: f64,
    weight: f64,
    h: f64,
    hp: f64,
    dh: [f64; 2],
    dhp: [f64; 2],
}

fn cell_points(kind: DomainKind, ra: f64, rb: f64, ha: f64, hb: f64, b: f64) -> [PointEval; 3] {
    let d = rb - ra;
    let (chart, c) = chart_for(kind, ra, rb, b);
    let (aa, ab) = (0.5 * (ha - c), 0.5 * (hb - c));
    let (sa, dsa) = blend(aa.abs());
    let (sb, dsb) = blend(ab.abs());
    let chi = sa * sb;
    let dchi = [0.5 * dsa * aa.signum() * sb, 0.5 * sa * dsb * ab.signum()];
    let conf = if chi > 0.0 {
        let (za, _) = zeta(chart, ra);
        let (zb, _) = zeta(chart, rb);
        Some((aa.tan(), ab.tan(), za, zb))
    } else {
        None
    };
    let hlp = (hb - ha) / d;
    let mut out = [PointEval {
        r: 0.0,
        weight: 0.0,
        h: 0.0,
        hp: 0.0,
        dh: [0.0; 2],
        dhp: [0.0; 2],
    }; 3];
    for q in 0..3 {
        let t = GAUSS3_T[q];
        let r = ra + t * d;
        let hl = ha + t * (hb - ha);
        let p = &mut out[q];
        p.r = r;
        p.weight = GAUSS3_W[q] * d;
        match conf {
            None => {
                p.h = hl;
                p.hp = hlp;
                p.dh = [1.0 - t, t];
                p.dhp = [-1.0 / d, 1.0 / d];
            }
            Some((ta, tb, za, zb)) => {
                let (z, zp) = zeta(chart, r);
                let dz = zb - za;
                let th = (z - za) / dz;
                let thp = zp / dz;
                let tt = (1.0 - th) * ta + th * tb;
                let den = 1.0 + tt * tt;
                let ht = c + 2.0 * tt.atan();
                let htp = 2.0 * (tb - ta) * thp / den;
                let ga = 1.0 + ta * ta;
                let gb = 1.0 + tb * tb;
                let dht = [(1.0 - th) * ga / den, th * gb / den];
                let dhtp = [
                    -thp * ga / den * (1.0 + 2.0 * tt * (tb - ta) * (1.0 - th) / den),
                    thp * gb / den * (1.0 - 2.0 * tt * th * (tb - ta) / den),
                ];
                p.h = chi * ht + (1.0 - chi) * hl;
                p.hp = chi * htp + (1.0 - chi) * hlp;
                let dl = [1.0 - t, t];
                let dlp = [-1.0 / d, 1.0 / d];
                for s in 0..2 {
                    p.dh[s] = chi * dht[s] + (1.0 - chi) * dl[s] + (ht - hl) * dchi[s];
                    p.dhp[s] = chi * dhtp[s] + (1.0 - chi) * dlp[s] + (htp - hlp) * dchi[s];
                }
            }
        }
    }
    out
}

/// Value and slope of the cell interpolant at `r ∈ [ra, rb]`.
fn interp_point(kind: DomainKind, ra: f64, rb: f64, ha: f64, hb: f64, b: f64, r: f64) -> (f64, f64) {
    let d = rb - ra;
    let t = (r - ra) / d;
    let hl = ha + t * (hb - ha);
    let hlp = (hb - ha) / d;
    let (chart, c) = chart_for(kind, ra, rb, b);
    let (aa, ab) = (0.5 * (ha - c), 0.5 * (hb - c));
    let chi = blend(aa.abs()).0 * blend(ab.abs()).0;
    if chi == 0.0 {
        return (hl, hlp);
    }
    let (ta, tb) = (aa.tan(), ab.tan());
    let (za, _) = zeta(chart, ra);
    let (zb, _) = zeta(chart, rb);
    let (z, zp) = zeta(chart, r);
    let th = (z - za) / (zb - za);
    let tt = (1.0 - th) * ta + th * tb;
    let ht = c + 2.0 * tt.atan();
    let htp = 2.0 * (tb - ta) * zp / (zb - za) / (1.0 + tt * tt);
    (chi * ht + (1.0 - chi) * hl, chi * htp + (1.0 - chi) * hlp)
}

/// Value and slope at `r` of the piecewise interpolant the discrete energy is built on.
pub fn interpolant(p: &RadialProfile, r: f64) -> (f64, f64) {
    let r = r.clamp(0.0, p.radius());
    let k = p.grid.partition_point(|&x| x <= r).saturating_sub(1).min(p.cells() - 1);
    interp_point(
        p.kind,
        p.grid[k],
        p.grid[k + 1],
        p.values[k],
        p.values[k + 1],
        p.boundary(),
        r,
    )
}

/// `|S^{n−1}| ∫_0^{r} F(ρ, h, h′) w^{n−1} dρ` with 3-point Gauss per cell on the
/// interpolant; the last cell is cut at `r`. With `F = f^{n/2}/n` and `r = R` this is
/// exactly [`reduced_energy`].
pub fn ball_integral(p: &RadialProfile, n: usize, r: f64, f: impl Fn(f64, f64, f64) -> f64) -> f64 {
    let r = r.clamp(0.0, p.radius());
    let b = p.boundary();
    let mut s = 0.0;
    for k in 0..p.cells() {
        let (ra, rb) = (p.grid[k], p.grid[k + 1]);
        if ra >= r {
            break;
        }
        if rb <= r {
            for q in cell_points(p.kind, ra, rb, p.values[k], p.values[k + 1], b) {
                s += q.weight * f(q.r, q.h, q.hp) * p.kind.w(q.r).powi(n as i32 - 1);
            }
        } else {
            let d = r - ra;
            for (t, w) in GAUSS3_T.iter().zip(&GAUSS3_W) {
                let x = ra + t * d;
                let (h, hp) = interp_point(p.kind, ra, rb, p.values[k], p.values[k + 1], b, x);
                s += w * d * f(x, h, hp) * p.kind.w(x).powi(n as i32 - 1);
            }
        }
    }
    sphere_area(n - 1) * s
}

/// Reduced density `|∇u|² = h′² + (n−1) sin²h / w²` (limit value on the axis).
pub fn grad_sq(kind: DomainKind, n: usize, r: f64, h: f64, hp: f64) -> f64 {
    let w = kind.w(r);
    let t = if w.abs() < 1e-300 { hp * hp } else { h.sin().powi(2) / (w * w) };
    hp * hp + (n - 1) as f64 * t
}

/// Lumped masses `|S^{n−1}| ∫_0^{r} w^{n−1} φ_k` restricted to the ball `B_r`.
pub fn truncated_mass(p: &RadialProfile, n: usize, r: f64) -> Vec<f64> {
    let (xg, wg) = gauss_legendre(8);
    let area = sphere_area(n - 1);
    let mut m = vec![0.0; p.grid.len()];
    for k in 0..p.cells() {
        let (a, b) = (p.grid[k], p.grid[k + 1]);
        if a >= r {
            break;
        }
        let top = b.min(r);
        let half = 0.5 * (top - a);
        for (x, w) in xg.iter().zip(&wg) {
            let rr = a + half * (1.0 + x);
            let t = (rr - a) / (b - a);
            let v = w * half * p.kind.w(rr).powi(n as i32 - 1);
            m[k] += area * v * (1.0 - t);
            m[k + 1] += area * v * t;
        }
    }
    m
}

/// Cell energy `Σ_q w_q f^{n/2} w^{n−1}` and its partials divided by `n/2`.
fn cell_energy_grad(
    kind: DomainKind,
    n: usize,
    eps2: f64,
    ra: f64,
    rb: f64,
    ha: f64,
    hb: f64,
    b: f64,
) -> (f64, [f64; 2]) {
    let nm1 = (n - 1) as f64;
    let mut e = 0.0;
    let mut g = [0.0; 2];
    for p in cell_points(kind, ra, rb, ha, hb, b) {
        let w = kind.w(p.r);
        let wn1 = w.powi(n as i32 - 1);
        let (s, co) = p.h.sin_cos();
        let f = eps2 + p.hp * p.hp + nm1 * s * s / (w * w);
        let fn2 = pow_half(f, n - 2);
        e += p.weight * fn2 * f * wn1;
        let base = p.weight * fn2 * wn1;
        let pot = nm1 * s * co / (w * w);
        for j in 0..2 {
            g[j] += base * (pot * p.dh[j] + p.hp * p.dhp[j]);
        }
    }
    (e, g)
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return domain("n must be at least 2");
    }
    Ok(())
}

/// Discrete reduced energy with regularized density `f_ε = ε² + h′² + (n−1) sin²h/w²`.
pub fn reduced_energy_eps(p: &RadialProfile, n: usize, eps_reg: f64) -> f64 {
    let b = p.boundary();
    let eps2 = eps_reg * eps_reg;
    let mut e = 0.0;
    for k in 0..p.cells() {
        e += cell_energy_grad(
            p.kind,
            n,
            eps2,
            p.grid[k],
            p.grid[k + 1],
            p.values[k],
            p.values[k + 1],
            b,
        )
        .0;
    }
    sphere_area(n - 1) / n as f64 * e
}

/// `(|S^{n−1}|/n) ∫ (h′² + (n−1) sin²h / w²)^{n/2} w^{n−1} dρ`.
pub fn reduced_energy(p: &RadialProfile, n: usize) -> f64 {
    reduced_energy_eps(p, n, 0.0)
}

/// Energy report with the density sampled at the quadrature points.
pub fn reduced_energy_report(p: &RadialProfile, n: usize) -> Result<EnergyReport> {
    check_n(n)?;
    if p.cells() == 0 {
        return domain("empty grid");
    }
    let b = p.boundary();
    let area = sphere_area(n - 1);
    let nm1 = (n - 1) as f64;
    let mut density = Vec::with_capacity(3 * p.cells());
    let mut weights = Vec::with_capacity(3 * p.cells());
    for k in 0..p.cells() {
        for q in cell_points(p.kind, p.grid[k], p.grid[k + 1], p.values[k], p.values[k + 1], b) {
            let w = p.kind.w(q.r);
            let f = q.hp * q.hp + nm1 * q.h.sin().powi(2) / (w * w);
            density.push(pow_half(f, n) / n as f64);
            weights.push(area * q.weight * w.powi(n as i32 - 1));
        }
    }
    Ok(EnergyReport::from_parts(n, density, weights))
}

/// Exact gradient `∂E_ε/∂h_k` of the discrete energy, all nodes.
pub fn energy_gradient(p: &RadialProfile, n: usize, eps_reg: f64) -> Vec<f64> {
    let b = p.boundary();
    let eps2 = eps_reg * eps_reg;
    let area = sphere_area(n - 1);
    let mut g = vec![0.0; p.grid.len()];
    for k in 0..p.cells() {
        let (_, gc) = cell_energy_grad(
            p.kind,
            n,
            eps2,
            p.grid[k],
            p.grid[k + 1],
            p.values[k],
            p.values[k + 1],
            b,
        );
        g[k] += area * gc[0];
        g[k + 1] += area * gc[1];
    }
    g
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut pp;
        loop {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=m {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
            }
            pp = m as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
    }
    (x, w)
}

/// Lumped mass `m_k = |S^{n−1}| ∫ w^{n−1} φ_k` for the hat functions `φ_k`.
pub fn lumped_mass(p: &RadialProfile, n: usize) -> Vec<f64> {
    let (xg, wg) = gauss_legendre(8);
    let area = sphere_area(n - 1);
    let mut m = vec![0.0; p.grid.len()];
    for k in 0..p.cells() {
        let (a, b) = (p.grid[k], p.grid[k + 1]);
        let half = 0.5 * (b - a);
        for (x, w) in xg.iter().zip(&wg) {
            let r = a + half * (1.0 + x);
            let t = 0.5 * (1.0 + x);
            let v = w * half * p.kind.w(r).powi(n as i32 - 1);
            m[k] += area * v * (1.0 - t);
            m[k + 1] += area * v * t;
        }
    }
    m
}

/// Reduced tension: the negative weighted-L² gradient `−M^{-1} ∇E_ε`,
/// zero at the fixed boundary nodes.
pub fn reduced_tension(p: &RadialProfile, n: usize, eps_reg: f64) -> Vec<f64> {
    let g = energy_gradient(p, n, eps_reg);
    let m = lumped_mass(p, n);
    let last = g.len() - 1;
    g.iter()
        .zip(&m)
        .enumerate()
        .map(|(k, (gk, mk))| if k == 0 || k == last { 0.0 } else { -gk / mk })
        .collect()
}

pub(crate) fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Largest explicit step allowed by the parabolic CFL condition
/// `dt ≤ cfl · Δρ² / ((n−1) f_ε^{(n−2)/2})`, taken cell by cell.
pub fn stable_dt(p: &RadialProfile, n: usize, eps_reg: f64, cfl: f64) -> f64 {
    let b = p.boundary();
    let eps2 = eps_reg * eps_reg;
    let nm1 = (n - 1) as f64;
    let mut best = f64::INFINITY;
    for k in 0..p.cells() {
        let d = p.grid[k + 1] - p.grid[k];
        let mut fmax = 0.0f64;
        for q in cell_points(p.kind, p.grid[k], p.grid[k + 1], p.values[k], p.values[k + 1], b) {
            let w = p.kind.w(q.r);
            let f = eps2 + q.hp * q.hp + nm1 * q.h.sin().powi(2) / (w * w);
            fmax = fmax.max(f);
        }
        let coeff = nm1.max(1.0) * pow_half(fmax, n - 2);
        if coeff > 0.0 {
            best = best.min(cfl * d * d / coeff);
        }
    }
    best
}

/// Result of a single accepted step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub profile: RadialProfile,
    /// `(h_new − h_old)/dt` per node.
    pub dhdt: Vec<f64>,
    /// Newton iterations used (0 for explicit steps).
    pub iterations: usize,
}

/// Forward Euler step on the reduced tension. Boundary values are copied bit for bit.
pub fn step(p: &RadialProfile, dt: f64, config: &FlowConfig) -> Result<StepOutcome> {
    let required = stable_dt(p, config.n, config.eps_reg, config.cfl_safety);
    if dt > required {
        return Err(Error::Cfl { dt, required_dt: required });
    }
    let tau = reduced_tension(p, config.n, config.eps_reg);
    let mut next = p.clone();
    let last = next.values.len() - 1;
    for k in 1..last {
        next.values[k] = p.values[k] + dt * tau[k];
    }
    let dhdt = next
        .values
        .iter()
        .zip(&p.values)
        .map(|(a, b)| (a - b) / dt)
        .collect();
    Ok(StepOutcome {
        profile: next,
        dhdt,
        iterations: 0,
    })
}

/// Tridiagonal Hessian of the discrete energy (interior block), by central
/// differences of the exact cell gradients.
fn energy_hessian(p: &RadialProfile, n: usize, eps_reg: f64) -> (Vec<f64>, Vec<f64>) {
    let b = p.boundary();
    let eps2 = eps_reg * eps_reg;
    let area = sphere_area(n - 1);
    let len = p.grid.len();
    let mut diag = vec![0.0; len];
    let mut off = vec![0.0; len - 1];
    for k in 0..p.cells() {
        let (ra, rb) = (p.grid[k], p.grid[k + 1]);
        let (ha, hb) = (p.values[k], p.values[k + 1]);
        let g = |x: f64, y: f64| cell_energy_grad(p.kind, n, eps2, ra, rb, x, y, b).1;
        let da = 1e-6 * (1.0 + ha.abs());
        let db = 1e-6 * (1.0 + hb.abs());
        let (gp, gm) = (g(ha + da, hb), g(ha - da, hb));
        let haa = (gp[0] - gm[0]) / (2.0 * da);
        let hba = (gp[1] - gm[1]) / (2.0 * da);
        let (gp, gm) = (g(ha, hb + db), g(ha, hb - db));
        let hab = (gp[0] - gm[0]) / (2.0 * db);
        let hbb = (gp[1] - gm[1]) / (2.0 * db);
        diag[k] += area * haa;
        diag[k + 1] += area * hbb;
        off[k] += area * 0.5 * (hab + hba);
    }
    (diag, off)
}

/// Solve a symmetric tridiagonal system; `None` on a nonpositive pivot.
fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if !(piv > 0.0) {
        return None;
    }
    c[0] = if n > 1 { off[0] / piv } else { 0.0 };
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - off[i - 1] * c[i - 1];
        if !(piv > 0.0) {
            return None;
        }
        if i + 1 < n {
            c[i] = off[i] / piv;
        }
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Some(d)
}

/// Backward Euler step: minimizes `E_ε(h) + Σ m_k (h_k − h_k^old)²/(2 dt)` by
/// damped Newton iteration. Returns `None` if Newton fails to converge.
pub fn implicit_step(p: &RadialProfile, dt: f64, config: &FlowConfig) -> Option<StepOutcome> {
    implicit_step_with_mass(p, dt, config, &lumped_mass(p, config.n))
}

fn implicit_step_with_mass(
    p: &RadialProfile,
    dt: f64,
    config: &FlowConfig,
    m: &[f64],
) -> Option<StepOutcome> {
    let n = config.n;
    let last = p.values.len() - 1;
    let phi = |q: &RadialProfile| -> f64 {
        let mut s = reduced_energy_eps(q, n, config.eps_reg);
        for k in 1..last {
            s += m[k] * (q.values[k] - p.values[k]).powi(2) / (2.0 * dt);
        }
        s
    };
    let scale = 1.0 + sup(&p.values);
    let finish = |cur: RadialProfile, it: usize| {
        let dhdt = cur
            .values
            .iter()
            .zip(&p.values)
            .map(|(a, b)| (a - b) / dt)
            .collect();
        Some(StepOutcome {
            profile: cur,
            dhdt,
            iterations: it,
        })
    };
    let mut cur = p.clone();
    let mut phi_cur = phi(&cur);
    let mut best_res = f64::INFINITY;
    let mut stagnant = 0;
    for it in 1..=40 {
        let g = energy_gradient(&cur, n, config.eps_reg);
        let res: Vec<f64> = (1..last)
            .map(|k| g[k] + m[k] * (cur.values[k] - p.values[k]) / dt)
            .collect();
        let (mut diag, off) = energy_hessian(&cur, n, config.eps_reg);
        for k in 1..last {
            diag[k] += m[k] / dt;
        }
        let rhs: Vec<f64> = res.iter().map(|r| -r).collect();
        // Indefinite Hessian: shift by a multiple of the mass until it factors.
        let mut shift = 0.0;
        let delta = loop {
            let shifted: Vec<f64> = (1..last).map(|k| diag[k] + shift * m[k]).collect();
            if let Some(d) = solve_tridiagonal(&shifted, &off[1..last - 1], &rhs) {
                break d;
            }
            shift = if shift == 0.0 { 1.0 / dt } else { 4.0 * shift };
            if !shift.is_finite() {
                return None;
            }
        };
        let step_size = sup(&delta);
        if step_size < 1e-13 * scale {
            return finish(cur, it - 1);
        }
        // Residual stuck at its roundoff floor while the steps are tiny.
        let r_now = sup(&res);
        if r_now < 0.5 * best_res {
            best_res = r_now;
            stagnant = 0;
        } else {
            stagnant += 1;
        }
        if stagnant >= 3 && step_size < 1e-7 * scale {
            return finish(cur, it - 1);
        }
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = cur.clone();
            for k in 1..last {
                trial.values[k] = cur.values[k] + alpha * delta[k - 1];
            }
            let v = phi(&trial);
            if v.is_finite() && v <= phi_cur + 1e-14 * phi_cur.abs() {
                cur = trial;
                phi_cur = v;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // At the roundoff floor of Φ the line search cannot make progress.
            if step_size < 1e-9 * scale {
                return finish(cur, it);
            }
            log::trace!("newton: line search failed at iteration {it}, step {step_size:e}");
            return None;
        }
        if alpha == 1.0 && step_size < 1e-11 * scale {
            return finish(cur, it);
        }
    }
    log::trace!("newton: no convergence in 40 iterations");
    None
}

/// Nodal `max |h′|` and its location.
pub fn max_gradient(p: &RadialProfile) -> (f64, f64) {
    let d = nodal_derivative(&p.grid, &p.values);
    let (mut best, mut at) = (0.0f64, 0.0);
    for (k, v) in d.iter().enumerate() {
        if v.abs() > best {
            best = v.abs();
            at = p.grid[k];
        }
    }
    (best, at)
}

/// Grid with `k` cells on `[0, radius]`, graded like `sinh` towards one end so
/// that the cell at that end has width `delta` (uniform if `delta ≥ radius/k`).
pub fn graded_grid(k: usize, radius: f64, delta: f64, toward_zero: bool) -> Vec<f64> {
    let uniform = radius / k as f64;
    let first = |beta: f64| radius * (beta / k as f64).sinh() / beta.sinh();
    let xi: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
    let mut g: Vec<f64> = if delta >= uniform {
        xi.iter().map(|x| radius * x).collect()
    } else {
        let (mut lo, mut hi) = (1e-9, 1.0);
        while first(hi) > delta {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if first(mid) > delta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let beta = 0.5 * (lo + hi);
        xi.iter().map(|x| radius * (beta * x).sinh() / beta.sinh()).collect()
    };
    if !toward_zero {
        g = g.iter().rev().map(|x| radius - x).collect();
    }
    g[0] = 0.0;
    g[k] = radius;
    g
}

/// Resample a profile onto a new grid by monotone cubic interpolation,
/// keeping the boundary values exact.
pub fn resample(p: &RadialProfile, grid: Vec<f64>) -> Result<RadialProfile> {
    let d = pchip_slopes(&p.grid, &p.values);
    let mut values: Vec<f64> = grid.iter().map(|&r| pchip_eval(&p.grid, &p.values, &d, r)).collect();
    let last = values.len() - 1;
    values[0] = p.values[0];
    values[last] = p.boundary();
    RadialProfile::new(p.kind, grid, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowStatus {
    Running,
    Converged,
    Blowup,
    MaxTime,
    /// The step size collapsed or the gradient threshold was hit without a
    /// monotone concentration scale.
    Stalled,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub profile: RadialProfile,
    /// `∂_t h` of the step that produced this snapshot.
    pub dhdt: Vec<f64>,
    pub energy: f64,
    /// Cumulative `∫∫|∂_t u|²` up to this snapshot.
    pub dissipation: f64,
    /// Cumulative energy change caused by regridding up to this snapshot.
    pub remesh_jump: f64,
    pub max_grad: f64,
    pub max_grad_at: f64,
    pub dt: f64,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemeshRecord {
    pub time: f64,
    pub step: usize,
    pub delta_pole: f64,
    pub energy_before: f64,
    pub energy_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrajectory {
    pub n: usize,
    pub snapshots: Vec<Snapshot>,
    pub status: FlowStatus,
    pub steps: usize,
    pub rejected_steps: usize,
    /// Largest energy increase over a single accepted step.
    pub max_step_increase: f64,
    pub remeshes: Vec<RemeshRecord>,
    pub final_dt: f64,
}

impl FlowTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.energy).collect()
    }

    pub fn dissipations(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.dissipation).collect()
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("trajectory has at least one snapshot")
    }

    /// Snapshot stream as CSV rows `(t, rho, h)`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use crate::fields::fmt_f64;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "rho", "h"])?;
        for s in &self.snapshots {
            for (r, h) in s.profile.grid.iter().zip(&s.profile.values) {
                w.write_record([fmt_f64(s.time), fmt_f64(*r), fmt_f64(*h)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupEvent {
    pub t_max: f64,
    /// Location `ρ*` of the concentration point.
    pub location: f64,
    /// Concentration scale `r_i = 1/max|h′|` at the last snapshot.
    pub r_i: f64,
    /// `(time, r_i)` over the snapshots used for detection.
    pub r_series: Vec<(f64, f64)>,
    pub terminal_profile: RadialProfile,
}

/// Run the flow from `initial` until convergence, blowup, or a time/step limit.
pub fn run(initial: &RadialProfile, config: &FlowConfig) -> Result<(FlowTrajectory, Option<BlowupEvent>)> {
    config.validate()?;
    if initial.kind != config.kind {
        return Err(Error::Spec("profile domain does not match the configuration".into()));
    }
    let n = config.n;
    let tol_stationary = config.tol_stationary;
    let mut h = initial.clone();
    let mut energy = reduced_energy(&h, n);
    let e0 = energy;
    let tol_step = 1e-8 * (1.0 + e0);
    let mut time = 0.0;
    let mut dissipation = 0.0;
    let mut remesh_jump = 0.0;
    let mut dt = config.dt_init;
    let mut accepted_since_growth = 0usize;
    let mut steps = 0usize;
    let mut rejected = 0usize;
    let mut max_inc = f64::NEG_INFINITY;
    let mut remeshes = Vec::new();
    let (g0, g0_at) = max_gradient(&h);
    let mut snapshots = vec![Snapshot {
        time,
        profile: h.clone(),
        dhdt: reduced_tension(&h, n, config.eps_reg),
        energy,
        dissipation,
        remesh_jump,
        max_grad: g0,
        max_grad_at: g0_at,
        dt,
        step: 0,
    }];
    let mut last_snap_grad = g0;
    let mut last_dhdt = vec![0.0; h.values.len()];
    let status;
    let mut mass = lumped_mass(&h, n);

    let mut tau_sup = sup(&snapshots[0].dhdt);
    loop {
        if config.scheme == TimeScheme::Explicit {
            tau_sup = sup(&reduced_tension(&h, n, config.eps_reg));
        }
        if tau_sup < tol_stationary {
            status = FlowStatus::Converged;
            break;
        }
        if !h.values.iter().all(|v| v.is_finite()) {
            status = FlowStatus::Aborted;
            break;
        }
        if time >= config.max_time || steps >= config.max_steps {
            status = FlowStatus::MaxTime;
            break;
        }
        let (grad, grad_at) = max_gradient(&h);
        if grad > config.blowup_grad_threshold || dt < config.dt_min {
            status = FlowStatus::Stalled;
            break;
        }
        if config.remesh {
            let r = 1.0 / grad;
            let toward_zero = grad_at < 0.5 * h.radius();
            let pole_cell = if toward_zero {
                h.grid[1] - h.grid[0]
            } else {
                h.grid[h.grid.len() - 1] - h.grid[h.grid.len() - 2]
            };
            let near_pole = if toward_zero { grad_at } else { h.radius() - grad_at };
            if near_pole < 0.25 * h.radius() && r / pole_cell < config.remesh_trigger {
                let delta = r / config.remesh_resolution;
                let grid = graded_grid(h.cells(), h.radius(), delta, toward_zero);
                let next = resample(&h, grid)?;
                let e_after = reduced_energy(&next, n);
                remeshes.push(RemeshRecord {
                    time,
                    step: steps,
                    delta_pole: delta,
                    energy_before: energy,
                    energy_after: e_after,
                });
                remesh_jump += e_after - energy;
                log::debug!("remesh at t={time:e} step {steps}: pole cell {delta:e}, r {r:e}");
                h = next;
                energy = e_after;
                mass = lumped_mass(&h, n);
                tau_sup = sup(&reduced_tension(&h, n, config.eps_reg));
                continue;
            }
        }
        let outcome = match config.scheme {
            TimeScheme::Explicit => match step(&h, dt, config) {
                Ok(o) => Some(o),
                Err(Error::Cfl { .. }) => None,
                Err(e) => return Err(e),
            },
            TimeScheme::Implicit => implicit_step_with_mass(&h, dt, config, &mass)
                .filter(|o| {
                    let ok = sup(&o.dhdt) * dt <= config.max_change;
                    if !ok {
                        log::trace!("change {:e} too large", sup(&o.dhdt) * dt);
                    }
                    ok
                }),
        };
        let Some(o) = outcome else {
            log::trace!("step rejected at dt={dt:e}");
            dt *= 0.5;
            rejected += 1;
            accepted_since_growth = 0;
            continue;
        };
        let e_new = reduced_energy(&o.profile, n);
        if !(e_new <= energy + tol_step) {
            log::trace!("energy increase {:e} at dt={dt:e}", e_new - energy);
            dt *= 0.5;
            rejected += 1;
            accepted_since_growth = 0;
            continue;
        }
        let step_diss: f64 = o
            .dhdt
            .iter()
            .zip(&mass)
            .map(|(v, m)| m * v * v)
            .sum::<f64>()
            * dt;
        let drop = energy - e_new;
        if (drop - step_diss).abs() > config.bookkeeping_tol * drop.abs() + tol_step {
            log::trace!("bookkeeping mismatch {:e} at dt={dt:e}", drop - step_diss);
            dt *= 0.5;
            rejected += 1;
            accepted_since_growth = 0;
            continue;
        }
        max_inc = max_inc.max(e_new - energy);
        dissipation += step_diss;
        if time + dt == time {
            status = FlowStatus::Stalled;
            break;
        }
        time += dt;
        steps += 1;
        let change = sup(&o.dhdt) * dt;
        h = o.profile;
        energy = e_new;
        // The backward Euler update is the tension at the new state.
        tau_sup = sup(&o.dhdt);
        last_dhdt = o.dhdt;
        accepted_since_growth += 1;
        match config.scheme {
            TimeScheme::Explicit => {
                if accepted_since_growth >= 50 {
                    dt *= 1.1;
                    accepted_since_growth = 0;
                }
            }
            TimeScheme::Implicit => {
                if change < 0.25 * config.max_change || accepted_since_growth >= 50 {
                    dt *= 1.1;
                    accepted_since_growth = 0;
                }
            }
        }
        let (g_now, g_at) = max_gradient(&h);
        if steps % 100 == 0 {
            log::debug!("step {steps} t={time:e} dt={dt:e} E={energy:.6} max|h'|={g_now:e}");
        }
        if steps % config.snapshot_stride == 0 || g_now > 1.25 * last_snap_grad {
            last_snap_grad = g_now;
            snapshots.push(Snapshot {
                time,
                profile: h.clone(),
                dhdt: last_dhdt.clone(),
                energy,
                dissipation,
                remesh_jump,
                max_grad: g_now,
                max_grad_at: g_at,
                dt,
                step: steps,
            });
        }
    }
    if snapshots.last().map(|s| s.step) != Some(steps) || steps == 0 {
        let (g_now, g_at) = max_gradient(&h);
        if steps > 0 {
            snapshots.push(Snapshot {
                time,
                profile: h.clone(),
                dhdt: last_dhdt,
                energy,
                dissipation,
                remesh_jump,
                max_grad: g_now,
                max_grad_at: g_at,
                dt,
                step: steps,
            });
        }
    }
    let mut traj = FlowTrajectory {
        n,
        snapshots,
        status,
        steps,
        rejected_steps: rejected,
        max_step_increase: if max_inc.is_finite() { max_inc } else { 0.0 },
        remeshes,
        final_dt: dt,
    };
    let event = if status == FlowStatus::Stalled {
        let ev = detect_blowup(&traj, config.r_min);
        if ev.is_some() {
            traj.status = FlowStatus::Blowup;
        }
        ev
    } else {
        None
    };
    Ok((traj, event))
}

/// Estimate the vanishing time of `r(t) ≈ C (T − t)^a` from three samples.
pub fn extrapolate_blowup_time(samples: &[(f64, f64)]) -> f64 {
    let k = samples.len();
    if k < 3 {
        return samples.last().map(|s| s.0).unwrap_or(0.0);
    }
    let (t1, r1) = samples[k - 3];
    let (t2, r2) = samples[k - 2];
    let (t3, r3) = samples[k - 1];
    if !(t1 < t2 && t2 < t3 && r1 > r2 && r2 > r3) {
        return t3;
    }
    // Equal exponents on both intervals: root of the mismatch in T.
    let mismatch = |tm: f64| {
        (r1 / r2).ln() / ((tm - t1) / (tm - t2)).ln() - (r2 / r3).ln() / ((tm - t2) / (tm - t3)).ln()
    };
    let span = t3 - t1;
    let mut lo = t3 + 1e-12 * span.max(f64::MIN_POSITIVE);
    let mut hi = t3 + 1e6 * span;
    let (flo, fhi) = (mismatch(lo), mismatch(hi));
    if !(flo.is_finite() && fhi.is_finite()) || flo * fhi > 0.0 {
        return t3;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = mismatch(mid);
        if fm * flo > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Blowup event if `r_i = 1/max|h′|` decreased strictly over the last five
/// snapshots and ended below `r_min`.
pub fn detect_blowup(traj: &FlowTrajectory, r_min: f64) -> Option<BlowupEvent> {
    let s = &traj.snapshots;
    if s.len() < 5 {
        return None;
    }
    let tail = &s[s.len() - 5..];
    let series: Vec<(f64, f64)> = tail
        .iter()
        .map(|snap| (snap.time, 1.0 / max_gradient(&snap.profile).0))
        .collect();
    let monotone = series.windows(2).all(|w| w[1].1 < w[0].1 && w[1].0 > w[0].0);
    let last = &tail[4];
    let r_last = series[4].1;
    if !monotone || !(r_last < r_min) {
        return None;
    }
    Some(BlowupEvent {
        t_max: extrapolate_blowup_time(&series),
        location: max_gradient(&last.profile).1,
        r_i: r_last,
        r_series: series,
        terminal_profile: last.profile.clone(),
    })
}
