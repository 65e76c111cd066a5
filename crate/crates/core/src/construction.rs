//! Glued initial map into a torus cover and its width.
//!
//! The domain is `S^n` on the hyperspherical chart oriented so that the south
//! pole `S_p` sits at `φ_1 = 0`; the domain point of chart coordinates `c` is
//! `sphere_embed(c)` with its last coordinate negated. In this orientation
//! `|Φ(x)| = tan(φ_1/2)` and `B_r(S_p) = {|Φ(x)| < r}`.
//!
//! The target cover is `R^m` with the unit lattice. Copies `X_l` are modelled
//! by marked balls `U_l` of radius `r_U` around `p_l = p_0 + l e_1`, and the
//! map `h` by a bump into the ball that is constant on the southern hemisphere.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::energy_analysis::TensionField;
use crate::error::{domain, Error, Result};
use crate::fields::{sphere_area, sphere_embed, uniform_grid, Chart, GridMap, Target};
use crate::manifold::{cover_distance, wrap_step, TorusTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pole {
    /// `Φ`, projecting from the north pole.
    North,
    /// `Ψ`, projecting from the south pole.
    South,
}

pub fn stereographic(x: &[f64], pole: Pole) -> Result<Vec<f64>> {
    let Some((&last, head)) = x.split_last() else {
        return domain("empty point");
    };
    if head.is_empty() || (x.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() > 1e-9 {
        return domain("stereographic projection needs a point of S^n, n >= 1");
    }
    let denom = match pole {
        Pole::North => 1.0 - last,
        Pole::South => 1.0 + last,
    };
    if denom.abs() < 1e-14 {
        return domain("point is the projecting pole");
    }
    Ok(head.iter().map(|v| v / denom).collect())
}

pub fn stereographic_inverse(y: &[f64], pole: Pole) -> Vec<f64> {
    let r2: f64 = y.iter().map(|v| v * v).sum();
    let mut x: Vec<f64> = y.iter().map(|v| 2.0 * v / (1.0 + r2)).collect();
    x.push(match pole {
        Pole::North => (r2 - 1.0) / (r2 + 1.0),
        Pole::South => (1.0 - r2) / (1.0 + r2),
    });
    x
}

const CUT_LO: f64 = 0.125;
const CUT_HI: f64 = 0.875;

/// Cubic smoothstep from 0 on `[0, 1/8]` to 1 on `[7/8, 1]`; `max φ′ = 2`.
/// Returns the value and whether `x` had to be clamped into `[0, 1]`.
pub fn cutoff_phi(x: f64) -> (f64, bool) {
    let clamped = !(0.0..=1.0).contains(&x);
    let t = ((x - CUT_LO) / (CUT_HI - CUT_LO)).clamp(0.0, 1.0);
    (t * t * (3.0 - 2.0 * t), clamped)
}

pub fn cutoff_phi_prime(x: f64) -> f64 {
    let t = (x - CUT_LO) / (CUT_HI - CUT_LO);
    if !(0.0..=1.0).contains(&t) {
        return 0.0;
    }
    6.0 * t * (1.0 - t) / (CUT_HI - CUT_LO)
}

/// `∫_0^1 φ′(s)^n ds` in closed form.
pub fn cutoff_power_integral(n: usize) -> f64 {
    let a = CUT_HI - CUT_LO;
    let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
    a.powi(1 - n as i32) * 6f64.powi(n as i32) * fact(n).powi(2) / fact(2 * n + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverModel {
    pub m: usize,
    pub p0: Vec<f64>,
    pub r_u: f64,
}

impl Default for CoverModel {
    fn default() -> Self {
        Self {
            m: 3,
            p0: vec![0.5; 3],
            r_u: 0.1,
        }
    }
}

impl CoverModel {
    pub fn validate(&self) -> Result<()> {
        if self.m < 3 || self.p0.len() != self.m {
            return Err(Error::Spec("cover needs m >= 3 and a base center in R^m".into()));
        }
        if !(self.r_u > 0.0 && self.r_u < 0.5) {
            return Err(Error::Spec("r_U must lie in (0, 1/2) for disjoint marked balls".into()));
        }
        Ok(())
    }

    /// Marked center `p_l`; also the base point `q_l`.
    pub fn center(&self, l: i64) -> Vec<f64> {
        let mut p = self.p0.clone();
        p[0] += l as f64;
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialMapSpec {
    /// Domain dimension, 2 or 3.
    pub n: usize,
    pub sigma: f64,
    pub l: i64,
    /// Bump size as a fraction of `r_U`; 0 gives constant bumps.
    pub amplitude: f64,
    /// Polar nodes per region.
    pub resolution: usize,
    /// Nodes on `[0, π]` for the remaining angles.
    pub mid: usize,
}

impl Default for InitialMapSpec {
    fn default() -> Self {
        Self {
            n: 2,
            sigma: 1e-2,
            l: 2,
            amplitude: 1.0,
            resolution: 32,
            mid: 9,
        }
    }
}

impl InitialMapSpec {
    pub fn validate(&self, cover: &CoverModel) -> Result<()> {
        cover.validate()?;
        if !(2..=3).contains(&self.n) || cover.m <= self.n {
            return Err(Error::Spec("need n in {2, 3} and m > n".into()));
        }
        if !(self.sigma > 0.0 && self.sigma < 0.25) {
            return Err(Error::Spec("sigma must lie in (0, 1/4)".into()));
        }
        if self.resolution < 16 || self.mid < 3 {
            return Err(Error::Spec("resolution must be at least 16 and mid at least 3".into()));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::Spec("amplitude must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Length `L` of the segment `γ` from `q_0` to `q_l`.
    pub fn segment_length(&self) -> f64 {
        self.l.unsigned_abs() as f64
    }
}

/// Bump model `h`: `p + r_U·a·φ(x_{n+1})·x` for `x ∈ S^n ⊂ R^{n+1} ⊂ R^m`,
/// constant `p` on the southern hemisphere.
pub fn bump(x: &[f64], p: &[f64], r_u: f64, amplitude: f64) -> Vec<f64> {
    let top = *x.last().expect("nonempty point");
    let c = r_u * amplitude * cutoff_phi(top.max(0.0)).0;
    let mut v = p.to_vec();
    for (vi, xi) in v.iter_mut().zip(x) {
        *vi += c * xi;
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Inner,
    Annulus,
    Outer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuiltMap {
    pub map: GridMap,
    pub spec: InitialMapSpec,
    pub cover: CoverModel,
    /// Region of each polar node.
    pub polar_regions: Vec<Region>,
}

/// Polar nodes: uniform in the image angle on `B_{σ²}`, log-uniform in `|Φ|`
/// on the annulus (`resolution` per decade), uniform in `φ_1` outside `B_σ`.
fn polar_nodes(spec: &InitialMapSpec) -> (Vec<f64>, Vec<Region>) {
    let s = spec.sigma;
    let k = spec.resolution;
    let theta_b = 2.0 * 2f64.atan();
    let mut nodes = Vec::new();
    let mut regions = Vec::new();
    for i in 0..k {
        let th = theta_b * i as f64 / (k - 1) as f64;
        nodes.push(2.0 * (0.5 * s * s * (0.5 * th).tan()).atan());
        regions.push(Region::Inner);
    }
    let decades = (-s.log10()).ceil() as usize;
    let ka = (k * decades + 1).max(16 * spec.l.unsigned_abs() as usize + 1);
    for i in 1..ka {
        let t = i as f64 / (ka - 1) as f64;
        nodes.push(2.0 * s.powf(2.0 - t).atan());
        regions.push(if i + 1 == ka { Region::Outer } else { Region::Annulus });
    }
    let phi_s = 2.0 * s.atan();
    let ko = ((k as f64) * PI / theta_b).ceil() as usize;
    for i in 1..ko {
        nodes.push(phi_s + (PI - phi_s) * i as f64 / (ko - 1) as f64);
        regions.push(Region::Outer);
    }
    let last = nodes.len() - 1;
    nodes[last] = PI;
    (nodes, regions)
}

/// Domain point of chart coordinates with `S_p` at `φ_1 = 0`.
pub fn domain_point(c: &[f64]) -> Vec<f64> {
    let mut x = sphere_embed(c);
    let last = x.len() - 1;
    x[last] = -x[last];
    x
}

/// Cover value of `ũ_0` at chart coordinates `c`.
pub fn initial_value(spec: &InitialMapSpec, cover: &CoverModel, c: &[f64]) -> Vec<f64> {
    let s = spec.sigma;
    let t = (0.5 * c[0]).tan();
    let q0 = cover.center(0);
    let ql = cover.center(spec.l);
    if t >= s {
        bump(&domain_point(c), &q0, cover.r_u, spec.amplitude)
    } else if t > s * s {
        let arg = (s.ln() - t.ln()) / (-s.ln());
        let f = cutoff_phi(arg).0;
        q0.iter().zip(&ql).map(|(a, b)| a + f * (b - a)).collect()
    } else {
        // Φ⁻¹(σ²Ψ(x)/2) with v = 1/|σ²Ψ(x)/2|.
        let v = 2.0 * t / (s * s);
        let theta = sphere_embed(&c[1..]);
        let mut y: Vec<f64> = theta.iter().map(|th| 2.0 * v * th / (1.0 + v * v)).collect();
        y.push((1.0 - v * v) / (1.0 + v * v));
        bump(&y, &ql, cover.r_u, spec.amplitude)
    }
}

pub fn build_initial_map(spec: &InitialMapSpec, cover: &CoverModel) -> Result<BuiltMap> {
    spec.validate(cover)?;
    let (polar, polar_regions) = polar_nodes(spec);
    let axes = GridMap::sphere_axes(spec.n, polar, spec.mid);
    let target = Target::Torus(TorusTarget::new(cover.m)?);
    let mut map = GridMap::from_fn(Chart::Sphere, axes, target, |c| initial_value(spec, cover, c))?;
    // Breadth-first lift from the north pole, shifted by a lattice vector onto
    // the constructed cover values.
    let root = map.len() - 1;
    map.lift_bfs(root)?;
    let want = initial_value(spec, cover, &map.coords(root));
    let shift: Vec<f64> = {
        let l = map.lift.as_ref().unwrap();
        want.iter().zip(&l[root]).map(|(a, b)| (a - b).round()).collect()
    };
    for v in map.lift.as_mut().unwrap().iter_mut() {
        for (x, d) in v.iter_mut().zip(&shift) {
            *x += d;
        }
    }
    Ok(BuiltMap {
        map,
        spec: *spec,
        cover: cover.clone(),
        polar_regions,
    })
}

impl BuiltMap {
    pub fn region_of(&self, i: usize) -> Region {
        self.polar_regions[self.map.multi_index(i)[0]]
    }

    pub fn nodes_in(&self, r: Region) -> Vec<usize> {
        (0..self.map.len()).filter(|&i| self.region_of(i) == r).collect()
    }

    /// `E_n` restricted to a region by nodal quadrature.
    pub fn region_energy(&self, r: Region) -> f64 {
        let rep = self.map.n_energy();
        self.nodes_in(r).iter().map(|&i| rep.density[i] * rep.weights[i]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnulusEstimate {
    pub computed: f64,
    /// `L^n / (−log σ)^{n−1}`.
    pub formula: f64,
    pub ratio: f64,
    /// `|S^{n−1}| L^n (−log σ)^{1−n} ∫φ′^n / n`, exact by conformal invariance.
    pub exact: f64,
}

pub fn annulus_energy_estimate(built: &BuiltMap) -> AnnulusEstimate {
    let n = built.spec.n;
    let ls = built.spec.segment_length();
    let mlog = -built.spec.sigma.ln();
    let formula = ls.powi(n as i32) / mlog.powi(n as i32 - 1);
    let computed = built.region_energy(Region::Annulus);
    AnnulusEstimate {
        computed,
        formula,
        ratio: if formula > 0.0 { computed / formula } else { 0.0 },
        exact: sphere_area(n - 1) * formula * cutoff_power_integral(n) / n as f64,
    }
}

/// `E_n(h)` of the bump model on a uniform sphere grid.
pub fn bump_energy(spec: &InitialMapSpec, cover: &CoverModel, polar_nodes: usize) -> Result<f64> {
    let axes = GridMap::sphere_axes(spec.n, uniform_grid(polar_nodes - 1, PI), spec.mid);
    let target = Target::Torus(TorusTarget::new(cover.m)?);
    let map = GridMap::from_fn(Chart::Sphere, axes, target, |c| {
        bump(&sphere_embed(c), &cover.p0, cover.r_u, spec.amplitude)
    })?;
    Ok(map.n_energy().total_energy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalEnergyReport {
    pub total: f64,
    pub outer: f64,
    pub annulus: f64,
    pub inner: f64,
    /// `E_n(h)` from an independent uniform grid.
    pub bump_energy: f64,
    /// `E_n(h_0) + E_n(h_l) + 1 − E_n(u_0)`.
    pub slack: f64,
    pub holds: bool,
    /// `|E(inner) − E_n(h)| / E_n(h)`.
    pub conformal_defect: f64,
}

pub fn total_energy_check(built: &BuiltMap) -> Result<TotalEnergyReport> {
    let rep = built.map.n_energy();
    let mut parts = [0.0; 3];
    for i in 0..built.map.len() {
        let k = match built.region_of(i) {
            Region::Inner => 0,
            Region::Annulus => 1,
            Region::Outer => 2,
        };
        parts[k] += rep.density[i] * rep.weights[i];
    }
    let k = built.spec.resolution * 2;
    let eh = bump_energy(&built.spec, &built.cover, k)?;
    let slack = 2.0 * eh + 1.0 - rep.total_energy;
    Ok(TotalEnergyReport {
        total: rep.total_energy,
        inner: parts[0],
        annulus: parts[1],
        outer: parts[2],
        bump_energy: eh,
        slack,
        holds: slack > 0.0,
        conformal_defect: if eh > 0.0 { (parts[0] - eh).abs() / eh } else { parts[0] },
    })
}

/// `sup_{x,y ∈ region} d(ũ(x), ũ(y))` in the cover. Lifts a copy of the map
/// from node 0 if no lift is stored.
pub fn width(map: &GridMap, region: &[usize]) -> Result<f64> {
    let Target::Torus(_) = map.target else {
        return domain("width is defined for torus maps");
    };
    if map.lift.is_some() {
        return Ok(map.oscillation(region));
    }
    let mut m = map.clone();
    m.lift_bfs(0)?;
    Ok(m.oscillation(region))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftStats {
    pub nodes: usize,
    /// Largest coordinate step across any grid edge.
    pub max_edge_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthReport {
    pub width: f64,
    /// `L − 2 r_U`.
    pub lower_bound: f64,
    /// `L + 2 r_U`, the diameter of the union of both marked balls and `γ`.
    pub upper_bound: f64,
    pub lift_stats: LiftStats,
}

pub fn width_report(built: &BuiltMap) -> Result<WidthReport> {
    let all: Vec<usize> = (0..built.map.len()).collect();
    let w = width(&built.map, &all)?;
    let ls = built.spec.segment_length();
    let mut step = 0.0f64;
    for i in 0..built.map.len() {
        for axis in 0..built.map.dim() {
            if let Some(j) = built.map.neighbor(i, axis, 1) {
                for (a, b) in built.map.values[i].iter().zip(&built.map.values[j]) {
                    step = step.max(wrap_step(b - a).abs());
                }
            }
        }
    }
    Ok(WidthReport {
        width: w,
        lower_bound: ls - 2.0 * built.cover.r_u,
        upper_bound: ls + 2.0 * built.cover.r_u,
        lift_stats: LiftStats {
            nodes: built.map.len(),
            max_edge_step: step,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverFlowConfig {
    pub dt: f64,
    pub steps: usize,
    pub eps_reg: f64,
    pub cfl_safety: f64,
    pub snapshot_stride: usize,
}

impl Default for CoverFlowConfig {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            steps: 100,
            eps_reg: 1e-6,
            cfl_safety: 0.5,
            snapshot_stride: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverSnapshot {
    pub step: usize,
    pub time: f64,
    pub energy: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverTrajectory {
    pub snapshots: Vec<CoverSnapshot>,
    pub map: GridMap,
    pub rejected_steps: usize,
    /// Largest energy change over an accepted step (nonpositive when monotone).
    pub max_step_increase: f64,
}

/// Largest stable explicit step for the regularized n-Laplacian on the lift.
pub fn cover_stable_dt(map: &GridMap, eps_reg: f64, cfl_safety: f64) -> f64 {
    let n = map.dim();
    let mut h_min = f64::INFINITY;
    let mut g_max = 0.0f64;
    for i in 0..map.len() {
        let c = map.coords(i);
        let Some(g) = map.inverse_metric(&c) else { continue };
        for (axis, gj) in g.iter().enumerate() {
            if let Some(j) = map.neighbor(i, axis, 1) {
                let mut d = (map.coords(j)[axis] - c[axis]).abs();
                if let Some(p) = map.axes[axis].period {
                    d = d.min(p - d);
                }
                h_min = h_min.min(d / gj.sqrt());
            }
        }
        g_max = g_max.max((map.gradient_sq(i).max(0.0) + eps_reg * eps_reg).powf(0.5 * (n as f64 - 2.0)));
    }
    if g_max == 0.0 {
        return f64::INFINITY;
    }
    cfl_safety * h_min * h_min / (2.0 * n as f64 * g_max)
}

/// One explicit step `v ← v + dt·div(|∇v|^{n−2}∇v)` per lifted component.
/// Nodes without a complete stencil are held fixed.
pub fn cover_step(map: &GridMap, dt: f64, cfg: &CoverFlowConfig) -> Result<GridMap> {
    let required = cover_stable_dt(map, cfg.eps_reg, cfg.cfl_safety);
    if dt > required {
        return Err(Error::Cfl { dt, required_dt: required });
    }
    let Target::Torus(t) = map.target else {
        return domain("cover flow needs a torus map");
    };
    let Some(lift) = &map.lift else {
        return Err(Error::Contract("cover flow needs a lifted map".into()));
    };
    let tau = TensionField::of_grid_eps(map, cfg.eps_reg)?;
    let next: Vec<Vec<f64>> = lift
        .iter()
        .zip(&tau.values)
        .map(|(v, d)| v.iter().zip(d).map(|(a, b)| a + dt * b).collect())
        .collect();
    let mut out = map.clone();
    out.values = next.iter().map(|v| t.project(v)).collect();
    out.lift = Some(next);
    Ok(out)
}

pub fn cover_flow(map: &GridMap, cfg: &CoverFlowConfig) -> Result<CoverTrajectory> {
    if !(cfg.dt > 0.0) || cfg.snapshot_stride == 0 {
        return Err(Error::Spec("dt and snapshot_stride must be positive".into()));
    }
    let mut cur = map.clone();
    if cur.lift.is_none() {
        cur.lift_bfs(0)?;
    }
    let all: Vec<usize> = (0..cur.len()).collect();
    let snap = |m: &GridMap, step: usize, time: f64| CoverSnapshot {
        step,
        time,
        energy: m.n_energy().total_energy,
        width: m.oscillation(&all),
    };
    let mut snapshots = vec![snap(&cur, 0, 0.0)];
    let (mut time, mut dt, mut energy) = (0.0, cfg.dt, snapshots[0].energy);
    let mut rejected = 0;
    let mut max_inc = f64::NEG_INFINITY;
    for step in 1..=cfg.steps {
        loop {
            match cover_step(&cur, dt, cfg) {
                Ok(next) => {
                    let e = next.n_energy().total_energy;
                    if e > energy + 1e-12 * energy.abs().max(1.0) && dt > 1e-16 {
                        rejected += 1;
                        dt *= 0.5;
                        continue;
                    }
                    max_inc = max_inc.max(e - energy);
                    energy = e;
                    cur = next;
                    time += dt;
                    break;
                }
                Err(Error::Cfl { required_dt, .. }) => {
                    rejected += 1;
                    dt = 0.5 * required_dt.min(dt);
                }
                Err(e) => return Err(e),
            }
        }
        if step % cfg.snapshot_stride == 0 || step == cfg.steps {
            snapshots.push(snap(&cur, step, time));
        }
    }
    Ok(CoverTrajectory {
        snapshots,
        map: cur,
        rejected_steps: rejected,
        max_step_increase: if cfg.steps == 0 { 0.0 } else { max_inc },
    })
}

/// Largest cover jump across an edge between two different regions, and the
/// largest jump across any edge inside a single region.
pub fn interface_jumps(built: &BuiltMap) -> (f64, f64) {
    let lift = built.map.lift.as_ref().expect("built maps are lifted");
    let (mut across, mut within) = (0.0f64, 0.0f64);
    for i in 0..built.map.len() {
        if let Some(j) = built.map.neighbor(i, 0, 1) {
            let d = cover_distance(&lift[i], &lift[j]);
            if built.region_of(i) == built.region_of(j) {
                within = within.max(d);
            } else {
                across = across.max(d);
            }
        }
    }
    (across, within)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Axis;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cover4() -> CoverModel {
        CoverModel {
            m: 4,
            p0: vec![0.5; 4],
            r_u: 0.1,
        }
    }

    #[test]
    fn stereographic_examples() {
        assert_eq!(stereographic(&[1.0, 0.0, 0.0], Pole::North).unwrap(), vec![1.0, 0.0]);
        assert_eq!(stereographic(&[0.0, 0.0, -1.0], Pole::North).unwrap(), vec![0.0, 0.0]);
        assert!(stereographic(&[0.0, 0.0, 1.0], Pole::North).is_err());
        assert!(stereographic(&[0.0, 0.0, -1.0], Pole::South).is_err());
        assert!(stereographic(&[0.5, 0.0, 0.0], Pole::North).is_err());
    }

    #[test]
    fn stereographic_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let x: Vec<f64> = v.iter().map(|a| a / r).collect();
            if x[3].abs() > 0.999 {
                continue;
            }
            for pole in [Pole::North, Pole::South] {
                let back = stereographic_inverse(&stereographic(&x, pole).unwrap(), pole);
                for (a, b) in back.iter().zip(&x) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn psi_is_phi_inverted() {
        let x = [0.6, 0.0, -0.8];
        let p = stereographic(&x, Pole::North).unwrap();
        let q = stereographic(&x, Pole::South).unwrap();
        let r2 = p[0] * p[0] + p[1] * p[1];
        assert!((q[0] - p[0] / r2).abs() < 1e-14);
    }

    #[test]
    fn cutoff_examples() {
        assert_eq!(cutoff_phi(0.0), (0.0, false));
        assert_eq!(cutoff_phi(1.0), (1.0, false));
        assert_eq!(cutoff_phi(1.0 / 16.0).0, 0.0);
        assert_eq!(cutoff_phi(15.0 / 16.0).0, 1.0);
        assert_eq!(cutoff_phi(-0.5), (0.0, true));
        assert_eq!(cutoff_phi(1.5), (1.0, true));
        let mut max_d = 0.0f64;
        let mut prev = 0.0;
        for i in 0..=10_000 {
            let x = i as f64 / 10_000.0;
            let (v, _) = cutoff_phi(x);
            assert!(v >= prev && cutoff_phi_prime(x) >= 0.0);
            prev = v;
            max_d = max_d.max(cutoff_phi_prime(x));
        }
        assert!(max_d <= 2.0 + 1e-12 && max_d > 1.99);
    }

    #[test]
    fn cutoff_power_integral_matches_quadrature() {
        for n in 2..=4 {
            let k = 200_000;
            let q: f64 = (0..k)
                .map(|i| cutoff_phi_prime((i as f64 + 0.5) / k as f64).powi(n as i32))
                .sum::<f64>()
                / k as f64;
            assert!((q - cutoff_power_integral(n)).abs() < 1e-8, "{n}");
        }
    }

    #[test]
    fn regions_agree_on_their_boundaries() {
        let spec = InitialMapSpec::default();
        let cover = CoverModel::default();
        let b = build_initial_map(&spec, &cover).unwrap();
        let q0 = cover.center(0);
        let ql = cover.center(spec.l);
        let lift = b.map.lift.as_ref().unwrap();
        let s = spec.sigma;
        let mut on_outer = 0;
        for i in 0..b.map.len() {
            let t = (0.5 * b.map.coords(i)[0]).tan();
            if (t / s - 1.0).abs() < 1e-9 {
                on_outer += 1;
                assert!(cover_distance(&lift[i], &q0) < 1e-10);
            }
            if (t / (s * s) - 1.0).abs() < 1e-9 {
                assert!(cover_distance(&lift[i], &ql) < 1e-10);
            }
        }
        assert!(on_outer > 0);
        let (across, within) = interface_jumps(&b);
        assert!(across <= 2.0 * within);
    }

    #[test]
    fn bfs_lift_reproduces_the_cover_values() {
        let spec = InitialMapSpec { l: 3, ..Default::default() };
        let cover = CoverModel::default();
        let b = build_initial_map(&spec, &cover).unwrap();
        let lift = b.map.lift.as_ref().unwrap();
        for i in (0..b.map.len()).step_by(7) {
            let want = initial_value(&spec, &cover, &b.map.coords(i));
            assert!(cover_distance(&lift[i], &want) < 1e-9);
        }
    }

    #[test]
    fn bump_copies_are_l_apart() {
        let spec = InitialMapSpec { l: 3, ..Default::default() };
        let cover = CoverModel::default();
        let b = build_initial_map(&spec, &cover).unwrap();
        let lift = b.map.lift.as_ref().unwrap();
        let inner = b.nodes_in(Region::Inner)[0];
        let outer = *b.nodes_in(Region::Outer).last().unwrap();
        let mut d: Vec<f64> = lift[inner].iter().zip(&lift[outer]).map(|(a, c)| a - c).collect();
        d[0] -= 3.0;
        assert!(d.iter().map(|x| x * x).sum::<f64>().sqrt() <= 2.0 * cover.r_u);
    }

    #[test]
    fn nesting_and_ranges_are_checked() {
        let cover = CoverModel::default();
        for spec in [
            InitialMapSpec { sigma: 0.3, ..Default::default() },
            InitialMapSpec { n: 3, ..Default::default() },
            InitialMapSpec { resolution: 8, ..Default::default() },
        ] {
            assert!(matches!(build_initial_map(&spec, &cover), Err(Error::Spec(_))));
        }
    }

    #[test]
    fn zero_separation_stays_in_one_ball() {
        let spec = InitialMapSpec { l: 0, ..Default::default() };
        let cover = CoverModel::default();
        let b = build_initial_map(&spec, &cover).unwrap();
        let w = width_report(&b).unwrap();
        assert!(w.width <= 2.0 * cover.r_u + 1e-12);
        assert_eq!(annulus_energy_estimate(&b).computed, 0.0);
    }

    #[test]
    fn width_lies_between_the_bounds() {
        for l in [1, 2, 4] {
            let spec = InitialMapSpec { l, ..Default::default() };
            let b = build_initial_map(&spec, &CoverModel::default()).unwrap();
            let w = width_report(&b).unwrap();
            assert!(w.width >= w.lower_bound && w.width <= w.upper_bound, "{w:?}");
            assert!(w.lift_stats.max_edge_step < 0.25);
        }
    }

    #[test]
    fn annulus_energy_matches_closed_form() {
        let spec = InitialMapSpec { amplitude: 0.0, ..Default::default() };
        let b = build_initial_map(&spec, &CoverModel::default()).unwrap();
        let a = annulus_energy_estimate(&b);
        assert!((a.computed / a.exact - 1.0).abs() < 1e-2);
        // Constant bumps leave only the annulus.
        let t = total_energy_check(&b).unwrap();
        assert_eq!(t.total, t.annulus);
    }

    #[test]
    fn annulus_energy_scales_with_log_sigma() {
        let xs: Vec<(f64, f64)> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&sigma| {
                let spec = InitialMapSpec { sigma, amplitude: 0.0, ..Default::default() };
                let b = build_initial_map(&spec, &CoverModel::default()).unwrap();
                ((-sigma.ln()).ln(), annulus_energy_estimate(&b).computed.ln())
            })
            .collect();
        let mx = xs.iter().map(|p| p.0).sum::<f64>() / 3.0;
        let my = xs.iter().map(|p| p.1).sum::<f64>() / 3.0;
        let slope = xs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / xs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 1.0).abs() < 0.05, "{slope}");
    }

    #[test]
    fn annulus_energy_is_homogeneous_in_l() {
        let e = |l| {
            let spec = InitialMapSpec { l, amplitude: 0.0, resolution: 48, ..Default::default() };
            annulus_energy_estimate(&build_initial_map(&spec, &CoverModel::default()).unwrap()).computed
        };
        let (a, b) = (e(1), e(2));
        assert!((b / a / 4.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn far_copy_energy_is_conformally_invariant() {
        let spec = InitialMapSpec { sigma: 1e-4, l: 1, ..Default::default() };
        let b = build_initial_map(&spec, &CoverModel::default()).unwrap();
        let t = total_energy_check(&b).unwrap();
        assert!(t.conformal_defect < 0.02, "{t:?}");
        assert!((t.outer / t.bump_energy - 1.0).abs() < 0.02);
        assert!(t.holds && t.slack > 0.0);
        assert!((t.total - t.inner - t.annulus - t.outer).abs() < 1e-12 * t.total);
    }

    #[test]
    fn three_dimensional_domain_builds() {
        let spec = InitialMapSpec { n: 3, sigma: 1e-3, l: 1, resolution: 16, mid: 5, ..Default::default() };
        let b = build_initial_map(&spec, &cover4()).unwrap();
        let a = annulus_energy_estimate(&b);
        assert!((a.computed / a.exact - 1.0).abs() < 0.05, "{a:?}");
        let w = width_report(&b).unwrap();
        assert!(w.width >= w.lower_bound && w.width <= w.upper_bound);
    }

    fn torus_map(k: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> GridMap {
        let axes = vec![Axis::periodic(k, 1.0), Axis::periodic(k, 1.0)];
        GridMap::from_fn(Chart::Flat, axes, Target::Torus(TorusTarget::new(3).unwrap()), f).unwrap()
    }

    /// Map from the closed unit square; boundary nodes stay fixed under the flow.
    fn box_map(k: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> GridMap {
        let axes = vec![Axis::closed(uniform_grid(k, 1.0)), Axis::closed(uniform_grid(k, 1.0))];
        GridMap::from_fn(Chart::Flat, axes, Target::Torus(TorusTarget::new(3).unwrap()), f).unwrap()
    }

    #[test]
    fn constant_map_is_a_fixed_point_of_the_cover_flow() {
        let m = torus_map(8, |_| vec![0.1, 0.2, 0.3]);
        let w = width(&m, &(0..m.len()).collect::<Vec<_>>()).unwrap();
        assert_eq!(w, 0.0);
        let tr = cover_flow(&m, &CoverFlowConfig { steps: 5, ..Default::default() }).unwrap();
        assert_eq!(tr.map.values, m.values);
        assert!(tr.snapshots.iter().all(|s| s.energy == 0.0 && s.width == 0.0));
    }

    #[test]
    fn winding_map_is_stationary() {
        let m = box_map(16, |c| vec![c[0], 2.0 * c[1], 0.5]);
        let tr = cover_flow(&m, &CoverFlowConfig { steps: 20, dt: 1e-3, ..Default::default() }).unwrap();
        let a = tr.map.lift.as_ref().unwrap();
        let mut b = m.clone();
        b.lift_bfs(0).unwrap();
        let b = b.lift.unwrap();
        let drift = a.iter().zip(&b).map(|(x, y)| cover_distance(x, y)).fold(0.0, f64::max);
        assert!(drift < 1e-10, "{drift}");
    }

    #[test]
    fn cover_flow_dissipates_energy() {
        use std::f64::consts::TAU;
        let m = box_map(16, |c| vec![c[0] + 0.1 * (TAU * c[1]).sin(), 0.2 * (TAU * c[0]).cos(), 0.3]);
        let tr = cover_flow(&m, &CoverFlowConfig { steps: 50, dt: 1e-3, ..Default::default() }).unwrap();
        assert!(tr.max_step_increase <= 0.0);
        for w in tr.snapshots.windows(2) {
            assert!(w[1].energy <= w[0].energy);
        }
        assert!(tr.snapshots.last().unwrap().energy < tr.snapshots[0].energy);
    }

    #[test]
    fn cover_step_enforces_cfl() {
        let mut m = box_map(16, |c| vec![c[0], 0.1 * c[1].sin(), 0.3]);
        m.lift_bfs(0).unwrap();
        let cfg = CoverFlowConfig::default();
        let dt = cover_stable_dt(&m, cfg.eps_reg, cfg.cfl_safety);
        assert!(matches!(cover_step(&m, 2.0 * dt, &cfg), Err(Error::Cfl { .. })));
        assert!(cover_step(&m, dt, &cfg).is_ok());
    }

    #[test]
    fn winding_on_a_periodic_domain_has_no_lift() {
        let m = torus_map(16, |c| vec![c[0], 0.0, 0.0]);
        assert!(width(&m, &[0, 1]).is_err());
    }

    #[test]
    fn width_rejects_ambiguous_edges() {
        let m = torus_map(4, |c| vec![0.4 * (c[0] * 4.0).round(), 0.0, 0.0]);
        assert!(matches!(width(&m, &[0, 1]), Err(Error::LiftAmbiguity { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn width_is_invariant_under_lattice_shifts(a in -5i64..5, b in -5i64..5, c in -5i64..5) {
            let spec = InitialMapSpec { l: 2, resolution: 16, mid: 5, ..Default::default() };
            let built = build_initial_map(&spec, &CoverModel::default()).unwrap();
            let all: Vec<usize> = (0..built.map.len()).collect();
            let w0 = width(&built.map, &all).unwrap();
            let mut m = built.map.clone();
            for v in m.lift.as_mut().unwrap().iter_mut() {
                v[0] += a as f64;
                v[1] += b as f64;
                v[2] += c as f64;
            }
            prop_assert!((width(&m, &all).unwrap() - w0).abs() < 1e-12);
        }

        #[test]
        fn cutoff_is_monotone(x in -1.0f64..2.0, y in -1.0f64..2.0) {
            let (lo, hi) = if x < y { (x, y) } else { (y, x) };
            prop_assert!(cutoff_phi(lo).0 <= cutoff_phi(hi).0);
            prop_assert!((0.0..=1.0).contains(&cutoff_phi(x).0));
        }
    }
}
