//! Computable analytic quantities: tension, dissipation bookkeeping, Pohozaev
//! balance, the oscillation bound, dyadic annulus energies, radial comparison
//! maps and the regularity integrals.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::equivariant_flow::{
    ball_integral, grad_sq, interpolant, lumped_mass, reduced_tension, truncated_mass,
    FlowTrajectory,
};
use crate::error::{domain, Error, Result};
use crate::fields::{
    latitude_diameter, nodal_derivative, one_sided, sphere_area, sphere_embed, three_point,
    uniform_grid, DomainKind, GridMap, RadialProfile, Target,
};
use crate::manifold::{dot, sphere_second_fundamental_term};

/// Default dissipation tolerance as a fraction of `E(0)`.
pub const TOL_DISSIPATION: f64 = 1e-2;

/// `λ_n = n ln 2 / (2(n−1))`.
pub fn lambda_n(n: usize) -> f64 {
    n as f64 / (2.0 * (n as f64 - 1.0)) * LN_2
}

/// One entry of the JSON check schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub inputs: serde_json::Value,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub in_regime: bool,
}

/// Per-node tension vectors with the quadrature weights used for norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensionField {
    pub values: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Nodes where the stencil is complete.
    pub interior: Vec<bool>,
    /// `max |⟨τ, u⟩| / |τ|` before the tangential projection (sphere grid maps only).
    pub normal_defect: Option<f64>,
}

impl TensionField {
    /// Reduced tension of a profile, one component per node.
    pub fn of_profile(p: &RadialProfile, n: usize, eps_reg: f64) -> Result<Self> {
        if n < 2 {
            return domain("n must be at least 2");
        }
        let tau = reduced_tension(p, n, eps_reg);
        if tau.iter().any(|t| !t.is_finite()) {
            return domain("tension is not finite");
        }
        let last = tau.len() - 1;
        Ok(Self {
            values: tau.into_iter().map(|t| vec![t]).collect(),
            weights: lumped_mass(p, n),
            interior: (0..=last).map(|k| k > 0 && k < last).collect(),
            normal_defect: None,
        })
    }

    /// `div(|∇u|^{n−2}∇u) + |∇u|^n u` on a grid map, projected onto the tangent
    /// space for sphere targets; torus maps use the componentwise n-Laplacian of
    /// the lift (or of wrapped differences). Degenerate chart points and the ends
    /// of closed axes are left at zero and flagged non-interior.
    pub fn of_grid(map: &GridMap) -> Result<Self> {
        Self::of_grid_eps(map, 0.0)
    }

    /// As [`TensionField::of_grid`] with the flux weight `(|∇u|² + ε²)^{(n−2)/2}`.
    pub fn of_grid_eps(map: &GridMap, eps_reg: f64) -> Result<Self> {
        let n = map.dim();
        if map.values.iter().flatten().any(|x| !x.is_finite()) {
            return domain("grid map has non-finite values");
        }
        let len = map.len();
        let coords: Vec<Vec<f64>> = (0..len).map(|i| map.coords(i)).collect();
        let ginv: Vec<Option<Vec<f64>>> = coords.iter().map(|c| map.inverse_metric(c)).collect();
        // Fluxes √g g^{jj} |∇u|^{n−2} ∂_j u, zero at degenerate nodes.
        let mut flux: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(len); n];
        let mut gsq = vec![0.0; len];
        for i in 0..len {
            let m = map.values[i].len();
            match &ginv[i] {
                None => {
                    for f in flux.iter_mut() {
                        f.push(vec![0.0; m]);
                    }
                }
                Some(g) => {
                    let parts: Vec<Vec<f64>> = (0..n).map(|j| map.partial(i, j)).collect();
                    let s: f64 = (0..n).map(|j| g[j] * dot(&parts[j], &parts[j])).sum();
                    gsq[i] = s;
                    let c = map.volume_element(i) * (s.max(0.0) + eps_reg * eps_reg).powf(0.5 * (n as f64 - 2.0));
                    for (j, d) in parts.into_iter().enumerate() {
                        flux[j].push(d.into_iter().map(|x| c * g[j] * x).collect());
                    }
                }
            }
        }
        let mut values = Vec::with_capacity(len);
        let mut interior = Vec::with_capacity(len);
        let mut defect = 0.0f64;
        for i in 0..len {
            let m = map.values[i].len();
            let inside = ginv[i].is_some()
                && (0..n).all(|j| {
                    let a = &map.axes[j];
                    let k = map.multi_index(i)[j];
                    a.period.is_some() || (k > 0 && k + 1 < a.len())
                });
            if !inside {
                values.push(vec![0.0; m]);
                interior.push(false);
                continue;
            }
            let vol = map.volume_element(i);
            let mut div = vec![0.0; m];
            for (j, f) in flux.iter().enumerate() {
                let d = centered(map, f, i, j);
                for c in 0..m {
                    div[c] += d[c] / vol;
                }
            }
            let tau = match map.target {
                Target::Sphere(_) => {
                    let u = &map.values[i];
                    let curv = sphere_second_fundamental_term(u, gsq[i].powf(0.5 * n as f64))?;
                    let full: Vec<f64> = div.iter().zip(&curv).map(|(a, b)| a + b).collect();
                    let normal = dot(&full, u);
                    let size = dot(&full, &full).sqrt();
                    if size > 0.0 {
                        defect = defect.max(normal.abs() / size);
                    }
                    full.iter().zip(u).map(|(x, uc)| x - normal * uc).collect()
                }
                Target::Torus(_) => div,
            };
            values.push(tau);
            interior.push(true);
        }
        let weights = (0..len).map(|i| map.quadrature_weight(i)).collect();
        Ok(Self {
            values,
            weights,
            interior,
            normal_defect: matches!(map.target, Target::Sphere(_)).then_some(defect),
        })
    }

    pub fn sup_norm(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.interior)
            .filter(|(_, &ok)| ok)
            .map(|(v, _)| dot(v, v).sqrt())
            .fold(0.0, f64::max)
    }

    /// `(Σ_k w_k |τ_k|²)^{1/2}` over the interior nodes.
    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .zip(&self.interior)
            .filter(|(_, &ok)| ok)
            .map(|((v, w), _)| w * dot(v, v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Centered (one-sided at closed ends) derivative of a nodal vector field along an axis.
fn centered(map: &GridMap, field: &[Vec<f64>], i: usize, axis: usize) -> Vec<f64> {
    let a = &map.axes[axis];
    let k = map.multi_index(i)[axis] as isize;
    let len = a.len() as isize;
    let x = |kk: isize| {
        let r = kk.rem_euclid(len) as usize;
        a.nodes[r] + kk.div_euclid(len) as f64 * a.period.unwrap_or(0.0)
    };
    let at = |off: isize| &field[map.neighbor(i, axis, off).expect("stencil inside the grid")];
    let m = field[i].len();
    if a.period.is_some() || (k > 0 && k + 1 < len) {
        let (y0, y1, y2) = (at(-1), at(0), at(1));
        (0..m)
            .map(|c| three_point(x(k - 1), x(k), x(k + 1), y0[c], y1[c], y2[c]))
            .collect()
    } else if k == 0 {
        let (y0, y1, y2) = (at(0), at(1), at(2));
        (0..m)
            .map(|c| one_sided(x(0), x(1), x(2), y0[c], y1[c], y2[c]))
            .collect()
    } else {
        let (y0, y1, y2) = (at(0), at(-1), at(-2));
        (0..m)
            .map(|c| -one_sided(-x(k), -x(k - 1), -x(k - 2), y0[c], y1[c], y2[c]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub times: Vec<f64>,
    pub energies: Vec<f64>,
    /// `E(0) − E(s) − D(s) + J(s)`, with `D` the dissipation booked by the stepper
    /// and `J` the accumulated remeshing jumps.
    pub residuals: Vec<f64>,
    /// The same residual with `D` replaced by a trapezoid rule in time over the
    /// stored `∂_t h` snapshots.
    pub quadrature_residuals: Vec<f64>,
    /// Largest energy increase between consecutive snapshots (net of remeshing).
    pub max_increase: f64,
    pub tol: f64,
    pub violated: bool,
}

impl DissipationReport {
    pub fn max_abs_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |a, r| a.max(r.abs()))
    }

    pub fn to_check(&self) -> CheckReport {
        let e0 = self.energies[0];
        let last = self.energies.len() - 1;
        CheckReport {
            name: "dissipation".into(),
            inputs: serde_json::json!({ "snapshots": self.times.len(), "tol": self.tol }),
            lhs: e0 - self.energies[last],
            rhs: e0 - self.energies[last] - self.residuals[last],
            residual: self.max_abs_residual(),
            in_regime: !self.violated,
        }
    }
}

/// Energy identity bookkeeping along a trajectory; the default tolerance is
/// [`TOL_DISSIPATION`]`·E(0)`.
pub fn dissipation_check(traj: &FlowTrajectory, tol: Option<f64>) -> Result<DissipationReport> {
    let s = &traj.snapshots;
    if s.len() < 2 {
        return Err(Error::Contract("dissipation check needs at least two snapshots".into()));
    }
    if s.iter().any(|x| x.dhdt.len() != x.profile.values.len()) {
        return Err(Error::Contract("snapshot is missing its time-derivative field".into()));
    }
    let e0 = s[0].energy;
    let tol = tol.unwrap_or(TOL_DISSIPATION * e0.abs());
    let rates: Vec<f64> = s
        .iter()
        .map(|x| {
            let m = lumped_mass(&x.profile, traj.n);
            x.dhdt.iter().zip(&m).map(|(v, mk)| mk * v * v).sum()
        })
        .collect();
    let mut quad = 0.0;
    let mut residuals = Vec::with_capacity(s.len());
    let mut quadrature_residuals = Vec::with_capacity(s.len());
    let mut max_increase = f64::NEG_INFINITY;
    for (k, x) in s.iter().enumerate() {
        if k > 0 {
            quad += 0.5 * (rates[k] + rates[k - 1]) * (x.time - s[k - 1].time);
            let jump = x.remesh_jump - s[k - 1].remesh_jump;
            max_increase = max_increase.max(x.energy - s[k - 1].energy - jump);
        }
        residuals.push(e0 - x.energy - x.dissipation + x.remesh_jump);
        quadrature_residuals.push(e0 - x.energy - quad + x.remesh_jump);
    }
    let violated = residuals.iter().any(|r| r.abs() > tol) || max_increase > tol;
    Ok(DissipationReport {
        times: s.iter().map(|x| x.time).collect(),
        energies: s.iter().map(|x| x.energy).collect(),
        residuals,
        quadrature_residuals,
        max_increase,
        tol,
        violated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PohozaevReport {
    pub r: f64,
    /// `∫_{∂B_r} |∇u|^n`.
    pub lhs: f64,
    /// `∫_{∂B_r} |∇_T u|^n`.
    pub rhs_tangential: f64,
    /// `∫_{B_r} |τ(u)| |∇u|`.
    pub rhs_tension: f64,
    /// `(r/n)∫_{∂B_r}|∇u|^n − r∫_{∂B_r}|∇u|^{n−2}|∂_r u|²`.
    pub identity_boundary: f64,
    /// `−∫_{B_r} ⟨τ(u), x·∇u⟩`.
    pub identity_volume: f64,
    pub identity_residual: f64,
}

impl PohozaevReport {
    /// `lhs / (rhs_tangential + rhs_tension)`; the lemma bounds this by `C(n)`.
    pub fn ratio(&self) -> f64 {
        self.lhs / (self.rhs_tangential + self.rhs_tension)
    }

    pub fn to_check(&self, n: usize) -> CheckReport {
        CheckReport {
            name: "pohozaev".into(),
            inputs: serde_json::json!({ "n": n, "r": self.r }),
            lhs: self.lhs,
            rhs: self.rhs_tangential + self.rhs_tension,
            residual: self.identity_residual,
            in_regime: true,
        }
    }
}

/// Pohozaev quantities of a corotational map on the flat ball `B_r`.
pub fn pohozaev_balance(p: &RadialProfile, n: usize, r: f64, eps_reg: f64) -> Result<PohozaevReport> {
    if p.kind != DomainKind::FlatBall {
        return domain("Pohozaev balance needs a flat_ball profile");
    }
    if !(r > 0.0 && r <= p.radius()) {
        return domain(format!("radius {r} outside the grid"));
    }
    let nf = n as f64;
    let area = sphere_area(n - 1) * r.powi(n as i32 - 1);
    let h = interpolant(p, r).0;
    let d = nodal_derivative(&p.grid, &p.values);
    // Slope from the second-order nodal derivatives, linear between nodes.
    let k = p.grid.partition_point(|&x| x <= r).saturating_sub(1).min(p.cells() - 1);
    let s = (r - p.grid[k]) / (p.grid[k + 1] - p.grid[k]);
    let hp = d[k] + s * (d[k + 1] - d[k]);
    let tang = (nf - 1.0) * h.sin().powi(2) / (r * r);
    let f = hp * hp + tang;
    let lhs = area * f.powf(0.5 * nf);
    let rhs_tangential = area * tang.powf(0.5 * nf);
    let identity_boundary = r / nf * lhs - r * area * f.powf(0.5 * nf - 1.0) * hp * hp;
    let tau = reduced_tension(p, n, eps_reg);
    let m = truncated_mass(p, n, r);
    let mut rhs_tension = 0.0;
    let mut pairing = 0.0;
    for k in 0..p.grid.len() {
        if m[k] == 0.0 {
            continue;
        }
        let g = grad_sq(p.kind, n, p.grid[k], p.values[k], d[k]);
        rhs_tension += m[k] * tau[k].abs() * g.sqrt();
        pairing += m[k] * tau[k] * p.grid[k] * d[k];
    }
    Ok(PohozaevReport {
        r,
        lhs,
        rhs_tangential,
        rhs_tension,
        identity_boundary,
        identity_volume: -pairing,
        identity_residual: identity_boundary + pairing,
    })
}

/// `∫_{B_r} |∇u|^n` for a profile.
pub fn ball_energy(p: &RadialProfile, n: usize, r: f64) -> f64 {
    ball_integral(p, n, r, |x, h, hp| grad_sq(p.kind, n, x, h, hp).powf(0.5 * n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationReport {
    pub r: f64,
    /// `osc(u; B_{r/2})`.
    pub lhs: f64,
    /// `(∫_{B_r}|∇u|^n)^{1/(2(n−1))} + r^{n/(2(n−1))}(∫_{B_r}|τ|²)^{1/(2(n−1))}`.
    pub rhs: f64,
    /// `E_n(u; B_r)`.
    pub energy: f64,
    pub in_regime: bool,
}

impl OscillationReport {
    pub fn ratio(&self) -> f64 {
        self.lhs / self.rhs
    }

    pub fn to_check(&self, n: usize, eps: f64) -> CheckReport {
        CheckReport {
            name: "oscillation_bound".into(),
            inputs: serde_json::json!({ "n": n, "r": self.r, "eps": eps }),
            lhs: self.lhs,
            rhs: self.rhs,
            residual: self.ratio(),
            in_regime: self.in_regime,
        }
    }
}

/// Both sides of the oscillation estimate on `B_r` (without the constant).
/// Out-of-regime inputs (`E_n(u; B_r) > eps`) are still computed and flagged.
pub fn oscillation_bound_check(
    p: &RadialProfile,
    n: usize,
    r: f64,
    eps: f64,
    eps_reg: f64,
) -> Result<OscillationReport> {
    if !(r > 0.0 && r <= p.radius()) {
        return domain(format!("radius {r} outside the grid"));
    }
    let e = ball_energy(p, n, r);
    let tau = reduced_tension(p, n, eps_reg);
    let m = truncated_mass(p, n, r);
    let t2: f64 = tau.iter().zip(&m).map(|(t, mk)| mk * t * t).sum();
    let q = 1.0 / (2.0 * (n as f64 - 1.0));
    let mut hs: Vec<f64> = p
        .grid
        .iter()
        .zip(&p.values)
        .filter(|(x, _)| **x <= 0.5 * r)
        .map(|(_, h)| *h)
        .collect();
    hs.push(interpolant(p, 0.5 * r).0);
    Ok(OscillationReport {
        r,
        lhs: latitude_diameter(&hs),
        rhs: e.powf(q) + r.powf(n as f64 * q) * t2.powf(q),
        energy: e / n as f64,
        in_regime: e / n as f64 <= eps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeckStatistics {
    pub j_range: (i32, i32),
    pub t: f64,
    pub lambda_n: f64,
    /// `(j, f_j(t), f_j′(t), osc over P_{j,t})` for annuli inside the grid.
    pub rows: Vec<NeckRow>,
    /// Indices `j` whose annulus leaves the grid.
    pub skipped: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeckRow {
    pub j: i32,
    pub energy: f64,
    /// `f_j′(t)` by central differences in `t`.
    pub derivative: f64,
    /// `f_j′(t)` from the boundary integrals over the two edge spheres.
    pub derivative_boundary: f64,
    pub oscillation: f64,
}

/// `f_j(t) = ∫_{P_{j,t}} |∇u|^n` with `P_{j,t} = B_{2^{t−j}} \ B_{2^{−t−j}}`.
pub fn annulus_energy(p: &RadialProfile, n: usize, j: i32, t: f64) -> f64 {
    let (outer, inner) = annulus_radii(j, t);
    ball_energy(p, n, outer) - ball_energy(p, n, inner)
}

fn annulus_radii(j: i32, t: f64) -> (f64, f64) {
    (2f64.powf(t - j as f64), 2f64.powf(-t - j as f64))
}

/// Dyadic annulus energies around the pole for `j ∈ [j0, j1]`.
pub fn annulus_energies(p: &RadialProfile, n: usize, j_range: (i32, i32), t: f64) -> Result<NeckStatistics> {
    if !(t > 0.0) {
        return domain("annulus parameter t must be positive");
    }
    let dt = 1e-4 * t.min(1.0);
    let sphere = |r: f64| {
        let (h, hp) = interpolant(p, r);
        sphere_area(n - 1) * r.powi(n as i32 - 1) * grad_sq(p.kind, n, r, h, hp).powf(0.5 * n as f64)
    };
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for j in j_range.0..=j_range.1 {
        let (outer, inner) = annulus_radii(j, t);
        if outer > p.radius() * (1.0 + 1e-12) || annulus_radii(j, t + dt).0 > p.radius() {
            skipped.push(j);
            continue;
        }
        let energy = annulus_energy(p, n, j, t);
        let derivative = (annulus_energy(p, n, j, t + dt) - annulus_energy(p, n, j, t - dt)) / (2.0 * dt);
        let derivative_boundary = LN_2 * (outer * sphere(outer) + inner * sphere(inner));
        let mut hs: Vec<f64> = p
            .grid
            .iter()
            .zip(&p.values)
            .filter(|(x, _)| **x >= inner && **x <= outer)
            .map(|(_, h)| *h)
            .collect();
        hs.push(interpolant(p, inner).0);
        hs.push(interpolant(p, outer).0);
        rows.push(NeckRow {
            j,
            energy,
            derivative,
            derivative_boundary,
            oscillation: latitude_diameter(&hs),
        });
    }
    Ok(NeckStatistics {
        j_range,
        t,
        lambda_n: lambda_n(n),
        rows,
        skipped,
    })
}

/// Log-linear interpolation between the spherical averages on the two edges of
/// `P_{j,t}`; vector valued in the ambient space of the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMap {
    pub r_inner: f64,
    pub r_outer: f64,
    pub avg_inner: Vec<f64>,
    pub avg_outer: Vec<f64>,
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl ComparisonMap {
    pub fn eval(&self, r: f64) -> Vec<f64> {
        let s = (r / self.r_outer).ln() / (self.r_inner / self.r_outer).ln();
        self.avg_outer
            .iter()
            .zip(&self.avg_inner)
            .map(|(o, i)| o + (i - o) * s)
            .collect()
    }
}

/// Average of the corotational map over an equal-weight angular grid orbit on
/// the sphere of radius `r`.
pub fn spherical_average(p: &RadialProfile, n: usize, r: f64, orbit_nodes: usize) -> Vec<f64> {
    let h = interpolant(p, r).0;
    let axes = GridMap::sphere_axes(n - 1, crate::fields::uniform_grid(orbit_nodes - 1, std::f64::consts::PI), orbit_nodes);
    let count: usize = axes.iter().map(|a| a.len()).product();
    let mut acc = vec![0.0; n + 1];
    let mut c = vec![0.0; axes.len()];
    for i in 0..count {
        let mut rem = i;
        for (j, a) in axes.iter().enumerate().rev() {
            c[j] = a.nodes[rem % a.len()];
            rem /= a.len();
        }
        let theta = sphere_embed(&c);
        for (slot, x) in theta.iter().enumerate() {
            acc[slot] += h.sin() * x;
        }
        acc[n] += h.cos();
    }
    acc.iter().map(|x| x / count as f64).collect()
}

/// Comparison map on `[2^{−t−j}, 2^{t−j}]` sampled on `nodes` uniform radii.
pub fn radial_comparison_map(
    p: &RadialProfile,
    n: usize,
    j: i32,
    t: f64,
    orbit_nodes: usize,
    nodes: usize,
) -> Result<ComparisonMap> {
    if !(t > 0.0) {
        return domain("comparison map needs t > 0");
    }
    if orbit_nodes < 8 {
        return domain("edge spheres need at least 8 nodes");
    }
    let (r_outer, r_inner) = annulus_radii(j, t);
    if r_outer > p.radius() {
        return domain("annulus outside the grid");
    }
    let avg_outer = spherical_average(p, n, r_outer, orbit_nodes);
    let avg_inner = spherical_average(p, n, r_inner, orbit_nodes);
    let mut cm = ComparisonMap {
        r_inner,
        r_outer,
        avg_inner,
        avg_outer,
        grid: Vec::new(),
        values: Vec::new(),
    };
    let grid: Vec<f64> = uniform_grid(nodes.max(2) - 1, r_outer - r_inner)
        .into_iter()
        .map(|x| r_inner + x)
        .collect();
    cm.values = grid.iter().map(|&r| cm.eval(r)).collect();
    let last = grid.len() - 1;
    cm.values[0] = cm.avg_inner.clone();
    cm.values[last] = cm.avg_outer.clone();
    cm.grid = grid;
    Ok(cm)
}

/// Flat radial n-Laplacian `r^{1−n}(r^{n−1}|v′|^{n−2}v′)′` of a vector-valued
/// radial function, by fluxes at cell midpoints. Interior nodes only.
pub fn radial_n_laplacian(grid: &[f64], values: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let m = values[0].len();
    let flux: Vec<Vec<f64>> = (0..grid.len() - 1)
        .map(|k| {
            let d = grid[k + 1] - grid[k];
            let rm = 0.5 * (grid[k] + grid[k + 1]);
            let v: Vec<f64> = (0..m).map(|c| (values[k + 1][c] - values[k][c]) / d).collect();
            let s = dot(&v, &v).sqrt().powi(n as i32 - 2) * rm.powi(n as i32 - 1);
            v.into_iter().map(|x| s * x).collect()
        })
        .collect();
    (1..grid.len() - 1)
        .map(|k| {
            let d = 0.5 * (grid[k + 1] - grid[k - 1]);
            let w = grid[k].powi(n as i32 - 1);
            (0..m).map(|c| (flux[k][c] - flux[k - 1][c]) / (d * w)).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularitySeries {
    pub times: Vec<f64>,
    /// `∫|∇(|∇u|^{(n−2)/2}∇u)|²` per snapshot.
    pub hessian_term: Vec<f64>,
    /// `∫|∇u|^{2n}` per snapshot.
    pub grad_2n: Vec<f64>,
    pub hessian_integral: f64,
    pub grad_2n_integral: f64,
}

/// Both regularity integrals of a corotational profile.
///
/// With `g = f^{(n−2)/4}`, the field `V = g∇u` has ambient components
/// `P = g cos h h′`, `Q = g sin h / w`, `R = −g sin h h′`, and
/// `|∇V|² = P′² + R′² + (n−1)(Q′² + 2(P−Q)²/w² + R²/w²)`, exact on the flat ball.
pub fn regularity_integrals(p: &RadialProfile, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let d = nodal_derivative(&p.grid, &p.values);
    let len = p.grid.len();
    let mut pv = vec![0.0; len];
    let mut qv = vec![0.0; len];
    let mut rv = vec![0.0; len];
    for k in 0..len {
        let (r, h, hp) = (p.grid[k], p.values[k], d[k]);
        let w = p.kind.w(r);
        let s_over_w = if w.abs() < 1e-12 {
            h.cos() * hp / p.kind.w_prime(r)
        } else {
            h.sin() / w
        };
        let f = hp * hp + (nf - 1.0) * s_over_w * s_over_w;
        let g = f.powf(0.25 * (nf - 2.0));
        pv[k] = g * h.cos() * hp;
        qv[k] = g * s_over_w;
        rv[k] = -g * h.sin() * hp;
    }
    let area = sphere_area(n - 1);
    let (mut hess, mut g2n) = (0.0, 0.0);
    for k in 0..len - 1 {
        let dr = p.grid[k + 1] - p.grid[k];
        let rm = 0.5 * (p.grid[k] + p.grid[k + 1]);
        let w = p.kind.w(rm);
        let wt = area * w.powi(n as i32 - 1) * dr;
        let dp = (pv[k + 1] - pv[k]) / dr;
        let dq = (qv[k + 1] - qv[k]) / dr;
        let drr = (rv[k + 1] - rv[k]) / dr;
        let (pm, qm, rm_) = (
            0.5 * (pv[k] + pv[k + 1]),
            0.5 * (qv[k] + qv[k + 1]),
            0.5 * (rv[k] + rv[k + 1]),
        );
        hess += wt * (dp * dp + drr * drr + (nf - 1.0) * (dq * dq + 2.0 * (pm - qm).powi(2) / (w * w) + rm_ * rm_ / (w * w)));
        let hm = 0.5 * (p.values[k] + p.values[k + 1]);
        let hpm = (p.values[k + 1] - p.values[k]) / dr;
        g2n += wt * grad_sq(p.kind, n, rm, hm, hpm).powf(nf);
    }
    (hess, g2n)
}

/// Regularity integrals per snapshot and their trapezoid time integrals.
pub fn regularity_quantities(traj: &FlowTrajectory) -> RegularitySeries {
    let times: Vec<f64> = traj.snapshots.iter().map(|s| s.time).collect();
    let (hessian_term, grad_2n): (Vec<f64>, Vec<f64>) = traj
        .snapshots
        .iter()
        .map(|s| regularity_integrals(&s.profile, traj.n))
        .unzip();
    let integrate = |v: &[f64]| {
        times
            .windows(2)
            .zip(v.windows(2))
            .map(|(t, y)| 0.5 * (y[0] + y[1]) * (t[1] - t[0]))
            .sum()
    };
    RegularitySeries {
        hessian_integral: integrate(&hessian_term),
        grad_2n_integral: integrate(&grad_2n),
        times,
        hessian_term,
        grad_2n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equivariant_flow::{bubble, reduced_energy, run, FlowConfig, FlowStatus, Snapshot};
    use crate::fields::{Axis, Chart};
    use crate::manifold::{SphereTarget, TorusTarget};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn slope(e: &[f64]) -> f64 {
        (e[e.len() - 2] / e[e.len() - 1]).log2()
    }

    fn constant_ball(k: usize) -> RadialProfile {
        RadialProfile::from_fn(DomainKind::FlatBall, k, 1.0, |_| 0.0).unwrap()
    }

    #[test]
    fn constant_profile_gives_zeros() {
        let p = constant_ball(64);
        let t = TensionField::of_profile(&p, 3, 0.0).unwrap();
        assert_eq!(t.sup_norm(), 0.0);
        let ph = pohozaev_balance(&p, 3, 0.5, 0.0).unwrap();
        assert_eq!((ph.lhs, ph.rhs_tangential, ph.rhs_tension), (0.0, 0.0, 0.0));
        let o = oscillation_bound_check(&p, 3, 0.5, 1.0, 0.0).unwrap();
        assert_eq!((o.lhs, o.rhs), (0.0, 0.0));
        let ns = annulus_energies(&p, 3, (1, 4), 0.5).unwrap();
        assert!(ns.rows.iter().all(|r| r.energy == 0.0 && r.oscillation == 0.0));
        assert_eq!(regularity_integrals(&p, 3), (0.0, 0.0));
    }

    #[test]
    fn grid_tension_of_identity_is_tangent_and_second_order_off_the_poles() {
        let target = Target::Sphere(SphereTarget::new(2).unwrap());
        let mut band = Vec::new();
        for mid in [17usize, 33, 65] {
            let axes = GridMap::sphere_axes(2, uniform_grid(mid - 1, PI), mid);
            let m = GridMap::from_fn(Chart::Sphere, axes, target, sphere_embed).unwrap();
            let t = TensionField::of_grid(&m).unwrap();
            let mut worst = 0.0f64;
            for i in 0..m.len() {
                if !t.interior[i] {
                    continue;
                }
                let v = &t.values[i];
                assert!(dot(v, &m.values[i]).abs() <= 1e-8 * dot(v, v).sqrt() + 1e-15);
                if (m.coords(i)[0] - PI / 2.0).abs() < PI / 4.0 {
                    worst = worst.max(dot(v, v).sqrt());
                }
            }
            band.push(worst);
        }
        assert!(slope(&band) >= 1.8, "{band:?}");
    }

    #[test]
    fn linear_torus_map_is_stationary() {
        let k = 16;
        let axes = vec![Axis::periodic(k, 1.0), Axis::periodic(k, 1.0)];
        let target = Target::Torus(TorusTarget::new(3).unwrap());
        let mut m = GridMap::from_fn(Chart::Flat, axes, target, |c| vec![c[0], 0.25, 0.5]).unwrap();
        let t = TensionField::of_grid(&m).unwrap();
        assert!(t.sup_norm() < 1e-10);
        m.lift_bfs(0).unwrap_err();
        assert_eq!(t.normal_defect, None);
    }

    fn synthetic(h0: &RadialProfile, n: usize, steps: usize) -> FlowTrajectory {
        let snapshots = (0..=steps)
            .map(|i| {
                let t = i as f64 / steps as f64 * 0.5;
                let mut p = h0.clone();
                for v in p.values.iter_mut() {
                    *v *= 1.0 - t;
                }
                Snapshot {
                    time: t,
                    energy: reduced_energy(&p, n),
                    dhdt: h0.values.iter().map(|v| -v).collect(),
                    profile: p,
                    dissipation: 0.0,
                    remesh_jump: 0.0,
                    max_grad: 0.0,
                    max_grad_at: 0.0,
                    dt: 0.0,
                    step: i,
                }
            })
            .collect();
        FlowTrajectory {
            n,
            snapshots,
            status: FlowStatus::MaxTime,
            steps,
            rejected_steps: 0,
            max_step_increase: 0.0,
            remeshes: Vec::new(),
            final_dt: 0.0,
        }
    }

    #[test]
    fn forced_trajectory_bookkeeping_matches_closed_form() {
        let n = 3;
        let h0 = RadialProfile::from_fn(DomainKind::FlatBall, 4096, 1.0, |r| (PI * r).sin()).unwrap();
        let traj = synthetic(&h0, n, 10);
        let rep = dissipation_check(&traj, None).unwrap();
        // Independent quadrature of ∫|∂_t u|² = |S²| ∫ sin²(πρ) ρ² dρ.
        let (x, w) = crate::equivariant_flow::gauss_legendre(40);
        let rate: f64 = sphere_area(2)
            * x.iter()
                .zip(&w)
                .map(|(x, w)| {
                    let r = 0.5 * (1.0 + x);
                    0.5 * w * (PI * r).sin().powi(2) * r * r
                })
                .sum::<f64>();
        for (k, s) in traj.snapshots.iter().enumerate() {
            let expect = traj.snapshots[0].energy - s.energy - rate * s.time;
            assert!((rep.quadrature_residuals[k] - expect).abs() < 1e-6 * rate, "{k}");
        }
    }

    #[test]
    fn dissipation_needs_two_snapshots() {
        let h0 = constant_ball(8);
        let mut traj = synthetic(&h0, 3, 1);
        traj.snapshots.truncate(1);
        assert!(matches!(dissipation_check(&traj, None), Err(Error::Contract(_))));
    }

    #[test]
    fn small_flow_closes_the_energy_books() {
        let cfg = FlowConfig {
            k: 128,
            max_time: 0.05,
            ..Default::default()
        };
        let p = crate::equivariant_flow::small_amplitude(128, 0.1).unwrap();
        let (traj, _) = run(&p, &cfg).unwrap();
        let rep = dissipation_check(&traj, None).unwrap();
        assert!(traj.snapshots.len() >= 2);
        assert!(!rep.violated, "{}", rep.max_abs_residual());
        assert!(rep.max_increase <= 0.0);
        assert!(traj.last().dissipation > 0.0);
    }

    #[test]
    fn pohozaev_identity_for_bubbles_is_second_order() {
        for n in [2usize, 3, 4] {
            let res: Vec<f64> = [256usize, 512, 1024]
                .iter()
                .map(|&k| {
                    let p = bubble(DomainKind::FlatBall, k, 4.0, 1.0).unwrap();
                    pohozaev_balance(&p, n, 2.0, 0.0).unwrap().identity_residual.abs()
                })
                .collect();
            assert!(slope(&res) >= 1.8, "n={n} {res:?}");
        }
    }

    #[test]
    fn pohozaev_boundary_terms_match_closed_form() {
        // For 2 arctan ρ: h′ = sin h / ρ, so |∇u|² = n h′² and |∇_T u|² = (n−1) h′².
        let n = 3;
        let p = bubble(DomainKind::FlatBall, 2048, 4.0, 1.0).unwrap();
        let r = 0.75;
        let rep = pohozaev_balance(&p, n, r, 0.0).unwrap();
        let hp = 2.0 / (1.0 + r * r);
        let area = sphere_area(2) * r * r;
        assert!((rep.lhs - area * (3.0 * hp * hp).powf(1.5)).abs() < 1e-5 * rep.lhs);
        assert!((rep.rhs_tangential - area * (2.0 * hp * hp).powf(1.5)).abs() < 1e-5 * rep.lhs);
        assert!(rep.rhs_tension < 1e-4 * rep.lhs);
        assert!(pohozaev_balance(&p, n, 5.0, 0.0).is_err());
        let sphere = crate::equivariant_flow::small_amplitude(64, 0.1).unwrap();
        assert!(pohozaev_balance(&sphere, n, 0.5, 0.0).is_err());
    }

    #[test]
    fn oscillation_ratio_is_stable_over_scaled_bubbles() {
        let ratios: Vec<f64> = [4.0, 8.0, 16.0]
            .iter()
            .map(|&l| {
                let p = bubble(DomainKind::FlatBall, 2048, 1.0, l).unwrap();
                let o = oscillation_bound_check(&p, 3, 1.0, 1.0, 0.0).unwrap();
                assert!(o.in_regime);
                o.ratio()
            })
            .collect();
        let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |a, &r| (a.0.min(r), a.1.max(r)));
        assert!(hi / lo < 3.0, "{ratios:?}");
    }

    #[test]
    fn oscillation_vanishes_on_small_balls() {
        let p = bubble(DomainKind::FlatBall, 2048, 1.0, 0.5).unwrap();
        let l: Vec<f64> = [0.5, 0.1, 0.01]
            .iter()
            .map(|&r| oscillation_bound_check(&p, 3, r, 1e9, 0.0).unwrap().lhs)
            .collect();
        assert!(l[0] > l[1] && l[1] > l[2] && l[2] < 0.05);
        let out = oscillation_bound_check(&p, 3, 1.0, 1e-6, 0.0).unwrap();
        assert!(!out.in_regime && out.rhs > 0.0);
    }

    #[test]
    fn dyadic_annuli_partition_the_region() {
        let p = bubble(DomainKind::FlatBall, 2048, 1.0, 0.05).unwrap();
        let ns = annulus_energies(&p, 3, (1, 8), 0.5).unwrap();
        let total: f64 = ns.rows.iter().map(|r| r.energy).sum();
        let direct = ball_energy(&p, 3, 2f64.powf(-0.5)) - ball_energy(&p, 3, 2f64.powf(-8.5));
        assert!((total - direct).abs() < 1e-10 * direct);
        for r in &ns.rows {
            assert!((r.derivative - r.derivative_boundary).abs() < 1e-6 * r.derivative_boundary);
        }
        assert_eq!(ns.skipped, Vec::<i32>::new());
        assert!(annulus_energies(&p, 3, (0, 0), 0.5).unwrap().skipped == vec![0]);
        assert!((ns.lambda_n - 0.75 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn dyadic_energies_decay_inside_the_bubble_scale() {
        let p = bubble(DomainKind::FlatBall, 4096, 1.0, 1e-2).unwrap();
        let ns = annulus_energies(&p, 3, (12, 16), 0.5).unwrap();
        for w in ns.rows.windows(2) {
            let q = w[1].energy / w[0].energy;
            assert!(q > 0.1 && q < 0.15, "{q}");
        }
    }

    #[test]
    fn comparison_map_endpoints_and_harmonicity() {
        let p = bubble(DomainKind::FlatBall, 2048, 1.0, 0.05).unwrap();
        assert!(radial_comparison_map(&p, 3, 2, 0.0, 8, 10).is_err());
        assert!(radial_comparison_map(&p, 3, 2, 0.5, 4, 10).is_err());
        let mut sup = Vec::new();
        for k in [32usize, 64, 128] {
            let cm = radial_comparison_map(&p, 3, 2, 0.5, 8, k + 1).unwrap();
            assert_eq!(cm.values[0], cm.avg_inner);
            assert!(cm.eval(cm.r_outer).iter().zip(&cm.avg_outer).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!(cm.eval(cm.r_inner).iter().zip(&cm.avg_inner).all(|(a, b)| (a - b).abs() < 1e-12));
            let (h, _) = interpolant(&p, cm.r_inner);
            assert!((cm.avg_inner[3] - h.cos()).abs() < 1e-12);
            let lap = radial_n_laplacian(&cm.grid, &cm.values, 3);
            sup.push(lap.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs())));
        }
        assert!(slope(&sup) >= 1.8, "{sup:?}");
    }

    #[test]
    fn equal_edge_averages_give_a_constant_map() {
        let p = RadialProfile::from_fn(DomainKind::FlatBall, 256, 1.0, |r| 0.7 * r.min(0.1) / 0.1).unwrap();
        let cm = radial_comparison_map(&p, 2, 2, 0.3, 8, 16).unwrap();
        for v in &cm.values {
            assert!(v.iter().zip(&cm.values[0]).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn identity_regularity_integrals_converge() {
        let eval = |k| {
            let p = RadialProfile::from_fn(DomainKind::SpherePolar, k, PI, |r| r).unwrap();
            regularity_integrals(&p, 3)
        };
        let (a, b) = (eval(1024), eval(2048));
        assert!(a.0.is_finite() && a.1.is_finite());
        assert!((a.0 - b.0).abs() < 1e-2 * b.0 && (a.1 - b.1).abs() < 1e-2 * b.1);
        // |∇ id|^{2n} = 3³ on S³.
        assert!((b.1 - 27.0 * sphere_area(3)).abs() < 1e-6 * b.1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn annulus_energy_grows_with_t(lam in 0.01f64..0.5, j in 1i32..6, t in 0.05f64..0.45) {
            let p = bubble(DomainKind::FlatBall, 512, 1.0, lam).unwrap();
            let a = annulus_energy(&p, 3, j, t);
            let b = annulus_energy(&p, 3, j, t + 0.05);
            prop_assert!(a >= 0.0);
            prop_assert!(b >= a);
        }
    }
}
