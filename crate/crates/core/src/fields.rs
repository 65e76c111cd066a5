//! Discrete maps: radial (corotational) profiles and tensor-grid maps into a
//! sphere or torus target, with gradients, quadrature and oscillation.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::equivariant_flow;
use crate::error::{domain, Error, Result};
use crate::manifold::{
    cover_distance, euclidean_distance, reduce_unit, wrap_step, SphereTarget, TorusTarget,
    LIFT_STEP_LIMIT,
};

/// Area of the unit sphere `S^k ⊂ R^{k+1}`.
pub fn sphere_area(k: usize) -> f64 {
    match k {
        0 => 2.0,
        1 => 2.0 * PI,
        _ => 2.0 * PI / (k as f64 - 1.0) * sphere_area(k - 2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    SpherePolar,
    FlatBall,
}

impl DomainKind {
    /// Warping function of the polar metric `dρ² + w(ρ)² g_{S^{n-1}}`.
    pub fn w(self, rho: f64) -> f64 {
        match self {
            DomainKind::SpherePolar => rho.sin(),
            DomainKind::FlatBall => rho,
        }
    }

    pub fn w_prime(self, rho: f64) -> f64 {
        match self {
            DomainKind::SpherePolar => rho.cos(),
            DomainKind::FlatBall => 1.0,
        }
    }

    pub fn default_radius(self) -> f64 {
        match self {
            DomainKind::SpherePolar => PI,
            DomainKind::FlatBall => 1.0,
        }
    }
}

/// Polar-angle profile `h(ρ)` of a corotational map
/// `u(ρ, θ) = (sin h(ρ) Θ(θ), cos h(ρ))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    pub kind: DomainKind,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl RadialProfile {
    pub fn new(kind: DomainKind, grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid.len() != values.len() {
            return domain("profile needs at least two nodes and matching value count");
        }
        if grid[0] != 0.0 {
            return domain("profile grid must start at rho = 0");
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return domain("profile grid must be strictly increasing");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("profile values must be finite");
        }
        if values[0] != 0.0 {
            return domain("profile must satisfy h(0) = 0");
        }
        if kind == DomainKind::SpherePolar && (grid[grid.len() - 1] - PI).abs() > 1e-12 {
            return domain("sphere_polar profiles end at rho = pi");
        }
        Ok(Self { kind, grid, values })
    }

    /// Uniform grid with `k` cells on `[0, radius]`, sampling `f`.
    /// `h(0)` is forced to 0.
    pub fn from_fn(kind: DomainKind, k: usize, radius: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        if k == 0 {
            return domain("empty grid");
        }
        let grid = uniform_grid(k, radius);
        Self::sample(kind, grid, f)
    }

    /// Sample `f` on a given grid; endpoints are taken exactly from the grid.
    pub fn sample(kind: DomainKind, grid: Vec<f64>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut values: Vec<f64> = grid.iter().map(|&r| f(r)).collect();
        values[0] = 0.0;
        Self::new(kind, grid, values)
    }

    pub fn cells(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn radius(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    /// Boundary value `b = h(R)`.
    pub fn boundary(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn min_spacing(&self) -> f64 {
        self.grid
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    /// Nodal derivative by the (nonuniform) three-point formula, one-sided at the ends.
    pub fn derivative(&self) -> Vec<f64> {
        nodal_derivative(&self.grid, &self.values)
    }

    /// Monotone cubic (PCHIP) interpolant evaluated at `rho`; clamps outside the grid.
    pub fn interpolate(&self, rho: f64) -> f64 {
        pchip_eval(&self.grid, &self.values, &pchip_slopes(&self.grid, &self.values), rho)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rho", "h"])?;
        for (r, h) in self.grid.iter().zip(&self.values) {
            w.write_record([fmt_f64(*r), fmt_f64(*h)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, kind: DomainKind) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let (mut grid, mut values) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Domain(format!("bad number {s:?}: {e}")))
            };
            grid.push(parse(&rec[0])?);
            values.push(parse(&rec[1])?);
        }
        Self::new(kind, grid, values)
    }
}

/// Shortest round-trip decimal representation, used by every CSV writer.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

pub fn uniform_grid(k: usize, radius: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=k).map(|i| radius * i as f64 / k as f64).collect();
    g[k] = radius;
    g
}

pub fn nodal_derivative(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n];
    if n < 3 {
        let s = (y[n - 1] - y[0]) / (x[n - 1] - x[0]);
        return vec![s; n];
    }
    for i in 1..n - 1 {
        d[i] = three_point(x[i - 1], x[i], x[i + 1], y[i - 1], y[i], y[i + 1]);
    }
    d[0] = one_sided(x[0], x[1], x[2], y[0], y[1], y[2]);
    d[n - 1] = -one_sided(-x[n - 1], -x[n - 2], -x[n - 3], y[n - 1], y[n - 2], y[n - 3]);
    d
}

/// Centered derivative at `x1` for a nonuniform stencil.
pub fn three_point(x0: f64, x1: f64, x2: f64, y0: f64, y1: f64, y2: f64) -> f64 {
    let (a, b) = (x1 - x0, x2 - x1);
    -b / (a * (a + b)) * y0 + (b - a) / (a * b) * y1 + a / (b * (a + b)) * y2
}

/// Second-order one-sided derivative at `x0` from `x0 < x1 < x2`.
pub fn one_sided(x0: f64, x1: f64, x2: f64, y0: f64, y1: f64, y2: f64) -> f64 {
    let (a, b) = (x1 - x0, x2 - x1);
    -(2.0 * a + b) / (a * (a + b)) * y0 + (a + b) / (a * b) * y1 - a / (b * (a + b)) * y2
}

/// Fritsch–Carlson slopes for monotone cubic interpolation.
pub fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    if n == 2 {
        return vec![del[0]; 2];
    }
    for i in 1..n - 1 {
        if del[i - 1] * del[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    d[0] = end(h[0], h[1], del[0], del[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    d
}

pub fn pchip_eval(x: &[f64], y: &[f64], d: &[f64], q: f64) -> f64 {
    let n = x.len();
    if q <= x[0] {
        return y[0];
    }
    if q >= x[n - 1] {
        return y[n - 1];
    }
    let i = x.partition_point(|&v| v <= q).saturating_sub(1).min(n - 2);
    let h = x[i + 1] - x[i];
    let t = (q - x[i]) / h;
    let (t2, t3) = (t * t, t * t * t);
    (2.0 * t3 - 3.0 * t2 + 1.0) * y[i]
        + (t3 - 2.0 * t2 + t) * h * d[i]
        + (-2.0 * t3 + 3.0 * t2) * y[i + 1]
        + (t3 - t2) * h * d[i + 1]
}

/// Energy of a field together with the density samples it was integrated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub n: usize,
    pub total_energy: f64,
    /// `|∇u|^n / n` at the quadrature points.
    pub density: Vec<f64>,
    /// Quadrature weights (volume element included); `total = Σ weight·density`.
    pub weights: Vec<f64>,
    /// `∫|∇(|∇u|^{(n-2)/2} ∇u)|²`, when available.
    pub hessian_term: Option<f64>,
    /// `∫|∇u|^{2n}`, when available.
    pub grad_2n: Option<f64>,
}

impl EnergyReport {
    pub fn from_parts(n: usize, density: Vec<f64>, weights: Vec<f64>) -> Self {
        let total_energy = density.iter().zip(&weights).map(|(d, w)| d * w).sum();
        Self {
            n,
            total_energy,
            density,
            weights,
            hessian_term: None,
            grad_2n: None,
        }
    }

    /// Relative mismatch between `total_energy` and the weighted density sum.
    pub fn consistency_error(&self) -> f64 {
        let s: f64 = self.density.iter().zip(&self.weights).map(|(d, w)| d * w).sum();
        (s - self.total_energy).abs() / self.total_energy.abs().max(1e-300)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Energy of a radial profile by the reduced corotational density.
pub fn profile_energy(profile: &RadialProfile, n: usize) -> Result<EnergyReport> {
    equivariant_flow::reduced_energy_report(profile, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chart {
    /// Hyperspherical angles `(φ_1, …, φ_n)` on `S^n`; `φ_1` is the polar
    /// angle from the north pole, `φ_n` is periodic.
    Sphere,
    /// Flat box with the Euclidean metric.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub nodes: Vec<f64>,
    /// Period for a periodic axis; the nodes then cover one period without repetition.
    pub period: Option<f64>,
}

impl Axis {
    pub fn closed(nodes: Vec<f64>) -> Self {
        Self { nodes, period: None }
    }

    pub fn periodic(count: usize, period: f64) -> Self {
        let nodes = (0..count).map(|i| period * i as f64 / count as f64).collect();
        Self {
            nodes,
            period: Some(period),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trapezoid weight of node `i`.
    fn weight(&self, i: usize) -> f64 {
        let n = self.nodes.len();
        match self.period {
            Some(p) => p / n as f64,
            None => {
                let left = if i > 0 { self.nodes[i] - self.nodes[i - 1] } else { 0.0 };
                let right = if i + 1 < n { self.nodes[i + 1] - self.nodes[i] } else { 0.0 };
                0.5 * (left + right)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Sphere(SphereTarget),
    Torus(TorusTarget),
}

/// A map from a tensor-product grid into a sphere or a torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub chart: Chart,
    pub axes: Vec<Axis>,
    pub target: Target,
    /// One value per node, row-major with axis 0 slowest.
    pub values: Vec<Vec<f64>>,
    /// Cover values for torus maps, once lifted.
    pub lift: Option<Vec<Vec<f64>>>,
}

impl GridMap {
    pub fn new(chart: Chart, axes: Vec<Axis>, target: Target, values: Vec<Vec<f64>>) -> Result<Self> {
        let count: usize = axes.iter().map(Axis::len).product();
        if axes.is_empty() || count == 0 || values.len() != count {
            return domain("grid map value count does not match its axes");
        }
        for a in &axes {
            if a.period.is_none() && a.len() < 3 {
                return domain("non-periodic axes need at least three nodes");
            }
            if a.nodes.windows(2).any(|w| !(w[1] > w[0])) {
                return domain("axis nodes must be strictly increasing");
            }
        }
        let mut values = values;
        match target {
            Target::Sphere(s) => {
                for v in &values {
                    if !s.contains(v) {
                        return domain("sphere-valued grid map has a non-unit value");
                    }
                }
            }
            Target::Torus(t) => {
                for v in values.iter_mut() {
                    if v.len() != t.dim_m {
                        return domain("torus value has the wrong dimension");
                    }
                    *v = t.project(v);
                }
            }
        }
        Ok(Self {
            chart,
            axes,
            target,
            values,
            lift: None,
        })
    }

    /// Sphere chart on `S^n`: `polar` nodes for `φ_1` on `[0, π]`, `mid`
    /// uniform nodes on `[0, π]` for `φ_2..φ_{n-1}`, and `2(mid-1)` periodic
    /// nodes for `φ_n`.
    pub fn sphere_axes(n: usize, polar: Vec<f64>, mid: usize) -> Vec<Axis> {
        let mut axes = Vec::with_capacity(n);
        if n == 1 {
            axes.push(Axis::periodic(polar.len(), 2.0 * PI));
            return axes;
        }
        axes.push(Axis::closed(polar));
        for _ in 1..n - 1 {
            axes.push(Axis::closed(uniform_grid(mid - 1, PI)));
        }
        axes.push(Axis::periodic(2 * (mid - 1), 2.0 * PI));
        axes
    }

    pub fn from_fn(
        chart: Chart,
        axes: Vec<Axis>,
        target: Target,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let count: usize = axes.iter().map(Axis::len).product();
        let mut values = Vec::with_capacity(count);
        let mut c = vec![0.0; axes.len()];
        for i in 0..count {
            coords_into(&axes, i, &mut c);
            values.push(f(&c));
        }
        Self::new(chart, axes, target, values)
    }

    /// Corotational map `(sin h(φ_1) Θ, cos h(φ_1))` on the sphere chart
    /// whose polar nodes are the profile grid.
    pub fn from_profile(profile: &RadialProfile, n: usize, mid: usize) -> Result<Self> {
        if profile.kind != DomainKind::SpherePolar || n < 2 {
            return domain("corotational grid maps need a sphere_polar profile and n >= 2");
        }
        let axes = Self::sphere_axes(n, profile.grid.clone(), mid);
        let polar = profile.grid.clone();
        let vals = profile.values.clone();
        Self::from_fn(
            Chart::Sphere,
            axes,
            Target::Sphere(SphereTarget::new(n)?),
            move |c| {
                let k = polar.partition_point(|&x| x < c[0]).min(polar.len() - 1);
                let h = vals[k];
                let mut theta = sphere_embed(&c[1..]);
                for x in theta.iter_mut() {
                    *x *= h.sin();
                }
                theta.push(h.cos());
                fix_norm(theta)
            },
        )
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn multi_index(&self, i: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        let mut r = i;
        for (j, a) in self.axes.iter().enumerate().rev() {
            idx[j] = r % a.len();
            r /= a.len();
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (&k, a)| acc * a.len() + k)
    }

    pub fn coords(&self, i: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.axes.len()];
        coords_into(&self.axes, i, &mut c);
        c
    }

    /// Point of the domain sphere for a sphere chart, or the coordinates themselves.
    pub fn domain_point(&self, i: usize) -> Vec<f64> {
        let c = self.coords(i);
        match self.chart {
            Chart::Sphere => sphere_embed(&c),
            Chart::Flat => c,
        }
    }

    /// Neighbour of node `i` along `axis` at offset `off`, if it exists.
    pub fn neighbor(&self, i: usize, axis: usize, off: isize) -> Option<usize> {
        let mut idx = self.multi_index(i);
        let a = &self.axes[axis];
        let k = idx[axis] as isize + off;
        let len = a.len() as isize;
        idx[axis] = if a.period.is_some() {
            k.rem_euclid(len) as usize
        } else if (0..len).contains(&k) {
            k as usize
        } else {
            return None;
        };
        Some(self.flat_index(&idx))
    }

    /// Diagonal inverse metric `g^{jj}` at a node; `None` where the chart degenerates.
    pub fn inverse_metric(&self, c: &[f64]) -> Option<Vec<f64>> {
        match self.chart {
            Chart::Flat => Some(vec![1.0; c.len()]),
            Chart::Sphere => {
                let mut g = Vec::with_capacity(c.len());
                let mut prod = 1.0;
                for (j, &phi) in c.iter().enumerate() {
                    g.push(1.0 / prod);
                    if j + 1 < c.len() {
                        let s = phi.sin();
                        // Only the chart poles are singular; tiny polar angles
                        // near 0 are resolved down to underflow.
                        let singular = if phi > 1.0 { s.abs() < 1e-14 } else { s.abs() < 1e-150 };
                        if singular {
                            return None;
                        }
                        prod *= s * s;
                    }
                }
                Some(g)
            }
        }
    }

    /// Volume element `√|g|` at the node.
    pub fn volume_element(&self, i: usize) -> f64 {
        match self.chart {
            Chart::Flat => 1.0,
            Chart::Sphere => {
                let c = self.coords(i);
                let n = c.len();
                (0..n.saturating_sub(1))
                    .map(|j| c[j].sin().abs().powi((n - 1 - j) as i32))
                    .product()
            }
        }
    }

    pub fn quadrature_weight(&self, i: usize) -> f64 {
        let idx = self.multi_index(i);
        let w: f64 = idx
            .iter()
            .zip(&self.axes)
            .map(|(&k, a)| a.weight(k))
            .product();
        w * self.volume_element(i)
    }

    /// Component values used for differentiation (the lift for lifted torus maps).
    fn diff_values(&self) -> &[Vec<f64>] {
        self.lift.as_deref().unwrap_or(&self.values)
    }

    fn value_difference(&self, a: usize, b: usize) -> Vec<f64> {
        let v = self.diff_values();
        match (self.target, &self.lift) {
            (Target::Torus(_), None) => v[b].iter().zip(&v[a]).map(|(x, y)| wrap_step(x - y)).collect(),
            _ => v[b].iter().zip(&v[a]).map(|(x, y)| x - y).collect(),
        }
    }

    /// Coordinate derivative `∂_j u` at node `i`.
    pub fn partial(&self, i: usize, axis: usize) -> Vec<f64> {
        let a = &self.axes[axis];
        let idx = self.multi_index(i)[axis];
        let x = |k: isize| -> f64 {
            let len = a.len() as isize;
            let kk = k.rem_euclid(len) as usize;
            let wraps = k.div_euclid(len) as f64;
            a.nodes[kk] + wraps * a.period.unwrap_or(0.0)
        };
        let k = idx as isize;
        let m = self.values[0].len();
        let combine = |offs: [isize; 3], xs: [f64; 3], centered: bool| -> Vec<f64> {
            let n0 = self.neighbor(i, axis, offs[0] - k).unwrap();
            let n2 = self.neighbor(i, axis, offs[2] - k).unwrap();
            let n1 = self.neighbor(i, axis, offs[1] - k).unwrap();
            let base = if centered { n1 } else { n0 };
            let d0 = self.value_difference(base, n0);
            let d1 = self.value_difference(base, n1);
            let d2 = self.value_difference(base, n2);
            (0..m)
                .map(|c| {
                    if centered {
                        three_point(xs[0], xs[1], xs[2], d0[c], d1[c], d2[c])
                    } else {
                        one_sided(xs[0], xs[1], xs[2], d0[c], d1[c], d2[c])
                    }
                })
                .collect()
        };
        let len = a.len();
        if a.period.is_some() || (idx > 0 && idx + 1 < len) {
            combine([k - 1, k, k + 1], [x(k - 1), x(k), x(k + 1)], true)
        } else if idx == 0 {
            combine([k, k + 1, k + 2], [x(k), x(k + 1), x(k + 2)], false)
        } else {
            let d = combine([k, k - 1, k - 2], [-x(k), -x(k - 1), -x(k - 2)], false);
            d.into_iter().map(|v| -v).collect()
        }
    }

    /// `|∇u|²` at a node. Degenerate chart points (poles) use linear
    /// extrapolation along the first degenerate axis.
    pub fn gradient_sq(&self, i: usize) -> f64 {
        let c = self.coords(i);
        match self.inverse_metric(&c) {
            Some(g) => (0..self.dim())
                .map(|j| {
                    let d = self.partial(i, j);
                    g[j] * d.iter().map(|x| x * x).sum::<f64>()
                })
                .sum(),
            None => {
                let axis = (0..self.dim() - 1)
                    .find(|&j| {
                        let s = c[j].sin().abs();
                        if c[j] > 1.0 { s < 1e-14 } else { s < 1e-150 }
                    })
                    .expect("degenerate node has a vanishing sine");
                let idx = self.multi_index(i)[axis];
                let dir = if idx == 0 { 1 } else { -1 };
                let a = self.neighbor(i, axis, dir).unwrap();
                let b = self.neighbor(i, axis, 2 * dir).unwrap();
                let (x0, x1, x2) = (
                    c[axis],
                    self.coords(a)[axis],
                    self.coords(b)[axis],
                );
                let (ga, gb) = (self.gradient_sq(a), self.gradient_sq(b));
                ga + (gb - ga) * (x0 - x1) / (x2 - x1)
            }
        }
    }

    /// Metric gradient norm `|∇u| = (Σ g^{ij} ∂_i u·∂_j u)^{1/2}` at a node.
    pub fn gradient_norm(&self, i: usize) -> f64 {
        self.gradient_sq(i).max(0.0).sqrt()
    }

    /// n-energy by trapezoid quadrature; `n` is the domain dimension.
    pub fn n_energy(&self) -> EnergyReport {
        let n = self.dim();
        let density: Vec<f64> = (0..self.len())
            .map(|i| self.gradient_sq(i).max(0.0).powf(n as f64 / 2.0) / n as f64)
            .collect();
        let weights: Vec<f64> = (0..self.len()).map(|i| self.quadrature_weight(i)).collect();
        let mut rep = EnergyReport::from_parts(n, density, weights);
        let g2n: f64 = rep
            .density
            .iter()
            .zip(&rep.weights)
            .map(|(d, w)| (n as f64 * d).powi(2) * w)
            .sum();
        rep.grad_2n = Some(g2n);
        rep
    }

    /// Target distance used by oscillation: chordal for spheres, cover distance
    /// after lifting for torus maps (wrapped flat distance if no lift is stored).
    pub fn value_distance(&self, a: usize, b: usize) -> f64 {
        match (self.target, &self.lift) {
            (Target::Sphere(_), _) => euclidean_distance(&self.values[a], &self.values[b]),
            (Target::Torus(_), Some(l)) => cover_distance(&l[a], &l[b]),
            (Target::Torus(t), None) => t.distance(&self.values[a], &self.values[b]),
        }
    }

    /// Exact diameter of the value set over the given nodes.
    pub fn oscillation(&self, region: &[usize]) -> f64 {
        let pts: Vec<&Vec<f64>> = match (self.target, &self.lift) {
            (Target::Torus(_), Some(l)) => region.iter().map(|&i| &l[i]).collect(),
            (Target::Sphere(_), _) => region.iter().map(|&i| &self.values[i]).collect(),
            (Target::Torus(_), None) => {
                let mut best = 0.0f64;
                for (k, &a) in region.iter().enumerate() {
                    for &b in &region[k + 1..] {
                        best = best.max(self.value_distance(a, b));
                    }
                }
                return best;
            }
        };
        point_set_diameter(&pts)
    }

    /// Nodes satisfying a predicate on their coordinates.
    pub fn region_where(&self, pred: impl Fn(&[f64]) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| pred(&self.coords(i))).collect()
    }

    /// Lift a torus map to the cover by breadth-first continuation from `root`
    /// across grid edges. Every edge (tree or not) must satisfy the continuation
    /// condition and agree with the lift.
    pub fn lift_bfs(&mut self, root: usize) -> Result<()> {
        let Target::Torus(_) = self.target else {
            return domain("only torus maps can be lifted");
        };
        let n = self.len();
        let mut lift: Vec<Option<Vec<f64>>> = vec![None; n];
        lift[root] = Some(self.values[root].iter().map(|&x| reduce_unit(x)).collect());
        let mut queue = VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            let li = lift[i].clone().unwrap();
            for axis in 0..self.dim() {
                for off in [-1isize, 1] {
                    let Some(j) = self.neighbor(i, axis, off) else { continue };
                    let mut lj = Vec::with_capacity(li.len());
                    for c in 0..li.len() {
                        let step = wrap_step(self.values[j][c] - self.values[i][c]);
                        if step.abs() >= LIFT_STEP_LIMIT {
                            return Err(Error::LiftAmbiguity { from: i, to: j, step });
                        }
                        lj.push(li[c] + step);
                    }
                    match &lift[j] {
                        None => {
                            lift[j] = Some(lj);
                            queue.push_back(j);
                        }
                        Some(existing) => {
                            if cover_distance(existing, &lj) > 1e-9 {
                                return domain(format!(
                                    "lift is not single-valued around edge {i} -> {j}"
                                ));
                            }
                        }
                    }
                }
            }
        }
        self.lift = Some(lift.into_iter().map(|v| v.expect("grid graph is connected")).collect());
        Ok(())
    }

    /// CSV with one row per node: coordinates, then values, then lift if present.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let m = self.values[0].len();
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x{j}")).collect();
        header.extend((1..=m).map(|j| format!("u{j}")));
        if self.lift.is_some() {
            header.extend((1..=m).map(|j| format!("lift{j}")));
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.coords(i).into_iter().map(fmt_f64).collect();
            row.extend(self.values[i].iter().map(|&x| fmt_f64(x)));
            if let Some(l) = &self.lift {
                row.extend(l[i].iter().map(|&x| fmt_f64(x)));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn coords_into(axes: &[Axis], i: usize, out: &mut [f64]) {
    let mut r = i;
    for (j, a) in axes.iter().enumerate().rev() {
        out[j] = a.nodes[r % a.len()];
        r /= a.len();
    }
}

/// Embedding of hyperspherical angles `(φ_1, …, φ_k)` into `S^k ⊂ R^{k+1}`:
/// the last coordinate is `cos φ_1`.
pub fn sphere_embed(angles: &[f64]) -> Vec<f64> {
    let k = angles.len();
    if k == 0 {
        return vec![1.0];
    }
    let mut x = vec![0.0; k + 1];
    let mut s = 1.0;
    for (j, &phi) in angles.iter().enumerate() {
        let slot = k - j;
        if j + 1 == k {
            x[1] = s * phi.cos();
            x[0] = s * phi.sin();
        } else {
            x[slot] = s * phi.cos();
            s *= phi.sin();
        }
    }
    x
}

fn fix_norm(v: Vec<f64>) -> Vec<f64> {
    let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / r).collect()
}

/// Exact diameter of a finite point set. Duplicates are removed first and the
/// pairwise search is pruned with a bounding-box bound.
pub fn point_set_diameter(pts: &[&Vec<f64>]) -> f64 {
    let mut uniq: Vec<&Vec<f64>> = Vec::with_capacity(pts.len());
    {
        let mut keys: Vec<(Vec<i64>, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().map(|x| (x * 1e12).round() as i64).collect(), i))
            .collect();
        keys.sort();
        keys.dedup_by(|a, b| a.0 == b.0);
        uniq.extend(keys.iter().map(|(_, i)| pts[*i]));
    }
    if uniq.len() < 2 {
        return 0.0;
    }
    let dim = uniq[0].len();
    let center: Vec<f64> = (0..dim)
        .map(|c| uniq.iter().map(|p| p[c]).sum::<f64>() / uniq.len() as f64)
        .collect();
    // Sort by distance from the centroid; d(p,q) ≤ r_p + r_q prunes the search.
    let mut order: Vec<(f64, &Vec<f64>)> = uniq
        .iter()
        .map(|p| (euclidean_distance(p, &center), *p))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = 0.0f64;
    for i in 0..order.len() {
        if 2.0 * order[i].0 <= best {
            break;
        }
        for j in i + 1..order.len() {
            if order[i].0 + order[j].0 <= best {
                break;
            }
            best = best.max(euclidean_distance(order[i].1, order[j].1));
        }
    }
    best
}

/// Chordal oscillation of a corotational map over `ρ ∈ [lo, hi]`.
///
/// The image of the shell at radius ρ is the latitude sphere at polar angle
/// `h(ρ)`; two latitude spheres are at chordal distance at most
/// `√(2 − 2cos h₁ cos h₂ + 2|sin h₁ sin h₂|)`.
pub fn profile_oscillation(grid: &[f64], values: &[f64], lo: f64, hi: f64) -> f64 {
    let hs: Vec<f64> = grid
        .iter()
        .zip(values)
        .filter(|(r, _)| **r >= lo && **r <= hi)
        .map(|(_, h)| *h)
        .collect();
    latitude_diameter(&hs)
}

pub fn latitude_diameter(hs: &[f64]) -> f64 {
    // Points of S^n as (cos h, |sin h|) in the meridian half-plane; the diameter
    // pairs a point with the reflection of another across the axis.
    let pts: Vec<(f64, f64)> = hs.iter().map(|h| (h.cos(), h.sin().abs())).collect();
    let mut best = 0.0f64;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i..] {
            let d2 = (a.0 - b.0).powi(2) + (a.1 + b.1).powi(2);
            best = best.max(d2);
        }
    }
    best.sqrt()
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::norm;
    use proptest::prelude::*;

    #[test]
    fn sphere_areas() {
        assert!((sphere_area(1) - 2.0 * PI).abs() < 1e-14);
        assert!((sphere_area(2) - 4.0 * PI).abs() < 1e-13);
        assert!((sphere_area(3) - 2.0 * PI * PI).abs() < 1e-13);
        assert!((sphere_area(4) - 8.0 * PI * PI / 3.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_is_unit_and_polar() {
        let x = sphere_embed(&[0.0, 1.0, 2.0]);
        assert_eq!(x[3], 1.0);
        let y = sphere_embed(&[0.3, 1.1, 2.2]);
        assert!((norm(&y) - 1.0).abs() < 1e-15);
        assert!((y[3] - 0.3f64.cos()).abs() < 1e-15);
    }

    fn identity_map(n: usize, k: usize) -> GridMap {
        let axes = GridMap::sphere_axes(n, uniform_grid(k, PI), k + 1);
        GridMap::from_fn(Chart::Sphere, axes, Target::Sphere(SphereTarget::new(n).unwrap()), sphere_embed)
            .unwrap()
    }

    #[test]
    fn constant_map_has_zero_gradient() {
        let axes = GridMap::sphere_axes(2, uniform_grid(8, PI), 9);
        let m = GridMap::from_fn(Chart::Sphere, axes, Target::Sphere(SphereTarget::new(2).unwrap()), |_| {
            vec![0.0, 0.0, 1.0]
        })
        .unwrap();
        assert!((0..m.len()).all(|i| m.gradient_norm(i) == 0.0));
        assert_eq!(m.n_energy().total_energy, 0.0);
        let all: Vec<usize> = (0..m.len()).collect();
        assert_eq!(m.oscillation(&all), 0.0);
    }

    #[test]
    fn identity_gradient_converges_at_second_order() {
        let mut errs = Vec::new();
        for k in [8, 16, 32] {
            let m = identity_map(2, k);
            let e = (0..m.len())
                .map(|i| (m.gradient_norm(i) - 2f64.sqrt()).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() > 1.8, "{errs:?}");
        }
        let e3: Vec<f64> = [8, 16]
            .iter()
            .map(|&k| {
                let m = identity_map(3, k);
                (0..m.len())
                    .map(|i| (m.gradient_sq(i) - 3.0).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!((e3[0] / e3[1]).log2() > 1.8, "{e3:?}");
    }

    #[test]
    fn linear_torus_map_has_unit_gradient() {
        let axes = vec![Axis::periodic(16, 1.0), Axis::periodic(16, 1.0)];
        let t = TorusTarget::new(3).unwrap();
        let m = GridMap::from_fn(Chart::Flat, axes, Target::Torus(t), |x| vec![x[0], 0.0, 0.0]).unwrap();
        for i in 0..m.len() {
            assert!((m.gradient_norm(i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hemisphere_has_chordal_diameter_two() {
        let axes = GridMap::sphere_axes(2, uniform_grid(8, PI / 2.0), 9);
        let m = GridMap::from_fn(Chart::Sphere, axes, Target::Sphere(SphereTarget::new(2).unwrap()), sphere_embed)
            .unwrap();
        let all: Vec<usize> = (0..m.len()).collect();
        let mut brute = 0.0f64;
        for a in 0..m.len() {
            for b in 0..m.len() {
                brute = brute.max(m.value_distance(a, b));
            }
        }
        assert!((m.oscillation(&all) - brute).abs() < 1e-14);
        assert!((brute - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_is_exact_for_linear_density() {
        let axes = vec![Axis::closed(vec![0.0, 0.3, 1.0, 1.7]), Axis::closed(vec![0.0, 0.5, 2.0])];
        let m = GridMap::from_fn(Chart::Flat, axes, Target::Torus(TorusTarget::new(2).unwrap()), |_| {
            vec![0.0, 0.0]
        })
        .unwrap();
        let integral: f64 = (0..m.len())
            .map(|i| {
                let c = m.coords(i);
                m.quadrature_weight(i) * (1.0 + 2.0 * c[0] - c[1])
            })
            .sum();
        let exact = 1.7 * 2.0 + 1.7f64.powi(2) * 2.0 - 1.7 * 2.0;
        assert!((integral - exact).abs() < 1e-12);
    }

    #[test]
    fn sphere_quadrature_gives_volume() {
        let m = identity_map(3, 32);
        let vol: f64 = (0..m.len()).map(|i| m.quadrature_weight(i)).sum();
        assert!((vol - sphere_area(3)).abs() / sphere_area(3) < 5e-3);
    }

    #[test]
    fn pchip_reproduces_linear_and_is_monotone() {
        let x = vec![0.0, 0.1, 0.5, 0.7, 1.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let d = pchip_slopes(&x, &y);
        for q in [0.05, 0.33, 0.69, 0.99] {
            assert!((pchip_eval(&x, &y, &d, q) - (2.0 * q + 1.0)).abs() < 1e-14);
        }
        let y2 = vec![0.0, 0.0, 1.0, 1.0, 3.0];
        let d2 = pchip_slopes(&x, &y2);
        let mut prev = -1.0;
        for k in 0..=1000 {
            let v = pchip_eval(&x, &y2, &d2, k as f64 / 1000.0);
            assert!(v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn latitude_diameter_cases() {
        assert_eq!(latitude_diameter(&[0.0]), 0.0);
        assert!((latitude_diameter(&[PI / 2.0]) - 2.0).abs() < 1e-15);
        assert!((latitude_diameter(&[0.0, PI]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn profile_csv_round_trip() {
        let p = RadialProfile::from_fn(DomainKind::SpherePolar, 16, PI, |r| r + 0.1 * r.sin()).unwrap();
        let dir = std::env::temp_dir().join(format!("nhflow-fields-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.csv");
        p.write_csv(&path).unwrap();
        let q = RadialProfile::read_csv(&path, DomainKind::SpherePolar).unwrap();
        assert_eq!(p, q);
        std::fs::remove_dir_all(&dir).ok();
    }

    proptest! {
        #[test]
        fn oscillation_is_monotone_under_inclusion(seed in 0u64..1000, cut in 1usize..80) {
            let m = identity_map(2, 8);
            let mut idx: Vec<usize> = (0..m.len()).collect();
            let s = seed as usize;
            let len = idx.len();
            idx.rotate_left(s % len);
            let small = &idx[..cut.min(idx.len())];
            prop_assert!(m.oscillation(small) <= m.oscillation(&idx) + 1e-15);
        }

        #[test]
        fn diameter_matches_brute_force(pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..40)) {
            let refs: Vec<&Vec<f64>> = pts.iter().collect();
            let mut brute = 0.0f64;
            for a in &pts { for b in &pts { brute = brute.max(euclidean_distance(a, b)); } }
            prop_assert!((point_set_diameter(&refs) - brute).abs() < 1e-11);
        }
    }
}
