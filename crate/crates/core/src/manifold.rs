//! Target geometry: the round unit sphere `S^m ⊂ R^{m+1}` and the flat torus
//! `T^m = R^m / Z^m` together with its universal cover.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Tolerance used to decide whether a vector lies on the unit sphere.
pub const UNIT_TOL: f64 = 1e-10;

/// Largest per-coordinate step that can be lifted without ambiguity.
pub const LIFT_STEP_LIMIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SphereTarget {
    pub dim_m: usize,
}

impl SphereTarget {
    pub fn new(dim_m: usize) -> Result<Self> {
        if dim_m == 0 {
            return domain("sphere target dimension must be at least 1");
        }
        Ok(Self { dim_m })
    }

    /// Dimension of the ambient Euclidean space.
    pub fn ambient_dim(&self) -> usize {
        self.dim_m + 1
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.ambient_dim() && (norm(p) - 1.0).abs() <= UNIT_TOL
    }

    /// Chordal distance in the embedding.
    pub fn chordal_distance(&self, p: &[f64], q: &[f64]) -> f64 {
        euclidean_distance(p, q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusTarget {
    pub dim_m: usize,
}

impl TorusTarget {
    pub fn new(dim_m: usize) -> Result<Self> {
        if dim_m < 2 {
            return domain("torus target dimension must be at least 2");
        }
        Ok(Self { dim_m })
    }

    /// Reduce a cover point into the fundamental domain `[0,1)^m`.
    pub fn project(&self, cover: &[f64]) -> Vec<f64> {
        cover.iter().map(|&x| reduce_unit(x)).collect()
    }

    /// Flat distance on the torus (shortest lattice representative).
    pub fn distance(&self, p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .map(|(a, b)| {
                let d = wrap_step(b - a);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Lift a path on the torus to the universal cover; see [`torus_lift`].
    pub fn lift(&self, path: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        torus_lift(path)
    }
}

/// Reduce a real number into `[0, 1)`.
pub fn reduce_unit(x: f64) -> f64 {
    let r = x - x.floor();
    // `x - floor(x)` can round up to exactly 1.0 for tiny negative inputs.
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Shortest representative of a coordinate step, in `[-1/2, 1/2]`.
pub fn wrap_step(d: f64) -> f64 {
    d - d.round()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn euclidean_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Nearest-point retraction onto the unit sphere.
pub fn sphere_project(v: &[f64]) -> Result<Vec<f64>> {
    let r = norm(v);
    if !(r > 0.0) || !r.is_finite() {
        return domain("cannot project a zero or non-finite vector onto the sphere");
    }
    Ok(v.iter().map(|x| x / r).collect())
}

/// Curvature term of the flow for the unit sphere target.
///
/// For `N = S^m` the second fundamental form satisfies
/// `|∇u|^{n-2} A(u)(∇u, ∇u) = |∇u|^n u` (sign chosen so the flow stays tangent).
/// The caller supplies the scalar density `c`; the result is `c·u`.
pub fn sphere_second_fundamental_term(u: &[f64], density: f64) -> Result<Vec<f64>> {
    if (norm(u) - 1.0).abs() > UNIT_TOL {
        return domain(format!(
            "second fundamental term needs a unit vector, got |u| = {}",
            norm(u)
        ));
    }
    Ok(u.iter().map(|x| density * x).collect())
}

/// Lift a torus path to the cover `R^m`.
///
/// The first point is placed in the fundamental domain; each later point is
/// reached by the shortest representative of the step, which must be below
/// [`LIFT_STEP_LIMIT`] in every coordinate.
pub fn torus_lift(path: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(path.len());
    let Some(first) = path.first() else {
        return Ok(out);
    };
    out.push(first.iter().map(|&x| reduce_unit(x)).collect());
    for (k, pair) in path.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if a.len() != b.len() {
            return domain("torus path points have inconsistent dimensions");
        }
        let prev = out[k].clone();
        let mut next = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let step = wrap_step(b[i] - a[i]);
            if step.abs() >= LIFT_STEP_LIMIT {
                return Err(Error::LiftAmbiguity {
                    from: k,
                    to: k + 1,
                    step,
                });
            }
            next.push(prev[i] + step);
        }
        out.push(next);
    }
    Ok(out)
}

/// Distance in the cover. The synthetic cover carries the flat Euclidean metric.
pub fn cover_distance(p: &[f64], q: &[f64]) -> f64 {
    euclidean_distance(p, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn project_examples() {
        assert_eq!(sphere_project(&[2.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(sphere_project(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        let p = sphere_project(&[1.0, 1.0, 0.0, 0.0]).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((p[0] - s).abs() < 1e-15 && (p[1] - s).abs() < 1e-15);
        assert!(matches!(sphere_project(&[0.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn curvature_term_is_parallel_to_u() {
        let north = [0.0, 0.0, 1.0];
        assert_eq!(sphere_second_fundamental_term(&north, 0.0).unwrap(), vec![0.0; 3]);
        assert_eq!(sphere_second_fundamental_term(&north, 1.0).unwrap(), north.to_vec());
        assert!(sphere_second_fundamental_term(&[0.0, 0.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn constant_path_lifts_to_constant() {
        let p = vec![0.3, 0.7];
        let lift = torus_lift(&vec![p.clone(); 5]).unwrap();
        assert!(lift.iter().all(|q| q == &p));
    }

    #[test]
    fn winding_loop_lifts_to_lattice_translation() {
        let steps = 64;
        let path: Vec<Vec<f64>> = (0..=steps)
            .map(|k| vec![reduce_unit(0.1 + k as f64 / steps as f64), 0.5, 0.25])
            .collect();
        let lift = torus_lift(&path).unwrap();
        let disp: Vec<f64> = lift[steps].iter().zip(&lift[0]).map(|(a, b)| a - b).collect();
        assert!((disp[0] - 1.0).abs() < 1e-12);
        assert!(disp[1].abs() < 1e-12 && disp[2].abs() < 1e-12);
    }

    #[test]
    fn big_step_is_ambiguous() {
        let path = vec![vec![0.0, 0.0], vec![0.3, 0.0]];
        assert!(matches!(
            torus_lift(&path),
            Err(Error::LiftAmbiguity { from: 0, to: 1, .. })
        ));
    }

    #[test]
    fn cover_distance_examples() {
        assert_eq!(cover_distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(cover_distance(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(cover_distance(&[0.0, 0.0, 0.0], &[3.0, 4.0, 0.0]), 5.0);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 2..6)) {
            prop_assume!(norm(&v) > 1e-6);
            let p = sphere_project(&v).unwrap();
            prop_assert!((norm(&p) - 1.0).abs() < 1e-12);
            let q = sphere_project(&p).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn lift_round_trips(start in prop::collection::vec(0.0f64..1.0, 3),
                            steps in prop::collection::vec(prop::collection::vec(-0.2f64..0.2, 3), 1..60)) {
            let mut path = vec![start.clone()];
            for s in &steps {
                let last = path.last().unwrap().clone();
                path.push(last.iter().zip(s).map(|(a, b)| reduce_unit(a + b)).collect());
            }
            let lift = torus_lift(&path).unwrap();
            let torus = TorusTarget::new(3).unwrap();
            for (orig, up) in path.iter().zip(&lift) {
                let back = torus.project(up);
                for (a, b) in orig.iter().zip(&back) {
                    prop_assert!(wrap_step(a - b).abs() < 1e-12);
                }
            }
            // consecutive lifted points are as far apart as their torus images
            for (k, w) in lift.windows(2).enumerate() {
                let d_cover = cover_distance(&w[0], &w[1]);
                let d_torus = torus.distance(&path[k], &path[k + 1]);
                prop_assert!((d_cover - d_torus).abs() < 1e-12);
            }
        }

        #[test]
        fn lift_distance_dominates_base_distance(p in prop::collection::vec(-3.0f64..3.0, 3),
                                                 q in prop::collection::vec(-3.0f64..3.0, 3),
                                                 lat in prop::collection::vec(-3i32..3, 3)) {
            let torus = TorusTarget::new(3).unwrap();
            let shifted: Vec<f64> = q.iter().zip(&lat).map(|(x, l)| x + *l as f64).collect();
            let base = torus.distance(&torus.project(&p), &torus.project(&q));
            prop_assert!(cover_distance(&p, &shifted) + 1e-12 >= base);
        }
    }
}
