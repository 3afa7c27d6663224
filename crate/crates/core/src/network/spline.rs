//! Open-uniform B-spline basis over Cartesian pseudo-coordinates.

use crate::autodiff::{Real, SplineGraph};
use crate::error::{Error, Result};

/// Tolerance for pseudo-coordinates slightly outside [0, 1].
pub const PSEUDO_TOLERANCE: f64 = 1e-9;

/// Clamped knot vector with `m + 1` repeated end knots and uniform interior
/// knots, `k + m + 1` entries in total.
pub fn open_uniform_knots(k: usize, m: usize) -> Vec<f64> {
    assert!(k > m, "need k > m");
    let interior = k - m;
    let mut t = vec![0.0; m + 1];
    for i in 1..interior {
        t.push(i as f64 / interior as f64);
    }
    t.extend(std::iter::repeat_n(1.0, m + 1));
    t
}

fn find_span(u: f64, k: usize, m: usize, knots: &[f64]) -> usize {
    if u >= knots[k] {
        return k - 1;
    }
    let mut s = m;
    while s + 1 < k && knots[s + 1] <= u {
        s += 1;
    }
    s
}

/// Nonzero degree-`m` basis values at `u`: returns the first control index
/// and the `m + 1` values `N_{first..=first+m}(u)`.
pub fn basis_1d(u: f64, k: usize, m: usize, knots: &[f64]) -> (usize, Vec<f64>) {
    let span = find_span(u, k, m, knots);
    let mut n = vec![0.0; m + 1];
    let mut left = vec![0.0; m + 1];
    let mut right = vec![0.0; m + 1];
    n[0] = 1.0;
    for j in 1..=m {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    (span - m, n)
}

/// Tensor-product basis at a 3D pseudo-coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    /// Control point `(i, j, l)` flattened as `i + k j + k^2 l`.
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
    /// Set when a coordinate was clamped back into [0, 1].
    pub clamped: bool,
}

pub fn spline_basis(u: [f64; 3], k: usize, m: usize) -> Result<SplineBasis> {
    let knots = open_uniform_knots(k, m);
    spline_basis_with(u, k, m, &knots)
}

fn spline_basis_with(u: [f64; 3], k: usize, m: usize, knots: &[f64]) -> Result<SplineBasis> {
    let mut clamped = false;
    let mut per_axis = Vec::with_capacity(3);
    for (axis, &c) in u.iter().enumerate() {
        let c = if (0.0..=1.0).contains(&c) {
            c
        } else if (-PSEUDO_TOLERANCE..=1.0 + PSEUDO_TOLERANCE).contains(&c) {
            clamped = true;
            c.clamp(0.0, 1.0)
        } else {
            return Err(Error::Config(format!("pseudo-coordinate {c} on axis {axis} outside [0, 1]")));
        };
        per_axis.push(basis_1d(c, k, m, knots));
    }
    let e = m + 1;
    let mut indices = Vec::with_capacity(e * e * e);
    let mut weights = Vec::with_capacity(e * e * e);
    let (fx, wx) = &per_axis[0];
    let (fy, wy) = &per_axis[1];
    let (fz, wz) = &per_axis[2];
    for c in 0..e {
        for b in 0..e {
            for a in 0..e {
                indices.push(((fx + a) + k * (fy + b) + k * k * (fz + c)) as u32);
                weights.push(wx[a] * wy[b] * wz[c]);
            }
        }
    }
    Ok(SplineBasis {
        indices,
        weights,
        clamped,
    })
}

/// Kernel entries for every directed edge, in edge order.
pub fn build_spline_graph<T: Real>(
    num_nodes: usize,
    edges: &[[u32; 2]],
    pseudo: &[[f32; 3]],
    k: usize,
    m: usize,
) -> Result<SplineGraph<T>> {
    if edges.len() != pseudo.len() {
        return Err(Error::Shape {
            context: "build_spline_graph".into(),
            detail: format!("{} edges, {} pseudo-coordinates", edges.len(), pseudo.len()),
        });
    }
    let knots = open_uniform_knots(k, m);
    let e = (m + 1).pow(3);
    let mut idx = Vec::with_capacity(edges.len() * e);
    let mut w = Vec::with_capacity(edges.len() * e);
    let mut clamped = 0;
    for u in pseudo {
        let b = spline_basis_with(u.map(f64::from), k, m, &knots)?;
        clamped += usize::from(b.clamped);
        idx.extend_from_slice(&b.indices);
        w.extend(b.weights.iter().map(|&v| T::of(v)));
    }
    if clamped > 0 {
        log::warn!("{clamped} pseudo-coordinates clamped into [0, 1]");
    }
    SplineGraph::new(num_nodes, k * k * k, e, edges, &idx, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook Cox-de Boor recursion with the 0/0 = 0 convention.
    fn cox_de_boor(i: usize, p: usize, u: f64, t: &[f64]) -> f64 {
        if p == 0 {
            let last = t.len() - 1;
            // Right-closed final interval so u = 1 is covered.
            let closed = u == t[last] && t[i + 1] == t[last] && t[i] < t[i + 1];
            return if (t[i] <= u && u < t[i + 1]) || closed { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        if t[i + p] > t[i] {
            v += (u - t[i]) / (t[i + p] - t[i]) * cox_de_boor(i, p - 1, u, t);
        }
        if t[i + p + 1] > t[i + 1] {
            v += (t[i + p + 1] - u) / (t[i + p + 1] - t[i + 1]) * cox_de_boor(i + 1, p - 1, u, t);
        }
        v
    }

    #[test]
    fn knot_vector() {
        assert_eq!(
            open_uniform_knots(5, 2),
            vec![0.0, 0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn matches_cox_de_boor() {
        let t = open_uniform_knots(5, 2);
        for &u in &[0.0, 0.1, 1.0 / 3.0, 0.5, 0.7, 0.999, 1.0] {
            let (first, vals) = basis_1d(u, 5, 2, &t);
            for i in 0..5 {
                let expect = cox_de_boor(i, 2, u, &t);
                let got = if (first..first + 3).contains(&i) { vals[i - first] } else { 0.0 };
                assert!((got - expect).abs() <= 1e-12, "u={u} i={i}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20_000 {
            let u = [rng.random(), rng.random(), rng.random()];
            let b = spline_basis(u, 5, 2).unwrap();
            assert_eq!(b.indices.len(), 27);
            assert!(b.weights.iter().all(|&w| w >= 0.0));
            assert!((b.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn origin_uses_first_control_point() {
        let b = spline_basis([0.0; 3], 5, 2).unwrap();
        let k = b.weights.iter().position(|&w| w == 1.0).unwrap();
        assert_eq!(b.indices[k], 0);
        let top = spline_basis([1.0; 3], 5, 2).unwrap();
        let k = top.weights.iter().position(|&w| w == 1.0).unwrap();
        assert_eq!(top.indices[k], 124);
    }

    #[test]
    fn out_of_range_clamped_or_rejected() {
        assert!(spline_basis([1.0 + 1e-12, 0.5, 0.5], 5, 2).unwrap().clamped);
        assert!(spline_basis([1.1, 0.5, 0.5], 5, 2).is_err());
    }
}
