use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            // Keep clear of the leaky-relu kink.
            if v.abs() < 1e-3 {
                v + 2e-3
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Finite-difference check of `op` through a random linear read-out.
fn check_op<F>(shapes: &[&[usize]], op: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.add(&format!("p{i}"), random_tensor(s, &mut rng), true);
    }
    let mut readout: Option<Tensor<f64>> = None;
    let err = grad_check(
        &mut store,
        |s, tape| {
            let vars: Vec<Var> = (0..s.len()).map(|i| tape.param(s, ParamId(i))).collect();
            let out = op(tape, &vars)?;
            if tape.value(out).numel() == 1 {
                return Ok(out);
            }
            let shape = tape.shape(out).to_vec();
            let r = readout
                .get_or_insert_with(|| random_tensor(&shape, &mut ChaCha8Rng::seed_from_u64(5)))
                .clone();
            let r = tape.constant(r);
            let prod = tape.mul(out, r)?;
            Ok(tape.sum(prod))
        },
        GradCheckOptions {
            max_coords_per_param: 64,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
    err
}

#[test]
fn sum_gradient_is_ones() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let s = tape.sum(w);
    tape.backward(s).unwrap().accumulate(&mut store);
    assert_eq!(store.get(id).grad, vec![1.0; 3]);
}

#[test]
fn square_sum_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap().accumulate(&mut store);
    assert_eq!(store.get(id).grad, vec![2.0, 4.0, 6.0]);
}

#[test]
fn backward_twice_and_non_scalar_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(vec![2], 1.0));
    assert!(matches!(tape.backward(x), Err(Error::Autodiff(_))));
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(vec![2], 1.0));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0]);
    assert!(matches!(tape.backward(s), Err(Error::Autodiff(_))));
}

#[test]
fn quadratic_form_is_exact() {
    let err = check_op(&[&[4], &[4, 4]], |t, v| {
        let x = t.reshape(v[0], vec![1, 4])?;
        let ax = t.matmul(x, v[1])?;
        let ax = t.reshape(ax, vec![4])?;
        let q = t.mul(ax, v[0])?;
        Ok(t.sum(q))
    });
    assert!(err < 1e-9, "{err}");
}

#[test]
fn fd_add_mul_scale() {
    check_op(&[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
    check_op(&[&[3, 4]], |t, v| Ok(t.scale(v[0], -1.7)));
}

#[test]
fn fd_add_bias_and_matmul() {
    check_op(&[&[5, 3], &[3]], |t, v| t.add_bias(v[0], v[1]));
    check_op(&[&[4, 3], &[3, 6]], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn fd_conv3d() {
    check_op(&[&[2, 4, 5, 4, 2], &[3, 3, 3, 2, 3]], |t, v| t.conv3d(v[0], v[1]));
}

#[test]
fn conv3d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&[1, 4, 4, 4, 2], &mut rng);
    let w = random_tensor(&[3, 3, 3, 2, 2], &mut rng);
    let mut tape = Tape::new();
    let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv3d(vx, vw).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape, vec![1, 2, 2, 2, 2]);
    let xi = |z: usize, yy: usize, xx: usize, c: usize| x.data[((z * 4 + yy) * 4 + xx) * 2 + c];
    for oz in 0..2 {
        for oy in 0..2 {
            for ox in 0..2 {
                for co in 0..2 {
                    let mut s = 0.0;
                    for kz in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                for ci in 0..2 {
                                    s += xi(oz + kz, oy + ky, ox + kx, ci) * w.data[(((kz * 3 + ky) * 3 + kx) * 2 + ci) * 2 + co];
                                }
                            }
                        }
                    }
                    let got = out.data[((oz * 2 + oy) * 2 + ox) * 2 + co];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn fd_gather_scatter() {
    let idx = Arc::new(vec![0u32, 2, 2, 1, 0, 3]);
    let i2 = idx.clone();
    check_op(&[&[4, 3]], move |t, v| t.gather(v[0], i2.clone()));
    check_op(&[&[6, 3]], move |t, v| t.scatter_add(v[0], idx.clone(), 4));
}

#[test]
fn scatter_is_adjoint_of_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let n = rng.random_range(2..8);
        let e = rng.random_range(1..20);
        let c = 3;
        let idx: Arc<Vec<u32>> = Arc::new((0..e).map(|_| rng.random_range(0..n as u32)).collect());
        let x = random_tensor(&[e, c], &mut rng);
        let y = random_tensor(&[n, c], &mut rng);
        let mut tape = Tape::new();
        let (vx, vy) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let s = tape.scatter_add(vx, idx.clone(), n).unwrap();
        let g = tape.gather(vy, idx).unwrap();
        let lhs: f64 = tape.value(s).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = tape.value(g).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        // The backward of scatter-add is a gather of the upstream gradient.
        let mut tape = Tape::new();
        let vx = tape.leaf(x.clone());
        let s = tape.scatter_add(vx, Arc::new((0..e).map(|k| (k % n) as u32).collect()), n).unwrap();
        let w = tape.constant(y.clone());
        let p = tape.mul(s, w).unwrap();
        let l = tape.sum(p);
        let grads = tape.backward(l).unwrap();
        let gx = grads.get(vx).unwrap();
        for k in 0..e {
            for j in 0..c {
                assert_eq!(gx[k * c + j], y.data[(k % n) * c + j]);
            }
        }
    }
}

#[test]
fn fd_leaky_relu() {
    check_op(&[&[4, 5]], |t, v| Ok(t.leaky_relu(v[0], 0.01)));
}

fn bn_store() -> (ParamStore<f64>, ParamId, ParamId) {
    let mut s = ParamStore::new();
    let m = s.add("rm", Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap(), false);
    let v = s.add("rv", Tensor::new(vec![3], vec![0.5, 1.5, 2.0]).unwrap(), false);
    (s, m, v)
}

#[test]
fn fd_batch_norm_train_and_eval() {
    let (stats, m, v) = bn_store();
    for train in [true, false] {
        let stats = stats.clone();
        check_op(&[&[6, 3], &[3], &[3]], move |t, vs| {
            t.batch_norm(vs[0], vs[1], vs[2], (m, v), &stats, 1e-5, train)
        });
    }
}

#[test]
fn batch_norm_normalizes_and_tracks_running_stats() {
    let (mut stats, m, v) = bn_store();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![4, 3], (0..12).map(|i| i as f64).collect()).unwrap());
    let g = tape.constant(Tensor::full(vec![3], 1.0));
    let b = tape.constant(Tensor::full(vec![3], 0.0));
    let y = tape.batch_norm(x, g, b, (m, v), &stats, 1e-5, true).unwrap();
    for c in 0..3 {
        let col: Vec<f64> = (0..4).map(|r| tape.value(y).data[r * 3 + c]).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
    }
    stats.apply_bn_updates(&tape.bn_updates, 0.1);
    // Column 0 holds 0, 3, 6, 9: mean 4.5, unbiased variance 15.
    assert!((stats.get(m).value.data[0] - (0.9 * 0.1 + 0.45)).abs() < 1e-12);
    assert!((stats.get(v).value.data[0] - (0.9 * 0.5 + 1.5)).abs() < 1e-12);
}

#[test]
fn fd_softmax_cross_entropy() {
    let targets = vec![0usize, 3, 1, 1, 4];
    let weights = vec![0.5, 2.0, 1.0, 1.5, 3.0];
    check_op(&[&[5, 5]], move |t, v| t.softmax_cross_entropy(v[0], &targets, &weights));
}

#[test]
fn weighted_cross_entropy_value() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap());
    let loss = tape.softmax_cross_entropy(l, &[0, 1], &[1.0, 3.0]).unwrap();
    let expected = (1.0 + 3.0) * 2f64.ln() / 2.0;
    assert!((tape.value(loss).item() - expected).abs() < 1e-12);
}

#[test]
fn fd_bce_with_logits() {
    let t = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    check_op(&[&[6]], move |tape, v| tape.bce_with_logits(v[0], &t));
}

#[test]
fn fd_reshape_and_reductions() {
    check_op(&[&[2, 6]], |t, v| t.reshape(v[0], vec![3, 4]));
    check_op(&[&[2, 6]], |t, v| Ok(t.mean(v[0])));
    check_op(&[&[3, 2, 2]], |t, v| Ok(t.row_mean(v[0])));
}

#[test]
fn fd_spline_conv() {
    let edges = [[0u32, 1], [1, 0], [2, 1], [1, 2], [2, 0], [3, 2]];
    let s = 2;
    let idx: Vec<u32> = (0..edges.len() * s).map(|i| (i * 3 % 5) as u32).collect();
    let w: Vec<f64> = (0..edges.len() * s).map(|i| 0.2 + 0.1 * (i % 4) as f64).collect();
    let g = Arc::new(SplineGraph::new(4, 5, s, &edges, &idx, &w).unwrap());
    check_op(&[&[4, 3], &[15, 2]], move |t, v| t.spline_conv(v[0], v[1], g.clone()));
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { context, .. }) => assert_eq!(context, "matmul"),
        other => panic!("{other:?}"),
    }
    assert!(tape.gather(a, Arc::new(vec![5])).is_err());
}
