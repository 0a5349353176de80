use rand::Rng as _;
use rand_distr::StandardNormal;

use super::*;
use crate::gradcheck::check;
use crate::rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "autograd-test", 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
}

/// Reduces any node to a scalar through a fixed random projection.
fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let w = randn(g.value(y).shape(), seed + 1000);
    g.dot_const(y, &w)
}

fn assert_exact(report: crate::gradcheck::GradCheckReport) {
    assert_eq!(report.failures, 0, "{report:?}");
}

#[test]
fn conv1d_gradients() {
    for k in [1, 3, 5] {
        let ins = [randn(&[3, 2, 7], 1), randn(&[4, 3, k], 2), randn(&[4], 3)];
        assert_exact(check(&ins, 200, 0, |g, v| {
            let y = g.conv1d(v[0], v[1], v[2]);
            project(g, y, 4)
        }));
    }
}

#[test]
fn conv1d_matches_direct_sum() {
    let (x, w, b) = (randn(&[2, 3, 6], 5), randn(&[3, 2, 3], 6), randn(&[3], 7));
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv1d(vx, vw, vb);
    let yv = g.value(y);
    for co in 0..3 {
        for s in 0..3 {
            for l in 0..6 {
                let mut acc = b.data()[co];
                for ci in 0..2 {
                    for k in 0..3 {
                        let src = l as isize + k as isize - 1;
                        if (0..6).contains(&src) {
                            acc += w.data()[(co * 2 + ci) * 3 + k] * x.data()[(ci * 3 + s) * 6 + src as usize];
                        }
                    }
                }
                assert!((yv.data()[(co * 3 + s) * 6 + l] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_transpose_gradients_and_layout() {
    let ins = [randn(&[3, 2, 4], 8), randn(&[2, 2, 3], 9), randn(&[2], 10)];
    assert_exact(check(&ins, 200, 0, |g, v| {
        let y = g.conv_transpose2(v[0], v[1], v[2]);
        project(g, y, 11)
    }));
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]));
    let w = g.input(Tensor::from_vec(&[1, 2, 1], vec![10.0, 100.0]));
    let b = g.input(Tensor::from_vec(&[1], vec![0.5]));
    let y = g.conv_transpose2(x, w, b);
    assert_eq!(g.value(y).data(), &[10.5, 100.5, 20.5, 200.5]);
}

#[test]
fn batch_norm_gradients_both_modes() {
    let ins = [randn(&[3, 4, 5], 12), randn(&[3], 13), randn(&[3], 14)];
    assert_exact(check(&ins, 200, 0, |g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], BnMode::Train { name: "bn" });
        project(g, y, 15)
    }));
    let (mean, var) = (vec![0.1, -0.2, 0.3], vec![1.5, 0.5, 2.0]);
    assert_exact(check(&ins, 200, 0, |g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var });
        project(g, y, 15)
    }));
}

#[test]
fn batch_norm_records_unbiased_statistics() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let gamma = g.input(Tensor::filled(&[1], 1.0));
    let beta = g.input(Tensor::zeros(&[1]));
    let y = g.batch_norm(x, gamma, beta, BnMode::Train { name: "l" });
    let obs = &g.bn_observations()[0];
    assert_eq!(obs.mean, vec![2.5]);
    assert!((obs.var[0] - 5.0 / 3.0).abs() < 1e-15);
    let mean: f64 = g.value(y).data().iter().sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
}

#[test]
fn pointwise_and_pooling_gradients() {
    let ins = [randn(&[2, 3, 8], 16)];
    assert_exact(check(&ins, 200, 0, |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 17)
    }));
    assert_exact(check(&ins, 200, 0, |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 18)
    }));
    assert_exact(check(&ins, 200, 0, |g, v| {
        let y = g.max_pool2(v[0]);
        project(g, y, 19)
    }));
}

#[test]
fn reshaping_gradients() {
    let ins = [randn(&[2, 3, 4], 20), randn(&[1, 3, 4], 21), randn(&[2, 1, 4], 22)];
    assert_exact(check(&ins, 200, 0, |g, v| {
        let y = g.concat_channels(v[0], v[1]);
        let z = g.regroup(y, 4);
        let r = g.to_rows(z);
        let s = g.slice_rows(r, 1, 2);
        let c = g.concat_batch(&[v[0], v[2]]);
        let p1 = project(g, s, 23);
        let p2 = project(g, c, 24);
        g.weighted_sum(&[(p1, 1.0), (p2, 0.5)])
    }));
}

#[test]
fn regroup_is_row_major_per_sample() {
    let mut g = Graph::new();
    // two channels, one sample, length 2: per-sample features [0, 1, 2, 3]
    let x = g.input(Tensor::from_vec(&[2, 1, 2], vec![0.0, 1.0, 2.0, 3.0]));
    let y = g.regroup(x, 1);
    assert_eq!(g.value(y).shape(), &[1, 1, 4]);
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
    let r = g.to_rows(x);
    assert_eq!(g.value(r).data(), &[0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn linear_and_loss_gradients() {
    let ins = [randn(&[4, 6], 25), randn(&[3, 6], 26), randn(&[3], 27)];
    assert_exact(check(&ins, 200, 0, |g, v| {
        let y = g.linear(v[0], v[1], v[2]);
        project(g, y, 28)
    }));
    assert_exact(check(&ins[..1], 200, 0, |g, v| g.cross_entropy(v[0], 2)));
    let pair = [randn(&[2, 3, 5], 29), randn(&[2, 3, 5], 30)];
    assert_exact(check(&pair, 200, 0, |g, v| g.l1_mean(v[0], v[1])));
    let trip = [randn(&[5, 4], 31), randn(&[5, 4], 32), randn(&[5, 4], 33)];
    assert_exact(check(&trip, 200, 0, |g, v| g.triplet(v[0], v[1], v[2], 1.0)));
}

#[test]
fn shared_parameters_accumulate() {
    let mut g = Graph::new();
    let w = Tensor::from_vec(&[1], vec![3.0]);
    let a = g.param("w", &w);
    let b = g.param("w", &w);
    assert_eq!(a, b);
    let s = g.weighted_sum(&[(a, 2.0), (b, 5.0)]);
    let grads = g.backward(s);
    assert_eq!(g.param_grads(&grads)["w"].data(), &[7.0]);
}
