use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Norm-wise relative error between the tape gradient and central differences.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let o = f(&mut g, &vs);
        g.value(o).item()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], t.shape());
        let mut numeric = Tensor::zeros(t.shape().to_vec());
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            numeric.data_mut()[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let mut diff = analytic.clone();
        diff.axpy(-1.0, &numeric);
        let scale = analytic.norm().max(numeric.norm()).max(1e-8);
        worst = worst.max(diff.norm() / scale);
    }
    worst
}

/// Weighted sum of all entries, so every output position carries gradient.
fn probe(g: &mut Graph, v: Var) -> Var {
    let n = g.value(v).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let flat = g.reshape(v, vec![1, n]);
    let wv = g.constant(Tensor::from_vec(vec![1, n], w));
    g.matmul_nt(flat, wv)
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let x = random(vec![2, 3, 5, 4], &mut rng);
        let w = random(vec![4, 3, 3, 3], &mut rng);
        let b = random(vec![4], &mut rng);
        let err = check(vec![x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
            probe(g, y)
        });
        assert!(err < 1e-6, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn group_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(vec![2, 4, 3, 2], &mut rng);
    let gamma = random(vec![4], &mut rng);
    let beta = random(vec![4], &mut rng);
    let err = check(vec![x, gamma, beta], |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5);
        probe(g, y)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn pooling_and_relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(vec![2, 3, 4, 2], &mut rng);
    for kind in [Pooling::Avg, Pooling::Max] {
        let err = check(vec![x.clone()], |g, v| {
            let r = g.relu(v[0]);
            let p = g.global_pool(r, kind);
            probe(g, p)
        });
        assert!(err < 1e-6, "{kind:?}: {err}");
    }
}

#[test]
fn slicing_statistics_and_adain_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(vec![3, 2, 5, 2], &mut rng);
    let err = check(vec![x], |g, v| {
        let top = g.slice_rows(v[0], 0, 2);
        let bottom = g.slice_rows(v[0], 2, 5);
        let mu = g.spatial_mean(top);
        let sig = g.spatial_std(top);
        let donor_mu = g.gather(mu, &[1, 2, 0]);
        let donor_sig = g.gather(sig, &[1, 2, 0]);
        let re = g.adain(top, mu, sig, donor_mu, donor_sig, 1e-5);
        let joined = g.concat_rows(&[re, bottom]);
        let pooled = g.global_pool(joined, Pooling::Avg);
        probe(g, pooled)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn classifier_and_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(vec![5, 4], &mut rng);
    let w = random(vec![3, 4], &mut rng);
    let mut t = Tensor::zeros(vec![5, 3]);
    for i in 0..5 {
        t.data_mut()[i * 3 + i % 3] = 0.7;
        t.data_mut()[i * 3 + (i + 1) % 3] = 0.3;
    }
    let err = check(vec![x, w], |g, v| {
        let n = g.normalize_rows(v[0]);
        let logits = g.matmul_nt(n, v[1]);
        let s = g.scale(logits, 4.0);
        g.softmax_cross_entropy(s, t.clone())
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn triplet_and_weighted_sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let labels = [0, 0, 1, 1, 2, 2];
    for _ in 0..5 {
        let x = random(vec![6, 3], &mut rng);
        let err = check(vec![x], |g, v| {
            let tri = g.batch_hard_triplet(v[0], &labels, 0.3);
            let mixed = g.lincomb(v[0], v[0], 0.25, 0.5);
            let pooled = probe(g, mixed);
            g.weighted_sum(&[(tri, 1.5), (pooled, 0.5)])
        });
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![1, 2], 1.0));
    let w = g.param(Tensor::full(vec![3, 2], 0.5));
    let y = g.matmul_nt(x, w);
    let loss = g.softmax_cross_entropy(y, Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, 0.0]));
    let grads = g.backward(loss);
    assert!(grads.get(x).is_none());
    assert!(grads.get(w).is_some());
}

#[test]
fn select_rows_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(vec![4, 2, 3], &mut rng);
    let b = random(vec![4, 2, 3], &mut rng);
    let err = check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.select_rows(v[0], v[1], &[true, false, false, true]);
        probe(g, s)
    });
    assert!(err < 1e-6, "{err}");
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let s = g.select_rows(va, vb, &[false, true, true, false]);
    assert_eq!(g.value(s).data()[6..12], a.data()[6..12]);
    assert_eq!(g.value(s).data()[..6], b.data()[..6]);
}

#[test]
fn batch_norm_gradient_and_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(vec![5, 3], &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.batch_norm(v);
    let (n, c) = g.value(y).dims2();
    for j in 0..c {
        let col: Vec<f64> = (0..n).map(|i| g.value(y).data()[i * c + j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3, "{var}");
    }
    let err = check(vec![x], |g, v| {
        let y = g.batch_norm(v[0]);
        probe(g, y)
    });
    assert!(err < 1e-6, "{err}");
}
