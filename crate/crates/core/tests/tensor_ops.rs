use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_mt::tensor::gradcheck::{check, weighted_sum};
use sparse_mt::tensor::{AttentionSpec, Graph, Tensor};
use sparse_mt::Error;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn values(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = g.constant(vec![2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
    let out = g.matmul(eye, b).unwrap();
    assert_eq!(g.data(out), &[2.0, 3.0, 4.0, 5.0]);

    let row = g.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let col = g.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
    let dot = g.matmul(row, col).unwrap();
    assert_eq!(g.data(dot), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let inputs = [random(&[3, 3], 1), random(&[3, 3], 2)];
    let res = check(&inputs, H, |g, v| {
        let p = g.matmul(v[0], v[1])?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(res.passes(TOL), "{res:?}");

    let inputs = [random(&[2, 5], 3), random(&[5, 4], 4)];
    let res = check(&inputs, H, |g, v| {
        let p = g.matmul(v[0], v[1])?;
        weighted_sum(g, p, 5)
    })
    .unwrap();
    assert!(res.passes(TOL), "{res:?}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
    let r = g.relu(x);
    assert_eq!(g.data(r), &[0.0, 0.0, 2.0]);
    let y = g.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let z = g.scale(y, 0.0);
    assert_eq!(g.data(z), &[0.0, 0.0, 0.0]);
    let s = g.scalar_constant(2.0);
    let m = g.mul(s, y).unwrap();
    assert_eq!(g.data(m), &[2.0, 4.0, 6.0]);
    let bad = g.constant(vec![2], vec![1.0, 1.0]).unwrap();
    assert!(matches!(g.add(y, bad), Err(Error::Dimension { .. })));
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let inputs = [random(&[4, 3], 10), random(&[4, 3], 11)];
    for (name, res) in [
        ("mul", check(&inputs, H, |g, v| {
            let p = g.mul(v[0], v[1])?;
            weighted_sum(g, p, 1)
        })),
        ("add", check(&inputs, H, |g, v| {
            let p = g.add(v[0], v[1])?;
            let q = g.mul(p, p)?;
            weighted_sum(g, q, 2)
        })),
        ("sub", check(&inputs, H, |g, v| {
            let p = g.sub(v[0], v[1])?;
            let q = g.mul(p, p)?;
            weighted_sum(g, q, 3)
        })),
        ("relu", check(&inputs, H, |g, v| {
            let p = g.relu(v[0]);
            weighted_sum(g, p, 4)
        })),
        ("sigmoid", check(&inputs, H, |g, v| {
            let p = g.sigmoid(v[0]);
            weighted_sum(g, p, 5)
        })),
        ("scale", check(&inputs, H, |g, v| {
            let p = g.scale(v[0], -1.7);
            weighted_sum(g, p, 6)
        })),
    ] {
        let res = res.unwrap();
        assert!(res.passes(TOL), "{name}: {res:?}");
    }

    // Scalar-vs-tensor broadcasting sends the summed gradient to the scalar.
    let inputs = [random(&[3, 2], 12), random(&[1], 13)];
    let res = check(&inputs, H, |g, v| {
        let p = g.mul(v[0], v[1])?;
        let q = g.add(p, v[1])?;
        weighted_sum(g, q, 7)
    })
    .unwrap();
    assert!(res.passes(TOL), "{res:?}");
}

#[test]
fn xlogx_gradient_and_convention() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![3], vec![0.0, 1.0, 0.5]).unwrap();
    let y = g.xlogx(x).unwrap();
    assert_eq!(g.data(y)[0], 0.0);
    assert_eq!(g.data(y)[1], 0.0);
    assert!((g.data(y)[2] - 0.5 * 0.5f64.ln()).abs() < 1e-15);
    let neg = g.constant(vec![1], vec![-0.1]).unwrap();
    assert!(matches!(g.xlogx(neg), Err(Error::Domain(_))));

    let inputs = [values(vec![4], &[0.1, 0.4, 0.7, 0.95])];
    let res = check(&inputs, 1e-6, |g, v| {
        let p = g.xlogx(v[0])?;
        weighted_sum(g, p, 8)
    })
    .unwrap();
    assert!(res.passes(TOL), "{res:?}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.data(y), &[0.5, 0.5]);
    let big = g.constant(vec![2], vec![1000.0, 1000.0]).unwrap();
    let y = g.softmax(big, 0).unwrap();
    assert_eq!(g.data(y), &[0.5, 0.5]);
    assert!(g.softmax(big, 1).is_err());

    let m = g.constant(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
    for axis in 0..2 {
        let y = g.softmax(m, axis).unwrap();
        let d = g.data(y).to_vec();
        assert!(d.iter().all(|&p| p >= 0.0));
        if axis == 1 {
            assert!((d[0] + d[1] + d[2] - 1.0).abs() < 1e-12);
        } else {
            assert!((d[0] + d[3] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let inputs = [random(&[3, 4], 20)];
    for axis in 0..2 {
        let res = check(&inputs, H, |g, v| {
            let p = g.softmax(v[0], axis)?;
            weighted_sum(g, p, 21)
        })
        .unwrap();
        assert!(res.passes(TOL), "axis {axis}: {res:?}");
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![1, 4], vec![5.0; 4]).unwrap();
    let one = g.constant(vec![4], vec![1.0; 4]).unwrap();
    let zero = g.constant(vec![4], vec![0.0; 4]).unwrap();
    let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
    assert_eq!(g.data(y), &[0.0; 4]);

    let r = g.constant(vec![2, 4], vec![1.0, -2.0, 3.5, 0.25, 9.0, 1.0, 0.0, -4.0]).unwrap();
    let bias = g.constant(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let y = g.layer_norm(r, zero, bias, 1e-5).unwrap();
    assert_eq!(g.data(y), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);

    let y = g.layer_norm(r, one, zero, 1e-12).unwrap();
    for row in g.data(y).chunks(4) {
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
    assert!(matches!(g.layer_norm(r, one, zero, 0.0), Err(Error::Config(_))));
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let inputs = [random(&[3, 5], 30), random(&[5], 31), random(&[5], 32)];
    let res = check(&inputs, H, |g, v| {
        let p = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, p, 33)
    })
    .unwrap();
    assert!(res.passes(TOL), "{res:?}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(vec![2, 3], vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap();
    let l = g.cross_entropy(logits, &[0, 2], 99).unwrap();
    assert!(g.item(l) < 1e-20);

    let v = 7;
    let uniform = g.constant(vec![3, v], vec![0.3; 3 * v]).unwrap();
    let l = g.cross_entropy(uniform, &[1, 4, 6], 0).unwrap();
    // Pad row (target 0) is skipped; the rest each cost ln V.
    assert!((g.item(l) - (v as f64).ln()).abs() < 1e-12);
    let l = g.cross_entropy(uniform, &[0, 4, 0], 0).unwrap();
    assert!((g.item(l) - (v as f64).ln()).abs() < 1e-12);

    assert!(matches!(g.cross_entropy(uniform, &[0, 0, 0], 0), Err(Error::DegenerateBatch)));
    assert!(matches!(g.cross_entropy(uniform, &[1, 9, 2], 0), Err(Error::Input(_))));
}

#[test]
fn cross_entropy_excludes_padding_from_numerator_and_denominator() {
    let logits = random(&[4, 5], 40);
    let mut g = Graph::<f64>::new();
    let x = g.param(&logits);
    let full = g.cross_entropy(x, &[1, 2, 3, 4], 0).unwrap();
    let padded = g.cross_entropy(x, &[1, 0, 3, 0], 0).unwrap();
    let row_nll = |r: usize, t: usize| {
        let row = &logits.data[r * 5..(r + 1) * 5];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        lse - row[t]
    };
    let expect_full = (row_nll(0, 1) + row_nll(1, 2) + row_nll(2, 3) + row_nll(3, 4)) / 4.0;
    let expect_pad = (row_nll(0, 1) + row_nll(2, 3)) / 2.0;
    assert!((g.item(full) - expect_full).abs() < 1e-12);
    assert!((g.item(padded) - expect_pad).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let inputs = [random(&[4, 6], 41)];
    let res = check(&inputs, H, |g, v| g.cross_entropy(v[0], &[3, 0, 5, 1], 0)).unwrap();
    assert!(res.passes(TOL), "{res:?}");
}

#[test]
fn structural_op_gradients_match_finite_differences() {
    let inputs = [random(&[3, 2], 50), random(&[3, 4], 51)];
    let res = check(&inputs, H, |g, v| {
        let c = g.concat(&[v[0], v[1]])?;
        let parts = g.split(c, &[1, 3, 2])?;
        let t = g.transpose(parts[1])?;
        let p = g.matmul(t, parts[2])?;
        let q = g.mul(p, p)?;
        let s = weighted_sum(g, q, 52)?;
        let m = g.mean(parts[0]);
        g.add(s, m)
    })
    .unwrap();
    assert!(res.passes(TOL), "{res:?}");
}

#[test]
fn gather_scatters_gradient_back_to_rows() {
    let inputs = [random(&[5, 3], 60)];
    let res = check(&inputs, H, |g, v| {
        let e = g.gather(v[0], &[4, 1, 4, 0])?;
        let sq = g.mul(e, e)?;
        weighted_sum(g, sq, 61)
    })
    .unwrap();
    assert!(res.passes(TOL), "{res:?}");

    let mut g = Graph::<f64>::new();
    let t = g.param(&inputs[0]);
    let e = g.gather(t, &[2, 2]).unwrap();
    let s = g.sum(e);
    g.backward(s).unwrap();
    let grad = g.grad(t).unwrap();
    assert_eq!(&grad[6..9], &[2.0, 2.0, 2.0]);
    assert_eq!(grad.iter().sum::<f64>(), 6.0);
    assert!(g.gather(t, &[5]).is_err());
}

#[test]
fn block_tile_gradient_and_layout() {
    let mut g = Graph::<f64>::new();
    let b = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
    let t = g.block_tile(b, 2, 3, false).unwrap();
    assert_eq!(g.shape(t), &[2, 6]);
    assert_eq!(g.data(t), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    let tt = g.block_tile(b, 2, 3, true).unwrap();
    assert_eq!(g.shape(tt), &[6, 2]);
    assert_eq!(g.data(tt), &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0]);

    let inputs = [random(&[3], 70), random(&[4, 6], 71)];
    for transpose in [false, true] {
        let res = check(&inputs, H, |g, v| {
            let tile = g.block_tile(v[0], 4, 2, transpose)?;
            let other = if transpose { g.transpose(v[1])? } else { v[1] };
            let p = g.mul(tile, other)?;
            weighted_sum(g, p, 72)
        })
        .unwrap();
        assert!(res.passes(TOL), "{res:?}");
    }
}

#[test]
fn dropout_is_inverted_and_reproducible() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![1000], vec![1.0; 1000]).unwrap();
    let same = g.dropout(x, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(same, x);
    let a = g.dropout(x, 0.25, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = g.dropout(x, 0.25, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(g.data(a), g.data(b));
    let kept = g.data(a).iter().filter(|&&v| v != 0.0).count();
    assert!(g.data(a).iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
    assert!((650..850).contains(&kept), "kept {kept}");
    assert!(g.dropout(x, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());

    let inputs = [random(&[4, 4], 80)];
    let res = check(&inputs, H, |g, v| {
        let d = g.dropout(v[0], 0.5, &mut ChaCha8Rng::seed_from_u64(9))?;
        weighted_sum(g, d, 81)
    })
    .unwrap();
    assert!(res.passes(TOL), "{res:?}");
}

fn attention_spec(causal: bool) -> AttentionSpec {
    AttentionSpec {
        batch: 2,
        q_len: 3,
        k_len: 4,
        heads: 2,
        head_dim: 3,
        causal,
        key_lengths: vec![4, 2],
    }
}

#[test]
fn attention_gradient_matches_finite_differences() {
    for causal in [false, true] {
        let spec = attention_spec(causal);
        let inputs = [random(&[6, 6], 90), random(&[8, 6], 91), random(&[8, 6], 92)];
        let res = check(&inputs, H, |g, v| {
            let a = g.attention(v[0], v[1], v[2], spec.clone())?;
            weighted_sum(g, a, 93)
        })
        .unwrap();
        assert!(res.passes(TOL), "causal={causal}: {res:?}");
    }
}

#[test]
fn attention_matches_composed_reference() {
    // Recompute one head of one batch element with matmul/softmax ops.
    let spec = attention_spec(false);
    let (q, k, v) = (random(&[6, 6], 100), random(&[8, 6], 101), random(&[8, 6], 102));
    let mut g = Graph::<f64>::new();
    let (qv, kv, vv) = (g.param(&q), g.param(&k), g.param(&v));
    let fused = g.attention(qv, kv, vv, spec).unwrap();
    let fused = g.data(fused).to_vec();

    let (b, head) = (1usize, 1usize);
    let take = |t: &Tensor<f64>, rows: std::ops::Range<usize>, valid: usize| {
        let mut out = Vec::new();
        for r in rows.take(valid) {
            out.extend_from_slice(&t.data[r * 6 + head * 3..r * 6 + head * 3 + 3]);
        }
        out
    };
    let valid = 2;
    let qh = g.constant(vec![3, 3], take(&q, b * 3..b * 3 + 3, 3)).unwrap();
    let kh = g.constant(vec![valid, 3], take(&k, b * 4..b * 4 + 4, valid)).unwrap();
    let vh = g.constant(vec![valid, 3], take(&v, b * 4..b * 4 + 4, valid)).unwrap();
    let kt = g.transpose(kh).unwrap();
    let s = g.matmul(qh, kt).unwrap();
    let s = g.scale(s, 1.0 / 3f64.sqrt());
    let p = g.softmax(s, 1).unwrap();
    let o = g.matmul(p, vh).unwrap();
    for i in 0..3 {
        for c in 0..3 {
            let a = fused[(b * 3 + i) * 6 + head * 3 + c];
            let e = g.data(o)[i * 3 + c];
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_visits_shared_nodes_once_per_use() {
    let mut g = Graph::<f64>::new();
    let x = g.param_from(vec![1], vec![3.0]);
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    g.backward(z).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[7.0]);
    assert_eq!(g.grad(y).unwrap(), &[1.0]);
}
