use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn store_of(entries: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = entries
        .iter()
        .map(|(n, t)| s.add(*n, t.clone()).unwrap())
        .collect();
    (s, ids)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

#[test]
fn conv_identity_kernel_is_identity() {
    let x = uniform(&[1, 5, 4], 1);
    let (s, ids) = store_of(&[
        ("w", Tensor::ones(&[1, 1, 1, 1])),
        ("b", Tensor::zeros(&[1])),
    ]);
    let mut g = Graph::new(&s);
    let xv = g.input(x.clone());
    let (w, b) = (g.param(ids[0]), g.param(ids[1]));
    let y = g.conv2d(xv, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_sliding_sum_of_ones() {
    let (s, ids) = store_of(&[("w", Tensor::ones(&[1, 1, 3, 3]))]);
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::ones(&[1, 3, 3]));
    let w = g.param(ids[0]);
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let v = g.value(y).data();
    // Hand-counted neighbourhood sizes.
    assert_eq!(v, &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_shape_errors() {
    let (s, ids) = store_of(&[("w", Tensor::ones(&[2, 3, 3, 3])), ("w2", Tensor::ones(&[1, 1, 2, 2]))]);
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::ones(&[2, 4, 4]));
    let w = g.param(ids[0]);
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Dimension(_))));
    let x1 = g.input(Tensor::ones(&[1, 4, 4]));
    let w2 = g.param(ids[1]);
    assert!(matches!(g.conv2d(x1, w2, None, 1, 0), Err(Error::Dimension(_))));
    // (4 + 2 - 3) / 2 is not integral.
    let w3 = g.input(Tensor::ones(&[1, 1, 3, 3]));
    assert!(matches!(g.conv2d(x1, w3, None, 2, 1), Err(Error::Dimension(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let (s, ids) = store_of(&[
        ("x", uniform(&[2, 7, 7], 2)),
        ("w", uniform(&[3, 2, 3, 3], 3)),
        ("b", uniform(&[3], 4)),
    ]);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let report = check_gradients(
            &s,
            |g| {
                let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let y = g.conv2d(x, w, Some(b), stride, pad)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            |_| true,
            100,
            1e-3,
            1e-3,
            &mut rng(5),
        )
        .unwrap();
        assert!(report.pass_fraction() >= 0.95, "{report:?}");
    }
}

#[test]
fn conv_sum_gradient_wrt_weight() {
    let (s, ids) = store_of(&[("w", uniform(&[2, 1, 3, 3], 7))]);
    let x = uniform(&[1, 5, 5], 8);
    let report = check_gradients(
        &s,
        |g| {
            let xv = g.input(x.clone());
            let w = g.param(ids[0]);
            let y = g.conv2d(xv, w, None, 1, 1)?;
            g.sum(y)
        },
        |_| true,
        18,
        1e-3,
        1e-3,
        &mut rng(9),
    )
    .unwrap();
    assert_eq!(report.passed, report.checked, "{report:?}");
}

#[test]
fn group_norm_constant_input_gives_beta() {
    let beta = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let (s, ids) = store_of(&[("gamma", uniform(&[4], 1)), ("beta", beta.clone())]);
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::full(&[4, 3, 3], 7.0));
    let (gm, bt) = (g.param(ids[0]), g.param(ids[1]));
    let y = g.group_norm(x, 2, gm, bt).unwrap();
    for (ch, chunk) in g.value(y).data().chunks(9).enumerate() {
        assert!(chunk.iter().all(|&v| (v - beta.data()[ch]).abs() < 1e-12));
    }
}

#[test]
fn group_norm_plus_minus_one_is_fixed_point() {
    let (s, ids) = store_of(&[("gamma", Tensor::ones(&[2])), ("beta", Tensor::zeros(&[2]))]);
    let mut g = Graph::new(&s);
    let data = vec![-1.0, 1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
    let x = g.input(Tensor::new(&[2, 2, 2], data.clone()).unwrap());
    let (gm, bt) = (g.param(ids[0]), g.param(ids[1]));
    let y = g.group_norm(x, 2, gm, bt).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&data) {
        // Normalized by sqrt(1 + eps).
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn group_norm_rejects_indivisible_groups() {
    let (s, ids) = store_of(&[("gamma", Tensor::ones(&[3])), ("beta", Tensor::zeros(&[3]))]);
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::ones(&[3, 2, 2]));
    let (gm, bt) = (g.param(ids[0]), g.param(ids[1]));
    assert!(matches!(g.group_norm(x, 2, gm, bt), Err(Error::Dimension(_))));
}

#[test]
fn group_norm_gradients_match_finite_differences() {
    let (s, ids) = store_of(&[
        ("x", uniform(&[4, 3, 3], 11)),
        ("gamma", uniform(&[4], 12)),
        ("beta", uniform(&[4], 13)),
        ("probe", uniform(&[4, 3, 3], 14)),
    ]);
    let report = check_gradients(
        &s,
        |g| {
            let (x, gm, bt, pr) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]), g.param(ids[3]));
            let y = g.group_norm(x, 2, gm, bt)?;
            let y = g.mul(y, pr)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        },
        |n| n != "probe",
        80,
        1e-3,
        1e-3,
        &mut rng(15),
    )
    .unwrap();
    assert!(report.pass_fraction() >= 0.95, "{report:?}");
}

fn attn_store(c: usize, seed: u64) -> (ParamStore, AttnParams) {
    let mut s = ParamStore::new();
    let mut r = rng(seed);
    let mut pb = ParamBuilder::new(&mut s, &mut r);
    let mut p = AttnParams::new(&mut pb.sub("attn"), c).unwrap();
    // Non-zero output projection so the attention path is visible.
    p.out_weight = pb.uniform("out_w", &[c, c], 0.5).unwrap();
    p.out_bias = pb.uniform("out_b", &[c], 0.5).unwrap();
    drop(pb);
    (s, p)
}

#[test]
fn attention_single_token_is_value_projection_plus_residual() {
    let (s, p) = attn_store(3, 21);
    let x = uniform(&[3, 1, 1], 22);
    let mut g = Graph::new(&s);
    let xv = g.input(x.clone());
    let wts = attention_weights(&mut g, xv, &p).unwrap();
    assert_eq!(g.value(wts).data(), &[1.0]);
    let y = self_attention(&mut g, xv, &p).unwrap();

    let wqkv = s.value(p.qkv_weight).data();
    let bqkv = s.value(p.qkv_bias).data();
    let wo = s.value(p.out_weight).data();
    let bo = s.value(p.out_bias).data();
    let v: Vec<f64> = (0..3)
        .map(|r| bqkv[6 + r] + (0..3).map(|c| wqkv[(6 + r) * 3 + c] * x.data()[c]).sum::<f64>())
        .collect();
    for r in 0..3 {
        let expect = x.data()[r] + bo[r] + (0..3).map(|c| wo[r * 3 + c] * v[c]).sum::<f64>();
        assert!((g.value(y).data()[r] - expect).abs() < 1e-12);
    }
}

#[test]
fn attention_identical_tokens_split_weight_evenly() {
    let (s, p) = attn_store(2, 23);
    let mut g = Graph::new(&s);
    // 1×2 is not square; use a 2×2 map whose four tokens are identical.
    let xv = g.input(Tensor::new(&[2, 2, 2], vec![0.3, 0.3, 0.3, 0.3, -0.7, -0.7, -0.7, -0.7]).unwrap());
    let w = attention_weights(&mut g, xv, &p).unwrap();
    assert!(g.value(w).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    // Two identical tokens among two: weight 0.5 each.
    let mut g2 = Graph::new(&s);
    let t = g2.input(Tensor::new(&[2, 2], vec![0.1, 0.1, 0.9, 0.9]).unwrap());
    let k = g2.input(Tensor::new(&[2, 2], vec![0.4, 0.4, -0.2, -0.2]).unwrap());
    let logits = g2.matmul(t, k, true, false).unwrap();
    let a = g2.softmax_rows(logits).unwrap();
    assert!(g2.value(a).data().iter().all(|&v| v == 0.5));
}

#[test]
fn attention_rejects_non_square() {
    let (s, p) = attn_store(2, 24);
    let mut g = Graph::new(&s);
    let xv = g.input(Tensor::ones(&[2, 2, 4]));
    assert!(matches!(self_attention(&mut g, xv, &p), Err(Error::Dimension(_))));
}

#[test]
fn attention_gradients_match_finite_differences() {
    let (mut s, p) = attn_store(4, 25);
    let x = s.add("x", uniform(&[4, 4, 4], 26)).unwrap();
    let report = check_gradients(
        &s,
        |g| {
            let xv = g.param(x);
            let y = self_attention(g, xv, &p)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        },
        |_| true,
        120,
        1e-3,
        1e-3,
        &mut rng(27),
    )
    .unwrap();
    assert!(report.pass_fraction() >= 0.95, "{report:?}");
}

#[test]
fn resample_round_trip_and_checkerboard() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let c = g.input(Tensor::full(&[2, 4, 4], 0.7));
    let up = resample(&mut g, c, Direction::Up).unwrap();
    let back = resample(&mut g, up, Direction::Down).unwrap();
    assert_eq!(g.value(back), g.value(c));

    let board = Tensor::from_fn(&[1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f64);
    let b = g.input(board);
    let d = resample(&mut g, b, Direction::Down).unwrap();
    assert_eq!(g.value(d).shape(), &[1, 2, 2]);
    assert!(g.value(d).data().iter().all(|&v| v == 0.5));

    let odd = g.input(Tensor::ones(&[1, 3, 4]));
    assert!(matches!(resample(&mut g, odd, Direction::Down), Err(Error::Dimension(_))));
}

#[test]
fn resample_chain_halves_extents() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let mut x = g.input(Tensor::zeros(&[1, 64, 64]));
    let mut sizes = vec![64];
    for _ in 0..3 {
        x = resample(&mut g, x, Direction::Down).unwrap();
        sizes.push(g.value(x).shape()[1]);
    }
    assert_eq!(sizes, [64, 32, 16, 8]);
}

#[test]
fn backward_elementary_cases() {
    let (s, ids) = store_of(&[("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap())]);
    let mut g = Graph::new(&s);
    let x = g.param(ids[0]);
    let l = g.sum(x).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.params().get(ids[0]).unwrap().data(), &[1.0, 1.0]);

    let mut g = Graph::new(&s);
    let x = g.param(ids[0]);
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.params().get(ids[0]).unwrap().data(), &[2.0, 4.0]);

    assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn backward_is_deterministic() {
    let (s, ids) = store_of(&[("x", uniform(&[3, 4, 4], 31)), ("w", uniform(&[3, 3, 3, 3], 32))]);
    let run = || {
        let mut g = Graph::new(&s);
        let (x, w) = (g.param(ids[0]), g.param(ids[1]));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.silu(y).unwrap();
        let l = g.mean(y).unwrap();
        g.backward(l).unwrap().into_params()
    };
    assert_eq!(run(), run());
}

#[test]
fn composite_conv_norm_attention_gradients() {
    let mut s = ParamStore::new();
    let mut r = rng(41);
    let (conv, norm, attn, x) = {
        let mut pb = ParamBuilder::new(&mut s, &mut r);
        let conv = Conv2d::new(&mut pb.sub("conv"), 2, 4, 3).unwrap();
        let norm = GroupNorm::new(&mut pb.sub("norm"), 4).unwrap();
        let mut attn = AttnParams::new(&mut pb.sub("attn"), 4).unwrap();
        attn.out_weight = pb.uniform("ow", &[4, 4], 0.5).unwrap();
        let x = pb.uniform("x", &[2, 4, 4], 1.0).unwrap();
        (conv, norm, attn, x)
    };
    let report = check_gradients(
        &s,
        |g| {
            let xv = g.param(x);
            let h = conv.forward(g, xv)?;
            let h = norm.forward(g, h)?;
            let h = g.silu(h)?;
            let h = self_attention(g, h, &attn)?;
            let h = g.mul(h, h)?;
            g.mean(h)
        },
        |_| true,
        200,
        1e-3,
        1e-3,
        &mut rng(42),
    )
    .unwrap();
    assert!(report.pass_fraction() >= 0.95, "{report:?}");
}

#[test]
fn remaining_ops_gradients() {
    let (s, ids) = store_of(&[
        ("a", uniform(&[3, 4], 51)),
        ("b", uniform(&[4, 3], 52)),
        ("v", uniform(&[3], 53)),
        ("img", uniform(&[3, 4, 4], 54)),
        ("sc", uniform(&[3], 55)),
        ("sh", uniform(&[3], 56)),
        ("lw", uniform(&[5, 4], 57)),
        ("lb", uniform(&[5], 58)),
    ]);
    let report = check_gradients(
        &s,
        |g| {
            let v: Vec<Var> = ids.iter().map(|&i| g.param(i)).collect();
            // matmul with both transposes
            let m1 = g.matmul(v[0], v[1], false, false)?;
            let m2 = g.matmul(v[1], v[0], true, true)?;
            let m = g.add(m1, m2)?;
            let m = g.softmax_rows(m)?;
            let m = g.mul_channel(m, v[2])?;
            let m = g.add_channel(m, v[2])?;
            // image ops
            let x = g.scale_shift(v[3], v[4], v[5])?;
            let x = g.mul_channel(x, v[2])?;
            let p = g.avg_pool2(x)?;
            let u = g.upsample2(p)?;
            let d = g.sub(u, x)?;
            let c00 = g.crop(d, 0, 0, 2, 2)?;
            let c01 = g.crop(d, 0, 2, 2, 2)?;
            let c10 = g.crop(d, 2, 0, 2, 2)?;
            let c11 = g.crop(d, 2, 2, 2, 2)?;
            let t = g.tile2x2([c11, c10, c01, c00])?;
            let t = g.mul(t, t)?;
            let cat = g.concat0(&[t, x])?;
            let cat = g.narrow0(cat, 1, 4)?;
            let s1 = g.sum(cat)?;
            // linear on a batch and a vector
            let lin = g.linear(v[0], v[6], Some(v[7]))?;
            let row = g.narrow0(v[0], 1, 1)?;
            let row = g.reshape(row, &[4])?;
            let lin2 = g.linear(row, v[6], Some(v[7]))?;
            let lin2 = g.silu(lin2)?;
            let lin = g.affine(lin, 0.5, 0.2)?;
            let lin = g.mul(lin, lin)?;
            let s2 = g.mean(lin)?;
            let s3 = g.mse_to(lin2, Tensor::full(&[5], 0.3))?;
            let s4 = g.sum(m)?;
            let s = g.add(s1, s2)?;
            let s = g.add(s, s3)?;
            let s4 = g.mul(s4, s4)?;
            g.add(s, s4)
        },
        |_| true,
        200,
        1e-3,
        1e-3,
        &mut rng(59),
    )
    .unwrap();
    assert!(report.pass_fraction() >= 0.95, "{report:?}");
}

#[test]
fn non_finite_values_surface_as_errors() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.input(Tensor::full(&[2], 1e300));
    assert!(matches!(g.mul(x, x), Err(Error::Numeric(_))));
}

#[test]
fn norm_groups_convention() {
    assert_eq!(norm_groups(64), 32);
    assert_eq!(norm_groups(8), 8);
    assert_eq!(norm_groups(48), 24);
}
