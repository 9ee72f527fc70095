use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::compute::gradcheck::{check_gradients, jitter};
use crate::compute::{Graph, ParamBuilder, ParamStore, Tensor};
use crate::conditioning::{pos_embed, ConditionBundle};
use crate::geometry::{collage_features, PatchMap};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_unet(seed: u64) -> (ParamStore, UNet) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let net = UNet::new(&mut ParamBuilder::new(&mut store, &mut r).sub("unet"), UNetConfig::toy()).unwrap();
    (store, net)
}

fn bundle(cfg: &UNetConfig, t: usize, u: f64, v: f64) -> ConditionBundle {
    let global = Tensor::from_fn(&[cfg.cond_dim], |k| (k as f64 * 0.37).sin() * 0.5);
    ConditionBundle::new(t, pos_embed(u, v, cfg.pos_dim).unwrap(), global)
}

#[test]
fn full_size_stack_shapes() {
    let cfg = UNetConfig::default();
    cfg.validate().unwrap();
    assert_eq!(
        cfg.stack_shapes(),
        vec![[64, 64, 64], [128, 32, 32], [256, 16, 16], [512, 8, 8]]
    );
}

#[test]
fn encoder_emits_configured_stack() {
    let (store, net) = toy_unet(1);
    let cfg = net.config().clone();
    let patch = Tensor::randn(&[3, 16, 16], &mut rng(2));
    let stack = net.encode_patch(&store, &patch, &bundle(&cfg, 10, 0.0, 0.25)).unwrap();
    let shapes: Vec<Vec<usize>> = stack.levels().iter().map(|z| z.shape().to_vec()).collect();
    let expect: Vec<Vec<usize>> = cfg.stack_shapes().iter().map(|s| s.to_vec()).collect();
    assert_eq!(shapes, expect);
}

#[test]
fn encode_decode_deterministic_and_sensitive() {
    let (mut store, net) = toy_unet(3);
    jitter(&mut store, 0.05, &mut rng(4));
    let cfg = net.config().clone();
    let b = bundle(&cfg, 100, 0.5, 0.5);
    let patch = Tensor::randn(&[3, 16, 16], &mut rng(5));
    let a = net.encode_patch(&store, &patch, &b).unwrap();
    assert_eq!(a, net.encode_patch(&store, &patch, &b).unwrap());
    let mut nudged = patch.clone();
    nudged.data_mut()[17] += 0.1;
    assert_ne!(a, net.encode_patch(&store, &nudged, &b).unwrap());

    let out = net.decode_collaged(&store, &a, &b).unwrap();
    assert_eq!(out.shape(), &[3, 16, 16]);
    assert_eq!(out, net.decode_collaged(&store, &a, &b).unwrap());
}

#[test]
fn zero_initialized_output() {
    let (store, net) = toy_unet(6);
    let cfg = net.config().clone();
    let b = bundle(&cfg, 500, 0.0, 0.0);
    let stack = net.encode_patch(&store, &Tensor::randn(&[3, 16, 16], &mut rng(7)), &b).unwrap();
    let out = net.decode_collaged(&store, &stack, &b).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors() {
    let (store, net) = toy_unet(8);
    let cfg = net.config().clone();
    let b = bundle(&cfg, 1, 0.0, 0.0);
    let bad = Tensor::zeros(&[3, 16, 8]);
    assert!(matches!(net.encode_patch(&store, &bad, &b), Err(crate::Error::Dimension(_))));
    let stack = FeatureStack(vec![Tensor::zeros(&[8, 16, 16])]);
    assert!(matches!(net.decode_collaged(&store, &stack, &b), Err(crate::Error::Dimension(_))));
    assert!(UNetConfig { patch: 8, ..UNetConfig::toy() }.validate().is_err());
}

#[test]
fn graph_collage_matches_tensor_collage() {
    let (mut store, net) = toy_unet(9);
    jitter(&mut store, 0.05, &mut rng(10));
    let cfg = net.config().clone();
    let patches: Vec<Tensor> = (0..4).map(|k| Tensor::randn(&[3, 16, 16], &mut rng(20 + k))).collect();
    let b = bundle(&cfg, 50, 0.0, 0.0);

    let mut tensors = PatchMap::new(2, 2);
    for (k, p) in patches.iter().enumerate() {
        tensors.insert(k / 2, k % 2, net.encode_patch(&store, p, &b).unwrap()).unwrap();
    }
    let expect = collage_features(&tensors, 0, 0).unwrap();

    let mut g = Graph::new(&store);
    let c = net.bundle_vars(&mut g, &b).unwrap();
    let mut vars = PatchMap::new(2, 2);
    for (k, p) in patches.iter().enumerate() {
        let x = g.input(p.clone());
        vars.insert(k / 2, k % 2, net.encode(&mut g, x, c).unwrap()).unwrap();
    }
    let got = collage_vars(&mut g, &vars, 0, 0).unwrap();
    for (v, e) in got.iter().zip(expect.levels()) {
        assert_eq!(g.value(*v), e);
    }
}

#[test]
fn encode_collage_decode_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(11);
    let net = UNet::new(&mut ParamBuilder::new(&mut store, &mut r).sub("unet"), UNetConfig::toy()).unwrap();
    let code = store.add("code", Tensor::randn(&[512], &mut r).scale(0.3)).unwrap();
    jitter(&mut store, 0.05, &mut r);
    let cfg = net.config().clone();
    let patches: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[3, 16, 16], &mut r)).collect();
    let target = Tensor::randn(&[3, 16, 16], &mut r);

    let report = check_gradients(
        &store,
        |g| {
            let temb = net.time_embedding(g, 300)?;
            let global = g.param(code);
            let mut z = PatchMap::new(2, 2);
            for (k, p) in patches.iter().enumerate() {
                let pos = pos_embed(k as f64 * 0.3, 0.1, cfg.pos_dim)?;
                let c = net.cond_vars(g, temb, Some(&pos), Some(global))?;
                let x = g.input(p.clone());
                z.insert(k / 2, k % 2, net.encode(g, x, c)?)?;
            }
            let zc = collage_vars(g, &z, 0, 0)?;
            let c = net.cond_vars(g, temb, None, Some(global))?;
            let out = net.decode(g, &zc, c)?;
            g.mse_to(out, target.clone())
        },
        |_| true,
        200,
        1e-4,
        1e-3,
        &mut rng(12),
    )
    .unwrap();
    assert!(report.pass_fraction() >= 0.95, "{report:?}");
}

#[test]
fn semantic_encoder_codes() {
    let mut store = ParamStore::new();
    let mut r = rng(13);
    let enc = SemanticEncoder::new(&mut ParamBuilder::new(&mut store, &mut r).sub("sem"), SemanticEncoderConfig::toy()).unwrap();
    let a = Tensor::randn(&[3, 64, 64], &mut r).clamp(-1.0, 1.0);
    let b = Tensor::randn(&[3, 64, 64], &mut r).clamp(-1.0, 1.0);
    let ca = enc.semantic_encode(&store, &a).unwrap();
    assert_eq!(ca.shape(), &[512]);
    assert_eq!(ca, enc.semantic_encode(&store, &a).unwrap());
    assert!(ca.max_abs_diff(&enc.semantic_encode(&store, &b).unwrap()).unwrap() > 1e-9);
    assert!(enc.semantic_encode(&store, &Tensor::zeros(&[3, 32, 32])).is_err());
    assert_eq!(SemanticEncoderConfig::default().channel_mult, vec![1, 2, 4, 8, 8]);
}

#[test]
fn semantic_encoder_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(14);
    let cfg = SemanticEncoderConfig {
        image_size: 16,
        channel_mult: vec![1, 2],
        attention_resolutions: vec![8],
        ..SemanticEncoderConfig::toy()
    };
    let enc = SemanticEncoder::new(&mut ParamBuilder::new(&mut store, &mut r), cfg).unwrap();
    jitter(&mut store, 0.05, &mut r);
    let img = Tensor::randn(&[3, 16, 16], &mut r);
    let target = Tensor::randn(&[512], &mut r);
    let report = check_gradients(
        &store,
        |g| {
            let x = g.input(img.clone());
            let c = enc.forward(g, x)?;
            g.mse_to(c, target.clone())
        },
        |_| true,
        200,
        1e-4,
        1e-3,
        &mut rng(15),
    )
    .unwrap();
    assert!(report.pass_fraction() >= 0.95, "{report:?}");
}

#[test]
fn latent_denoiser_shapes_and_gradients() {
    let mut store = ParamStore::new();
    let mut r = rng(16);
    let cfg = LatentDenoiserConfig {
        hidden: 32,
        ..LatentDenoiserConfig::toy()
    };
    let net = LatentDenoiser::new(&mut ParamBuilder::new(&mut store, &mut r), cfg).unwrap();
    let z = Tensor::randn(&[512], &mut r);
    let out = net.latent_denoise(&store, &z, 10).unwrap();
    assert_eq!(out.shape(), &[512]);
    assert!(out.data().iter().all(|&v| v == 0.0));
    jitter(&mut store, 0.05, &mut r);
    let out = net.latent_denoise(&store, &z, 10).unwrap();
    assert_eq!(out, net.latent_denoise(&store, &z, 10).unwrap());
    assert!(net.latent_denoise(&store, &Tensor::zeros(&[100]), 10).is_err());

    let batch = Tensor::randn(&[3, 512], &mut r);
    let target = Tensor::randn(&[3, 512], &mut r);
    let report = check_gradients(
        &store,
        |g| {
            let x = g.input(batch.clone());
            let y = net.forward(g, x, &[5, 500, 999])?;
            g.mse_to(y, target.clone())
        },
        |_| true,
        200,
        1e-4,
        1e-3,
        &mut rng(17),
    )
    .unwrap();
    assert!(report.pass_fraction() >= 0.95, "{report:?}");
}

#[test]
fn parameter_count_ignores_grid() {
    let count = |rows: usize, cols: usize| {
        let (store, net) = toy_unet(18);
        let cfg = net.config().clone();
        // Instantiating for a grid touches nothing but patch-sized shapes.
        let img = Tensor::zeros(&[3, rows * cfg.patch, cols * cfg.patch]);
        let p = img.crop(0, 0, cfg.patch, cfg.patch).unwrap();
        net.encode_patch(&store, &p, &bundle(&cfg, 1, 0.0, 0.0)).unwrap();
        store.count_prefix("unet")
    };
    assert_eq!(count(4, 4), count(16, 8));
}
