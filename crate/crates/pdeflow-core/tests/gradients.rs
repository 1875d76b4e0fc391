//! Finite-difference validation of every learned module in f64: AdaLN,
//! feed-forward, attention, the condition encoder, and the full tiny
//! denoiser velocity loss.

use std::rc::Rc;

use pdeflow_core::field::{canonicalize, ChannelVocabulary, DimType, PatchSize};
use pdeflow_core::model::{init_model_params, ModelConfig, ModelPreset};
use pdeflow_core::nn::{
    adaln_modulate, feedforward, grad_check, multihead_attention, Ctx, GradMap, ParamStore,
};
use pdeflow_core::rope::RopeConfig;
use pdeflow_core::tensor::Tensor;
use pdeflow_core::train::{flow_loss_graph, load_window, WindowPair, WindowRef};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>() - 0.5).collect())
}

#[test]
fn adaln_gradients_match_finite_differences() {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamStore::new();
    params.insert("gamma", rand_tensor(&[1, d], &mut rng));
    params.insert("beta", rand_tensor(&[1, d], &mut rng));
    // cond enters as a parameter so d(loss)/d(cond) is checked too
    params.insert("cond", rand_tensor(&[1, d], &mut rng));
    let x = rand_tensor(&[1, 3, d], &mut rng);
    let f = |p: &ParamStore<f64>| -> (f64, GradMap<f64>) {
        let mut ctx = Ctx::new(p);
        let xid = ctx.c(x.clone());
        let gamma0 = ctx.p("gamma");
        let cond = ctx.p("cond");
        // make gamma/beta depend on cond so the conditioning path is live
        let gamma = ctx.tape.add(gamma0, cond);
        let beta = ctx.p("beta");
        let y = adaln_modulate(&mut ctx, xid, gamma, beta);
        let sq = ctx.tape.mul(y, y);
        let loss = ctx.tape.sum_all(sq);
        (ctx.tape.value(loss).data()[0], ctx.grads(loss))
    };
    let err = grad_check(f, &params, 40, 1).unwrap();
    assert!(err < TOL, "adaln rel err {err}");
}

#[test]
fn feedforward_gradients_match_finite_differences() {
    let d = 5;
    let hidden = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = ParamStore::new();
    params.insert("ffn.w1", rand_tensor(&[d, hidden], &mut rng));
    params.insert("ffn.b1", rand_tensor(&[hidden], &mut rng));
    params.insert("ffn.w2", rand_tensor(&[hidden, d], &mut rng));
    params.insert("ffn.b2", rand_tensor(&[d], &mut rng));
    let x = rand_tensor(&[2, 3, d], &mut rng);
    let f = |p: &ParamStore<f64>| -> (f64, GradMap<f64>) {
        let mut ctx = Ctx::new(p);
        let xid = ctx.c(x.clone());
        let y = feedforward(&mut ctx, "ffn", xid);
        let sq = ctx.tape.mul(y, y);
        let loss = ctx.tape.sum_all(sq);
        (ctx.tape.value(loss).data()[0], ctx.grads(loss))
    };
    let err = grad_check(f, &params, 60, 3).unwrap();
    assert!(err < TOL, "feedforward rel err {err}");
}

#[test]
fn attention_gradients_match_finite_differences() {
    let d = 8;
    let heads = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = ParamStore::new();
    for w in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("attn.{w}"), rand_tensor(&[d, d], &mut rng));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        params.insert(format!("attn.{b}"), rand_tensor(&[d], &mut rng));
    }
    let x = rand_tensor(&[1, 5, d], &mut rng);
    let rope = RopeConfig::with_equal_split(d / heads).unwrap();
    let coords: Rc<Vec<[i64; 4]>> = Rc::new((0..5).map(|i| [i, 2 * i, 0, 0]).collect());
    let f = |p: &ParamStore<f64>| -> (f64, GradMap<f64>) {
        let mut ctx = Ctx::new(p);
        let xid = ctx.c(x.clone());
        let y = multihead_attention(
            &mut ctx,
            "attn",
            xid,
            xid,
            heads,
            Some(&rope),
            Some(coords.clone()),
            Some(coords.clone()),
        );
        let sq = ctx.tape.mul(y, y);
        let loss = ctx.tape.sum_all(sq);
        (ctx.tape.value(loss).data()[0], ctx.grads(loss))
    };
    let err = grad_check(f, &params, 60, 5).unwrap();
    assert!(err < TOL, "attention rel err {err}");
}

fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::preset(ModelPreset::Tiny);
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.encoder_depth = 1;
    cfg.denoiser_depth = 1;
    cfg.time_embed_dim = 8;
    cfg.vocab = ChannelVocabulary::new(vec!["Vx".into()]).unwrap();
    cfg.patch = PatchSize::new(2, 4, 1, 1).unwrap();
    cfg.history_len = 4;
    cfg.horizon = 4;
    cfg
}

/// Breaks the zero plateaus of a fresh initialization so gradients are
/// generically nonzero everywhere.
fn roughen(params: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let t = params.get_mut(&name);
        for v in t.data_mut().iter_mut() {
            *v += 0.05 * (rng.random::<f64>() - 0.5);
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = tiny_model();
    let mut params: ParamStore<f64> = init_model_params(&cfg, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    roughen(&mut params, &mut rng);
    let raw = rand_tensor(&[cfg.history_len, 8, 1], &mut rng);
    let hist = canonicalize(&raw, &["Vx".into()], DimType::One, &cfg.vocab, cfg.patch).unwrap();
    let toks = pdeflow_core::field::patchify(&hist, cfg.patch).unwrap();
    let l = toks.len();
    let v = toks.vec_len();
    let tokens = Tensor::from_vec(&[1, l, v], toks.vectors.data().to_vec());
    let coords = Rc::new(toks.coords.clone());
    let f = |p: &ParamStore<f64>| -> (f64, GradMap<f64>) {
        let mut ctx = Ctx::new(p);
        let tok_id = ctx.c(tokens.clone());
        let out = pdeflow_core::encoder::build_encoder(&mut ctx, &cfg, tok_id, coords.clone(), DimType::One, 2)
            .unwrap();
        let sq_tok = ctx.tape.mul(out.c_tok, out.c_tok);
        let sq_g = ctx.tape.mul(out.c_g, out.c_g);
        let a = ctx.tape.sum_all(sq_tok);
        let b = ctx.tape.sum_all(sq_g);
        let loss = ctx.tape.add(a, b);
        (ctx.tape.value(loss).data()[0], ctx.grads(loss))
    };
    let err = grad_check(f, &params, 50, 7).unwrap();
    assert!(err < TOL, "encoder rel err {err}");
}

#[test]
fn full_denoiser_v_loss_gradients_match_finite_differences() {
    let cfg = tiny_model();
    let mut params: ParamStore<f64> = init_model_params(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    roughen(&mut params, &mut rng);

    // one real data window through the actual loss graph
    let spec = pdeflow_core::datagen::GenSpec {
        family: pdeflow_core::datagen::Family::Advection,
        n_traj: 1,
        grid: vec![8],
        t_steps: 8,
        dt: 0.05,
        beta: 1.0,
        beta_spread: 0.0,
        nu: 0.0,
        max_mode: 2,
        channels: 1,
        seed: 3,
    };
    let data = pdeflow_core::datagen::gen_advection(&spec).unwrap();
    let pair: WindowPair<f64> =
        load_window(&data, &cfg, WindowRef { dataset: 0, traj: 0, start: 0 }).unwrap();
    let ts = [0.35f64];
    let f = |p: &ParamStore<f64>| -> (f64, GradMap<f64>) {
        let mut ctx = Ctx::new(p);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(99);
        let pair_local = WindowPair {
            hist: pair.hist.clone(),
            fut: pair.fut.clone(),
            stats: pair.stats.clone(),
        };
        let loss_id =
            flow_loss_graph(&mut ctx, &cfg, &[pair_local], &ts, &[false], &mut noise_rng, 1e-4).unwrap();
        (ctx.tape.value(loss_id).data()[0], ctx.grads(loss_id))
    };
    let err = grad_check(f, &params, 50, 9).unwrap();
    assert!(err < TOL, "full v-loss rel err {err}");
}
