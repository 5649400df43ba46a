use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use expertformer::model::bilinear::bilinear_encoder_layer;
use expertformer::model::encoder::vit_forward_traced;
use expertformer::model::{
    argmax, decoder_forward, eba, eba_reference, generate_greedy, patchify, Bound, Decoding, EbaParams, ModelConfig,
    ModelParams, Tokens,
};
use expertformer::numeric::{Graph, Mask, Tensor};

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        channels: 3,
        patch: 4,
        dim: 8,
        heads: 2,
        vit_layers: 1,
        num_expert: 3,
        bilinear_dim: 8,
        mid_dim: 4,
        enc_layers: 1,
        dec_layers: 2,
        vocab_size: 12,
        t_max: 10,
        use_bilinear_encoder: true,
    }
}

fn params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    ModelParams::<f32>::init(cfg, seed).unwrap().cast()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn eba_weights(rng: &mut ChaCha8Rng, d: usize, dm: usize) -> Vec<Tensor<f64>> {
    vec![
        rand_t(rng, &[d, d]),
        rand_t(rng, &[d, d]),
        rand_t(rng, &[d, d]),
        rand_t(rng, &[d, d]),
        rand_t(rng, &[d, dm]),
        rand_t(rng, &[dm, 1]),
        rand_t(rng, &[dm, d]),
    ]
}

fn bind_eba<'g>(g: &'g Graph<f64>, w: &[Tensor<f64>]) -> EbaParams<'g, f64> {
    let c = |i: usize| g.constant(w[i].clone());
    EbaParams {
        w_k: c(0),
        w_v: c(1),
        w_qk: c(2),
        w_qv: c(3),
        w_bk: c(4),
        w_s: c(5),
        w_c: c(6),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn eba_attention_factors_are_normalized(seed in any::<u64>(), t_q in 1usize..6, t_k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = eba_weights(&mut rng, 4, 3);
        let g = Graph::new();
        let q = g.constant(rand_t(&mut rng, &[2, t_q, 4]));
        let kv = g.constant(rand_t(&mut rng, &[2, t_k, 4]));
        let r = eba(q, kv, kv, &bind_eba(&g, &w), None).unwrap();
        let alpha = r.alpha.to_tensor();
        for row in alpha.data().chunks(t_k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(r.beta.to_tensor().data().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn eba_ignores_masked_keys(seed in any::<u64>(), t in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = eba_weights(&mut rng, 4, 3);
        let x = rand_t(&mut rng, &[1, t, 4]);
        let mut y = x.clone();
        for j in 0..4 {
            y.set(&[0, t - 1, j], rng.random_range(-5.0..5.0));
        }
        let mask = Mask::causal(t);
        let run = |kv: &Tensor<f64>| {
            let g = Graph::new();
            let q = g.constant(x.clone());
            let kv = g.constant(kv.clone());
            eba(q, kv, kv, &bind_eba(&g, &w), Some(&mask)).unwrap().out.to_tensor()
        };
        let (a, b) = (run(&x), run(&y));
        prop_assert_eq!(&a.data()[..(t - 1) * 4], &b.data()[..(t - 1) * 4]);
    }

    #[test]
    fn eba_is_equivariant_to_query_order(seed in any::<u64>(), t_q in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = eba_weights(&mut rng, 4, 2);
        let q = rand_t(&mut rng, &[1, t_q, 4]);
        let kv = rand_t(&mut rng, &[1, 3, 4]);
        let perm: Vec<usize> = (0..t_q).rev().collect();
        let mut qp = q.clone();
        for (to, &from) in perm.iter().enumerate() {
            for j in 0..4 {
                qp.set(&[0, to, j], q.get(&[0, from, j]));
            }
        }
        let wr: [&Tensor<f64>; 7] = std::array::from_fn(|i| &w[i]);
        let run = |q: &Tensor<f64>| {
            let g = Graph::new();
            let kvv = g.constant(kv.clone());
            eba(g.constant(q.clone()), kvv, kvv, &bind_eba(&g, &w), None).unwrap().out.to_tensor()
        };
        let (a, b) = (run(&q), run(&qp));
        for (to, &from) in perm.iter().enumerate() {
            for j in 0..4 {
                prop_assert!((b.get(&[0, to, j]) - a.get(&[0, from, j])).abs() < 1e-12);
            }
        }
        prop_assert!(a.max_abs_diff(&eba_reference(&q, &kv, &kv, wr, None)) < 1e-12);
    }

    #[test]
    fn patches_reassemble_into_the_image(seed in any::<u64>(), ph in 1usize..4, pw in 1usize..4, p in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = (ph * p, pw * p, 3);
        let img = rand_t(&mut rng, &[h, w, c]);
        let patches = patchify(&img, p).unwrap();
        prop_assert_eq!(patches.shape(), &[ph * pw, p * p * c]);
        for y in 0..h {
            for x in 0..w {
                let idx = (y / p) * pw + x / p;
                for ch in 0..c {
                    let within = ((y % p) * p + x % p) * c + ch;
                    prop_assert_eq!(patches.get(&[idx, within]), img.get(&[y, x, ch]));
                }
            }
        }
    }
}

#[test]
fn bilinear_layer_matches_manual_oracle() {
    let cfg = small();
    let p = params(&cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (m, n, db) = (3, 5, cfg.bilinear_dim);
    let experts = rand_t(&mut rng, &[m, db]);
    let visual = rand_t(&mut rng, &[n, db]);
    let g = Graph::new();
    let bound = p.bind(&g, false);
    let out = bilinear_encoder_layer(g.constant(experts.clone()), g.constant(visual.clone()), &bound, "benc.layer0").unwrap();

    let get = |s: &str| p.get(&format!("benc.layer0.{s}")).unwrap().clone();
    let w: Vec<Tensor<f64>> = ["w_k", "w_v", "w_qk", "w_qv", "w_bk", "w_s", "w_c"]
        .iter()
        .map(|s| get(&format!("eba.{s}")))
        .collect();
    let wr: [&Tensor<f64>; 7] = std::array::from_fn(|i| &w[i]);
    let e3 = experts.clone().reshape(&[1, m, db]).unwrap();
    let v3 = visual.clone().reshape(&[1, n, db]).unwrap();
    let want_e = eba_reference(&e3, &v3, &v3, wr, None).reshape(&[m, db]).unwrap();
    assert!(out.experts.to_tensor().max_abs_diff(&want_e) < 1e-10);

    let (fuse, gain, bias) = (get("fuse"), get("ln.gain"), get("ln.bias"));
    let pooled: Vec<f64> = (0..db).map(|j| (0..m).map(|e| experts.get(&[e, j])).sum::<f64>() / m as f64).collect();
    let got_v = out.visual.to_tensor();
    for t in 0..n {
        let concat: Vec<f64> = pooled.iter().copied().chain((0..db).map(|j| visual.get(&[t, j]))).collect();
        let row: Vec<f64> = (0..db)
            .map(|j| (0..2 * db).map(|i| concat[i] * fuse.get(&[i, j])).sum::<f64>() + visual.get(&[t, j]))
            .collect();
        let mean = row.iter().sum::<f64>() / db as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / db as f64;
        for j in 0..db {
            let want = (row[j] - mean) / (var + 1e-5).sqrt() * gain.get(&[j]) + bias.get(&[j]);
            assert!((got_v.get(&[t, j]) - want).abs() < 1e-10);
        }
    }
}

fn logits(p: &ModelParams<f64>, cfg: &ModelConfig, f_e: &Tensor<f64>, f_v: &Tensor<f64>, ids: &[usize]) -> Tensor<f64> {
    let g = Graph::new();
    let b = p.bind(&g, false);
    decoder_forward(g.constant(f_e.clone()), g.constant(f_v.clone()), Tokens::Shared(ids), &b, cfg)
        .unwrap()
        .to_tensor()
}

#[test]
fn identical_experts_give_identical_logits() {
    let cfg = small();
    let p = params(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let row = rand_t(&mut rng, &[1, cfg.bilinear_dim]);
    let f_e = Tensor::new(&[3, cfg.bilinear_dim], row.data().repeat(3)).unwrap();
    let f_v = rand_t(&mut rng, &[4, cfg.bilinear_dim]);
    let l = logits(&p, &cfg, &f_e, &f_v, &[1, 5, 6, 7]);
    let per = 4 * cfg.vocab_size;
    for e in 1..3 {
        for i in 0..per {
            assert!((l.data()[e * per + i] - l.data()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_is_equivariant_to_expert_order() {
    let cfg = small();
    let p = params(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f_e = rand_t(&mut rng, &[3, cfg.bilinear_dim]);
    let f_v = rand_t(&mut rng, &[4, cfg.bilinear_dim]);
    let perm = [2, 0, 1];
    let db = cfg.bilinear_dim;
    let permuted: Vec<f64> = perm.iter().flat_map(|&e| f_e.data()[e * db..(e + 1) * db].to_vec()).collect();
    let f_ep = Tensor::new(&[3, db], permuted).unwrap();
    let ids = [1, 4, 9, 3, 3];
    let (a, b) = (logits(&p, &cfg, &f_e, &f_v, &ids), logits(&p, &cfg, &f_ep, &f_v, &ids));
    let per = ids.len() * cfg.vocab_size;
    for (to, &from) in perm.iter().enumerate() {
        for i in 0..per {
            assert!((b.data()[to * per + i] - a.data()[from * per + i]).abs() < 1e-12);
        }
    }
}

#[test]
fn perturbing_a_token_changes_later_positions() {
    let cfg = small();
    let p = params(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f_e = rand_t(&mut rng, &[3, cfg.bilinear_dim]);
    let f_v = rand_t(&mut rng, &[4, cfg.bilinear_dim]);
    let a = logits(&p, &cfg, &f_e, &f_v, &[1, 4, 5, 6]);
    let b = logits(&p, &cfg, &f_e, &f_v, &[1, 4, 8, 6]);
    let v = cfg.vocab_size;
    assert_eq!(a.data()[..2 * v], b.data()[..2 * v]);
    assert_ne!(a.data()[2 * v..3 * v], b.data()[2 * v..3 * v]);
}

#[test]
fn logits_softmax_to_distributions() {
    let cfg = small();
    let p = params(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f_e = rand_t(&mut rng, &[3, cfg.bilinear_dim]);
    let f_v = rand_t(&mut rng, &[4, cfg.bilinear_dim]);
    let g = Graph::new();
    let probs = g.constant(logits(&p, &cfg, &f_e, &f_v, &[1, 2, 3])).softmax().unwrap().to_tensor();
    for row in probs.data().chunks(cfg.vocab_size) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn greedy_output_is_the_argmax_of_its_own_prefix() {
    let cfg = small();
    for seed in 0..4 {
        let p = params(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f_e = rand_t(&mut rng, &[3, cfg.bilinear_dim]);
        let f_v = rand_t(&mut rng, &[4, cfg.bilinear_dim]);
        let out = generate_greedy(&p, &cfg, &f_e, &f_v, Decoding::PerExpert).unwrap();
        let db = cfg.bilinear_dim;
        for (e, seq) in out.iter().enumerate() {
            assert!(!seq.is_empty() && seq.len() < cfg.t_max);
            let row = Tensor::new(&[1, db], f_e.data()[e * db..(e + 1) * db].to_vec()).unwrap();
            let mut input = vec![expertformer::data::BOS];
            input.extend(&seq[..seq.len() - 1]);
            let l = logits(&p, &cfg, &row, &f_v, &input);
            for (pos, &tok) in seq.iter().enumerate() {
                let v = cfg.vocab_size;
                assert_eq!(argmax(&l.data()[pos * v..(pos + 1) * v]), tok, "seed {seed} expert {e} pos {pos}");
            }
        }
    }
}

#[test]
fn averaged_decoding_shares_one_stream() {
    let cfg = small();
    let p = params(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f_e = rand_t(&mut rng, &[3, cfg.bilinear_dim]);
    let f_v = rand_t(&mut rng, &[4, cfg.bilinear_dim]);
    let out = generate_greedy(&p, &cfg, &f_e, &f_v, Decoding::Averaged).unwrap();
    assert!(out.iter().all(|s| s == &out[0]));
}

#[test]
fn zero_output_head_gives_identical_streams() {
    let cfg = small();
    let mut p = params(&cfg, 7);
    let v = cfg.vocab_size;
    *p.get_mut("dec.out.weight").unwrap() = Tensor::zeros(&[cfg.bilinear_dim, v]);
    let bias: Vec<f64> = (0..v).map(|i| if i == 6 { 1.0 } else { 0.0 }).collect();
    *p.get_mut("dec.out.bias").unwrap() = Tensor::new(&[v], bias).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f_e = rand_t(&mut rng, &[3, cfg.bilinear_dim]);
    let f_v = rand_t(&mut rng, &[4, cfg.bilinear_dim]);
    let out = generate_greedy(&p, &cfg, &f_e, &f_v, Decoding::PerExpert).unwrap();
    for s in &out {
        assert_eq!(s, &vec![6; cfg.t_max - 1]);
    }
}

#[test]
fn vit_attention_rows_sum_to_one() {
    let cfg = small();
    let p = params(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = rand_t(&mut rng, &[16, 16, 3]).map(f64::abs);
    let g = Graph::new();
    let b = p.bind(&g, false);
    let (enc, maps) = vit_forward_traced(&g, &b, &img, &cfg).unwrap();
    assert_eq!(enc.visual.shape(), vec![cfg.num_patches(), cfg.dim]);
    assert_eq!(enc.experts.shape(), vec![cfg.num_expert, cfg.dim]);
    let tokens = cfg.num_patches() + cfg.num_expert;
    for map in maps {
        let t = map.to_tensor();
        assert_eq!(t.shape(), &[cfg.heads, tokens, tokens]);
        for row in t.data().chunks(tokens) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_rejects_overlong_or_empty_input() {
    let cfg = small();
    let p = params(&cfg, 9);
    let g = Graph::new();
    let b: Bound<f64> = p.bind(&g, false);
    let f = g.constant(Tensor::zeros(&[3, cfg.bilinear_dim]));
    let long = vec![1; cfg.t_max + 1];
    assert!(decoder_forward(f, f, Tokens::Shared(&long), &b, &cfg).is_err());
    assert!(decoder_forward(f, f, Tokens::Shared(&[]), &b, &cfg).is_err());
}
