//! Straight-through token embeddings: hard values forward, soft gradients back.

mod common;

use common::*;
use genrec_core::autodiff::{Graph, Var};
use genrec_core::nn;
use genrec_core::recommender::{mixed_representation, Dropout, Example, Recommender, TokenSource};
use genrec_core::tokenizer::RqTokenizer;
use genrec_core::Tensor;
use rand::Rng;

#[test]
fn mixed_forward_equals_hard_forward_over_random_draws() {
    for draw in 0..100u64 {
        let mut rng = nn::seeded(draw);
        let (levels, k, t) = (2 + (draw % 2) as usize, 3 + (draw % 3) as usize, 3);
        let tok = tokenizer(draw, tok_config(levels, k, 5, 4, &[6]));
        let rec = tiny_recommender(draw + 500, levels, k, t);
        let n = rng.random_range(3..8);
        let emb = gaussian_rows(&mut rng, n, 5, 1.0);
        let batch = random_examples(&mut rng, 4, n, t);
        let ids = tok.tokenize_catalog(&emb).unwrap().identifiers;

        let mut g = Graph::new();
        let phi = tok.params.bind(&mut g, true);
        let theta = rec.params.bind(&mut g, true);
        let src = TokenSource::Mixed { tokenizer: &tok, phi: &phi, embeddings: &emb };
        let mixed = rec.recommendation_loss(&mut g, &theta, &batch, src, &mut Dropout::off()).unwrap();
        let hard = rec.loss_value(&batch, &ids).unwrap();
        assert_eq!(g.value(mixed).item().to_bits(), hard.to_bits(), "draw {draw}");
        let grads = g.gradients(mixed, &phi).unwrap();
        let moved = grads.iter().filter(|(name, _)| name.starts_with("codebook") || name.starts_with("encoder")).any(|(_, t)| t.data().iter().any(|&x| x != 0.0));
        assert!(moved, "draw {draw}: no gradient reached the tokenizer");
        assert!(grads.iter().filter(|(n, _)| n.starts_with("decoder")).all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    }
}

/// One full-length example with assignment probabilities as leaves. With
/// `soft_offset`, each token embedding is `hard + (P − P₀)·E` built from
/// plain ops: its value equals the hard embedding at `P₀` and its
/// derivative is what the straight-through estimator must return.
fn probability_loss(rec: &Recommender, g: &mut Graph, probs: &[Tensor], base: &[Tensor], codes: &[Vec<usize>], target: &[usize], soft_offset: bool) -> (Var, Vec<Var>) {
    let v = rec.vocab;
    let (levels, k) = (v.levels, v.codebook_size);
    let theta = rec.params.bind(g, false);
    let table = theta.var("embed.tokens").unwrap();
    let leaves: Vec<Var> = probs.iter().map(|p| g.leaf(p.clone())).collect();
    let row = |g: &mut Graph, slot: usize, level: usize, code: usize| -> Var {
        let padded = g.pad_cols(leaves[slot], level * k, v.size()).unwrap();
        if soft_offset {
            let b = g.constant(base[slot].clone());
            let b = g.pad_cols(b, level * k, v.size()).unwrap();
            let hard = g.gather_rows(table, &[v.token(level, code).unwrap()]).unwrap();
            let d = g.sub(padded, b).unwrap();
            let s = g.matmul(d, table).unwrap();
            g.add(hard, s).unwrap()
        } else {
            mixed_representation(g, v.token(level, code).unwrap(), padded, table).unwrap()
        }
    };
    let mut xs = Vec::new();
    for (i, c) in codes.iter().enumerate() {
        for l in 0..levels {
            xs.push(row(g, i * levels + l, l, c[l]));
        }
    }
    let x = g.concat_rows(&xs).unwrap();
    let hist_slots = codes.len() * levels;
    let mut ys = vec![g.gather_rows(table, &[v.bos()]).unwrap()];
    for l in 0..levels - 1 {
        ys.push(row(g, hist_slots + l, l, target[l]));
    }
    let y = g.concat_rows(&ys).unwrap();
    let n = codes.len() * levels;
    let positions: Vec<usize> = (0..n).collect();
    let pad = vec![false; n];
    let enc = rec.encode(g, &theta, x, &positions, &pad, &mut Dropout::off()).unwrap();
    let dec = rec.decode(g, &theta, enc, &pad, y, &mut Dropout::off()).unwrap();
    let logits = rec.score(g, &theta, dec).unwrap();
    let tokens: Vec<usize> = target.iter().enumerate().map(|(l, &c)| v.token(l, c).unwrap()).collect();
    (g.nll(logits, &tokens).unwrap(), leaves)
}

#[test]
fn probability_gradients_match_finite_differences() {
    let (levels, k, t) = (2, 3, 2);
    for seed in 0..5u64 {
        let mut rng = nn::seeded(seed + 40);
        let tok: RqTokenizer = tokenizer(seed, tok_config(levels, k, 4, 3, &[]));
        let rec = tiny_recommender(seed + 90, levels, k, t);
        let emb = gaussian_rows(&mut rng, t + 1, 4, 1.0);
        let traces: Vec<_> = emb.iter().map(|z| tok.quantize(&tok.encode(z).unwrap()).unwrap()).collect();
        let codes: Vec<Vec<usize>> = traces[..t].iter().map(|tr| tr.identifier.tokens().to_vec()).collect();
        let target = traces[t].identifier.tokens().to_vec();
        let mut base = Vec::new();
        for tr in &traces[..t] {
            for l in 0..levels {
                base.push(Tensor::matrix(1, k, tr.probs[l].clone()).unwrap());
            }
        }
        for l in 0..levels - 1 {
            base.push(Tensor::matrix(1, k, traces[t].probs[l].clone()).unwrap());
        }

        let mut g = Graph::new();
        let (loss, leaves) = probability_loss(&rec, &mut g, &base, &base, &codes, &target, false);
        let ex = Example { history: (0..t).collect(), target: t };
        let ids: Vec<_> = traces.iter().map(|tr| tr.identifier.clone()).collect();
        assert_eq!(g.value(loss).item().to_bits(), rec.loss_value(&[ex], &ids).unwrap().to_bits());
        let grads = g.backward(loss, &leaves, false).unwrap();
        let mut any_nonzero = false;
        for (slot, gv) in grads.iter().enumerate() {
            let a = g.value(gv.unwrap()).clone();
            for j in 0..k {
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    p[slot].data_mut()[j] += delta;
                    let mut g = Graph::new();
                    let (l, _) = probability_loss(&rec, &mut g, &p, &base, &codes, &target, true);
                    g.value(l).item()
                };
                let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                let x = a.data()[j];
                any_nonzero |= x != 0.0;
                assert!((x - fd).abs() <= 1e-6f64.max(1e-4 * fd.abs()), "seed {seed} slot {slot} code {j}: {x} vs {fd}");
            }
        }
        assert!(any_nonzero);
    }
}
