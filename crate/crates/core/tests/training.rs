//! Training-loop checks against hand-written references.

use std::collections::BTreeSet;

use pgprec::encoder::{EncoderParams, LayerWeights};
use pgprec::graph::{build_graph, GraphView, InteractionGraph};
use pgprec::numerics::Tensor;
use pgprec::trainer::{
    pretrain, probe_gradients, sample_triplets, sub_seed, Checkpoint, Model, TrainConfig, Triplet,
    Views, SEED_INIT, SEED_TRIPLETS, SEED_VIEW_A, SEED_VIEW_B,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Rows = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mv(w: &Tensor, h: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| (0..w.cols()).map(|c| w.get(r, c) * h[c]).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One attention layer for every node on one side, from an explicit edge list.
fn side(own: &Rows, other: &Rows, nbrs: &[Vec<usize>], w: &LayerWeights) -> Rows {
    (0..own.len())
        .map(|n| {
            let mut out = mv(&w.w_u, &own[n]);
            if nbrs[n].is_empty() {
                return out;
            }
            let q = mv(&w.w_q, &own[n]);
            let logits: Vec<f64> = nbrs[n]
                .iter()
                .map(|&j| dot(&q, &mv(&w.w_k, &other[j])))
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (&j, l) in nbrs[n].iter().zip(&logits) {
                let v = mv(&w.w_v, &other[j]);
                for (o, x) in out.iter_mut().zip(v) {
                    *o += l.exp() / z * x;
                }
            }
            out
        })
        .collect()
}

/// Mean-of-layers user and item representations over `edges`.
fn encode_ref(p: &EncoderParams, edges: &[(u32, u32)]) -> (Rows, Rows) {
    let (nu, ni) = (p.n_users(), p.n_items());
    let mut un = vec![Vec::new(); nu];
    let mut inb = vec![Vec::new(); ni];
    for &(u, i) in edges {
        un[u as usize].push(i as usize);
        inb[i as usize].push(u as usize);
    }
    let (mut hu, mut hi) = (rows(&p.user_embeddings), rows(&p.item_embeddings));
    let (mut su, mut si) = (hu.clone(), hi.clone());
    for w in &p.layers {
        let nu_next = side(&hu, &hi, &un, w);
        let ni_next = side(&hi, &hu, &inb, w);
        (hu, hi) = (nu_next, ni_next);
        for (s, h) in su.iter_mut().zip(&hu).chain(si.iter_mut().zip(&hi)) {
            s.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        }
    }
    let l = (p.layers.len() + 1) as f64;
    let mean = |s: Rows| {
        s.into_iter()
            .map(|r| r.into_iter().map(|x| x / l).collect())
            .collect()
    };
    (mean(su), mean(si))
}

fn infonce_ref(a: &Rows, b: &Rows, ids: &[usize], tau: f64) -> f64 {
    let per: Vec<f64> = ids
        .iter()
        .map(|&q| {
            let z: f64 = ids.iter().map(|&j| (dot(&a[q], &b[j]) / tau).exp()).sum();
            z.ln() - dot(&a[q], &b[q]) / tau
        })
        .collect();
    per.iter().sum::<f64>() / ids.len() as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// First-epoch joint loss of a single-batch pre-training run, written out by hand.
fn first_epoch_ref(g: &InteractionGraph, cfg: &TrainConfig) -> f64 {
    let p = EncoderParams::init(
        g.n_users(),
        g.n_items(),
        cfg.d,
        cfg.n_layers,
        sub_seed(cfg.seed, SEED_INIT),
    )
    .unwrap();
    let batch = sample_triplets(g, g.n_edges(), sub_seed(cfg.seed, SEED_TRIPLETS + 1));
    let (eu, ei) = encode_ref(&p, g.edges());
    let rec = batch
        .iter()
        .map(|t| {
            let (u, i, j) = (
                &eu[t.user as usize],
                &ei[t.pos as usize],
                &ei[t.neg as usize],
            );
            -sigmoid(dot(u, i) - dot(u, j)).ln()
        })
        .sum::<f64>()
        / batch.len() as f64;
    let users: Vec<usize> = batch
        .iter()
        .map(|t| t.user as usize)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let items: Vec<usize> = batch
        .iter()
        .map(|t| t.pos as usize)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut cl = 0.0;
    if users.len() >= 2 && items.len() >= 2 {
        let seeds = (
            sub_seed(cfg.seed, SEED_VIEW_A + 1),
            sub_seed(cfg.seed, SEED_VIEW_B + 1),
        );
        let views = Views::draw(g, cfg.rho, seeds, None).unwrap();
        let kept = |mask: &[bool]| -> Vec<(u32, u32)> {
            g.edges()
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(e, _)| *e)
                .collect()
        };
        let (ua, ia) = encode_ref(&p, &kept(views.a.mask()));
        let (ub, ib) = encode_ref(&p, &kept(views.b.mask()));
        cl = infonce_ref(&ua, &ub, &users, cfg.tau) + infonce_ref(&ia, &ib, &items, cfg.tau);
    }
    let l2: f64 = p
        .tensors()
        .iter()
        .map(|t| t.as_slice().iter().map(|x| x * x).sum::<f64>())
        .sum();
    rec + cfg.lambda1 * cl + cfg.lambda2 * l2
}

#[test]
fn first_epoch_loss_matches_hand_unrolled_reference() {
    let g = build_graph(&[(0, 0), (1, 1)], 2, 2).unwrap();
    let mut contrasted = 0;
    for seed in 0..6 {
        let cfg = TrainConfig {
            d: 3,
            n_layers: 2,
            max_epochs: 1,
            lambda2: 0.1,
            rho: 0.3,
            seed,
            ..TrainConfig::default()
        };
        let run = pretrain(&g, &[], &cfg).unwrap();
        let expected = first_epoch_ref(&g, &cfg);
        let got = run.logs[0].loss.total;
        assert!(
            (got - expected).abs() < 1e-9,
            "seed {seed}: {got} vs {expected}"
        );
        contrasted += usize::from(run.logs[0].loss.cl_user > 0.0);
    }
    assert!(contrasted > 0, "no seed exercised the contrastive term");
}

#[test]
fn negatives_are_uniform_over_non_interacted_items() {
    // One user with 3 of 13 items; 10 candidate negatives.
    let g = build_graph(&[(0, 2), (0, 5), (0, 11)], 1, 13).unwrap();
    let n = 20_000;
    let mut counts = [0usize; 13];
    for t in sample_triplets(&g, n, 17) {
        counts[t.neg as usize] += 1;
    }
    for i in [2, 5, 11] {
        assert_eq!(counts[i], 0);
    }
    let expected = n as f64 / 10.0;
    let chi2: f64 = (0..13)
        .filter(|i| ![2, 5, 11].contains(i))
        .map(|i| (counts[i] as f64 - expected).powi(2) / expected)
        .sum();
    let p = ChiSquared::new(9.0).unwrap().sf(chi2);
    assert!(p > 0.001, "chi2 {chi2}, p {p}");
}

fn random_graph(n_users: usize, n_items: usize, per_user: usize, seed: u64) -> InteractionGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = BTreeSet::new();
    for u in 0..n_users as u32 {
        while edges.range((u, 0)..(u + 1, 0)).count() < per_user {
            edges.insert((u, rng.gen_range(0..n_items as u32)));
        }
    }
    build_graph(&edges.into_iter().collect::<Vec<_>>(), n_users, n_items).unwrap()
}

#[test]
fn contrastive_loss_falls_during_training() {
    let g = random_graph(50, 40, 4, 3);
    let cfg = TrainConfig {
        lr: 1e-2,
        d: 16,
        n_layers: 2,
        max_epochs: 30,
        ..TrainConfig::default()
    };
    let logs = pretrain(&g, &[], &cfg).unwrap().logs;
    let cl = |e: usize| logs[e].loss.cl_user + logs[e].loss.cl_item;
    assert_eq!(logs.len(), 30);
    assert!(cl(29) < cl(0), "{} vs {}", cl(29), cl(0));
    assert!(logs[29].loss.rec < logs[0].loss.rec);
}

#[test]
fn checkpoint_file_round_trip() {
    let g = random_graph(8, 6, 2, 1);
    let cfg = TrainConfig {
        d: 4,
        n_layers: 1,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let ck = pretrain(&g, &[], &cfg).unwrap().checkpoint(cfg.seed);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.pgpr");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradients_reach_exactly_the_trainable_tensors(mask in proptest::collection::vec(any::<bool>(), 6), seed in 0u64..1000) {
        let g = random_graph(6, 5, 2, seed);
        let cfg = TrainConfig { d: 3, n_layers: 1, lambda2: 0.1, seed, ..TrainConfig::default() };
        let mut params = EncoderParams::init(6, 5, 3, 1, seed).unwrap();
        params.trainable = mask.clone();
        let model = Model { params, prompts: None };
        let batch: Vec<Triplet> = sample_triplets(&g, 8, seed);
        let probed: Vec<String> = probe_gradients(&model, &g, &batch, &cfg).unwrap().into_iter().map(|c| c.name).collect();
        prop_assert_eq!(probed, model.trainable_names());
    }
}
