//! Acceptance criteria, checked end to end. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::sync::Arc;
use std::time::Instant;

use pgprec::dataset::{
    align_domains, generate_synthetic_pair, label_cold_start, split_holdout, SplitRatio, SplitSet,
    SynthConfig, SyntheticPair, UserGroup,
};
use pgprec::encoder::{encode_on_tape, prefix_attention_check, EncoderParams, EncoderVars};
use pgprec::eval::{
    evaluate, evaluate_with, holm_bonferroni, paired_t_test, tost_equivalence, EvalReport,
};
use pgprec::graph::{build_graph, GraphView, InteractionGraph};
use pgprec::losses::{bpr_on_tape, infonce_on_tape, joint_on_tape, l2_on_tape};
use pgprec::numerics::{finite_diff_check, xavier_init, Tensor};
use pgprec::prompts::{RelationIndex, TuneScope};
use pgprec::trainer::{
    fine_tune_baseline, initial_prompt_model, pretrain, prompt_tune, sub_seed, target_model,
    Checkpoint, TrainConfig, SEED_SOURCE_SPLIT, SEED_TARGET_SPLIT,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const PREFIX_TOL: f64 = 1e-10;
const PREFIX_INSTANCES: u64 = 100;
const PREFIX_SECONDS: f64 = 5.0;
const GRAD_TOL: f64 = 1e-6;
const GRAD_SEEDS: u64 = 20;
const GRAD_EPS: f64 = 1e-5;
const GRAD_SECONDS: f64 = 30.0;
const FREEZE_EPOCHS: usize = 20;
const FREEZE_SECONDS: f64 = 120.0;
const PARAM_RATIO_MAX: f64 = 0.5;
const TIMING_RUNS: usize = 3;
const TIMING_EPOCHS: usize = 5;
const ALPHA: f64 = 0.05;
const MIN_EVAL_USERS: usize = 200;
const EFFECT_SECONDS: f64 = 600.0;
const METRIC_TOL: f64 = 1e-12;
const STAT_TOL: f64 = 1e-4;
const COLD_THRESHOLD: usize = 5;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn digest(t: &Tensor) -> [u8; 32] {
    let mut h = Sha256::new();
    for x in t.as_slice() {
        h.update(x.to_le_bytes());
    }
    h.finalize().into()
}

/// Source and target graphs, splits and a pre-trained checkpoint.
struct Prepared {
    pair: SyntheticPair,
    target_items: Vec<String>,
    target_split: SplitSet,
    target_train: InteractionGraph,
    checkpoint: Checkpoint,
    pretrain_seconds: f64,
}

impl Prepared {
    fn new(synth: &SynthConfig, cfg: &TrainConfig) -> Prepared {
        let start = Instant::now();
        let pair = generate_synthetic_pair(synth).unwrap();
        let dp = align_domains(&pair.source, &pair.target).unwrap();
        let n_users = dp.n_users();
        let source_split = split_holdout(
            &dp.source,
            SplitRatio::default(),
            sub_seed(cfg.seed, SEED_SOURCE_SPLIT),
        )
        .unwrap();
        let source_train =
            build_graph(&source_split.train, n_users, dp.source_items.len()).unwrap();
        let checkpoint = pretrain(&source_train, &source_split.valid, cfg)
            .unwrap()
            .checkpoint(cfg.seed);
        let target_split = split_holdout(
            &dp.target,
            SplitRatio::default(),
            sub_seed(cfg.seed, SEED_TARGET_SPLIT),
        )
        .unwrap();
        let target_train =
            build_graph(&target_split.train, n_users, dp.target_items.len()).unwrap();
        Prepared {
            pair,
            target_items: dp.target_items,
            target_split,
            target_train,
            checkpoint,
            pretrain_seconds: start.elapsed().as_secs_f64(),
        }
    }

    fn relations(&self) -> RelationIndex {
        RelationIndex::new(&self.pair.relations, &self.target_items)
    }
}

fn prefix_identity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..PREFIX_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(1..=8);
        let (nq, nk, np) = (
            rng.gen_range(1..=6),
            rng.gen_range(1..=8),
            rng.gen_range(1..=5),
        );
        let r = prefix_attention_check(
            &rand_tensor(nq, d, &mut rng),
            &rand_tensor(nk, d, &mut rng),
            &rand_tensor(nk, d, &mut rng),
            &rand_tensor(np, d, &mut rng),
            &rand_tensor(np, d, &mut rng),
        )
        .unwrap();
        worst = worst.max(r);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        "prefix attention identity",
        worst < PREFIX_TOL && secs < PREFIX_SECONDS,
        format!("max residual {worst:.3e} < {PREFIX_TOL:.0e} over {PREFIX_INSTANCES} instances, {secs:.2}s < {PREFIX_SECONDS}s"),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let edges = [(0u32, 0u32), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2)];
    let g = build_graph(&edges, 3, 3).unwrap();
    let mut worst = [0.0f64; 4];
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Tensor> = (0..3).map(|_| rand_tensor(4, 3, &mut rng)).collect();
        let bpr =
            finite_diff_check(|t, v| bpr_on_tape(t, v[0], v[1], v[2]), &rows, GRAD_EPS).unwrap();
        let nce = finite_diff_check(
            |t, v| infonce_on_tape(t, v[0], v[1], 0.2),
            &rows[..2],
            GRAD_EPS,
        )
        .unwrap();
        let joint = finite_diff_check(
            |t, v| {
                let rec = bpr_on_tape(t, v[0], v[1], v[2])?;
                let cl_u = infonce_on_tape(t, v[0], v[1], 0.2)?;
                let cl_i = infonce_on_tape(t, v[1], v[2], 0.2)?;
                let l2 = l2_on_tape(t, v)?;
                Ok(joint_on_tape(t, rec, (cl_u, cl_i), l2, 0.1, 1e-2)?.total)
            },
            &rows,
            GRAD_EPS,
        )
        .unwrap();
        let params = EncoderParams::init(3, 3, 3, 2, seed).unwrap();
        let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let target = xavier_init(6, 3, seed + 1000).unwrap();
        let enc = finite_diff_check(
            |t, v| {
                let vars = EncoderVars {
                    user_embeddings: v[0],
                    item_embeddings: v[1],
                    layers: v[2..].chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
                };
                let r = encode_on_tape(t, &g, &vars, None)?;
                let all = t.concat(r.users, r.items)?;
                let c = t.constant(target.clone());
                let prod = t.row_dot(all, c)?;
                t.sum(prod)
            },
            &tensors,
            GRAD_EPS,
        )
        .unwrap();
        for (w, e) in worst.iter_mut().zip([bpr, nce, joint, enc]) {
            *w = w.max(e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        "finite-difference gradients",
        max < GRAD_TOL && secs < GRAD_SECONDS,
        format!(
            "max rel err bpr {:.2e}, infonce {:.2e}, joint {:.2e}, encoder {:.2e} < {GRAD_TOL:.0e} over {GRAD_SEEDS} seeds, {secs:.1}s < {GRAD_SECONDS}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn frozen_encoder() -> Outcome {
    let cfg = TrainConfig {
        lr: 1e-2,
        d: 16,
        n_layers: 2,
        max_epochs: 3,
        patience: FREEZE_EPOCHS,
        ..TrainConfig::default()
    };
    let prep = Prepared::new(&SynthConfig::default(), &cfg);
    let tune_cfg = TrainConfig {
        max_epochs: FREEZE_EPOCHS,
        ..cfg
    };
    let initial = target_model(&prep.target_train, &prep.checkpoint, &tune_cfg).unwrap();
    let start = Instant::now();
    let run = prompt_tune(
        &prep.target_train,
        &prep.target_split.valid,
        &prep.checkpoint,
        &prep.relations(),
        &tune_cfg,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let tuned = &run.model.params;
    let loaded = &prep.checkpoint.params;
    let mut pairs = vec![
        (&tuned.user_embeddings, &loaded.user_embeddings),
        (&tuned.item_embeddings, &initial.params.item_embeddings),
    ];
    for (a, b) in tuned.layers.iter().zip(&loaded.layers) {
        pairs.extend([
            (&a.w_q, &b.w_q),
            (&a.w_k, &b.w_k),
            (&a.w_v, &b.w_v),
            (&a.w_u, &b.w_u),
        ]);
    }
    let identical = pairs.iter().filter(|(a, b)| digest(a) == digest(b)).count();
    let prompts_moved = run
        .model
        .prompts
        .as_ref()
        .map(|p| {
            p.p_v
                != initial_prompt_model(
                    &prep.target_train,
                    &prep.checkpoint,
                    &prep.relations(),
                    &tune_cfg,
                )
                .unwrap()
                .0
                .prompts
                .unwrap()
                .p_v
        })
        .unwrap_or(false);
    outcome(
        "frozen encoder during prompt-tuning",
        identical == pairs.len() && run.logs.len() == FREEZE_EPOCHS && prompts_moved && secs < FREEZE_SECONDS,
        format!(
            "{identical}/{} frozen tensor digests unchanged after {} epochs, prompts updated: {prompts_moved}, {secs:.1}s < {FREEZE_SECONDS}s",
            pairs.len(),
            run.logs.len()
        ),
    )
}

fn parameter_ratio() -> Outcome {
    let cfg = TrainConfig {
        d: 32,
        m_hard: 5,
        m_soft: 3,
        max_epochs: 0,
        tune_scope: TuneScope::PromptsOnly,
        ..TrainConfig::default()
    };
    let prep = Prepared::new(&SynthConfig::default(), &cfg);
    let (_, report) = initial_prompt_model(
        &prep.target_train,
        &prep.checkpoint,
        &prep.relations(),
        &cfg,
    )
    .unwrap();
    outcome(
        "tuned parameter ratio",
        report.ratio < PARAM_RATIO_MAX,
        format!(
            "{} / {} = {:.4} < {PARAM_RATIO_MAX}",
            report.tuned, report.full, report.ratio
        ),
    )
}

fn effect_setup() -> (SynthConfig, TrainConfig) {
    let synth = SynthConfig {
        n_users: 400,
        density: 0.04,
        ..SynthConfig::default()
    };
    let cfg = TrainConfig {
        lr: 1e-2,
        d: 32,
        n_layers: 2,
        batch_size: 1024,
        max_epochs: 40,
        patience: 10,
        ..TrainConfig::default()
    };
    (synth, cfg)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn mean_epoch_seconds(logs: &[pgprec::trainer::EpochLog]) -> f64 {
    logs.iter().map(|l| l.seconds).sum::<f64>() / logs.len() as f64
}

fn epoch_timing(prep: &Prepared, cfg: &TrainConfig) -> Outcome {
    let cfg = TrainConfig {
        max_epochs: TIMING_EPOCHS,
        patience: TIMING_EPOCHS,
        ..cfg.clone()
    };
    let relations = prep.relations();
    let (mut prompt, mut fine) = (Vec::new(), Vec::new());
    for _ in 0..TIMING_RUNS {
        let p = prompt_tune(
            &prep.target_train,
            &prep.target_split.valid,
            &prep.checkpoint,
            &relations,
            &cfg,
        )
        .unwrap();
        prompt.push(mean_epoch_seconds(&p.logs));
        let f = fine_tune_baseline(
            &prep.target_train,
            &prep.target_split.valid,
            &prep.checkpoint,
            &cfg,
        )
        .unwrap();
        fine.push(mean_epoch_seconds(&f.logs));
    }
    let (p, f) = (median(prompt), median(fine));
    outcome(
        "prompt-tuning epoch time below fine-tuning",
        p < f,
        format!("median of {TIMING_RUNS} runs: prompt {p:.4}s/epoch vs fine-tune {f:.4}s/epoch"),
    )
}

fn random_report(g: &InteractionGraph, test: &[(u32, u32)], k: usize) -> EvalReport {
    let labels = label_cold_start(&[], g.n_users(), COLD_THRESHOLD);
    let n_items = g.n_items();
    evaluate_with(
        |u| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + u as u64);
            (0..n_items).map(|_| rng.gen::<f64>()).collect()
        },
        g,
        test,
        &labels,
        k,
    )
    .unwrap()
}

fn effectiveness(prep: &Prepared, cfg: &TrainConfig) -> Outcome {
    let start = Instant::now();
    let g = &prep.target_train;
    let valid = &prep.target_split.valid;
    let run = prompt_tune(g, valid, &prep.checkpoint, &prep.relations(), cfg).unwrap();
    let labels = label_cold_start(&prep.target_split.train, g.n_users(), COLD_THRESHOLD);
    let k = cfg.eval_k;
    let tuned = evaluate(&run.model.encode(g).unwrap(), g, valid, &labels, k).unwrap();
    let frozen_model = target_model(g, &prep.checkpoint, cfg).unwrap();
    let frozen = evaluate(&frozen_model.encode(g).unwrap(), g, valid, &labels, k).unwrap();
    let random = random_report(g, valid, k);
    let vs_frozen = paired_t_test(&tuned.recalls(), &frozen.recalls()).unwrap();
    let vs_random = paired_t_test(&tuned.recalls(), &random.recalls()).unwrap();
    let secs = start.elapsed().as_secs_f64() + prep.pretrain_seconds;
    let users = tuned.per_user.len();
    let better = tuned.overall.recall > frozen.overall.recall
        && tuned.overall.recall > random.overall.recall;
    outcome(
        "prompt-tuning beats frozen and random rankers",
        better && vs_frozen.p_raw < ALPHA && vs_random.p_raw < ALPHA && users >= MIN_EVAL_USERS && secs < EFFECT_SECONDS,
        format!(
            "valid Recall@{k}: tuned {:.4}, frozen {:.4}, random {:.4}; p {:.2e} / {:.2e} < {ALPHA} over {users} users (>= {MIN_EVAL_USERS}); {secs:.0}s < {EFFECT_SECONDS}s",
            tuned.overall.recall, frozen.overall.recall, random.overall.recall, vs_frozen.p_raw, vs_random.p_raw
        ),
    )
}

/// Recall and NDCG from a full sort with explicit loops.
fn oracle_metrics(scores: &[f64], excluded: &[u32], relevant: &[u32], k: usize) -> (f64, f64) {
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|i| !excluded.contains(&(*i as u32)))
        .collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let top = &order[..k.min(order.len())];
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, &item) in top.iter().enumerate() {
        if relevant.contains(&(item as u32)) {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for pos in 0..relevant.len().min(k) {
        idcg += 1.0 / ((pos + 2) as f64).log2();
    }
    (hits as f64 / relevant.len() as f64, dcg / idcg)
}

fn metric_oracles() -> Outcome {
    let (n_users, n_items, k) = (20usize, 30usize, 10usize);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in 0..n_users as u32 {
        for i in 0..n_items as u32 {
            match rng.gen_range(0..10) {
                0 | 1 => train.push((u, i)),
                2 | 3 => test.push((u, i)),
                _ => {}
            }
        }
        if !test.iter().any(|&(tu, _)| tu == u) {
            test.push((u, (u * 7 + 3) % n_items as u32));
            train.retain(|&(tu, ti)| !(tu == u && ti == (u * 7 + 3) % n_items as u32));
        }
    }
    let scores: Vec<Vec<f64>> = (0..n_users)
        .map(|_| (0..n_items).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let g = build_graph(&train, n_users, n_items).unwrap();
    let labels = label_cold_start(&train, n_users, COLD_THRESHOLD);
    let report = evaluate_with(|u| scores[u as usize].clone(), &g, &test, &labels, k).unwrap();
    let mut metric_err = 0.0f64;
    for m in &report.per_user {
        let excluded: Vec<u32> = train
            .iter()
            .filter(|e| e.0 == m.user)
            .map(|e| e.1)
            .collect();
        let relevant: Vec<u32> = test.iter().filter(|e| e.0 == m.user).map(|e| e.1).collect();
        let (r, n) = oracle_metrics(&scores[m.user as usize], &excluded, &relevant, k);
        metric_err = metric_err.max((r - m.recall).abs()).max((n - m.ndcg).abs());
    }
    let holm = holm_bonferroni(&[0.01, 0.04]).unwrap();
    let holm_err = (holm[0] - 0.02).abs().max((holm[1] - 0.04).abs());

    let a = [
        0.31, 0.42, 0.18, 0.55, 0.27, 0.49, 0.36, 0.22, 0.61, 0.40, 0.33, 0.29,
    ];
    let b = [
        0.28, 0.35, 0.21, 0.47, 0.25, 0.41, 0.30, 0.24, 0.52, 0.37, 0.26, 0.31,
    ];
    // Reference values from scipy.stats (ttest_rel; ttest_1samp on the
    // differences with one-sided alternatives for each equivalence bound).
    let t = paired_t_test(&a, &b).unwrap();
    let tost_05 = tost_equivalence(&a, &b, 0.05).unwrap();
    let tost_10 = tost_equivalence(&a, &b, 0.10).unwrap();
    let stat_err = [
        (t.statistic, 3.07101258779977),
        (t.p_raw, 0.010640662903503594),
        (tost_05.statistic, -0.9346560049825384),
        (tost_05.p_raw, 0.1850149195800005),
        (tost_10.statistic, -4.940324597764847),
        (tost_10.p_raw, 0.00022118081488395553),
    ]
    .iter()
    .map(|(x, y)| (x - y).abs())
    .fold(0.0, f64::max);
    outcome(
        "metric and statistics oracles",
        metric_err < METRIC_TOL && holm_err < METRIC_TOL && stat_err < STAT_TOL,
        format!(
            "metrics {metric_err:.1e} < {METRIC_TOL:.0e} over {} users; holm {holm:?}; t/tost {stat_err:.1e} < {STAT_TOL:.0e}",
            report.per_user.len()
        ),
    )
}

fn pipeline_bytes() -> (Vec<u8>, Vec<u8>, String) {
    let synth = SynthConfig {
        n_users: 60,
        n_source_items: 80,
        n_target_items: 80,
        density: 0.08,
        ..SynthConfig::default()
    };
    let cfg = TrainConfig {
        lr: 1e-2,
        d: 8,
        n_layers: 1,
        max_epochs: 3,
        patience: 2,
        batch_size: 256,
        ..TrainConfig::default()
    };
    let prep = Prepared::new(&synth, &cfg);
    let run = prompt_tune(
        &prep.target_train,
        &prep.target_split.valid,
        &prep.checkpoint,
        &prep.relations(),
        &cfg,
    )
    .unwrap();
    let g = &prep.target_train;
    let labels = label_cold_start(&prep.target_split.train, g.n_users(), COLD_THRESHOLD);
    let report = evaluate(
        &run.model.encode(g).unwrap(),
        g,
        &prep.target_split.test,
        &labels,
        10,
    )
    .unwrap();
    (
        prep.checkpoint.to_bytes().unwrap(),
        run.checkpoint(cfg.seed).to_bytes().unwrap(),
        report.metrics_csv(None),
    )
}

fn determinism() -> Outcome {
    let first = pipeline_bytes();
    let second = pipeline_bytes();
    let same = [
        first.0 == second.0,
        first.1 == second.1,
        first.2 == second.2,
    ];
    outcome(
        "end-to-end determinism",
        same.iter().all(|&s| s),
        format!(
            "pretrain checkpoint {}, tuned checkpoint {}, metrics csv {}",
            same[0], same[1], same[2]
        ),
    )
}

fn cold_start_partition() -> Outcome {
    let n_users = 12usize;
    // User u has u training interactions.
    let train: Vec<(u32, u32)> = (0..n_users as u32)
        .flat_map(|u| (0..u).map(move |i| (u, i)))
        .collect();
    let test: Vec<(u32, u32)> = (0..n_users as u32).map(|u| (u, 15 + u % 3)).collect();
    let g = build_graph(&train, n_users, 20).unwrap();
    let labels = label_cold_start(&train, n_users, COLD_THRESHOLD);
    let rule_ok =
        (0..n_users).all(|u| (labels.groups[u] == UserGroup::Cold) == (u < COLD_THRESHOLD));
    let scores = Arc::new((0..20).map(|i| ((i * 7) % 20) as f64).collect::<Vec<f64>>());
    let report = evaluate_with(|_| scores.to_vec(), &g, &test, &labels, 10).unwrap();
    let group_mean = |cold: bool| {
        let rows: Vec<_> = report
            .per_user
            .iter()
            .filter(|m| (m.user < COLD_THRESHOLD as u32) == cold)
            .collect();
        (
            rows.len(),
            rows.iter().map(|m| m.recall).sum::<f64>() / rows.len() as f64,
        )
    };
    let (cold, regular) = (group_mean(true), group_mean(false));
    let exposed = match (report.cold, report.regular) {
        (Some(c), Some(r)) => {
            c.users == cold.0
                && r.users == regular.0
                && (c.recall - cold.1).abs() < METRIC_TOL
                && (r.recall - regular.1).abs() < METRIC_TOL
        }
        _ => false,
    };
    outcome(
        "cold-start partition",
        rule_ok && exposed,
        format!(
            "cold iff < {COLD_THRESHOLD} train interactions: {rule_ok}; sub-group means reported: {exposed} ({} cold, {} regular)",
            cold.0, regular.0
        ),
    )
}

fn main() {
    let mut results = vec![
        prefix_identity(),
        gradient_checks(),
        frozen_encoder(),
        parameter_ratio(),
    ];
    let (synth, cfg) = effect_setup();
    let prep = Prepared::new(&synth, &cfg);
    results.push(epoch_timing(&prep, &cfg));
    results.push(effectiveness(&prep, &cfg));
    results.push(metric_oracles());
    results.push(determinism());
    results.push(cold_start_partition());

    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        let status = if r.pass { "PASS" } else { "FAIL" };
        println!("{status} [{}] {}: {}", i + 1, r.name, r.detail);
        failed += usize::from(!r.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
