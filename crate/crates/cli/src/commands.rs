//! Subcommand implementations. Each one writes its outputs plus exactly one
//! `manifest.txt` into the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use pgprec::dataset::{
    align_domains, generate_synthetic_pair, label_cold_start, parse_interactions, parse_relations,
    parse_split_manifest, split_holdout, split_manifest_tsv, DomainPair, InteractionTable,
    SplitRatio,
};
use pgprec::eval::{
    adjust_family, evaluate, paired_t_test, stats_csv, timing_report, tost_equivalence, EvalReport,
    StatResult,
};
use pgprec::graph::build_graph;
use pgprec::prompts::{count_tuned_params, ModelDims, RelationIndex, TunedParamReport};
use pgprec::trainer::{
    epoch_log_csv, fine_tune_baseline, parse_epoch_log_csv, pretrain as run_pretrain, prompt_tune,
    sub_seed, Checkpoint, Model, TrainConfig, SEED_INIT, SEED_PROMPTS, SEED_SOURCE_SPLIT,
    SEED_TARGET_ITEMS, SEED_TARGET_SPLIT,
};

use crate::config::Settings;
use crate::manifest::RunManifest;
use crate::{CliError, Common, Part, TuneMode};

pub struct Context {
    settings: Settings,
    config_path: Option<PathBuf>,
    out: PathBuf,
}

impl Context {
    pub fn new(common: &Common) -> Result<Self, CliError> {
        let mut settings = Settings::load(common.config.as_deref())?;
        settings.apply(&common.overrides)?;
        if let Some(seed) = common.seed {
            settings.set("seed", seed.to_string());
        }
        Ok(Context {
            settings,
            config_path: common.config.clone(),
            out: common.out.clone(),
        })
    }

    fn manifest(&self, command: &str) -> Result<RunManifest, CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Output(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(RunManifest::start(
            command,
            self.config_path.as_deref(),
            self.settings.resolved(),
        ))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn utf8(bytes: Vec<u8>, path: &Path) -> Result<String, CliError> {
    String::from_utf8(bytes).map_err(|_| {
        CliError::Core(pgprec::Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "not valid UTF-8".into(),
        })
    })
}

fn read_table(m: &mut RunManifest, path: &Path) -> Result<InteractionTable, CliError> {
    let text = utf8(m.read_input(path)?, path)?;
    Ok(parse_interactions(&text, path)?)
}

fn read_checkpoint(m: &mut RunManifest, path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::from_bytes(&m.read_input(path)?)?)
}

fn read_pair(m: &mut RunManifest, source: &Path, target: &Path) -> Result<DomainPair, CliError> {
    let s = read_table(m, source)?;
    let t = read_table(m, target)?;
    Ok(align_domains(&s, &t)?)
}

fn train_seeds(m: &mut RunManifest, cfg: &TrainConfig, extra: &[(&str, u64)]) {
    m.seeds.push(("base".into(), cfg.seed));
    for (name, offset) in extra {
        m.seeds.push(((*name).into(), sub_seed(cfg.seed, *offset)));
    }
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    let cfg = ctx.settings.synth()?;
    let mut m = ctx.manifest("synth")?;
    m.seeds.push(("base".into(), cfg.seed));
    let pair = generate_synthetic_pair(&cfg)?;
    m.write_output(&ctx.path("source.tsv"), pair.source.to_tsv().as_bytes())?;
    m.write_output(&ctx.path("target.tsv"), pair.target.to_tsv().as_bytes())?;
    m.write_output(
        &ctx.path("relations.tsv"),
        pair.relations.to_tsv().as_bytes(),
    )?;
    println!(
        "source={} target={} relations={}",
        pair.source.len(),
        pair.target.len(),
        pair.relations.entries.len()
    );
    m.finish(&ctx.out)
}

pub fn pretrain(ctx: &Context, source: &Path, target: &Path) -> Result<(), CliError> {
    let cfg = ctx.settings.train()?;
    let mut m = ctx.manifest("pretrain")?;
    train_seeds(
        &mut m,
        &cfg,
        &[("init", SEED_INIT), ("source_split", SEED_SOURCE_SPLIT)],
    );
    let pair = read_pair(&mut m, source, target)?;
    let split = split_holdout(
        &pair.source,
        SplitRatio::default(),
        sub_seed(cfg.seed, SEED_SOURCE_SPLIT),
    )?;
    let g = build_graph(&split.train, pair.n_users(), pair.source_items.len())?;
    info!(
        "pretraining on {} users, {} items, {} edges",
        pair.n_users(),
        pair.source_items.len(),
        split.train.len()
    );
    let outcome = run_pretrain(&g, &split.valid, &cfg)?;
    m.write_output(
        &ctx.path("checkpoint.pgpr"),
        &outcome.checkpoint(cfg.seed).to_bytes()?,
    )?;
    m.write_output(
        &ctx.path("epochs.csv"),
        epoch_log_csv(&outcome.logs).as_bytes(),
    )?;
    m.write_output(
        &ctx.path("source_split.tsv"),
        split_manifest_tsv(&split, &pair.users, &pair.source_items).as_bytes(),
    )?;
    println!(
        "best_epoch={} best_metric={:.6}",
        outcome.best_epoch, outcome.best_metric
    );
    m.finish(&ctx.out)
}

pub fn tune(
    ctx: &Context,
    source: &Path,
    target: &Path,
    relations: &Path,
    checkpoint: &Path,
    mode: TuneMode,
) -> Result<(), CliError> {
    let cfg = ctx.settings.train()?;
    let command = match mode {
        TuneMode::Prompt => "tune-prompt",
        TuneMode::Finetune => "tune-finetune",
    };
    let mut m = ctx.manifest(command)?;
    train_seeds(
        &mut m,
        &cfg,
        &[
            ("target_items", SEED_TARGET_ITEMS),
            ("prompts", SEED_PROMPTS),
            ("target_split", SEED_TARGET_SPLIT),
        ],
    );
    let pair = read_pair(&mut m, source, target)?;
    let rel_text = utf8(m.read_input(relations)?, relations)?;
    let rel_table = parse_relations(&rel_text, relations)?;
    let ckpt = read_checkpoint(&mut m, checkpoint)?;
    let split = split_holdout(
        &pair.target,
        SplitRatio::default(),
        sub_seed(cfg.seed, SEED_TARGET_SPLIT),
    )?;
    let g = build_graph(&split.train, pair.n_users(), pair.target_items.len())?;
    let outcome = match mode {
        TuneMode::Prompt => {
            let index = RelationIndex::new(&rel_table, &pair.target_items);
            prompt_tune(&g, &split.valid, &ckpt, &index, &cfg)?
        }
        TuneMode::Finetune => fine_tune_baseline(&g, &split.valid, &ckpt, &cfg)?,
    };
    m.write_output(
        &ctx.path("model.pgpr"),
        &outcome.checkpoint(cfg.seed).to_bytes()?,
    )?;
    m.write_output(&ctx.path("params.csv"), outcome.report.to_csv().as_bytes())?;
    m.write_output(
        &ctx.path("epochs.csv"),
        epoch_log_csv(&outcome.logs).as_bytes(),
    )?;
    m.write_output(
        &ctx.path("target_split.tsv"),
        split_manifest_tsv(&split, &pair.users, &pair.target_items).as_bytes(),
    )?;
    println!(
        "best_epoch={} best_metric={:.6} tuned={} full={} ratio={:.6}",
        outcome.best_epoch,
        outcome.best_metric,
        outcome.report.tuned,
        outcome.report.full,
        outcome.report.ratio
    );
    m.finish(&ctx.out)
}

fn param_report(ckpt: &Checkpoint, cfg: &TrainConfig) -> TunedParamReport {
    let p = &ckpt.params;
    let dims = ModelDims {
        n_users: p.n_users(),
        n_items: p.n_items(),
        d: p.dim(),
        n_layers: p.n_layers(),
    };
    match &ckpt.prompts {
        Some(ps) => count_tuned_params(ps, cfg.tune_scope, dims),
        None => TunedParamReport::full_fine_tune(dims),
    }
}

/// Paired t-tests and TOST on recall and NDCG of `other` against `base`.
fn compare(
    base: &EvalReport,
    other: &EvalReport,
    label: &str,
    margin: f64,
) -> Result<Vec<StatResult>, CliError> {
    let k = base.k;
    let mut out = Vec::new();
    for (metric, a, b) in [
        (format!("recall{k}"), other.recalls(), base.recalls()),
        (format!("ndcg{k}"), other.ndcgs(), base.ndcgs()),
    ] {
        for mut r in [paired_t_test(&a, &b)?, tost_equivalence(&a, &b, margin)?] {
            r.comparison = format!("{label}:{metric}");
            out.push(r);
        }
    }
    Ok(out)
}

pub fn eval(
    ctx: &Context,
    models: &[PathBuf],
    split: &Path,
    part: Part,
    k: Option<usize>,
    timing: &[PathBuf],
) -> Result<(), CliError> {
    let cfg = ctx.settings.train()?;
    let k = k.unwrap_or(cfg.eval_k);
    if k == 0 {
        return Err(CliError::Usage("k must be positive".into()));
    }
    let threshold = ctx.settings.cold_threshold()?;
    let margin = ctx.settings.tost_margin()?;
    let mut m = ctx.manifest("eval")?;
    let text = utf8(m.read_input(split)?, split)?;
    let manifest = parse_split_manifest(&text, split)?;
    let (n_users, n_items) = (manifest.users.len(), manifest.items.len());
    let g = build_graph(&manifest.split.train, n_users, n_items)?;
    let pairs = match part {
        Part::Test => &manifest.split.test,
        Part::Valid => &manifest.split.valid,
    };
    let labels = label_cold_start(&manifest.split.train, n_users, threshold);
    let mut reports = Vec::new();
    let mut summary = String::new();
    for (idx, path) in models.iter().enumerate() {
        let ckpt = read_checkpoint(&mut m, path)?;
        if ckpt.params.n_users() != n_users || ckpt.params.n_items() != n_items {
            return Err(pgprec::Error::Checkpoint(format!(
                "{} has {} users / {} items, split has {n_users} / {n_items}",
                path.display(),
                ckpt.params.n_users(),
                ckpt.params.n_items()
            ))
            .into());
        }
        let params = param_report(&ckpt, &cfg);
        let model = Model {
            params: ckpt.params,
            prompts: ckpt.prompts,
        };
        let mut report = evaluate(&model.encode(&g)?, &g, pairs, &labels, k)?;
        report.params = Some(params);
        m.write_output(
            &ctx.path(&format!("metrics_{idx}.csv")),
            report.metrics_csv(Some(&manifest.users)).as_bytes(),
        )?;
        summary.push_str(&format!("model{idx}\t{}\n", path.display()));
        summary.push_str(&report.summary());
        reports.push(report);
    }
    if let [first, second] = timing {
        let mut load = |p: &PathBuf| -> Result<(String, Vec<_>), CliError> {
            let text = utf8(m.read_input(p)?, p)?;
            let label = p.display().to_string();
            Ok((label, parse_epoch_log_csv(&text, p)?))
        };
        let (la, a) = load(first)?;
        let (lb, b) = load(second)?;
        summary.push_str(&timing_report((&la, &a), (&lb, &b))?.to_text());
    }
    if reports.len() >= 2 {
        let mut results = Vec::new();
        for (j, r) in reports.iter().enumerate().skip(1) {
            results.extend(compare(
                &reports[0],
                r,
                &format!("model{j}_vs_model0"),
                margin,
            )?);
        }
        adjust_family(&mut results)?;
        let csv = stats_csv(&results);
        m.write_output(&ctx.path("stats.csv"), csv.as_bytes())?;
        summary.push_str("stats\n");
        summary.push_str(&csv);
    }
    m.write_output(&ctx.path("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    m.finish(&ctx.out)
}

pub fn params(ctx: &Context, model: &Path) -> Result<(), CliError> {
    let cfg = ctx.settings.train()?;
    let mut m = ctx.manifest("params")?;
    let ckpt = read_checkpoint(&mut m, model)?;
    let report = param_report(&ckpt, &cfg);
    let csv = report.to_csv();
    m.write_output(&ctx.path("params.csv"), csv.as_bytes())?;
    print!("{csv}");
    m.finish(&ctx.out)
}

/// Per-user `(recall, ndcg)` keyed by user.
type UserMetricRows = BTreeMap<String, (f64, f64)>;

/// Cutoff and per-user rows read from a metrics CSV.
fn read_metrics(m: &mut RunManifest, path: &Path) -> Result<(usize, UserMetricRows), CliError> {
    let text = utf8(m.read_input(path)?, path)?;
    let bad = |line: usize, msg: String| {
        CliError::Core(pgprec::Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        })
    };
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).unwrap_or_default();
    let k = header
        .strip_prefix("user,group,recall")
        .and_then(|rest| rest.split_once(",ndcg"))
        .filter(|(a, b)| a == b)
        .and_then(|(a, _)| a.parse::<usize>().ok())
        .ok_or_else(|| bad(1, format!("unexpected header {header:?}")))?;
    let mut rows = BTreeMap::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(n + 1, format!("expected 4 fields, got {}", f.len())));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| bad(n + 1, format!("bad number {s:?}")))
        };
        rows.insert(f[0].to_string(), (num(f[2])?, num(f[3])?));
    }
    Ok((k, rows))
}

pub fn stats(ctx: &Context, first: &Path, second: &Path) -> Result<(), CliError> {
    let margin = ctx.settings.tost_margin()?;
    let mut m = ctx.manifest("stats")?;
    let (ka, a) = read_metrics(&mut m, first)?;
    let (kb, b) = read_metrics(&mut m, second)?;
    if ka != kb {
        return Err(CliError::Usage(format!(
            "metric cutoffs differ: {ka} vs {kb}"
        )));
    }
    if !a.keys().eq(b.keys()) {
        return Err(CliError::Usage(
            "the two metric files cover different users".into(),
        ));
    }
    let mut results = Vec::new();
    for (name, pick) in [("recall", 0usize), ("ndcg", 1)] {
        let get = |rows: &UserMetricRows| -> Vec<f64> {
            rows.values()
                .map(|v| if pick == 0 { v.0 } else { v.1 })
                .collect()
        };
        let (va, vb) = (get(&b), get(&a));
        for mut r in [
            paired_t_test(&va, &vb)?,
            tost_equivalence(&va, &vb, margin)?,
        ] {
            r.comparison = format!("second_vs_first:{name}{ka}");
            results.push(r);
        }
    }
    adjust_family(&mut results)?;
    let csv = stats_csv(&results);
    m.write_output(&ctx.path("stats.csv"), csv.as_bytes())?;
    print!("{csv}");
    m.finish(&ctx.out)
}
