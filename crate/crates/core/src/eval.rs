//! Full-ranking top-k evaluation, cold-start breakdown, timing comparison and
//! the paired statistics used to compare runs.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{ColdStartLabels, UserGroup};
use crate::encoder::NodeReps;
use crate::error::{Error, Result};
use crate::graph::GraphView;
use crate::numerics::Tensor;
use crate::prompts::TunedParamReport;
use crate::trainer::EpochLog;

/// Significance level used for every decision.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: u32,
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
}

fn by_score_then_id(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top `k` of `scores` (one per item) after removing `exclusions`, which must
/// be sorted. Ties go to the smaller item id.
pub fn rank_scores(user: u32, scores: &[f64], k: usize, exclusions: &[u32]) -> RankedList {
    let mut cands: Vec<(f64, u32)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i as u32))
        .filter(|(_, i)| exclusions.binary_search(i).is_err())
        .collect();
    if k < cands.len() {
        if k > 0 {
            cands.select_nth_unstable_by(k - 1, by_score_then_id);
        }
        cands.truncate(k);
    }
    cands.sort_by(by_score_then_id);
    RankedList {
        user,
        items: cands.iter().map(|c| c.1).collect(),
        scores: cands.iter().map(|c| c.0).collect(),
    }
}

/// Ranks items by `user_rep . item_reps[i]`.
pub fn rank_items(
    user: u32,
    user_rep: &[f64],
    item_reps: &Tensor,
    k: usize,
    exclusions: &[u32],
) -> RankedList {
    rank_scores(user, &item_scores(user_rep, item_reps), k, exclusions)
}

fn item_scores(user_rep: &[f64], item_reps: &Tensor) -> Vec<f64> {
    (0..item_reps.rows())
        .map(|i| {
            item_reps
                .row(i)
                .iter()
                .zip(user_rep)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// Fraction of `relevant` (sorted) found in the list; `None` if nothing is relevant.
pub fn recall_at_k(ranked: &RankedList, relevant: &[u32]) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked
        .items
        .iter()
        .filter(|i| relevant.binary_search(i).is_ok())
        .count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-gain NDCG with `log2(rank + 1)` discount, normalised by the ideal
/// list holding `min(|relevant|, k)` hits, where `k` is the list length.
pub fn ndcg_at_k(ranked: &RankedList, relevant: &[u32], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .items
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(r, _)| discount(r + 1))
        .fold(0.0, |acc, x| acc + x);
    let ideal: f64 = (1..=relevant.len().min(k)).map(discount).sum();
    Some(dcg / ideal)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserMetrics {
    pub user: u32,
    pub group: UserGroup,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupMeans {
    pub users: usize,
    pub recall: f64,
    pub ndcg: f64,
}

impl GroupMeans {
    fn of<'a>(rows: impl Iterator<Item = &'a UserMetrics>) -> Option<Self> {
        let (mut n, mut r, mut g) = (0usize, 0.0, 0.0);
        for m in rows {
            n += 1;
            r += m.recall;
            g += m.ndcg;
        }
        (n > 0).then(|| GroupMeans {
            users: n,
            recall: r / n as f64,
            ndcg: g / n as f64,
        })
    }
}

/// Mean seconds per epoch, epoch count and total time for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTiming {
    pub label: String,
    pub epochs: usize,
    pub mean_seconds: f64,
    pub total_seconds: f64,
}

/// Two runs side by side plus `first / second` ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub runs: [RunTiming; 2],
    pub mean_ratio: f64,
    pub total_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub per_user: Vec<UserMetrics>,
    pub overall: GroupMeans,
    pub cold: Option<GroupMeans>,
    pub regular: Option<GroupMeans>,
    pub params: Option<TunedParamReport>,
    pub timing: Option<TimingReport>,
}

fn group_relevant(test: &[(u32, u32)]) -> BTreeMap<u32, Vec<u32>> {
    let mut by_user: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for &(u, i) in test {
        by_user.entry(u).or_default().push(i);
    }
    for items in by_user.values_mut() {
        items.sort_unstable();
        items.dedup();
    }
    by_user
}

/// Scores every test user with `scorer` (one score per item), excluding the
/// user's edges in `train`, and aggregates Recall@k and NDCG@k.
pub fn evaluate_with<G, F>(
    scorer: F,
    train: &G,
    test: &[(u32, u32)],
    labels: &ColdStartLabels,
    k: usize,
) -> Result<EvalReport>
where
    G: GraphView + Sync + ?Sized,
    F: Fn(u32) -> Vec<f64> + Sync,
{
    if test.is_empty() {
        return Err(Error::EmptyEvaluation("no test interactions".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let relevant = group_relevant(test);
    let users: Vec<(u32, Vec<u32>)> = relevant.into_iter().collect();
    for (u, _) in &users {
        if *u as usize >= train.n_users() || *u as usize >= labels.groups.len() {
            return Err(Error::Range(format!("test user {u}")));
        }
    }
    let per_user: Vec<UserMetrics> = users
        .par_iter()
        .map(|(u, rel)| {
            let scores = scorer(*u);
            let exclusions = train.user_adjacency().row(*u as usize);
            let ranked = rank_scores(*u, &scores, k, exclusions);
            UserMetrics {
                user: *u,
                group: labels.group(*u),
                recall: recall_at_k(&ranked, rel).expect("non-empty"),
                ndcg: ndcg_at_k(&ranked, rel, k).expect("non-empty"),
            }
        })
        .collect();
    let overall = GroupMeans::of(per_user.iter()).expect("at least one user");
    let cold = GroupMeans::of(per_user.iter().filter(|m| m.group == UserGroup::Cold));
    let regular = GroupMeans::of(per_user.iter().filter(|m| m.group == UserGroup::Regular));
    Ok(EvalReport {
        k,
        per_user,
        overall,
        cold,
        regular,
        params: None,
        timing: None,
    })
}

/// Ranks by `e_u . e_i` from encoded representations.
pub fn evaluate<G: GraphView + Sync + ?Sized>(
    reps: &NodeReps,
    train: &G,
    test: &[(u32, u32)],
    labels: &ColdStartLabels,
    k: usize,
) -> Result<EvalReport> {
    evaluate_with(
        |u| item_scores(reps.users.row(u as usize), &reps.items),
        train,
        test,
        labels,
        k,
    )
}

impl EvalReport {
    /// `user,group,recall@k,ndcg@k` rows; `names` maps user ids to keys when given.
    pub fn metrics_csv(&self, names: Option<&[String]>) -> String {
        let mut out = format!("user,group,recall{k},ndcg{k}\n", k = self.k);
        for m in &self.per_user {
            let name = names.map_or_else(|| m.user.to_string(), |n| n[m.user as usize].clone());
            let _ = writeln!(out, "{name},{},{},{}", m.group.as_str(), m.recall, m.ndcg);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let k = self.k;
        let mut line = |label: &str, g: Option<&GroupMeans>| match g {
            Some(g) => {
                let _ = writeln!(
                    out,
                    "{label}\tusers={}\trecall@{k}={:.6}\tndcg@{k}={:.6}",
                    g.users, g.recall, g.ndcg
                );
            }
            None => {
                let _ = writeln!(out, "{label}\tusers=0");
            }
        };
        line("all", Some(&self.overall));
        line("cold", self.cold.as_ref());
        line("regular", self.regular.as_ref());
        if let Some(p) = &self.params {
            let _ = writeln!(
                out,
                "params\ttuned={}\tfull={}\tratio={:.6}",
                p.tuned, p.full, p.ratio
            );
        }
        if let Some(t) = &self.timing {
            out.push_str(&t.to_text());
        }
        out
    }

    pub fn recalls(&self) -> Vec<f64> {
        self.per_user.iter().map(|m| m.recall).collect()
    }

    pub fn ndcgs(&self) -> Vec<f64> {
        self.per_user.iter().map(|m| m.ndcg).collect()
    }
}

fn run_timing(label: &str, logs: &[EpochLog]) -> Result<RunTiming> {
    if logs.is_empty() {
        return Err(Error::EmptyEvaluation(format!(
            "no epochs logged for {label}"
        )));
    }
    let total: f64 = logs.iter().map(|l| l.seconds).sum();
    Ok(RunTiming {
        label: label.to_string(),
        epochs: logs.len(),
        mean_seconds: total / logs.len() as f64,
        total_seconds: total,
    })
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

/// Compares per-epoch and total wall-clock time of two runs.
pub fn timing_report(
    first: (&str, &[EpochLog]),
    second: (&str, &[EpochLog]),
) -> Result<TimingReport> {
    let a = run_timing(first.0, first.1)?;
    let b = run_timing(second.0, second.1)?;
    Ok(TimingReport {
        mean_ratio: ratio(a.mean_seconds, b.mean_seconds),
        total_ratio: ratio(a.total_seconds, b.total_seconds),
        runs: [a, b],
    })
}

impl TimingReport {
    /// Tab-separated table; numbers use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::from("run\tseconds_per_epoch\tepochs\ttotal_seconds\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.label, r.mean_seconds, r.epochs, r.total_seconds
            );
        }
        let _ = writeln!(out, "ratio\t{}\t\t{}", self.mean_ratio, self.total_ratio);
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            path: "<timing>".into(),
            line: 0,
            msg: msg.to_string(),
        };
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if lines.len() != 4 || !lines[0].starts_with("run\t") {
            return Err(bad("expected header, two runs and a ratio row"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let run = |line: &str| -> Result<RunTiming> {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad("run row needs 4 fields"));
            }
            Ok(RunTiming {
                label: f[0].to_string(),
                mean_seconds: num(f[1])?,
                epochs: f[2].parse().map_err(|_| bad("bad epoch count"))?,
                total_seconds: num(f[3])?,
            })
        };
        let f: Vec<&str> = lines[3].split('\t').collect();
        if f.len() != 4 || f[0] != "ratio" {
            return Err(bad("bad ratio row"));
        }
        Ok(TimingReport {
            runs: [run(lines[1])?, run(lines[2])?],
            mean_ratio: num(f[1])?,
            total_ratio: num(f[3])?,
        })
    }
}

/// One hypothesis test result.
#[derive(Debug, Clone, PartialEq)]
pub struct StatResult {
    pub comparison: String,
    pub test: String,
    pub statistic: f64,
    pub p_raw: f64,
    pub p_adj: f64,
    pub significant: bool,
}

impl StatResult {
    fn new(test: &str, statistic: f64, p: f64) -> Self {
        StatResult {
            comparison: String::new(),
            test: test.to_string(),
            statistic,
            p_raw: p,
            p_adj: p,
            significant: p < ALPHA,
        }
    }
}

struct Diffs {
    n: usize,
    mean: f64,
    se: f64,
}

fn paired_diffs(a: &[f64], b: &[f64]) -> Result<Diffs> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Contract("paired test needs at least 2 pairs".into()));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(Diffs {
        n,
        mean,
        se: (var / n as f64).sqrt(),
    })
}

fn student(n: usize) -> StudentsT {
    StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom")
}

/// Two-sided paired t-test of `mean(a - b) = 0`.
///
/// With zero variance in the differences, `p = 1` if the mean difference is
/// zero and `p = 0` otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<StatResult> {
    let d = paired_diffs(a, b)?;
    if d.se == 0.0 {
        return Ok(if d.mean == 0.0 {
            StatResult::new("paired_t", 0.0, 1.0)
        } else {
            StatResult::new("paired_t", d.mean.signum() * f64::INFINITY, 0.0)
        });
    }
    let t = d.mean / d.se;
    let p = (2.0 * student(d.n).sf(t.abs())).min(1.0);
    Ok(StatResult::new("paired_t", t, p))
}

/// Two one-sided paired t-tests of `-margin < mean(a - b) < margin`.
///
/// The reported p is the larger one-sided p and the statistic is the t of
/// that side. With zero variance each side's p is 0 when its bound holds
/// strictly and 1 otherwise.
pub fn tost_equivalence(a: &[f64], b: &[f64], margin: f64) -> Result<StatResult> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Config(format!("equivalence margin {margin}")));
    }
    let d = paired_diffs(a, b)?;
    if d.se == 0.0 {
        let lower = if d.mean > -margin { 0.0 } else { 1.0 };
        let upper = if d.mean < margin { 0.0 } else { 1.0 };
        return Ok(StatResult::new("tost", 0.0, f64::max(lower, upper)));
    }
    let dist = student(d.n);
    let t_lower = (d.mean + margin) / d.se;
    let t_upper = (d.mean - margin) / d.se;
    let p_lower = dist.sf(t_lower);
    let p_upper = dist.cdf(t_upper);
    Ok(if p_lower >= p_upper {
        StatResult::new("tost", t_lower, p_lower)
    } else {
        StatResult::new("tost", t_upper, p_upper)
    })
}

/// Holm step-down adjustment; output is in input order.
pub fn holm_bonferroni(pvalues: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Contract(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &idx) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * pvalues[idx]).min(1.0));
        adjusted[idx] = running;
    }
    Ok(adjusted)
}

/// Fills in `p_adj` and re-derives decisions for a family of results.
///
/// Equivalence holds when the adjusted TOST p is below the level; a t-test
/// decision means a significant difference.
pub fn adjust_family(results: &mut [StatResult]) -> Result<()> {
    let raw: Vec<f64> = results.iter().map(|r| r.p_raw).collect();
    for (r, p) in results.iter_mut().zip(holm_bonferroni(&raw)?) {
        r.p_adj = p;
        r.significant = p < ALPHA;
    }
    Ok(())
}

pub fn stats_csv(results: &[StatResult]) -> String {
    let mut out = String::from("comparison,test,stat,p_raw,p_adj,decision\n");
    for r in results {
        let decision = match (r.test.as_str(), r.significant) {
            ("tost", true) => "equivalent",
            ("tost", false) => "not_equivalent",
            (_, true) => "different",
            (_, false) => "no_difference",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{decision}",
            r.comparison, r.test, r.statistic, r.p_raw, r.p_adj
        );
    }
    out
}
