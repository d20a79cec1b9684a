//! Pre-training, prompt-tuning and full fine-tuning loops, triplet sampling,
//! early stopping and the binary checkpoint format.
//!
//! Every epoch samples one triplet per training edge, draws two edge-dropout
//! views, and runs mini-batches of the joint objective through Adam. Only
//! tensors marked trainable are recorded as parameters on the tape, so frozen
//! tensors never receive gradients or updates.
//!
//! All randomness derives from `TrainConfig::seed` plus a fixed offset per
//! consumer (see the `SEED_*` constants).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::label_cold_start;
use crate::encoder::{
    encode_on_tape, encode_with_prompts, EncoderParams, EncoderVars, LayerWeights, PromptAdjacency,
    PromptProjection,
};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::graph::{edge_dropout, GraphView, InteractionGraph, SubGraph};
use crate::losses::{
    bpr_loss, bpr_on_tape, contrastive_on_tape, joint_on_tape, l2_on_tape, LossBreakdown, LossTerms,
};
use crate::numerics::{adam_step, xavier_init, AdamState, GradTape, Tensor, Var};
use crate::prompts::{
    build_prompt_set, count_tuned_params, Aggregation, ModelDims, PromptConfig, PromptSet,
    RelationIndex, TuneScope, TunedParamReport,
};

/// Encoder initialisation.
pub const SEED_INIT: u64 = 1;
/// Fresh target item embeddings.
pub const SEED_TARGET_ITEMS: u64 = 2;
/// Soft prompts and `p_v`.
pub const SEED_PROMPTS: u64 = 3;
/// Fixed negatives for the validation loss.
pub const SEED_VALID_NEGATIVES: u64 = 4;
/// Hold-out split of the source and of the target interactions.
pub const SEED_SOURCE_SPLIT: u64 = 5;
pub const SEED_TARGET_SPLIT: u64 = 6;
/// Per-epoch triplets, offset further by the epoch index.
pub const SEED_TRIPLETS: u64 = 1_000_000;
/// First and second dropout view, offset further by the epoch index.
pub const SEED_VIEW_A: u64 = 2_000_000;
pub const SEED_VIEW_B: u64 = 3_000_000;

pub fn sub_seed(seed: u64, offset: u64) -> u64 {
    seed.wrapping_add(offset)
}

pub const LEARNING_RATES: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// What early stopping watches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Monitor {
    /// Validation Recall@k, higher is better.
    #[default]
    Recall,
    /// Mean BPR loss on validation pairs with fixed sampled negatives, lower is better.
    Loss,
}

impl std::str::FromStr for Monitor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall" => Ok(Monitor::Recall),
            "loss" => Ok(Monitor::Loss),
            _ => Err(Error::Config(format!("unknown monitor {s:?}"))),
        }
    }
}

impl Monitor {
    pub fn as_str(self) -> &'static str {
        match self {
            Monitor::Recall => "recall",
            Monitor::Loss => "loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub rho: f64,
    pub d: usize,
    pub n_layers: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub m_hard: usize,
    pub m_soft: usize,
    pub tune_scope: TuneScope,
    pub aggregation: Aggregation,
    pub monitor: Monitor,
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lambda1: 0.1,
            lambda2: 0.0,
            tau: 0.2,
            rho: 0.1,
            d: 64,
            n_layers: 3,
            batch_size: 1024,
            patience: 50,
            max_epochs: 1000,
            seed: 0,
            m_hard: 5,
            m_soft: 3,
            tune_scope: TuneScope::PromptsOnly,
            aggregation: Aggregation::Max,
            monitor: Monitor::Recall,
            eval_k: 10,
        }
    }
}

fn on_tenth_grid(x: f64, hi_tenths: i64) -> bool {
    let t = (x * 10.0).round();
    (x * 10.0 - t).abs() < 1e-9 && t >= 0.0 && t as i64 <= hi_tenths
}

impl TrainConfig {
    /// Checks every hyper-parameter against its search grid.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !LEARNING_RATES
            .iter()
            .any(|&lr| (self.lr - lr).abs() <= 1e-12 * lr)
        {
            return bad(format!("lr {} not in {{1e-2, 1e-3, 1e-4}}", self.lr));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !on_tenth_grid(v, 10) {
                return bad(format!("{name} {v} not in {{0, 0.1, ..., 1}}"));
            }
        }
        if !(on_tenth_grid(self.tau, 10) && self.tau > 0.0) {
            return bad(format!("tau {} not in {{0.1, ..., 1}}", self.tau));
        }
        if !on_tenth_grid(self.rho, 9) {
            return bad(format!("rho {} not in {{0, 0.1, ..., 0.9}}", self.rho));
        }
        if self.d == 0 || self.batch_size == 0 || self.patience == 0 || self.eval_k == 0 {
            return bad("d, batch_size, patience and eval_k must be positive".into());
        }
        Ok(())
    }
}

/// One BPR training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

fn eligible_users<G: GraphView + ?Sized>(g: &G) -> Vec<u32> {
    let n_items = g.n_items();
    let mut skipped = 0usize;
    let users = (0..g.n_users())
        .filter(|&u| {
            let deg = g.user_degree(u);
            if deg == n_items && deg > 0 {
                skipped += 1;
            }
            deg > 0 && deg < n_items
        })
        .map(|u| u as u32)
        .collect();
    if skipped > 0 {
        warn!("{skipped} users interacted with every item and are never sampled");
    }
    users
}

/// Draws `n` triplets: a uniform eligible user, a uniform positive of that
/// user and a uniform non-interacted negative.
pub fn sample_triplets<G: GraphView + ?Sized>(g: &G, n: usize, seed: u64) -> Vec<Triplet> {
    sample_from(g, &eligible_users(g), n, seed)
}

fn sample_from<G: GraphView + ?Sized>(g: &G, users: &[u32], n: usize, seed: u64) -> Vec<Triplet> {
    if users.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_items = g.n_items() as u32;
    (0..n)
        .map(|_| {
            let user = users[rng.gen_range(0..users.len())];
            let row = g.user_adjacency().row(user as usize);
            let pos = row[rng.gen_range(0..row.len())];
            let neg = loop {
                let j = rng.gen_range(0..n_items);
                if row.binary_search(&j).is_err() {
                    break j;
                }
            };
            Triplet { user, pos, neg }
        })
        .collect()
}

/// Early-stopping state after a history of monitored values (higher is better).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub stop: bool,
    /// 1-based epoch of the first maximum.
    pub best_epoch: usize,
}

pub fn early_stop(history: &[f64], patience: usize) -> StopDecision {
    let mut best = 0usize;
    for (e, v) in history.iter().enumerate() {
        if *v > history[best] {
            best = e;
        }
    }
    let since = history.len().saturating_sub(best + 1);
    StopDecision {
        stop: !history.is_empty() && since >= patience.max(1),
        best_epoch: if history.is_empty() { 0 } else { best + 1 },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: u32,
    pub loss: LossBreakdown,
    pub val_recall10: f64,
    pub seconds: f64,
}

pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,rec,cl_user,cl_item,l2,total,val_recall10,seconds\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            l.epoch,
            l.loss.rec,
            l.loss.cl_user,
            l.loss.cl_item,
            l.loss.l2,
            l.loss.total,
            l.val_recall10,
            l.seconds
        );
    }
    out
}

/// Parses the output of [`epoch_log_csv`].
pub fn parse_epoch_log_csv(text: &str, path: &Path) -> Result<Vec<EpochLog>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "epoch,rec,cl_user,cl_item,l2,total,val_recall10,seconds" => {}
        _ => return Err(err(1, "missing epoch log header".into())),
    }
    let mut logs = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(n + 1, format!("expected 8 fields, got {}", f.len())));
        }
        let num = |i: usize| {
            f[i].trim()
                .parse::<f64>()
                .map_err(|_| err(n + 1, format!("bad number {:?}", f[i])))
        };
        let epoch = f[0]
            .trim()
            .parse::<u32>()
            .map_err(|_| err(n + 1, format!("bad epoch {:?}", f[0])))?;
        logs.push(EpochLog {
            epoch,
            loss: LossBreakdown {
                rec: num(1)?,
                cl_user: num(2)?,
                cl_item: num(3)?,
                l2: num(4)?,
                total: num(5)?,
                ..Default::default()
            },
            val_recall10: num(6)?,
            seconds: num(7)?,
        });
    }
    Ok(logs)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGPR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encoder state, optional prompts and run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub prompts: Option<PromptSet>,
    pub seed: u64,
    pub epoch: u32,
    pub best_metric: f64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {rows}x{cols} larger than file")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn ids(&mut self) -> Result<Vec<u32>> {
        let n = self.u32()? as usize;
        if n * 4 > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "id list of {n} larger than file"
            )));
        }
        (0..n).map(|_| self.u32()).collect()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for x in t.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    /// Little-endian layout: magic, version, d, layers, users, items, the
    /// encoder tensors in declared order as row-major f64, seed (u64), epoch
    /// (u32), best metric (f64), then a u8 prompt flag. The prompt section is
    /// the distinct hard ids, the soft count, one id list per user, then the
    /// hard, soft and `p_v` tensors. Id lists are a u32 length followed by u32 ids.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        p.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
        for v in [p.dim(), p.n_layers(), p.n_users(), p.n_items()] {
            put_u32(&mut out, v)?;
        }
        for t in p.tensors() {
            put_tensor(&mut out, t);
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_metric.to_le_bytes());
        match &self.prompts {
            None => out.push(0),
            Some(ps) => {
                out.push(1);
                put_u32(&mut out, ps.hard_items.len())?;
                ps.hard_items
                    .iter()
                    .for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
                put_u32(&mut out, ps.n_soft())?;
                if ps.hard.len() != p.n_users() {
                    return Err(Error::Checkpoint(
                        "prompt lists do not match user count".into(),
                    ));
                }
                for list in &ps.hard {
                    put_u32(&mut out, list.len())?;
                    list.iter()
                        .for_each(|i| out.extend_from_slice(&i.to_le_bytes()));
                }
                for t in ps.tensors() {
                    put_tensor(&mut out, t);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let (d, n_layers, n_users, n_items) = (
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        );
        let user_embeddings = r.tensor(n_users, d)?;
        let item_embeddings = r.tensor(n_items, d)?;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            layers.push(LayerWeights {
                w_q: r.tensor(d, d)?,
                w_k: r.tensor(d, d)?,
                w_v: r.tensor(d, d)?,
                w_u: r.tensor(d, d)?,
            });
        }
        let params = EncoderParams::from_parts(user_embeddings, item_embeddings, layers);
        let seed = r.u64()?;
        let epoch = r.u32()?;
        let best_metric = r.f64()?;
        let prompts = match r.u8()? {
            0 => None,
            1 => {
                let hard_items = r.ids()?;
                let m_soft = r.u32()? as usize;
                let hard = (0..n_users).map(|_| r.ids()).collect::<Result<Vec<_>>>()?;
                let hard_embeddings = r.tensor(hard_items.len(), d)?;
                let soft_embeddings = r.tensor(m_soft, d)?;
                let p_v = r.tensor(d, d)?;
                Some(PromptSet {
                    hard,
                    hard_items,
                    hard_embeddings,
                    soft_embeddings,
                    p_v,
                })
            }
            f => return Err(Error::Checkpoint(format!("bad prompt flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            params,
            prompts,
            seed,
            epoch,
            best_metric,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Trainable state of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: EncoderParams,
    pub prompts: Option<PromptSet>,
}

impl Model {
    fn trainable_tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self
            .params
            .tensors()
            .into_iter()
            .zip(&self.params.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t)
            .collect();
        if let Some(p) = &self.prompts {
            out.extend(p.tensors());
        }
        out
    }

    fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mask = self.params.trainable.clone();
        let mut out: Vec<&mut Tensor> = self
            .params
            .tensors_mut()
            .into_iter()
            .zip(mask)
            .filter(|(_, t)| *t)
            .map(|(t, _)| t)
            .collect();
        if let Some(p) = &mut self.prompts {
            out.extend(p.tensors_mut());
        }
        out
    }

    /// Names of the trainable tensors, in the order used by the optimiser.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.params.n_tensors())
            .filter(|&k| self.params.trainable[k])
            .map(EncoderParams::tensor_name)
            .collect();
        if self.prompts.is_some() {
            out.extend(["hard_embeddings", "soft_embeddings", "p_v"].map(String::from));
        }
        out
    }

    /// Encodes `g` without gradients.
    pub fn encode<G: GraphView + ?Sized>(&self, g: &G) -> Result<crate::encoder::NodeReps> {
        encode_with_prompts(g, &self.params, self.prompts.as_ref())
    }

    pub fn to_checkpoint(&self, seed: u64, epoch: u32, best_metric: f64) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            prompts: self.prompts.clone(),
            seed,
            epoch,
            best_metric,
        }
    }
}

/// Tape handles produced by one batch pass.
struct BatchPass {
    tape: GradTape,
    terms: LossTerms,
    trainable: Vec<Var>,
}

fn unique(ids: impl Iterator<Item = u32>) -> Arc<[u32]> {
    ids.collect::<BTreeSet<_>>()
        .into_iter()
        .collect::<Vec<_>>()
        .into()
}

/// The two dropout views of one epoch, with their prompt adjacencies.
pub struct Views<'g> {
    pub a: SubGraph<'g>,
    pub b: SubGraph<'g>,
    adj: Option<[PromptAdjacency; 2]>,
}

impl<'g> Views<'g> {
    pub fn draw(
        g: &'g InteractionGraph,
        rho: f64,
        seeds: (u64, u64),
        prompts: Option<&PromptSet>,
    ) -> Result<Self> {
        let a = edge_dropout(g, rho, seeds.0)?;
        let b = edge_dropout(g, rho, seeds.1)?;
        let adj = match prompts {
            Some(p) => Some([PromptAdjacency::new(p, &a)?, PromptAdjacency::new(p, &b)?]),
            None => None,
        };
        Ok(Views { a, b, adj })
    }
}

fn batch_pass(
    model: &Model,
    g: &InteractionGraph,
    main_adj: Option<&PromptAdjacency>,
    views: Option<&Views<'_>>,
    batch: &[Triplet],
    cfg: &TrainConfig,
) -> Result<BatchPass> {
    let mut tape = GradTape::new();
    let vars = EncoderVars::bind(&mut tape, &model.params);
    let mut trainable: Vec<Var> = vars
        .all()
        .into_iter()
        .zip(&model.params.trainable)
        .filter(|(_, &t)| t)
        .map(|(v, _)| v)
        .collect();
    let projection = match &model.prompts {
        Some(p) => {
            let h = tape.param(p.hard_embeddings.clone());
            let s = tape.param(p.soft_embeddings.clone());
            let pv = tape.param(p.p_v.clone());
            trainable.extend([h, s, pv]);
            let features = tape.concat(h, s)?;
            Some(PromptProjection::new(&mut tape, features, pv, &vars)?)
        }
        None => None,
    };
    let main = encode_on_tape(&mut tape, g, &vars, projection.as_ref().zip(main_adj))?;
    let users: Arc<[u32]> = batch.iter().map(|t| t.user).collect::<Vec<_>>().into();
    let pos: Arc<[u32]> = batch.iter().map(|t| t.pos).collect::<Vec<_>>().into();
    let neg: Arc<[u32]> = batch.iter().map(|t| t.neg).collect::<Vec<_>>().into();
    let eu = tape.gather(main.users, users)?;
    let ei = tape.gather(main.items, pos)?;
    let ej = tape.gather(main.items, neg)?;
    let rec = bpr_on_tape(&mut tape, eu, ei, ej)?;

    let batch_users = unique(batch.iter().map(|t| t.user));
    let batch_items = unique(batch.iter().map(|t| t.pos));
    let cl = match views {
        Some(v) if cfg.lambda1 > 0.0 && batch_users.len() >= 2 && batch_items.len() >= 2 => {
            let adj = v.adj.as_ref();
            let ra = encode_on_tape(
                &mut tape,
                &v.a,
                &vars,
                projection.as_ref().zip(adj.map(|a| &a[0])),
            )?;
            let rb = encode_on_tape(
                &mut tape,
                &v.b,
                &vars,
                projection.as_ref().zip(adj.map(|a| &a[1])),
            )?;
            contrastive_on_tape(
                &mut tape,
                [(ra.users, ra.items), (rb.users, rb.items)],
                &batch_users,
                &batch_items,
                cfg.tau,
            )?
        }
        _ => {
            let z = tape.constant(Tensor::filled(1, 1, 0.0));
            (z, z)
        }
    };
    let l2 = if cfg.lambda2 > 0.0 {
        l2_on_tape(&mut tape, &trainable)?
    } else {
        let v: f64 = model
            .trainable_tensors()
            .iter()
            .map(|t| t.squared_norm())
            .sum();
        tape.constant(Tensor::filled(1, 1, v))
    };
    let terms = joint_on_tape(&mut tape, rec, cl, l2, cfg.lambda1, cfg.lambda2)?;
    Ok(BatchPass {
        tape,
        terms,
        trainable,
    })
}

/// Joint loss of one batch, without updating anything.
pub fn batch_loss(
    model: &Model,
    g: &InteractionGraph,
    views: Option<&Views<'_>>,
    batch: &[Triplet],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let main_adj = model
        .prompts
        .as_ref()
        .map(|p| PromptAdjacency::new(p, g))
        .transpose()?;
    let pass = batch_pass(model, g, main_adj.as_ref(), views, batch, cfg)?;
    Ok(pass.terms.breakdown(&pass.tape))
}

/// Gradient coverage of one tensor during a probe step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradientCount {
    pub name: String,
    pub entries: usize,
    pub nonzero: usize,
}

/// Runs one batch forward and backward without updating, and reports every
/// tensor that received a gradient. Frozen tensors are tape constants and
/// never appear.
pub fn probe_gradients(
    model: &Model,
    g: &InteractionGraph,
    batch: &[Triplet],
    cfg: &TrainConfig,
) -> Result<Vec<GradientCount>> {
    let main_adj = model
        .prompts
        .as_ref()
        .map(|p| PromptAdjacency::new(p, g))
        .transpose()?;
    let views = Views::draw(g, cfg.rho, (cfg.seed, cfg.seed + 1), model.prompts.as_ref())?;
    let pass = batch_pass(model, g, main_adj.as_ref(), Some(&views), batch, cfg)?;
    let grads = pass.tape.backward(pass.terms.total)?;
    Ok(pass
        .trainable
        .iter()
        .zip(model.trainable_names())
        .filter_map(|(&v, name)| {
            grads.get(v).map(|g| GradientCount {
                name,
                entries: g.len(),
                nonzero: g.as_slice().iter().filter(|x| **x != 0.0).count(),
            })
        })
        .collect())
}

struct Session<'g> {
    graph: &'g InteractionGraph,
    model: Model,
    adam: AdamState,
    cfg: TrainConfig,
    eligible: Vec<u32>,
    main_adj: Option<PromptAdjacency>,
}

impl<'g> Session<'g> {
    fn new(graph: &'g InteractionGraph, model: Model, cfg: &TrainConfig) -> Result<Self> {
        let adam = AdamState::new(&model.trainable_tensors());
        let main_adj = model
            .prompts
            .as_ref()
            .map(|p| PromptAdjacency::new(p, graph))
            .transpose()?;
        Ok(Session {
            graph,
            adam,
            cfg: cfg.clone(),
            eligible: eligible_users(graph),
            main_adj,
            model,
        })
    }

    fn run_epoch(&mut self, epoch: u64) -> Result<LossBreakdown> {
        let cfg = &self.cfg;
        let n = self.graph.n_edges();
        let triplets = sample_from(
            self.graph,
            &self.eligible,
            n,
            sub_seed(cfg.seed, SEED_TRIPLETS + epoch),
        );
        if triplets.is_empty() {
            return Err(Error::Contract(
                "no user has both positives and negatives".into(),
            ));
        }
        let views = if cfg.lambda1 > 0.0 {
            Some(Views::draw(
                self.graph,
                cfg.rho,
                (
                    sub_seed(cfg.seed, SEED_VIEW_A + epoch),
                    sub_seed(cfg.seed, SEED_VIEW_B + epoch),
                ),
                self.model.prompts.as_ref(),
            )?)
        } else {
            None
        };
        let mut sum = LossBreakdown {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            ..Default::default()
        };
        let mut batches = 0usize;
        for batch in triplets.chunks(cfg.batch_size) {
            let pass = batch_pass(
                &self.model,
                self.graph,
                self.main_adj.as_ref(),
                views.as_ref(),
                batch,
                cfg,
            )?;
            let b = pass.terms.breakdown(&pass.tape);
            let grads = pass.tape.backward(pass.terms.total)?;
            let g: Vec<Tensor> = pass.trainable.iter().map(|&v| grads.wrt(v)).collect();
            drop(pass);
            let lr = cfg.lr;
            let mut params = self.model.trainable_tensors_mut();
            adam_step(&mut params, &g, &mut self.adam, lr)?;
            sum.rec += b.rec;
            sum.cl_user += b.cl_user;
            sum.cl_item += b.cl_item;
            sum.l2 += b.l2;
            sum.total += b.total;
            batches += 1;
        }
        let k = batches as f64;
        sum.rec /= k;
        sum.cl_user /= k;
        sum.cl_item /= k;
        sum.l2 /= k;
        sum.total /= k;
        if !sum.total.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: loss diverged")));
        }
        Ok(sum)
    }
}

/// Validation signal for early stopping.
struct Validator {
    valid: Vec<(u32, u32)>,
    negatives: Vec<u32>,
}

impl Validator {
    fn new(g: &InteractionGraph, valid: &[(u32, u32)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, SEED_VALID_NEGATIVES));
        let n_items = g.n_items() as u32;
        let negatives = valid
            .iter()
            .map(|&(u, i)| {
                let row = g.user_adjacency().row(u as usize);
                if row.len() + 1 >= n_items as usize {
                    return i;
                }
                loop {
                    let j = rng.gen_range(0..n_items);
                    if j != i && row.binary_search(&j).is_err() {
                        break j;
                    }
                }
            })
            .collect();
        Validator {
            valid: valid.to_vec(),
            negatives,
        }
    }

    /// `(recall@k, monitored value)`; the monitored value is higher-is-better.
    fn score(&self, model: &Model, g: &InteractionGraph, cfg: &TrainConfig) -> Result<(f64, f64)> {
        if self.valid.is_empty() {
            return Ok((0.0, 0.0));
        }
        let reps = model.encode(g)?;
        let labels = label_cold_start(g.edges(), g.n_users(), 0);
        let recall = evaluate(&reps, g, &self.valid, &labels, cfg.eval_k)?
            .overall
            .recall;
        let monitored = match cfg.monitor {
            Monitor::Recall => recall,
            Monitor::Loss => {
                let mut total = 0.0;
                for (&(u, i), &j) in self.valid.iter().zip(&self.negatives) {
                    total += bpr_loss(
                        reps.users.row(u as usize),
                        reps.items.row(i as usize),
                        reps.items.row(j as usize),
                    )?;
                }
                -total / self.valid.len() as f64
            }
        };
        Ok((recall, monitored))
    }
}

/// Result of a training run: the best model seen and the per-epoch log.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub best_epoch: u32,
    pub best_metric: f64,
    pub report: TunedParamReport,
}

impl RunOutcome {
    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        self.model
            .to_checkpoint(seed, self.best_epoch, self.best_metric)
    }
}

fn train_loop(
    graph: &InteractionGraph,
    valid: &[(u32, u32)],
    model: Model,
    cfg: &TrainConfig,
    report: TunedParamReport,
    stage: &str,
) -> Result<RunOutcome> {
    let validator = Validator::new(graph, valid, cfg.seed);
    let (_, initial) = validator.score(&model, graph, cfg)?;
    let mut best_model = model.clone();
    let mut best_metric = initial;
    let mut best_epoch = 0u32;
    let mut history = Vec::new();
    let mut logs = Vec::new();
    let mut session = Session::new(graph, model, cfg)?;
    for epoch in 1..=cfg.max_epochs as u64 {
        let start = Instant::now();
        let loss = session.run_epoch(epoch)?;
        let seconds = start.elapsed().as_secs_f64();
        let (recall, monitored) = validator.score(&session.model, graph, cfg)?;
        debug!(
            "{stage} epoch {epoch}: total {:.6} recall {recall:.4} ({seconds:.3}s)",
            loss.total
        );
        logs.push(EpochLog {
            epoch: epoch as u32,
            loss,
            val_recall10: recall,
            seconds,
        });
        if epoch == 1 || monitored > best_metric {
            best_metric = monitored;
            best_epoch = epoch as u32;
            best_model = session.model.clone();
        }
        history.push(monitored);
        if !valid.is_empty() && early_stop(&history, cfg.patience).stop {
            info!("{stage}: early stop after epoch {epoch}, best epoch {best_epoch}");
            break;
        }
    }
    if valid.is_empty() {
        best_model = session.model;
        best_epoch = logs.len() as u32;
    }
    Ok(RunOutcome {
        model: best_model,
        logs,
        best_epoch,
        best_metric,
        report,
    })
}

fn dims_of(params: &EncoderParams) -> ModelDims {
    ModelDims {
        n_users: params.n_users(),
        n_items: params.n_items(),
        d: params.dim(),
        n_layers: params.n_layers(),
    }
}

/// Trains every encoder tensor on the source graph with the joint objective.
pub fn pretrain(
    source: &InteractionGraph,
    valid: &[(u32, u32)],
    cfg: &TrainConfig,
) -> Result<RunOutcome> {
    cfg.validate()?;
    if source.n_edges() == 0 {
        return Err(Error::GraphBuild("source graph has no edges".into()));
    }
    let params = EncoderParams::init(
        source.n_users(),
        source.n_items(),
        cfg.d,
        cfg.n_layers,
        sub_seed(cfg.seed, SEED_INIT),
    )?;
    let report = TunedParamReport::full_fine_tune(dims_of(&params));
    let model = Model {
        params,
        prompts: None,
    };
    train_loop(source, valid, model, cfg, report, "pretrain")
}

/// Loads a pre-trained encoder for the target domain: users and weights from
/// the checkpoint, fresh Xavier item embeddings, everything frozen.
pub fn target_model(
    target: &InteractionGraph,
    checkpoint: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<Model> {
    let p = &checkpoint.params;
    if p.dim() != cfg.d || p.n_layers() != cfg.n_layers {
        return Err(Error::Checkpoint(format!(
            "checkpoint has d={} layers={}, config wants d={} layers={}",
            p.dim(),
            p.n_layers(),
            cfg.d,
            cfg.n_layers
        )));
    }
    if p.n_users() != target.n_users() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} users, target graph {}",
            p.n_users(),
            target.n_users()
        )));
    }
    let items = if target.n_items() == 0 {
        Tensor::zeros(0, cfg.d)
    } else {
        xavier_init(
            target.n_items(),
            cfg.d,
            sub_seed(cfg.seed, SEED_TARGET_ITEMS),
        )?
    };
    let mut params = EncoderParams::from_parts(p.user_embeddings.clone(), items, p.layers.clone());
    params.set_all_trainable(false);
    Ok(Model {
        params,
        prompts: None,
    })
}

/// Freezes the pre-trained encoder and trains prompts (and, with the extended
/// scope, the target item embeddings).
pub fn prompt_tune(
    target: &InteractionGraph,
    valid: &[(u32, u32)],
    checkpoint: &Checkpoint,
    relations: &RelationIndex,
    cfg: &TrainConfig,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = target_model(target, checkpoint, cfg)?;
    let prompt_cfg = PromptConfig {
        m_hard: cfg.m_hard,
        m_soft: cfg.m_soft,
        aggregation: cfg.aggregation,
        seed: sub_seed(cfg.seed, SEED_PROMPTS),
    };
    let prompts = build_prompt_set(&model.params, target, relations, &prompt_cfg)?;
    prompts.validate(target)?;
    model.params.trainable[1] = cfg.tune_scope == TuneScope::PromptsPlusTargetItems;
    let report = count_tuned_params(&prompts, cfg.tune_scope, dims_of(&model.params));
    model.prompts = Some(prompts);
    train_loop(target, valid, model, cfg, report, "prompt-tune")
}

/// Trains every tensor of the transferred model on the target graph.
pub fn fine_tune_baseline(
    target: &InteractionGraph,
    valid: &[(u32, u32)],
    checkpoint: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = target_model(target, checkpoint, cfg)?;
    model.params.set_all_trainable(true);
    let report = TunedParamReport::full_fine_tune(dims_of(&model.params));
    train_loop(target, valid, model, cfg, report, "fine-tune")
}

/// Prompt-tuning model as it stands before any update, for gradient probes.
pub fn initial_prompt_model(
    target: &InteractionGraph,
    checkpoint: &Checkpoint,
    relations: &RelationIndex,
    cfg: &TrainConfig,
) -> Result<(Model, TunedParamReport)> {
    let mut model = target_model(target, checkpoint, cfg)?;
    let prompt_cfg = PromptConfig {
        m_hard: cfg.m_hard,
        m_soft: cfg.m_soft,
        aggregation: cfg.aggregation,
        seed: sub_seed(cfg.seed, SEED_PROMPTS),
    };
    let prompts = build_prompt_set(&model.params, target, relations, &prompt_cfg)?;
    model.params.trainable[1] = cfg.tune_scope == TuneScope::PromptsPlusTargetItems;
    let report = count_tuned_params(&prompts, cfg.tune_scope, dims_of(&model.params));
    model.prompts = Some(prompts);
    Ok((model, report))
}
