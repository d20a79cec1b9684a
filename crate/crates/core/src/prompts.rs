//! Personalised graph prompts.
//!
//! Hard prompts are catalogue-related items a user has not interacted with,
//! ranked by embedding correlation with the user's items. Soft prompts are a
//! shared pool of free vectors. Both feed the user side of the encoder through
//! the prompt value matrix `p_v`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::RelationTable;
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::GraphView;
use crate::numerics::{xavier_init_with, Tensor};

/// Prompt parameters and per-user hard prompt lists.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// Per-user hard prompt item ids, best first.
    pub hard: Vec<Vec<u32>>,
    /// Sorted distinct ids appearing in `hard`; row `k` of `hard_embeddings` belongs to `hard_items[k]`.
    pub hard_items: Vec<u32>,
    pub hard_embeddings: Tensor,
    pub soft_embeddings: Tensor,
    pub p_v: Tensor,
}

impl PromptSet {
    /// No hard or soft prompts; `p_v` is still initialised.
    pub fn empty(n_users: usize, d: usize, seed: u64) -> Result<Self> {
        Ok(PromptSet {
            hard: vec![Vec::new(); n_users],
            hard_items: Vec::new(),
            hard_embeddings: Tensor::zeros(0, d),
            soft_embeddings: Tensor::zeros(0, d),
            p_v: xavier_init_with(d, d, &mut ChaCha8Rng::seed_from_u64(seed))?,
        })
    }

    pub fn dim(&self) -> usize {
        self.p_v.rows()
    }

    pub fn n_soft(&self) -> usize {
        self.soft_embeddings.rows()
    }

    pub fn n_prompt_nodes(&self) -> usize {
        self.hard_items.len() + self.n_soft()
    }

    pub fn hard_row_index(&self) -> HashMap<u32, usize> {
        self.hard_items
            .iter()
            .enumerate()
            .map(|(k, &i)| (i, k))
            .collect()
    }

    /// Prompt node features: hard rows followed by soft rows.
    pub fn features(&self) -> Result<Tensor> {
        self.hard_embeddings.concat_rows(&self.soft_embeddings)
    }

    /// Trainable tensors in declared order: hard, soft, `p_v`.
    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.hard_embeddings, &self.soft_embeddings, &self.p_v]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [
            &mut self.hard_embeddings,
            &mut self.soft_embeddings,
            &mut self.p_v,
        ]
    }

    /// Checks shapes and that no user is prompted with one of its own items.
    pub fn validate<G: GraphView + ?Sized>(&self, g: &G) -> Result<()> {
        let d = self.dim();
        if self.p_v.shape() != (d, d)
            || self.hard_embeddings.shape() != (self.hard_items.len(), d)
            || self.soft_embeddings.cols() != d
        {
            return Err(Error::Shape("inconsistent prompt tensor shapes".into()));
        }
        if self.hard.len() != g.n_users() {
            return Err(Error::Shape(format!(
                "{} prompt lists for {} users",
                self.hard.len(),
                g.n_users()
            )));
        }
        let known: BTreeSet<u32> = self.hard_items.iter().copied().collect();
        for (u, list) in self.hard.iter().enumerate() {
            for &i in list {
                if i as usize >= g.n_items() || !known.contains(&i) {
                    return Err(Error::Contract(format!(
                        "user {u}: unknown hard prompt {i}"
                    )));
                }
                if g.has_edge(u as u32, i) {
                    return Err(Error::Contract(format!(
                        "user {u}: hard prompt {i} is interacted"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Catalogue relations translated to target item ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationIndex {
    related: Vec<Vec<u32>>,
}

impl RelationIndex {
    /// Keeps only relations whose both ends are in `items`, merging the three kinds.
    pub fn new(relations: &RelationTable, items: &[String]) -> Self {
        let index: HashMap<&str, u32> = items
            .iter()
            .enumerate()
            .map(|(k, s)| (s.as_str(), k as u32))
            .collect();
        let related = items
            .iter()
            .map(|key| {
                relations
                    .get(key)
                    .map(|rel| {
                        rel.all()
                            .filter_map(|o| index.get(o.as_str()).copied())
                            .collect::<BTreeSet<_>>()
                            .into_iter()
                            .collect()
                    })
                    .unwrap_or_default()
            })
            .collect();
        RelationIndex { related }
    }

    pub fn from_lists(related: Vec<Vec<u32>>) -> Self {
        RelationIndex { related }
    }

    pub fn related(&self, item: u32) -> &[u32] {
        self.related.get(item as usize).map_or(&[], Vec::as_slice)
    }
}

/// Items related to any of `user_items`, minus the user's own items.
pub fn candidate_pool(user_items: &[u32], relations: &RelationIndex) -> BTreeSet<u32> {
    let own: BTreeSet<u32> = user_items.iter().copied().collect();
    user_items
        .iter()
        .flat_map(|&j| relations.related(j).iter().copied())
        .filter(|r| !own.contains(r))
        .collect()
}

/// How per-item correlations are combined over a user's items.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Aggregation {
    #[default]
    Max,
    Sum,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "sum" => Ok(Aggregation::Sum),
            _ => Err(Error::Config(format!(
                "unknown correlation aggregation {s:?}"
            ))),
        }
    }
}

/// `score(r) = agg_j e_j . e_r` over the user's items `j`.
pub fn correlation_scores(
    item_reps: &Tensor,
    user_items: &[u32],
    candidates: &[u32],
    agg: Aggregation,
) -> Result<Vec<(u32, f64)>> {
    if user_items.is_empty() {
        return Err(Error::Contract(
            "correlation needs at least one interacted item".into(),
        ));
    }
    let n = item_reps.rows();
    if let Some(&bad) = user_items
        .iter()
        .chain(candidates)
        .find(|&&i| i as usize >= n)
    {
        return Err(Error::Range(format!("item {bad} of {n}")));
    }
    let dot = |a: u32, b: u32| -> f64 {
        item_reps
            .row(a as usize)
            .iter()
            .zip(item_reps.row(b as usize))
            .map(|(x, y)| x * y)
            .sum()
    };
    Ok(candidates
        .iter()
        .map(|&r| {
            let it = user_items.iter().map(|&j| dot(j, r));
            let s = match agg {
                Aggregation::Max => it.fold(f64::NEG_INFINITY, f64::max),
                Aggregation::Sum => it.sum(),
            };
            (r, s)
        })
        .collect())
}

/// Top `m` ids by descending score, ties by ascending id.
pub fn select_hard_prompts(scores: &[(u32, f64)], m: usize) -> Vec<u32> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.into_iter().take(m).map(|(id, _)| id).collect()
}

/// Xavier-initialised `m x d` soft prompt table.
pub fn init_soft_prompts(m: usize, d: usize, seed: u64) -> Result<Tensor> {
    if m == 0 {
        return Ok(Tensor::zeros(0, d));
    }
    xavier_init_with(m, d, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Prompt counts and selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptConfig {
    pub m_hard: usize,
    pub m_soft: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
}

/// Selects hard prompts from an encode pass of `params` over `g` and
/// initialises the soft pool and `p_v`. Hard prompt embeddings start as copies
/// of the corresponding item embeddings.
pub fn build_prompt_set<G: GraphView + Sync + ?Sized>(
    params: &EncoderParams,
    g: &G,
    relations: &RelationIndex,
    cfg: &PromptConfig,
) -> Result<PromptSet> {
    let d = params.dim();
    let hard: Vec<Vec<u32>> = if cfg.m_hard == 0 {
        vec![Vec::new(); g.n_users()]
    } else {
        let reps = encode(g, params)?;
        (0..g.n_users())
            .into_par_iter()
            .map(|u| {
                let items = g.user_adjacency().row(u);
                if items.is_empty() {
                    return Ok(Vec::new());
                }
                let pool: Vec<u32> = candidate_pool(items, relations).into_iter().collect();
                let scores = correlation_scores(&reps.items, items, &pool, cfg.aggregation)?;
                Ok(select_hard_prompts(&scores, cfg.m_hard))
            })
            .collect::<Result<_>>()?
    };
    let hard_items: Vec<u32> = hard
        .iter()
        .flatten()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let rows: Vec<usize> = hard_items.iter().map(|&i| i as usize).collect();
    let hard_embeddings = if rows.is_empty() {
        Tensor::zeros(0, d)
    } else {
        params.item_embeddings.select_rows(&rows)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let soft_embeddings = if cfg.m_soft == 0 {
        Tensor::zeros(0, d)
    } else {
        xavier_init_with(cfg.m_soft, d, &mut rng)?
    };
    let p_v = xavier_init_with(d, d, &mut rng)?;
    Ok(PromptSet {
        hard,
        hard_items,
        hard_embeddings,
        soft_embeddings,
        p_v,
    })
}

/// Which tensors are trained during prompt-tuning.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum TuneScope {
    #[default]
    PromptsOnly,
    PromptsPlusTargetItems,
}

impl TuneScope {
    pub fn as_str(self) -> &'static str {
        match self {
            TuneScope::PromptsOnly => "prompts_only",
            TuneScope::PromptsPlusTargetItems => "prompts_plus_target_items",
        }
    }
}

impl fmt::Display for TuneScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TuneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompts_only" => Ok(TuneScope::PromptsOnly),
            "prompts_plus_target_items" => Ok(TuneScope::PromptsPlusTargetItems),
            _ => Err(Error::Config(format!("unknown tune scope {s:?}"))),
        }
    }
}

/// Model dimensions needed for parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_users: usize,
    pub n_items: usize,
    pub d: usize,
    pub n_layers: usize,
}

impl ModelDims {
    /// Parameters updated when every tensor is fine-tuned.
    pub fn full_count(&self) -> usize {
        (self.n_users + self.n_items) * self.d + 4 * self.n_layers * self.d * self.d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunedParamReport {
    pub groups: Vec<(String, usize)>,
    pub tuned: usize,
    pub full: usize,
    pub ratio: f64,
}

impl TunedParamReport {
    /// Report for a run that trains everything.
    pub fn full_fine_tune(dims: ModelDims) -> Self {
        let groups = vec![
            ("user_embeddings".to_string(), dims.n_users * dims.d),
            ("item_embeddings".to_string(), dims.n_items * dims.d),
            (
                "encoder_weights".to_string(),
                4 * dims.n_layers * dims.d * dims.d,
            ),
        ];
        Self::from_groups(groups, dims)
    }

    fn from_groups(groups: Vec<(String, usize)>, dims: ModelDims) -> Self {
        let tuned = groups.iter().map(|g| g.1).sum();
        let full = dims.full_count();
        TunedParamReport {
            groups,
            tuned,
            full,
            ratio: if full == 0 {
                0.0
            } else {
                tuned as f64 / full as f64
            },
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,count\n");
        for (name, n) in &self.groups {
            out.push_str(&format!("{name},{n}\n"));
        }
        out.push_str(&format!(
            "tuned,{}\nfull,{}\nratio,{}\n",
            self.tuned, self.full, self.ratio
        ));
        out
    }
}

pub fn count_tuned_params(
    prompts: &PromptSet,
    scope: TuneScope,
    dims: ModelDims,
) -> TunedParamReport {
    let d = dims.d;
    let mut groups = vec![
        ("hard_embeddings".to_string(), prompts.hard_items.len() * d),
        ("soft_embeddings".to_string(), prompts.n_soft() * d),
        ("p_v".to_string(), d * d),
    ];
    if scope == TuneScope::PromptsPlusTargetItems {
        groups.push(("target_item_embeddings".to_string(), dims.n_items * d));
    }
    TunedParamReport::from_groups(groups, dims)
}
