//! Attention-weighted graph encoder.
//!
//! Node features are stored as rows, so a weight `W` acting on a column
//! feature `h` is applied as `H * W^T`. One layer computes, for every node `i`,
//!
//! ```text
//! h_i' = W_U h_i + sum_{j in N(i)} w_ij W_V h_j,   w_ij = softmax_j((W_Q h_i) . (W_K h_j))
//! ```
//!
//! with no activation. The readout averages layers `0..=L`. With prompts, user
//! rows additionally mix in an attention aggregate over their prompt nodes,
//! weighted by a degree-derived factor `lambda`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Csr, GraphView};
use crate::numerics::{softmax_in_place, xavier_init_with, GradTape, Tensor, Var};
use crate::prompts::PromptSet;

/// The four square weights of one propagation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_u: Tensor,
}

impl LayerWeights {
    pub fn identity(d: usize) -> Self {
        LayerWeights {
            w_q: Tensor::identity(d),
            w_k: Tensor::identity(d),
            w_v: Tensor::identity(d),
            w_u: Tensor::identity(d),
        }
    }

    fn as_array(&self) -> [&Tensor; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_u]
    }

    fn as_array_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_u]
    }
}

const WEIGHT_NAMES: [&str; 4] = ["w_q", "w_k", "w_v", "w_u"];

/// Embedding tables plus per-layer weights.
///
/// Tensors have a fixed declared order: user embeddings, item embeddings, then
/// `w_q, w_k, w_v, w_u` for each layer. `trainable` is indexed in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub user_embeddings: Tensor,
    pub item_embeddings: Tensor,
    pub layers: Vec<LayerWeights>,
    pub trainable: Vec<bool>,
}

impl EncoderParams {
    /// Xavier-initialised parameters, all trainable.
    pub fn init(
        n_users: usize,
        n_items: usize,
        d: usize,
        n_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let user_embeddings = xavier_init_with(n_users.max(1), d, &mut rng)?;
        let item_embeddings = xavier_init_with(n_items.max(1), d, &mut rng)?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(LayerWeights {
                w_q: xavier_init_with(d, d, &mut rng)?,
                w_k: xavier_init_with(d, d, &mut rng)?,
                w_v: xavier_init_with(d, d, &mut rng)?,
                w_u: xavier_init_with(d, d, &mut rng)?,
            });
        }
        let user_embeddings = truncate_rows(user_embeddings, n_users);
        let item_embeddings = truncate_rows(item_embeddings, n_items);
        Ok(Self::from_parts(user_embeddings, item_embeddings, layers))
    }

    /// Assembles parameters with every tensor marked trainable.
    pub fn from_parts(
        user_embeddings: Tensor,
        item_embeddings: Tensor,
        layers: Vec<LayerWeights>,
    ) -> Self {
        let trainable = vec![true; 2 + 4 * layers.len()];
        EncoderParams {
            user_embeddings,
            item_embeddings,
            layers,
            trainable,
        }
    }

    pub fn dim(&self) -> usize {
        self.user_embeddings.cols()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_embeddings.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_embeddings.rows()
    }

    pub fn n_tensors(&self) -> usize {
        2 + 4 * self.layers.len()
    }

    pub fn tensor_name(index: usize) -> String {
        match index {
            0 => "user_embeddings".into(),
            1 => "item_embeddings".into(),
            k => format!("layer{}.{}", (k - 2) / 4, WEIGHT_NAMES[(k - 2) % 4]),
        }
    }

    /// All tensors in declared order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.user_embeddings, &self.item_embeddings];
        for l in &self.layers {
            out.extend(l.as_array());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.user_embeddings, &mut self.item_embeddings];
        for l in &mut self.layers {
            out.extend(l.as_array_mut());
        }
        out
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.trainable.iter_mut().for_each(|t| *t = trainable);
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors()
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t.len())
            .sum()
    }

    /// Checks that every tensor agrees on `d` and the mask covers every tensor.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.item_embeddings.cols() != d {
            return Err(Error::Shape(format!(
                "item embeddings have width {}, user embeddings {d}",
                self.item_embeddings.cols()
            )));
        }
        for (l, w) in self.layers.iter().enumerate() {
            for (t, name) in w.as_array().iter().zip(WEIGHT_NAMES) {
                if t.shape() != (d, d) {
                    return Err(Error::Shape(format!(
                        "layer{l}.{name} is {:?}, want ({d}, {d})",
                        t.shape()
                    )));
                }
            }
        }
        if self.trainable.len() != self.n_tensors() {
            return Err(Error::Shape(format!(
                "trainable mask has {} entries for {} tensors",
                self.trainable.len(),
                self.n_tensors()
            )));
        }
        Ok(())
    }
}

fn truncate_rows(t: Tensor, rows: usize) -> Tensor {
    let cols = t.cols();
    let mut data = t.into_vec();
    data.truncate(rows * cols);
    Tensor::from_vec(rows, cols, data).expect("prefix of a finite tensor")
}

/// Per-layer and averaged node features.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeReps {
    pub user_layers: Vec<Tensor>,
    pub item_layers: Vec<Tensor>,
    pub users: Tensor,
    pub items: Tensor,
}

impl NodeReps {
    /// Layer `l` with users stacked above items, `(n_users + n_items) x d`.
    pub fn layer(&self, l: usize) -> Result<Tensor> {
        self.user_layers[l].concat_rows(&self.item_layers[l])
    }
}

/// Tape handles for the encoder's tensors.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub user_embeddings: Var,
    pub item_embeddings: Var,
    pub layers: Vec<[Var; 4]>,
}

impl EncoderVars {
    /// Records every tensor as a leaf, trainable according to the mask.
    pub fn bind(tape: &mut GradTape, params: &EncoderParams) -> Self {
        let mut leaves = params
            .tensors()
            .into_iter()
            .zip(&params.trainable)
            .map(|(t, &tr)| tape.leaf(t.clone(), tr));
        let user_embeddings = leaves.next().expect("user table");
        let item_embeddings = leaves.next().expect("item table");
        let mut layers = Vec::new();
        while let Some(q) = leaves.next() {
            let k = leaves.next().expect("w_k");
            let v = leaves.next().expect("w_v");
            let u = leaves.next().expect("w_u");
            layers.push([q, k, v, u]);
        }
        EncoderVars {
            user_embeddings,
            item_embeddings,
            layers,
        }
    }

    /// Handles in the declared tensor order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.user_embeddings, self.item_embeddings];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out
    }
}

/// User-to-prompt-node adjacency and the per-user mixing factor.
#[derive(Debug, Clone)]
pub struct PromptAdjacency {
    offsets: Arc<[usize]>,
    indices: Arc<[u32]>,
    sources: Arc<[u32]>,
    lambda: Vec<f64>,
}

impl PromptAdjacency {
    /// Links every user to its hard prompts and to the whole soft pool.
    ///
    /// `lambda_u = |N_r| / (|N_j| + |N_r|)` where `|N_j|` sums the degrees of
    /// the user's neighbours in `g` and `|N_r|` sums the prompt degrees: a hard
    /// prompt counts its degree in `g` (at least 1), a soft prompt counts 1.
    pub fn new<G: GraphView + ?Sized>(prompts: &PromptSet, g: &G) -> Result<Self> {
        let n_users = g.n_users();
        if prompts.hard.len() != n_users {
            return Err(Error::Shape(format!(
                "prompt lists for {} users, graph has {n_users}",
                prompts.hard.len()
            )));
        }
        let row_of = prompts.hard_row_index();
        let n_hard = prompts.hard_items.len();
        let m_soft = prompts.soft_embeddings.rows();
        let mut offsets = Vec::with_capacity(n_users + 1);
        let mut indices = Vec::new();
        let mut sources = Vec::new();
        let mut lambda = Vec::with_capacity(n_users);
        offsets.push(0);
        for u in 0..n_users {
            let mut prompt_deg = m_soft as f64;
            for &item in &prompts.hard[u] {
                let row = *row_of.get(&item).ok_or_else(|| {
                    Error::Contract(format!("hard prompt {item} has no embedding"))
                })?;
                indices.push(row as u32);
                prompt_deg += g.item_degree(item as usize).max(1) as f64;
            }
            indices.extend((0..m_soft).map(|s| (n_hard + s) as u32));
            sources.resize(indices.len(), u as u32);
            offsets.push(indices.len());
            let real_deg: usize = g
                .user_adjacency()
                .row(u)
                .iter()
                .map(|&i| g.item_degree(i as usize))
                .sum();
            let total = real_deg as f64 + prompt_deg;
            lambda.push(if prompt_deg > 0.0 {
                prompt_deg / total
            } else {
                0.0
            });
        }
        Ok(PromptAdjacency {
            offsets: offsets.into(),
            indices: indices.into(),
            sources: sources.into(),
            lambda,
        })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn prompts_of(&self, user: usize) -> &[u32] {
        &self.indices[self.offsets[user]..self.offsets[user + 1]]
    }
}

/// Prompt keys and values for one layer, with the adjacency they attach through.
#[derive(Debug, Clone, Copy)]
pub struct LayerPrompts<'a> {
    pub keys: Var,
    pub values: Var,
    pub adjacency: &'a PromptAdjacency,
}

/// Prompt keys for every layer plus the shared prompt values. Prompt features
/// do not change across layers and `p_v` is shared, so one projection serves
/// every layer and every graph view on the same tape.
#[derive(Debug, Clone)]
pub struct PromptProjection {
    pub keys: Vec<Var>,
    pub values: Var,
}

impl PromptProjection {
    /// `features` holds hard prompt rows followed by soft prompt rows.
    pub fn new(tape: &mut GradTape, features: Var, p_v: Var, vars: &EncoderVars) -> Result<Self> {
        let keys = vars
            .layers
            .iter()
            .map(|w| project(tape, features, w[1]))
            .collect::<Result<Vec<_>>>()?;
        let values = project(tape, features, p_v)?;
        Ok(PromptProjection { keys, values })
    }

    pub fn layer<'a>(&self, layer: usize, adjacency: &'a PromptAdjacency) -> LayerPrompts<'a> {
        LayerPrompts {
            keys: self.keys[layer],
            values: self.values,
            adjacency,
        }
    }
}

/// Attention aggregate over CSR neighbourhoods: for each row `r` of `adj`,
/// `sum_e softmax_e(q[r] . k[idx_e]) * v[idx_e]`.
fn attend(
    tape: &mut GradTape,
    q: Var,
    k: Var,
    v: Var,
    offsets: &Arc<[usize]>,
    indices: &Arc<[u32]>,
    sources: &Arc<[u32]>,
) -> Result<Var> {
    let qe = tape.gather(q, sources.clone())?;
    let ke = tape.gather(k, indices.clone())?;
    let s = tape.row_dot(qe, ke)?;
    let a = tape.segment_softmax(s, offsets.clone())?;
    let ve = tape.gather(v, indices.clone())?;
    let m = tape.mul_col(ve, a)?;
    tape.segment_sum(m, offsets.clone())
}

fn attend_csr(tape: &mut GradTape, q: Var, k: Var, v: Var, adj: &Csr) -> Result<Var> {
    attend(tape, q, k, v, adj.offsets(), adj.indices(), adj.sources())
}

fn project(tape: &mut GradTape, h: Var, w: Var) -> Result<Var> {
    tape.matmul(h, w, false, true)
}

/// One propagation step on a tape, returning the next user and item features.
pub fn propagate_on_tape<G: GraphView + ?Sized>(
    tape: &mut GradTape,
    g: &G,
    hu: Var,
    hi: Var,
    w: &[Var; 4],
    prompts: Option<LayerPrompts<'_>>,
) -> Result<(Var, Var)> {
    let (nu, ni) = (tape.value(hu).rows(), tape.value(hi).rows());
    if nu != g.n_users() || ni != g.n_items() {
        return Err(Error::Shape(format!(
            "features for {nu} users / {ni} items, graph has {} / {}",
            g.n_users(),
            g.n_items()
        )));
    }
    let [wq, wk, wv, wu] = *w;
    let (qu, ku, vu, uu) = (
        project(tape, hu, wq)?,
        project(tape, hu, wk)?,
        project(tape, hu, wv)?,
        project(tape, hu, wu)?,
    );
    let (qi, ki, vi, ui) = (
        project(tape, hi, wq)?,
        project(tape, hi, wk)?,
        project(tape, hi, wv)?,
        project(tape, hi, wu)?,
    );
    let agg_u = attend_csr(tape, qu, ki, vi, g.user_adjacency())?;
    let agg_i = attend_csr(tape, qi, ku, vu, g.item_adjacency())?;
    let next_i = tape.add(ui, agg_i)?;
    let next_u = match prompts {
        Some(p) if !p.adjacency.indices.is_empty() => {
            let lam = &p.adjacency.lambda;
            let lam_col = tape.constant(Tensor::column(lam)?);
            let keep: Vec<f64> = lam.iter().map(|l| 1.0 - l).collect();
            let keep_col = tape.constant(Tensor::column(&keep)?);
            let adj = p.adjacency;
            let agg_p = attend(
                tape,
                qu,
                p.keys,
                p.values,
                &adj.offsets,
                &adj.indices,
                &adj.sources,
            )?;
            let real = tape.mul_col(agg_u, keep_col)?;
            let prompt = tape.mul_col(agg_p, lam_col)?;
            let mixed = tape.add(real, prompt)?;
            tape.add(uu, mixed)?
        }
        _ => tape.add(uu, agg_u)?,
    };
    Ok((next_u, next_i))
}

/// Runs every layer on a tape and returns all layer outputs plus the mean readout.
pub fn encode_on_tape<G: GraphView + ?Sized>(
    tape: &mut GradTape,
    g: &G,
    vars: &EncoderVars,
    prompts: Option<(&PromptProjection, &PromptAdjacency)>,
) -> Result<TapeReps> {
    let mut user_layers = vec![vars.user_embeddings];
    let mut item_layers = vec![vars.item_embeddings];
    let (mut hu, mut hi) = (vars.user_embeddings, vars.item_embeddings);
    for (l, w) in vars.layers.iter().enumerate() {
        let layer_prompts = prompts.map(|(p, adj)| p.layer(l, adj));
        (hu, hi) = propagate_on_tape(tape, g, hu, hi, w, layer_prompts)?;
        user_layers.push(hu);
        item_layers.push(hi);
    }
    let users = layer_mean(tape, &user_layers)?;
    let items = layer_mean(tape, &item_layers)?;
    Ok(TapeReps {
        user_layers,
        item_layers,
        users,
        items,
    })
}

fn layer_mean(tape: &mut GradTape, layers: &[Var]) -> Result<Var> {
    if layers.len() == 1 {
        return Ok(layers[0]);
    }
    let mut acc = layers[0];
    for &l in &layers[1..] {
        acc = tape.add(acc, l)?;
    }
    tape.scale(acc, 1.0 / layers.len() as f64)
}

/// Tape handles for the outputs of [`encode_on_tape`].
#[derive(Debug, Clone)]
pub struct TapeReps {
    pub user_layers: Vec<Var>,
    pub item_layers: Vec<Var>,
    pub users: Var,
    pub items: Var,
}

fn constant_vars(tape: &mut GradTape, params: &EncoderParams) -> EncoderVars {
    let mut frozen = params.clone();
    frozen.set_all_trainable(false);
    EncoderVars::bind(tape, &frozen)
}

fn bind_prompts<G: GraphView + ?Sized>(
    tape: &mut GradTape,
    g: &G,
    prompts: &PromptSet,
    vars: &EncoderVars,
) -> Result<(PromptProjection, PromptAdjacency)> {
    let features = tape.constant(prompts.features()?);
    let p_v = tape.constant(prompts.p_v.clone());
    Ok((
        PromptProjection::new(tape, features, p_v, vars)?,
        PromptAdjacency::new(prompts, g)?,
    ))
}

fn collect_reps(tape: &GradTape, r: &TapeReps) -> NodeReps {
    NodeReps {
        user_layers: r
            .user_layers
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
        item_layers: r
            .item_layers
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
        users: tape.value(r.users).clone(),
        items: tape.value(r.items).clone(),
    }
}

/// Encodes every node of `g`, without recording gradients.
pub fn encode<G: GraphView + ?Sized>(g: &G, params: &EncoderParams) -> Result<NodeReps> {
    encode_with_prompts(g, params, None)
}

/// [`encode`] with prompt-augmented user propagation when `prompts` is given.
pub fn encode_with_prompts<G: GraphView + ?Sized>(
    g: &G,
    params: &EncoderParams,
    prompts: Option<&PromptSet>,
) -> Result<NodeReps> {
    params.validate()?;
    let mut tape = GradTape::new();
    let vars = constant_vars(&mut tape, params);
    let binding = prompts
        .map(|p| bind_prompts(&mut tape, g, p, &vars))
        .transpose()?;
    let reps = encode_on_tape(&mut tape, g, &vars, binding.as_ref().map(|(p, a)| (p, a)))?;
    Ok(collect_reps(&tape, &reps))
}

/// One plain propagation step from the given features through layer `layer`.
pub fn propagate_layer<G: GraphView + ?Sized>(
    g: &G,
    users: &Tensor,
    items: &Tensor,
    params: &EncoderParams,
    layer: usize,
) -> Result<(Tensor, Tensor)> {
    propagate_inner(g, users, items, params, layer, None)
}

/// One prompt-augmented propagation step; items update as in [`propagate_layer`].
pub fn propagate_with_prompts<G: GraphView + ?Sized>(
    g: &G,
    users: &Tensor,
    items: &Tensor,
    prompts: &PromptSet,
    params: &EncoderParams,
    layer: usize,
) -> Result<(Tensor, Tensor)> {
    propagate_inner(g, users, items, params, layer, Some(prompts))
}

fn propagate_inner<G: GraphView + ?Sized>(
    g: &G,
    users: &Tensor,
    items: &Tensor,
    params: &EncoderParams,
    layer: usize,
    prompts: Option<&PromptSet>,
) -> Result<(Tensor, Tensor)> {
    let w = params
        .layers
        .get(layer)
        .ok_or_else(|| Error::Range(format!("layer {layer} of {}", params.n_layers())))?;
    let mut tape = GradTape::new();
    let hu = tape.constant(users.clone());
    let hi = tape.constant(items.clone());
    let wv = w.as_array().map(|t| tape.constant(t.clone()));
    let binding = match prompts {
        Some(p) => {
            let features = tape.constant(p.features()?);
            let p_v = tape.constant(p.p_v.clone());
            let keys = project(&mut tape, features, wv[1])?;
            let values = project(&mut tape, features, p_v)?;
            Some((keys, values, PromptAdjacency::new(p, g)?))
        }
        None => None,
    };
    let layer_prompts = binding
        .as_ref()
        .map(|(keys, values, adjacency)| LayerPrompts {
            keys: *keys,
            values: *values,
            adjacency,
        });
    let (u, i) = propagate_on_tape(&mut tape, g, hu, hi, &wv, layer_prompts)?;
    Ok((tape.value(u).clone(), tape.value(i).clone()))
}

fn matvec(w: &Tensor, h: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(h).map(|(a, b)| a * b).sum())
        .collect()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention of one node over `neighbors` (one per row): `softmax_j((W_Q h) . (W_K h_j))`.
///
/// Returns `None` for an empty neighbourhood, whose aggregate is zero.
pub fn attention_weights(
    h: &[f64],
    neighbors: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
) -> Result<Option<Vec<f64>>> {
    let d = h.len();
    if w_q.shape() != (d, d)
        || w_k.shape() != (d, d)
        || (neighbors.rows() > 0 && neighbors.cols() != d)
    {
        return Err(Error::Shape(format!(
            "attention over {:?} with feature width {d}",
            neighbors.shape()
        )));
    }
    if neighbors.rows() == 0 {
        return Ok(None);
    }
    let q = matvec(w_q, h);
    let mut s: Vec<f64> = (0..neighbors.rows())
        .map(|j| dotv(&q, &matvec(w_k, neighbors.row(j))))
        .collect();
    softmax_in_place(&mut s);
    Ok(Some(s))
}

/// Row-wise `softmax(Q K^T) V` with logits shifted by `shift`; also returns
/// each row's unnormalised mass.
fn attention_parts(q: &Tensor, k: &Tensor, v: &Tensor, shift: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut outs = Vec::with_capacity(q.rows());
    let mut masses = Vec::with_capacity(q.rows());
    for (r, &s) in shift.iter().enumerate().take(q.rows()) {
        let mut out = vec![0.0; v.cols()];
        let mut mass = 0.0;
        for j in 0..k.rows() {
            let e = (dotv(q.row(r), k.row(j)) - s).exp();
            mass += e;
            out.iter_mut().zip(v.row(j)).for_each(|(o, x)| *o += e * x);
        }
        if mass > 0.0 {
            out.iter_mut().for_each(|o| *o /= mass);
        }
        outs.push(out);
        masses.push(mass);
    }
    (outs, masses)
}

/// Evaluates attention over prefixed keys and values two ways and returns the
/// largest elementwise gap:
///
/// - directly, `softmax(Q [P_K; K]^T) [P_V; V]`;
/// - as `(1 - lambda) Attn(Q, K, V) + lambda Attn(Q, P_K, P_V)`, where
///   `lambda` is the softmax mass falling on the prefix rows.
pub fn prefix_attention_check(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p_k: &Tensor,
    p_v: &Tensor,
) -> Result<f64> {
    let dk = q.cols();
    let shapes_ok = k.rows() == v.rows()
        && p_k.rows() == p_v.rows()
        && (k.rows() == 0 || k.cols() == dk)
        && (p_k.rows() == 0 || p_k.cols() == dk)
        && (v.rows() == 0 || p_v.rows() == 0 || v.cols() == p_v.cols())
        && k.rows() + p_k.rows() > 0;
    if !shapes_ok {
        return Err(Error::Shape(format!(
            "prefix attention with Q {:?}, K {:?}, V {:?}, P_K {:?}, P_V {:?}",
            q.shape(),
            k.shape(),
            v.shape(),
            p_k.shape(),
            p_v.shape()
        )));
    }
    let keys = p_k.concat_rows(k)?;
    let values = p_v.concat_rows(v)?;
    let shift: Vec<f64> = (0..q.rows())
        .map(|r| {
            (0..keys.rows())
                .map(|j| dotv(q.row(r), keys.row(j)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let (joint, _) = attention_parts(q, &keys, &values, &shift);
    let (plain, plain_mass) = attention_parts(q, k, v, &shift);
    let (prefix, prefix_mass) = attention_parts(q, p_k, p_v, &shift);
    let mut residual = 0.0f64;
    for r in 0..q.rows() {
        let lambda = prefix_mass[r] / (prefix_mass[r] + plain_mass[r]);
        for (c, &direct) in joint[r].iter().enumerate() {
            let split = (1.0 - lambda) * plain[r].get(c).copied().unwrap_or(0.0)
                + lambda * prefix[r].get(c).copied().unwrap_or(0.0);
            residual = residual.max((direct - split).abs());
        }
    }
    Ok(residual)
}
