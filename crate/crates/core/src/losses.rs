//! Ranking, contrastive and regularisation losses.
//!
//! Each loss has a scalar form for single examples and a tape form that
//! works on whole batches and supports gradients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{GradTape, Tensor, Var};

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} has a non-finite entry")))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-ln sigmoid(e_u . (e_i - e_j))`.
pub fn bpr_loss(e_u: &[f64], e_i: &[f64], e_j: &[f64]) -> Result<f64> {
    if e_u.len() != e_i.len() || e_u.len() != e_j.len() {
        return Err(Error::Shape(format!(
            "bpr over vectors of length {}, {}, {}",
            e_u.len(),
            e_i.len(),
            e_j.len()
        )));
    }
    for (v, what) in [(e_u, "user"), (e_i, "positive"), (e_j, "negative")] {
        check_finite(v, what)?;
    }
    let margin = dot(e_u, e_i) - dot(e_u, e_j);
    Ok(softplus(-margin))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature {tau} must be positive")))
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Logits of one InfoNCE term: the positive first, then each negative, all divided by `tau`.
pub fn infonce_logits(
    anchor: &[f64],
    positive: &[f64],
    negatives: &Tensor,
    tau: f64,
) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let d = anchor.len();
    if positive.len() != d || (negatives.rows() > 0 && negatives.cols() != d) {
        return Err(Error::Shape("infonce vectors disagree in width".into()));
    }
    check_finite(anchor, "anchor")?;
    check_finite(positive, "positive")?;
    let mut logits = vec![dot(anchor, positive) / tau];
    logits.extend((0..negatives.rows()).map(|r| dot(anchor, negatives.row(r)) / tau));
    Ok(logits)
}

/// `-ln(exp(a.p/tau) / (exp(a.p/tau) + sum_n exp(a.n/tau)))`.
pub fn infonce(anchor: &[f64], positive: &[f64], negatives: &Tensor, tau: f64) -> Result<f64> {
    if negatives.rows() == 0 {
        return Err(Error::Contract(
            "infonce needs at least one negative".into(),
        ));
    }
    let logits = infonce_logits(anchor, positive, negatives, tau)?;
    Ok(log_sum_exp(&logits) - logits[0])
}

/// Mean BPR loss over a batch of rows on the tape.
pub fn bpr_on_tape(tape: &mut GradTape, users: Var, pos: Var, neg: Var) -> Result<Var> {
    let n = tape.value(users).rows();
    if n == 0 {
        return Err(Error::Contract("empty BPR batch".into()));
    }
    let diff = tape.sub(pos, neg)?;
    let margin = tape.row_dot(users, diff)?;
    let sig = tape.sigmoid(margin)?;
    let log = tape.log(sig)?;
    let total = tape.sum(log)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Mean in-batch InfoNCE: row `q` of `a` is the anchor, row `q` of `b` its
/// positive, and every other row of `b` a negative.
pub fn infonce_on_tape(tape: &mut GradTape, a: Var, b: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = tape.value(a).rows();
    if n < 2 || tape.value(b).rows() != n {
        return Err(Error::Contract(format!(
            "in-batch contrast needs two matching views of at least 2 rows, got {n} and {}",
            tape.value(b).rows()
        )));
    }
    let sim = tape.matmul(a, b, false, true)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    // Shift each row by its max, held constant, before exponentiating.
    let lv = tape.value(logits);
    let maxes: Vec<f64> = (0..n)
        .map(|r| lv.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let neg_shift: Vec<f64> = maxes
        .iter()
        .flat_map(|&m| std::iter::repeat_n(-m, n))
        .collect();
    let neg_shift = tape.constant(Tensor::from_vec(n, n, neg_shift)?);
    let shifted = tape.add(logits, neg_shift)?;
    let e = tape.exp(shifted)?;
    let z = tape.sum_rows(e)?;
    let log_z = tape.log(z)?;
    let max_col = tape.constant(Tensor::column(&maxes)?);
    let lse = tape.add(log_z, max_col)?;
    let pos = tape.row_dot(a, b)?;
    let pos = tape.scale(pos, 1.0 / tau)?;
    let per_row = tape.sub(lse, pos)?;
    let total = tape.sum(per_row)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Contrastive loss between two encoded views for the in-batch users and
/// items. Each side is the mean InfoNCE over its in-batch nodes.
pub fn contrastive_on_tape(
    tape: &mut GradTape,
    views: [(Var, Var); 2],
    users: &Arc<[u32]>,
    items: &Arc<[u32]>,
    tau: f64,
) -> Result<(Var, Var)> {
    let [(ua, ia), (ub, ib)] = views;
    let side = |tape: &mut GradTape, a: Var, b: Var, ids: &Arc<[u32]>| -> Result<Var> {
        let ga = tape.gather(a, ids.clone())?;
        let gb = tape.gather(b, ids.clone())?;
        infonce_on_tape(tape, ga, gb, tau)
    };
    let cl_user = side(tape, ua, ub, users)?;
    let cl_item = side(tape, ia, ib, items)?;
    Ok((cl_user, cl_item))
}

/// Scalar contrastive loss for two views given as `(users, items)` tables.
pub fn contrastive_loss(
    view_a: (&Tensor, &Tensor),
    view_b: (&Tensor, &Tensor),
    users: &[u32],
    items: &[u32],
    tau: f64,
) -> Result<(f64, f64)> {
    let mut tape = GradTape::new();
    let ua = tape.constant(view_a.0.clone());
    let ia = tape.constant(view_a.1.clone());
    let ub = tape.constant(view_b.0.clone());
    let ib = tape.constant(view_b.1.clone());
    let (cu, ci) = contrastive_on_tape(
        &mut tape,
        [(ua, ia), (ub, ib)],
        &Arc::from(users),
        &Arc::from(items),
        tau,
    )?;
    Ok((scalar(&tape, cu), scalar(&tape, ci)))
}

fn scalar(tape: &GradTape, v: Var) -> f64 {
    tape.value(v).as_slice()[0]
}

/// Sum of squared entries of `params`.
pub fn l2_on_tape(tape: &mut GradTape, params: &[Var]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::filled(1, 1, 0.0));
    for &p in params {
        let sq = tape.row_dot(p, p)?;
        let s = tape.sum(sq)?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Values of the joint objective's components.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cl_user: f64,
    pub cl_item: f64,
    pub l2: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Tape handles for the joint objective's components.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub rec: Var,
    pub cl_user: Var,
    pub cl_item: Var,
    pub l2: Var,
    pub total: Var,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &GradTape) -> LossBreakdown {
        LossBreakdown {
            rec: scalar(tape, self.rec),
            cl_user: scalar(tape, self.cl_user),
            cl_item: scalar(tape, self.cl_item),
            l2: scalar(tape, self.l2),
            total: scalar(tape, self.total),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }
}

fn check_weights(lambda1: f64, lambda2: f64) -> Result<()> {
    if lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1.is_finite() && lambda2.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "loss weights {lambda1}, {lambda2} must be non-negative"
        )))
    }
}

/// `total = rec + lambda1 (cl_user + cl_item) + lambda2 l2` on the tape.
pub fn joint_on_tape(
    tape: &mut GradTape,
    rec: Var,
    cl: (Var, Var),
    l2: Var,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossTerms> {
    check_weights(lambda1, lambda2)?;
    let cl_sum = tape.add(cl.0, cl.1)?;
    let cl_w = tape.scale(cl_sum, lambda1)?;
    let l2_w = tape.scale(l2, lambda2)?;
    let partial = tape.add(rec, cl_w)?;
    let total = tape.add(partial, l2_w)?;
    Ok(LossTerms {
        rec,
        cl_user: cl.0,
        cl_item: cl.1,
        l2,
        total,
        lambda1,
        lambda2,
    })
}

/// Scalar joint objective; `trainable` are the tensors the L2 term covers.
pub fn joint_loss(
    rec: f64,
    cl: (f64, f64),
    trainable: &[&Tensor],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    check_weights(lambda1, lambda2)?;
    let l2: f64 = trainable.iter().map(|t| t.squared_norm()).sum();
    Ok(LossBreakdown {
        rec,
        cl_user: cl.0,
        cl_item: cl.1,
        l2,
        total: rec + lambda1 * (cl.0 + cl.1) + lambda2 * l2,
        lambda1,
        lambda2,
    })
}
