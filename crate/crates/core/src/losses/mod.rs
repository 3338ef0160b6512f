//! Hungarian matching and the composite pre-training loss.
//!
//! Per stage, kernels are matched one-to-one against pseudo-mask targets by
//! minimising the weighted sum of classification, dice and cross-entropy
//! costs. Matched kernels are supervised with all three terms, unmatched
//! kernels with classification against the no-object class. The final
//! stage additionally carries the auxiliary kernel-text classification
//! term. Stage losses are averaged.
//!
//! The assignment is a constant for differentiation.

mod hungarian;

pub use hungarian::{hungarian, hungarian_f64, Assignment};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::head::{StageNodes, StageOutput};
use crate::numerics::{Tape, Tensor, Var};
use crate::proposals::ProposalSet;

/// Smoothing constant of the dice ratio.
pub const DICE_EPS: f64 = 1e-3;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_dice: f64,
    pub lambda_ce: f64,
    pub lambda_aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_dice: 4.0,
            lambda_ce: 1.0,
            lambda_aux: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_dice, self.lambda_ce, self.lambda_aux];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// `-α (1 - p_t)^γ log p_t`, with `p_t = prob` for the target class and
/// `1 - prob` otherwise.
pub fn focal_loss(prob: f64, is_target: bool, fp: &FocalParams) -> f64 {
    let pt = if is_target { prob } else { 1.0 - prob };
    let pt = pt.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -fp.alpha * (1.0 - pt).powf(fp.gamma) * pt.ln()
}

fn dice_raw(pred: &[f64], gt: &[f64]) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS)
}

/// `1 - (2 Σ p g + ε) / (Σ p + Σ g + ε)` over probabilities `pred`.
pub fn dice_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(dim_err("dice_loss", pred.shape(), gt.shape()));
    }
    let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let g: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    Ok(dice_raw(&p, &g))
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn ce_raw(logits: &[f64], gt: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(gt)
        .map(|(&x, &g)| -(g * log_sigmoid(x) + (1.0 - g) * log_sigmoid(-x)))
        .sum();
    total / logits.len().max(1) as f64
}

/// Mean per-pixel binary cross-entropy of `σ(logits)` against `gt`.
pub fn ce_mask_loss(logits: &Tensor, gt: &Tensor) -> Result<f64> {
    if logits.shape() != gt.shape() {
        return Err(dim_err("ce_mask_loss", logits.shape(), gt.shape()));
    }
    let x: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let g: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    Ok(ce_raw(&x, &g))
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pseudo-mask supervision for one scene: flattened binary masks and
/// class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub masks: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Targets {
    pub fn from_proposals(props: &ProposalSet) -> Self {
        Self {
            masks: props
                .proposals
                .iter()
                .map(|p| p.mask.data().iter().map(|&v| v as f64).collect())
                .collect(),
            labels: props.proposals.iter().map(|p| p.class_id).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Cost of pairing every kernel with every target, reusing the loss terms
/// and weights.
fn cost_matrix_raw(
    class_logits: &[f64],
    mask_logits: &[f64],
    n: usize,
    targets: &Targets,
    w: &LossWeights,
    fp: &FocalParams,
) -> Vec<f64> {
    let l = targets.len();
    let c1 = class_logits.len() / n;
    let p = mask_logits.len() / n;
    let mut out = vec![0.0; n * l];
    for k in 0..n {
        let probs = softmax(&class_logits[k * c1..(k + 1) * c1]);
        let logits = &mask_logits[k * p..(k + 1) * p];
        let pred: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
        for (j, (mask, &label)) in targets.masks.iter().zip(&targets.labels).enumerate() {
            out[k * l + j] = w.lambda_cls * focal_loss(probs[label], true, fp)
                + w.lambda_dice * dice_raw(&pred, mask)
                + w.lambda_ce * ce_raw(logits, mask);
        }
    }
    out
}

/// `N×L` matching cost for one stage's outputs.
pub fn build_cost_matrix(
    stage: &StageOutput,
    targets: &ProposalSet,
    w: &LossWeights,
    fp: &FocalParams,
) -> Result<Tensor> {
    let n = stage.mask_logits.dim(0);
    let t = Targets::from_proposals(targets);
    let p = stage.mask_logits.numel() / n.max(1);
    if let Some(m) = t.masks.iter().find(|m| m.len() != p) {
        return Err(dim_err("build_cost_matrix", stage.mask_logits.shape(), &[m.len()]));
    }
    let cl: Vec<f64> = stage.class_logits.data().iter().map(|&v| v as f64).collect();
    let ml: Vec<f64> = stage.mask_logits.data().iter().map(|&v| v as f64).collect();
    let cost = cost_matrix_raw(&cl, &ml, n, &t, w, fp);
    Tensor::new([n, t.len()], cost.into_iter().map(|v| v as f32).collect())
}

/// Elementwise focal term `-α (1-p)^γ log p` of target-class probabilities.
pub fn focal_on(tape: &mut Tape, probs: Var, fp: &FocalParams) -> Result<Var> {
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let q = tape.one_minus(p)?;
    let mod_ = tape.pow(q, fp.gamma)?;
    let logp = tape.log(p)?;
    let prod = tape.mul(mod_, logp)?;
    tape.scale(prod, -fp.alpha)
}

/// Dice loss of a probability node against a constant mask.
pub fn dice_on(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let gt_sum: f64 = tape.value_f64(gt).iter().sum();
    let inter = tape.mul(pred, gt)?;
    let inter = tape.sum(inter)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_EPS)?;
    let den = tape.sum(pred)?;
    let den = tape.add_scalar(den, gt_sum + DICE_EPS)?;
    let inv = tape.pow(den, -1.0)?;
    let ratio = tape.mul(num, inv)?;
    tape.one_minus(ratio)
}

/// Mean binary cross-entropy of a logit node against a constant mask.
pub fn ce_on(tape: &mut Tape, logits: Var, gt: Var) -> Result<Var> {
    let pos = tape.log_sigmoid(logits)?;
    let neg_logits = tape.scale(logits, -1.0)?;
    let neg = tape.log_sigmoid(neg_logits)?;
    let inv_gt = tape.one_minus(gt)?;
    let a = tape.mul(pos, gt)?;
    let b = tape.mul(neg, inv_gt)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -1.0)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)?))
}

/// Per-term loss values. `cls`, `dice` and `ce` are averaged across
/// stages; `aux` is the final-stage auxiliary term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub dice: f64,
    pub ce: f64,
    pub aux: f64,
    /// Matched pairs in the final stage.
    pub matched: usize,
    /// Set when the auxiliary term had no matched pairs to average over.
    pub aux_empty: bool,
    pub weights: LossWeights,
}

/// Auxiliary classification of final kernels through the text bank:
/// `Q = (K proj) Xᵀ`, focal loss on `softmax(Q_n)[label_j]` averaged
/// over matched pairs. Returns `None` when nothing is matched.
pub fn aux_on(
    tape: &mut Tape,
    kernels: Var,
    proj: Var,
    xt: Var,
    assign: &Assignment,
    labels: &[usize],
    fp: &FocalParams,
) -> Result<Option<Var>> {
    if assign.pairs.is_empty() {
        return Ok(None);
    }
    let kp = tape.matmul(kernels, proj)?;
    let q = tape.matmul(kp, xt)?;
    let c = tape.shape(q)[1];
    let probs = tape.softmax(q)?;
    let n = tape.shape(q)[0];
    let flat = tape.reshape(probs, [n * c])?;
    let idx = assign
        .pairs
        .iter()
        .map(|&(k, j)| {
            let label = labels[j];
            if label >= c {
                Err(Error::Bounds(format!("label {label} with {c} text classes")))
            } else {
                Ok(k * c + label)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let picked = tape.gather(flat, idx)?;
    let f = focal_on(tape, picked, fp)?;
    Ok(Some(tape.mean(f)?))
}

/// Standalone auxiliary loss on values. The flag is true when the
/// assignment is empty (loss reported as 0).
pub fn aux_loss(
    kernels: &Tensor,
    xt: &Tensor,
    proj: &Tensor,
    assign: &Assignment,
    labels: &[usize],
    fp: &FocalParams,
) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let k = tape.constant(kernels);
    let p = tape.constant(proj);
    let x = tape.constant(xt);
    match aux_on(&mut tape, k, p, x, assign, labels, fp)? {
        Some(v) => Ok((tape.scalar(v), false)),
        None => {
            log::warn!("auxiliary loss has no matched pairs; reporting 0");
            Ok((0.0, true))
        }
    }
}

/// Settings shared by every loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalParams,
}

/// Records the full loss on `tape`. With `frozen` the given per-stage
/// assignments are reused instead of re-solving.
pub fn total_loss_on(
    tape: &mut Tape,
    stages: &[StageNodes],
    targets: &Targets,
    xt: Var,
    aux_proj: Var,
    cfg: &LossConfig,
    frozen: Option<&[Assignment]>,
) -> Result<(Var, LossBreakdown, Vec<Assignment>)> {
    if stages.is_empty() {
        return Err(Error::Contract("total loss needs at least one stage".into()));
    }
    if let Some(f) = frozen {
        if f.len() != stages.len() {
            return Err(Error::Contract(format!(
                "{} frozen assignments for {} stages",
                f.len(),
                stages.len()
            )));
        }
    }
    let (w, fp) = (&cfg.weights, &cfg.focal);
    let mut stage_losses = Vec::with_capacity(stages.len());
    let mut assignments = Vec::with_capacity(stages.len());
    let (mut cls_sum, mut dice_sum, mut ce_sum) = (0.0, 0.0, 0.0);
    let mut aux_value = 0.0;
    let mut aux_empty = false;
    let gt_vars: Vec<Var> = targets
        .masks
        .iter()
        .map(|m| tape.constant_f64([m.len()], m.clone()))
        .collect::<Result<_>>()?;

    for (si, s) in stages.iter().enumerate() {
        let shape = tape.shape(s.class_logits).to_vec();
        let (n, c1) = (shape[0], shape[1]);
        let no_object = c1 - 1;
        if let Some(&bad) = targets.labels.iter().find(|&&l| l >= no_object) {
            return Err(Error::Bounds(format!("label {bad} with {no_object} classes")));
        }
        let assign = match frozen {
            Some(f) => f[si].clone(),
            None if targets.is_empty() => Assignment::empty(n),
            None => {
                let cost = cost_matrix_raw(
                    tape.value_f64(s.class_logits),
                    tape.value_f64(s.mask_logits),
                    n,
                    targets,
                    w,
                    fp,
                );
                hungarian_f64(&cost, n, targets.len())?
            }
        };

        // classification over every kernel
        let target_of = assign.target_of(n);
        let probs = tape.softmax(s.class_logits)?;
        let flat = tape.reshape(probs, [n * c1])?;
        let idx = target_of
            .iter()
            .enumerate()
            .map(|(k, t)| k * c1 + t.map_or(no_object, |j| targets.labels[j]))
            .collect();
        let picked = tape.gather(flat, idx)?;
        let focal = focal_on(tape, picked, fp)?;
        let cls = tape.mean(focal)?;
        let mut stage = tape.scale(cls, w.lambda_cls)?;
        cls_sum += tape.scalar(cls);

        // masks over matched pairs
        let mut dice_terms = Vec::new();
        let mut ce_terms = Vec::new();
        for &(k, j) in &assign.pairs {
            let logits = tape.row(s.mask_logits, k)?;
            let pred = tape.sigmoid(logits)?;
            dice_terms.push(dice_on(tape, pred, gt_vars[j])?);
            ce_terms.push(ce_on(tape, logits, gt_vars[j])?);
        }
        for (terms, weight, sum) in [
            (&dice_terms, w.lambda_dice, &mut dice_sum),
            (&ce_terms, w.lambda_ce, &mut ce_sum),
        ] {
            if let Some(m) = mean_of(tape, terms)? {
                *sum += tape.scalar(m);
                let weighted = tape.scale(m, weight)?;
                stage = tape.add(stage, weighted)?;
            }
        }

        if si + 1 == stages.len() {
            match aux_on(tape, s.kernels, aux_proj, xt, &assign, &targets.labels, fp)? {
                Some(a) => {
                    aux_value = tape.scalar(a);
                    let weighted = tape.scale(a, w.lambda_aux)?;
                    stage = tape.add(stage, weighted)?;
                }
                None => aux_empty = true,
            }
        }
        stage_losses.push(stage);
        assignments.push(assign);
    }

    let total = mean_of(tape, &stage_losses)?.expect("at least one stage");
    let s = stages.len() as f64;
    let breakdown = LossBreakdown {
        total: tape.scalar(total),
        cls: cls_sum / s,
        dice: dice_sum / s,
        ce: ce_sum / s,
        aux: aux_value,
        matched: assignments.last().map_or(0, |a| a.pairs.len()),
        aux_empty,
        weights: w.clone(),
    };
    Ok((total, breakdown, assignments))
}

/// Loss of already computed stage outputs.
pub fn total_loss(
    stages: &[StageOutput],
    targets: &ProposalSet,
    xt: &Tensor,
    aux_proj: &Tensor,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let nodes = stages
        .iter()
        .map(|s| {
            let n = s.mask_logits.dim(0);
            let p = s.mask_logits.numel() / n.max(1);
            Ok(StageNodes {
                kernels: tape.constant(&s.kernels),
                mask_logits: tape.constant(&s.mask_logits.reshape([n, p])?),
                class_logits: tape.constant(&s.class_logits),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let x = tape.constant(xt);
    let proj = tape.constant(aux_proj);
    let targets = Targets::from_proposals(targets);
    let (_, breakdown, _) = total_loss_on(&mut tape, &nodes, &targets, x, proj, cfg, None)?;
    Ok(breakdown)
}
