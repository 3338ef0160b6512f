//! Kernel-update prediction head.
//!
//! Masks are 1×1 dynamic convolutions of kernels with the FPN features.
//! Each stage pools features under the current masks, blends them into the
//! kernels through a sigmoid gate and re-predicts masks and class logits:
//!
//! ```text
//! x  = Σ_p σ(m_np) f_p / (Σ_p σ(m_np) + 1e-6)
//! g  = σ(gate_out(gate_k(k) + gate_x(x)))
//! k' = g ⊙ update_x(x) + (1 - g) ⊙ update_k(k)
//! ```
//!
//! This is a reduced form of the K-Net update without kernel
//! self-attention or FFN.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{ten, Tape, Tensor, Var};
use crate::prompts::{gather_prompts, PromptSet};

/// Tag written into every report so runs record which update rule they used.
pub const HEAD_VARIANT: &str = "simplified-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// `N`
    pub kernels: usize,
    /// `D'`, the FPN channel count.
    pub width: usize,
    /// `D`, the text embedding width (for the auxiliary projection).
    pub text_dim: usize,
    /// `C`, not counting the no-object class.
    pub classes: usize,
    /// `S`
    pub stages: usize,
    pub kernel_init_std: f32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kernels: 8,
            width: 16,
            text_dim: 16,
            classes: 4,
            stages: 3,
            kernel_init_std: 0.01,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernels == 0 || self.width == 0 || self.classes == 0 || self.stages == 0 {
            return Err(Error::Config(format!(
                "head needs N, D', C and S all >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `y = x W (+ b)` with `W` stored `in×out` and `b` as `1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    fn zeros(inp: usize, out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros([inp, out]),
            bias: bias.then(|| Tensor::zeros([1, out])),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            weight: Tensor::eye(n),
            bias: Some(Tensor::zeros([1, n])),
        }
    }
}

/// Parameters of one kernel-update stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    /// φ₁, applied to the incoming kernels.
    pub gate_k: Tensor,
    /// φ₂, applied to the grouped features.
    pub gate_x: Tensor,
    /// ψ₁, produces the gate pre-activation.
    pub gate_out: Linear,
    /// ψ₃, transforms the grouped features.
    pub update_x: Linear,
    /// ψ₄, transforms the incoming kernels.
    pub update_k: Linear,
    /// `D'×(C+1)`; the last column is the no-object class.
    pub classifier: Linear,
}

impl StageParams {
    pub fn zeros(width: usize, classes: usize) -> Self {
        Self {
            gate_k: Tensor::zeros([width, width]),
            gate_x: Tensor::zeros([width, width]),
            gate_out: Linear::zeros(width, width, true),
            update_x: Linear::zeros(width, width, true),
            update_k: Linear::zeros(width, width, true),
            classifier: Linear::zeros(width, classes + 1, true),
        }
    }
}

/// Base kernels, per-stage parameters and the auxiliary projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: HeadConfig,
    /// `N×D'`
    pub kernels: Tensor,
    pub stages: Vec<StageParams>,
    /// `D'×D`, maps final kernels into text-embedding space.
    pub aux_proj: Tensor,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: [usize; 2], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    })
}

impl Model {
    /// Seeded initialisation: Gaussian kernels, random gate maps, identity
    /// update maps and a near-zero classifier.
    pub fn init(config: &HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, w, c) = (config.kernels, config.width, config.classes);
        let lin_std = 1.0 / (w as f64).sqrt();
        let kernels = gaussian(&mut rng, [n, w], config.kernel_init_std as f64);
        let stages = (0..config.stages)
            .map(|_| StageParams {
                gate_k: gaussian(&mut rng, [w, w], lin_std),
                gate_x: gaussian(&mut rng, [w, w], lin_std),
                gate_out: Linear {
                    weight: gaussian(&mut rng, [w, w], lin_std),
                    bias: Some(Tensor::zeros([1, w])),
                },
                update_x: Linear::identity(w),
                update_k: Linear::identity(w),
                classifier: Linear {
                    weight: gaussian(&mut rng, [w, c + 1], 0.01),
                    bias: Some(Tensor::zeros([1, c + 1])),
                },
            })
            .collect();
        let aux_proj = gaussian(&mut rng, [w, config.text_dim], lin_std);
        Ok(Self {
            config: config.clone(),
            kernels,
            stages,
            aux_proj,
        })
    }

    /// Every parameter zero.
    pub fn zeros(config: &HeadConfig) -> Self {
        Self {
            config: config.clone(),
            kernels: Tensor::zeros([config.kernels, config.width]),
            stages: (0..config.stages)
                .map(|_| StageParams::zeros(config.width, config.classes))
                .collect(),
            aux_proj: Tensor::zeros([config.width, config.text_dim]),
        }
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("kernels".to_string(), &self.kernels)];
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.gate_k"), &s.gate_k));
            out.push((format!("stage{i}.gate_x"), &s.gate_x));
            for (name, lin) in [
                ("gate_out", &s.gate_out),
                ("update_x", &s.update_x),
                ("update_k", &s.update_k),
                ("classifier", &s.classifier),
            ] {
                out.push((format!("stage{i}.{name}.weight"), &lin.weight));
                if let Some(b) = &lin.bias {
                    out.push((format!("stage{i}.{name}.bias"), b));
                }
            }
        }
        out.push(("aux_proj".to_string(), &self.aux_proj));
        out
    }

    /// Same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.kernels];
        for s in &mut self.stages {
            out.push(&mut s.gate_k);
            out.push(&mut s.gate_x);
            for lin in [
                &mut s.gate_out,
                &mut s.update_x,
                &mut s.update_k,
                &mut s.classifier,
            ] {
                out.push(&mut lin.weight);
                if let Some(b) = &mut lin.bias {
                    out.push(b);
                }
            }
        }
        out.push(&mut self.aux_proj);
        out
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let mut all = Vec::new();
        let mut p = |t: &Tensor| {
            let v = tape.param(t);
            all.push(v);
            v
        };
        let kernels = p(&self.kernels);
        let mut stages = Vec::new();
        for s in &self.stages {
            let gate_k = p(&s.gate_k);
            let gate_x = p(&s.gate_x);
            let mut lin = |l: &Linear| LinearVars {
                weight: p(&l.weight),
                bias: l.bias.as_ref().map(&mut p),
            };
            let gate_out = lin(&s.gate_out);
            let update_x = lin(&s.update_x);
            let update_k = lin(&s.update_k);
            let classifier = lin(&s.classifier);
            stages.push(StageVars {
                gate_k,
                gate_x,
                gate_out,
                update_x,
                update_k,
                classifier,
            });
        }
        let aux_proj = p(&self.aux_proj);
        ModelVars {
            kernels,
            stages,
            aux_proj,
            all,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct StageVars {
    pub gate_k: Var,
    pub gate_x: Var,
    pub gate_out: LinearVars,
    pub update_x: LinearVars,
    pub update_k: LinearVars,
    pub classifier: LinearVars,
}

/// Tape handles for a [`Model`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub kernels: Var,
    pub stages: Vec<StageVars>,
    pub aux_proj: Var,
    /// Same order as [`Model::named_params`].
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Stage handles bound to an existing tape (for straight-line use).
    pub fn stage(&self, i: usize) -> &StageVars {
        &self.stages[i]
    }
}

/// Tape nodes produced by one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageNodes {
    /// `N×D'`
    pub kernels: Var,
    /// `N×(H·W)`, pre-sigmoid
    pub mask_logits: Var,
    /// `N×(C+1)`
    pub class_logits: Var,
}

/// Values produced by one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    /// `N×D'`
    pub kernels: Tensor,
    /// `N×H×W`, pre-sigmoid
    pub mask_logits: Tensor,
    /// `N×(C+1)`
    pub class_logits: Tensor,
}

impl StageOutput {
    pub fn is_finite(&self) -> bool {
        self.kernels.is_finite() && self.mask_logits.is_finite() && self.class_logits.is_finite()
    }
}

/// FPN features placed on a tape in the two layouts the head needs.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    /// `D'×P`
    pub f: Var,
    /// `P×D'`
    pub f_t: Var,
    pub height: usize,
    pub width: usize,
}

impl FeatureVars {
    /// `f` is `D'×H×W`.
    pub fn bind(tape: &mut Tape, f: &Tensor) -> Result<Self> {
        if f.ndim() != 3 {
            return Err(dim_err("fpn features", f.shape(), &[]));
        }
        let (d, h, w) = (f.dim(0), f.dim(1), f.dim(2));
        let flat = f.reshape([d, h * w])?;
        let ft = flat.transpose()?;
        Ok(Self {
            f: tape.constant(&flat),
            f_t: tape.constant(&ft),
            height: h,
            width: w,
        })
    }
}

pub fn linear_on(tape: &mut Tape, x: Var, l: &LinearVars) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    match l.bias {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

pub fn predict_masks_on(tape: &mut Tape, k: Var, feats: &FeatureVars) -> Result<Var> {
    if tape.shape(k).len() != 2 || tape.shape(k)[1] != tape.shape(feats.f)[0] {
        return Err(dim_err("predict_masks", tape.shape(k), tape.shape(feats.f)));
    }
    tape.matmul(k, feats.f)
}

pub fn group_features_on(tape: &mut Tape, mask_logits: Var, feats: &FeatureVars) -> Result<Var> {
    let s = tape.sigmoid(mask_logits)?;
    let num = tape.matmul(s, feats.f_t)?;
    let den = tape.sum_rows(s)?;
    let den = tape.add_scalar(den, 1e-6)?;
    let inv = tape.pow(den, -1.0)?;
    tape.mul(num, inv)
}

pub fn update_stage_on(
    tape: &mut Tape,
    k: Var,
    mask_logits: Var,
    feats: &FeatureVars,
    p: &StageVars,
) -> Result<StageNodes> {
    let x = group_features_on(tape, mask_logits, feats)?;
    let gk = tape.matmul(k, p.gate_k)?;
    let gx = tape.matmul(x, p.gate_x)?;
    let pre = tape.add(gk, gx)?;
    let pre = linear_on(tape, pre, &p.gate_out)?;
    let g = tape.sigmoid(pre)?;
    let ux = linear_on(tape, x, &p.update_x)?;
    let uk = linear_on(tape, k, &p.update_k)?;
    let keep = tape.one_minus(g)?;
    let a = tape.mul(g, ux)?;
    let b = tape.mul(keep, uk)?;
    let kernels = tape.add(a, b)?;
    let mask_logits = predict_masks_on(tape, kernels, feats)?;
    let class_logits = linear_on(tape, kernels, &p.classifier)?;
    Ok(StageNodes {
        kernels,
        mask_logits,
        class_logits,
    })
}

/// Initial masks from `k0` followed by every stage in order.
pub fn forward_on(
    tape: &mut Tape,
    vars: &ModelVars,
    k0: Var,
    feats: &FeatureVars,
) -> Result<Vec<StageNodes>> {
    let mut k = k0;
    let mut m = predict_masks_on(tape, k0, feats)?;
    let mut out = Vec::with_capacity(vars.stages.len());
    for p in &vars.stages {
        let s = update_stage_on(tape, k, m, feats, p)?;
        k = s.kernels;
        m = s.mask_logits;
        out.push(s);
    }
    Ok(out)
}

/// Injects prompts into the bound base kernels. The prompt rows enter as
/// constants, so gradients reach only the base kernels.
pub fn inject_on(
    tape: &mut Tape,
    kernels: Var,
    prompts: Option<(&PromptSet, &[usize])>,
) -> Result<Var> {
    match prompts {
        Some((p, chosen)) if !p.is_empty() => {
            let gathered = gather_prompts(p, chosen)?;
            if gathered.shape() != tape.shape(kernels) {
                return Err(dim_err("inject", tape.shape(kernels), gathered.shape()));
            }
            let c = tape.constant(&gathered);
            tape.add(kernels, c)
        }
        _ => Ok(kernels),
    }
}

pub fn stage_output(tape: &Tape, s: &StageNodes, height: usize, width: usize) -> StageOutput {
    let n = tape.shape(s.mask_logits)[0];
    StageOutput {
        kernels: tape.value(s.kernels),
        mask_logits: tape
            .value(s.mask_logits)
            .reshape([n, height, width])
            .expect("mask logits are N×P"),
        class_logits: tape.value(s.class_logits),
    }
}

/// `logits[n, p] = <k_n, f[:, p]>`; `k` is `N×D'`, `f` is `D'×H×W`.
pub fn predict_masks(k: &Tensor, f: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let feats = FeatureVars::bind(&mut tape, f)?;
    let kv = tape.constant(k);
    let m = predict_masks_on(&mut tape, kv, &feats)?;
    tape.value(m).reshape([k.dim(0), feats.height, feats.width])
}

/// Sigmoid-weighted feature pooling per kernel; `mask_logits` is `N×H×W`.
pub fn group_features(mask_logits: &Tensor, f: &Tensor) -> Result<Tensor> {
    if mask_logits.ndim() != 3 || f.ndim() != 3 || mask_logits.shape()[1..] != f.shape()[1..] {
        return Err(dim_err("group_features", mask_logits.shape(), f.shape()));
    }
    let mut tape = Tape::new();
    let feats = FeatureVars::bind(&mut tape, f)?;
    let n = mask_logits.dim(0);
    let m = tape.constant(&mask_logits.reshape([n, feats.height * feats.width])?);
    let x = group_features_on(&mut tape, m, &feats)?;
    Ok(tape.value(x))
}

fn bind_stage(tape: &mut Tape, p: &StageParams) -> StageVars {
    let lin = |tape: &mut Tape, l: &Linear| LinearVars {
        weight: tape.constant(&l.weight),
        bias: l.bias.as_ref().map(|b| tape.constant(b)),
    };
    StageVars {
        gate_k: tape.constant(&p.gate_k),
        gate_x: tape.constant(&p.gate_x),
        gate_out: lin(tape, &p.gate_out),
        update_x: lin(tape, &p.update_x),
        update_k: lin(tape, &p.update_k),
        classifier: lin(tape, &p.classifier),
    }
}

/// One stage evaluated on values.
pub fn update_stage(
    k: &Tensor,
    mask_logits: &Tensor,
    f: &Tensor,
    params: &StageParams,
) -> Result<StageOutput> {
    if mask_logits.ndim() != 3 || mask_logits.dim(0) != k.dim(0) {
        return Err(dim_err("update_stage", k.shape(), mask_logits.shape()));
    }
    let mut tape = Tape::new();
    let feats = FeatureVars::bind(&mut tape, f)?;
    let kv = tape.constant(k);
    let n = k.dim(0);
    let m = tape.constant(&mask_logits.reshape([n, feats.height * feats.width])?);
    let p = bind_stage(&mut tape, params);
    let s = update_stage_on(&mut tape, kv, m, &feats, &p)?;
    Ok(stage_output(&tape, &s, feats.height, feats.width))
}

/// Full head evaluation: optional prompt injection, initial masks and all
/// stages.
pub fn forward(
    model: &Model,
    f: &Tensor,
    prompts: Option<(&PromptSet, &[usize])>,
) -> Result<Vec<StageOutput>> {
    let mut tape = Tape::new();
    let feats = FeatureVars::bind(&mut tape, f)?;
    let vars = model.bind(&mut tape);
    let k0 = inject_on(&mut tape, vars.kernels, prompts)?;
    let stages = forward_on(&mut tape, &vars, k0, &feats)?;
    Ok(stages
        .iter()
        .map(|s| stage_output(&tape, s, feats.height, feats.width))
        .collect())
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub name: String,
    pub offset: usize,
    pub length: usize,
    pub shape: Vec<usize>,
}

/// JSON index stored next to a checkpoint blob.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub head: String,
    pub config: HeadConfig,
    pub tensors: Vec<CheckpointEntry>,
    /// Free-form echo of the run configuration.
    pub run: serde_json::Value,
}

/// Encodes all parameters as concatenated `.ten` records.
pub fn encode_checkpoint(model: &Model, run: serde_json::Value) -> (Vec<u8>, CheckpointIndex) {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.named_params() {
        let bytes = ten::encode(t);
        tensors.push(CheckpointEntry {
            name,
            offset: blob.len(),
            length: bytes.len(),
            shape: t.shape().to_vec(),
        });
        blob.extend_from_slice(&bytes);
    }
    let index = CheckpointIndex {
        head: HEAD_VARIANT.to_string(),
        config: model.config.clone(),
        tensors,
        run,
    };
    (blob, index)
}

pub fn decode_checkpoint(blob: &[u8], index: &CheckpointIndex) -> Result<Model> {
    if index.head != HEAD_VARIANT {
        return Err(Error::Format(format!("checkpoint head `{}`", index.head)));
    }
    let mut model = Model::zeros(&index.config);
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != index.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config implies {}",
            index.tensors.len(),
            names.len()
        )));
    }
    for ((slot, name), e) in model.params_mut().into_iter().zip(&names).zip(&index.tensors) {
        if &e.name != name {
            return Err(Error::Format(format!("expected tensor `{name}`, found `{}`", e.name)));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| Error::Format(format!("tensor `{name}` runs past the blob")))?;
        let t = ten::decode(&blob[e.offset..end])?;
        if t.shape() != slot.shape() || t.shape() != e.shape.as_slice() {
            return Err(dim_err("checkpoint tensor", slot.shape(), t.shape()));
        }
        *slot = t;
    }
    Ok(model)
}

/// Writes `path` (blob) and `path` with a `.json` extension (index).
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, run: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let (blob, index) = encode_checkpoint(model, run);
    std::fs::write(path, blob)?;
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointIndex)> {
    let path = path.as_ref();
    let blob = std::fs::read(path)?;
    let index: CheckpointIndex =
        serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
    Ok((decode_checkpoint(&blob, &index)?, index))
}
