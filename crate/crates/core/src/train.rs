//! Toy pre-training loop with optional prompt injection.
//!
//! One scene per step, visited in a seeded order that repeats every cycle.
//! Proposals and prompts depend only on the fixture, so they are computed
//! once up front; matching runs every step because kernels move.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Dataset;
use crate::error::{dim_err, Error, Result};
use crate::head::{self, forward_on, inject_on, FeatureVars, HeadConfig, Model, HEAD_VARIANT};
use crate::losses::{total_loss_on, LossBreakdown, LossConfig, Targets};
use crate::numerics::{Tape, Tensor};
use crate::prompts::{extract_prompts, match_kernels, InjectionStrategy, Matcher, PromptSet};
use crate::proposals::{propose, ProposalConfig, ProposalSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// `N`
    pub kernels: usize,
    /// `S`
    pub stages: usize,
    pub kernel_init_std: f32,
    pub strategy: InjectionStrategy,
    pub loss: LossConfig,
    pub proposals: ProposalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            kernels: 8,
            stages: 3,
            kernel_init_std: 0.01,
            strategy: InjectionStrategy::Cosine,
            loss: LossConfig::default(),
            proposals: ProposalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        let rates = [
            ("learning_rate", self.learning_rate),
            ("eps", self.eps),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        self.loss.weights.validate()?;
        self.proposals.validate()
    }

    /// Head shape for a dataset.
    pub fn head_config(&self, data: &Dataset) -> HeadConfig {
        let first = &data.scenes[0];
        HeadConfig {
            kernels: self.kernels,
            width: first.fpn_dim(),
            text_dim: data.bank.dim(),
            classes: data.bank.classes(),
            stages: self.stages,
            kernel_init_std: self.kernel_init_std,
        }
    }
}

/// First and second moment estimates, one entry per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + eps) + wd·θ)`.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Contract(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(dim_err("optimizer_step", p.shape(), g.shape()));
        }
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.numel() || state.v[i].len() != p.numel() {
            return Err(dim_err("optimizer_step state", p.shape(), &[state.m[i].len()]));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let updated = p
            .data()
            .iter()
            .zip(g.data())
            .enumerate()
            .map(|(j, (&theta, &grad))| {
                let (theta, grad) = (theta as f64, grad as f64);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad * grad;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let step = m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta;
                (theta - cfg.learning_rate * step) as f32
            })
            .collect();
        **p = Tensor::new(p.shape().to_vec(), updated)?;
    }
    Ok(())
}

/// Fixture-derived inputs of one scene.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub proposals: ProposalSet,
    pub prompts: PromptSet,
    pub targets: Targets,
}

/// Proposals, prompts and loss targets for every scene.
pub fn prepare(data: &Dataset, cfg: &ProposalConfig) -> Result<Vec<PreparedScene>> {
    data.scenes
        .iter()
        .map(|s| {
            let proposals = propose(s, &data.bank, cfg)?;
            let prompts = extract_prompts(&s.fpn_features, &proposals)?;
            let targets = Targets::from_proposals(&proposals);
            Ok(PreparedScene {
                proposals,
                prompts,
                targets,
            })
        })
        .collect()
}

/// Matcher for a strategy at a given step, or `None` to skip injection.
/// The random matcher is reseeded from `(seed, step)`.
pub fn matcher_for(strategy: InjectionStrategy, seed: u64, step: usize) -> Option<Matcher> {
    match strategy {
        InjectionStrategy::Cosine => Some(Matcher::Cosine),
        InjectionStrategy::Sequential => Some(Matcher::Sequential),
        InjectionStrategy::Random => Some(Matcher::Random {
            seed: seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(step as u64),
        }),
        InjectionStrategy::None => None,
    }
}

/// Seeded scene visiting order; step `t` uses `order[t % len]`.
pub fn scene_order(scenes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scenes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Loss of `model` on one scene, with the chosen prompts injected.
/// When `grads` is set the gradients of every parameter are returned too,
/// in [`Model::named_params`] order.
pub fn scene_loss(
    model: &Model,
    data: &Dataset,
    scene: usize,
    prep: &PreparedScene,
    matcher: Option<Matcher>,
    loss: &LossConfig,
    grads: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor>>)> {
    let s = &data.scenes[scene];
    let chosen = match matcher {
        Some(m) => match_kernels(&model.kernels, &prep.prompts, m)?.map(|r| r.chosen),
        None => None,
    };
    let mut tape = Tape::new();
    let feats = FeatureVars::bind(&mut tape, &s.fpn_features)?;
    let vars = model.bind(&mut tape);
    let injected = chosen.as_deref().map(|c| (&prep.prompts, c));
    let k0 = inject_on(&mut tape, vars.kernels, injected)?;
    let stages = forward_on(&mut tape, &vars, k0, &feats)?;
    let xt = tape.constant(&data.bank.embeddings);
    let (total, breakdown, _) =
        total_loss_on(&mut tape, &stages, &prep.targets, xt, vars.aux_proj, loss, None)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Contract(format!("non-finite loss on scene {}", s.id)));
    }
    if !grads {
        return Ok((breakdown, None));
    }
    let g = tape.backward(total)?;
    let grads = vars
        .all
        .iter()
        .map(|&v| g.get(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
        .collect();
    Ok((breakdown, Some(grads)))
}

/// One row of train-log.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub scene: String,
    pub total: f64,
    pub cls: f64,
    pub dice: f64,
    pub ce: f64,
    pub aux: f64,
    pub matched: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: Model,
    pub model: Model,
    /// Loss measured before the update of each step.
    pub log: Vec<LogRow>,
    /// Trailing mean of the logged totals over one full scene cycle.
    pub smoothed: Vec<f64>,
    pub fixture_hash: String,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.smoothed.last().expect("at least one step")
    }
}

/// Trailing mean over `window` entries (fewer at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, &v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

fn check_dataset(data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if data.scenes.is_empty() {
        return Err(Error::Config("pretrain needs at least one scene".into()));
    }
    for s in &data.scenes {
        if s.text_dim() != data.bank.dim() {
            return Err(Error::Config(format!(
                "scene {} has text width {} but the bank has {}",
                s.id,
                s.text_dim(),
                data.bank.dim()
            )));
        }
    }
    cfg.head_config(data).validate()
}

/// Runs the pre-training loop.
pub fn pretrain(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(data, cfg)?;
    let prepared = prepare(data, &cfg.proposals)?;
    let mut model = Model::init(&cfg.head_config(data), cfg.seed)?;
    let initial = model.clone();
    let order = scene_order(data.scenes.len(), cfg.seed);
    let mut state = AdamState::new(&model.named_params().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let scene = order[step % order.len()];
        let matcher = matcher_for(cfg.strategy, cfg.seed, step);
        let (b, grads) = scene_loss(&model, data, scene, &prepared[scene], matcher, &cfg.loss, true)?;
        let grads = grads.expect("requested");
        optimizer_step(&mut model.params_mut(), &grads, &mut state, cfg)?;
        log.push(LogRow {
            step,
            scene: data.scenes[scene].id.clone(),
            total: b.total,
            cls: b.cls,
            dice: b.dice,
            ce: b.ce,
            aux: b.aux,
            matched: b.matched,
        });
    }
    let totals: Vec<f64> = log.iter().map(|r| r.total).collect();
    Ok(TrainOutcome {
        initial,
        model,
        smoothed: smooth(&totals, data.scenes.len()),
        log,
        fixture_hash: data.content_hash(),
    })
}

/// Mean loss over every scene, each visited once.
pub fn dataset_loss(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let prepared = prepare(data, &cfg.proposals)?;
    let mut total = 0.0;
    for (i, prep) in prepared.iter().enumerate() {
        let matcher = matcher_for(cfg.strategy, cfg.seed, i);
        total += scene_loss(model, data, i, prep, matcher, &cfg.loss, false)?.0.total;
    }
    Ok(total / prepared.len() as f64)
}

pub fn train_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,scene,total,cls,dice,ce,aux,matched\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step, r.scene, r.total, r.cls, r.dice, r.ce, r.aux, r.matched
        )
        .expect("write to string");
    }
    out
}

/// Echo of everything needed to reproduce a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub head_variant: String,
    pub supervision: String,
    pub config: TrainConfig,
    pub fixture_hash: String,
    pub scenes: usize,
    pub final_loss: f64,
}

impl RunManifest {
    pub fn new(cfg: &TrainConfig, outcome: &TrainOutcome, scenes: usize) -> Self {
        Self {
            head_variant: HEAD_VARIANT.to_string(),
            supervision: "every stage supervised, stage losses averaged".to_string(),
            config: cfg.clone(),
            fixture_hash: outcome.fixture_hash.clone(),
            scenes,
            final_loss: outcome.final_loss(),
        }
    }
}

/// Paths written by [`write_run`].
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub train_log: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
}

/// Writes train-log.csv, the checkpoint pair and run-manifest.json.
pub fn write_run(dir: impl AsRef<Path>, cfg: &TrainConfig, outcome: &TrainOutcome, scenes: usize) -> Result<RunFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = RunManifest::new(cfg, outcome, scenes);
    let files = RunFiles {
        train_log: dir.join("train-log.csv"),
        checkpoint: dir.join("checkpoint.ten"),
        manifest: dir.join("run-manifest.json"),
    };
    std::fs::write(&files.train_log, train_log_csv(&outcome.log))?;
    head::save_checkpoint(&files.checkpoint, &outcome.model, serde_json::to_value(&manifest)?)?;
    std::fs::write(&files.manifest, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(files)
}

/// Per-strategy curves and steps needed to reach the reference run's
/// final smoothed loss. Only steps with a full scene cycle in the
/// smoothing window count.
#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub strategies: Vec<InjectionStrategy>,
    pub runs: Vec<TrainOutcome>,
    pub reference: InjectionStrategy,
    pub threshold: f64,
    /// Steps taken until the smoothed loss first reached the threshold.
    pub steps_to_threshold: Vec<Option<usize>>,
}

impl ConvergenceReport {
    pub fn run(&self, s: InjectionStrategy) -> Option<&TrainOutcome> {
        self.strategies.iter().position(|&x| x == s).map(|i| &self.runs[i])
    }

    pub fn steps_for(&self, s: InjectionStrategy) -> Option<usize> {
        self.strategies
            .iter()
            .position(|&x| x == s)
            .and_then(|i| self.steps_to_threshold[i])
    }

    /// One row per (step, strategy).
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("step,strategy,total,smoothed\n");
        let steps = self.runs.first().map_or(0, |r| r.log.len());
        for step in 0..steps {
            for (s, run) in self.strategies.iter().zip(&self.runs) {
                writeln!(out, "{step},{s},{},{}", run.log[step].total, run.smoothed[step])
                    .expect("write to string");
            }
        }
        out
    }

    pub fn threshold_csv(&self) -> String {
        let mut out = format!(
            "# threshold = final smoothed loss of `{}` ({})\nstrategy,steps_to_threshold,final_smoothed\n",
            self.reference, self.threshold
        );
        for ((s, run), reached) in self.strategies.iter().zip(&self.runs).zip(&self.steps_to_threshold) {
            let reached = reached.map_or_else(|| "never".to_string(), |v| v.to_string());
            writeln!(out, "{s},{reached},{}", run.final_loss()).expect("write to string");
        }
        out
    }
}

/// First step count at which a smoothed `curve` is at or below
/// `threshold`, ignoring entries whose window is not yet full.
pub fn steps_to_reach(curve: &[f64], threshold: f64, window: usize) -> Option<usize> {
    let start = window.max(1) - 1;
    curve
        .iter()
        .enumerate()
        .skip(start)
        .find(|(_, &v)| v <= threshold)
        .map(|(i, _)| i + 1)
}

/// Trains once per strategy from the same seed. The threshold is the final
/// smoothed loss of the `none` run, or of the first strategy when `none`
/// is not included.
pub fn compare_convergence(
    data: &Dataset,
    cfg: &TrainConfig,
    strategies: &[InjectionStrategy],
) -> Result<ConvergenceReport> {
    if strategies.len() < 2 {
        return Err(Error::Config("compare needs at least two strategies".into()));
    }
    for (i, s) in strategies.iter().enumerate() {
        if strategies[..i].contains(s) {
            return Err(Error::Config(format!("strategy `{s}` listed twice")));
        }
    }
    let runs = std::thread::scope(|scope| {
        let handles: Vec<_> = strategies
            .iter()
            .map(|&strategy| {
                let cfg = TrainConfig {
                    strategy,
                    ..cfg.clone()
                };
                scope.spawn(move || pretrain(data, &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let reference = if strategies.contains(&InjectionStrategy::None) {
        InjectionStrategy::None
    } else {
        strategies[0]
    };
    let ref_idx = strategies.iter().position(|&s| s == reference).expect("present");
    let threshold = runs[ref_idx].final_loss();
    let window = data.scenes.len();
    let steps_to_threshold = runs
        .iter()
        .map(|r| steps_to_reach(&r.smoothed, threshold, window))
        .collect();
    Ok(ConvergenceReport {
        strategies: strategies.to_vec(),
        runs,
        reference,
        threshold,
        steps_to_threshold,
    })
}
