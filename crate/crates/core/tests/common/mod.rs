//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use uplvp::encoders::{
    random_layout, synth_scene, synth_text_bank, FixtureConfig, FpnProjection, LayoutItem, Scene,
    TextBank,
};
use uplvp::eval::{box_iou, Detection};
use uplvp::head::{forward_on, inject_on, FeatureVars, HeadConfig, Model};
use uplvp::losses::{total_loss_on, Assignment, LossConfig, Targets};
use uplvp::prompts::PromptSet;
use uplvp::{BBox, Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        (z * std) as f32
    })
}

// ---------------------------------------------------------------------------
// assignment

/// Minimum total over every injective map from the smaller side, by
/// enumerating permutations.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(cost: &[f64], rows: usize, cols: usize, i: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if i == rows.min(cols) {
            *best = best.min(acc);
            return;
        }
        for j in 0..rows.max(cols) {
            if used[j] {
                continue;
            }
            used[j] = true;
            let c = if rows <= cols { cost[i * cols + j] } else { cost[j * cols + i] };
            go(cost, rows, cols, i + 1, used, acc + c, best);
            used[j] = false;
        }
    }
    let mut best = f64::INFINITY;
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    go(cost, rows, cols, 0, &mut vec![false; rows.max(cols)], 0.0, &mut best);
    best
}

// ---------------------------------------------------------------------------
// average precision

/// Greedy score-ordered matching followed by interpolated precision
/// summed at every recall step `1/n_gt`.
pub fn brute_force_ap(dets: &[Detection], gts: &[BBox], thr: f64) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut points = Vec::new();
    let mut tp = 0;
    for (rank, &d) in order.iter().enumerate() {
        let mut pick = None;
        let mut best = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            let iou = box_iou(&dets[d].bbox, gt);
            if !used[g] && iou >= thr && iou > best {
                best = iou;
                pick = Some(g);
            }
        }
        if let Some(g) = pick {
            used[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / (rank + 1) as f64, tp as f64 / gts.len() as f64));
    }
    let mut ap = 0.0;
    for i in 1..=gts.len() {
        let level = i as f64 / gts.len() as f64;
        let p = points
            .iter()
            .filter(|(_, r)| *r >= level - 1e-12)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
        ap += p / gts.len() as f64;
    }
    ap
}

// ---------------------------------------------------------------------------
// scenes

pub struct NoiseFree {
    pub bank: TextBank,
    pub projection: FpnProjection,
    pub cfg: FixtureConfig,
}

impl NoiseFree {
    pub fn new(seed: u64) -> Self {
        let cfg = FixtureConfig {
            noise_sigma: 0.0,
            seed,
            ..FixtureConfig::default()
        };
        Self {
            bank: synth_text_bank(cfg.classes, cfg.text_dim, seed).unwrap(),
            projection: FpnProjection::seeded(cfg.text_dim, cfg.fpn_dim, cfg.fpn_gain, seed ^ 7),
            cfg,
        }
    }

    pub fn layout(&self, rng: &mut ChaCha8Rng) -> Vec<LayoutItem> {
        random_layout(rng, &self.cfg)
    }

    pub fn scene(&self, layout: &[LayoutItem]) -> Scene {
        synth_scene("s", &self.bank, &self.projection, self.cfg.height, self.cfg.width, layout, 0.0, 1)
            .unwrap()
    }
}

// ---------------------------------------------------------------------------
// gradient checking

/// One small random training instance for end-to-end gradient checks.
pub struct Instance {
    pub model: Model,
    pub f: Tensor,
    pub xt: Tensor,
    pub prompts: Option<(PromptSet, Vec<usize>)>,
    pub targets: Targets,
    pub loss: LossConfig,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n = r.random_range(2..=4);
    let stages = r.random_range(1..=2);
    let (width, text_dim, classes, h, w) = (4, 3, 2, 4, 4);
    let cfg = HeadConfig {
        kernels: n,
        width,
        text_dim,
        classes,
        stages,
        kernel_init_std: 0.5,
    };
    let mut model = Model::init(&cfg, seed).unwrap();
    for p in model.params_mut() {
        let noise = gaussian(&mut r, p.shape(), 0.3);
        *p = p.add(&noise).unwrap();
    }
    let f = gaussian(&mut r, &[width, h, w], 1.0);
    let xt = gaussian(&mut r, &[text_dim, classes], 1.0);
    let l = r.random_range(1..=3);
    let masks = (0..l)
        .map(|_| (0..h * w).map(|_| r.random_bool(0.4) as u8 as f64).collect())
        .collect();
    let labels = (0..l).map(|_| r.random_range(0..classes)).collect();
    let prompts = r.random_bool(0.5).then(|| {
        let vectors = gaussian(&mut r, &[2, width], 0.5);
        let chosen = (0..n).map(|_| r.random_range(0..2)).collect();
        (PromptSet { vectors, source: vec![0, 1] }, chosen)
    });
    Instance {
        model,
        f,
        xt,
        prompts,
        targets: Targets { masks, labels },
        loss: LossConfig::default(),
    }
}

/// Total loss of `model` on the instance, with optional frozen
/// assignments; returns the gradients of every parameter in
/// `named_params` order when asked.
pub fn instance_loss(
    inst: &Instance,
    model: &Model,
    frozen: Option<&[Assignment]>,
    grads: bool,
) -> (f64, Vec<Assignment>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let feats = FeatureVars::bind(&mut tape, &inst.f).unwrap();
    let vars = model.bind(&mut tape);
    let injected = inst.prompts.as_ref().map(|(p, c)| (p, c.as_slice()));
    let k0 = inject_on(&mut tape, vars.kernels, injected).unwrap();
    let stages = forward_on(&mut tape, &vars, k0, &feats).unwrap();
    let xt = tape.constant(&inst.xt);
    let (total, _, assign) =
        total_loss_on(&mut tape, &stages, &inst.targets, xt, vars.aux_proj, &inst.loss, frozen).unwrap();
    let value = tape.scalar(total);
    let g = if grads {
        let g = tape.backward(total).unwrap();
        vars.all.iter().map(|&v| g.get_f64(v).unwrap().to_vec()).collect()
    } else {
        Vec::new()
    };
    (value, assign, g)
}

pub struct GradCheck {
    pub worst_rel: f64,
    pub worst_name: String,
    pub checked: usize,
}

/// Relative error with a small absolute floor so that gradients that are
/// zero up to rounding do not divide by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences on every parameter entry against the analytic
/// gradient, assignments held fixed.
pub fn check_instance(inst: &Instance, h: f32) -> GradCheck {
    let (_, assign, analytic) = instance_loss(inst, &inst.model, None, true);
    let names: Vec<String> = inst.model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut out = GradCheck {
        worst_rel: 0.0,
        worst_name: String::new(),
        checked: 0,
    };
    for (pi, name) in names.iter().enumerate() {
        for e in 0..analytic[pi].len() {
            let mut plus = inst.model.clone();
            let mut minus = inst.model.clone();
            let base = inst.model.named_params()[pi].1.data()[e];
            let (hi, lo) = (base + h, base - h);
            set_entry(&mut plus, pi, e, hi);
            set_entry(&mut minus, pi, e, lo);
            let lp = instance_loss(inst, &plus, Some(&assign), false).0;
            let lm = instance_loss(inst, &minus, Some(&assign), false).0;
            let fd = (lp - lm) / (hi as f64 - lo as f64);
            let an = analytic[pi][e];
            let rel = rel_err(an, fd);
            out.checked += 1;
            if rel > out.worst_rel {
                out.worst_rel = rel;
                out.worst_name = format!("{name}[{e}] analytic {an:.6e} numeric {fd:.6e}");
            }
        }
    }
    out
}

fn set_entry(model: &mut Model, param: usize, entry: usize, value: f32) {
    let t = &mut *model.params_mut()[param];
    let mut data = t.data().to_vec();
    data[entry] = value;
    *t = Tensor::new(t.shape().to_vec(), data).unwrap();
}
