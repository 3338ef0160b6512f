//! `uplvp`: fixture synthesis, proposals, matching, pre-training,
//! evaluation and atlas export from one JSON config.

mod config;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use uplvp::encoders::{write_dataset, Dataset};
use uplvp::eval::{
    activation_atlas, diversity_report, gt_boxes, model_detections, proposal_detections,
    write_atlas, ApReport, Detection,
};
use uplvp::head::{load_checkpoint, Model};
use uplvp::pgm;
use uplvp::prompts::{extract_prompts, match_kernels, InjectionStrategy};
use uplvp::proposals::propose;
use uplvp::train::{compare_convergence, matcher_for, pretrain, write_run};
use uplvp::BBox;

use crate::config::{DetectionSource, RunConfig};

#[derive(Parser)]
#[command(name = "uplvp", version, about = "Prompt-injected kernel pre-training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the step count.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic fixture as manifests and tensors.
    Synth(Common),
    /// Pseudo-mask proposals per scene.
    Propose(Common),
    /// Prompt-to-kernel assignments per scene.
    Match(Common),
    /// Pre-train the head and write log, checkpoint and manifest.
    Pretrain(Common),
    /// Pre-train once per strategy and compare convergence.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list, e.g. `cosine,none`.
        #[arg(long)]
        strategies: Option<String>,
    },
    /// Class-agnostic box AP against ground-truth masks.
    EvalAp(Common),
    /// Mean kernel activation maps and their diversity.
    Atlas(Common),
}

struct Run {
    cfg: RunConfig,
    data: Dataset,
    out: PathBuf,
}

impl Run {
    fn setup(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.train.seed = seed;
        }
        if let Some(steps) = common.steps {
            cfg.train.steps = steps;
        }
        cfg.train.validate()?;
        let out = common
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        let data = cfg.dataset()?;
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join("resolved-config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
        std::fs::write(out.join("fixture-hash.txt"), data.content_hash() + "\n")?;
        Ok(Self { cfg, data, out })
    }

    /// Checkpoint from the config, or a freshly seeded head.
    fn model(&self) -> Result<Model> {
        match &self.cfg.checkpoint {
            Some(path) => {
                let (model, _) = load_checkpoint(path)?;
                let want = self.cfg.train.head_config(&self.data);
                if (model.config.width, model.config.classes, model.config.text_dim)
                    != (want.width, want.classes, want.text_dim)
                {
                    bail!("checkpoint {} does not fit the fixture dimensions", path.display());
                }
                Ok(model)
            }
            None => Ok(Model::init(&self.cfg.train.head_config(&self.data), self.cfg.train.seed)?),
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn synth(run: &Run) -> Result<()> {
    let manifests = write_dataset(run.out.join("fixture"), &run.data)?;
    let mut list = String::new();
    for m in manifests {
        writeln!(list, "{}", m.strip_prefix(&run.out).unwrap_or(&m).display())?;
    }
    run.write("manifests.txt", &list)
}

fn propose_cmd(run: &Run) -> Result<()> {
    let masks = run.out.join("masks");
    std::fs::create_dir_all(&masks)?;
    let mut csv = String::from("scene,index,class_id,class_name,score,area,row_min,col_min,row_max,col_max,mask\n");
    for scene in &run.data.scenes {
        let props = propose(scene, &run.data.bank, &run.cfg.train.proposals)?;
        for (i, p) in props.proposals.iter().enumerate() {
            let file = format!("{}_{i:03}.pgm", scene.id);
            pgm::write(masks.join(&file), scene.width(), scene.height(), &pgm::quantize(p.mask.data()))?;
            let b = p.bbox;
            writeln!(
                csv,
                "{},{i},{},{},{},{},{},{},{},{},masks/{file}",
                scene.id,
                p.class_id,
                run.data.bank.class_names[p.class_id],
                p.score,
                p.area(),
                b.row_min,
                b.col_min,
                b.row_max,
                b.col_max
            )?;
        }
    }
    run.write("proposals.csv", &csv)
}

fn match_cmd(run: &Run) -> Result<()> {
    let strategy = run.cfg.train.strategy;
    if strategy == InjectionStrategy::None {
        bail!("match needs a matching strategy, got `none`");
    }
    let model = run.model()?;
    let mut csv = String::from("scene,kernel,prompt,similarity,prompt_class\n");
    for (i, scene) in run.data.scenes.iter().enumerate() {
        let props = propose(scene, &run.data.bank, &run.cfg.train.proposals)?;
        let prompts = extract_prompts(&scene.fpn_features, &props)?;
        let matcher = matcher_for(strategy, run.cfg.train.seed, i).expect("not none");
        let Some(result) = match_kernels(&model.kernels, &prompts, matcher)? else {
            continue;
        };
        let l = prompts.len();
        for (k, &j) in result.chosen.iter().enumerate() {
            let class = props.proposals[prompts.source[j]].class_id;
            writeln!(csv, "{},{k},{j},{},{class}", scene.id, result.similarity.data()[k * l + j])?;
        }
    }
    run.write("match-report.csv", &csv)
}

fn pretrain_cmd(run: &Run) -> Result<()> {
    let outcome = pretrain(&run.data, &run.cfg.train)?;
    write_run(&run.out, &run.cfg.train, &outcome, run.data.scenes.len())?;
    Ok(())
}

fn compare_cmd(run: &Run, strategies: Option<&str>) -> Result<()> {
    let list: Vec<InjectionStrategy> = match strategies {
        Some(s) => s.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None if !run.cfg.strategies.is_empty() => run.cfg.strategies.clone(),
        None => vec![InjectionStrategy::Cosine, InjectionStrategy::None],
    };
    let report = compare_convergence(&run.data, &run.cfg.train, &list)?;
    run.write("curves.csv", &report.curves_csv())?;
    run.write("steps-to-threshold.csv", &report.threshold_csv())
}

fn eval_cmd(run: &Run) -> Result<()> {
    let mut dets: Vec<Vec<Detection>> = Vec::new();
    let mut gts: Vec<Vec<BBox>> = Vec::new();
    let source = match run.cfg.detections {
        DetectionSource::Proposals => "proposal mean in-mask channel score",
        DetectionSource::Model => "max non-background class probability",
    };
    let model = match run.cfg.detections {
        DetectionSource::Model => Some(run.model()?),
        DetectionSource::Proposals => None,
    };
    for scene in &run.data.scenes {
        gts.push(gt_boxes(scene)?);
        dets.push(match &model {
            Some(m) => model_detections(m, scene)?,
            None => proposal_detections(&propose(scene, &run.data.bank, &run.cfg.train.proposals)?),
        });
    }
    let images: Vec<(&[Detection], &[BBox])> =
        dets.iter().zip(&gts).map(|(d, g)| (d.as_slice(), g.as_slice())).collect();
    let report = ApReport::compute(&images, run.cfg.ap_mode, source);
    run.write("eval-report.csv", &report.to_csv())
}

fn atlas_cmd(run: &Run) -> Result<()> {
    let model = run.model()?;
    let atlas = activation_atlas(&model, &run.data.scenes)?;
    write_atlas(run.out.join("atlas"), &atlas)?;
    let report = diversity_report(&atlas)?;
    run.write("diversity.csv", &report.to_csv())
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Synth(c)
        | Command::Propose(c)
        | Command::Match(c)
        | Command::Pretrain(c)
        | Command::EvalAp(c)
        | Command::Atlas(c) => c,
        Command::Compare { common, .. } => common,
    };
    let run = Run::setup(common)?;
    match &cli.command {
        Command::Synth(_) => synth(&run),
        Command::Propose(_) => propose_cmd(&run),
        Command::Match(_) => match_cmd(&run),
        Command::Pretrain(_) => pretrain_cmd(&run),
        Command::Compare { strategies, .. } => compare_cmd(&run, strategies.as_deref()),
        Command::EvalAp(_) => eval_cmd(&run),
        Command::Atlas(_) => atlas_cmd(&run),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
