use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crowdmesh::decoder::DecoderWeights;
use crowdmesh::interaction::SceneSpec;
use crowdmesh::pipeline::{
    ablation, evaluate, export_obj, gen_scenes, run_forward_all, selftest, Fault, RunConfig, ScenePrediction,
};
use crowdmesh::Error;

#[derive(Parser)]
#[command(name = "crowdmesh", version, about = "Interaction-aware multi-person mesh decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (directory for export-obj); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Inputs {
    /// Scenes from `gen`; generated from the configuration when omitted.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Checkpoint from `init-weights`; initialized from the seed when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    MaskBit,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of scenes; defaults to the configured scene_count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Write a freshly initialized decoder checkpoint.
    InitWeights {
        #[command(flatten)]
        common: Common,
    },
    /// Run the decoder on every scene.
    Forward {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Evaluate predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Predictions from `forward`; computed when omitted.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run the oracle suites.
    Selftest {
        #[command(flatten)]
        common: Common,
        /// Inject a defect to check that the suites catch it.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
    },
    /// Write one OBJ mesh per detected person.
    ExportObj {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Compare interaction ablations on the same scenes and weights.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> crowdmesh::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit(out: &Option<PathBuf>, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn scenes(cfg: &RunConfig, path: &Option<PathBuf>) -> anyhow::Result<Vec<SceneSpec>> {
    match path {
        Some(p) => {
            let s: Vec<SceneSpec> = read_json(p)?;
            for scene in &s {
                scene.validate()?;
            }
            Ok(s)
        }
        None => Ok(gen_scenes(cfg, cfg.scene_count)?),
    }
}

fn weights(cfg: &RunConfig, path: &Option<PathBuf>) -> anyhow::Result<DecoderWeights> {
    Ok(match path {
        Some(p) => DecoderWeights::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => cfg.init_weights()?,
    })
}

fn predictions(
    cfg: &RunConfig,
    inputs: &Inputs,
    path: &Option<PathBuf>,
    scenes: &[SceneSpec],
    model: &crowdmesh::body_model::BodyModelSpec,
) -> anyhow::Result<Vec<ScenePrediction>> {
    match path {
        Some(p) => read_json(p),
        None => Ok(run_forward_all(scenes, &weights(cfg, &inputs.weights)?, model, cfg)?),
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Gen { common, count } => {
            let cfg = load_config(&common)?;
            emit(&common.out, &gen_scenes(&cfg, count.unwrap_or(cfg.scene_count))?)?;
        }
        Command::InitWeights { common } => {
            let cfg = load_config(&common)?;
            let w = cfg.init_weights()?;
            let text = w.to_json_string()?;
            match &common.out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
        }
        Command::Forward { common, inputs } => {
            let cfg = load_config(&common)?;
            let model = cfg.body_model()?;
            let s = scenes(&cfg, &inputs.scenes)?;
            emit(&common.out, &run_forward_all(&s, &weights(&cfg, &inputs.weights)?, &model, &cfg)?)?;
        }
        Command::Eval { common, inputs, predictions: pred_path } => {
            let cfg = load_config(&common)?;
            let model = cfg.body_model()?;
            let s = scenes(&cfg, &inputs.scenes)?;
            let p = predictions(&cfg, &inputs, &pred_path, &s, &model)?;
            emit(&common.out, &evaluate(&s, &p, &model, &cfg)?)?;
        }
        Command::Selftest { common, fault } => {
            let cfg = load_config(&common)?;
            let report = selftest(cfg.seed, fault.map(|FaultArg::MaskBit| Fault::MaskBit));
            eprint!("{}", report.table());
            emit(&common.out, &report)?;
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::ExportObj { common, inputs, predictions: pred_path } => {
            let cfg = load_config(&common)?;
            let dir = common.out.clone().context("export-obj needs --out <directory>")?;
            let model = cfg.body_model()?;
            let s = scenes(&cfg, &inputs.scenes)?;
            let p = predictions(&cfg, &inputs, &pred_path, &s, &model)?;
            let written = export_obj(&dir, &p, &model)?;
            emit(&None, &written)?;
        }
        Command::Ablate { common, scenes: scene_path } => {
            let cfg = load_config(&common)?;
            let s = scenes(&cfg, &scene_path)?;
            emit(&common.out, &ablation(&cfg, &s)?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = matches!(
                e.downcast_ref::<Error>(),
                Some(Error::Internal(_) | Error::DegenerateRow { .. } | Error::Alignment(_))
            );
            ExitCode::from(if internal { 1 } else { 2 })
        }
    }
}
