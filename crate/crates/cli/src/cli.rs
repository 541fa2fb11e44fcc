//! Argument parsing and verb dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{PipelineConfig, Preset, Seeds};
use crate::error::{CliError, Result};
use crate::pipeline::{results_table, run_ablation, run_pipeline, Grid, PipelineOptions, Stage};
use crate::stages::{self, Backbone, DetectInputs, Layout, TransitionInputs};

#[derive(Debug, Parser)]
#[command(name = "linevlp", version, about = "Transmission-line vision-language pretraining and defect detection")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file overlaid on the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// desk, full or smoke (default desk, or the file's `preset` key).
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    /// Dotted override, e.g. `--set pretrain.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output root (beats the env var and the config's `out_dir`).
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    /// Base seed for every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render instance images and detection scenes.
    Synth {
        /// Taxonomy JSON (default: built-in desk taxonomy).
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Output root for this run.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the alt-text pool and the image-text manifests.
    Curate,
    /// Pretrain the dual encoder with the configured objectives.
    Pretrain,
    /// Continue pretraining on the mix with multiscale context crops.
    Transition {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long = "n-sizes")]
        n_sizes: Option<usize>,
    },
    /// Train the detector on training scenes.
    TrainDet {
        /// Backbone checkpoint (default: transition, else pretrain).
        #[arg(long, conflicts_with = "random_backbone")]
        ckpt: Option<PathBuf>,
        /// Start from a randomly initialised backbone.
        #[arg(long)]
        random_backbone: bool,
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Write detections for every PNG in a directory.
    Predict {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
        /// Detections file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a detections file against annotated scenes.
    Eval {
        #[arg(long)]
        dets: Option<PathBuf>,
        #[arg(long)]
        gts: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage in order.
    Pipeline {
        /// Stages to leave out: pretrain, transition.
        #[arg(long, value_delimiter = ',')]
        skip: Vec<String>,
        /// Reuse artifacts of the stages before this one.
        #[arg(long)]
        from: Option<String>,
    },
    /// Run an ablation grid and write a results table.
    Ablate {
        /// toggles, sizes, stages or all.
        #[arg(long, default_value = "all")]
        grid: String,
        /// Comma-separated base seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Keep only cells whose id contains one of these strings.
        #[arg(long)]
        only: Vec<String>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn resolve(g: &GlobalArgs, extra_root: Option<&PathBuf>) -> Result<(PipelineConfig, Layout)> {
    let mut cfg = PipelineConfig::resolve(g.preset, g.config.as_deref(), &g.overrides)?;
    if let Some(s) = g.seed {
        cfg.seeds = Seeds::from_base(s);
    }
    let root = match extra_root.or(g.root.as_ref()) {
        Some(r) => r.clone(),
        None => cfg.out_root(),
    };
    cfg.out_dir = root.clone();
    Ok((cfg, Layout::new(root)))
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Synth { taxonomy, out } => {
            let (mut cfg, layout) = resolve(g, out.as_ref())?;
            if let Some(t) = taxonomy {
                if !t.is_file() {
                    return Err(CliError::Config(format!("taxonomy file {} does not exist", t.display())));
                }
                cfg.taxonomy = Some(t);
            }
            let rec = stages::synth(&cfg, &layout)?;
            println!("synth -> {} ({})", layout.synth().display(), rec.config_hash);
        }
        Command::Curate => {
            let (cfg, layout) = resolve(g, None)?;
            let rec = stages::curate(&cfg, &layout)?;
            println!("curate -> {} ({})", layout.curate().display(), rec.config_hash);
        }
        Command::Pretrain => {
            let (cfg, layout) = resolve(g, None)?;
            let rec = stages::pretrain(&cfg, &layout)?;
            println!("pretrain -> {} ({})", layout.pretrain_ckpt().display(), rec.config_hash);
            if let Some(s) = rec.info.get("signal") {
                println!("signal: {s}");
            }
        }
        Command::Transition { ckpt, scenes, n_sizes } => {
            let (cfg, layout) = resolve(g, None)?;
            let rec = stages::transition(&cfg, &layout, &TransitionInputs { ckpt, scenes, n_sizes })?;
            println!("transition -> {} ({})", layout.transition_ckpt().display(), rec.config_hash);
        }
        Command::TrainDet { ckpt, random_backbone, scenes } => {
            let (cfg, layout) = resolve(g, None)?;
            let backbone = match (random_backbone, ckpt) {
                (true, _) => Backbone::Random,
                (false, Some(p)) => Backbone::Checkpoint(p),
                (false, None) => Backbone::Latest,
            };
            let rec = stages::train_det(&cfg, &layout, &backbone, &DetectInputs { scenes })?;
            println!("train-det -> {} ({})", layout.detector_ckpt().display(), rec.config_hash);
        }
        Command::Predict { ckpt, images, out } => {
            let (cfg, layout) = resolve(g, None)?;
            let ckpt = ckpt.unwrap_or_else(|| layout.detector_ckpt());
            let images = images.unwrap_or_else(|| layout.test_scenes());
            let out = out.unwrap_or_else(|| layout.detections());
            let n = stages::predict(&cfg, &layout, &ckpt, &images, &out)?;
            println!("predict -> {} ({n} detections)", out.display());
        }
        Command::Eval { dets, gts, out } => {
            let (cfg, layout) = resolve(g, None)?;
            let dets = dets.unwrap_or_else(|| layout.detections());
            let gts = gts.unwrap_or_else(|| layout.test_scenes());
            let out = out.unwrap_or_else(|| layout.eval());
            let report = stages::eval(&cfg, &layout, &dets, &gts, &out)?;
            print!("{}", report.to_text());
        }
        Command::Pipeline { skip, from } => {
            let (cfg, layout) = resolve(g, None)?;
            let mut opts = PipelineOptions::default();
            for s in &skip {
                match s.as_str() {
                    "pretrain" => opts.skip_pretrain = true,
                    "transition" => opts.skip_transition = true,
                    other => return Err(CliError::Config(format!("cannot skip `{other}` (pretrain, transition)"))),
                }
            }
            opts.from = from.as_deref().map(str::parse::<Stage>).transpose()?;
            let out = run_pipeline(&cfg, &layout, &opts)?;
            print!("{}", out.report.to_text());
            if let Some(s) = out.signal {
                println!(
                    "retrieval top-1 {:.3} (chance {:.3}); probe {:.3} vs random {:.3}",
                    s.retrieval_top1, s.chance, s.probe_pretrained, s.probe_random
                );
            }
        }
        Command::Ablate { grid, seeds, only } => {
            let (cfg, layout) = resolve(g, None)?;
            let grid: Grid = grid.parse()?;
            let mut cells = grid.cells(cfg.transition.n_sizes);
            if !only.is_empty() {
                cells.retain(|(_, c)| only.iter().any(|o| c.id().contains(o.as_str())));
            }
            let rows = run_ablation(&cfg, &layout.root.join("ablate"), &cells, &seeds)?;
            print!("{}", results_table(&rows));
        }
        Command::ShowConfig => {
            let (cfg, _) = resolve(g, None)?;
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}
