//! Full pipeline runs and the ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use linevlp_core::metrics::APReport;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Seeds};
use crate::error::{CliError, Result};
use crate::stages::{self, Backbone, DetectInputs, Layout, Signal, TransitionInputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Curate,
    Pretrain,
    Transition,
    TrainDet,
    Predict,
    Eval,
}

impl std::str::FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "synth" => Stage::Synth,
            "curate" => Stage::Curate,
            "pretrain" => Stage::Pretrain,
            "transition" => Stage::Transition,
            "train-det" | "detect" => Stage::TrainDet,
            "predict" => Stage::Predict,
            "eval" => Stage::Eval,
            other => return Err(CliError::Config(format!("unknown stage `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub skip_pretrain: bool,
    pub skip_transition: bool,
    /// Stages before this one are assumed done (their artifacts are reused).
    pub from: Option<Stage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub report: APReport,
    pub signal: Option<Signal>,
    /// Wall-clock seconds per executed stage.
    pub seconds: BTreeMap<String, f64>,
}

/// synth → curate → pretrain → transition → train-det → predict → eval.
///
/// Skipping pretraining leaves the detector backbone random; skipping it while
/// keeping the transition stage fails on the missing checkpoint.
pub fn run_pipeline(cfg: &PipelineConfig, layout: &Layout, opts: &PipelineOptions) -> Result<PipelineOutcome> {
    let from = opts.from.unwrap_or(Stage::Synth);
    let mut seconds = BTreeMap::new();
    let mut timed = |name: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        let t = Instant::now();
        info!("stage {name}");
        f()?;
        seconds.insert(name.to_string(), t.elapsed().as_secs_f64());
        Ok(())
    };
    if from <= Stage::Synth {
        timed("synth", &mut || stages::synth(cfg, layout).map(drop))?;
    }
    if from <= Stage::Curate {
        timed("curate", &mut || stages::curate(cfg, layout).map(drop))?;
    }
    if from <= Stage::Pretrain && !opts.skip_pretrain {
        timed("pretrain", &mut || stages::pretrain(cfg, layout).map(drop))?;
    }
    if from <= Stage::Transition && !opts.skip_transition {
        timed("transition", &mut || stages::transition(cfg, layout, &TransitionInputs::default()).map(drop))?;
    }
    let backbone = match (opts.skip_pretrain, opts.skip_transition) {
        (true, true) => Backbone::Random,
        (false, true) => Backbone::Checkpoint(layout.pretrain_ckpt()),
        _ => Backbone::Checkpoint(layout.transition_ckpt()),
    };
    if from <= Stage::TrainDet {
        timed("train-det", &mut || stages::train_det(cfg, layout, &backbone, &DetectInputs::default()).map(drop))?;
    }
    if from <= Stage::Predict {
        timed("predict", &mut || {
            stages::predict(cfg, layout, &layout.detector_ckpt(), &layout.test_scenes(), &layout.detections()).map(drop)
        })?;
    }
    let mut report = None;
    timed("eval", &mut || {
        report = Some(stages::eval(cfg, layout, &layout.detections(), &layout.test_scenes(), &layout.eval())?);
        Ok(())
    })?;
    let signal = if opts.skip_pretrain {
        None
    } else {
        fs::read_to_string(layout.signal()).ok().and_then(|t| serde_json::from_str(&t).ok())
    };
    let outcome = PipelineOutcome { report: report.expect("eval ran"), signal, seconds };
    let path = layout.root.join("pipeline.json");
    fs::write(&path, serde_json::to_string_pretty(&outcome).expect("serializable")).map_err(CliError::io(&path))?;
    Ok(outcome)
}

// ---------------------------------------------------------------- ablation

/// One ablation configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub itc: bool,
    pub srj: bool,
    pub dnc: bool,
    /// Whether the transition stage runs.
    pub pts: bool,
    pub n_sizes: usize,
}

impl Cell {
    pub fn id(&self) -> String {
        let b = |x: bool| u8::from(x);
        format!("itc{}-srj{}-dnc{}-pts{}-n{}", b(self.itc), b(self.srj), b(self.dnc), b(self.pts), self.n_sizes)
    }

    /// No pretraining objective means a random backbone and no transition.
    pub fn pretrains(&self) -> bool {
        self.itc || self.srj || self.dnc
    }

    fn normalized(mut self) -> Self {
        if !self.pretrains() {
            self.pts = false;
        }
        if !self.pts {
            self.n_sizes = 0;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// Every on/off combination of the three objectives (8 rows).
    Toggles,
    /// Number of context-crop sizes 1..=5 with all objectives (5 rows).
    Sizes,
    /// Random backbone, pretraining only, pretraining plus transition.
    Stages,
    All,
}

impl std::str::FromStr for Grid {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toggles" => Ok(Grid::Toggles),
            "sizes" => Ok(Grid::Sizes),
            "stages" => Ok(Grid::Stages),
            "all" => Ok(Grid::All),
            other => Err(CliError::Config(format!("unknown grid `{other}` (toggles, sizes, stages, all)"))),
        }
    }
}

impl Grid {
    /// Rows in table order; `n_sizes` is the transition default.
    pub fn cells(self, n_sizes: usize) -> Vec<(String, Cell)> {
        let mut out = Vec::new();
        if matches!(self, Grid::Toggles | Grid::All) {
            for mask in 0..8u8 {
                let c = Cell { itc: mask & 4 != 0, srj: mask & 2 != 0, dnc: mask & 1 != 0, pts: true, n_sizes };
                out.push(("toggles".to_string(), c.normalized()));
            }
        }
        if matches!(self, Grid::Sizes | Grid::All) {
            for n in 1..=5 {
                out.push(("sizes".to_string(), Cell { itc: true, srj: true, dnc: true, pts: true, n_sizes: n }));
            }
        }
        if matches!(self, Grid::Stages | Grid::All) {
            let all = |pts| Cell { itc: true, srj: true, dnc: true, pts, n_sizes };
            let random = Cell { itc: false, srj: false, dnc: false, pts: false, n_sizes };
            for c in [random, all(false), all(true)] {
                out.push(("stages".to_string(), c.normalized()));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRun {
    pub seed: u64,
    pub map50: f64,
    pub map75: f64,
    pub map50_95: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub cell: Cell,
    pub runs: Vec<CellRun>,
    /// Per-seed failures as `seed: message`.
    pub errors: Vec<String>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl AblationRow {
    pub fn stat(&self, f: impl Fn(&CellRun) -> f64) -> (f64, f64) {
        mean_std(&self.runs.iter().map(f).collect::<Vec<_>>())
    }
}

/// Runs every cell for every seed. A failing cell is recorded and the grid
/// continues. Data generation is shared by all cells of a seed.
pub fn run_ablation(
    cfg: &PipelineConfig,
    root: &std::path::Path,
    cells: &[(String, Cell)],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(CliError::Config("ablation needs at least one cell and one seed".into()));
    }
    let mut done: BTreeMap<(String, u64), std::result::Result<CellRun, String>> = BTreeMap::new();
    let mut data_ready: BTreeMap<u64, std::result::Result<(), String>> = BTreeMap::new();
    let mut rows = Vec::new();
    for (table, cell) in cells {
        let mut row = AblationRow { table: table.clone(), cell: *cell, runs: Vec::new(), errors: Vec::new() };
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seeds = Seeds::from_base(seed);
            let data = root.join("data").join(format!("seed{seed}"));
            let ready = data_ready
                .entry(seed)
                .or_insert_with(|| {
                    let l = Layout::new(&data);
                    stages::synth(&c, &l).and_then(|_| stages::curate(&c, &l)).map(drop).map_err(|e| e.to_string())
                })
                .clone();
            let key = (cell.id(), seed);
            let result = match ready {
                Err(e) => Err(format!("data: {e}")),
                Ok(()) => done
                    .entry(key.clone())
                    .or_insert_with(|| {
                        let layout = Layout::with_data(root.join(&key.0).join(format!("seed{seed}")), &data);
                        run_cell(&c, &layout, cell, seed).map_err(|e| e.to_string())
                    })
                    .clone(),
            };
            match result {
                Ok(r) => row.runs.push(r),
                Err(e) => {
                    warn!("cell {} seed {seed} failed: {e}", cell.id());
                    row.errors.push(format!("{seed}: {e}"));
                }
            }
        }
        rows.push(row);
    }
    fs::create_dir_all(root).map_err(CliError::io(root))?;
    let tsv = root.join("results.tsv");
    fs::write(&tsv, results_table(&rows)).map_err(CliError::io(&tsv))?;
    let json = root.join("results.json");
    fs::write(&json, serde_json::to_string_pretty(&rows).expect("serializable")).map_err(CliError::io(&json))?;
    Ok(rows)
}

fn run_cell(cfg: &PipelineConfig, layout: &Layout, cell: &Cell, seed: u64) -> Result<CellRun> {
    let mut c = cfg.clone();
    // an enabled term keeps its configured weight
    let w = &mut c.pretrain.weights;
    if !cell.itc {
        w.lambda_itc = 0.0;
    }
    if !cell.srj {
        w.lambda_srj = 0.0;
    }
    if !cell.dnc {
        w.lambda_dnc = 0.0;
    }
    if cell.pts {
        c.transition.n_sizes = cell.n_sizes;
    }
    let opts = PipelineOptions {
        skip_pretrain: !cell.pretrains(),
        skip_transition: !cell.pts,
        from: Some(Stage::Pretrain),
    };
    let out = run_pipeline(&c, layout, &opts)?;
    Ok(CellRun { seed, map50: out.report.map50, map75: out.report.map75, map50_95: out.report.map50_95 })
}

/// Tab-separated table: toggles, PTS, sizes, then mean and spread of each metric.
pub fn results_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "✓" } else { "-" };
    let mut s = String::from(
        "table\tITC\tSRJ\tDNC\tPTS\tn_sizes\tseeds\tmAP50\tmAP50_std\tmAP75\tmAP75_std\tmAP50:95\tmAP50:95_std\tfailed\n",
    );
    for r in rows {
        let (m50, s50) = r.stat(|x| x.map50);
        let (m75, s75) = r.stat(|x| x.map75);
        let (mm, sm) = r.stat(|x| x.map50_95);
        let c = &r.cell;
        let n = if c.pts { c.n_sizes.to_string() } else { "-".into() };
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{n}\t{}\t{m50:.4}\t{s50:.4}\t{m75:.4}\t{s75:.4}\t{mm:.4}\t{sm:.4}\t{}",
            r.table,
            mark(c.itc),
            mark(c.srj),
            mark(c.dnc),
            mark(c.pts),
            r.runs.len(),
            r.errors.len()
        );
    }
    s
}
