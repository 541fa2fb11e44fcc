//! One function per pipeline stage. Each reads its predecessor's artifacts
//! from the run layout, writes its own, and records a `stage.json` with the
//! config hash that produced them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use linevlp_core::crops::{build_transition_set, CropSpec};
use linevlp_core::curation::{
    assign_alt_texts, build_alt_text_pool, desk_refined_descriptions, AltTextPool, Split, DEFAULT_TEMPLATES,
};
use linevlp_core::manifest::{load_manifest, save_manifest, Manifest};
use linevlp_core::metrics::{evaluate, APReport};
use linevlp_core::probe::RidgeProbe;
use linevlp_core::synthetic::{generate_scenes, load_scenes, render_instance_files, save_scenes, SceneSpec};
use linevlp_core::{BBox, CategoryId, Detection, Taxonomy};
use linevlp_model::detector::{samples_from_scenes, train_detector, Detector, DetectorMeta};
use linevlp_model::losses::LossWeights;
use linevlp_model::pretrain::{
    backbone_pooled, load_rgb, retrieval_top1, train_epochs, LogRecord, LoopConfig, PairDataset, VlpMeta, VlpModel,
};
use linevlp_model::tokenizer::Tokenizer;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, PipelineConfig};
use crate::error::{CliError, Result};

pub const STAGE_FILE: &str = "stage.json";
const INSTANCE_LIST: &str = "instances.csv";

/// Paths of every artifact under one output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    /// Root of the synth and curate outputs; usually `root`.
    pub data: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self { data: root.clone(), root }
    }
    /// Model stages under `root`, shared data under `data`.
    pub fn with_data(root: impl Into<PathBuf>, data: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), data: data.into() }
    }
    pub fn synth(&self) -> PathBuf {
        self.data.join("synth")
    }
    pub fn taxonomy(&self) -> PathBuf {
        self.synth().join("taxonomy.json")
    }
    pub fn instances(&self) -> PathBuf {
        self.synth().join("train")
    }
    pub fn heldout_instances(&self) -> PathBuf {
        self.synth().join("heldout")
    }
    pub fn train_scenes(&self) -> PathBuf {
        self.synth().join("scenes").join("train")
    }
    pub fn test_scenes(&self) -> PathBuf {
        self.synth().join("scenes").join("test")
    }
    pub fn curate(&self) -> PathBuf {
        self.data.join("curate")
    }
    pub fn pool(&self) -> PathBuf {
        self.curate().join("pool.json")
    }
    pub fn pretrain_manifest(&self) -> PathBuf {
        self.curate().join("pretrain.jsonl")
    }
    pub fn heldout_manifest(&self) -> PathBuf {
        self.curate().join("heldout.jsonl")
    }
    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn pretrain_ckpt(&self) -> PathBuf {
        self.pretrain().join("model.ckpt")
    }
    pub fn signal(&self) -> PathBuf {
        self.pretrain().join("signal.json")
    }
    pub fn transition(&self) -> PathBuf {
        self.root.join("transition")
    }
    pub fn transition_ckpt(&self) -> PathBuf {
        self.transition().join("model.ckpt")
    }
    pub fn detect(&self) -> PathBuf {
        self.root.join("detect")
    }
    pub fn detector_ckpt(&self) -> PathBuf {
        self.detect().join("detector.ckpt")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn detections(&self) -> PathBuf {
        self.eval().join("detections.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.eval().join("report.txt")
    }
}

/// Sidecar written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    /// Hashes of the artifacts this stage consumed.
    pub upstream: BTreeMap<String, String>,
    #[serde(default)]
    pub info: serde_json::Value,
}

impl StageRecord {
    pub fn read(dir: &Path) -> Option<Self> {
        let text = fs::read_to_string(dir.join(STAGE_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(STAGE_FILE), self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(CliError::io(path))
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn require(path: &Path, stage: &'static str, needs: &'static str, what: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Dependency { stage, needs, what, path: path.to_path_buf() })
    }
}

/// Hash recorded by the stage that wrote `dir`, if any.
fn upstream_hash(dir: &Path) -> String {
    StageRecord::read(dir).map(|r| r.config_hash).unwrap_or_else(|| "external".into())
}

fn stage_hash(dir: &Path) -> Option<String> {
    StageRecord::read(dir).map(|r| r.config_hash)
}

/// Taxonomy of a run: the one saved by `synth` if present, else the config's.
pub fn run_taxonomy(cfg: &PipelineConfig, layout: &Layout) -> Result<Taxonomy> {
    let saved = layout.taxonomy();
    if saved.is_file() {
        crate::config::read_taxonomy(&saved)
    } else {
        cfg.load_taxonomy()
    }
}

// ---------------------------------------------------------------- synth

pub fn synth(cfg: &PipelineConfig, layout: &Layout) -> Result<StageRecord> {
    let tax = cfg.load_taxonomy()?;
    let hash = config_hash("synth", &(&tax, &cfg.synth, cfg.seeds.synth), &[]);
    let dir = layout.synth();
    fresh_dir(&dir)?;
    write_json(&layout.taxonomy(), &tax)?;
    let s = &cfg.synth;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.synth);
    let size = (s.instance_size, s.instance_size);
    for (out, n) in [(layout.instances(), s.instances_per_category), (layout.heldout_instances(), s.heldout_per_category)] {
        let images = render_instance_files(&tax, n, size, &out, &mut rng)?;
        let mut lines = String::new();
        for (r, id) in &images {
            lines.push_str(&format!("{r},{}\n", tax.get(*id)?.name));
        }
        fs::write(out.join(INSTANCE_LIST), lines).map_err(CliError::io(out.join(INSTANCE_LIST)))?;
    }
    let spec = SceneSpec { seed: cfg.seeds.synth ^ 0x5ce9e, ..s.scene.clone() };
    let scenes = generate_scenes(&spec, &tax, s.train_scenes + s.test_scenes)?;
    let (train, test) = scenes.split_at(s.train_scenes);
    save_scenes(&layout.train_scenes(), train, &tax)?;
    save_scenes(&layout.test_scenes(), test, &tax)?;
    let rec = StageRecord {
        stage: "synth".into(),
        config_hash: hash,
        upstream: BTreeMap::new(),
        info: serde_json::json!({
            "instances": s.instances_per_category * tax.len(),
            "heldout": s.heldout_per_category * tax.len(),
            "train_scenes": train.len(),
            "test_scenes": test.len(),
        }),
    };
    rec.write(&dir)?;
    info!("synth: {} instances, {} + {} scenes", s.instances_per_category * tax.len(), train.len(), test.len());
    Ok(rec)
}

fn read_instance_list(dir: &Path, tax: &Taxonomy) -> Result<Vec<(String, CategoryId)>> {
    let path = dir.join(INSTANCE_LIST);
    let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (r, name) = l.split_once(',').ok_or_else(|| CliError::Parse {
                path: path.clone(),
                line: i + 1,
                msg: "expected image_ref,category".into(),
            })?;
            Ok((r.to_string(), tax.id(name.trim())?))
        })
        .collect()
}

// ---------------------------------------------------------------- curate

pub fn alt_text_pool(tax: &Taxonomy) -> Result<AltTextPool> {
    Ok(build_alt_text_pool(tax, &DEFAULT_TEMPLATES, &desk_refined_descriptions())?)
}

pub fn curate(cfg: &PipelineConfig, layout: &Layout) -> Result<StageRecord> {
    require(&layout.synth().join(STAGE_FILE), "curate", "synth", "synthetic instances")?;
    let tax = run_taxonomy(cfg, layout)?;
    let synth_hash = upstream_hash(&layout.synth());
    let hash = config_hash("curate", &cfg.seeds.curate, &[&synth_hash]);
    let dir = layout.curate();
    fresh_dir(&dir)?;
    let pool = alt_text_pool(&tax)?;
    write_json(&layout.pool(), &pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.curate);
    let mut counts = Vec::new();
    for (src, out, prefix) in [
        (layout.instances(), layout.pretrain_manifest(), "../synth/train/"),
        (layout.heldout_instances(), layout.heldout_manifest(), "../synth/heldout/"),
    ] {
        let images: Vec<(String, CategoryId)> =
            read_instance_list(&src, &tax)?.into_iter().map(|(r, c)| (format!("{prefix}{r}"), c)).collect();
        let mut m = Manifest::new(tax.clone());
        m.samples = assign_alt_texts(&images, &tax, &pool, Split::Pretrain, &mut rng)?;
        m.provenance = Some(hash.clone());
        save_manifest(&m, &out)?;
        counts.push(m.samples.len());
    }
    let rec = StageRecord {
        stage: "curate".into(),
        config_hash: hash,
        upstream: BTreeMap::from([("synth".to_string(), synth_hash)]),
        info: serde_json::json!({ "pretrain_pairs": counts[0], "heldout_pairs": counts[1] }),
    };
    rec.write(&dir)?;
    Ok(rec)
}

// ---------------------------------------------------------------- pretrain

fn log_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(CliError::io(path))?))
}

fn write_log(w: &mut BufWriter<fs::File>, r: &LogRecord) {
    // best effort: a full disk surfaces when the checkpoint is written
    let _ = writeln!(w, "{}", serde_json::to_string(r).expect("record serializes"));
}

/// Retrieval and linear-probe numbers of a pretrained model on held-out pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub retrieval_top1: f64,
    pub chance: f64,
    pub probe_pretrained: f64,
    pub probe_random: f64,
}

pub fn pretrain_signal(
    model: &VlpModel,
    train: &PairDataset,
    heldout: &PairDataset,
    tax: &Taxonomy,
    pool: &AltTextPool,
    random_seed: u64,
) -> Result<Signal> {
    let mut candidates = Vec::new();
    for id in tax.ids() {
        for t in pool.texts(&tax.get(id)?.name)? {
            candidates.push((t.clone(), id));
        }
    }
    let retrieval = retrieval_top1(model, &heldout.images, &heldout.categories, &candidates)?;
    let random = VlpModel::new(&model.config, model.tokenizer.clone(), random_seed, 0.07, 10.0)?;
    let labels = |c: &[CategoryId]| c.iter().map(|c| c.0).collect::<Vec<_>>();
    let probe = |m: &VlpModel| -> Result<f64> {
        let ftr = backbone_pooled(&m.vision, &train.images)?;
        let fte = backbone_pooled(&m.vision, &heldout.images)?;
        let p = RidgeProbe::fit(&ftr, &labels(&train.categories), tax.len(), 1e-2)
            .ok_or_else(|| CliError::Config("linear probe is singular".into()))?;
        Ok(p.accuracy(&fte, &labels(&heldout.categories)))
    };
    Ok(Signal {
        retrieval_top1: retrieval,
        chance: 1.0 / tax.len() as f64,
        probe_pretrained: probe(model)?,
        probe_random: probe(&random)?,
    })
}

pub fn pretrain(cfg: &PipelineConfig, layout: &Layout) -> Result<StageRecord> {
    let manifest_path = layout.pretrain_manifest();
    require(&manifest_path, "pretrain", "curate", "the pretraining manifest")?;
    let p = &cfg.pretrain;
    if no_objective(&p.weights) {
        return Err(CliError::Config("all loss weights are zero; nothing to pretrain".into()));
    }
    let tax = run_taxonomy(cfg, layout)?;
    let curate_hash = upstream_hash(&layout.curate());
    let hash = config_hash("pretrain", &(p, cfg.seeds.pretrain), &[&curate_hash]);
    let dir = layout.pretrain();
    fresh_dir(&dir)?;
    let pool: AltTextPool = read_pool(&layout.pool())?;
    let manifest = load_manifest(&manifest_path)?;
    let model = VlpModel::new(&p.encoder, Tokenizer::build(pool.all_texts()), cfg.seeds.pretrain, p.init_temperature, p.init_dnc_scale)?;
    let data = PairDataset::load(&manifest, &layout.curate(), &model)?;
    let mut opt = model.optimizer(p.lr, p.weight_decay, p.max_grad_norm)?;
    let lc = LoopConfig {
        stage: "pretrain".into(),
        epochs: p.epochs,
        batch_size: p.batch_size,
        weights: p.weights,
        seed: cfg.seeds.pretrain,
    };
    let mut log = log_writer(&dir.join("log.jsonl"))?;
    let means = train_epochs(&model, &mut opt, &data, &tax, &lc, |r| write_log(&mut log, r))?;
    log.flush().map_err(CliError::io(dir.join("log.jsonl")))?;
    model.save(&layout.pretrain_ckpt(), &VlpMeta::new("pretrain", p.weights, p.epochs, Some(hash.clone())), Some(&opt))?;

    let mut info = serde_json::json!({ "epoch_means": means });
    if layout.heldout_manifest().is_file() {
        let heldout = PairDataset::load(&load_manifest(&layout.heldout_manifest())?, &layout.curate(), &model)?;
        let signal = pretrain_signal(&model, &data, &heldout, &tax, &pool, cfg.seeds.pretrain ^ 0xbad5eed)?;
        write_json(&layout.signal(), &signal)?;
        info["signal"] = serde_json::to_value(signal).expect("serializable");
    }
    let rec = StageRecord {
        stage: "pretrain".into(),
        config_hash: hash,
        upstream: BTreeMap::from([("curate".to_string(), curate_hash)]),
        info,
    };
    rec.write(&dir)?;
    Ok(rec)
}

fn read_pool(path: &Path) -> Result<AltTextPool> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse { path: path.into(), line: e.line(), msg: e.to_string() })
}

// ---------------------------------------------------------------- transition

/// Inputs of the transition stage; `None` means the run layout default.
#[derive(Debug, Clone, Default)]
pub struct TransitionInputs {
    pub ckpt: Option<PathBuf>,
    pub scenes: Option<PathBuf>,
    pub n_sizes: Option<usize>,
}

pub fn transition(cfg: &PipelineConfig, layout: &Layout, inputs: &TransitionInputs) -> Result<StageRecord> {
    let ckpt = inputs.ckpt.clone().unwrap_or_else(|| layout.pretrain_ckpt());
    require(&ckpt, "transition", "pretrain", "a pretraining checkpoint")?;
    require(&layout.pretrain_manifest(), "transition", "curate", "the pretraining manifest")?;
    let scenes_dir = inputs.scenes.clone().unwrap_or_else(|| layout.train_scenes());
    require(&scenes_dir, "transition", "synth", "training scenes")?;
    let n_sizes = inputs.n_sizes.unwrap_or(cfg.transition.n_sizes);
    let spec = CropSpec::with_sizes(n_sizes);
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let tax = run_taxonomy(cfg, layout)?;
    let (model, meta, opt_state) = VlpModel::load(&ckpt)?;
    if meta.stage != "pretrain" {
        return Err(CliError::Config(format!("{} is a `{}` checkpoint, expected `pretrain`", ckpt.display(), meta.stage)));
    }
    let ckpt_hash = meta.provenance.clone().unwrap_or_else(|| "external".into());
    let synth_hash = upstream_hash(&layout.synth());
    let hash = config_hash(
        "transition",
        &(&cfg.transition, n_sizes, &cfg.pretrain, cfg.seeds.transition),
        &[&ckpt_hash, &synth_hash],
    );
    let dir = layout.transition();
    fresh_dir(&dir)?;
    let pool = read_pool(&layout.pool())?;
    let manifest = load_manifest(&layout.pretrain_manifest())?;
    let scenes = load_scenes(&scenes_dir, &tax)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.transition);
    let (mut tm, stats) = build_transition_set(&scenes, &manifest, &layout.curate(), &pool, &spec, &tax, &dir, &mut rng)?;
    tm.provenance = Some(hash.clone());
    save_manifest(&tm, &dir.join("manifest.jsonl"))?;

    // hyperparameters and optimizer state carry over from pretraining
    let p = &cfg.pretrain;
    let data = PairDataset::load(&tm, &dir, &model)?;
    let mut opt = model.optimizer(p.lr, p.weight_decay, p.max_grad_norm)?;
    opt.load_state(&opt_state, meta.optimizer_step);
    let lc = LoopConfig {
        stage: "transition".into(),
        epochs: cfg.transition.epochs,
        batch_size: p.batch_size,
        weights: meta.weights,
        seed: cfg.seeds.transition,
    };
    let mut log = log_writer(&dir.join("log.jsonl"))?;
    let means = train_epochs(&model, &mut opt, &data, &tax, &lc, |r| write_log(&mut log, r))?;
    log.flush().map_err(CliError::io(dir.join("log.jsonl")))?;
    let meta = VlpMeta::new("transition", meta.weights, meta.epochs_done + cfg.transition.epochs, Some(hash.clone()));
    model.save(&layout.transition_ckpt(), &meta, Some(&opt))?;
    let rec = StageRecord {
        stage: "transition".into(),
        config_hash: hash,
        upstream: BTreeMap::from([("checkpoint".to_string(), ckpt_hash), ("synth".to_string(), synth_hash)]),
        info: serde_json::json!({
            "n_sizes": n_sizes,
            "pairs": tm.samples.len(),
            "crops_added": stats.crops_added,
            "fallbacks": stats.fallbacks,
            "epoch_means": means,
        }),
    };
    rec.write(&dir)?;
    Ok(rec)
}

// ---------------------------------------------------------------- detect

/// Where the detector backbone comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backbone {
    /// Transition checkpoint if present, else the pretraining one.
    Latest,
    Checkpoint(PathBuf),
    Random,
}

#[derive(Debug, Clone, Default)]
pub struct DetectInputs {
    pub scenes: Option<PathBuf>,
}

pub fn train_det(cfg: &PipelineConfig, layout: &Layout, backbone: &Backbone, inputs: &DetectInputs) -> Result<StageRecord> {
    let ckpt = match backbone {
        Backbone::Random => None,
        Backbone::Checkpoint(p) => {
            require(p, "train-det", "pretrain", "a backbone checkpoint")?;
            Some(p.clone())
        }
        Backbone::Latest => {
            let t = layout.transition_ckpt();
            let p = layout.pretrain_ckpt();
            if t.is_file() {
                Some(t)
            } else {
                require(&p, "train-det", "pretrain", "a pretraining or transition checkpoint")?;
                Some(p)
            }
        }
    };
    let scenes_dir = inputs.scenes.clone().unwrap_or_else(|| layout.train_scenes());
    require(&scenes_dir, "train-det", "synth", "training scenes")?;
    let tax = run_taxonomy(cfg, layout)?;
    let classes = Detector::classes_for(&tax);

    let (encoder, tensors, init_hash, init) = match &ckpt {
        Some(path) => {
            let (model, meta, _) = VlpModel::load(path)?;
            let h = meta.provenance.clone().unwrap_or_else(|| "external".into());
            (model.config.clone(), Some(model.store.snapshot()), h, meta.stage)
        }
        None => (cfg.pretrain.encoder.clone(), None, "random".to_string(), "random".to_string()),
    };
    let synth_hash = upstream_hash(&layout.synth());
    let hash = config_hash("detect", &(&cfg.detect, &encoder, cfg.seeds.detect), &[&init_hash, &synth_hash]);
    let dir = layout.detect();
    fresh_dir(&dir)?;
    let det = Detector::new(&encoder, &cfg.detect, classes.clone(), cfg.seeds.detect)?;
    if let Some(t) = &tensors {
        det.load_backbone(t)?;
    }
    let scenes: Vec<_> = load_scenes(&scenes_dir, &tax)?.into_iter().map(|(_, s)| s).collect();
    let samples = samples_from_scenes(&scenes, &tax, &classes)?;
    let mut opt = det.optimizer()?;
    let mut log = log_writer(&dir.join("log.jsonl"))?;
    let losses = train_detector(&det, &mut opt, &samples, |epoch, loss| {
        let _ = writeln!(log, "{}", serde_json::json!({ "epoch": epoch, "loss": loss }));
        info!("train-det epoch {epoch}: loss {loss:.4}");
    })?;
    log.flush().map_err(CliError::io(dir.join("log.jsonl")))?;
    let meta = DetectorMeta {
        kind: String::new(),
        encoder: encoder.clone(),
        detector: cfg.detect.clone(),
        classes: Vec::new(),
        backbone_init: init.clone(),
        epochs_done: cfg.detect.epochs,
        provenance: Some(hash.clone()),
    };
    det.save(&layout.detector_ckpt(), &meta, &tax)?;
    let rec = StageRecord {
        stage: "detect".into(),
        config_hash: hash,
        upstream: BTreeMap::from([("backbone".to_string(), init_hash), ("synth".to_string(), synth_hash)]),
        info: serde_json::json!({ "backbone_init": init, "epoch_losses": losses }),
    };
    rec.write(&dir)?;
    Ok(rec)
}

// ---------------------------------------------------------------- predict / eval

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_ref: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub category: String,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

pub fn predict(cfg: &PipelineConfig, layout: &Layout, ckpt: &Path, images: &Path, out: &Path) -> Result<usize> {
    require(ckpt, "predict", "train-det", "a detector checkpoint")?;
    require(images, "predict", "synth", "an image directory")?;
    let tax = run_taxonomy(cfg, layout)?;
    let (det, _) = Detector::load(ckpt, &tax)?;
    let names = png_names(images)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    let mut w = BufWriter::new(fs::File::create(out).map_err(CliError::io(out))?);
    let mut count = 0;
    for chunk in names.chunks(8) {
        let imgs = chunk.iter().map(|n| load_rgb(&images.join(n))).collect::<std::result::Result<Vec<_>, _>>()?;
        let refs: Vec<_> = imgs.iter().collect();
        for (name, dets) in chunk.iter().zip(det.predict(&refs)?) {
            for d in dets {
                let rec = DetectionRecord {
                    image_ref: name.clone(),
                    x_min: d.bbox.x_min,
                    y_min: d.bbox.y_min,
                    x_max: d.bbox.x_max,
                    y_max: d.bbox.y_max,
                    score: d.score,
                    category: tax.get(d.category)?.name.clone(),
                };
                writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(CliError::io(out))?;
                count += 1;
            }
        }
    }
    w.flush().map_err(CliError::io(out))?;
    Ok(count)
}

pub fn read_detections(path: &Path, tax: &Taxonomy) -> Result<BTreeMap<String, Vec<Detection>>> {
    let f = fs::File::open(path).map_err(CliError::io(path))?;
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| CliError::Parse { path: path.into(), line: i + 1, msg };
        let r: DetectionRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let category = tax.id(&r.category).map_err(|e| bad(e.to_string()))?;
        out.entry(r.image_ref).or_default().push(Detection {
            bbox: BBox::new(r.x_min, r.y_min, r.x_max, r.y_max),
            score: r.score,
            category,
        });
    }
    Ok(out)
}

pub fn ground_truth(dir: &Path, tax: &Taxonomy) -> Result<BTreeMap<String, Vec<(BBox, CategoryId)>>> {
    Ok(load_scenes(dir, tax)?
        .into_iter()
        .map(|(name, s)| {
            let boxes = (0..s.boxes.len()).map(|k| (s.bbox(k), s.labels[k])).collect();
            (name, boxes)
        })
        .collect())
}

/// Evaluates a detections file; writes `report.txt` and `report.json` to `out_dir`.
pub fn eval(cfg: &PipelineConfig, layout: &Layout, dets: &Path, gts: &Path, out_dir: &Path) -> Result<APReport> {
    require(dets, "eval", "predict", "a detections file")?;
    require(gts, "eval", "synth", "ground-truth scenes")?;
    let tax = run_taxonomy(cfg, layout)?;
    let report = evaluate(&read_detections(dets, &tax)?, &ground_truth(gts, &tax)?, &tax)?;
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let txt = out_dir.join("report.txt");
    fs::write(&txt, report.to_text()).map_err(CliError::io(&txt))?;
    write_json(&out_dir.join("report.json"), &report)?;
    let upstream = stage_hash(&layout.detect()).unwrap_or_else(|| "external".into());
    let rec = StageRecord {
        stage: "eval".into(),
        config_hash: config_hash("eval", &(dets, gts), &[&upstream]),
        upstream: BTreeMap::from([("detect".to_string(), upstream)]),
        info: serde_json::json!({ "map50": report.map50, "map75": report.map75, "map50_95": report.map50_95 }),
    };
    rec.write(out_dir)?;
    Ok(report)
}

/// Weights with every term off.
pub fn no_objective(w: &LossWeights) -> bool {
    w.lambda_itc == 0.0 && w.lambda_srj == 0.0 && w.lambda_dnc == 0.0
}
