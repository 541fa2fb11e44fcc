//! The pretraining model, its data, the training loop shared by the
//! pretraining and transition stages, evaluation helpers and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use linevlp_core::manifest::Manifest;
use linevlp_core::{CategoryId, Taxonomy};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{images_to_tensor, EncoderConfig, TextBatch, TextEncoder, VisionEncoder};
use crate::error::{ModelError, Result};
use crate::layers::scalar;
use crate::losses::{dnc_scale, itc_scale, total_loss, LossBreakdown, LossWeights, Objectives, SrjHead};
use crate::optim::{AdamConfig, AdamW, GroupSpec};
use crate::params::{load_checkpoint, save_checkpoint, Checkpoint, Init, ParamStore, VarBuilder};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub weights: LossWeights,
    pub init_temperature: f64,
    pub init_dnc_scale: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            epochs: 30,
            batch_size: 120,
            lr: 1e-6,
            weight_decay: 0.0,
            max_grad_norm: None,
            weights: LossWeights::default(),
            init_temperature: 0.07,
            init_dnc_scale: 10.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Small randomly initialised encoders on 64x64 instance images.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig { image_size: (64, 64), ..EncoderConfig::default() },
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            max_grad_norm: Some(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 {
            return Err(ModelError::Param(format!("batch_size {} < 2", self.batch_size)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ModelError::Param(format!("lr {}", self.lr)));
        }
        if !(self.init_temperature > 0.0) || !(self.init_dnc_scale > 0.0) {
            return Err(ModelError::Param("initial temperature and DNC scale must be positive".into()));
        }
        Ok(())
    }
}

/// Dual encoder, SRJ head and the two learnable scales.
pub struct VlpModel {
    pub config: EncoderConfig,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub srj: SrjHead,
    pub logit_scale: Tensor,
    pub dnc_log_scale: Tensor,
    pub tokenizer: Tokenizer,
    pub store: ParamStore,
}

impl VlpModel {
    /// `config.vocab_size` is replaced by the tokenizer's.
    pub fn new(config: &EncoderConfig, tokenizer: Tokenizer, seed: u64, temperature: f64, dnc_scale: f64) -> Result<Self> {
        let config = EncoderConfig { vocab_size: tokenizer.vocab_size(), ..config.clone() };
        config.validate()?;
        let vb = VarBuilder::new(seed, DType::F32);
        let vision = VisionEncoder::new(&vb.pp("vision"), &config)?;
        let text = TextEncoder::new(&vb.pp("text"), &config)?;
        let srj = SrjHead::new(&vb.pp("srj"), config.embed_dim)?;
        let logit_scale = vb.get(&[], "logit_scale", Init::Const((1.0 / temperature).ln()))?;
        let dnc_log_scale = vb.get(&[], "dnc_log_scale", Init::Const(dnc_scale.ln()))?;
        Ok(Self {
            config,
            vision,
            text,
            srj,
            logit_scale,
            dnc_log_scale,
            tokenizer,
            store: vb.finish()?,
        })
    }

    pub fn temperature(&self) -> Result<f64> {
        Ok(1.0 / scalar(&itc_scale(&self.logit_scale)?)?)
    }

    pub fn dnc_scale(&self) -> Result<f64> {
        scalar(&dnc_scale(&self.dnc_log_scale)?)
    }

    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        self.vision.encode(images)
    }

    pub fn encode_texts(&self, texts: &TextBatch) -> Result<Tensor> {
        self.text.encode(texts)
    }

    pub fn text_batch(&self, texts: &[&str]) -> Result<TextBatch> {
        TextBatch::from_texts(&self.tokenizer, texts, self.config.max_text_len, DType::F32)
    }

    /// Loss of one batch.
    pub fn batch_loss(
        &self,
        images: &Tensor,
        texts: &TextBatch,
        categories: &[CategoryId],
        taxonomy: &Taxonomy,
        weights: &LossWeights,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, LossBreakdown)> {
        let v = self.encode_images(images)?;
        let l = self.encode_texts(texts)?;
        let s_itc = itc_scale(&self.logit_scale)?;
        let s_dnc = dnc_scale(&self.dnc_log_scale)?;
        let obj = Objectives { head: &self.srj, itc_scale: &s_itc, dnc_scale: &s_dnc };
        let out = total_loss(&v, &l, categories, taxonomy, obj, weights, rng)?;
        Ok((out.total, out.breakdown))
    }

    pub fn optimizer(&self, lr: f64, weight_decay: f64, max_grad_norm: Option<f64>) -> Result<AdamW> {
        AdamW::new(
            &self.store,
            vec![GroupSpec::new("all", &[""], lr, weight_decay)],
            AdamConfig { max_grad_norm, ..AdamConfig::default() },
        )
    }

    pub fn save(&self, path: &Path, meta: &VlpMeta, opt: Option<&AdamW>) -> Result<()> {
        let mut tensors = self.store.snapshot();
        if let Some(o) = opt {
            tensors.extend(o.state_tensors());
        }
        let mut meta = meta.clone();
        meta.encoder = self.config.clone();
        meta.vocab = self.tokenizer.vocab().to_vec();
        meta.temperature = self.temperature()?;
        meta.dnc_scale = self.dnc_scale()?;
        meta.optimizer_step = opt.map_or(meta.optimizer_step, AdamW::step_count);
        let meta = serde_json::to_value(&meta).map_err(|e| ModelError::Checkpoint { path: path.into(), msg: e.to_string() })?;
        save_checkpoint(path, &Checkpoint { meta, tensors })
    }

    /// Model, its metadata and any stored optimizer state.
    pub fn load(path: &Path) -> Result<(Self, VlpMeta, BTreeMap<String, Tensor>)> {
        let ckpt = load_checkpoint(path)?;
        let meta: VlpMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| ModelError::Checkpoint { path: path.into(), msg: format!("not a pretraining checkpoint: {e}") })?;
        if meta.kind != VLP_KIND {
            return Err(ModelError::Checkpoint { path: path.into(), msg: format!("kind {} is not {VLP_KIND}", meta.kind) });
        }
        let tokenizer = Tokenizer::from_vocab(meta.vocab.clone())?;
        let model = Self::new(&meta.encoder, tokenizer, 0, meta.temperature, meta.dnc_scale)?;
        let (opt_state, params): (BTreeMap<_, _>, BTreeMap<_, _>) =
            ckpt.tensors.into_iter().partition(|(k, _)| k.starts_with("opt."));
        model.store.load(&params, true)?;
        Ok((model, meta, opt_state))
    }
}

pub const VLP_KIND: &str = "vlp-tl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlpMeta {
    pub kind: String,
    /// "pretrain" or "transition".
    pub stage: String,
    pub encoder: EncoderConfig,
    pub vocab: Vec<String>,
    pub weights: LossWeights,
    pub temperature: f64,
    pub dnc_scale: f64,
    pub optimizer_step: u64,
    pub epochs_done: usize,
    pub provenance: Option<String>,
}

impl VlpMeta {
    pub fn new(stage: &str, weights: LossWeights, epochs_done: usize, provenance: Option<String>) -> Self {
        Self {
            kind: VLP_KIND.into(),
            stage: stage.into(),
            encoder: EncoderConfig::default(),
            vocab: Vec::new(),
            weights,
            temperature: 0.0,
            dnc_scale: 0.0,
            optimizer_step: 0,
            epochs_done,
            provenance,
        }
    }
}

/// Preloaded image/text pairs of a manifest.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub images: Tensor,
    pub texts: TextBatch,
    pub categories: Vec<CategoryId>,
    pub alt_texts: Vec<String>,
}

pub fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

impl PairDataset {
    /// Image refs are resolved against `base`.
    pub fn load(manifest: &Manifest, base: &Path, model: &VlpModel) -> Result<Self> {
        if manifest.samples.is_empty() {
            return Err(ModelError::Batch("manifest has no samples".into()));
        }
        let mut imgs = Vec::with_capacity(manifest.samples.len());
        let mut categories = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            imgs.push(load_rgb(&Manifest::resolve_image(base, &s.image_ref))?);
            categories.push(manifest.taxonomy.id(&s.category)?);
        }
        let alt_texts: Vec<String> = manifest.samples.iter().map(|s| s.alt_text.clone()).collect();
        Self::from_images(&imgs, alt_texts, categories, model)
    }

    pub fn from_images(
        images: &[image::RgbImage],
        alt_texts: Vec<String>,
        categories: Vec<CategoryId>,
        model: &VlpModel,
    ) -> Result<Self> {
        if images.len() != alt_texts.len() || images.len() != categories.len() {
            return Err(ModelError::Batch(format!(
                "{} images, {} texts, {} categories",
                images.len(),
                alt_texts.len(),
                categories.len()
            )));
        }
        let refs: Vec<&image::RgbImage> = images.iter().collect();
        let text_refs: Vec<&str> = alt_texts.iter().map(String::as_str).collect();
        Ok(Self {
            images: images_to_tensor(&refs, model.config.image_size, DType::F32)?,
            texts: model.text_batch(&text_refs)?,
            categories,
            alt_texts,
        })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, TextBatch, Vec<CategoryId>)> {
        let t = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        Ok((
            self.images.index_select(&t, 0)?,
            self.texts.select(idx)?,
            idx.iter().map(|&i| self.categories[i]).collect(),
        ))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "L_itc")]
    pub l_itc: f64,
    #[serde(rename = "L_srj")]
    pub l_srj: f64,
    #[serde(rename = "L_dnc")]
    pub l_dnc: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub stage: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for p in parts {
        m.itc += p.itc / n;
        m.srj += p.srj / n;
        m.dnc += p.dnc / n;
        m.total += p.total / n;
    }
    m
}

/// Batches of a seeded shuffle; a trailing batch of one sample is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(2)).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Runs `cfg.epochs` epochs and returns the mean breakdown of each.
pub fn train_epochs(
    model: &VlpModel,
    opt: &mut AdamW,
    data: &PairDataset,
    taxonomy: &Taxonomy,
    cfg: &LoopConfig,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<Vec<LossBreakdown>> {
    cfg.weights.validate()?;
    if data.len() < 2 {
        return Err(ModelError::Batch(format!("{} samples; need at least 2", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut means = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut parts = Vec::new();
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let (images, texts, cats) = data.batch(&idx)?;
            let (loss, b) = model.batch_loss(&images, &texts, &cats, taxonomy, &cfg.weights, &mut rng)?;
            if !b.total.is_finite() {
                return Err(ModelError::NumericFailure { stage: cfg.stage.clone(), epoch, step, batch: idx });
            }
            let grads = loss.backward()?;
            opt.step(&grads)?;
            on_record(&LogRecord { epoch, step, l_itc: b.itc, l_srj: b.srj, l_dnc: b.dnc, total: b.total });
            parts.push(b);
            step += 1;
        }
        let m = mean_breakdown(&parts);
        log::info!("{} epoch {epoch}: total {:.4} (itc {:.4}, srj {:.4}, dnc {:.4})", cfg.stage, m.total, m.itc, m.srj, m.dnc);
        means.push(m);
    }
    Ok(means)
}

/// Mean losses over the dataset with a fixed shuffle and no updates.
pub fn evaluate_losses(
    model: &VlpModel,
    data: &PairDataset,
    taxonomy: &Taxonomy,
    weights: &LossWeights,
    batch_size: usize,
    seed: u64,
) -> Result<LossBreakdown> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    for idx in epoch_batches(data.len(), batch_size, &mut rng) {
        let (images, texts, cats) = data.batch(&idx)?;
        let (_, b) = model.batch_loss(&images, &texts, &cats, taxonomy, weights, &mut rng)?;
        parts.push(b);
    }
    Ok(mean_breakdown(&parts))
}

fn in_chunks(images: &Tensor, chunk: usize, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Vec<Vec<f32>>> {
    let n = images.dim(0)?;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let part = f(&images.narrow(0, start, len)?)?.detach();
        out.extend(part.to_dtype(DType::F32)?.to_vec2::<f32>()?);
        start += len;
    }
    Ok(out)
}

/// Unit-norm image embeddings.
pub fn image_embeddings(model: &VlpModel, images: &Tensor) -> Result<Vec<Vec<f32>>> {
    in_chunks(images, 64, |x| model.encode_images(x))
}

/// Mean-pooled backbone features, before the projection (linear-probe input).
pub fn backbone_pooled(vision: &VisionEncoder, images: &Tensor) -> Result<Vec<Vec<f32>>> {
    in_chunks(images, 64, |x| vision.pooled(x))
}

/// Image-to-text top-1 accuracy at category level: each image retrieves the
/// most similar candidate text and is correct if that text's category
/// matches its own.
pub fn retrieval_top1(
    model: &VlpModel,
    images: &Tensor,
    categories: &[CategoryId],
    candidates: &[(String, CategoryId)],
) -> Result<f64> {
    if candidates.is_empty() || categories.is_empty() {
        return Err(ModelError::Batch("retrieval needs images and candidate texts".into()));
    }
    let texts: Vec<&str> = candidates.iter().map(|c| c.0.as_str()).collect();
    let l = model.encode_texts(&model.text_batch(&texts)?)?.detach().to_vec2::<f32>()?;
    let v = image_embeddings(model, images)?;
    let mut hits = 0;
    for (row, cat) in v.iter().zip(categories) {
        let best = l
            .iter()
            .enumerate()
            .map(|(j, t)| (j, row.iter().zip(t).map(|(a, b)| a * b).sum::<f32>()))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .expect("non-empty");
        hits += usize::from(candidates[best].1 == *cat);
    }
    Ok(hits as f64 / categories.len() as f64)
}
