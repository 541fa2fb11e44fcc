//! Seeded pretraining and transition runs on small synthetic batches.

use candle_core::{DType, Device, Tensor};
use linevlp_core::curation::{build_alt_text_pool, desk_refined_descriptions, AltTextPool, DEFAULT_TEMPLATES};
use linevlp_core::synthetic::render_instance;
use linevlp_core::{CategoryId, Taxonomy};
use linevlp_model::encoders::EncoderConfig;
use linevlp_model::losses::LossWeights;
use linevlp_model::pretrain::*;
use linevlp_model::tokenizer::Tokenizer;
use linevlp_model::ModelError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 32,
        image_size: (32, 32),
        patch_size: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        text_depth: 1,
        vocab_size: 0,
        max_text_len: 12,
    }
}

fn pool(tax: &Taxonomy) -> AltTextPool {
    build_alt_text_pool(tax, &DEFAULT_TEMPLATES, &desk_refined_descriptions()).unwrap()
}

fn dataset(model: &VlpModel, tax: &Taxonomy, pool: &AltTextPool, per_cat: usize, seed: u64) -> PairDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut imgs, mut texts, mut cats) = (Vec::new(), Vec::new(), Vec::new());
    for id in tax.ids() {
        let t = pool.texts(&tax.get(id).unwrap().name).unwrap();
        for _ in 0..per_cat {
            imgs.push(render_instance(tax, id, (32, 32), &mut rng).unwrap());
            texts.push(t[rng.random_range(0..t.len())].clone());
            cats.push(id);
        }
    }
    PairDataset::from_images(&imgs, texts, cats, model).unwrap()
}

fn model(tax: &Taxonomy, seed: u64) -> VlpModel {
    let tok = Tokenizer::build(pool(tax).all_texts());
    VlpModel::new(&small_encoder(), tok, seed, 0.07, 10.0).unwrap()
}

fn loop_cfg(epochs: usize, seed: u64) -> LoopConfig {
    LoopConfig { stage: "pretrain".into(), epochs, batch_size: 16, weights: LossWeights::default(), seed }
}

#[test]
fn two_epochs_reduce_the_mean_loss_and_log_every_step() {
    let tax = Taxonomy::desk();
    let m = model(&tax, 0);
    let data = dataset(&m, &tax, &pool(&tax), 7, 1);
    let data = PairDataset {
        images: data.images.narrow(0, 0, 64).unwrap(),
        texts: data.texts.select(&(0..64).collect::<Vec<_>>()).unwrap(),
        categories: data.categories[..64].to_vec(),
        alt_texts: data.alt_texts[..64].to_vec(),
    };
    let mut opt = m.optimizer(1e-3, 0.0, Some(1.0)).unwrap();
    let mut records = Vec::new();
    let means = train_epochs(&m, &mut opt, &data, &tax, &loop_cfg(2, 0), |r| records.push(*r)).unwrap();
    assert!(means[1].total < means[0].total, "{means:?}");
    assert_eq!(records.len(), 8);
    assert_eq!(records.last().unwrap().step, 7);
    let line = serde_json::to_string(&records[0]).unwrap();
    for key in ["epoch", "step", "L_itc", "L_srj", "L_dnc", "total"] {
        assert!(line.contains(&format!("\"{key}\"")), "{line}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let tax = Taxonomy::desk();
    let m = model(&tax, 2);
    let data = dataset(&m, &tax, &pool(&tax), 2, 3);
    let idx: Vec<usize> = (0..data.len()).collect();
    let (images, texts, cats) = data.batch(&idx).unwrap();
    let (loss, _) = m
        .batch_loss(&images, &texts, &cats, &tax, &LossWeights::default(), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let grads = loss.backward().unwrap();
    for (name, var) in m.store.iter() {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name}: no gradient"));
        let norm = g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(norm > 0.0, "{name}: zero gradient");
    }
}

#[test]
fn checkpoint_reload_reproduces_losses_and_continues() {
    let tax = Taxonomy::desk();
    let m = model(&tax, 4);
    let data = dataset(&m, &tax, &pool(&tax), 3, 5);
    let mut opt = m.optimizer(1e-3, 0.0, Some(1.0)).unwrap();
    train_epochs(&m, &mut opt, &data, &tax, &loop_cfg(1, 1), |_| {}).unwrap();
    let w = LossWeights::default();
    let before = evaluate_losses(&m, &data, &tax, &w, 16, 42).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vlp.ckpt");
    m.save(&path, &VlpMeta::new("pretrain", w, 1, Some("abc".into())), Some(&opt)).unwrap();
    let (loaded, meta, opt_state) = VlpModel::load(&path).unwrap();
    assert_eq!(meta.stage, "pretrain");
    assert_eq!(meta.provenance.as_deref(), Some("abc"));
    assert_eq!(meta.optimizer_step, opt.step_count());
    assert!((meta.temperature - m.temperature().unwrap()).abs() < 1e-6);
    assert!(!opt_state.is_empty());
    let after = evaluate_losses(&loaded, &data, &tax, &w, 16, 42).unwrap();
    assert_eq!(before, after);

    // transition-style continuation from the reloaded state
    let mut opt2 = loaded.optimizer(1e-3, 0.0, Some(1.0)).unwrap();
    opt2.load_state(&opt_state, meta.optimizer_step);
    let cfg = LoopConfig { stage: "transition".into(), ..loop_cfg(3, 9) };
    let means = train_epochs(&loaded, &mut opt2, &data, &tax, &cfg, |_| {}).unwrap();
    assert!(means.last().unwrap().total < means[0].total, "{means:?}");
    assert!(VlpModel::load(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn non_finite_loss_reports_batch() {
    let tax = Taxonomy::desk();
    let m = model(&tax, 6);
    let data = dataset(&m, &tax, &pool(&tax), 1, 7);
    let proj = m.store.get("vision.proj.weight").unwrap();
    let nan = Tensor::full(f32::NAN, proj.dims(), &Device::Cpu).unwrap().to_dtype(DType::F32).unwrap();
    proj.set(&nan).unwrap();
    let mut opt = m.optimizer(1e-3, 0.0, None).unwrap();
    match train_epochs(&m, &mut opt, &data, &tax, &loop_cfg(1, 0), |_| {}) {
        Err(ModelError::NumericFailure { stage, epoch, step, batch }) => {
            assert_eq!((stage.as_str(), epoch, step), ("pretrain", 0, 0));
            assert_eq!(batch.len(), 10);
        }
        other => panic!("expected numeric failure, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn retrieval_counts_category_matches() {
    let tax = Taxonomy::desk();
    let m = model(&tax, 8);
    let data = dataset(&m, &tax, &pool(&tax), 1, 9);
    // one candidate text: accuracy is the share of images of its category
    let cands = vec![("A photo of a bird nest.".to_string(), tax.id("bird_nest").unwrap())];
    let acc = retrieval_top1(&m, &data.images, &data.categories, &cands).unwrap();
    assert!((acc - 0.1).abs() < 1e-12);
    let all: Vec<(String, CategoryId)> = data.alt_texts.iter().cloned().zip(data.categories.iter().copied()).collect();
    let acc = retrieval_top1(&m, &data.images, &data.categories, &all).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(retrieval_top1(&m, &data.images, &data.categories, &[]).is_err());
}
