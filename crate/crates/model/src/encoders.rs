//! Dual encoder: a small vision transformer over image patches and a small
//! text transformer over word tokens, each ending in a linear projection and
//! L2 normalisation.

use candle_core::{DType, Device, Tensor, D};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::layers::{l2_normalize, Block, LayerNorm, Linear};
use crate::params::{Init, VarBuilder};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// (H, W) of encoder inputs during pretraining.
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_depth: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            image_size: (224, 224),
            patch_size: 16,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            text_depth: 2,
            vocab_size: 256,
            max_text_len: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Param(m));
        if self.embed_dim < 8 {
            return bad(format!("embed_dim {} < 8", self.embed_dim));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.patch_size == 0 || self.image_size.0 % self.patch_size != 0 || self.image_size.1 % self.patch_size != 0 {
            return bad(format!("image size {:?} not divisible by patch {}", self.image_size, self.patch_size));
        }
        if self.depth == 0 || self.text_depth == 0 || self.mlp_ratio == 0 {
            return bad("depths and mlp_ratio must be at least 1".into());
        }
        if self.vocab_size < 2 || self.max_text_len == 0 {
            return bad("vocabulary and text length must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }
}

/// Row-major (out_h*out_w, in_h*in_w) bilinear resampling matrix with
/// half-pixel centres and edge clamping.
pub fn bilinear_matrix(input: (usize, usize), output: (usize, usize)) -> Vec<f64> {
    let (ih, iw) = input;
    let (oh, ow) = output;
    let axis = |i_len: usize, o_len: usize, o: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * i_len as f64 / o_len as f64 - 0.5).clamp(0.0, (i_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(i_len - 1);
        (lo, hi, src - lo as f64)
    };
    let mut m = vec![0.0; oh * ow * ih * iw];
    for oy in 0..oh {
        let (y0, y1, fy) = axis(ih, oh, oy);
        for ox in 0..ow {
            let (x0, x1, fx) = axis(iw, ow, ox);
            let row = (oy * ow + ox) * ih * iw;
            m[row + y0 * iw + x0] += (1.0 - fy) * (1.0 - fx);
            m[row + y0 * iw + x1] += (1.0 - fy) * fx;
            m[row + y1 * iw + x0] += fy * (1.0 - fx);
            m[row + y1 * iw + x1] += fy * fx;
        }
    }
    m
}

/// Stacks images into a (B, 3, H, W) tensor scaled to roughly unit range.
/// Images of another size are resized first.
pub fn images_to_tensor(images: &[&RgbImage], size: (usize, usize), dtype: DType) -> Result<Tensor> {
    let (h, w) = size;
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        let resized;
        let img = if img.dimensions() == (w as u32, h as u32) {
            *img
        } else {
            resized = image::imageops::resize(*img, w as u32, h as u32, image::imageops::FilterType::Triangle);
            &resized
        };
        for c in 0..3 {
            for y in 0..h as u32 {
                for x in 0..w as u32 {
                    data.push((img.get_pixel(x, y)[c] as f32 / 255.0 - 0.5) / 0.25);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    patch_embed: Linear,
    pos: Tensor,
    grid: (usize, usize),
    blocks: Vec<Block>,
    ln: LayerNorm,
    proj: Linear,
    patch: usize,
    dim: usize,
}

impl VisionEncoder {
    pub fn new(vb: &VarBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let grid = cfg.grid();
        Ok(Self {
            patch_embed: Linear::new(&vb.pp("patch_embed"), 3 * p * p, d, true)?,
            pos: vb.get(&[grid.0 * grid.1, d], "pos", Init::Normal(0.02))?,
            grid,
            blocks: (0..cfg.depth)
                .map(|i| Block::new(&vb.pp(format!("blocks.{i}")), d, cfg.heads, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(&vb.pp("ln"), d)?,
            proj: Linear::new(&vb.pp("proj"), d, d, false)?,
            patch: p,
            dim: d,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Position embeddings resampled to a `(gh, gw)` grid.
    fn positions(&self, grid: (usize, usize)) -> Result<Tensor> {
        if grid == self.grid {
            return Ok(self.pos.clone());
        }
        let m = bilinear_matrix(self.grid, grid);
        let m = Tensor::from_vec(m, (grid.0 * grid.1, self.grid.0 * self.grid.1), &Device::Cpu)?
            .to_dtype(self.pos.dtype())?;
        Ok(m.matmul(&self.pos)?)
    }

    /// (B, T, d) token features after the final norm.
    pub fn tokens(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let p = self.patch;
        if c != 3 || h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(ModelError::Shape(format!(
                "image batch {:?} is not (B, 3, H, W) with H, W multiples of {p}",
                images.dims()
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let patches = images
            .reshape((b, 3, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, 3 * p * p))?;
        let mut x = self.patch_embed.forward(&patches)?.broadcast_add(&self.positions((gh, gw))?)?;
        for blk in &self.blocks {
            x = blk.forward(&x, None)?;
        }
        self.ln.forward(&x)
    }

    /// Spatial (B, d, H/p, W/p) map; not pooled, not normalised.
    pub fn backbone_features(&self, images: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = images.dims4()?;
        let t = self.tokens(images)?;
        Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, self.dim, h / self.patch, w / self.patch))?)
    }

    /// Mean-pooled token features (B, d) before projection.
    pub fn pooled(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.tokens(images)?.mean(1)?)
    }

    /// Unit-norm (B, d) image embeddings.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.proj.forward(&self.pooled(images)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    token_embed: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    proj: Linear,
    max_len: usize,
}

/// Token ids (B, L) and the matching float validity mask.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Tensor,
    pub mask: Tensor,
}

impl TextBatch {
    pub fn from_texts(tok: &Tokenizer, texts: &[&str], max_len: usize, dtype: DType) -> Result<Self> {
        let mut ids = Vec::with_capacity(texts.len() * max_len);
        let mut mask = Vec::with_capacity(texts.len() * max_len);
        for t in texts {
            let (i, m) = tok.encode(t, max_len);
            ids.extend(i);
            mask.extend(m.into_iter().map(f32::from));
        }
        Self::from_ids(ids, mask, texts.len(), max_len, dtype)
    }

    pub fn from_ids(ids: Vec<u32>, mask: Vec<f32>, n: usize, max_len: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            ids: Tensor::from_vec(ids, (n, max_len), &Device::Cpu)?,
            mask: Tensor::from_vec(mask, (n, max_len), &Device::Cpu)?.to_dtype(dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(rows.iter().map(|&r| r as u32).collect::<Vec<_>>(), rows.len(), &Device::Cpu)?;
        Ok(Self {
            ids: self.ids.index_select(&idx, 0)?,
            mask: self.mask.index_select(&idx, 0)?,
        })
    }
}

impl TextEncoder {
    pub fn new(vb: &VarBuilder, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            token_embed: vb.get(&[cfg.vocab_size, d], "token_embed", Init::Normal(0.02))?,
            pos: vb.get(&[cfg.max_text_len, d], "pos", Init::Normal(0.02))?,
            blocks: (0..cfg.text_depth)
                .map(|i| Block::new(&vb.pp(format!("blocks.{i}")), d, cfg.heads, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(&vb.pp("ln"), d)?,
            proj: Linear::new(&vb.pp("proj"), d, d, false)?,
            max_len: cfg.max_text_len,
        })
    }

    /// Unit-norm (B, d) text embeddings; padding is masked out of attention and pooling.
    pub fn encode(&self, batch: &TextBatch) -> Result<Tensor> {
        let (b, l) = batch.ids.dims2()?;
        if l != self.max_len {
            return Err(ModelError::Shape(format!("text length {l} != configured {}", self.max_len)));
        }
        let d = self.token_embed.dim(1)?;
        let x = self.token_embed.index_select(&batch.ids.flatten_all()?, 0)?.reshape((b, l, d))?;
        let mut x = x.broadcast_add(&self.pos)?;
        // fully padded rows keep their first slot so the softmax stays finite
        let keep = batch.mask.narrow(1, 0, 1)?.ones_like()?;
        let attn_mask = Tensor::cat(&[keep, batch.mask.narrow(1, 1, l - 1)?], 1)?;
        let additive = ((attn_mask.clone() - 1.0)? * 1e9)?;
        for blk in &self.blocks {
            x = blk.forward(&x, Some(&additive))?;
        }
        let x = self.ln.forward(&x)?;
        let w = attn_mask.unsqueeze(D::Minus1)?;
        let pooled = x.broadcast_mul(&w)?.sum(1)?.broadcast_div(&w.sum(1)?)?;
        l2_normalize(&self.proj.forward(&pooled)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::scalar;

    fn small() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 16,
            image_size: (32, 32),
            patch_size: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            text_depth: 1,
            vocab_size: 20,
            max_text_len: 6,
        }
    }

    #[test]
    fn bilinear_identity_and_rows_sum_to_one() {
        let m = bilinear_matrix((3, 4), (3, 4));
        for r in 0..12 {
            for c in 0..12 {
                assert_eq!(m[r * 12 + c], if r == c { 1.0 } else { 0.0 });
            }
        }
        let m = bilinear_matrix((2, 2), (5, 3));
        for r in 0..15 {
            assert!((m[r * 4..r * 4 + 4].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shapes_and_norms() {
        let cfg = small();
        let vb = VarBuilder::new(0, DType::F32);
        let v = VisionEncoder::new(&vb.pp("vision"), &cfg).unwrap();
        let t = TextEncoder::new(&vb.pp("text"), &cfg).unwrap();
        let img = Tensor::randn(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let e = v.encode(&img).unwrap();
        assert_eq!(e.dims(), [2, 16]);
        for n in e.sqr().unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap() {
            assert!((n - 1.0).abs() < 1e-5);
        }
        let big = Tensor::zeros((1, 3, 48, 64), DType::F32, &Device::Cpu).unwrap();
        let fm = v.backbone_features(&big).unwrap();
        assert_eq!(fm.dims(), [1, 16, 6, 8]);
        assert!(scalar(&fm.abs().unwrap().sum_all().unwrap()).unwrap().is_finite());
        assert!(v.encode(&Tensor::zeros((1, 3, 30, 32), DType::F32, &Device::Cpu).unwrap()).is_err());

        let tok = Tokenizer::build(["a b c"]);
        let batch = TextBatch::from_texts(&tok, &["a b", "c", ""], 6, DType::F32).unwrap();
        let l = t.encode(&batch).unwrap();
        assert_eq!(l.dims(), [3, 16]);
        assert!(l.to_vec2::<f32>().unwrap().iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn padding_does_not_change_text_embedding() {
        let mut cfg = small();
        let vb = VarBuilder::new(2, DType::F64);
        let t = TextEncoder::new(&vb, &cfg).unwrap();
        let a = TextBatch::from_ids(vec![3, 4, 0, 0, 0, 0], vec![1., 1., 0., 0., 0., 0.], 1, 6, DType::F64).unwrap();
        let b = TextBatch::from_ids(vec![3, 4, 9, 9, 9, 9], vec![1., 1., 0., 0., 0., 0.], 1, 6, DType::F64).unwrap();
        let d = (t.encode(&a).unwrap() - t.encode(&b).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&d).unwrap() < 1e-9);
        cfg.embed_dim = 4;
        assert!(cfg.validate().is_err());
    }
}
