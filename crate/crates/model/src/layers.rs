//! Transformer building blocks composed from differentiable tensor ops.

use candle_core::{DType, Tensor, D};

use crate::error::Result;
use crate::params::{Init, VarBuilder};

#[derive(Debug, Clone)]
pub struct Linear {
    /// (in, out)
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(vb: &VarBuilder, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = (1.0 / d_in as f64).sqrt();
        Self::with_init(vb, d_in, d_out, bias, Init::Uniform(bound))
    }

    pub fn with_init(vb: &VarBuilder, d_in: usize, d_out: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = vb.get(&[d_in, d_out], "weight", init)?;
        let bias = if bias {
            Some(vb.get(&[d_out], "bias", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Applies to the last dimension of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(vb: &VarBuilder, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: vb.get(&[d], "gamma", Init::Const(1.0))?,
            beta: vb.get(&[d], "beta", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Tanh-form GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = ((x + (x.powf(3.0)? * 0.044715)?)? * c)?;
    Ok(((inner.tanh()? + 1.0)? * 0.5)?.mul(x)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Softmax over the last dimension, stabilised with a detached row max.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Rows divided by their L2 norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(vb: &VarBuilder, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&vb.pp("q"), d, d, true)?,
            k: Linear::new(&vb.pp("k"), d, d, true)?,
            v: Linear::new(&vb.pp("v"), d, d, true)?,
            out: Linear::new(&vb.pp("out"), d, d, true)?,
            heads,
        })
    }

    /// `mask`: optional additive (B, T) key mask (0 keep, large negative drop).
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(&m.reshape((b, 1, 1, t))?)?;
        }
        let p = softmax_last(&scores)?;
        let y = p.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, d))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new(vb: &VarBuilder, d: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&vb.pp("ln1"), d)?,
            attn: Attention::new(&vb.pp("attn"), d, heads)?,
            ln2: LayerNorm::new(&vb.pp("ln2"), d)?,
            fc1: Linear::new(&vb.pp("fc1"), d, d * mlp_ratio, true)?,
            fc2: Linear::new(&vb.pp("fc2"), d * mlp_ratio, d, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        let h = gelu(&self.fc1.forward(&self.ln2.forward(&x)?)?)?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Host-side scalar of a 0-d or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn layer_norm_normalises_rows() {
        let vb = VarBuilder::new(0, DType::F64);
        let ln = LayerNorm::new(&vb, 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 8.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in y {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_and_gelu_values() {
        let x = Tensor::new(&[[0.0f64, 0.0, 0.0], [1000.0, 0.0, -1000.0]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((p[0][1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[1][0] - 1.0).abs() < 1e-12);
        let lp = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((lp[0][0] + 3f64.ln()).abs() < 1e-12);
        let g = gelu(&Tensor::new(&[0.0f64, 1.0, -1.0], &Device::Cpu).unwrap()).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 0.841192).abs() < 1e-5);
    }

    #[test]
    fn attention_mask_blocks_padding() {
        let vb = VarBuilder::new(1, DType::F64);
        let attn = Attention::new(&vb, 8, 2).unwrap();
        let x = Tensor::randn(0.0f64, 1.0, (1, 3, 8), &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[0.0f64, 0.0, -1e9]], &Device::Cpu).unwrap();
        let y1 = attn.forward(&x, Some(&mask)).unwrap();
        // changing the masked token leaves the others untouched
        let x2 = Tensor::cat(&[x.narrow(1, 0, 2).unwrap(), (x.narrow(1, 2, 1).unwrap() * 5.0).unwrap()], 1).unwrap();
        let y2 = attn.forward(&x2, Some(&mask)).unwrap();
        let d = (y1.narrow(1, 0, 2).unwrap() - y2.narrow(1, 0, 2).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&d).unwrap() < 1e-12);
    }
}
