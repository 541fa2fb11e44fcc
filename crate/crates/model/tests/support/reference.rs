//! Plain-f64 reference objectives and finite-difference helpers.
#![allow(dead_code)]

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use linevlp_core::{CategoryId, Relation, Status, Taxonomy};
use linevlp_model::layers::scalar;
use linevlp_model::losses::*;
use linevlp_model::params::{ParamStore, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn tensor(m: &Mat) -> Tensor {
    let (n, d) = (m.len(), m[0].len());
    Tensor::from_vec(m.iter().flatten().copied().collect::<Vec<_>>(), (n, d), &Device::Cpu).unwrap()
}

pub fn random_mat(rng: &mut impl Rng, n: usize, d: usize, normalise: bool) -> Mat {
    (0..n)
        .map(|_| {
            let r: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if normalise {
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
                r.iter().map(|x| x / norm).collect()
            } else {
                r
            }
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn ce_row(logits: &[f64], target: usize) -> f64 {
    logsumexp(logits) - logits[target]
}

pub fn ref_itc(v: &Mat, l: &Mat, tau: f64) -> f64 {
    let n = v.len();
    let s: Mat = (0..n).map(|i| (0..n).map(|j| dot(&v[i], &l[j]) / tau).collect()).collect();
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..n {
        i2t += ce_row(&s[i], i);
        let col: Vec<f64> = (0..n).map(|j| s[j][i]).collect();
        t2i += ce_row(&col, i);
    }
    (i2t + t2i) / (2.0 * n as f64)
}

pub fn rule_relation(tax: &Taxonomy, a: CategoryId, b: CategoryId) -> Relation {
    let (ca, cb) = (&tax.categories()[a.0], &tax.categories()[b.0]);
    match (ca.component_type == cb.component_type, ca.status == cb.status) {
        (true, true) => Relation::Stss,
        (true, false) => Relation::Stds,
        (false, _) => Relation::Dt,
    }
}

pub struct RefHead {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl RefHead {
    pub fn from(head: &SrjHead) -> Self {
        let vec1 = |t: &Option<Tensor>| t.as_ref().unwrap().to_vec1::<f64>().unwrap();
        Self {
            w1: head.fc1.weight.to_vec2().unwrap(),
            b1: vec1(&head.fc1.bias),
            w2: head.fc2.weight.to_vec2().unwrap(),
            b2: vec1(&head.fc2.bias),
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let lin = |w: &Mat, b: &[f64], x: &[f64]| -> Vec<f64> {
            (0..b.len()).map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i][o]).sum::<f64>()).collect()
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let h: Vec<f64> = lin(&self.w1, &self.b1, x).into_iter().map(gelu).collect();
        lin(&self.w2, &self.b2, &h)
    }
}

pub fn ref_srj(v: &Mat, l: &Mat, pv: &[usize], pl: &[usize], cats: &[CategoryId], tax: &Taxonomy, head: &RefHead) -> f64 {
    let n = v.len();
    let sub = |a: &Mat, b: &Mat, p: &[usize]| -> f64 {
        (0..n)
            .map(|i| {
                let x: Vec<f64> = a[i].iter().chain(&b[p[i]]).copied().collect();
                ce_row(&head.logits(&x), rule_relation(tax, cats[i], cats[p[i]]) as usize)
            })
            .sum::<f64>()
            / n as f64
    };
    (sub(v, l, pl) + sub(l, v, pv) + sub(v, v, pv) + sub(l, l, pl)) / 4.0
}

pub fn ref_dnc(v: &Mat, cats: &[CategoryId], tax: &Taxonomy, scale: f64) -> f64 {
    let mut groups: Vec<(usize, f64)> = Vec::new();
    for ty in tax.component_types().iter().filter(|t| !t.is_external_interference) {
        let pick = |s: Status| -> Vec<&Vec<f64>> {
            (0..v.len())
                .filter(|&i| {
                    let c = &tax.categories()[cats[i].0];
                    c.component_type == ty.name && c.status == s
                })
                .map(|i| &v[i])
                .collect()
        };
        let (d, q) = (pick(Status::Defect), pick(Status::Normal));
        if d.is_empty() || q.is_empty() {
            continue;
        }
        let rows: Vec<(&Vec<f64>, bool)> = d.iter().map(|r| (*r, true)).chain(q.iter().map(|r| (*r, false))).collect();
        let mut bce = 0.0;
        for (a, da) in &rows {
            for (b, db) in &rows {
                let x = scale * dot(a, b);
                let p = 1.0 / (1.0 + (-x).exp());
                bce -= if da == db { p.ln() } else { (1.0 - p).ln() };
            }
        }
        groups.push((rows.len(), bce / (rows.len() * rows.len()) as f64));
    }
    let total: usize = groups.iter().map(|g| g.0).sum();
    groups.iter().map(|(m, l)| *m as f64 / total as f64 * l).sum()
}

pub fn random_cats(rng: &mut impl Rng, tax: &Taxonomy, n: usize) -> Vec<CategoryId> {
    (0..n).map(|_| CategoryId(rng.random_range(0..tax.len()))).collect()
}

pub fn head(seed: u64, d: usize) -> (SrjHead, linevlp_model::params::ParamStore) {
    let vb = VarBuilder::new(seed, DType::F64);
    let h = SrjHead::new(&vb.pp("srj"), d).unwrap();
    // non-zero biases so their gradients are exercised
    let store = vb.finish().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for (name, var) in store.iter() {
        if name.ends_with("bias") {
            let n = var.elem_count();
            let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            var.set(&Tensor::from_vec(vals, n, &Device::Cpu).unwrap()).unwrap();
        }
    }
    (h, store)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` with step 1e-5.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}


/// Worst relative error between analytic and central-difference gradients
/// for ITC, SRJ, DNC and the weighted total on one random batch, taken over
/// V, L and (for SRJ and the total) every SRJ-head parameter.
pub fn gradient_check(seed: u64) -> BTreeMap<&'static str, f64> {
    let tax = Taxonomy::desk();
    let mut worst = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let n = rng.random_range(3..=6);
    let d = 4;
    let v = random_mat(&mut rng, n, d, true);
    let l = random_mat(&mut rng, n, d, true);
    // keep at least one DNC-eligible pair
    let mut cats = random_cats(&mut rng, &tax, n);
    cats[0] = tax.id("grading_ring_damage").unwrap();
    cats[1] = tax.id("normal_grading_ring").unwrap();
    let pv = random_permutation(n, &mut rng);
    let pl = random_permutation(n, &mut rng);
    let (h, store) = head(seed, d);
    let itc_s = scalar_tensor(1.0 / 0.3, DType::F64).unwrap();
    let dnc_s = scalar_tensor(5.0, DType::F64).unwrap();
    let weights = LossWeights { lambda_itc: 0.7, lambda_srj: 1.3, lambda_dnc: 0.9 };

    let eval = |vt: &Tensor, lt: &Tensor| -> [Tensor; 4] {
        let vs = ShuffledBatch::with_perm(vt, pv.clone()).unwrap();
        let ls = ShuffledBatch::with_perm(lt, pl.clone()).unwrap();
        let itc = itc_loss_scaled(vt, lt, &itc_s).unwrap();
        let srj = srj_loss_with(vt, lt, &vs, &ls, &cats, &tax, &h).unwrap().loss;
        let dnc = dnc_loss(vt, &cats, &tax, &dnc_s).unwrap().loss;
        let total = (((&itc * weights.lambda_itc).unwrap() + (&srj * weights.lambda_srj).unwrap()).unwrap()
            + (&dnc * weights.lambda_dnc).unwrap())
        .unwrap();
        [itc, srj, dnc, total]
    };

    for (k, name) in ["itc", "srj", "dnc", "total"].into_iter().enumerate() {
        let vv = Var::from_tensor(&tensor(&v)).unwrap();
        let lv = Var::from_tensor(&tensor(&l)).unwrap();
        let loss = eval(vv.as_tensor(), lv.as_tensor())[k].clone();
        let grads = loss.backward().unwrap();
        let flat = |t: Option<&Tensor>, len: usize| -> Vec<f64> {
            t.map(|g| g.flatten_all().unwrap().to_vec1().unwrap()).unwrap_or(vec![0.0; len])
        };
        let vflat: Vec<f64> = v.iter().flatten().copied().collect();
        let lflat: Vec<f64> = l.iter().flatten().copied().collect();
        let to_mat = |x: &[f64]| -> Tensor { Tensor::from_vec(x.to_vec(), (n, d), &Device::Cpu).unwrap() };

        let gv = flat(grads.get(vv.as_tensor()), n * d);
        let nv = numeric_grad(&vflat, |x| scalar(&eval(&to_mat(x), &tensor(&l))[k]).unwrap());
        let gl = flat(grads.get(lv.as_tensor()), n * d);
        let nl = numeric_grad(&lflat, |x| scalar(&eval(&tensor(&v), &to_mat(x))[k]).unwrap());
        let mut e = rel_err(&gv, &nv).max(rel_err(&gl, &nl));

        if name == "srj" || name == "total" {
            e = e.max(param_grad_error(&store, &grads, || scalar(&eval(&tensor(&v), &tensor(&l))[k]).unwrap()));
        }
        worst.insert(name, e);
    }
    worst
}

fn param_grad_error(store: &ParamStore, grads: &candle_core::backprop::GradStore, mut f: impl FnMut() -> f64) -> f64 {
    let mut e = 0.0f64;
    for (_, var) in store.iter() {
        let shape = var.dims().to_vec();
        let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> =
            grads.get(var.as_tensor()).map(|g| g.flatten_all().unwrap().to_vec1().unwrap()).unwrap_or(vec![0.0; base.len()]);
        let numeric = numeric_grad(&base, |x| {
            var.set(&Tensor::from_vec(x.to_vec(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            f()
        });
        var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
        e = e.max(rel_err(&analytic, &numeric));
    }
    e
}
