//! Central finite differences in f64 against the analytic and tape gradients.

use std::collections::BTreeMap;

use htcl_core::contrastive::{info_nce_with_grad, stage2_loss, stage2_loss_with_grad, FusionParams, LossConfig, Stage2Mode};
use htcl_core::model::{FeatureSet, Model};
use htcl_core::train::{finetune_loss, pretrain_loss, Ablation, LossGrads};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_features, random_rows, tiny_model, N_MELS};

const H: f64 = 1e-6;
pub const B: usize = 4;
pub const D: usize = 8;

/// ||a - n|| / max(||a||, ||n||) over the checked entries.
///
/// Some gradients vanish identically (attention key biases cancel under the
/// softmax); there both sides are round-off, and any absolute gap above 1e-8 counts as total failure.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-7 {
        if norm(&diff) < 1e-8 {
            0.0
        } else {
            1.0
        }
    } else {
        norm(&diff) / scale
    }
}

fn central<F: FnMut(f64) -> f64>(mut f: F, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

fn with(m: &Array2<f64>, i: usize, j: usize, x: f64) -> Array2<f64> {
    let mut m = m.clone();
    m[[i, j]] = x;
    m
}

fn cells(rows: usize, cols: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..rows).flat_map(move |i| (0..cols).map(move |j| (i, j)))
}

/// Worst relative error per tensor, sampling at most `per_tensor` entries of each.
pub fn check_model<F>(model: &Model<f64>, analytic: &LossGrads<f64>, mut loss: F, per_tensor: usize) -> BTreeMap<String, f64>
where
    F: FnMut(&Model<f64>) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut out = BTreeMap::new();
    for (name, grad) in &analytic.grads {
        let n = grad.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut a = Vec::new();
        let mut num = Vec::new();
        let mut probe = model.clone();
        for &k in &picks {
            let (r, c) = (k / grad.ncols(), k % grad.ncols());
            a.push(grad[[r, c]]);
            let x0 = model.params.get(name).unwrap()[[r, c]];
            num.push(central(
                |x| {
                    probe.params.get_mut(name).unwrap()[[r, c]] = x;
                    loss(&probe)
                },
                x0,
            ));
            probe.params.get_mut(name).unwrap()[[r, c]] = x0;
        }
        out.insert(name.clone(), rel_err(&a, &num));
    }
    out
}

pub fn setup(learnable: bool) -> (Model<f64>, FeatureSet<f64>) {
    let mut cfg = tiny_model(D, N_MELS, 40);
    cfg.loss.learnable_temperature = learnable;
    cfg.loss.temperature = 0.3;
    (Model::init(cfg, 5).unwrap(), random_features(2 * B, 40, 17))
}

/// Stage-1 objective through both encoders.
pub fn stage1_model(learnable: bool) -> (LossGrads<f64>, BTreeMap<String, f64>) {
    let (model, feats) = setup(learnable);
    let songs: Vec<usize> = (0..B).collect();
    let g = pretrain_loss(&model, &feats, &songs).unwrap();
    let errs = check_model(&model, &g, |m| pretrain_loss(m, &feats, &songs).unwrap().total, 12);
    (g, errs)
}

/// Stage-2 objective through both encoders and the fusion layer.
pub fn stage2_model(ablation: Ablation) -> (LossGrads<f64>, BTreeMap<String, f64>) {
    let (model, feats) = setup(true);
    let pairs: Vec<(usize, usize)> = (0..B).map(|i| (i, B + i)).collect();
    let g = finetune_loss(&model, &feats, &pairs, ablation).unwrap();
    let errs = check_model(&model, &g, |m| finetune_loss(m, &feats, &pairs, ablation).unwrap().total, 12);
    (g, errs)
}

/// Closed-form InfoNCE gradients, including d/d log(tau).
pub fn info_nce_analytic(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_rows(&mut rng, B, D, true);
    let k = random_rows(&mut rng, B, D, true);
    let tau = rng.gen_range(0.05..1.0);
    let g = info_nce_with_grad(q.view(), k.view(), tau).unwrap();
    let f = |q: &Array2<f64>, k: &Array2<f64>, t: f64| info_nce_with_grad(q.view(), k.view(), t).unwrap().loss;
    let mut a = Vec::new();
    let mut n = Vec::new();
    for (i, j) in cells(B, D) {
        a.push(g.d_query[[i, j]]);
        n.push(central(|x| f(&with(&q, i, j, x), &k, tau), q[[i, j]]));
        a.push(g.d_key[[i, j]]);
        n.push(central(|x| f(&q, &with(&k, i, j, x), tau), k[[i, j]]));
    }
    let nt = central(|lt| f(&q, &k, lt.exp()), tau.ln());
    rel_err(&a, &n).max(rel_err(&[g.d_log_tau], &[nt]))
}

/// Closed-form stage-2 gradients w.r.t. all three embedding batches and the fusion weights.
pub fn stage2_analytic(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig {
        temperature: 0.2,
        w_aa: 1.0,
        w_af: 0.7,
        w_at: 1.3,
        ..LossConfig::default()
    };
    let trig = random_rows(&mut rng, B, D, true);
    let rec = random_rows(&mut rng, B, D, true);
    let text = random_rows(&mut rng, B, D, true);
    let fusion = FusionParams::<f64>::init(D, 6, &mut rng);
    let g = stage2_loss_with_grad(trig.view(), rec.view(), text.view(), &fusion, &cfg, Stage2Mode::Full).unwrap();
    let total = |t: &Array2<f64>, r: &Array2<f64>, x: &Array2<f64>, f: &FusionParams<f64>| {
        stage2_loss(t.view(), r.view(), x.view(), f, &cfg, Stage2Mode::Full).unwrap().total
    };

    let mut a = Vec::new();
    let mut n = Vec::new();
    for (i, j) in cells(B, D) {
        a.push(g.d_za_trig[[i, j]]);
        n.push(central(|x| total(&with(&trig, i, j, x), &rec, &text, &fusion), trig[[i, j]]));
        a.push(g.d_za_rec[[i, j]]);
        n.push(central(|x| total(&trig, &with(&rec, i, j, x), &text, &fusion), rec[[i, j]]));
        a.push(g.d_zt_rec[[i, j]]);
        n.push(central(|x| total(&trig, &rec, &with(&text, i, j, x), &fusion), text[[i, j]]));
    }
    let mut worst = rel_err(&a, &n);

    let mut store = fusion.to_store();
    for (name, grad) in g.d_fusion.to_store().iter() {
        let mut a = Vec::new();
        let mut n = Vec::new();
        for (r, c) in cells(grad.nrows(), grad.ncols()) {
            a.push(grad[[r, c]]);
            let x0 = store.get(name).unwrap()[[r, c]];
            n.push(central(
                |x| {
                    store.get_mut(name).unwrap()[[r, c]] = x;
                    total(&trig, &rec, &text, &FusionParams::from_store(&store).unwrap())
                },
                x0,
            ));
            store.get_mut(name).unwrap()[[r, c]] = x0;
        }
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}
