//! Contrastive objectives: directional InfoNCE, the symmetric audio/text loss,
//! the fusion layer and the preference fine-tuning loss family.
//!
//! All losses use in-batch negatives: row `i` of the query batch is paired with
//! row `i` of the key batch and every other key row acts as a negative.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Temperature, Var};
use crate::encoders::Embedding;
use crate::error::{HtclError, Result};
use crate::nn::{gelu, gelu_derivative, init_linear, Binder, ParamStore};
use crate::scalar::Scalar;

pub const A_TO_T: &str = "a->t";
pub const T_TO_A: &str = "t->a";
pub const AA: &str = "a,a";
pub const AF: &str = "a,f";
pub const AT: &str = "a,t";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    /// Learn log(temperature) jointly with the encoders.
    pub learnable_temperature: bool,
    pub w_aa: f64,
    pub w_af: f64,
    pub w_at: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            learnable_temperature: false,
            w_aa: 1.0,
            w_af: 1.0,
            w_at: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(HtclError::config("loss.temperature", "must be positive"));
        }
        for (name, w) in [("loss.w_aa", self.w_aa), ("loss.w_af", self.w_af), ("loss.w_at", self.w_at)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(HtclError::config(name, "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Total loss plus its named components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub total: T,
    pub components: BTreeMap<String, T>,
}

impl<T: Scalar> LossReport<T> {
    pub fn component(&self, name: &str) -> Option<T> {
        self.components.get(name).copied()
    }
}

fn check_operands<T: Scalar>(query: ArrayView2<T>, key: ArrayView2<T>, tau: T) -> Result<()> {
    if query.dim() != key.dim() {
        return Err(HtclError::Input(format!(
            "query {:?} and key {:?} shapes differ",
            query.dim(),
            key.dim()
        )));
    }
    if query.nrows() == 0 {
        return Err(HtclError::Input("empty batch".into()));
    }
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(HtclError::Input(format!("temperature must be positive, got {tau}")));
    }
    if query.iter().chain(key.iter()).any(|v| !v.is_finite()) {
        return Err(HtclError::Input("non-finite embedding entry".into()));
    }
    Ok(())
}

/// Row-wise log-softmax pieces of `query · keyᵀ / tau`: returns the logits and per-row log-sum-exp.
fn logits_and_lse<T: Scalar>(query: ArrayView2<T>, key: ArrayView2<T>, tau: T) -> (Array2<T>, Array1<T>) {
    let logits = query.dot(&key.t()) / tau;
    let lse = logits
        .outer_iter()
        .map(|row| {
            let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
            max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
        })
        .collect();
    (logits, lse)
}

/// `-(1/B) Σ_i log softmax_j(q_i·k_j/τ)[i]`, with max-subtraction for stability.
///
/// Rows are expected to be unit-norm, but this is not enforced so that the
/// function stays differentiable off the sphere.
pub fn info_nce_directional<T: Scalar>(query: ArrayView2<T>, key: ArrayView2<T>, tau: T) -> Result<T> {
    check_operands(query, key, tau)?;
    let (logits, lse) = logits_and_lse(query, key, tau);
    let b = T::from_usize_lossy(query.nrows());
    let sum = lse
        .iter()
        .enumerate()
        .map(|(i, &l)| l - logits[[i, i]])
        .sum::<T>();
    Ok(sum / b)
}

/// Loss value together with its gradients.
#[derive(Debug, Clone)]
pub struct DirectionalGrad<T> {
    pub loss: T,
    pub d_query: Array2<T>,
    pub d_key: Array2<T>,
    /// Derivative with respect to log(tau).
    pub d_log_tau: T,
}

pub fn info_nce_with_grad<T: Scalar>(
    query: ArrayView2<T>,
    key: ArrayView2<T>,
    tau: T,
) -> Result<DirectionalGrad<T>> {
    check_operands(query, key, tau)?;
    let (logits, lse) = logits_and_lse(query, key, tau);
    let n = query.nrows();
    let b = T::from_usize_lossy(n);
    let mut loss = T::zero();
    // dlogits[i, j] = (softmax_ij - δ_ij) / B
    let mut dlogits = Array2::zeros((n, n));
    let mut d_log_tau = T::zero();
    for i in 0..n {
        loss = loss + lse[i] - logits[[i, i]];
        let mut expected_logit = T::zero();
        for j in 0..n {
            let p = (logits[[i, j]] - lse[i]).exp();
            expected_logit += p * logits[[i, j]];
            let delta = if i == j { T::one() } else { T::zero() };
            dlogits[[i, j]] = (p - delta) / b;
        }
        // logits scale as 1/tau, so d logit / d log tau = -logit
        d_log_tau += (logits[[i, i]] - expected_logit) / b;
    }
    let d_query = dlogits.dot(&key) / tau;
    let d_key = dlogits.t().dot(&query) / tau;
    Ok(DirectionalGrad {
        loss: loss / b,
        d_query,
        d_key,
        d_log_tau,
    })
}

/// `L(a→t) + L(t→a)`.
pub fn symmetric_loss<T: Scalar>(za: ArrayView2<T>, zt: ArrayView2<T>, tau: T) -> Result<LossReport<T>> {
    let a2t = info_nce_directional(za, zt, tau)?;
    let t2a = info_nce_directional(zt, za, tau)?;
    Ok(LossReport {
        total: a2t + t2a,
        components: BTreeMap::from([(A_TO_T.to_string(), a2t), (T_TO_A.to_string(), t2a)]),
    })
}

/// Symmetric loss and gradients with respect to both inputs.
pub fn symmetric_loss_with_grad<T: Scalar>(
    za: ArrayView2<T>,
    zt: ArrayView2<T>,
    tau: T,
) -> Result<(T, Array2<T>, Array2<T>)> {
    let fwd = info_nce_with_grad(za, zt, tau)?;
    let bwd = info_nce_with_grad(zt, za, tau)?;
    Ok((fwd.loss + bwd.loss, fwd.d_query + &bwd.d_key, fwd.d_key + &bwd.d_query))
}

/// Two-layer MLP mapping a concatenated (audio, text) pair of embeddings to a fused embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T: Scalar> {
    /// 2D x hidden
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    /// hidden x D
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

pub const FUSION_L1: &str = "fusion.l1";
pub const FUSION_L2: &str = "fusion.l2";

impl<T: Scalar> FusionParams<T> {
    pub fn init<R: Rng>(embed_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        init_linear(&mut store, rng, FUSION_L1, 2 * embed_dim, hidden);
        init_linear(&mut store, rng, FUSION_L2, hidden, embed_dim);
        Self::from_store(&store).expect("freshly initialised")
    }

    pub fn zeros(embed_dim: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((2 * embed_dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, embed_dim)),
            b2: Array1::zeros(embed_dim),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn from_store(store: &ParamStore<T>) -> Result<Self> {
        let row = |name: &str| -> Result<Array1<T>> { Ok(store.get(name)?.row(0).to_owned()) };
        Ok(Self {
            w1: store.get(&format!("{FUSION_L1}.weight"))?.clone(),
            b1: row(&format!("{FUSION_L1}.bias"))?,
            w2: store.get(&format!("{FUSION_L2}.weight"))?.clone(),
            b2: row(&format!("{FUSION_L2}.bias"))?,
        })
    }

    pub fn to_store(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        store.insert(format!("{FUSION_L1}.weight"), self.w1.clone());
        store.insert(format!("{FUSION_L1}.bias"), self.b1.clone().insert_axis(Axis(0)));
        store.insert(format!("{FUSION_L2}.weight"), self.w2.clone());
        store.insert(format!("{FUSION_L2}.bias"), self.b2.clone().insert_axis(Axis(0)));
        store
    }

    fn check_dims(&self, za: ArrayView2<T>, zt: ArrayView2<T>) -> Result<()> {
        let d = self.embed_dim();
        if za.ncols() != d || zt.ncols() != d || za.nrows() != zt.nrows() || self.w1.nrows() != 2 * d {
            return Err(HtclError::Input(format!(
                "fusion expects two n x {d} inputs, got {:?} and {:?}",
                za.dim(),
                zt.dim()
            )));
        }
        Ok(())
    }

    /// Row-wise fused embeddings. Fails if any pre-normalisation output is the zero vector.
    pub fn forward_batch(&self, za: ArrayView2<T>, zt: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(self.forward_cached(za, zt)?.out)
    }

    fn forward_cached(&self, za: ArrayView2<T>, zt: ArrayView2<T>) -> Result<FusionCache<T>> {
        self.check_dims(za, zt)?;
        let d = self.embed_dim();
        let mut x = Array2::zeros((za.nrows(), 2 * d));
        x.slice_mut(s![.., ..d]).assign(&za);
        x.slice_mut(s![.., d..]).assign(&zt);
        let pre = x.dot(&self.w1) + &self.b1;
        let act = pre.mapv(gelu);
        let u = act.dot(&self.w2) + &self.b2;
        let mut norms = Array1::zeros(u.nrows());
        let mut out = u.clone();
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(HtclError::Numeric(format!(
                    "fusion output row {i} has norm {n} and cannot be normalised"
                )));
            }
            norms[i] = n;
            row.mapv_inplace(|v| v / n);
        }
        Ok(FusionCache {
            x,
            pre,
            act,
            norms,
            out,
        })
    }

    /// Backward pass: given d(loss)/d(out), returns gradients for the inputs and parameters.
    fn backward(&self, cache: &FusionCache<T>, d_out: &Array2<T>) -> (Array2<T>, Array2<T>, FusionParams<T>) {
        let mut du = d_out.clone();
        for ((mut drow, yrow), &n) in du
            .outer_iter_mut()
            .zip(cache.out.outer_iter())
            .zip(cache.norms.iter())
        {
            let proj = drow.dot(&yrow);
            Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = (*d - y * proj) / n);
        }
        let dw2 = cache.act.t().dot(&du);
        let db2 = du.sum_axis(Axis(0));
        let mut dpre = du.dot(&self.w2.t());
        Zip::from(&mut dpre)
            .and(&cache.pre)
            .for_each(|d, &p| *d *= gelu_derivative(p));
        let dw1 = cache.x.t().dot(&dpre);
        let db1 = dpre.sum_axis(Axis(0));
        let dx = dpre.dot(&self.w1.t());
        let d = self.embed_dim();
        (
            dx.slice(s![.., ..d]).to_owned(),
            dx.slice(s![.., d..]).to_owned(),
            FusionParams {
                w1: dw1,
                b1: db1,
                w2: dw2,
                b2: db2,
            },
        )
    }
}

struct FusionCache<T> {
    x: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
    norms: Array1<T>,
    out: Array2<T>,
}

/// Fused embedding of one song's audio and text embeddings.
pub fn fusion_forward<T: Scalar>(
    za: &Embedding<T>,
    zt: &Embedding<T>,
    params: &FusionParams<T>,
) -> Result<Embedding<T>> {
    let out = params.forward_batch(za.as_row(), zt.as_row())?;
    Embedding::new(out.row(0).to_owned())
}

/// Fusion layer recorded on a tape, using the `fusion.*` parameters bound by `binder`.
pub fn fusion_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    za: Var,
    zt: Var,
) -> Result<Var> {
    let x = tape.concat_cols(za, zt);
    let h = binder.linear(tape, x, FUSION_L1)?;
    let h = tape.gelu(h);
    let u = binder.linear(tape, h, FUSION_L2)?;
    Ok(tape.l2_normalize(u))
}

/// Which terms the fine-tuning objective includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage2Mode {
    /// `w_aa·L(a,a) + w_af·L(a,f) + w_at·L(a,t)`
    Full,
    /// `L(a,a)` only; no text-dependent term and no fusion.
    AudioOnly,
}

/// Fine-tuning loss over trigger audio, recommended audio and recommended text embeddings.
pub fn stage2_loss<T: Scalar>(
    za_trig: ArrayView2<T>,
    za_rec: ArrayView2<T>,
    zt_rec: ArrayView2<T>,
    fusion: &FusionParams<T>,
    cfg: &LossConfig,
    mode: Stage2Mode,
) -> Result<LossReport<T>> {
    Ok(stage2_loss_with_grad(za_trig, za_rec, zt_rec, fusion, cfg, mode)?.report)
}

/// Gradients of the fine-tuning loss with respect to all embeddings and the fusion parameters.
#[derive(Debug, Clone)]
pub struct Stage2Grad<T: Scalar> {
    pub report: LossReport<T>,
    pub d_za_trig: Array2<T>,
    pub d_za_rec: Array2<T>,
    pub d_zt_rec: Array2<T>,
    pub d_fusion: FusionParams<T>,
}

pub fn stage2_loss_with_grad<T: Scalar>(
    za_trig: ArrayView2<T>,
    za_rec: ArrayView2<T>,
    zt_rec: ArrayView2<T>,
    fusion: &FusionParams<T>,
    cfg: &LossConfig,
    mode: Stage2Mode,
) -> Result<Stage2Grad<T>> {
    cfg.validate()?;
    if za_trig.dim() != za_rec.dim() || za_rec.dim() != zt_rec.dim() {
        return Err(HtclError::Input(format!(
            "stage-2 inputs disagree in shape: {:?}, {:?}, {:?}",
            za_trig.dim(),
            za_rec.dim(),
            zt_rec.dim()
        )));
    }
    let tau = T::lit(cfg.temperature);
    let (l_aa, d_trig_aa, d_rec_aa) = symmetric_loss_with_grad(za_trig, za_rec, tau)?;
    let w_aa = T::lit(cfg.w_aa);
    let mut components = BTreeMap::from([(AA.to_string(), l_aa)]);
    let mut d_za_trig = d_trig_aa * w_aa;
    let mut d_za_rec = d_rec_aa * w_aa;
    let mut d_zt_rec = Array2::zeros(zt_rec.dim());
    let mut d_fusion = FusionParams::zeros(fusion.embed_dim(), fusion.hidden());
    let mut total = w_aa * l_aa;

    if mode == Stage2Mode::Full {
        let (w_af, w_at) = (T::lit(cfg.w_af), T::lit(cfg.w_at));
        let cache = fusion.forward_cached(za_rec, zt_rec)?;
        let (l_af, d_trig_af, d_fused) = symmetric_loss_with_grad(za_trig, cache.out.view(), tau)?;
        let (l_at, d_rec_at, d_text_at) = symmetric_loss_with_grad(za_rec, zt_rec, tau)?;
        let (d_rec_fuse, d_text_fuse, d_params) = fusion.backward(&cache, &(d_fused * w_af));
        d_za_trig = d_za_trig + d_trig_af * w_af;
        d_za_rec = d_za_rec + d_rec_fuse + d_rec_at * w_at;
        d_zt_rec = d_text_fuse + d_text_at * w_at;
        d_fusion = d_params;
        total = total + w_af * l_af + w_at * l_at;
        components.insert(AF.to_string(), l_af);
        components.insert(AT.to_string(), l_at);
    }

    Ok(Stage2Grad {
        report: LossReport { total, components },
        d_za_trig,
        d_za_rec,
        d_zt_rec,
        d_fusion,
    })
}

/// Symmetric InfoNCE recorded on a tape; returns `(total, a→b, b→a)` nodes.
pub fn symmetric_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
    temperature: Temperature<T>,
) -> (Var, Var, Var) {
    let ab = tape.info_nce(a, b, temperature);
    let ba = tape.info_nce(b, a, temperature);
    (tape.add(ab, ba), ab, ba)
}
