//! Downstream evaluation over frozen embeddings: linear probe, matching hit rate,
//! ranking AUC and the anchor distance analysis.
//!
//! Embedding stores are matrices whose row `i` belongs to song id `i`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HtclError, Result};
use crate::scalar::Scalar;
use crate::synth::{MatchingUser, RankingRow};

fn to_f64<T: Scalar>(e: ArrayView2<T>) -> Array2<f64> {
    e.mapv(|v| v.as_f64())
}

fn check_id(store_rows: usize, id: usize) -> Result<()> {
    if id >= store_rows {
        return Err(HtclError::Data(format!("song {id} has no embedding")));
    }
    Ok(())
}

/// Full-batch Adam for the small convex models below.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Number of classes; labels must lie below it.
    pub classes: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            lr: 0.05,
            steps: 300,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

/// Trains one affine layer with softmax cross-entropy on a seeded split and
/// returns top-1 accuracy on the held-out part.
pub fn linear_probe<T: Scalar>(embeddings: ArrayView2<T>, labels: &[usize], cfg: &ProbeConfig) -> Result<f64> {
    if cfg.classes < 2 {
        return Err(HtclError::config("probe.classes", "must be at least 2"));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(HtclError::config("probe.train_fraction", "must lie in (0, 1)"));
    }
    if embeddings.nrows() != labels.len() {
        return Err(HtclError::Data(format!(
            "{} embeddings for {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(HtclError::Data(format!("label {bad} is outside {} classes", cfg.classes)));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(HtclError::Data("probe labels contain a single class".into()));
    }
    let x = to_f64(embeddings);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = ((labels.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, labels.len() - 1);
    let (train, test) = order.split_at(n_train);

    let (d, k) = (x.ncols(), cfg.classes);
    let xt = x.select(Axis(0), train);
    let mut onehot = Array2::<f64>::zeros((train.len(), k));
    for (r, &i) in train.iter().enumerate() {
        onehot[[r, labels[i]]] = 1.0;
    }
    // weights (d x k) followed by bias (k), flattened for the optimiser
    let mut params = vec![0.0; d * k + k];
    let mut opt = Adam::new(params.len(), cfg.lr);
    let n = train.len() as f64;
    for _ in 0..cfg.steps {
        let w = Array2::from_shape_vec((d, k), params[..d * k].to_vec()).expect("sized");
        let b = Array1::from(params[d * k..].to_vec());
        let mut p = xt.dot(&w) + &b;
        softmax_rows(&mut p);
        let dl = (p - &onehot) / n;
        let gw = xt.t().dot(&dl);
        let gb = dl.sum_axis(Axis(0));
        let grad: Vec<f64> = gw.iter().chain(gb.iter()).copied().collect();
        opt.step(&mut params, &grad);
    }
    let w = Array2::from_shape_vec((d, k), params[..d * k].to_vec()).expect("sized");
    let b = Array1::from(params[d * k..].to_vec());
    let scores = x.select(Axis(0), test).dot(&w) + &b;
    let correct = scores
        .outer_iter()
        .zip(test)
        .filter(|(row, &i)| argmax(row.iter().copied()) == labels[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Fraction of rows whose own partner is the single most similar column.
pub fn retrieval_top1<T: Scalar>(queries: ArrayView2<T>, keys: ArrayView2<T>) -> Result<f64> {
    if queries.dim() != keys.dim() || queries.nrows() == 0 {
        return Err(HtclError::Data("retrieval needs two equally shaped non-empty batches".into()));
    }
    let sim = to_f64(queries).dot(&to_f64(keys).t());
    let hits = sim
        .outer_iter()
        .enumerate()
        .filter(|(i, row)| row.iter().enumerate().all(|(j, &v)| j == *i || v < row[*i]))
        .count();
    Ok(hits as f64 / queries.nrows() as f64)
}

/// Mean of [`retrieval_top1`] over consecutive full batches of `batch` rows.
pub fn batched_retrieval_top1<T: Scalar>(queries: ArrayView2<T>, keys: ArrayView2<T>, batch: usize) -> Result<f64> {
    let n = queries.nrows() / batch.max(1);
    if n == 0 || queries.dim() != keys.dim() {
        return Err(HtclError::Data(format!(
            "need at least one batch of {batch} aligned rows, have {}",
            queries.nrows()
        )));
    }
    let mut sum = 0.0;
    for b in 0..n {
        let rows = s![b * batch..(b + 1) * batch, ..];
        sum += retrieval_top1(queries.slice(rows), keys.slice(rows))?;
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingTask {
    pub users: Vec<MatchingUser>,
    pub candidates: Vec<usize>,
    pub k_retrieve: usize,
    pub cutoff: usize,
}

impl MatchingTask {
    pub fn new(users: Vec<MatchingUser>, candidates: Vec<usize>) -> Self {
        Self {
            users,
            candidates,
            k_retrieve: 10,
            cutoff: 100,
        }
    }
}

/// Descending score, then ascending id.
fn by_score(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Fraction of users whose target lands in the union of per-trigger top-K lists,
/// truncated to the `cutoff` best-scoring candidates.
pub fn hr_at_k<T: Scalar>(task: &MatchingTask, store: ArrayView2<T>) -> Result<f64> {
    if task.users.is_empty() || task.candidates.is_empty() {
        return Err(HtclError::Data("matching task has no users or no candidates".into()));
    }
    if task.k_retrieve == 0 || task.cutoff == 0 {
        return Err(HtclError::config("eval.cutoff", "k_retrieve and cutoff must be positive"));
    }
    let rows = store.nrows();
    for &c in &task.candidates {
        check_id(rows, c)?;
    }
    let e = to_f64(store);
    let cand = e.select(Axis(0), &task.candidates);
    let mut hits = 0usize;
    for user in &task.users {
        check_id(rows, user.target)?;
        for &t in &user.triggers {
            check_id(rows, t)?;
        }
        let trig = e.select(Axis(0), &user.triggers);
        let sims = trig.dot(&cand.t());
        let mut union: HashMap<usize, f64> = HashMap::new();
        for (ti, row) in sims.outer_iter().enumerate() {
            let me = user.triggers[ti];
            let mut scored: Vec<(f64, usize)> = row
                .iter()
                .zip(&task.candidates)
                .filter(|(_, &id)| id != me)
                .map(|(&s, &id)| (s, id))
                .collect();
            let k = task.k_retrieve.min(scored.len());
            if k == 0 {
                continue;
            }
            if k < scored.len() {
                scored.select_nth_unstable_by(k - 1, by_score);
            }
            for &(s, id) in &scored[..k] {
                let e = union.entry(id).or_insert(f64::NEG_INFINITY);
                *e = e.max(s);
            }
        }
        let mut merged: Vec<(f64, usize)> = union.into_iter().map(|(id, s)| (s, id)).collect();
        merged.sort_by(by_score);
        merged.truncate(task.cutoff);
        if merged.iter().any(|&(_, id)| id == user.target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / task.users.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties counting half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(HtclError::Data("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(HtclError::Data("AUC needs both positive and negative labels".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(HtclError::Numeric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tied groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    pub lr: f64,
    pub steps: usize,
    pub l2: f64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            steps: 300,
            l2: 1e-4,
        }
    }
}

fn ranking_features(rows: &[&RankingRow], e: &Array2<f64>) -> Result<Array2<f64>> {
    let d = e.ncols();
    let mut x = Array2::zeros((rows.len(), 2 * d + 1));
    for (r, row) in rows.iter().enumerate() {
        check_id(e.nrows(), row.candidate)?;
        if row.history.is_empty() {
            return Err(HtclError::Data(format!("user {} has an empty history", row.user)));
        }
        let mut mean = Array1::<f64>::zeros(d);
        for &h in &row.history {
            check_id(e.nrows(), h)?;
            mean += &e.row(h);
        }
        mean /= row.history.len() as f64;
        let c = e.row(row.candidate);
        x.slice_mut(s![r, ..d]).assign(&mean);
        x.slice_mut(s![r, d..2 * d]).assign(&c);
        x[[r, 2 * d]] = mean.dot(&c);
    }
    Ok(x)
}

/// Logistic regression, returning weights followed by the bias.
fn fit_logistic(x: &Array2<f64>, y: &[bool], cfg: &RankerConfig) -> Vec<f64> {
    let d = x.ncols();
    let mut params = vec![0.0; d + 1];
    let mut opt = Adam::new(d + 1, cfg.lr);
    let yv = Array1::from_iter(y.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    let n = y.len() as f64;
    for _ in 0..cfg.steps {
        let w = Array1::from(params[..d].to_vec());
        let z = x.dot(&w) + params[d];
        let p = z.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let r = (p - &yv) / n;
        let mut grad: Vec<f64> = x.t().dot(&r).to_vec();
        for (g, w) in grad.iter_mut().zip(&params[..d]) {
            *g += cfg.l2 * w;
        }
        grad.push(r.sum());
        opt.step(&mut params, &grad);
    }
    params
}

/// Trains click and favour rankers on all days before the last and reports
/// `(ctr_auc, cvr_auc)` on the last day.
pub fn ranking_auc<T: Scalar>(rows: &[RankingRow], store: ArrayView2<T>, cfg: &RankerConfig) -> Result<(f64, f64)> {
    let last = rows
        .iter()
        .map(|r| r.day)
        .max()
        .ok_or_else(|| HtclError::Data("ranking dataset is empty".into()))?;
    let train: Vec<&RankingRow> = rows.iter().filter(|r| r.day < last).collect();
    let test: Vec<&RankingRow> = rows.iter().filter(|r| r.day == last).collect();
    if train.is_empty() {
        return Err(HtclError::Data("ranking dataset has a single day; nothing to train on".into()));
    }
    let e = to_f64(store);
    let xtr = ranking_features(&train, &e)?;
    let xte = ranking_features(&test, &e)?;
    let mut out = [0.0; 2];
    for (slot, label) in [|r: &RankingRow| r.click, |r: &RankingRow| r.favor].iter().enumerate() {
        let ytr: Vec<bool> = train.iter().map(|r| label(r)).collect();
        let yte: Vec<bool> = test.iter().map(|r| label(r)).collect();
        if yte.iter().all(|&l| l) || yte.iter().all(|&l| !l) {
            let which = if slot == 0 { "click" } else { "favor" };
            return Err(HtclError::Data(format!("evaluation day has only one {which} label")));
        }
        let p = fit_logistic(&xtr, &ytr, cfg);
        let d = xte.ncols();
        let scores = xte.dot(&Array1::from(p[..d].to_vec())) + p[d];
        out[slot] = auc(scores.as_slice().expect("contiguous"), &yte)?;
    }
    Ok((out[0], out[1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub bin_centers: Vec<f64>,
    pub positive_counts: Vec<usize>,
    pub negative_counts: Vec<usize>,
    pub mean_positive: f64,
    pub mean_negative: f64,
    pub mean_gap: f64,
    pub separation_auc: f64,
}

/// Cosine scores of anchor/positive and anchor/negative pairs on `bins` equal bins over [-1, 1].
pub fn distance_distribution<T: Scalar>(
    positive: &[(usize, usize)],
    negative: &[(usize, usize)],
    store: ArrayView2<T>,
    bins: usize,
) -> Result<SeparationReport> {
    if positive.is_empty() || negative.is_empty() {
        return Err(HtclError::Data("distance analysis needs positive and negative pairs".into()));
    }
    if bins < 2 {
        return Err(HtclError::config("analysis.bins", "must be at least 2"));
    }
    let e = to_f64(store);
    let cos = |&(a, b): &(usize, usize)| -> Result<f64> {
        check_id(e.nrows(), a)?;
        check_id(e.nrows(), b)?;
        let (x, y) = (e.row(a), e.row(b));
        let den = (x.dot(&x) * y.dot(&y)).sqrt();
        if den == 0.0 {
            return Err(HtclError::Numeric(format!("zero embedding in pair ({a}, {b})")));
        }
        Ok(x.dot(&y) / den)
    };
    let pos: Vec<f64> = positive.iter().map(cos).collect::<Result<_>>()?;
    let neg: Vec<f64> = negative.iter().map(cos).collect::<Result<_>>()?;
    Ok(separation_from_scores(&pos, &neg, bins))
}

/// Same report from precomputed scores.
pub fn separation_from_scores(pos: &[f64], neg: &[f64], bins: usize) -> SeparationReport {
    let width = 2.0 / bins as f64;
    let hist = |v: &[f64]| {
        let mut c = vec![0usize; bins];
        for &x in v {
            let i = (((x + 1.0) / width).floor().max(0.0) as usize).min(bins - 1);
            c[i] += 1;
        }
        c
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let scores: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let labels: Vec<bool> = (0..scores.len()).map(|i| i < pos.len()).collect();
    let (mp, mn) = (mean(pos), mean(neg));
    SeparationReport {
        bin_centers: (0..bins).map(|i| -1.0 + width * (i as f64 + 0.5)).collect(),
        positive_counts: hist(pos),
        negative_counts: hist(neg),
        mean_positive: mp,
        mean_negative: mn,
        mean_gap: mp - mn,
        separation_auc: auc(&scores, &labels).expect("both classes present"),
    }
}

impl SeparationReport {
    /// Writes `{stem}_positive.csv` and `{stem}_negative.csv` with `bin_center,count` rows.
    pub fn write_histograms(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (kind, counts) in [("positive", &self.positive_counts), ("negative", &self.negative_counts)] {
            let mut s = String::from("bin_center,count\n");
            for (c, n) in self.bin_centers.iter().zip(counts) {
                s.push_str(&format!("{c:.4},{n}\n"));
            }
            fs::write(dir.join(format!("{stem}_{kind}.csv")), s)?;
        }
        Ok(())
    }
}

/// Named scalar metrics with run metadata, stored as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metadata: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_unit(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        for mut r in m.outer_iter_mut() {
            let norm = r.dot(&r).sqrt();
            r /= norm;
        }
        m
    }

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_hand_instances() {
        let l = [true, false, false];
        assert_eq!(auc(&[0.9, 0.8, 0.3], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.3, 0.8, 0.9], &l).unwrap(), 0.0);
        assert_eq!(auc(&[1.0, 0.0, 0.0, 1.0], &[true, false, false, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn probe_separable_and_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = random_unit(&mut rng, 1, 8);
        let mut e = Array2::zeros((200, 8));
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        for i in 0..200 {
            let sign = if labels[i] == 0 { 1.0 } else { -1.0 };
            e.row_mut(i).assign(&(&base.row(0) * sign));
        }
        let cfg = ProbeConfig {
            classes: 2,
            ..ProbeConfig::default()
        };
        assert_eq!(linear_probe(e.view(), &labels, &cfg).unwrap(), 1.0);

        let e = random_unit(&mut rng, 2000, 16);
        let labels: Vec<usize> = (0..2000).map(|_| rng.gen_range(0..8)).collect();
        let acc = linear_probe(e.view(), &labels, &ProbeConfig::default()).unwrap();
        let sigma = (0.125f64 * 0.875 / 400.0).sqrt();
        assert!((acc - 0.125).abs() < 3.0 * sigma, "{acc}");
    }

    #[test]
    fn probe_rejects_single_class() {
        let e = Array2::<f32>::ones((10, 2));
        assert!(matches!(
            linear_probe(e.view(), &[3; 10], &ProbeConfig::default()),
            Err(HtclError::Data(_))
        ));
    }

    #[test]
    fn hr_self_similarity_and_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut e = random_unit(&mut rng, 50, 8);
        let t = e.row(7).to_owned();
        e.row_mut(40).assign(&t);
        let user = MatchingUser {
            triggers: vec![7],
            target: 40,
        };
        let task = MatchingTask::new(vec![user.clone()], (0..50).collect());
        assert_eq!(hr_at_k(&task, e.view()).unwrap(), 1.0);

        let user = MatchingUser {
            triggers: vec![3],
            target: 29,
        };
        let task = MatchingTask {
            k_retrieve: 50,
            cutoff: 50,
            ..MatchingTask::new(vec![user], (0..50).collect())
        };
        assert_eq!(hr_at_k(&task, e.view()).unwrap(), 1.0);
    }

    #[test]
    fn hr_missing_embedding_names_id() {
        let e = Array2::<f64>::eye(4);
        let task = MatchingTask::new(
            vec![MatchingUser {
                triggers: vec![0],
                target: 9,
            }],
            (0..4).collect(),
        );
        assert!(hr_at_k(&task, e.view()).unwrap_err().to_string().contains("song 9"));
    }

    #[test]
    fn hr_random_embeddings_near_cutoff_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, users) = (2000, 400);
        let e = random_unit(&mut rng, n, 16);
        let rows: Vec<MatchingUser> = (0..users)
            .map(|_| {
                let mut ids = rand::seq::index::sample(&mut rng, n, 31).into_vec();
                let target = ids.pop().unwrap();
                MatchingUser { triggers: ids, target }
            })
            .collect();
        let hr = hr_at_k(&MatchingTask::new(rows, (0..n).collect()), e.view()).unwrap();
        let p = 100.0 / n as f64;
        let sigma = (p * (1.0 - p) / users as f64).sqrt();
        assert!((hr - p).abs() < 3.0 * sigma, "{hr}");
    }

    #[test]
    fn separation_hand_instance() {
        let r = separation_from_scores(&[0.9; 5], &[0.1; 7], 20);
        assert!((r.mean_gap - 0.8).abs() < 1e-12);
        assert_eq!(r.separation_auc, 1.0);
        assert_eq!(r.positive_counts.iter().sum::<usize>(), 5);
        assert_eq!(r.negative_counts.iter().sum::<usize>(), 7);
        let edge = separation_from_scores(&[1.0, -1.0], &[0.0], 4);
        assert_eq!(edge.positive_counts, vec![1, 0, 0, 1]);
    }

    #[test]
    fn separation_same_distribution_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pos: Vec<f64> = (0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = (0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = separation_from_scores(&pos, &neg, 10);
        assert!((r.separation_auc - 0.5).abs() < 0.03);
    }

    #[test]
    fn distance_distribution_uses_cosine() {
        let e = array![[1.0, 0.0], [0.0, 2.0], [3.0, 0.0], [-1.0, 0.0]];
        let r = distance_distribution(&[(0, 2)], &[(0, 1), (0, 3)], e.view(), 4).unwrap();
        assert!((r.mean_positive - 1.0).abs() < 1e-12);
        assert!((r.mean_negative + 0.5).abs() < 1e-12);
        assert!(distance_distribution::<f64>(&[], &[(0, 1)], e.view(), 4).is_err());
    }

    #[test]
    fn ranking_auc_errors_on_constant_labels() {
        let e = Array2::<f64>::eye(3);
        let rows: Vec<RankingRow> = (0..2)
            .map(|day| RankingRow {
                user: 0,
                day,
                history: vec![0],
                candidate: 1,
                click: true,
                favor: false,
            })
            .collect();
        assert!(matches!(
            ranking_auc(&rows, e.view(), &RankerConfig::default()),
            Err(HtclError::Data(_))
        ));
    }

    #[test]
    fn retrieval_top1_identity() {
        let e = Array2::<f64>::eye(5);
        assert_eq!(retrieval_top1(e.view(), e.view()).unwrap(), 1.0);
        let shifted = e.select(Axis(0), &[1, 2, 3, 4, 0]);
        assert_eq!(retrieval_top1(e.view(), shifted.view()).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let fast = auc(&scores, &labels).unwrap();
            prop_assert!((fast - brute_auc(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&fast));
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            data in proptest::collection::vec((-3.0f64..3.0, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + s).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
            let pos: Vec<f64> = scores.iter().zip(&labels).filter(|p| *p.1).map(|p| *p.0).collect();
            let neg: Vec<f64> = scores.iter().zip(&labels).filter(|p| !*p.1).map(|p| *p.0).collect();
            let wp: Vec<f64> = pos.iter().map(|s| s.tanh()).collect();
            let wn: Vec<f64> = neg.iter().map(|s| s.tanh()).collect();
            prop_assert_eq!(
                separation_from_scores(&pos, &neg, 8).separation_auc,
                separation_from_scores(&wp, &wn, 8).separation_auc
            );
        }

        #[test]
        fn hr_invariant_under_rotation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d) = (120, 6);
            let e = random_unit(&mut rng, n, d);
            // random orthogonal matrix from Gram-Schmidt
            let mut q = Array2::<f64>::zeros((d, d));
            for i in 0..d {
                let mut v: Array1<f64> = Array1::from_shape_fn(d, |_| rng.sample(StandardNormal));
                for j in 0..i {
                    let qj = q.row(j).to_owned();
                    v = &v - &(&qj * v.dot(&qj));
                }
                let norm = v.dot(&v).sqrt();
                q.row_mut(i).assign(&(v / norm));
            }
            let rotated = e.dot(&q);
            let users: Vec<MatchingUser> = (0..10)
                .map(|_| {
                    let mut ids = rand::seq::index::sample(&mut rng, n, 8).into_vec();
                    let target = ids.pop().unwrap();
                    MatchingUser { triggers: ids, target }
                })
                .collect();
            let task = MatchingTask { k_retrieve: 3, cutoff: 12, ..MatchingTask::new(users, (0..n).collect()) };
            prop_assert_eq!(hr_at_k(&task, e.view()).unwrap(), hr_at_k(&task, rotated.view()).unwrap());
        }
    }
}
