//! Subcommand implementations. Every command writes only below its output path.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, UNIX_EPOCH};

use htcl_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle};
use htcl_core::eval::{
    batched_retrieval_top1, distance_distribution, hr_at_k, linear_probe, ranking_auc, MatchingTask, MetricReport,
    ProbeConfig, SeparationReport,
};
use htcl_core::mel::{pad_or_truncate, read_mel_cache, write_mel_cache, MelFrontend, MelSpectrogram};
use htcl_core::model::{FeatureSet, Model};
use htcl_core::synth::{
    generate_corpus, generate_preference_data, read_manifest, read_pairs, read_text, read_waveform, ManifestEntry,
    PreferenceData,
};
use htcl_core::text::{serialize_metadata, Vocabulary};
use htcl_core::train::{finetune, pretrain, Ablation, LogRecord, TrainConfig, TrainState};
use htcl_core::{HtclError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const CACHE_ENV: &str = "HTCL_CACHE_DIR";
const PREFS_DIR: &str = "prefs";
const VOCAB_FILE: &str = "vocab.tsv";
const HOLDOUT_FILE: &str = "holdout.txt";
const CHECKPOINT_FILE: &str = "checkpoint.htcl";
const LOG_FILE: &str = "train_log.jsonl";
const PROGRESS_EVERY: usize = 50;

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

/// Record of one invocation, written before work starts and completed afterwards.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub seed: u64,
    pub artifact_hashes: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, config: &RunConfig, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed,
            artifact_hashes: BTreeMap::new(),
        }
    }

    fn input(mut self, name: &str, path: &Path) -> Result<Self> {
        let p = absolute(path);
        if p.is_file() {
            self.artifact_hashes.insert(p.display().to_string(), sha256_file(&p)?);
        }
        self.inputs.insert(name.to_string(), p);
        Ok(self)
    }

    fn output(mut self, name: &str, path: &Path) -> Self {
        self.outputs.insert(name.to_string(), absolute(path));
        self
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Adds hashes of the produced files and rewrites the manifest.
    fn finish(mut self, path: &Path) -> Result<()> {
        for p in self.outputs.values() {
            if p.is_file() {
                self.artifact_hashes.insert(p.display().to_string(), sha256_file(p)?);
            }
        }
        self.write(path)
    }
}

/// `gen-data`: corpus files, preference tables, vocabulary and held-out split.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let manifest_path = out.join("run_manifest.json");
    let manifest = RunManifest::new("gen-data", cfg, cfg.data.seed)
        .output("corpus", &out.join("manifest.tsv"))
        .output("preferences", &out.join(PREFS_DIR))
        .output("vocabulary", &out.join(VOCAB_FILE));
    manifest.write(&manifest_path)?;

    let corpus = generate_corpus(&cfg.data)?;
    let prefs = generate_preference_data(&corpus)?;
    corpus.write(out)?;
    prefs.write(&out.join(PREFS_DIR))?;
    let texts: Vec<String> = corpus.texts.iter().map(serialize_metadata).collect();
    Vocabulary::build(texts.iter().map(String::as_str), cfg.model.text_encoder.vocab_size)?.save(&out.join(VOCAB_FILE))?;
    let held: Vec<String> = corpus
        .holdout()
        .iter()
        .enumerate()
        .filter(|(_, &h)| h)
        .map(|(i, _)| i.to_string())
        .collect();
    fs::write(out.join(HOLDOUT_FILE), held.join("\n") + "\n")?;
    eprintln!(
        "generated {} songs, {} triplets, {} co-occurrence pairs, {} matching users, {} ranking rows",
        corpus.len(),
        prefs.triplets.len(),
        prefs.cooccurrence.len(),
        prefs.matching.len(),
        prefs.ranking.len()
    );
    manifest.finish(&manifest_path)
}

/// Featurised songs plus labels and split, loaded from a `gen-data` directory.
pub struct Dataset {
    pub features: FeatureSet<f32>,
    pub genres: Vec<usize>,
    pub languages: Vec<usize>,
    pub holdout: Vec<bool>,
}

impl Dataset {
    pub fn train_ids(&self) -> Vec<usize> {
        (0..self.holdout.len()).filter(|&i| !self.holdout[i]).collect()
    }

    pub fn held_ids(&self) -> Vec<usize> {
        (0..self.holdout.len()).filter(|&i| self.holdout[i]).collect()
    }

    pub fn all_ids(&self) -> Vec<usize> {
        (0..self.holdout.len()).collect()
    }
}

fn cache_key(cfg: &RunConfig, entry: &ManifestEntry) -> Result<String> {
    let meta = fs::metadata(&entry.waveform)?;
    let mtime = meta
        .modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&cfg.mel)?);
    h.update(absolute(&entry.waveform).display().to_string().as_bytes());
    h.update(meta.len().to_le_bytes());
    h.update(mtime.to_le_bytes());
    Ok(format!("{:x}", h.finalize()))
}

fn load_mel(cfg: &RunConfig, frontend: &MelFrontend<f32>, entry: &ManifestEntry, cache: Option<&Path>) -> Result<MelSpectrogram<f32>> {
    let cached = match cache {
        Some(dir) => Some(dir.join(format!("{}.mel", cache_key(cfg, entry)?))),
        None => None,
    };
    if let Some(p) = cached.as_ref().filter(|p| p.is_file()) {
        return read_mel_cache(p, &cfg.mel);
    }
    let (sr, samples) = read_waveform(&entry.waveform)?;
    if sr != cfg.mel.sample_rate {
        return Err(HtclError::Data(format!(
            "{} is sampled at {sr} Hz, mel.sample_rate is {}",
            entry.waveform.display(),
            cfg.mel.sample_rate
        )));
    }
    let mel = frontend.compute(&pad_or_truncate(&samples, &cfg.mel)?)?;
    if let Some(p) = cached {
        write_mel_cache(&p, &mel)?;
    }
    Ok(mel)
}

pub fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let entries = read_manifest(dir).map_err(|e| match e {
        HtclError::Io(io) => HtclError::Data(format!("cannot read {}: {io}", dir.join("manifest.tsv").display())),
        other => other,
    })?;
    if entries.is_empty() {
        return Err(HtclError::Data(format!("{} lists no songs", dir.display())));
    }
    if let Some((i, e)) = entries.iter().enumerate().find(|(i, e)| e.song_id != *i) {
        return Err(HtclError::Data(format!("manifest row {i} has song id {}; ids must be 0..n in order", e.song_id)));
    }
    let docs = entries.iter().map(|e| read_text(&e.text)).collect::<Result<Vec<_>>>()?;
    let texts: Vec<String> = docs.iter().map(serialize_metadata).collect();
    let vocab_path = dir.join(VOCAB_FILE);
    let vocab = if vocab_path.is_file() {
        Vocabulary::load(&vocab_path)?
    } else {
        Vocabulary::build(texts.iter().map(String::as_str), cfg.model.text_encoder.vocab_size)?
    };
    if vocab.len() > cfg.model.text_encoder.vocab_size {
        return Err(HtclError::config(
            "model.text_encoder.vocab_size",
            format!("vocabulary file has {} tokens", vocab.len()),
        ));
    }
    let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
    if let Some(c) = &cache {
        fs::create_dir_all(c)?;
    }
    let frontend = MelFrontend::new(&cfg.mel)?;
    let mels = entries
        .iter()
        .map(|e| load_mel(cfg, &frontend, e, cache.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let tokens = texts
        .iter()
        .map(|t| vocab.tokenize(t, cfg.model.text_encoder.max_text_len))
        .collect();
    let mut holdout = vec![false; entries.len()];
    if let Ok(text) = fs::read_to_string(dir.join(HOLDOUT_FILE)) {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let id: usize = line
                .trim()
                .parse()
                .map_err(|_| HtclError::Data(format!("bad held-out id `{line}`")))?;
            *holdout
                .get_mut(id)
                .ok_or_else(|| HtclError::Data(format!("held-out id {id} is not in the corpus")))? = true;
        }
    }
    Ok(Dataset {
        features: FeatureSet::new(mels, tokens)?,
        genres: entries.iter().map(|e| e.genre).collect(),
        languages: entries.iter().map(|e| e.language).collect(),
        holdout,
    })
}

fn write_log(path: &Path, history: &[LogRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in history {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Runs `step_fn` in chunks so progress can be reported; resuming is exact.
fn train_with_progress(
    state: &mut TrainState<f32>,
    cfg: &TrainConfig,
    label: &str,
    mut step_fn: impl FnMut(&mut TrainState<f32>, &TrainConfig) -> Result<()>,
) -> Result<()> {
    let started = Instant::now();
    while state.step < cfg.steps {
        let chunk = TrainConfig {
            steps: (state.step + PROGRESS_EVERY).min(cfg.steps),
            ..cfg.clone()
        };
        step_fn(state, &chunk)?;
        let h = &state.history;
        let recent = &h[h.len().saturating_sub(PROGRESS_EVERY)..];
        eprintln!(
            "{label} step {}/{} loss {:.4} ({:.0}s)",
            state.step,
            cfg.steps,
            recent.iter().map(|r| r.total).sum::<f64>() / recent.len().max(1) as f64,
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

/// `pretrain`: stage-1 training on every song outside the held-out split.
pub fn pretrain_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let manifest_path = out.join("run_manifest.json");
    let manifest = RunManifest::new("pretrain", cfg, cfg.pretrain.seed)
        .input("data", data)?
        .input("data_manifest", &data.join("manifest.tsv"))?
        .output("checkpoint", &out.join(CHECKPOINT_FILE))
        .output("log", &out.join(LOG_FILE));
    manifest.write(&manifest_path)?;

    let ds = load_dataset(cfg, data)?;
    let songs = ds.train_ids();
    let mut state = TrainState::new(Model::<f32>::init(cfg.model.clone(), cfg.pretrain.seed)?);
    train_with_progress(&mut state, &cfg.pretrain, "pretrain", |s, c| {
        pretrain(s, &ds.features, &songs, c)
    })?;
    save_checkpoint(&CheckpointBundle::from_state(&state, Some(&cfg.pretrain)), &out.join(CHECKPOINT_FILE))?;
    write_log(&out.join(LOG_FILE), &state.history)?;
    manifest.finish(&manifest_path)
}

fn load_state(cfg: &RunConfig, path: &Path) -> Result<TrainState<f32>> {
    if !path.is_file() {
        return Err(HtclError::config("checkpoint", format!("{} does not exist", path.display())));
    }
    load_checkpoint(path)?.into_state(Some(&cfg.model))
}

/// `finetune`: stage-2 training from a stage-1 checkpoint.
pub fn finetune_cmd(cfg: &RunConfig, data: &Path, init: &Path, out: &Path, ablation: Option<Ablation>) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut train = cfg.finetune.clone();
    if let Some(a) = ablation {
        train.ablation = a;
    }
    let mut resolved = cfg.clone();
    resolved.finetune = train.clone();
    let manifest_path = out.join("run_manifest.json");
    let manifest = RunManifest::new("finetune", &resolved, train.seed)
        .input("data", data)?
        .input("init", init)?
        .input("triplets", &data.join(PREFS_DIR).join("triplets.tsv"))?
        .output("checkpoint", &out.join(CHECKPOINT_FILE))
        .output("log", &out.join(LOG_FILE));
    manifest.write(&manifest_path)?;

    let state = load_state(cfg, init)?;
    let ds = load_dataset(cfg, data)?;
    let prefs = PreferenceData::read(&data.join(PREFS_DIR))?;
    let pairs: Vec<(usize, usize)> = match train.ablation {
        Ablation::CfPairs => prefs.cooccurrence,
        _ => prefs
            .triplets
            .iter()
            .filter(|t| t.rec_text_present || train.ablation == Ablation::NoText)
            .map(|t| (t.trig_song_id, t.rec_song_id))
            .collect(),
    };
    let mut state = state.restart();
    train_with_progress(&mut state, &train, "finetune", |s, c| finetune(s, &ds.features, &pairs, c))?;
    save_checkpoint(&CheckpointBundle::from_state(&state, Some(&train)), &out.join(CHECKPOINT_FILE))?;
    write_log(&out.join(LOG_FILE), &state.history)?;
    manifest.finish(&manifest_path)
}

/// Mean top-1 audio-to-text retrieval over consecutive held-out batches of `batch` songs.
fn held_out_retrieval(model: &Model<f32>, ds: &Dataset, batch: usize, chunk: usize) -> Result<Option<f64>> {
    let held = ds.held_ids();
    if held.len() < batch.max(1) {
        return Ok(None);
    }
    let za = model.embed_audio(&ds.features, &held, chunk)?;
    let zt = model.embed_text(&ds.features, &held, chunk)?;
    batched_retrieval_top1(za.view(), zt.view(), batch).map(Some)
}

/// `eval`: probe accuracies, matching hit rate and ranking AUCs for one checkpoint.
pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, data: &Path, report: &Path) -> Result<()> {
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let manifest_path = report.with_extension("manifest.json");
    let manifest = RunManifest::new("eval", cfg, cfg.eval.probe.seed)
        .input("checkpoint", checkpoint)?
        .input("data", data)?
        .input("matching", &data.join(PREFS_DIR).join("matching.tsv"))?
        .output("report", report);
    manifest.write(&manifest_path)?;

    let state = load_state(cfg, checkpoint)?;
    let ds = load_dataset(cfg, data)?;
    let prefs = PreferenceData::read(&data.join(PREFS_DIR))?;
    let model = &state.model;
    let all = ds.all_ids();
    let z = model.embed_audio(&ds.features, &all, cfg.eval.embed_batch)?;

    let mut metrics = BTreeMap::new();
    let genres = cfg.data.genres.max(ds.genres.iter().max().map_or(0, |g| g + 1));
    let probe = |classes: usize| ProbeConfig {
        classes,
        ..cfg.eval.probe.clone()
    };
    metrics.insert("acc_genre".to_string(), linear_probe(z.view(), &ds.genres, &probe(genres))?);
    let languages = cfg.data.languages.max(ds.languages.iter().max().map_or(0, |l| l + 1));
    metrics.insert("acc_language".to_string(), linear_probe(z.view(), &ds.languages, &probe(languages))?);
    let task = MatchingTask {
        k_retrieve: cfg.eval.k_retrieve,
        cutoff: cfg.eval.cutoff,
        ..MatchingTask::new(prefs.matching, all)
    };
    metrics.insert(format!("hr_at_{}", cfg.eval.cutoff), hr_at_k(&task, z.view())?);
    let (ctr, cvr) = ranking_auc(&prefs.ranking, z.view(), &cfg.eval.ranker)?;
    metrics.insert("ctr_auc".to_string(), ctr);
    metrics.insert("cvr_auc".to_string(), cvr);
    if let Some(r) = held_out_retrieval(model, &ds, cfg.pretrain.batch_size, cfg.eval.embed_batch)? {
        metrics.insert("retrieval_top1".to_string(), r);
    }
    let metadata = BTreeMap::from([
        ("checkpoint".to_string(), absolute(checkpoint).display().to_string()),
        ("data".to_string(), absolute(data).display().to_string()),
        ("step".to_string(), state.step.to_string()),
        ("songs".to_string(), ds.holdout.len().to_string()),
    ]);
    let r = MetricReport { metadata, metrics };
    r.write(report)?;
    for (k, v) in &r.metrics {
        println!("{k}\t{v:.4}");
    }
    manifest.finish(&manifest_path)
}

#[derive(Debug, Serialize)]
struct AnalysisSummary {
    checkpoint: SeparationReport,
    baseline: Option<SeparationReport>,
    delta_separation_auc: Option<f64>,
    delta_mean_gap: Option<f64>,
}

fn separation(cfg: &RunConfig, ckpt: &Path, ds: &Dataset, pos: &[(usize, usize)], neg: &[(usize, usize)]) -> Result<SeparationReport> {
    let state = load_state(cfg, ckpt)?;
    let z = state.model.embed_audio(&ds.features, &ds.all_ids(), cfg.eval.embed_batch)?;
    distance_distribution(pos, neg, z.view(), cfg.eval.bins)
}

/// `analyze`: distance distribution of anchor pairs, optionally against a baseline checkpoint.
pub fn analyze_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    baseline: Option<&Path>,
    pairs: &Path,
    data: &Path,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let manifest_path = out.join("run_manifest.json");
    let mut manifest = RunManifest::new("analyze", cfg, cfg.eval.probe.seed)
        .input("checkpoint", checkpoint)?
        .input("positive_pairs", &pairs.join("analysis_positive.tsv"))?
        .input("negative_pairs", &pairs.join("analysis_negative.tsv"))?
        .input("data", data)?
        .output("summary", &out.join("separation.json"));
    if let Some(b) = baseline {
        manifest = manifest.input("baseline", b)?;
    }
    manifest.write(&manifest_path)?;

    let pos = read_pairs(&pairs.join("analysis_positive.tsv"))?;
    let neg = read_pairs(&pairs.join("analysis_negative.tsv"))?;
    let ds = load_dataset(cfg, data)?;
    let main = separation(cfg, checkpoint, &ds, &pos, &neg)?;
    main.write_histograms(out, "checkpoint")?;
    let base = match baseline {
        Some(b) => {
            let r = separation(cfg, b, &ds, &pos, &neg)?;
            r.write_histograms(out, "baseline")?;
            Some(r)
        }
        None => None,
    };
    println!("separation_auc\t{:.4}\nmean_gap\t{:.4}", main.separation_auc, main.mean_gap);
    if let Some(b) = &base {
        println!(
            "baseline_separation_auc\t{:.4}\ndelta_separation_auc\t{:+.4}",
            b.separation_auc,
            main.separation_auc - b.separation_auc
        );
    }
    let summary = AnalysisSummary {
        delta_separation_auc: base.as_ref().map(|b| main.separation_auc - b.separation_auc),
        delta_mean_gap: base.as_ref().map(|b| main.mean_gap - b.mean_gap),
        checkpoint: main,
        baseline: base,
    };
    fs::write(out.join("separation.json"), serde_json::to_string_pretty(&summary)?)?;
    manifest.finish(&manifest_path)
}
