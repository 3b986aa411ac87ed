#![allow(dead_code)]

pub mod gradcheck;

use htcl_core::contrastive::LossConfig;
use htcl_core::encoders::{AudioEncoderConfig, TextEncoderConfig};
use htcl_core::mel::{MelConfig, MelSpectrogram};
use htcl_core::model::{FeatureSet, ModelConfig};
use htcl_core::synth::{generate_corpus, generate_preference_data, Corpus, GeneratorConfig, PreferenceData};
use htcl_core::text::{TokenSequence, BOS_ID};
use htcl_core::Scalar;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_MELS: usize = 8;
pub const FRAMES: usize = 24;

/// A model small enough to finite-difference every tensor.
pub fn tiny_model(embed_dim: usize, n_mels: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        audio_encoder: AudioEncoderConfig {
            n_mels,
            cnn_channels: 6,
            tf_layers: 1,
            tf_heads: 2,
            tf_hidden: 8,
            ffn_mult: 2,
            embed_dim,
            max_frames_after_cnn: 16,
            ..AudioEncoderConfig::default()
        },
        text_encoder: TextEncoderConfig {
            vocab_size: vocab,
            tf_layers: 1,
            tf_heads: 2,
            tf_hidden: 8,
            ffn_mult: 2,
            embed_dim,
            max_text_len: 16,
            ..TextEncoderConfig::default()
        },
        fusion_hidden: 6,
        loss: LossConfig::default(),
    }
}

/// Random log-mel inputs with ragged valid lengths, and random token sequences.
pub fn random_features<T: Scalar>(songs: usize, vocab: usize, seed: u64) -> FeatureSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = MelConfig {
        n_mels: N_MELS,
        ..MelConfig::default()
    };
    let mels = (0..songs)
        .map(|_| MelSpectrogram {
            values: Array2::from_shape_fn((FRAMES, N_MELS), |_| T::lit(rng.gen_range(-1.0..1.0))),
            num_valid_frames: rng.gen_range(FRAMES / 2..=FRAMES),
            config: config.clone(),
        })
        .collect();
    let tokens = (0..songs)
        .map(|_| TokenSequence {
            ids: std::iter::once(BOS_ID)
                .chain((0..rng.gen_range(3..10)).map(|_| rng.gen_range(3..vocab as u32)))
                .collect(),
        })
        .collect();
    FeatureSet::new(mels, tokens).unwrap()
}

/// A small generated corpus with real mel features, for training tests.
pub struct SmallCorpus {
    pub corpus: Corpus,
    pub prefs: PreferenceData,
    pub features: FeatureSet<f32>,
    pub model: ModelConfig,
}

pub fn small_corpus(songs: usize) -> SmallCorpus {
    let cfg = GeneratorConfig {
        num_songs: songs,
        num_users: 10,
        num_triplets: 4 * songs,
        triggers_per_user: 5,
        taste_neighborhood: 10,
        analysis_pairs: 20,
        ranking_days: 2,
        ranking_history: 4,
        impressions_per_day: 4,
        seed: 11,
        ..GeneratorConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let prefs = generate_preference_data(&corpus).unwrap();
    let mut model = tiny_model(8, MelConfig::default().n_mels, 128);
    model.text_encoder.max_text_len = 64;
    let (features, _) = FeatureSet::from_corpus(&corpus, &MelConfig::default(), 128, 64).unwrap();
    SmallCorpus {
        corpus,
        prefs,
        features,
        model,
    }
}

pub fn random_rows(rng: &mut ChaCha8Rng, b: usize, d: usize, unit: bool) -> Array2<f64> {
    let mut m: Array2<f64> = Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.0..1.0));
    if unit {
        for mut r in m.outer_iter_mut() {
            let n: f64 = r.dot(&r).sqrt().max(1e-12);
            r.mapv_inplace(|v| v / n);
        }
    }
    m
}

/// Mean over rows of -log(exp(s_ii) / sum_j exp(s_ij)), s = q k^T / tau, with plain loops.
pub fn oracle(q: &Array2<f64>, k: &Array2<f64>, tau: f64) -> f64 {
    let b = q.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let mut denom = 0.0;
        let mut own = 0.0;
        for j in 0..b {
            let mut s = 0.0;
            for c in 0..q.ncols() {
                s += q[[i, c]] * k[[j, c]];
            }
            let e = (s / tau).exp();
            denom += e;
            if i == j {
                own = e;
            }
        }
        total += -(own / denom).ln();
    }
    total / b as f64
}

