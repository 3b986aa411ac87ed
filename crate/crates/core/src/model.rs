//! The two-tower model with its fusion layer, and the pre-featurised song store.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{FusionParams, LossConfig};
use crate::encoders::{AudioEncoder, AudioEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::error::{HtclError, Result};
use crate::mel::{pad_or_truncate, MelConfig, MelFrontend, MelSpectrogram};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::synth::Corpus;
use crate::text::{serialize_metadata, TokenSequence, Vocabulary};

pub const LOG_TAU: &str = "loss.log_tau";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub audio_encoder: AudioEncoderConfig,
    pub text_encoder: TextEncoderConfig,
    pub fusion_hidden: usize,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            audio_encoder: AudioEncoderConfig::default(),
            text_encoder: TextEncoderConfig::default(),
            fusion_hidden: 128,
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.audio_encoder.validate()?;
        self.text_encoder.validate()?;
        self.loss.validate()?;
        if self.audio_encoder.embed_dim != self.text_encoder.embed_dim {
            return Err(HtclError::config(
                "text_encoder.embed_dim",
                format!(
                    "must equal audio_encoder.embed_dim ({} vs {})",
                    self.text_encoder.embed_dim, self.audio_encoder.embed_dim
                ),
            ));
        }
        if self.fusion_hidden == 0 {
            return Err(HtclError::config("model.fusion_hidden", "must be positive"));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.audio_encoder.embed_dim
    }
}

/// Encoders plus every trainable tensor: `audio.*`, `text.*`, `fusion.*` and,
/// with a learnable temperature, `loss.log_tau`.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub audio: AudioEncoder,
    pub text: TextEncoder,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let (audio, text) = Self::encoders(&config)?;
        let mut params = audio.init_params::<T>(seed);
        params.merge(text.init_params::<T>(seed.wrapping_add(1)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        params.merge(FusionParams::<T>::init(config.embed_dim(), config.fusion_hidden, &mut rng).to_store());
        if config.loss.learnable_temperature {
            params.insert(LOG_TAU, Array2::from_elem((1, 1), T::lit(config.loss.temperature.ln())));
        }
        Ok(Self {
            config,
            audio,
            text,
            params,
        })
    }

    /// Wraps existing parameters after checking every expected tensor shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let expected = Self::init(config.clone(), 0)?.params;
        check_shapes(&expected, &params)?;
        let (audio, text) = Self::encoders(&config)?;
        Ok(Self {
            config,
            audio,
            text,
            params,
        })
    }

    fn encoders(config: &ModelConfig) -> Result<(AudioEncoder, TextEncoder)> {
        config.validate()?;
        Ok((
            AudioEncoder::new(config.audio_encoder.clone())?,
            TextEncoder::new(config.text_encoder.clone())?,
        ))
    }

    /// Current temperature, learned or fixed.
    pub fn temperature(&self) -> T {
        match self.params.get(LOG_TAU) {
            Ok(t) => t[[0, 0]].exp(),
            Err(_) => T::lit(self.config.loss.temperature),
        }
    }

    pub fn fusion(&self) -> Result<FusionParams<T>> {
        FusionParams::from_store(&self.params)
    }

    /// Audio embeddings of `ids`, one row each, in chunks of `chunk`.
    pub fn embed_audio(&self, features: &FeatureSet<T>, ids: &[usize], chunk: usize) -> Result<Array2<T>> {
        let d = self.config.embed_dim();
        let mut out = Array2::zeros((ids.len(), d));
        for (c, block) in ids.chunks(chunk.max(1)).enumerate() {
            let mels: Vec<&MelSpectrogram<T>> = block.iter().map(|&i| features.mel(i)).collect::<Result<_>>()?;
            let z = self.audio.encode_batch(&self.params, &mels)?;
            let start = c * chunk.max(1);
            out.slice_mut(s![start..start + block.len(), ..]).assign(&z);
        }
        Ok(out)
    }

    pub fn embed_text(&self, features: &FeatureSet<T>, ids: &[usize], chunk: usize) -> Result<Array2<T>> {
        let d = self.config.embed_dim();
        let mut out = Array2::zeros((ids.len(), d));
        for (c, block) in ids.chunks(chunk.max(1)).enumerate() {
            let toks: Vec<&TokenSequence> = block.iter().map(|&i| features.tokens(i)).collect::<Result<_>>()?;
            let z = self.text.encode_batch(&self.params, &toks)?;
            let start = c * chunk.max(1);
            out.slice_mut(s![start..start + block.len(), ..]).assign(&z);
        }
        Ok(out)
    }
}

/// Fails with a compatibility error naming the first tensor whose shape differs,
/// or a missing-tensor error.
pub fn check_shapes<T: Scalar, U: Scalar>(expected: &ParamStore<T>, found: &ParamStore<U>) -> Result<()> {
    for (name, e) in expected.iter() {
        let f = found.get(name)?;
        if e.shape() != f.shape() {
            return Err(HtclError::Incompatible {
                name: name.clone(),
                expected: e.shape().to_vec(),
                found: f.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Log-mel spectrograms and token sequences indexed by song id.
#[derive(Debug, Clone)]
pub struct FeatureSet<T: Scalar> {
    pub mels: Vec<MelSpectrogram<T>>,
    pub tokens: Vec<TokenSequence>,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn new(mels: Vec<MelSpectrogram<T>>, tokens: Vec<TokenSequence>) -> Result<Self> {
        if mels.len() != tokens.len() {
            return Err(HtclError::Data(format!(
                "{} spectrograms but {} token sequences",
                mels.len(),
                tokens.len()
            )));
        }
        Ok(Self { mels, tokens })
    }

    /// Featurises a generated corpus; also returns the vocabulary built from its metadata.
    pub fn from_corpus(corpus: &Corpus, mel: &MelConfig, vocab_size: usize, max_text_len: usize) -> Result<(Self, Vocabulary)> {
        if corpus.config.sample_rate != mel.sample_rate {
            return Err(HtclError::config(
                "mel.sample_rate",
                format!("corpus is sampled at {} Hz", corpus.config.sample_rate),
            ));
        }
        let texts: Vec<String> = corpus.texts.iter().map(serialize_metadata).collect();
        let vocab = Vocabulary::build(texts.iter().map(String::as_str), vocab_size)?;
        let frontend = MelFrontend::<T>::new(mel)?;
        let mels = (0..corpus.len())
            .into_par_iter()
            .map(|id| {
                let w: Vec<T> = corpus.waveform(id).into_iter().map(|v| T::lit(v as f64)).collect();
                frontend.compute(&pad_or_truncate(&w, mel)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens = texts.iter().map(|t| vocab.tokenize(t, max_text_len)).collect();
        Ok((Self::new(mels, tokens)?, vocab))
    }

    pub fn len(&self) -> usize {
        self.mels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mels.is_empty()
    }

    pub fn mel(&self, id: usize) -> Result<&MelSpectrogram<T>> {
        self.mels
            .get(id)
            .ok_or_else(|| HtclError::Data(format!("song {id} has no spectrogram")))
    }

    pub fn tokens(&self, id: usize) -> Result<&TokenSequence> {
        self.tokens
            .get(id)
            .ok_or_else(|| HtclError::Data(format!("song {id} has no token sequence")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            audio_encoder: AudioEncoderConfig {
                n_mels: 8,
                cnn_channels: 8,
                tf_hidden: 8,
                tf_heads: 2,
                tf_layers: 1,
                embed_dim: 4,
                max_frames_after_cnn: 16,
                ..AudioEncoderConfig::default()
            },
            text_encoder: TextEncoderConfig {
                vocab_size: 20,
                tf_hidden: 8,
                tf_heads: 2,
                tf_layers: 1,
                embed_dim: 4,
                max_text_len: 16,
                ..TextEncoderConfig::default()
            },
            fusion_hidden: 6,
            loss: LossConfig::default(),
        }
    }

    #[test]
    fn embed_dims_must_agree() {
        let mut cfg = tiny();
        cfg.text_encoder.embed_dim = 5;
        let err = Model::<f32>::init(cfg, 0).unwrap_err();
        assert!(err.to_string().contains("embed_dim"));
    }

    #[test]
    fn from_params_names_mismatched_tensor() {
        let a = Model::<f32>::init(tiny(), 3).unwrap();
        let mut other = tiny();
        other.audio_encoder.embed_dim = 6;
        other.text_encoder.embed_dim = 6;
        match Model::from_params(other, a.params.clone()) {
            Err(HtclError::Incompatible { name, .. }) => assert_eq!(name, "audio.proj.bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Model::from_params(tiny(), a.params).is_ok());
    }

    #[test]
    fn learnable_temperature_starts_at_configured_value() {
        let mut cfg = tiny();
        cfg.loss.learnable_temperature = true;
        let m = Model::<f64>::init(cfg, 0).unwrap();
        assert!((m.temperature() - 0.07).abs() < 1e-12);
    }
}
