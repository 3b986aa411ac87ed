//! Audio and text encoders mapping their inputs onto the shared unit sphere.
//!
//! The audio encoder compresses a log-mel spectrogram in time with a stack of
//! strided 1-D convolutions before a pre-norm transformer; the text encoder is
//! a small transformer over token ids. Both mean-pool the valid positions,
//! project to `embed_dim` and L2-normalise.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mean_pool_matrix, AttentionShape, ConvGeometry, Tape, Var};
use crate::error::{HtclError, Result};
use crate::mel::MelSpectrogram;
use crate::nn::{init_layer_norm, init_linear, init_normal, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::text::{TokenSequence, Vocabulary, PAD_ID};

pub const AUDIO_PREFIX: &str = "audio";
pub const TEXT_PREFIX: &str = "text";

/// A unit-norm representation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T: Scalar>(Array1<T>);

impl<T: Scalar> Embedding<T> {
    /// Accepts a vector that is already unit-norm (within 1e-5) and finite.
    pub fn new(v: Array1<T>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(HtclError::Numeric("embedding has non-finite entries".into()));
        }
        let n = v.dot(&v).sqrt();
        if (n - T::one()).abs() > T::lit(1e-5) {
            return Err(HtclError::Numeric(format!("embedding norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    /// Normalises `v`; fails on a zero or non-finite vector.
    pub fn normalized(v: Array1<T>) -> Result<Self> {
        let n = v.dot(&v).sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(HtclError::Numeric("cannot normalise a zero vector".into()));
        }
        Self::new(v.mapv(|x| x / n))
    }

    pub fn vector(&self) -> &Array1<T> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_row(&self) -> ArrayView2<'_, T> {
        self.0.view().insert_axis(Axis(0))
    }

    pub fn cosine(&self, other: &Self) -> T {
        self.0.dot(&other.0)
    }

    pub fn into_inner(self) -> Array1<T> {
        self.0
    }
}

/// `floor((input_len + 2·padding − kernel) / stride) + 1`.
pub fn conv_output_length(input_len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if input_len == 0 || kernel == 0 || stride == 0 {
        return Err(HtclError::Input("convolution sizes must be positive".into()));
    }
    let span = input_len + 2 * padding;
    if span < kernel {
        return Err(HtclError::InputTooShort(format!(
            "length {input_len} with padding {padding} is shorter than kernel {kernel}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioEncoderConfig {
    pub n_mels: usize,
    pub cnn_channels: usize,
    pub cnn_strides: Vec<usize>,
    pub cnn_kernels: Vec<usize>,
    pub tf_layers: usize,
    pub tf_heads: usize,
    pub tf_hidden: usize,
    pub ffn_mult: usize,
    pub embed_dim: usize,
    pub max_frames_after_cnn: usize,
    pub dropout: f64,
}

impl Default for AudioEncoderConfig {
    /// Desk-scale encoder for 8-second clips.
    fn default() -> Self {
        Self {
            n_mels: 128,
            cnn_channels: 128,
            cnn_strides: vec![2, 2, 2],
            cnn_kernels: vec![5, 3, 3],
            tf_layers: 2,
            tf_heads: 4,
            tf_hidden: 128,
            ffn_mult: 4,
            embed_dim: 64,
            max_frames_after_cnn: 64,
            dropout: 0.0,
        }
    }
}

impl AudioEncoderConfig {
    /// Full-size encoder: 512 channels, 12 layers, 12 heads, hidden 768, for two-minute inputs.
    pub fn full_size() -> Self {
        Self {
            cnn_channels: 512,
            tf_layers: 12,
            tf_heads: 12,
            tf_hidden: 768,
            embed_dim: 768,
            max_frames_after_cnn: 160,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cnn_strides.len() != self.cnn_kernels.len() {
            return Err(HtclError::config("audio_encoder.cnn_strides", "length must equal cnn_kernels"));
        }
        if self.cnn_strides.iter().chain(&self.cnn_kernels).any(|&v| v == 0) {
            return Err(HtclError::config("audio_encoder.cnn_kernels", "entries must be positive"));
        }
        validate_transformer("audio_encoder", self.tf_hidden, self.tf_heads, self.embed_dim, self.dropout)?;
        if self.n_mels == 0 || self.cnn_channels == 0 || self.max_frames_after_cnn == 0 {
            return Err(HtclError::config("audio_encoder", "sizes must be positive"));
        }
        Ok(())
    }

    /// Positions reaching the transformer for `frames` input frames.
    pub fn positions_after_cnn(&self, frames: usize) -> Result<usize> {
        self.cnn_kernels
            .iter()
            .zip(&self.cnn_strides)
            .try_fold(frames, |len, (&k, &s)| conv_output_length(len, k, s, k / 2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub tf_layers: usize,
    pub tf_heads: usize,
    pub tf_hidden: usize,
    pub ffn_mult: usize,
    pub embed_dim: usize,
    pub max_text_len: usize,
    pub dropout: f64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            tf_layers: 2,
            tf_heads: 4,
            tf_hidden: 128,
            ffn_mult: 4,
            embed_dim: 64,
            max_text_len: 512,
            dropout: 0.0,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        validate_transformer("text_encoder", self.tf_hidden, self.tf_heads, self.embed_dim, self.dropout)?;
        if self.vocab_size < 3 {
            return Err(HtclError::config("text_encoder.vocab_size", "must be at least 3"));
        }
        if self.max_text_len == 0 {
            return Err(HtclError::config("text_encoder.max_text_len", "must be positive"));
        }
        Ok(())
    }
}

fn validate_transformer(section: &str, hidden: usize, heads: usize, embed_dim: usize, dropout: f64) -> Result<()> {
    if heads == 0 || hidden == 0 || !hidden.is_multiple_of(heads) {
        return Err(HtclError::config(format!("{section}.tf_hidden"), "must be a positive multiple of tf_heads"));
    }
    if embed_dim == 0 {
        return Err(HtclError::config(format!("{section}.embed_dim"), "must be at least 1"));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(HtclError::config(format!("{section}.dropout"), "must lie in [0, 1)"));
    }
    Ok(())
}

struct StackSpec<'a> {
    prefix: &'a str,
    layers: usize,
    heads: usize,
    batch: usize,
    len: usize,
    dropout: f64,
}

fn init_transformer<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, layers: usize, hidden: usize, ffn: usize) {
    for l in 0..layers {
        let p = format!("{prefix}.block{l}");
        init_layer_norm(store, &format!("{p}.ln1"), hidden);
        for name in ["q", "k", "v", "out"] {
            init_linear(store, rng, &format!("{p}.attn.{name}"), hidden, hidden);
        }
        init_layer_norm(store, &format!("{p}.ln2"), hidden);
        init_linear(store, rng, &format!("{p}.ffn.fc1"), hidden, ffn);
        init_linear(store, rng, &format!("{p}.ffn.fc2"), ffn, hidden);
    }
    init_layer_norm(store, &format!("{prefix}.ln_f"), hidden);
}

/// Pre-norm transformer blocks followed by a final layer norm.
fn transformer_stack<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<'_, T>,
    mut h: Var,
    spec: &StackSpec<'_>,
    key_mask: &[bool],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let shape = AttentionShape {
        batch: spec.batch,
        len: spec.len,
        heads: spec.heads,
    };
    for l in 0..spec.layers {
        let p = format!("{}.block{l}", spec.prefix);
        let a = binder.layer_norm(tape, h, &format!("{p}.ln1"))?;
        let q = binder.linear(tape, a, &format!("{p}.attn.q"))?;
        let k = binder.linear(tape, a, &format!("{p}.attn.k"))?;
        let v = binder.linear(tape, a, &format!("{p}.attn.v"))?;
        let att = tape.attention(q, k, v, shape, key_mask);
        let mut o = binder.linear(tape, att, &format!("{p}.attn.out"))?;
        if let Some(r) = rng.as_deref_mut() {
            o = tape.dropout(o, spec.dropout, r);
        }
        h = tape.add(h, o);

        let f = binder.layer_norm(tape, h, &format!("{p}.ln2"))?;
        let f = binder.linear(tape, f, &format!("{p}.ffn.fc1"))?;
        let f = tape.gelu(f);
        let mut f = binder.linear(tape, f, &format!("{p}.ffn.fc2"))?;
        if let Some(r) = rng.as_deref_mut() {
            f = tape.dropout(f, spec.dropout, r);
        }
        h = tape.add(h, f);
    }
    binder.layer_norm(tape, h, &format!("{}.ln_f", spec.prefix))
}

/// Spectrograms stacked item-major: row `b * frames + t`.
#[derive(Debug, Clone)]
pub struct AudioBatch<T: Scalar> {
    pub values: Array2<T>,
    pub frames: usize,
    pub valid_frames: Vec<usize>,
}

impl<T: Scalar> AudioBatch<T> {
    pub fn from_mels(mels: &[&MelSpectrogram<T>]) -> Result<Self> {
        let first = mels.first().ok_or_else(|| HtclError::Input("empty audio batch".into()))?;
        let (frames, n_mels) = first.values.dim();
        let mut values = Array2::zeros((mels.len() * frames, n_mels));
        let mut valid_frames = Vec::with_capacity(mels.len());
        for (b, m) in mels.iter().enumerate() {
            if m.values.dim() != (frames, n_mels) {
                return Err(HtclError::Input(format!(
                    "spectrogram {b} is {:?}, batch expects {:?}",
                    m.values.dim(),
                    (frames, n_mels)
                )));
            }
            if m.num_valid_frames == 0 || m.num_valid_frames > frames {
                return Err(HtclError::InputTooShort(format!(
                    "spectrogram {b} has {} valid frames",
                    m.num_valid_frames
                )));
            }
            values
                .slice_mut(ndarray::s![b * frames..(b + 1) * frames, ..])
                .assign(&m.values);
            valid_frames.push(m.num_valid_frames);
        }
        Ok(Self {
            values,
            frames,
            valid_frames,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.valid_frames.len()
    }
}

fn validity(valid: &[usize], len: usize) -> Vec<bool> {
    valid
        .iter()
        .flat_map(|&v| (0..len).map(move |t| t < v))
        .collect()
}

fn zero_invalid_rows<T: Scalar>(values: &mut Array2<T>, valid: &[bool]) {
    for (mut row, &ok) in values.outer_iter_mut().zip(valid) {
        if !ok {
            row.fill(T::zero());
        }
    }
}

/// Convolution + transformer audio encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder {
    pub config: AudioEncoderConfig,
}

impl AudioEncoder {
    pub fn new(config: AudioEncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut in_ch = c.n_mels;
        for (i, &k) in c.cnn_kernels.iter().enumerate() {
            init_linear(&mut store, &mut rng, &format!("{AUDIO_PREFIX}.conv{i}"), k * in_ch, c.cnn_channels);
            init_layer_norm(&mut store, &format!("{AUDIO_PREFIX}.conv{i}.norm"), c.cnn_channels);
            in_ch = c.cnn_channels;
        }
        init_linear(&mut store, &mut rng, &format!("{AUDIO_PREFIX}.input_proj"), in_ch, c.tf_hidden);
        store.insert(
            format!("{AUDIO_PREFIX}.pos_embed"),
            init_normal(c.max_frames_after_cnn, c.tf_hidden, 0.02, &mut rng),
        );
        init_transformer(&mut store, &mut rng, AUDIO_PREFIX, c.tf_layers, c.tf_hidden, c.ffn_mult * c.tf_hidden);
        init_linear(&mut store, &mut rng, &format!("{AUDIO_PREFIX}.proj"), c.tf_hidden, c.embed_dim);
        store
    }

    /// Records the forward pass; returns a `batch x embed_dim` node of unit rows.
    /// Passing `rng` enables dropout.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        batch: &AudioBatch<T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        if batch.values.ncols() != c.n_mels {
            return Err(HtclError::Input(format!(
                "spectrogram has {} mel bins, encoder expects {}",
                batch.values.ncols(),
                c.n_mels
            )));
        }
        if batch.values.iter().any(|v| !v.is_finite()) {
            return Err(HtclError::Numeric("non-finite spectrogram value".into()));
        }
        let bsz = batch.batch_size();
        let mut len = batch.frames;
        let mut valid = batch.valid_frames.clone();
        let mut input = batch.values.clone();
        zero_invalid_rows(&mut input, &validity(&valid, len));
        let mut x = tape.constant(input);
        let mut channels = c.n_mels;

        for (i, (&k, &s)) in c.cnn_kernels.iter().zip(&c.cnn_strides).enumerate() {
            let pad = k / 2;
            let len_out = conv_output_length(len, k, s, pad)?;
            for v in valid.iter_mut() {
                *v = conv_output_length(*v, k, s, pad)?.min(len_out);
            }
            let geom = ConvGeometry {
                batch: bsz,
                len_in: len,
                channels,
                kernel: k,
                stride: s,
                padding: pad,
                len_out,
            };
            let cols = tape.im2col(x, geom);
            let y = binder.linear(tape, cols, &format!("{AUDIO_PREFIX}.conv{i}"))?;
            let y = tape.gelu(y);
            let y = binder.layer_norm(tape, y, &format!("{AUDIO_PREFIX}.conv{i}.norm"))?;
            let mask = tape.constant(crate::autodiff::row_mask(&validity(&valid, len_out), c.cnn_channels));
            x = tape.mul(y, mask);
            len = len_out;
            channels = c.cnn_channels;
        }
        if len > c.max_frames_after_cnn {
            return Err(HtclError::Input(format!(
                "{len} positions after the convolution stack exceed max_frames_after_cnn={}",
                c.max_frames_after_cnn
            )));
        }

        let h = binder.linear(tape, x, &format!("{AUDIO_PREFIX}.input_proj"))?;
        let pos_table = binder.var(tape, &format!("{AUDIO_PREFIX}.pos_embed"))?;
        let pos = tape.gather(pos_table, (0..bsz).flat_map(|_| 0..len).collect());
        let h = tape.add(h, pos);
        let mask = validity(&valid, len);
        let spec = StackSpec {
            prefix: AUDIO_PREFIX,
            layers: c.tf_layers,
            heads: c.tf_heads,
            batch: bsz,
            len,
            dropout: c.dropout,
        };
        let h = transformer_stack(tape, binder, h, &spec, &mask, rng)?;
        let pool = tape.constant(mean_pool_matrix(&mask, bsz, len));
        let pooled = tape.matmul(pool, h);
        let z = binder.linear(tape, pooled, &format!("{AUDIO_PREFIX}.proj"))?;
        Ok(tape.l2_normalize(z))
    }

    /// Inference on a batch of spectrograms (dropout disabled).
    pub fn encode_batch<T: Scalar>(&self, params: &ParamStore<T>, mels: &[&MelSpectrogram<T>]) -> Result<Array2<T>> {
        let batch = AudioBatch::from_mels(mels)?;
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(params);
        let z = self.forward(&mut tape, &mut binder, &batch, None)?;
        Ok(tape.value(z).clone())
    }

    pub fn encode<T: Scalar>(&self, params: &ParamStore<T>, mel: &MelSpectrogram<T>) -> Result<Embedding<T>> {
        let z = self.encode_batch(params, &[mel])?;
        Embedding::new(z.row(0).to_owned())
    }
}

/// Token ids padded item-major to a common length.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl TextBatch {
    pub fn from_sequences(seqs: &[&TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(HtclError::Input("empty text batch".into()));
        }
        if let Some(i) = seqs.iter().position(|s| s.is_empty()) {
            return Err(HtclError::Input(format!("token sequence {i} is empty")));
        }
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(len * seqs.len());
        for s in seqs {
            ids.extend(s.ids.iter().map(|&i| i as usize));
            ids.extend(std::iter::repeat_n(PAD_ID as usize, len - s.len()));
        }
        Ok(Self {
            ids,
            len,
            lengths: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }
}

/// Token + position embeddings followed by a transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert(format!("{TEXT_PREFIX}.token_embed"), init_normal(c.vocab_size, c.tf_hidden, 0.02, &mut rng));
        store.insert(format!("{TEXT_PREFIX}.pos_embed"), init_normal(c.max_text_len, c.tf_hidden, 0.02, &mut rng));
        init_transformer(&mut store, &mut rng, TEXT_PREFIX, c.tf_layers, c.tf_hidden, c.ffn_mult * c.tf_hidden);
        init_linear(&mut store, &mut rng, &format!("{TEXT_PREFIX}.proj"), c.tf_hidden, c.embed_dim);
        store
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        batch: &TextBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(HtclError::Input(format!("token id {bad} is outside the vocabulary of {}", c.vocab_size)));
        }
        if batch.len > c.max_text_len {
            return Err(HtclError::Input(format!("{} tokens exceed max_text_len={}", batch.len, c.max_text_len)));
        }
        let bsz = batch.batch_size();
        let table = binder.var(tape, &format!("{TEXT_PREFIX}.token_embed"))?;
        let tok = tape.gather(table, batch.ids.clone());
        let pos_table = binder.var(tape, &format!("{TEXT_PREFIX}.pos_embed"))?;
        let pos = tape.gather(pos_table, (0..bsz).flat_map(|_| 0..batch.len).collect());
        let h = tape.add(tok, pos);
        let mask = validity(&batch.lengths, batch.len);
        let spec = StackSpec {
            prefix: TEXT_PREFIX,
            layers: c.tf_layers,
            heads: c.tf_heads,
            batch: bsz,
            len: batch.len,
            dropout: c.dropout,
        };
        let h = transformer_stack(tape, binder, h, &spec, &mask, rng)?;
        let pool = tape.constant(mean_pool_matrix(&mask, bsz, batch.len));
        let pooled = tape.matmul(pool, h);
        let z = binder.linear(tape, pooled, &format!("{TEXT_PREFIX}.proj"))?;
        Ok(tape.l2_normalize(z))
    }

    pub fn encode_batch<T: Scalar>(&self, params: &ParamStore<T>, seqs: &[&TokenSequence]) -> Result<Array2<T>> {
        let batch = TextBatch::from_sequences(seqs)?;
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(params);
        let z = self.forward(&mut tape, &mut binder, &batch, None)?;
        Ok(tape.value(z).clone())
    }

    pub fn encode<T: Scalar>(&self, params: &ParamStore<T>, tokens: &TokenSequence) -> Result<Embedding<T>> {
        let z = self.encode_batch(params, &[tokens])?;
        Embedding::new(z.row(0).to_owned())
    }
}

/// Anything that maps metadata text to the shared embedding space.
///
/// The built-in implementation pairs a [`Vocabulary`] with a [`TextEncoder`];
/// an external pre-trained model can be plugged in by implementing this trait.
pub trait TextEmbedder<T: Scalar> {
    fn embed_dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Embedding<T>>;
}

pub struct BuiltinTextEmbedder<'a, T: Scalar> {
    pub vocab: &'a Vocabulary,
    pub encoder: &'a TextEncoder,
    pub params: &'a ParamStore<T>,
}

impl<T: Scalar> TextEmbedder<T> for BuiltinTextEmbedder<'_, T> {
    fn embed_dim(&self) -> usize {
        self.encoder.config.embed_dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding<T>> {
        let tokens = self.vocab.tokenize(text, self.encoder.config.max_text_len);
        self.encoder.encode(self.params, &tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mel::MelConfig;

    fn small_audio() -> AudioEncoderConfig {
        AudioEncoderConfig {
            n_mels: 8,
            cnn_channels: 12,
            tf_hidden: 16,
            tf_heads: 2,
            embed_dim: 6,
            max_frames_after_cnn: 16,
            ..AudioEncoderConfig::default()
        }
    }

    fn fake_mel(frames: usize, valid: usize, n_mels: usize, seed: u64) -> MelSpectrogram<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        MelSpectrogram {
            values: Array2::from_shape_fn((frames, n_mels), |_| rng.gen_range(-3.0..1.0)),
            num_valid_frames: valid,
            config: MelConfig::default(),
        }
    }

    #[test]
    fn conv_length_formula() {
        assert_eq!(conv_output_length(1251, 5, 2, 2).unwrap(), 626);
        assert_eq!(conv_output_length(626, 3, 2, 1).unwrap(), 313);
        assert_eq!(conv_output_length(313, 3, 2, 1).unwrap(), 157);
        for l in 1..50 {
            for k in [1, 3, 5, 7] {
                assert_eq!(conv_output_length(l, k, 1, k / 2).unwrap(), l);
            }
        }
        assert!(matches!(conv_output_length(2, 5, 1, 0), Err(HtclError::InputTooShort(_))));
        let cfg = AudioEncoderConfig::default();
        assert_eq!(cfg.positions_after_cnn(84).unwrap(), 11);
        assert_eq!(cfg.positions_after_cnn(1251).unwrap(), 157);
    }

    #[test]
    fn config_validation() {
        let bad = AudioEncoderConfig {
            tf_hidden: 130,
            ..AudioEncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AudioEncoderConfig {
            cnn_strides: vec![2, 2],
            ..AudioEncoderConfig::default()
        };
        assert!(AudioEncoder::new(bad).is_err());
        assert!(TextEncoder::new(TextEncoderConfig {
            embed_dim: 0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn audio_embedding_is_unit_and_ignores_padding_content() {
        let enc = AudioEncoder::new(small_audio()).unwrap();
        let params = enc.init_params::<f64>(3);
        let a = fake_mel(30, 17, 8, 1);
        let mut b = a.clone();
        for t in 17..30 {
            b.values.row_mut(t).fill(42.0);
        }
        let ea = enc.encode(&params, &a).unwrap();
        let eb = enc.encode(&params, &b).unwrap();
        assert!((ea.vector().dot(ea.vector()).sqrt() - 1.0).abs() < 1e-5);
        for (x, y) in ea.vector().iter().zip(eb.vector()) {
            assert!((x - y).abs() < 1e-6);
        }
        // batch neighbours do not leak
        let other = fake_mel(30, 30, 8, 2);
        let batched = enc.encode_batch(&params, &[&b, &other]).unwrap();
        for (x, y) in ea.vector().iter().zip(batched.row(0)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn audio_rejects_bad_inputs() {
        let enc = AudioEncoder::new(small_audio()).unwrap();
        let params = enc.init_params::<f64>(3);
        let mut m = fake_mel(30, 30, 8, 1);
        m.values[[0, 0]] = f64::NAN;
        assert!(matches!(enc.encode(&params, &m), Err(HtclError::Numeric(_))));
        let wrong = fake_mel(30, 30, 9, 1);
        assert!(matches!(enc.encode(&params, &wrong), Err(HtclError::Input(_))));
        let too_long = fake_mel(200, 200, 8, 1);
        assert!(enc.encode(&params, &too_long).is_err());
        let empty = fake_mel(30, 0, 8, 1);
        assert!(matches!(enc.encode(&params, &empty), Err(HtclError::InputTooShort(_))));
    }

    #[test]
    fn text_embedding_masks_padding() {
        let enc = TextEncoder::new(TextEncoderConfig {
            vocab_size: 20,
            tf_hidden: 16,
            tf_heads: 2,
            embed_dim: 6,
            max_text_len: 32,
            ..Default::default()
        })
        .unwrap();
        let params = enc.init_params::<f64>(5);
        let short = TokenSequence { ids: vec![2, 7, 9] };
        let long = TokenSequence {
            ids: vec![2, 4, 4, 5, 6, 7, 8, 11],
        };
        let alone = enc.encode(&params, &short).unwrap();
        let batched = enc.encode_batch(&params, &[&short, &long]).unwrap();
        for (x, y) in alone.vector().iter().zip(batched.row(0)) {
            assert!((x - y).abs() < 1e-6);
        }
        let bos = enc.encode(&params, &TokenSequence { ids: vec![2] }).unwrap();
        assert!(bos.vector().iter().all(|v| v.is_finite()));
        assert!(matches!(
            enc.encode(&params, &TokenSequence { ids: vec![2, 20] }),
            Err(HtclError::Input(_))
        ));
    }

    #[test]
    fn init_is_seeded() {
        let enc = AudioEncoder::new(small_audio()).unwrap();
        let a = enc.init_params::<f32>(1);
        assert_eq!(a, enc.init_params::<f32>(1));
        assert_ne!(a, enc.init_params::<f32>(2));
    }

    #[test]
    fn desk_audio_parameter_count() {
        let cfg = AudioEncoderConfig::default();
        let params = AudioEncoder::new(cfg.clone()).unwrap().init_params::<f32>(0);
        // conv0: 5*128*128 weights + 128 bias + 256 norm
        let conv0 = 5 * 128 * 128 + 128 + 256;
        // conv1, conv2: 3*128*128 + 128 + 256
        let conv12 = 2 * (3 * 128 * 128 + 128 + 256);
        let input_proj = 128 * 128 + 128;
        let pos = 64 * 128;
        // per block: 2 layer norms (256 each), 4 attention projections (128*128+128), fc1 128*512+512, fc2 512*128+128
        let block = 256 + 4 * (16_384 + 128) + 256 + (65_536 + 512) + (65_536 + 128);
        let ln_f = 256;
        let proj = 128 * 64 + 64;
        let expected = conv0 + conv12 + input_proj + pos + 2 * block + ln_f + proj;
        assert_eq!(expected, 611_136);
        assert_eq!(params.num_scalars(), expected);
    }
}
