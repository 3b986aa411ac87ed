//! Log-mel spectrogram front end.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{HtclError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    /// Defaults to the Nyquist frequency.
    pub fmax: Option<f64>,
    pub log_floor: f64,
    pub target_seconds: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 128.0,
            hop_ms: 96.0,
            n_mels: 128,
            fmin: 20.0,
            fmax: None,
            log_floor: -10.0,
            target_seconds: 8.0,
        }
    }
}

impl MelConfig {
    /// Full-length setting: the first two minutes of every track.
    pub fn full_length() -> Self {
        Self {
            target_seconds: 120.0,
            ..Self::default()
        }
    }

    pub fn fmax_hz(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn target_samples(&self) -> usize {
        (self.target_seconds * self.sample_rate as f64).round() as usize
    }

    /// `floor(samples / hop) + 1` (centered frames).
    pub fn frames_for(&self, samples: usize) -> usize {
        samples / self.hop_samples() + 1
    }

    pub fn num_frames(&self) -> usize {
        self.frames_for(self.target_samples())
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(HtclError::config("mel.sample_rate", "must be positive"));
        }
        if !(self.hop_ms > 0.0) || self.hop_samples() == 0 {
            return Err(HtclError::config("mel.hop_ms", "must be positive"));
        }
        if self.hop_ms > self.window_ms {
            return Err(HtclError::config("mel.hop_ms", "must not exceed window_ms"));
        }
        if self.window_samples() < 2 {
            return Err(HtclError::config("mel.window_ms", "window shorter than two samples"));
        }
        if self.n_mels == 0 {
            return Err(HtclError::config("mel.n_mels", "must be at least 1"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax_hz() && self.fmax_hz() <= nyquist) {
            return Err(HtclError::config("mel.fmin", "need 0 <= fmin < fmax <= sample_rate/2"));
        }
        if !self.log_floor.is_finite() {
            return Err(HtclError::config("mel.log_floor", "must be finite"));
        }
        if !(self.target_seconds > 0.0) {
            return Err(HtclError::config("mel.target_seconds", "must be positive"));
        }
        Ok(())
    }
}

/// Frames x mel-bins matrix of log energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<T: Scalar> {
    pub values: Array2<T>,
    pub num_valid_frames: usize,
    pub config: MelConfig,
}

impl<T: Scalar> MelSpectrogram<T> {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }
}

/// Fixed-length waveform plus the number of samples that came from the source.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedWaveform<T> {
    pub samples: Vec<T>,
    pub valid_samples: usize,
    pub valid_seconds: f64,
}

/// Keeps the first `target_seconds` of `waveform`, zero-padding at the end when shorter.
pub fn pad_or_truncate<T: Scalar>(waveform: &[T], cfg: &MelConfig) -> Result<PaddedWaveform<T>> {
    if waveform.is_empty() {
        return Err(HtclError::Input("empty waveform".into()));
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(HtclError::Input("waveform contains non-finite samples".into()));
    }
    let target = cfg.target_samples();
    let valid = waveform.len().min(target);
    let mut samples = Vec::with_capacity(target);
    samples.extend_from_slice(&waveform[..valid]);
    samples.resize(target, T::zero());
    Ok(PaddedWaveform {
        samples,
        valid_samples: valid,
        valid_seconds: valid as f64 / cfg.sample_rate as f64,
    })
}

#[inline]
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

#[inline]
pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-spaced filterbank, `n_freqs x n_mels`.
pub fn mel_filterbank<T: Scalar>(cfg: &MelConfig, n_fft: usize) -> Array2<T> {
    let n_freqs = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax_hz()));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((n_freqs, cfg.n_mels), |(k, m)| {
        let f = k as f64 * bin_hz;
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let w = if f <= left || f >= right {
            0.0
        } else if f <= centre {
            (f - left) / (centre - left)
        } else {
            (right - f) / (right - centre)
        };
        T::lit(w)
    })
}

/// Periodic Hann window.
pub fn hann_window<T: Scalar>(len: usize) -> Vec<T> {
    (0..len)
        .map(|n| T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()))
        .collect()
}

/// Reusable FFT plan, window and filterbank for one [`MelConfig`].
pub struct MelFrontend<T: Scalar> {
    cfg: MelConfig,
    fft: Arc<dyn Fft<T>>,
    window: Vec<T>,
    filterbank: Array2<T>,
}

impl<T: Scalar> MelFrontend<T> {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n_fft = cfg.window_samples();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            fft,
            window: hann_window(n_fft),
            filterbank: mel_filterbank(cfg, n_fft),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Centered short-time transform, mel projection and clamped natural log.
    pub fn compute(&self, waveform: &PaddedWaveform<T>) -> Result<MelSpectrogram<T>> {
        let n = waveform.samples.len();
        if n != self.cfg.target_samples() {
            return Err(HtclError::Input(format!(
                "waveform has {n} samples, expected {}",
                self.cfg.target_samples()
            )));
        }
        let n_fft = self.window.len();
        let hop = self.cfg.hop_samples();
        let half = n_fft / 2;
        let frames = self.cfg.frames_for(n);
        let n_freqs = n_fft / 2 + 1;
        let mut power = Array2::<T>::zeros((frames, n_freqs));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            for (j, slot) in buf.iter_mut().enumerate() {
                // index into the zero-padded signal
                let pos = (t * hop + j) as isize - half as isize;
                let x = if pos >= 0 && (pos as usize) < n {
                    waveform.samples[pos as usize] * self.window[j]
                } else {
                    T::zero()
                };
                *slot = Complex::new(x, T::zero());
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, p) in power.row_mut(t).iter_mut().enumerate() {
                *p = buf[k].norm_sqr();
            }
        }
        let floor = T::lit(self.cfg.log_floor);
        let values = power.dot(&self.filterbank).mapv(|e| {
            let l = e.ln();
            if l.is_nan() || l < floor {
                floor
            } else {
                l
            }
        });
        let num_valid_frames = self.cfg.frames_for(waveform.valid_samples).min(frames);
        Ok(MelSpectrogram {
            values,
            num_valid_frames,
            config: self.cfg.clone(),
        })
    }

    /// Pads/truncates a raw waveform and computes its spectrogram.
    pub fn from_raw(&self, waveform: &[T]) -> Result<MelSpectrogram<T>> {
        self.compute(&pad_or_truncate(waveform, &self.cfg)?)
    }
}

/// One-shot spectrogram of a waveform already padded to `target_seconds`.
pub fn compute_mel<T: Scalar>(waveform: &PaddedWaveform<T>, cfg: &MelConfig) -> Result<MelSpectrogram<T>> {
    MelFrontend::new(cfg)?.compute(waveform)
}

const MEL_CACHE_MAGIC: &[u8; 4] = b"HMEL";

/// Writes `magic, frames u32, n_mels u32, valid_frames u32`, then little-endian f32 values.
pub fn write_mel_cache<T: Scalar>(path: &Path, mel: &MelSpectrogram<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * mel.values.len());
    bytes.extend_from_slice(MEL_CACHE_MAGIC);
    bytes.extend_from_slice(&(mel.frames() as u32).to_le_bytes());
    bytes.extend_from_slice(&(mel.n_mels() as u32).to_le_bytes());
    bytes.extend_from_slice(&(mel.num_valid_frames as u32).to_le_bytes());
    for v in mel.values.iter() {
        bytes.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_mel_cache<T: Scalar>(path: &Path, cfg: &MelConfig) -> Result<MelSpectrogram<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != MEL_CACHE_MAGIC {
        return Err(HtclError::Data(format!("{} is not a mel cache file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (frames, n_mels, valid) = (word(4), word(8), word(12));
    if bytes.len() != 16 + 4 * frames * n_mels {
        return Err(HtclError::Data(format!("{} is truncated", path.display())));
    }
    if frames != cfg.num_frames() || n_mels != cfg.n_mels {
        return Err(HtclError::Data(format!(
            "{} holds {frames}x{n_mels}, config expects {}x{}",
            path.display(),
            cfg.num_frames(),
            cfg.n_mels
        )));
    }
    let data: Vec<T> = bytes[16..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Ok(MelSpectrogram {
        values: Array2::from_shape_vec((frames, n_mels), data).expect("length checked"),
        num_valid_frames: valid,
        config: cfg.clone(),
    })
}
