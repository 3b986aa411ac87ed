//! Synthetic music corpus with latent genre, language and style factors.
//!
//! Genre and language drive both the waveform and the metadata text, so that
//! audio/text alignment is learnable. A continuous style vector, correlated
//! with genre but not determined by it, drives simulated user preference:
//! favoured recommendations pair songs that are close in style, while
//! co-occurrence sessions mix in unrelated songs.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HtclError, Result};
use crate::text::TextDocument;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_songs: usize,
    pub genres: usize,
    pub languages: usize,
    pub style_dim: usize,
    /// Weight of the genre centre inside each style vector.
    pub style_genre_weight: f64,

    pub sample_rate: u32,
    pub duration_s: f64,
    pub min_duration_s: f64,
    /// Shared pool of tones; each genre emphasises `sinusoids_per_genre` of them.
    pub tone_pool: usize,
    pub sinusoids_per_genre: usize,
    /// Log-amplitude boost of a genre's own tones.
    pub genre_boost: f64,
    /// Per-song log-amplitude noise on every pool tone.
    pub amplitude_jitter: f64,
    pub noise_std: f64,

    pub words_per_genre: usize,
    pub words_per_language: usize,
    pub filler_words: usize,
    pub artists_per_genre: usize,
    pub title_tokens: (usize, usize),
    pub lyrics_tokens: (usize, usize),
    /// Number of style "mood" tokens added to the lyrics.
    pub mood_tokens: usize,

    pub num_users: usize,
    pub acceptance_noise: f64,
    pub session_mix_rate: f64,
    pub neighbor_count: usize,
    pub num_triplets: usize,
    pub session_length: usize,
    /// Fraction of songs kept out of fine-tuning data; anchors of the analysis pairs.
    pub holdout_fraction: f64,
    pub triggers_per_user: usize,
    pub taste_neighborhood: usize,
    pub ranking_days: usize,
    pub ranking_history: usize,
    pub impressions_per_day: usize,
    pub analysis_pairs: usize,

    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_songs: 2000,
            genres: 8,
            languages: 4,
            style_dim: 8,
            style_genre_weight: 0.75,
            sample_rate: 16_000,
            duration_s: 8.0,
            min_duration_s: 5.0,
            tone_pool: 16,
            sinusoids_per_genre: 4,
            genre_boost: 1.0,
            amplitude_jitter: 1.0,
            noise_std: 0.05,
            words_per_genre: 40,
            words_per_language: 60,
            filler_words: 40,
            artists_per_genre: 30,
            title_tokens: (2, 4),
            lyrics_tokens: (14, 20),
            mood_tokens: 2,
            num_users: 1000,
            acceptance_noise: 0.1,
            session_mix_rate: 0.6,
            neighbor_count: 10,
            num_triplets: 6000,
            session_length: 6,
            holdout_fraction: 0.15,
            triggers_per_user: 30,
            taste_neighborhood: 60,
            ranking_days: 8,
            ranking_history: 20,
            impressions_per_day: 10,
            analysis_pairs: 2000,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_songs", self.num_songs),
            ("genres", self.genres),
            ("languages", self.languages),
            ("style_dim", self.style_dim),
            ("sample_rate", self.sample_rate as usize),
            ("tone_pool", self.tone_pool),
            ("sinusoids_per_genre", self.sinusoids_per_genre),
            ("words_per_genre", self.words_per_genre),
            ("words_per_language", self.words_per_language),
            ("filler_words", self.filler_words),
            ("artists_per_genre", self.artists_per_genre),
            ("num_users", self.num_users),
            ("neighbor_count", self.neighbor_count),
            ("num_triplets", self.num_triplets),
            ("session_length", self.session_length.saturating_sub(1)),
            ("triggers_per_user", self.triggers_per_user),
            ("taste_neighborhood", self.taste_neighborhood),
            ("ranking_days", self.ranking_days.saturating_sub(1)),
            ("ranking_history", self.ranking_history),
            ("impressions_per_day", self.impressions_per_day),
            ("analysis_pairs", self.analysis_pairs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(HtclError::config(format!("data.{name}"), "must be positive (session_length and ranking_days at least 2)"));
            }
        }
        if !(self.duration_s > 0.0) || !(self.min_duration_s > 0.0) || self.min_duration_s > self.duration_s {
            return Err(HtclError::config("data.duration_s", "need 0 < min_duration_s <= duration_s"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(HtclError::config("data.noise_std", "must be non-negative"));
        }
        for (name, v) in [
            ("acceptance_noise", self.acceptance_noise),
            ("session_mix_rate", self.session_mix_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(HtclError::config(format!("data.{name}"), "must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(HtclError::config("data.holdout_fraction", "must lie in [0, 1)"));
        }
        if self.title_tokens.0 > self.title_tokens.1 || self.lyrics_tokens.0 > self.lyrics_tokens.1 {
            return Err(HtclError::config("data.lyrics_tokens", "range must be ordered"));
        }
        if self.sinusoids_per_genre > self.tone_pool {
            return Err(HtclError::config("data.sinusoids_per_genre", "cannot exceed tone_pool"));
        }
        if !(self.amplitude_jitter >= 0.0) || !self.genre_boost.is_finite() {
            return Err(HtclError::config("data.amplitude_jitter", "must be non-negative"));
        }
        if self.mood_tokens > self.style_dim {
            return Err(HtclError::config("data.mood_tokens", "cannot exceed style_dim"));
        }
        if (self.sample_rate as f64) < 15_200.0 {
            return Err(HtclError::config("data.sample_rate", "must be at least 15.2 kHz for the tone banks"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongSpec {
    pub song_id: usize,
    pub genre: usize,
    pub language: usize,
    pub style: Vec<f64>,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub genre: usize,
    pub language: usize,
}

/// Frequencies and modulation shared by every song of a corpus.
#[derive(Debug, Clone, PartialEq)]
struct ToneBanks {
    /// tone pool frequencies (Hz)
    pool_freqs: Vec<f64>,
    /// indices into the pool emphasised by each genre
    genre_tones: Vec<Vec<usize>>,
    /// unit direction in style space modulating each pool tone
    pool_mod: Vec<Vec<f64>>,
    language_freqs: Vec<[f64; 2]>,
    language_tremolo_hz: Vec<f64>,
    style_freqs: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_GLOBAL: u64 = 1;
const STREAM_PREFERENCE: u64 = 2;
const STREAM_SONG_BASE: u64 = 1 << 32;
const STREAM_NOISE_BASE: u64 = 1 << 40;
const STREAM_PHASE_BASE: u64 = 1 << 48;

fn log_uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo * (hi / lo).powf((i as f64 + 0.5) / n as f64))
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// A generated corpus. Waveforms are synthesised on demand from per-song seeds.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: GeneratorConfig,
    pub songs: Vec<SongSpec>,
    pub texts: Vec<TextDocument>,
    banks: ToneBanks,
}

pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, STREAM_GLOBAL);

    let pool_freqs = log_uniform_grid(180.0, 3_200.0, cfg.tone_pool);
    let mut genre_tones: Vec<Vec<usize>> = Vec::with_capacity(cfg.genres);
    let mut attempts = 0;
    while genre_tones.len() < cfg.genres {
        attempts += 1;
        let mut set = rand::seq::index::sample(&mut rng, cfg.tone_pool, cfg.sinusoids_per_genre).into_vec();
        set.sort_unstable();
        // distinct signatures unless the pool is too small to allow them
        if !genre_tones.contains(&set) || attempts > 1000 {
            genre_tones.push(set);
        }
    }
    let pool_mod = (0..cfg.tone_pool).map(|_| unit_vector(&mut rng, cfg.style_dim)).collect();
    let lang_grid = log_uniform_grid(3_400.0, 5_600.0, 2 * cfg.languages);
    let language_freqs = (0..cfg.languages)
        .map(|l| [lang_grid[l], lang_grid[l + cfg.languages]])
        .collect();
    let language_tremolo_hz = (0..cfg.languages)
        .map(|l| 2.0 + 6.0 * l as f64 / cfg.languages.max(2) as f64)
        .collect();
    let style_freqs = log_uniform_grid(6_000.0, 7_600.0, cfg.style_dim);
    let banks = ToneBanks {
        pool_freqs,
        genre_tones,
        pool_mod,
        language_freqs,
        language_tremolo_hz,
        style_freqs,
    };

    let genre_centres: Vec<Vec<f64>> = (0..cfg.genres)
        .map(|_| (0..cfg.style_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let artist_pool = cfg.artists_per_genre;

    let (songs, texts): (Vec<SongSpec>, Vec<TextDocument>) = (0..cfg.num_songs)
        .map(|id| {
            let mut r = stream_rng(cfg.seed, STREAM_SONG_BASE + id as u64);
            // even genre coverage, random language
            let genre = id % cfg.genres;
            let language = r.gen_range(0..cfg.languages);
            let style: Vec<f64> = genre_centres[genre]
                .iter()
                .map(|&c| {
                    let z: f64 = r.sample(StandardNormal);
                    quantize(cfg.style_genre_weight * c + z)
                })
                .collect();
            let duration_s = if cfg.min_duration_s < cfg.duration_s {
                quantize(r.gen_range(cfg.min_duration_s..=cfg.duration_s))
            } else {
                cfg.duration_s
            };
            let doc = sample_text(cfg, &mut r, genre, language, &style, artist_pool);
            (
                SongSpec {
                    song_id: id,
                    genre,
                    language,
                    style,
                    duration_s,
                },
                doc,
            )
        })
        .unzip();

    Ok(Corpus {
        config: cfg.clone(),
        songs,
        texts,
        banks,
    })
}

/// Rounds to a 2^-20 grid so that recorded floats are platform independent.
fn quantize(v: f64) -> f64 {
    (v * 1_048_576.0).round() / 1_048_576.0
}

fn sample_text(
    cfg: &GeneratorConfig,
    r: &mut ChaCha8Rng,
    genre: usize,
    language: usize,
    style: &[f64],
    artist_pool: usize,
) -> TextDocument {
    let word = |r: &mut ChaCha8Rng, p_lang: f64, p_genre: f64| -> String {
        let u: f64 = r.gen();
        if u < p_lang {
            format!("l{language}w{}", r.gen_range(0..cfg.words_per_language))
        } else if u < p_lang + p_genre {
            format!("g{genre}w{}", r.gen_range(0..cfg.words_per_genre))
        } else {
            format!("w{}", r.gen_range(0..cfg.filler_words))
        }
    };
    let n_title = r.gen_range(cfg.title_tokens.0..=cfg.title_tokens.1);
    let title: Vec<String> = (0..n_title).map(|_| word(r, 0.5, 0.3)).collect();
    let n_artists = r.gen_range(1..=2);
    let artists = (0..n_artists)
        .map(|_| format!("artist{genre}x{}", r.gen_range(0..artist_pool)))
        .collect();
    let n_lyrics = r.gen_range(cfg.lyrics_tokens.0..=cfg.lyrics_tokens.1);
    let mut lyrics: Vec<String> = (0..n_lyrics).map(|_| word(r, 0.55, 0.25)).collect();
    // strongest style dimensions surface as mood words
    let mut dims: Vec<usize> = (0..style.len()).collect();
    dims.sort_by(|&a, &b| style[b].abs().total_cmp(&style[a].abs()).then(a.cmp(&b)));
    for &d in dims.iter().take(cfg.mood_tokens) {
        let tag = if style[d] >= 0.0 { "hi" } else { "lo" };
        let pos = r.gen_range(0..=lyrics.len());
        lyrics.insert(pos, format!("mood{d}{tag}"));
    }
    TextDocument {
        title: title.join(" "),
        artists,
        lyrics: lyrics.join(" "),
    }
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.songs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }

    pub fn labels(&self) -> Vec<Labels> {
        self.songs
            .iter()
            .map(|s| Labels {
                genre: s.genre,
                language: s.language,
            })
            .collect()
    }

    pub fn num_samples(&self, id: usize) -> usize {
        (self.songs[id].duration_s * self.config.sample_rate as f64).round() as usize
    }

    /// Sum of the song's genre, language and style sinusoids without noise.
    pub fn clean_waveform(&self, id: usize) -> Vec<f32> {
        let song = &self.songs[id];
        let cfg = &self.config;
        let sr = cfg.sample_rate as f64;
        let n = self.num_samples(id);
        let mut r = stream_rng(cfg.seed, STREAM_PHASE_BASE + id as u64);
        let mut out = vec![0.0f64; n];

        let add_tone = |out: &mut [f64], freq: f64, amp: f64, phase: f64, tremolo: Option<f64>| {
            // phasor recurrence; renormalised periodically to bound drift
            let (mut c, mut s) = (phase.cos(), phase.sin());
            let (dc, ds) = ((2.0 * PI * freq / sr).cos(), (2.0 * PI * freq / sr).sin());
            let (mut tc, mut ts, tdc, tds) = match tremolo {
                Some(rate) => (1.0, 0.0, (2.0 * PI * rate / sr).cos(), (2.0 * PI * rate / sr).sin()),
                None => (1.0, 0.0, 1.0, 0.0),
            };
            for (i, o) in out.iter_mut().enumerate() {
                let env = if tremolo.is_some() { 1.0 + 0.5 * ts } else { 1.0 };
                *o += amp * env * s;
                let (nc, ns) = (c * dc - s * ds, s * dc + c * ds);
                c = nc;
                s = ns;
                let (ntc, nts) = (tc * tdc - ts * tds, ts * tdc + tc * tds);
                tc = ntc;
                ts = nts;
                if i % 4096 == 4095 {
                    let m = (c * c + s * s).sqrt();
                    c /= m;
                    s /= m;
                    let tm = (tc * tc + ts * ts).sqrt();
                    tc /= tm;
                    ts /= tm;
                }
            }
        };

        let jitter = Normal::new(0.0, cfg.amplitude_jitter.max(1e-300)).expect("checked");
        for (j, &f) in self.banks.pool_freqs.iter().enumerate() {
            let proj: f64 = self.banks.pool_mod[j].iter().zip(&song.style).map(|(a, b)| a * b).sum();
            let boost = if self.banks.genre_tones[song.genre].contains(&j) {
                cfg.genre_boost
            } else {
                0.0
            };
            let eps = if cfg.amplitude_jitter > 0.0 { jitter.sample(&mut r) } else { 0.0 };
            let amp = 0.08 * (boost + eps + 0.3 * proj).exp();
            add_tone(&mut out, f, amp, r.gen_range(0.0..2.0 * PI), None);
        }
        let lang = song.language;
        for &f in &self.banks.language_freqs[lang] {
            let rate = self.banks.language_tremolo_hz[lang];
            add_tone(&mut out, f, 0.12, r.gen_range(0.0..2.0 * PI), Some(rate));
        }
        for (d, &f) in self.banks.style_freqs.iter().enumerate() {
            let amp = 0.06 * (0.6 * song.style[d]).exp();
            add_tone(&mut out, f, amp, r.gen_range(0.0..2.0 * PI), None);
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    /// Clean waveform plus Gaussian noise of `noise_std`.
    pub fn waveform(&self, id: usize) -> Vec<f32> {
        let mut w = self.clean_waveform(id);
        if self.config.noise_std > 0.0 {
            let mut r = stream_rng(self.config.seed, STREAM_NOISE_BASE + id as u64);
            let normal = Normal::new(0.0, self.config.noise_std).expect("std checked");
            for v in w.iter_mut() {
                *v += normal.sample(&mut r) as f32;
            }
        }
        w
    }

    pub fn style_distance(&self, a: usize, b: usize) -> f64 {
        self.songs[a]
            .style
            .iter()
            .zip(&self.songs[b].style)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Ids of the songs whose fine-tuning data is withheld.
    pub fn holdout(&self) -> Vec<bool> {
        let mut r = stream_rng(self.config.seed, STREAM_PREFERENCE + 100);
        let mut ids: Vec<usize> = (0..self.len()).collect();
        ids.shuffle(&mut r);
        let n_hold = (self.config.holdout_fraction * self.len() as f64).round() as usize;
        let mut hold = vec![false; self.len()];
        for &id in &ids[..n_hold] {
            hold[id] = true;
        }
        hold
    }

    /// `k` nearest songs in style space among `pool`, excluding `id` itself; ties by id.
    pub fn style_neighbors(&self, id: usize, pool: &[usize], k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = pool
            .iter()
            .filter(|&&j| j != id)
            .map(|&j| (self.style_distance(id, j), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|(_, j)| j).collect()
    }

    /// Writes the manifest, raw waveforms and text files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("waveforms"))?;
        fs::create_dir_all(dir.join("texts"))?;
        let rows: Vec<Result<String>> = (0..self.len())
            .into_par_iter()
            .map(|id| {
                let wav_rel = format!("waveforms/{id:06}.f32");
                let txt_rel = format!("texts/{id:06}.txt");
                write_waveform(&dir.join(&wav_rel), self.config.sample_rate, &self.waveform(id))?;
                write_text(&dir.join(&txt_rel), &self.texts[id])?;
                let s = &self.songs[id];
                Ok(format!("{}\t{}\t{}\t{wav_rel}\t{txt_rel}\n", s.song_id, s.genre, s.language))
            })
            .collect();
        let mut manifest = fs::File::create(dir.join("manifest.tsv"))?;
        for row in rows {
            manifest.write_all(row?.as_bytes())?;
        }
        let songs = serde_json::to_string(&self.songs)?;
        fs::write(dir.join("songs.json"), songs)?;
        Ok(())
    }
}

const WAVE_MAGIC: &[u8; 4] = b"HWAV";

/// 8-byte header (`HWAV`, sample rate as u32 LE) followed by little-endian f32 samples.
pub fn write_waveform(path: &Path, sample_rate: u32, samples: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * samples.len());
    bytes.extend_from_slice(WAVE_MAGIC);
    bytes.extend_from_slice(&sample_rate.to_le_bytes());
    for s in samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_waveform(path: &Path) -> Result<(u32, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != WAVE_MAGIC || (bytes.len() - 8) % 4 != 0 {
        return Err(HtclError::Data(format!("{} is not a waveform file", path.display())));
    }
    let sr = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let samples = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((sr, samples))
}

pub fn write_text(path: &Path, doc: &TextDocument) -> Result<()> {
    let body = format!(
        "title: {}\nartists: {}\nlyrics: {}\n",
        doc.title,
        doc.artists.join(", "),
        doc.lyrics
    );
    fs::write(path, body)?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<TextDocument> {
    let content = fs::read_to_string(path)?;
    let mut doc = TextDocument::default();
    for line in content.lines() {
        if let Some(v) = line.strip_prefix("title: ").or_else(|| line.strip_prefix("title:")) {
            doc.title = v.to_string();
        } else if let Some(v) = line.strip_prefix("artists: ").or_else(|| line.strip_prefix("artists:")) {
            doc.artists = v
                .split(", ")
                .filter(|a| !a.is_empty())
                .map(String::from)
                .collect();
        } else if let Some(v) = line.strip_prefix("lyrics: ").or_else(|| line.strip_prefix("lyrics:")) {
            doc.lyrics = v.to_string();
        } else if !line.is_empty() {
            return Err(HtclError::Data(format!("{}: unknown text field in `{line}`", path.display())));
        }
    }
    Ok(doc)
}

/// One row of the corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub song_id: usize,
    pub genre: usize,
    pub language: usize,
    pub waveform: PathBuf,
    pub text: PathBuf,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(dir.join("manifest.tsv"))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || HtclError::Data(format!("manifest line {} is malformed", i + 1));
        if cols.len() != 5 {
            return Err(bad());
        }
        out.push(ManifestEntry {
            song_id: cols[0].parse().map_err(|_| bad())?,
            genre: cols[1].parse().map_err(|_| bad())?,
            language: cols[2].parse().map_err(|_| bad())?,
            waveform: dir.join(cols[3]),
            text: dir.join(cols[4]),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletSample {
    pub trig_song_id: usize,
    pub rec_song_id: usize,
    pub rec_text_present: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingUser {
    pub triggers: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingRow {
    pub user: usize,
    pub day: usize,
    pub history: Vec<usize>,
    pub candidate: usize,
    pub click: bool,
    pub favor: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceData {
    pub triplets: Vec<TripletSample>,
    /// (a, b) song pairs that co-occurred in a simulated session.
    pub cooccurrence: Vec<(usize, usize)>,
    pub matching: Vec<MatchingUser>,
    pub ranking: Vec<RankingRow>,
    /// Held-out (anchor, favoured) pairs.
    pub analysis_positive: Vec<(usize, usize)>,
    /// Held-out (anchor, random) pairs.
    pub analysis_negative: Vec<(usize, usize)>,
    /// Style-neighbour sets used for triplets, indexed by song id (empty for held-out songs).
    pub neighbor_sets: Vec<Vec<usize>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate_preference_data(corpus: &Corpus) -> Result<PreferenceData> {
    let cfg = &corpus.config;
    if corpus.is_empty() {
        return Err(HtclError::Data("empty corpus".into()));
    }
    let hold = corpus.holdout();
    let train: Vec<usize> = (0..corpus.len()).filter(|&i| !hold[i]).collect();
    let held: Vec<usize> = (0..corpus.len()).filter(|&i| hold[i]).collect();
    if train.len() <= cfg.neighbor_count || corpus.len() <= cfg.taste_neighborhood.max(cfg.triggers_per_user + 1) {
        return Err(HtclError::Data(format!(
            "corpus of {} songs ({} for fine-tuning) is too small for {} neighbours",
            corpus.len(),
            train.len(),
            cfg.neighbor_count
        )));
    }
    let all: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = stream_rng(cfg.seed, STREAM_PREFERENCE);

    let neighbor_sets: Vec<Vec<usize>> = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            if hold[i] {
                Vec::new()
            } else {
                corpus.style_neighbors(i, &train, cfg.neighbor_count)
            }
        })
        .collect();

    let random_other = |rng: &mut ChaCha8Rng, pool: &[usize], not: usize| loop {
        let j = pool[rng.gen_range(0..pool.len())];
        if j != not {
            break j;
        }
    };

    // favoured trigger -> recommendation triplets
    let mut seen = HashSet::new();
    let mut triplets = Vec::with_capacity(cfg.num_triplets);
    for _ in 0..cfg.num_triplets {
        let trig = train[rng.gen_range(0..train.len())];
        let rec = if rng.gen::<f64>() < cfg.acceptance_noise {
            random_other(&mut rng, &train, trig)
        } else {
            neighbor_sets[trig][rng.gen_range(0..neighbor_sets[trig].len())]
        };
        if seen.insert((trig, rec)) {
            triplets.push(TripletSample {
                trig_song_id: trig,
                rec_song_id: rec,
                rec_text_present: true,
            });
        }
    }

    // co-occurrence sessions: a style centre plus songs mixed in at session_mix_rate
    let mut cooccurrence = Vec::with_capacity(triplets.len());
    let mut seen_pairs = HashSet::new();
    let mut attempts = 0;
    while cooccurrence.len() < triplets.len() && attempts < 50 * triplets.len() {
        attempts += 1;
        let centre = train[rng.gen_range(0..train.len())];
        let session: Vec<usize> = (0..cfg.session_length)
            .map(|_| {
                if rng.gen::<f64>() < cfg.session_mix_rate {
                    train[rng.gen_range(0..train.len())]
                } else {
                    neighbor_sets[centre][rng.gen_range(0..neighbor_sets[centre].len())]
                }
            })
            .collect();
        for w in session.windows(2) {
            if w[0] != w[1] && seen_pairs.insert((w[0], w[1])) && cooccurrence.len() < triplets.len() {
                cooccurrence.push((w[0], w[1]));
            }
        }
    }

    // matching users: a preferred language and a taste centre in style space
    let by_language: Vec<Vec<usize>> = (0..cfg.languages)
        .map(|l| (0..corpus.len()).filter(|&i| corpus.songs[i].language == l).collect())
        .collect();
    let taste_sets: Vec<Vec<usize>> = (0..cfg.num_users)
        .map(|_| {
            let centre = rng.gen_range(0..corpus.len());
            let pool = &by_language[corpus.songs[centre].language];
            let mut near = corpus.style_neighbors(centre, pool, cfg.taste_neighborhood);
            near.push(centre);
            near
        })
        .collect();
    let mut matching = Vec::with_capacity(cfg.num_users);
    for taste in &taste_sets {
        let mut favoured: Vec<usize> = Vec::new();
        while favoured.len() < cfg.triggers_per_user + 1 {
            let s = if rng.gen::<f64>() < cfg.acceptance_noise {
                rng.gen_range(0..corpus.len())
            } else {
                taste[rng.gen_range(0..taste.len())]
            };
            if !favoured.contains(&s) {
                favoured.push(s);
            }
        }
        let target = favoured.pop().expect("non-empty");
        matching.push(MatchingUser {
            triggers: favoured,
            target,
        });
    }

    // ranking impressions: preference decays with style distance and favours the user's language
    let median_dist = {
        let mut d: Vec<f64> = (0..2000)
            .map(|_| {
                let a = rng.gen_range(0..corpus.len());
                let b = random_other(&mut rng, &all, a);
                corpus.style_distance(a, b)
            })
            .collect();
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    };
    let mut ranking = Vec::new();
    for (user, taste) in taste_sets.iter().enumerate() {
        let centre = *taste.last().expect("centre appended");
        let history: Vec<usize> = (0..cfg.ranking_history)
            .map(|_| taste[rng.gen_range(0..taste.len())])
            .collect();
        for day in 0..cfg.ranking_days {
            for _ in 0..cfg.impressions_per_day {
                let candidate = if rng.gen::<bool>() {
                    taste[rng.gen_range(0..taste.len())]
                } else {
                    rng.gen_range(0..corpus.len())
                };
                let rel = corpus.style_distance(centre, candidate) / median_dist;
                let lang = if corpus.songs[candidate].language == corpus.songs[centre].language {
                    1.0
                } else {
                    -1.0
                };
                let click = rng.gen::<f64>() < sigmoid(3.0 * (0.7 - rel) + lang);
                let favor = click && rng.gen::<f64>() < sigmoid(3.0 * (0.5 - rel) + lang);
                ranking.push(RankingRow {
                    user,
                    day,
                    history: history.clone(),
                    candidate,
                    click,
                    favor,
                });
            }
        }
    }

    // held-out analysis pairs anchored on songs never seen during fine-tuning
    let anchors = if held.is_empty() { &all } else { &held };
    let analysis_positive: Vec<(usize, usize)> = (0..cfg.analysis_pairs)
        .map(|_| {
            let a = anchors[rng.gen_range(0..anchors.len())];
            let near = corpus.style_neighbors(a, &all, cfg.neighbor_count);
            (a, near[rng.gen_range(0..near.len())])
        })
        .collect();
    let analysis_negative: Vec<(usize, usize)> = (0..cfg.analysis_pairs)
        .map(|_| {
            let a = anchors[rng.gen_range(0..anchors.len())];
            (a, random_other(&mut rng, &all, a))
        })
        .collect();

    Ok(PreferenceData {
        triplets,
        cooccurrence,
        matching,
        ranking,
        analysis_positive,
        analysis_negative,
        neighbor_sets,
    })
}

impl PreferenceData {
    /// Tab-separated id files: triplets, co-occurrence pairs, matching users, ranking rows, analysis pairs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut t = String::from("trig_song_id\trec_song_id\trec_text_present\n");
        for x in &self.triplets {
            t.push_str(&format!("{}\t{}\t{}\n", x.trig_song_id, x.rec_song_id, x.rec_text_present as u8));
        }
        fs::write(dir.join("triplets.tsv"), t)?;
        write_pairs(&dir.join("cooccurrence.tsv"), &self.cooccurrence)?;
        write_pairs(&dir.join("analysis_positive.tsv"), &self.analysis_positive)?;
        write_pairs(&dir.join("analysis_negative.tsv"), &self.analysis_negative)?;
        let mut m = String::from("target\ttriggers\n");
        for u in &self.matching {
            let trig: Vec<String> = u.triggers.iter().map(|i| i.to_string()).collect();
            m.push_str(&format!("{}\t{}\n", u.target, trig.join(",")));
        }
        fs::write(dir.join("matching.tsv"), m)?;
        let mut r = String::from("user\tday\thistory\tcandidate\tclick\tfavor\n");
        for row in &self.ranking {
            let h: Vec<String> = row.history.iter().map(|i| i.to_string()).collect();
            r.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                row.user,
                row.day,
                h.join(","),
                row.candidate,
                row.click as u8,
                row.favor as u8
            ));
        }
        fs::write(dir.join("ranking.tsv"), r)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let triplets = read_rows(&dir.join("triplets.tsv"), 3, |c| {
            Ok(TripletSample {
                trig_song_id: parse(c[0])?,
                rec_song_id: parse(c[1])?,
                rec_text_present: c[2] == "1",
            })
        })?;
        let matching = read_rows(&dir.join("matching.tsv"), 2, |c| {
            Ok(MatchingUser {
                target: parse(c[0])?,
                triggers: parse_list(c[1])?,
            })
        })?;
        let ranking = read_rows(&dir.join("ranking.tsv"), 6, |c| {
            Ok(RankingRow {
                user: parse(c[0])?,
                day: parse(c[1])?,
                history: parse_list(c[2])?,
                candidate: parse(c[3])?,
                click: c[4] == "1",
                favor: c[5] == "1",
            })
        })?;
        Ok(Self {
            triplets,
            cooccurrence: read_pairs(&dir.join("cooccurrence.tsv"))?,
            matching,
            ranking,
            analysis_positive: read_pairs(&dir.join("analysis_positive.tsv"))?,
            analysis_negative: read_pairs(&dir.join("analysis_negative.tsv"))?,
            neighbor_sets: Vec::new(),
        })
    }
}

fn parse(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| HtclError::Data(format!("`{s}` is not a song id")))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').filter(|x| !x.is_empty()).map(parse).collect()
}

fn write_pairs(path: &Path, pairs: &[(usize, usize)]) -> Result<()> {
    let mut s = String::from("a\tb\n");
    for (a, b) in pairs {
        s.push_str(&format!("{a}\t{b}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    read_rows(path, 2, |c| Ok((parse(c[0])?, parse(c[1])?)))
}

fn read_rows<R>(path: &Path, cols: usize, f: impl Fn(&[&str]) -> Result<R>) -> Result<Vec<R>> {
    let content = fs::read_to_string(path)
        .map_err(|e| HtclError::Data(format!("cannot read {}: {e}", path.display())))?;
    content
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            if c.len() != cols {
                return Err(HtclError::Data(format!("{}: expected {cols} columns in `{l}`", path.display())));
            }
            f(&c)
        })
        .collect()
}
