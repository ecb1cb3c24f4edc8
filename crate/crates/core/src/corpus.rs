//! Deterministic synthetic "speech" corpus.
//!
//! Each phoneme class owns a fixed spectral template, pitch factor, energy
//! factor, and duration (2–6 frames). A speaker transforms templates through
//! three well-separated parameters: base pitch scales the F0 channel,
//! spectral tilt slopes the spectrum, and energy gain scales it. Rendering a
//! token sequence concatenates the per-phoneme frames, so ground-truth
//! pitch/energy/duration tracks come for free — the synthetic stand-in for
//! forced alignment.
//!
//! Feature layout: `F = 16` channels; channel 0 carries the F0 proxy, the
//! remaining 15 carry the spectrum. Word-space and the terminal
//! end-of-sequence token render as one frame of silence each, so the total
//! frame count always equals the sum of token durations.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SPACE: usize = 3;
/// First phoneme token id; phonemes occupy `[PHONEME_BASE, VOCAB_SIZE)`.
pub const PHONEME_BASE: usize = 4;
pub const PHONEME_COUNT: usize = 24;
pub const VOCAB_SIZE: usize = PHONEME_BASE + PHONEME_COUNT;

/// Feature channels per frame (channel 0 = F0 proxy, 1..16 = spectrum).
pub const FEATURE_DIM: usize = 16;
const SPECTRUM_DIM: usize = FEATURE_DIM - 1;

pub fn is_phoneme(token: usize) -> bool {
    (PHONEME_BASE..VOCAB_SIZE).contains(&token)
}

/// Frames a phoneme class occupies (silence tokens take one frame).
pub fn class_duration(token: usize) -> usize {
    if is_phoneme(token) {
        2 + (token - PHONEME_BASE) % 5
    } else {
        1
    }
}

/// Per-class multiplier on the speaker's base pitch; zero for silence.
pub fn class_pitch_factor(token: usize) -> f64 {
    if is_phoneme(token) {
        let q = (token - PHONEME_BASE) % 7;
        0.8 + 0.4 * q as f64 / 6.0
    } else {
        0.0
    }
}

/// Per-class multiplier on the speaker's energy gain; zero for silence.
pub fn class_energy_factor(token: usize) -> f64 {
    if is_phoneme(token) {
        let q = (token - PHONEME_BASE) % 4;
        0.7 + 0.3 * q as f64 / 3.0
    } else {
        0.0
    }
}

/// The class's spectral shape over the 15 spectrum channels, in (0, 1).
/// Silence is all zeros.
pub fn class_template(token: usize) -> [f64; SPECTRUM_DIM] {
    let mut t = [0.0; SPECTRUM_DIM];
    if is_phoneme(token) {
        let q = (token - PHONEME_BASE) as f64;
        for (c, slot) in t.iter_mut().enumerate() {
            let a = ((q + 1.0) * (c as f64 + 2.0) * 0.37).sin();
            let b = ((q + 3.0) * (c as f64 + 1.0) * 0.23).cos();
            *slot = 0.5 + 0.3 * a + 0.2 * b;
        }
    }
    t
}

/// One synthetic voice. Parameter bands are disjoint across speaker ids, so
/// speakers stay linearly separable by construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpeaker {
    pub id: usize,
    pub f0_base: f64,
    pub spectral_tilt: f64,
    pub energy_gain: f64,
}

impl ToySpeaker {
    /// Draws speaker `id`'s parameters from its reserved bands.
    pub fn sample(id: usize, rng: &mut ChaCha8Rng) -> ToySpeaker {
        let k = id as f64;
        ToySpeaker {
            id,
            f0_base: 1.0 + 0.6 * k + rng.gen_range(0.0..0.3),
            spectral_tilt: -0.9 + 0.5 * k + rng.gen_range(0.0..0.25),
            energy_gain: 0.8 + 0.3 * k + rng.gen_range(0.0..0.15),
        }
    }

    /// The exact frame this speaker produces for one token — every frame of
    /// that token's span is a copy of this signature (before noise).
    pub fn frame_signature(&self, token: usize) -> [f64; FEATURE_DIM] {
        let mut frame = [0.0; FEATURE_DIM];
        frame[0] = self.f0_base * class_pitch_factor(token);
        let template = class_template(token);
        let energy = self.energy_gain * class_energy_factor(token);
        for (c, t) in template.iter().enumerate() {
            let tilt = (self.spectral_tilt * (c as f64 - 7.0) / 14.0).exp();
            frame[c + 1] = energy * tilt * t;
        }
        frame
    }
}

/// Ground-truth per-token prosody emitted alongside rendered features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prosody {
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub duration: Vec<usize>,
}

/// One corpus item: token text (terminal EOS, no BOS/PAD), rendered
/// features, ground-truth prosody, and the speaker who produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub text: Vec<usize>,
    pub speaker: usize,
    pub features: Array2<f64>,
    pub prosody: Prosody,
}

/// Rejects token sequences that violate the storage convention.
pub fn validate_text(text: &[usize]) -> Result<()> {
    if text.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    if *text.last().unwrap() != EOS {
        return Err(Error::contract("token sequence must end with EOS"));
    }
    for (i, &t) in text.iter().enumerate() {
        if t >= VOCAB_SIZE {
            return Err(Error::contract(format!("unknown token id {t}")));
        }
        if t == PAD || t == BOS {
            return Err(Error::contract(format!("token {t} not allowed in stored text")));
        }
        if t == EOS && i + 1 != text.len() {
            return Err(Error::contract("EOS must be terminal"));
        }
    }
    Ok(())
}

/// The text without its terminal EOS — the part metrics score.
pub fn core_tokens(text: &[usize]) -> &[usize] {
    match text.last() {
        Some(&EOS) => &text[..text.len() - 1],
        _ => text,
    }
}

/// Standard-normal draw via Box-Muller (the crate avoids a distributions
/// dependency for this one use).
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Utterance-level variability layered over the canonical templates, the
/// stand-in for the natural variability of recorded speech: one tempo factor
/// per utterance stretches every duration, each token's pitch wanders around
/// the speaker's line, and iid observation noise covers every feature cell.
/// All sigmas at zero reproduce the canonical render exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderJitter {
    /// Std-dev of additive Gaussian noise on every feature cell.
    pub noise_sigma: f64,
    /// Log-normal sigma of the per-utterance tempo factor scaling durations.
    pub tempo_sigma: f64,
    /// Log-normal sigma of the per-token pitch wander.
    pub pitch_sigma: f64,
}

/// Renders a token sequence for one speaker. With `jitter` absent (or all
/// sigmas zero) the render is the canonical template realization: class
/// durations, the speaker's exact pitch line, no noise. With `jitter`
/// present the utterance gets a random tempo, per-token pitch wander, and
/// cell noise, all drawn from the supplied stream — deterministic given
/// (text, speaker, stream state). Ground-truth prosody always reports the
/// realized values.
pub fn render(
    text: &[usize],
    speaker: &ToySpeaker,
    jitter: Option<(&mut ChaCha8Rng, RenderJitter)>,
) -> Result<(Array2<f64>, Prosody)> {
    validate_text(text)?;
    let mut jitter = jitter;
    let tempo = match jitter.as_mut() {
        Some((rng, j)) => (j.tempo_sigma * gauss(rng)).exp(),
        None => 1.0,
    };
    let spans: Vec<(usize, f64)> = text
        .iter()
        .map(|&token| {
            let dur = ((class_duration(token) as f64 * tempo).round() as usize).max(1);
            let wander = match jitter.as_mut() {
                Some((rng, j)) => (j.pitch_sigma * gauss(rng)).exp(),
                None => 1.0,
            };
            (dur, wander)
        })
        .collect();
    let total_frames: usize = spans.iter().map(|(d, _)| d).sum();
    let mut features = Array2::<f64>::zeros((total_frames, FEATURE_DIM));
    let mut prosody = Prosody {
        pitch: Vec::with_capacity(text.len()),
        energy: Vec::with_capacity(text.len()),
        duration: Vec::with_capacity(text.len()),
    };
    let mut cursor = 0;
    for (&token, &(dur, wander)) in text.iter().zip(&spans) {
        let mut frame = speaker.frame_signature(token);
        frame[0] *= wander;
        for _ in 0..dur {
            for (c, v) in frame.iter().enumerate() {
                features[[cursor, c]] = *v;
            }
            cursor += 1;
        }
        prosody.pitch.push(frame[0]);
        prosody
            .energy
            .push(speaker.energy_gain * class_energy_factor(token));
        prosody.duration.push(dur);
    }
    if let Some((rng, j)) = jitter.as_mut() {
        if j.noise_sigma > 0.0 {
            for v in features.iter_mut() {
                *v += j.noise_sigma * gauss(rng);
            }
        }
    }
    Ok((features, prosody))
}

/// Recovers per-token durations from canonically rendered features (no
/// jitter) by matching frame signatures: consecutive equal tokens share one
/// signature run, which splits evenly because canonical durations are a
/// class property.
pub fn derive_durations(
    features: &Array2<f64>,
    speaker: &ToySpeaker,
    text: &[usize],
) -> Result<Vec<usize>> {
    validate_text(text)?;
    let t_total = features.nrows();
    let mut durations = vec![0usize; text.len()];
    let mut cursor = 0;
    let mut i = 0;
    while i < text.len() {
        let mut group = 1;
        while i + group < text.len() && text[i + group] == text[i] {
            group += 1;
        }
        let signature = speaker.frame_signature(text[i]);
        let mut run = 0;
        while cursor + run < t_total {
            let row = features.row(cursor + run);
            if row.iter().zip(signature.iter()).all(|(a, b)| a == b) {
                run += 1;
            } else {
                break;
            }
        }
        if run == 0 || run % group != 0 {
            return Err(Error::format(format!(
                "frame run {run} does not divide into {group} repeated tokens at position {i}"
            )));
        }
        let per = run / group;
        for d in durations.iter_mut().skip(i).take(group) {
            *d = per;
        }
        cursor += run;
        i += group;
    }
    if cursor != t_total {
        return Err(Error::format(format!(
            "{} trailing frames not claimed by any token",
            t_total - cursor
        )));
    }
    Ok(durations)
}

/// Sizes and variability of a generated corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub paired: usize,
    pub unpaired: usize,
    pub validation: usize,
    pub test: usize,
    /// Word inventory available to paired sentences.
    pub paired_words: usize,
    /// Full word inventory (superset) for unpaired/validation/test text.
    pub extended_words: usize,
    /// Additive feature noise on every rendered utterance.
    pub noise_sigma: f64,
    /// Per-utterance tempo variability (log-normal sigma on durations).
    pub tempo_sigma: f64,
    /// Per-token pitch wander (log-normal sigma on the F0 channel).
    pub pitch_sigma: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            speakers: 4,
            paired: 200,
            unpaired: 800,
            validation: 40,
            test: 40,
            paired_words: 36,
            extended_words: 120,
            noise_sigma: 0.01,
            tempo_sigma: 0.12,
            pitch_sigma: 0.08,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::config("corpus needs at least 2 speakers"));
        }
        if self.paired == 0 || self.validation == 0 || self.test == 0 {
            return Err(Error::config("paired/validation/test sizes must be positive"));
        }
        if self.paired_words < 4 || self.extended_words < self.paired_words {
            return Err(Error::config(
                "word inventories must satisfy 4 <= paired_words <= extended_words",
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("tempo_sigma", self.tempo_sigma),
            ("pitch_sigma", self.pitch_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// The rendering variability this config asks for, or `None` when all
    /// sigmas are zero (canonical rendering).
    pub fn jitter(&self) -> Option<RenderJitter> {
        let j = RenderJitter {
            noise_sigma: self.noise_sigma,
            tempo_sigma: self.tempo_sigma,
            pitch_sigma: self.pitch_sigma,
        };
        (j.noise_sigma > 0.0 || j.tempo_sigma > 0.0 || j.pitch_sigma > 0.0).then_some(j)
    }
}

/// A fully generated dataset: paired utterances (with features and prosody),
/// unpaired text, and held-out validation/test sets. Every rendered split
/// carries the same observation noise, standing in for the natural
/// variability of recorded speech.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub config: CorpusConfig,
    pub seed: u64,
    pub speakers: Vec<ToySpeaker>,
    pub paired: Vec<Utterance>,
    pub unpaired_texts: Vec<Vec<usize>>,
    pub validation: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

fn sample_word(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.gen_range(2..=5);
    (0..len)
        .map(|_| PHONEME_BASE + rng.gen_range(0..PHONEME_COUNT))
        .collect()
}

fn sample_sentence(rng: &mut ChaCha8Rng, inventory: &[Vec<usize>]) -> Vec<usize> {
    let words = rng.gen_range(3..=10);
    let mut text = Vec::new();
    for w in 0..words {
        if w > 0 {
            text.push(SPACE);
        }
        let idx = rng.gen_range(0..inventory.len());
        text.extend_from_slice(&inventory[idx]);
    }
    text.push(EOS);
    text
}

fn sample_distinct_sentences(
    rng: &mut ChaCha8Rng,
    inventory: &[Vec<usize>],
    count: usize,
    taken: &mut HashSet<Vec<usize>>,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > count * 1000 {
            return Err(Error::contract(
                "sentence grammar exhausted while sampling distinct sentences",
            ));
        }
        let s = sample_sentence(rng, inventory);
        if taken.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Generates the full corpus from one seed. Identical seeds and configs
/// produce bit-identical corpora.
pub fn make_splits(config: &CorpusConfig, seed: u64) -> Result<CorpusSplit> {
    config.validate()?;
    // Independent streams per concern so resizing one split never reshuffles
    // the others.
    let mut rng_words = ChaCha8Rng::seed_from_u64(seed ^ 0x776f_7264);
    let mut rng_speakers = ChaCha8Rng::seed_from_u64(seed ^ 0x7370_6b72);
    let mut rng_text = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874);
    let mut rng_noise = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973);

    // Word inventory: the first `paired_words` entries form the paired
    // language; the full list is the extended language for everything else.
    let mut words: Vec<Vec<usize>> = Vec::with_capacity(config.extended_words);
    let mut seen_words = HashSet::new();
    let mut attempts = 0;
    while words.len() < config.extended_words {
        attempts += 1;
        if attempts > config.extended_words * 1000 {
            return Err(Error::contract("word grammar exhausted"));
        }
        let w = sample_word(&mut rng_words);
        if seen_words.insert(w.clone()) {
            words.push(w);
        }
    }
    let paired_inventory = &words[..config.paired_words];
    let extended_inventory = &words[..];

    let speakers: Vec<ToySpeaker> = (0..config.speakers)
        .map(|id| ToySpeaker::sample(id, &mut rng_speakers))
        .collect();

    let mut taken = HashSet::new();
    let paired_texts =
        sample_distinct_sentences(&mut rng_text, paired_inventory, config.paired, &mut taken)?;
    let unpaired_texts =
        sample_distinct_sentences(&mut rng_text, extended_inventory, config.unpaired, &mut taken)?;
    let validation_texts =
        sample_distinct_sentences(&mut rng_text, extended_inventory, config.validation, &mut taken)?;
    let test_texts =
        sample_distinct_sentences(&mut rng_text, extended_inventory, config.test, &mut taken)?;

    let jitter = config.jitter();
    let mut render_set = |texts: Vec<Vec<usize>>| -> Result<Vec<Utterance>> {
        let mut out = Vec::with_capacity(texts.len());
        for (i, text) in texts.into_iter().enumerate() {
            let speaker = &speakers[i % speakers.len()];
            let jitter_arg = jitter.map(|j| (&mut rng_noise, j));
            let (features, prosody) = render(&text, speaker, jitter_arg)?;
            out.push(Utterance {
                text,
                speaker: speaker.id,
                features,
                prosody,
            });
        }
        Ok(out)
    };
    let paired = render_set(paired_texts)?;
    let validation = render_set(validation_texts)?;
    let test = render_set(test_texts)?;

    Ok(CorpusSplit {
        config: config.clone(),
        seed,
        speakers,
        paired,
        unpaired_texts,
        validation,
        test,
    })
}

// ── Serialization ───────────────────────────────────────────────────────
//
// Directory layout: `manifest.json` holds everything except features;
// features live in `features/<split><index>.bin` as a little-endian header
// (u32 rows, u32 cols) followed by row-major f64 values.

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    text: Vec<usize>,
    speaker: usize,
    prosody: Prosody,
    features_file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    config: CorpusConfig,
    speakers: Vec<ToySpeaker>,
    paired: Vec<UtteranceRecord>,
    unpaired_texts: Vec<Vec<usize>>,
    validation: Vec<UtteranceRecord>,
    test: Vec<UtteranceRecord>,
}

const MANIFEST_VERSION: u32 = 1;

fn write_features(path: &Path, features: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + features.len() * 8);
    buf.extend_from_slice(&(features.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.ncols() as u32).to_le_bytes());
    for v in features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_features(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::format(format!("feature file {} truncated", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + rows * cols * 8;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "feature file {}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::format(format!("feature file {}: {e}", path.display())))
}

/// Writes a corpus to `dir` (creating it), one manifest plus one binary
/// feature file per utterance.
pub fn save_corpus(dir: &Path, corpus: &CorpusSplit) -> Result<()> {
    let features_dir = dir.join("features");
    std::fs::create_dir_all(&features_dir)?;
    let record =
        |split: &str, items: &[Utterance]| -> Result<Vec<UtteranceRecord>> {
            let mut out = Vec::with_capacity(items.len());
            for (i, u) in items.iter().enumerate() {
                let file = format!("features/{split}{i:05}.bin");
                write_features(&dir.join(&file), &u.features)?;
                out.push(UtteranceRecord {
                    text: u.text.clone(),
                    speaker: u.speaker,
                    prosody: u.prosody.clone(),
                    features_file: file,
                });
            }
            Ok(out)
        };
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        seed: corpus.seed,
        config: corpus.config.clone(),
        speakers: corpus.speakers.clone(),
        paired: record("paired", &corpus.paired)?,
        unpaired_texts: corpus.unpaired_texts.clone(),
        validation: record("validation", &corpus.validation)?,
        test: record("test", &corpus.test)?,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Loads a corpus previously written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<CorpusSplit> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::missing(format!(
            "corpus manifest {}",
            manifest_path.display()
        )));
    }
    let json = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::format(format!("corpus manifest: {e}")))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::format(format!(
            "corpus manifest version {} unsupported (expected {MANIFEST_VERSION})",
            manifest.format_version
        )));
    }
    let load_set = |records: Vec<UtteranceRecord>| -> Result<Vec<Utterance>> {
        records
            .into_iter()
            .map(|r| {
                Ok(Utterance {
                    features: read_features(&dir.join(&r.features_file))?,
                    text: r.text,
                    speaker: r.speaker,
                    prosody: r.prosody,
                })
            })
            .collect()
    };
    Ok(CorpusSplit {
        config: manifest.config,
        seed: manifest.seed,
        speakers: manifest.speakers,
        paired: load_set(manifest.paired)?,
        unpaired_texts: manifest.unpaired_texts,
        validation: load_set(manifest.validation)?,
        test: load_set(manifest.test)?,
    })
}
