//! Evaluation metrics: phoneme error rate, dynamic-time-warping alignment,
//! mel-cepstral distortion, F0 RMSE, and perplexity curves.
//!
//! The spectral metrics operate on the toy feature space: cepstra come from
//! an orthonormal cosine transform of log-compressed features, and the
//! fundamental-frequency proxy is feature channel 0 (the corpus renders
//! pitch there). Absolute values are therefore internally consistent rather
//! than comparable to real-speech dB or Hz numbers.

use crate::asr::AsrModel;
use crate::autodiff::Tape;
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::speaker::SpeakerModel;
use crate::tts::{SynthesisMode, TtsModel};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Cepstral order used by [`mcd`]: coefficients 1..=K enter the distortion.
pub const CEPSTRAL_ORDER: usize = 8;
/// Features are clamped to this floor before the log, so silent or negative
/// cells cannot produce infinities.
pub const LOG_FLOOR: f64 = 1e-3;

/// Minimum edit distance (insertions, deletions, substitutions all cost 1).
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Phoneme error rate: edit distance over reference length, as a percentage.
pub fn per(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("error rate needs a non-empty reference"));
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64 * 100.0)
}

/// A monotone alignment between two sequences: starts at (0,0), ends at the
/// last pair, and advances by (1,0), (0,1), or (1,1) at each step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPath(pub Vec<(usize, usize)>);

impl AlignmentPath {
    /// Checks the structural invariants against sequence lengths.
    pub fn validate(&self, len_a: usize, len_b: usize) -> Result<()> {
        let p = &self.0;
        if p.is_empty() || p[0] != (0, 0) || *p.last().unwrap() != (len_a - 1, len_b - 1) {
            return Err(Error::contract("alignment must span (0,0) to the final pair"));
        }
        for w in p.windows(2) {
            let (di, dj) = (w[1].0 as isize - w[0].0 as isize, w[1].1 as isize - w[0].1 as isize);
            if !matches!((di, dj), (1, 0) | (0, 1) | (1, 1)) {
                return Err(Error::contract("alignment steps must be (1,0), (0,1), or (1,1)"));
            }
        }
        Ok(())
    }
}

/// Dynamic time warping over index pairs: finds the monotone path minimizing
/// the cumulative cost `dist(i, j)` summed over every pair on the path.
/// Ties in the backtrack prefer the diagonal, then the first-sequence step,
/// so the returned path is deterministic.
pub fn dtw_indexed(
    len_a: usize,
    len_b: usize,
    mut dist: impl FnMut(usize, usize) -> f64,
) -> Result<(f64, AlignmentPath)> {
    if len_a == 0 || len_b == 0 {
        return Err(Error::contract("alignment needs two non-empty sequences"));
    }
    let mut cum = Array2::<f64>::zeros((len_a, len_b));
    for i in 0..len_a {
        for j in 0..len_b {
            let d = dist(i, j);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cum[[0, j - 1]],
                (_, 0) => cum[[i - 1, 0]],
                _ => cum[[i - 1, j - 1]].min(cum[[i - 1, j]].min(cum[[i, j - 1]])),
            };
            cum[[i, j]] = d + best;
        }
    }
    let mut path = vec![(len_a - 1, len_b - 1)];
    let (mut i, mut j) = (len_a - 1, len_b - 1);
    while (i, j) != (0, 0) {
        let (ni, nj) = match (i, j) {
            (0, _) => (0, j - 1),
            (_, 0) => (i - 1, 0),
            _ => {
                let diag = cum[[i - 1, j - 1]];
                let up = cum[[i - 1, j]];
                let left = cum[[i, j - 1]];
                if diag <= up && diag <= left {
                    (i - 1, j - 1)
                } else if up <= left {
                    (i - 1, j)
                } else {
                    (i, j - 1)
                }
            }
        };
        path.push((ni, nj));
        i = ni;
        j = nj;
    }
    path.reverse();
    Ok((cum[[len_a - 1, len_b - 1]], AlignmentPath(path)))
}

/// [`dtw_indexed`] over two slices with an explicit frame distance.
pub fn dtw<T>(a: &[T], b: &[T], dist: impl Fn(&T, &T) -> f64) -> Result<(f64, AlignmentPath)> {
    dtw_indexed(a.len(), b.len(), |i, j| dist(&a[i], &b[j]))
}

/// Orthonormal cosine-transform cepstrum of one log-compressed frame,
/// coefficients 1..=k_max (the energy coefficient c0 is excluded).
pub fn cepstrum(frame: &[f64], k_max: usize) -> Vec<f64> {
    let n = frame.len();
    let logs: Vec<f64> = frame.iter().map(|&x| x.max(LOG_FLOOR).ln()).collect();
    let scale = (2.0 / n as f64).sqrt();
    (1..=k_max)
        .map(|k| {
            scale
                * logs
                    .iter()
                    .enumerate()
                    .map(|(t, &l)| {
                        l * (std::f64::consts::PI * k as f64 * (2 * t + 1) as f64
                            / (2 * n) as f64)
                            .cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

fn cepstral_distortion(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    10.0 / std::f64::consts::LN_10 * (2.0 * sq).sqrt()
}

/// Mel-cepstral distortion between two feature sequences: per-pair
/// distortion `(10/ln 10)·√(2·Σ_{k=1..K}(c_k−ĉ_k)²)` averaged over the
/// warping path that minimizes exactly that distortion.
pub fn mcd(x: &Array2<f64>, x_hat: &Array2<f64>) -> Result<f64> {
    if x.ncols() != x_hat.ncols() {
        return Err(Error::contract("distortion needs matching feature dimensions"));
    }
    let ca: Vec<Vec<f64>> = x
        .rows()
        .into_iter()
        .map(|r| cepstrum(r.as_slice().unwrap(), CEPSTRAL_ORDER))
        .collect();
    let cb: Vec<Vec<f64>> = x_hat
        .rows()
        .into_iter()
        .map(|r| cepstrum(r.as_slice().unwrap(), CEPSTRAL_ORDER))
        .collect();
    let (cost, path) = dtw(&ca, &cb, |a, b| cepstral_distortion(a, b))?;
    Ok(cost / path.0.len() as f64)
}

/// RMSE of the fundamental-frequency proxy (feature channel 0) along the
/// warping path computed on the full feature vectors.
pub fn f0_rmse(x: &Array2<f64>, x_hat: &Array2<f64>) -> Result<f64> {
    if x.ncols() != x_hat.ncols() {
        return Err(Error::contract("RMSE needs matching feature dimensions"));
    }
    let (_, path) = dtw_indexed(x.nrows(), x_hat.nrows(), |i, j| {
        x.row(i)
            .iter()
            .zip(x_hat.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    })?;
    let sq_sum: f64 = path
        .0
        .iter()
        .map(|&(i, j)| {
            let d = x[[i, 0]] - x_hat[[j, 0]];
            d * d
        })
        .sum();
    Ok((sq_sum / path.0.len() as f64).sqrt())
}

/// Scores for one evaluated split.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    /// Phoneme error rate of recognizer transcripts, percent.
    pub per_percent: f64,
    /// Mean mel-cepstral distortion of free-mode synthesis, toy dB.
    pub mcd_db: f64,
    /// Mean F0-proxy RMSE of free-mode synthesis, toy units.
    pub f0_rmse: f64,
    /// Mean per-utterance perplexity of the recognizer on real speech.
    pub perplexity: f64,
    /// How many utterances the means cover.
    pub utterances: usize,
    /// Hash of the configuration the evaluated model was trained with.
    pub config_hash: String,
}

/// One measurement on the perplexity curve.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PerplexityPoint {
    /// Which training phase produced the parameters ("pretrained", "a", "b").
    pub phase: String,
    /// Epoch within that phase; the pretrained point uses 0.
    pub epoch: usize,
    /// Mean perplexity of synthesized validation speech under the frozen
    /// pretrained recognizer.
    pub synthesized: f64,
}

/// Perplexity of synthesized validation speech across training, with the
/// constant real-speech baseline under the same frozen recognizer.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PerplexityCurve {
    pub points: Vec<PerplexityPoint>,
    pub human_baseline: f64,
}

impl PerplexityCurve {
    /// CSV with one row per measurement; the baseline repeats so the file is
    /// directly plottable as two series over a shared epoch axis.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,phase,epoch,synthesized_perplexity,human_baseline\n");
        for (step, p) in self.points.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                step, p.phase, p.epoch, p.synthesized, self.human_baseline
            ));
        }
        out
    }
}

/// Mean per-utterance perplexity of synthesized validation speech, measured
/// by a recognizer held in a separate (frozen, pretrained) store. For each
/// utterance the synthesizer reads the text in free mode, conditioned on the
/// utterance's own recording as the speaker reference.
pub fn synthesized_perplexity(
    joint_store: &ParamStore,
    tts: &TtsModel,
    speaker: &SpeakerModel,
    pretrained_store: &ParamStore,
    asr: &AsrModel,
    validation: &[Utterance],
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::contract("perplexity needs a non-empty validation set"));
    }
    let mut total = 0.0;
    for u in validation {
        let mut tape = Tape::new();
        let joint = joint_store.bind_const(&mut tape, &["tts.", "speaker."]);
        let pre = pretrained_store.bind_const(&mut tape, &["asr."]);
        let r = tape.constant(u.features.clone().into_dyn());
        let s = speaker.embed(&mut tape, &joint, r)?;
        let synth = tts.synthesize(&mut tape, &joint, &u.text, s, SynthesisMode::Free)?;
        let ce = asr.ce_loss(&mut tape, &pre, synth.post_output, &u.text)?;
        total += tape.scalar(ce).exp();
    }
    Ok(total / validation.len() as f64)
}

/// Mean per-utterance perplexity of the recorded validation speech under the
/// same recognizer — the constant baseline the synthesized curve is compared
/// against.
pub fn human_perplexity(
    pretrained_store: &ParamStore,
    asr: &AsrModel,
    validation: &[Utterance],
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::contract("perplexity needs a non-empty validation set"));
    }
    let mut total = 0.0;
    for u in validation {
        total += asr.perplexity(pretrained_store, &u.features, &u.text)?;
    }
    Ok(total / validation.len() as f64)
}
