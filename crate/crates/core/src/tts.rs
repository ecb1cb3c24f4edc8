//! Non-autoregressive multi-speaker text-to-speech.
//!
//! A text encoder turns phoneme tokens into hidden states, a projected
//! speaker embedding is added to every state, and a variance adaptor predicts
//! per-phoneme pitch, energy, and duration. Pitch and energy are re-injected
//! as learned additive projections, the length regulator expands states to
//! frame rate, and a self-attention decoder plus a convolutional post-net
//! produce the spectrogram in two stages (`decoder_output`, then
//! `post_output` = decoder output + residual).
//!
//! Parameters are split across `tts.enc`, `tts.va`, `tts.va.dur`, `tts.dec`,
//! and `tts.post`. The duration predictor sits in its own sub-partition so it
//! can stay frozen while the rest of the variance adaptor keeps training.

use crate::autodiff::{Tape, Var};
use crate::blocks::{positional_encoding, round_clamp_durations, BlockConfig, EncoderBlock, Linear, Norm};
use crate::blocks::length_regulator;
use crate::corpus::{CorpusSplit, Utterance, FEATURE_DIM, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::params::{uniform_init, xavier_init, Bound, GradAccum, Optimizer, OptimizerKind, ParamId, ParamStore};
use crate::speaker::SpeakerModel;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const TTS_ENC: &str = "tts.enc";
pub const TTS_VA: &str = "tts.va";
pub const TTS_VA_DUR: &str = "tts.va.dur";
pub const TTS_DEC: &str = "tts.dec";
pub const TTS_POST: &str = "tts.post";

/// Architecture of the synthesizer.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TtsConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Width of the incoming speaker embedding.
    pub speaker_dim: usize,
    pub encoder: BlockConfig,
    pub decoder: BlockConfig,
    /// Hidden width of the pitch/energy/duration predictor MLPs.
    pub variance_hidden: usize,
    pub postnet_hidden: usize,
    pub postnet_kernel: usize,
    /// Safety cap on a single predicted duration in free mode.
    pub max_duration: usize,
}

impl Default for TtsConfig {
    fn default() -> Self {
        let block = BlockConfig {
            model_dim: 64,
            head_count: 2,
            ff_dim: 128,
            layer_count: 2,
        };
        TtsConfig {
            vocab_size: VOCAB_SIZE,
            feature_dim: FEATURE_DIM,
            speaker_dim: 16,
            encoder: block,
            decoder: block,
            variance_hidden: 32,
            postnet_hidden: 32,
            postnet_kernel: 5,
            max_duration: 64,
        }
    }
}

impl TtsConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.model_dim != self.decoder.model_dim {
            return Err(Error::config("encoder and decoder widths must match"));
        }
        if self.vocab_size < 2 || self.feature_dim == 0 || self.speaker_dim == 0 {
            return Err(Error::config("vocab, feature, and speaker dims must be positive"));
        }
        if self.variance_hidden == 0 || self.postnet_hidden == 0 {
            return Err(Error::config("hidden widths must be positive"));
        }
        if self.postnet_kernel % 2 == 0 || self.postnet_kernel == 0 {
            return Err(Error::config("post-net kernel must be odd"));
        }
        if self.max_duration == 0 {
            return Err(Error::config("max duration must be at least 1"));
        }
        Ok(())
    }
}

/// Two-layer scalar predictor over hidden states: `[L, D] -> [L, 1]`.
struct ScalarHead {
    hidden: Linear,
    out: Linear,
}

impl ScalarHead {
    fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        partition: &str,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
    ) -> Self {
        ScalarHead {
            hidden: Linear::define(store, rng, partition, &format!("{prefix}.hidden"), d_in, d_hidden),
            out: Linear::define(store, rng, partition, &format!("{prefix}.out"), d_hidden, 1),
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.apply(tape, bound, x)?;
        let h = tape.relu(h);
        self.out.apply(tape, bound, h)
    }
}

/// Parameter handles for one synthesizer.
pub struct TtsModel {
    pub cfg: TtsConfig,
    embed: ParamId,
    enc_blocks: Vec<EncoderBlock>,
    enc_norm: Norm,
    speaker_proj: Linear,
    pitch_head: ScalarHead,
    energy_head: ScalarHead,
    pitch_proj: Linear,
    energy_proj: Linear,
    duration_head: ScalarHead,
    dec_blocks: Vec<EncoderBlock>,
    dec_norm: Norm,
    out_proj: Linear,
    post1_w: ParamId,
    post1_b: ParamId,
    post2_w: ParamId,
    post2_b: ParamId,
}

/// How the variance adaptor is driven during synthesis.
pub enum SynthesisMode<'a> {
    /// Ground-truth prosody conditions the decoder; predictions are still
    /// produced so the loss can regress them.
    Teacher {
        pitch: &'a [f64],
        energy: &'a [f64],
        duration: &'a [usize],
    },
    /// Everything predicted; durations round to whole frames (clamped to at
    /// least one) and gradients do not flow through the expansion counts.
    Free,
}

/// All tape handles produced by one synthesis pass.
pub struct Synthesis {
    /// Final spectrogram X̂ (post-net applied), `[T, F]`.
    pub post_output: Var,
    /// Decoder-only spectrogram X̂_D, `[T, F]`.
    pub decoder_output: Var,
    /// Predicted per-phoneme pitch `[L, 1]`.
    pub pitch_pred: Var,
    /// Predicted per-phoneme energy `[L, 1]`.
    pub energy_pred: Var,
    /// Predicted per-phoneme duration in raw frame units `[L, 1]`.
    pub duration_pred: Var,
    /// The whole-frame durations the length regulator actually used.
    pub durations_used: Vec<usize>,
}

/// The five components of the supervised synthesis loss.
pub struct TtsLossTerms {
    pub total: Var,
    pub post_l1: Var,
    pub decoder_l1: Var,
    pub pitch_sq: Var,
    pub energy_sq: Var,
    pub duration_sq: Var,
}

fn conv_init(rng: &mut ChaCha8Rng, k: usize, ci: usize, co: usize, gain: f64) -> ArrayD<f64> {
    let bound = (6.0 / (k as f64 * ci as f64 + co as f64)).sqrt() * gain;
    uniform_init(rng, &[k, ci, co], bound)
}

impl TtsModel {
    pub fn define(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: TtsConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.model_dim;
        let embed = store.define(TTS_ENC, "embed", xavier_init(rng, cfg.vocab_size, d));
        let enc_blocks = (0..cfg.encoder.layer_count)
            .map(|i| EncoderBlock::define(store, rng, TTS_ENC, &format!("blk{i}"), &cfg.encoder))
            .collect();
        let enc_norm = Norm::define(store, TTS_ENC, "final_norm", d);
        let speaker_proj = Linear::define(store, rng, TTS_ENC, "speaker_proj", cfg.speaker_dim, d);
        let pitch_head = ScalarHead::define(store, rng, TTS_VA, "pitch", d, cfg.variance_hidden);
        let energy_head = ScalarHead::define(store, rng, TTS_VA, "energy", d, cfg.variance_hidden);
        let pitch_proj = Linear::define(store, rng, TTS_VA, "pitch_proj", 1, d);
        let energy_proj = Linear::define(store, rng, TTS_VA, "energy_proj", 1, d);
        let duration_head = ScalarHead::define(store, rng, TTS_VA_DUR, "duration", d, cfg.variance_hidden);
        let dec_blocks = (0..cfg.decoder.layer_count)
            .map(|i| EncoderBlock::define(store, rng, TTS_DEC, &format!("blk{i}"), &cfg.decoder))
            .collect();
        let dec_norm = Norm::define(store, TTS_DEC, "final_norm", d);
        let out_proj = Linear::define(store, rng, TTS_DEC, "out_proj", d, cfg.feature_dim);
        let k = cfg.postnet_kernel;
        let post1_w = store.define(TTS_POST, "conv1.w", conv_init(rng, k, cfg.feature_dim, cfg.postnet_hidden, 1.0));
        let post1_b = store.define(TTS_POST, "conv1.b", ArrayD::zeros(IxDyn(&[cfg.postnet_hidden])));
        // Small init keeps the residual near zero at the start, so the
        // post-net refines rather than disrupts early training.
        let post2_w = store.define(TTS_POST, "conv2.w", conv_init(rng, k, cfg.postnet_hidden, cfg.feature_dim, 0.1));
        let post2_b = store.define(TTS_POST, "conv2.b", ArrayD::zeros(IxDyn(&[cfg.feature_dim])));
        Ok(TtsModel {
            cfg,
            embed,
            enc_blocks,
            enc_norm,
            speaker_proj,
            pitch_head,
            energy_head,
            pitch_proj,
            energy_proj,
            duration_head,
            dec_blocks,
            dec_norm,
            out_proj,
            post1_w,
            post1_b,
            post2_w,
            post2_b,
        })
    }

    fn check_text(&self, text: &[usize]) -> Result<()> {
        if text.is_empty() {
            return Err(Error::contract("synthesis needs a non-empty token sequence"));
        }
        if let Some(&bad) = text.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::contract(format!(
                "token {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    fn column(tape: &mut Tape, values: &[f64]) -> Var {
        tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[values.len(), 1]), values.to_vec()).unwrap(),
        )
    }

    /// Synthesizes a spectrogram for `text`, conditioned on a `[1, speaker_dim]`
    /// speaker embedding. In teacher mode the provided prosody drives the
    /// conditioning and expansion; in free mode the model's own predictions do.
    pub fn synthesize(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        text: &[usize],
        speaker_emb: Var,
        mode: SynthesisMode,
    ) -> Result<Synthesis> {
        self.check_text(text)?;
        let emb_shape = tape.shape(speaker_emb).to_vec();
        if emb_shape != [1, self.cfg.speaker_dim] {
            return Err(Error::contract(format!(
                "speaker embedding must be [1, {}], got {:?}",
                self.cfg.speaker_dim, emb_shape
            )));
        }
        if let SynthesisMode::Teacher { pitch, energy, duration } = &mode {
            if pitch.len() != text.len() || energy.len() != text.len() || duration.len() != text.len() {
                return Err(Error::contract("prosody targets must align with the token sequence"));
            }
            if duration.iter().any(|&d| d == 0) {
                return Err(Error::contract("ground-truth durations must be at least one frame"));
            }
        }
        let d = self.cfg.encoder.model_dim;

        // Text encoder.
        let table = bound.var(self.embed);
        let mut h = tape.gather_rows(table, text)?;
        let pe = tape.constant(positional_encoding(text.len(), d)?);
        h = tape.add(h, pe)?;
        for blk in &self.enc_blocks {
            h = blk.apply(tape, bound, h, None)?;
        }
        let h = self.enc_norm.apply(tape, bound, h)?;

        // Speaker conditioning on every phoneme state.
        let s = self.speaker_proj.apply(tape, bound, speaker_emb)?;
        let s = tape.reshape(s, &[d])?;
        let h = tape.add(h, s)?;

        // Variance adaptor: predictions always computed, conditioning values
        // chosen by mode.
        let pitch_pred = self.pitch_head.apply(tape, bound, h)?;
        let energy_pred = self.energy_head.apply(tape, bound, h)?;
        let duration_pred = self.duration_head.apply(tape, bound, h)?;
        let (pitch_cond, energy_cond, durations_used) = match mode {
            SynthesisMode::Teacher { pitch, energy, duration } => (
                Self::column(tape, pitch),
                Self::column(tape, energy),
                duration.to_vec(),
            ),
            SynthesisMode::Free => {
                let raw = tape.value(duration_pred);
                let raw: Vec<f64> = raw.iter().cloned().collect();
                let mut durations = round_clamp_durations(&raw);
                for dur in &mut durations {
                    *dur = (*dur).min(self.cfg.max_duration);
                }
                (pitch_pred, energy_pred, durations)
            }
        };
        let p_add = self.pitch_proj.apply(tape, bound, pitch_cond)?;
        let e_add = self.energy_proj.apply(tape, bound, energy_cond)?;
        let h = tape.add(h, p_add)?;
        let h = tape.add(h, e_add)?;

        // Expansion to frame rate and decoding.
        let expanded = length_regulator(tape, h, &durations_used)?;
        let frames = tape.shape(expanded)[0];
        let pe = tape.constant(positional_encoding(frames, d)?);
        let mut v = tape.add(expanded, pe)?;
        for blk in &self.dec_blocks {
            v = blk.apply(tape, bound, v, None)?;
        }
        let v = self.dec_norm.apply(tape, bound, v)?;
        let decoder_output = self.out_proj.apply(tape, bound, v)?;

        // Residual post-net.
        let c1 = tape.conv1d_same(decoder_output, bound.var(self.post1_w), bound.var(self.post1_b))?;
        let c1 = tape.tanh(c1);
        let residual = tape.conv1d_same(c1, bound.var(self.post2_w), bound.var(self.post2_b))?;
        let post_output = tape.add(decoder_output, residual)?;

        Ok(Synthesis {
            post_output,
            decoder_output,
            pitch_pred,
            energy_pred,
            duration_pred,
            durations_used,
        })
    }

    /// Supervised synthesis loss: L1 on both spectrogram stages plus squared
    /// error on pitch, energy, and duration predictions — a plain five-term
    /// sum with no weighting.
    pub fn tts_loss_detail(
        &self,
        tape: &mut Tape,
        synth: &Synthesis,
        target: Var,
        pitch: &[f64],
        energy: &[f64],
        duration: &[usize],
    ) -> Result<TtsLossTerms> {
        let target_shape = tape.shape(target).to_vec();
        let out_shape = tape.shape(synth.post_output).to_vec();
        if target_shape != out_shape {
            return Err(Error::contract(format!(
                "target spectrogram {target_shape:?} does not match synthesis {out_shape:?}"
            )));
        }
        let l = tape.shape(synth.pitch_pred)[0];
        if pitch.len() != l || energy.len() != l || duration.len() != l {
            return Err(Error::contract("prosody targets must align with the predictions"));
        }
        let post_l1 = tape.l1_distance(target, synth.post_output)?;
        let decoder_l1 = tape.l1_distance(target, synth.decoder_output)?;
        let p_t = Self::column(tape, pitch);
        let e_t = Self::column(tape, energy);
        let d_t = Self::column(tape, &duration.iter().map(|&d| d as f64).collect::<Vec<_>>());
        let pitch_sq = tape.sq_l2_distance(p_t, synth.pitch_pred)?;
        let energy_sq = tape.sq_l2_distance(e_t, synth.energy_pred)?;
        let duration_sq = tape.sq_l2_distance(d_t, synth.duration_pred)?;
        let mut total = tape.add(post_l1, decoder_l1)?;
        total = tape.add(total, pitch_sq)?;
        total = tape.add(total, energy_sq)?;
        total = tape.add(total, duration_sq)?;
        Ok(TtsLossTerms {
            total,
            post_l1,
            decoder_l1,
            pitch_sq,
            energy_sq,
            duration_sq,
        })
    }

    pub fn tts_loss(
        &self,
        tape: &mut Tape,
        synth: &Synthesis,
        target: Var,
        pitch: &[f64],
        energy: &[f64],
        duration: &[usize],
    ) -> Result<Var> {
        Ok(self
            .tts_loss_detail(tape, synth, target, pitch, energy, duration)?
            .total)
    }
}

/// One epoch of the synthesizer pretraining curve.
#[derive(Clone, Copy, Debug)]
pub struct TtsEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Settings for [`pretrain_tts`].
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TtsPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    /// Derived from the experiment seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TtsPretrainConfig {
    fn default() -> Self {
        TtsPretrainConfig {
            epochs: 40,
            batch_size: 4,
            learning_rate: 1e-3,
            patience: 5,
            seed: 0,
        }
    }
}

fn teacher_loss_for(
    model: &TtsModel,
    speaker: &SpeakerModel,
    tape: &mut Tape,
    bound: &Bound,
    u: &Utterance,
) -> Result<Var> {
    let reference = tape.constant(u.features.clone().into_dyn());
    let s = speaker.embed(tape, bound, reference)?;
    let synth = model.synthesize(
        tape,
        bound,
        &u.text,
        s,
        SynthesisMode::Teacher {
            pitch: &u.prosody.pitch,
            energy: &u.prosody.energy,
            duration: &u.prosody.duration,
        },
    )?;
    let target = tape.constant(u.features.clone().into_dyn());
    model.tts_loss(tape, &synth, target, &u.prosody.pitch, &u.prosody.energy, &u.prosody.duration)
}

/// Mean teacher-forced synthesis loss over a set of utterances.
pub fn evaluate_tts(
    store: &ParamStore,
    model: &TtsModel,
    speaker: &SpeakerModel,
    items: &[Utterance],
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::contract("evaluation set must be non-empty"));
    }
    let mut sum = 0.0;
    for u in items {
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &["tts.", "speaker."]);
        let loss = teacher_loss_for(model, speaker, &mut tape, &bound, u)?;
        sum += tape.scalar(loss);
    }
    Ok(sum / items.len() as f64)
}

/// Trains the synthesizer on the paired split in teacher mode, conditioning
/// on the (frozen) speaker embedder, with early stopping on validation loss
/// and best-weight restore. Speaker reference: the target utterance itself.
pub fn pretrain_tts(
    store: &mut ParamStore,
    model: &TtsModel,
    speaker: &SpeakerModel,
    corpus: &CorpusSplit,
    cfg: &TtsPretrainConfig,
) -> Result<Vec<TtsEpoch>> {
    if corpus.paired.is_empty() {
        return Err(Error::contract("synthesizer pretraining needs paired data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7474_735f_7072_65);
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, store);
    let mut curve = Vec::new();
    let mut best: Option<(f64, Vec<(String, String, ArrayD<f64>)>)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.paired.len()).collect();
        order.shuffle(&mut rng);
        let mut train_loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut accum = GradAccum::new(store);
            for &i in chunk {
                let u = &corpus.paired[i];
                let mut tape = Tape::new();
                let bound = store.bind(&mut tape, &["tts.", "speaker."]);
                let loss = teacher_loss_for(model, speaker, &mut tape, &bound, u)?;
                train_loss_sum += tape.scalar(loss);
                let mut grads = tape.backward(loss)?;
                accum.absorb(&bound, &mut grads);
            }
            accum.mean();
            opt.step(store, &accum);
        }
        let train_loss = train_loss_sum / corpus.paired.len() as f64;
        let val_loss = evaluate_tts(store, model, speaker, &corpus.validation)?;
        curve.push(TtsEpoch {
            epoch,
            train_loss,
            val_loss,
        });

        let improved = best.as_ref().map_or(true, |(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, store.snapshot(&["tts."])));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    if let Some((_, snapshot)) = best {
        store.restore(&snapshot)?;
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::finite_diff_check;
    use crate::corpus::{make_splits, CorpusConfig, EOS, SPACE};
    use crate::speaker::SpeakerConfig;
    use ndarray::Array2;

    fn tiny_cfg() -> TtsConfig {
        let block = BlockConfig {
            model_dim: 16,
            head_count: 2,
            ff_dim: 16,
            layer_count: 1,
        };
        TtsConfig {
            vocab_size: 12,
            feature_dim: 4,
            speaker_dim: 3,
            encoder: block,
            decoder: block,
            variance_hidden: 8,
            postnet_hidden: 6,
            postnet_kernel: 3,
            max_duration: 16,
        }
    }

    fn build(seed: u64, cfg: TtsConfig) -> (ParamStore, TtsModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = TtsModel::define(&mut store, &mut rng, cfg).unwrap();
        (store, model)
    }

    fn fixed_emb(tape: &mut Tape, dim: usize, fill: f64) -> Var {
        tape.constant(ArrayD::from_elem(IxDyn(&[1, dim]), fill))
    }

    #[test]
    fn teacher_mode_emits_exactly_the_target_frame_count() {
        let (store, model) = build(1, tiny_cfg());
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let s = fixed_emb(&mut tape, 3, 0.2);
        let text = [4, 5, SPACE, 6, EOS];
        let duration = [3, 2, 1, 4, 1];
        let synth = model
            .synthesize(
                &mut tape,
                &bound,
                &text,
                s,
                SynthesisMode::Teacher {
                    pitch: &[1.0, 0.9, 0.0, 1.1, 0.0],
                    energy: &[0.8, 0.7, 0.0, 0.9, 0.0],
                    duration: &duration,
                },
            )
            .unwrap();
        let total: usize = duration.iter().sum();
        assert_eq!(tape.shape(synth.post_output), &[total, 4]);
        assert_eq!(tape.shape(synth.decoder_output), &[total, 4]);
        assert_eq!(tape.shape(synth.pitch_pred), &[5, 1]);
        assert_eq!(synth.durations_used, duration);
    }

    #[test]
    fn free_mode_durations_clamp_to_at_least_one_frame() {
        let (store, model) = build(2, tiny_cfg());
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let s = fixed_emb(&mut tape, 3, -0.1);
        let text = [4, 5, 6, 7, EOS];
        let synth = model
            .synthesize(&mut tape, &bound, &text, s, SynthesisMode::Free)
            .unwrap();
        assert!(synth.durations_used.iter().all(|&d| d >= 1));
        let frames = tape.shape(synth.post_output)[0];
        assert!(frames >= text.len(), "expansion shrank below one frame per token");
        assert_eq!(frames, synth.durations_used.iter().sum::<usize>());
    }

    #[test]
    fn changing_the_speaker_embedding_changes_the_output() {
        let (store, model) = build(3, tiny_cfg());
        let text = [4, 9, EOS];
        let render = |fill: f64| {
            let mut tape = Tape::new();
            let bound = store.bind_const(&mut tape, &[]);
            let s = fixed_emb(&mut tape, 3, fill);
            let synth = model
                .synthesize(
                    &mut tape,
                    &bound,
                    &text,
                    s,
                    SynthesisMode::Teacher {
                        pitch: &[1.0, 1.2, 0.0],
                        energy: &[0.8, 0.9, 0.0],
                        duration: &[2, 3, 1],
                    },
                )
                .unwrap();
            tape.value(synth.post_output).clone()
        };
        assert_ne!(render(0.3), render(-0.4));
    }

    #[test]
    fn output_gradient_with_respect_to_speaker_embedding_is_nonzero() {
        let (store, model) = build(4, tiny_cfg());
        let text = [4, 9, EOS];
        let emb = ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![0.25, -0.5, 0.1]).unwrap();
        let report = finite_diff_check(&[emb.clone()], 1e-5, 1e-6, |tape, vars| {
            let bound = store.bind_const(tape, &[]);
            let synth = model.synthesize(
                tape,
                &bound,
                &text,
                vars[0],
                SynthesisMode::Teacher {
                    pitch: &[1.0, 1.2, 0.0],
                    energy: &[0.8, 0.9, 0.0],
                    duration: &[2, 3, 1],
                },
            )?;
            Ok(tape.sum_all(synth.post_output))
        })
        .unwrap();
        report.assert_within(1e-3);
        // And the analytic gradient itself must be nonzero.
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let s = tape.leaf(emb);
        let synth = model
            .synthesize(
                &mut tape,
                &bound,
                &text,
                s,
                SynthesisMode::Teacher {
                    pitch: &[1.0, 1.2, 0.0],
                    energy: &[0.8, 0.9, 0.0],
                    duration: &[2, 3, 1],
                },
            )
            .unwrap();
        let root = tape.sum_all(synth.post_output);
        let mut grads = tape.backward(root).unwrap();
        let g = grads.take(s).expect("embedding gradient missing");
        assert!(g.iter().any(|v| v.abs() > 1e-12));
    }

    #[test]
    fn loss_is_zero_when_predictions_equal_targets() {
        let (_store, model) = build(5, tiny_cfg());
        let mut tape = Tape::new();
        let target_arr = ArrayD::from_shape_vec(
            IxDyn(&[4, 4]),
            (0..16).map(|i| i as f64 * 0.1).collect(),
        )
        .unwrap();
        let pitch = [1.0, 0.5];
        let energy = [0.8, 0.6];
        let duration = [3usize, 1];
        let exact = Synthesis {
            post_output: tape.constant(target_arr.clone()),
            decoder_output: tape.constant(target_arr.clone()),
            pitch_pred: TtsModel::column(&mut tape, &pitch),
            energy_pred: TtsModel::column(&mut tape, &energy),
            duration_pred: TtsModel::column(&mut tape, &[3.0, 1.0]),
            durations_used: duration.to_vec(),
        };
        let target = tape.constant(target_arr);
        let loss = model
            .tts_loss(&mut tape, &exact, target, &pitch, &energy, &duration)
            .unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn unit_offset_on_final_output_costs_one_per_element() {
        // Only the post-net branch is off: +1 on every element of a 3x2
        // feature adds exactly 6 to the loss, nothing else contributes.
        let cfg = TtsConfig {
            feature_dim: 2,
            ..tiny_cfg()
        };
        let (store, model) = build(6, cfg);
        let mut tape = Tape::new();
        let target_arr = ArrayD::from_shape_vec(
            IxDyn(&[3, 2]),
            vec![0.4, -0.2, 0.1, 0.9, -0.6, 0.3],
        )
        .unwrap();
        let off = target_arr.mapv(|v| v + 1.0);
        let pitch = [1.0];
        let energy = [0.5];
        let duration = [3usize];
        let synth = Synthesis {
            post_output: tape.constant(off),
            decoder_output: tape.constant(target_arr.clone()),
            pitch_pred: TtsModel::column(&mut tape, &pitch),
            energy_pred: TtsModel::column(&mut tape, &energy),
            duration_pred: TtsModel::column(&mut tape, &[3.0]),
            durations_used: duration.to_vec(),
        };
        let target = tape.constant(target_arr);
        let loss = model
            .tts_loss(&mut tape, &synth, target, &pitch, &energy, &duration)
            .unwrap();
        assert!((tape.scalar(loss) - 6.0).abs() < 1e-12);
        let _ = store;
    }

    #[test]
    fn loss_equals_the_sum_of_its_five_terms() {
        let (store, model) = build(7, tiny_cfg());
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let s = fixed_emb(&mut tape, 3, 0.15);
        let text = [5, 8, EOS];
        let pitch = [1.1, 0.7, 0.0];
        let energy = [0.9, 0.8, 0.0];
        let duration = [2usize, 2, 1];
        let synth = model
            .synthesize(
                &mut tape,
                &bound,
                &text,
                s,
                SynthesisMode::Teacher {
                    pitch: &pitch,
                    energy: &energy,
                    duration: &duration,
                },
            )
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let target_arr = uniform_init(&mut rng, &[5, 4], 1.0);
        let target = tape.constant(target_arr.clone());
        let terms = model
            .tts_loss_detail(&mut tape, &synth, target, &pitch, &energy, &duration)
            .unwrap();
        let total = tape.scalar(terms.total);
        let sum = tape.scalar(terms.post_l1)
            + tape.scalar(terms.decoder_l1)
            + tape.scalar(terms.pitch_sq)
            + tape.scalar(terms.energy_sq)
            + tape.scalar(terms.duration_sq);
        assert!((total - sum).abs() < 1e-10, "total {total} vs term sum {sum}");

        // Recompute each term from raw values as an independent oracle.
        let post = tape.value(synth.post_output).clone();
        let dec = tape.value(synth.decoder_output).clone();
        let p_hat = tape.value(synth.pitch_pred).clone();
        let e_hat = tape.value(synth.energy_pred).clone();
        let d_hat = tape.value(synth.duration_pred).clone();
        let l1 = |a: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
        };
        let mut hand = l1(&target_arr, &post) + l1(&target_arr, &dec);
        for i in 0..3 {
            hand += (pitch[i] - p_hat[[i, 0]]).powi(2);
            hand += (energy[i] - e_hat[[i, 0]]).powi(2);
            hand += (duration[i] as f64 - d_hat[[i, 0]]).powi(2);
        }
        assert!((total - hand).abs() < 1e-10, "total {total} vs hand {hand}");
    }

    #[test]
    fn teacher_loss_gradient_reaches_every_partition_and_passes_finite_differences() {
        let (store, model) = build(8, tiny_cfg());
        let text = [4, 6, EOS];
        let pitch = [1.0, 1.3, 0.0];
        let energy = [0.7, 0.8, 0.0];
        let duration = [2usize, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let target_arr = uniform_init(&mut rng, &[4, 4], 1.0);

        let loss_with = |tape: &mut Tape, bound: &Bound| -> Result<Var> {
            let s = fixed_emb(tape, 3, 0.2);
            let synth = model.synthesize(
                tape,
                bound,
                &text,
                s,
                SynthesisMode::Teacher {
                    pitch: &pitch,
                    energy: &energy,
                    duration: &duration,
                },
            )?;
            let target = tape.constant(target_arr.clone());
            model.tts_loss(tape, &synth, target, &pitch, &energy, &duration)
        };

        // One representative parameter per partition.
        let probes = [
            (TTS_ENC, "blk0.attn.wq.w"),
            (TTS_VA, "pitch.hidden.w"),
            (TTS_VA_DUR, "duration.hidden.w"),
            (TTS_DEC, "out_proj.w"),
            (TTS_POST, "conv1.w"),
        ];
        for (part, name) in probes {
            let id = store.id(part, name).unwrap();
            let value = store.value(id).clone();
            let report = finite_diff_check(&[value], 1e-5, 1e-6, |tape, vars| {
                let mut bound = store.bind_const(tape, &[]);
                bound.override_var(id, vars[0]);
                loss_with(tape, &mut bound)
            })
            .unwrap();
            report.assert_within(1e-3);
            assert!(
                report.max_rel_err.is_finite(),
                "{part}/{name} produced no comparable gradient"
            );
        }

        // And every partition receives some gradient in a normal bound pass.
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &["tts."]);
        let loss = loss_with(&mut tape, &bound).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let mut accum = GradAccum::new(&store);
        accum.absorb(&bound, &mut grads);
        for (part, name) in probes {
            let id = store.id(part, name).unwrap();
            let g = accum.get(id).expect("partition missing from gradient");
            assert!(
                g.iter().any(|v| v.abs() > 0.0),
                "{part}/{name} gradient is identically zero"
            );
        }
    }

    #[test]
    fn frozen_duration_predictor_receives_no_gradient_in_free_mode() {
        let (mut store, model) = build(9, tiny_cfg());
        store.set_frozen_prefix(TTS_VA_DUR, true);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &["tts."]);
        let s = fixed_emb(&mut tape, 3, 0.1);
        let synth = model
            .synthesize(&mut tape, &bound, &[4, 7, EOS], s, SynthesisMode::Free)
            .unwrap();
        let root = tape.sum_all(synth.post_output);
        let mut grads = tape.backward(root).unwrap();
        let mut accum = GradAccum::new(&store);
        accum.absorb(&bound, &mut grads);
        let dur_w = store.id(TTS_VA_DUR, "duration.hidden.w").unwrap();
        let dur_out = store.id(TTS_VA_DUR, "duration.out.w").unwrap();
        assert!(accum.get(dur_w).is_none(), "frozen duration weights got a gradient");
        assert!(accum.get(dur_out).is_none());
        // Pitch path stays live in free mode (its prediction conditions the decoder).
        let pitch_w = store.id(TTS_VA, "pitch.hidden.w").unwrap();
        assert!(accum.get(pitch_w).is_some());
    }

    #[test]
    fn unfrozen_duration_predictor_still_gets_zero_gradient_from_spectrogram_losses() {
        // Rounded durations are data, not graph edges, so a loss that only
        // touches the spectrogram cannot reach the duration head even when
        // that head is trainable.
        let (store, model) = build(10, tiny_cfg());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, &["tts."]);
        let s = fixed_emb(&mut tape, 3, 0.1);
        let synth = model
            .synthesize(&mut tape, &bound, &[4, 7, EOS], s, SynthesisMode::Free)
            .unwrap();
        let root = tape.sum_all(synth.post_output);
        let mut grads = tape.backward(root).unwrap();
        let mut accum = GradAccum::new(&store);
        accum.absorb(&bound, &mut grads);
        let dur_w = store.id(TTS_VA_DUR, "duration.hidden.w").unwrap();
        match accum.get(dur_w) {
            None => {}
            Some(g) => assert!(g.iter().all(|v| *v == 0.0)),
        }
    }

    #[test]
    fn rejects_empty_text_and_misaligned_prosody() {
        let (store, model) = build(11, tiny_cfg());
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let s = fixed_emb(&mut tape, 3, 0.0);
        assert!(model
            .synthesize(&mut tape, &bound, &[], s, SynthesisMode::Free)
            .is_err());
        assert!(model
            .synthesize(
                &mut tape,
                &bound,
                &[4, EOS],
                s,
                SynthesisMode::Teacher {
                    pitch: &[1.0],
                    energy: &[0.5, 0.5],
                    duration: &[2, 1],
                },
            )
            .is_err());
        assert!(model
            .synthesize(
                &mut tape,
                &bound,
                &[4, EOS],
                s,
                SynthesisMode::Teacher {
                    pitch: &[1.0, 0.0],
                    energy: &[0.5, 0.0],
                    duration: &[2, 0],
                },
            )
            .is_err());
    }

    #[test]
    fn pretraining_reduces_validation_loss_and_restores_best() {
        let cfg = CorpusConfig {
            speakers: 2,
            paired: 20,
            unpaired: 4,
            validation: 6,
            test: 4,
            paired_words: 8,
            extended_words: 12,
            noise_sigma: 0.01,
            tempo_sigma: 0.0,
            pitch_sigma: 0.0,
        };
        let corpus = make_splits(&cfg, 91).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let speaker_cfg = SpeakerConfig {
            block: BlockConfig {
                model_dim: 16,
                head_count: 2,
                ff_dim: 16,
                layer_count: 1,
            },
            pool_dim: 8,
            embed_dim: 8,
            class_count: 2,
        };
        let speaker = SpeakerModel::define(&mut store, &mut rng, speaker_cfg).unwrap();
        store.set_frozen_prefix("speaker.", true);
        let block = BlockConfig {
            model_dim: 32,
            head_count: 2,
            ff_dim: 32,
            layer_count: 1,
        };
        let tts_cfg = TtsConfig {
            vocab_size: VOCAB_SIZE,
            feature_dim: FEATURE_DIM,
            speaker_dim: 8,
            encoder: block,
            decoder: block,
            variance_hidden: 16,
            postnet_hidden: 16,
            postnet_kernel: 5,
            max_duration: 64,
        };
        let model = TtsModel::define(&mut store, &mut rng, tts_cfg).unwrap();
        let pretrain_cfg = TtsPretrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            patience: 5,
            seed: 0,
        };
        let initial = evaluate_tts(&store, &model, &speaker, &corpus.validation).unwrap();
        let curve = pretrain_tts(&mut store, &model, &speaker, &corpus, &pretrain_cfg).unwrap();
        assert!(!curve.is_empty());
        let best = curve.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(
            best < 0.5 * initial,
            "validation loss {initial} only reached {best}"
        );
        let final_val = evaluate_tts(&store, &model, &speaker, &corpus.validation).unwrap();
        assert!(
            (final_val - best).abs() < 1e-9,
            "best weights were not restored: {final_val} vs {best}"
        );
        // Free-mode synthesis after training stays shape-sane.
        let u = &corpus.validation[0];
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &["tts.", "speaker."]);
        let reference = tape.constant(u.features.clone().into_dyn());
        let s = speaker.embed(&mut tape, &bound, reference).unwrap();
        let synth = model
            .synthesize(&mut tape, &bound, &u.text, s, SynthesisMode::Free)
            .unwrap();
        assert!(tape.shape(synth.post_output)[0] >= u.text.len());
        let _: Array2<f64> = tape
            .value(synth.post_output)
            .clone()
            .into_dimensionality()
            .unwrap();

        // With ground-truth prosody the output is time-aligned to the target,
        // so teacher-mode resynthesis should beat free-mode synthesis on
        // spectral distortion over training items.
        let render = |u: &Utterance, mode_teacher: bool| -> Array2<f64> {
            let mut tape = Tape::new();
            let bound = store.bind_const(&mut tape, &["tts.", "speaker."]);
            let reference = tape.constant(u.features.clone().into_dyn());
            let s = speaker.embed(&mut tape, &bound, reference).unwrap();
            let mode = if mode_teacher {
                SynthesisMode::Teacher {
                    pitch: &u.prosody.pitch,
                    energy: &u.prosody.energy,
                    duration: &u.prosody.duration,
                }
            } else {
                SynthesisMode::Free
            };
            let synth = model.synthesize(&mut tape, &bound, &u.text, s, mode).unwrap();
            tape.value(synth.post_output)
                .clone()
                .into_dimensionality()
                .unwrap()
        };
        let mut teacher_mcd = 0.0;
        let mut free_mcd = 0.0;
        let subset = &corpus.paired[..8];
        for u in subset {
            teacher_mcd += crate::metrics::mcd(&u.features, &render(u, true)).unwrap();
            free_mcd += crate::metrics::mcd(&u.features, &render(u, false)).unwrap();
        }
        assert!(
            teacher_mcd < free_mcd,
            "teacher-mode distortion {} should beat free-mode {}",
            teacher_mcd / subset.len() as f64,
            free_mcd / subset.len() as f64
        );
    }
}
