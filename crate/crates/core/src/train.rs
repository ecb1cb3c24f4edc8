//! Joint synthesizer–recognizer training.
//!
//! Unpaired text closes a loop: the synthesizer renders it in free mode, the
//! recognizer is asked to read the text back, and that cross entropy is the
//! cycle loss. A speaker-consistency term keeps the synthesized voice near
//! the reference voice by comparing frozen-embedder embeddings. Training runs
//! in two phases — first with the synthesizer frozen so the recognizer
//! adapts to synthetic speech, then with both trainable (duration predictor
//! and speaker embedder always excepted) — and mixes paired and unpaired
//! batches by uniformly shuffling one combined index.

use crate::asr::AsrModel;
use crate::autodiff::{cosine_similarity, Tape, Var};
use crate::corpus::CorpusSplit;
use crate::error::{Error, Result};
use crate::params::{Bound, GradAccum, Optimizer, OptimizerKind, ParamStore};
use crate::speaker::SpeakerModel;
use crate::tts::{SynthesisMode, TtsModel};
use ndarray::{Array2, ArrayD};
#[cfg(test)]
use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Guard for the cosine denominator in the speaker-consistency loss.
pub const COSINE_EPS: f64 = 1e-8;

/// Masking applied to synthesized speech before the recognizer sees it.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentPolicy {
    pub time_masks: usize,
    /// Maximum width of one time mask, in frames.
    pub time_width: usize,
    pub freq_masks: usize,
    /// Maximum width of one frequency mask, in channels.
    pub freq_width: usize,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        SpecAugmentPolicy {
            time_masks: 2,
            time_width: 12,
            freq_masks: 2,
            freq_width: 5,
        }
    }
}

/// Settings for joint training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the speaker-consistency term in the unpaired objective.
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// Epoch cap per phase.
    pub max_epochs: usize,
    pub specaugment: SpecAugmentPolicy,
    pub use_speaker_consistency: bool,
    pub use_stepwise: bool,
    pub optimizer: OptimizerKind,
    /// Derived from the experiment seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            learning_rate: 1e-4,
            batch_size: 8,
            patience: 5,
            max_epochs: 20,
            specaugment: SpecAugmentPolicy::default(),
            use_speaker_consistency: true,
            use_stepwise: true,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::config("loss weight must be non-negative"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epoch cap and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Draws a 0/1 mask of `shape` with `policy.time_masks` row spans and
/// `policy.freq_masks` column spans zeroed. Each span's width is uniform on
/// [0, W] (clamped to the extent), its start uniform over valid positions.
pub fn specaugment_mask(
    rows: usize,
    cols: usize,
    policy: &SpecAugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let mut mask = Array2::<f64>::ones((rows, cols));
    for _ in 0..policy.time_masks {
        let width = rng.gen_range(0..=policy.time_width).min(rows);
        let start = rng.gen_range(0..=rows - width);
        for r in start..start + width {
            for c in 0..cols {
                mask[[r, c]] = 0.0;
            }
        }
    }
    for _ in 0..policy.freq_masks {
        let width = rng.gen_range(0..=policy.freq_width).min(cols);
        let start = rng.gen_range(0..=cols - width);
        for c in start..start + width {
            for r in 0..rows {
                mask[[r, c]] = 0.0;
            }
        }
    }
    mask
}

/// Applies [`specaugment_mask`] to a tape variable by elementwise multiply,
/// so gradients pass through unmasked cells and vanish on masked ones.
pub fn specaugment(
    tape: &mut Tape,
    x: Var,
    policy: &SpecAugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mask = specaugment_mask(shape[0], shape[1], policy, rng);
    let m = tape.constant(mask.into_dyn());
    tape.mul(x, m)
}

/// Negative cosine similarity between two embeddings (epsilon-guarded).
pub fn sc_loss_from_embeddings(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let cos = cosine_similarity(tape, a, b, COSINE_EPS)?;
    Ok(tape.mul_scalar(cos, -1.0))
}

/// Negative cosine between the embeddings of synthesized speech and the
/// reference speech, under the (frozen) speaker embedder.
pub fn speaker_consistency_loss(
    tape: &mut Tape,
    bound: &Bound,
    speaker: &SpeakerModel,
    synthesized: Var,
    reference: &Array2<f64>,
) -> Result<Var> {
    let r = tape.constant(reference.clone().into_dyn());
    let s_ref = speaker.embed(tape, bound, r)?;
    let s_hat = speaker.embed(tape, bound, synthesized)?;
    sc_loss_from_embeddings(tape, s_hat, s_ref)
}

/// Everything one unpaired example contributes to the objective.
pub struct UnpairedLoss {
    /// The optimized scalar: cycle loss, plus the weighted consistency term
    /// when enabled.
    pub total: Var,
    pub cycle: Var,
    pub sc: Option<Var>,
    /// Clean synthesized speech (before any masking).
    pub synthesized: Var,
}

/// Builds the unpaired-text objective: free-mode synthesis conditioned on the
/// reference speaker, optional SpecAugment on the recognizer branch only, the
/// recognizer's cross entropy on the original text, and optionally the
/// speaker-consistency term against the clean synthesis.
#[allow(clippy::too_many_arguments)]
pub fn unpaired_loss(
    tape: &mut Tape,
    bound: &Bound,
    tts: &TtsModel,
    asr: &AsrModel,
    speaker: &SpeakerModel,
    text: &[usize],
    reference: &Array2<f64>,
    alpha: f64,
    use_sc: bool,
    masking: Option<(&SpecAugmentPolicy, &mut ChaCha8Rng)>,
) -> Result<UnpairedLoss> {
    let r = tape.constant(reference.clone().into_dyn());
    let s_ref = speaker.embed(tape, bound, r)?;
    let synth = tts.synthesize(tape, bound, text, s_ref, SynthesisMode::Free)?;
    let clean = synth.post_output;
    let asr_input = match masking {
        Some((policy, rng)) => specaugment(tape, clean, policy, rng)?,
        None => clean,
    };
    let cycle = asr.ce_loss(tape, bound, asr_input, text)?;
    if use_sc {
        let s_hat = speaker.embed(tape, bound, clean)?;
        let sc = sc_loss_from_embeddings(tape, s_hat, s_ref)?;
        let weighted = tape.mul_scalar(sc, alpha);
        let total = tape.add(cycle, weighted)?;
        Ok(UnpairedLoss {
            total,
            cycle,
            sc: Some(sc),
            synthesized: clean,
        })
    } else {
        Ok(UnpairedLoss {
            total: cycle,
            cycle,
            sc: None,
            synthesized: clean,
        })
    }
}

/// The cycle loss alone (no consistency term, no masking).
pub fn cycle_loss(
    tape: &mut Tape,
    bound: &Bound,
    tts: &TtsModel,
    asr: &AsrModel,
    speaker: &SpeakerModel,
    text: &[usize],
    reference: &Array2<f64>,
) -> Result<Var> {
    Ok(unpaired_loss(tape, bound, tts, asr, speaker, text, reference, 0.0, false, None)?.cycle)
}

/// Which joint-training phase produced a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JointPhase {
    /// Synthesizer frozen; recognizer adapts to synthetic speech.
    A,
    /// Synthesizer unfrozen (duration predictor and speaker excepted).
    B,
}

impl JointPhase {
    pub fn label(self) -> &'static str {
        match self {
            JointPhase::A => "a",
            JointPhase::B => "b",
        }
    }
}

/// One epoch of joint training.
#[derive(Clone, Copy, Debug)]
pub struct JointEpoch {
    pub phase: JointPhase,
    pub epoch: usize,
    /// Mean recognizer cross entropy over paired items.
    pub train_paired_ce: Option<f64>,
    /// Mean supervised synthesis loss over paired items (phase B only).
    pub train_tts_loss: Option<f64>,
    /// Mean cycle loss over unpaired items.
    pub train_cycle: Option<f64>,
    /// Mean speaker-consistency loss over unpaired items, when optimized.
    pub train_sc: Option<f64>,
    pub val_cycle: f64,
    /// Validation speaker-consistency loss (always measured, for the log).
    pub val_sc: f64,
    /// The early-stopping objective: cycle plus weighted consistency when
    /// the consistency term is being optimized in this phase.
    pub val_objective: f64,
}

/// Outcome of one phase.
pub struct PhaseReport {
    pub phase: JointPhase,
    pub epochs: Vec<JointEpoch>,
    /// Partitions that received optimizer state during the phase.
    pub optimizer_partitions: Vec<String>,
    pub best_val_objective: f64,
}

/// Called after every epoch with the current parameters, so callers can track
/// quantities (like synthesized-speech perplexity) across training.
pub type EpochHook<'f> = dyn FnMut(JointPhase, usize, &ParamStore) -> Result<()> + 'f;

struct JointModels<'m> {
    tts: &'m TtsModel,
    asr: &'m AsrModel,
    speaker: &'m SpeakerModel,
}

/// Clean-speech validation pass: mean cycle loss and mean consistency loss
/// over the validation split, references drawn from the paired split with a
/// fixed per-call stream so epochs stay comparable.
fn evaluate_unpaired(
    store: &ParamStore,
    models: &JointModels,
    corpus: &CorpusSplit,
    seed: u64,
) -> Result<(f64, f64)> {
    if corpus.validation.is_empty() || corpus.paired.is_empty() {
        return Err(Error::contract("validation needs paired and validation items"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c);
    let mut cycle_sum = 0.0;
    let mut sc_sum = 0.0;
    for u in &corpus.validation {
        let reference = &corpus.paired[rng.gen_range(0..corpus.paired.len())].features;
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let parts = unpaired_loss(
            &mut tape,
            &bound,
            models.tts,
            models.asr,
            models.speaker,
            &u.text,
            reference,
            0.0,
            true,
            None,
        )?;
        cycle_sum += tape.scalar(parts.cycle);
        sc_sum += tape.scalar(parts.sc.expect("consistency requested"));
    }
    let n = corpus.validation.len() as f64;
    Ok((cycle_sum / n, sc_sum / n))
}

/// Mean validation cycle loss and consistency loss of the parameters in
/// `store`, drawn with the same fixed reference stream training-time
/// validation uses. The second value is the consistency loss (negative mean
/// cosine between synthesized and reference speaker embeddings).
pub fn validation_unpaired_losses(
    store: &ParamStore,
    tts: &TtsModel,
    asr: &AsrModel,
    speaker: &SpeakerModel,
    corpus: &CorpusSplit,
    seed: u64,
) -> Result<(f64, f64)> {
    evaluate_unpaired(store, &JointModels { tts, asr, speaker }, corpus, seed)
}

enum StreamItem {
    Paired(usize),
    Unpaired(usize),
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    store: &mut ParamStore,
    models: &JointModels,
    corpus: &CorpusSplit,
    cfg: &TrainConfig,
    phase: JointPhase,
    mut hook: Option<&mut EpochHook>,
) -> Result<PhaseReport> {
    cfg.validate()?;
    if corpus.paired.is_empty() || corpus.unpaired_texts.is_empty() {
        return Err(Error::contract("joint training needs paired and unpaired data"));
    }
    // The consistency term can only influence parameters the synthesizer is
    // allowed to move, so it joins the objective in phase B.
    let optimize_sc = cfg.use_speaker_consistency && phase == JointPhase::B;
    let phase_salt = match phase {
        JointPhase::A => 0x7068_6173_655f_61,
        JointPhase::B => 0x7068_6173_655f_62,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ phase_salt);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, store);
    let snapshot_prefixes: &[&str] = match phase {
        JointPhase::A => &["asr."],
        JointPhase::B => &["asr.", "tts."],
    };
    let mut epochs = Vec::new();
    let mut best: Option<(f64, Vec<(String, String, ArrayD<f64>)>)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        let mut stream: Vec<StreamItem> = (0..corpus.paired.len())
            .map(StreamItem::Paired)
            .chain((0..corpus.unpaired_texts.len()).map(StreamItem::Unpaired))
            .collect();
        stream.shuffle(&mut rng);

        let mut paired_ce_sum = 0.0;
        let mut paired_n = 0usize;
        let mut tts_loss_sum = 0.0;
        let mut cycle_sum = 0.0;
        let mut sc_sum = 0.0;
        let mut unpaired_n = 0usize;

        for chunk in stream.chunks(cfg.batch_size) {
            let mut accum = GradAccum::new(store);
            for item in chunk {
                let mut tape = Tape::new();
                let bound = store.bind(&mut tape, &[]);
                let loss = match item {
                    StreamItem::Paired(i) => {
                        let u = &corpus.paired[*i];
                        let x = tape.constant(u.features.clone().into_dyn());
                        let ce = models.asr.ce_loss(&mut tape, &bound, x, &u.text)?;
                        paired_ce_sum += tape.scalar(ce);
                        paired_n += 1;
                        if phase == JointPhase::B {
                            let reference = tape.constant(u.features.clone().into_dyn());
                            let s = models.speaker.embed(&mut tape, &bound, reference)?;
                            let synth = models.tts.synthesize(
                                &mut tape,
                                &bound,
                                &u.text,
                                s,
                                SynthesisMode::Teacher {
                                    pitch: &u.prosody.pitch,
                                    energy: &u.prosody.energy,
                                    duration: &u.prosody.duration,
                                },
                            )?;
                            let target = tape.constant(u.features.clone().into_dyn());
                            let tts_loss = models.tts.tts_loss(
                                &mut tape,
                                &synth,
                                target,
                                &u.prosody.pitch,
                                &u.prosody.energy,
                                &u.prosody.duration,
                            )?;
                            tts_loss_sum += tape.scalar(tts_loss);
                            tape.add(ce, tts_loss)?
                        } else {
                            ce
                        }
                    }
                    StreamItem::Unpaired(i) => {
                        let text = &corpus.unpaired_texts[*i];
                        let ref_idx = rng.gen_range(0..corpus.paired.len());
                        let reference = &corpus.paired[ref_idx].features;
                        let parts = unpaired_loss(
                            &mut tape,
                            &bound,
                            models.tts,
                            models.asr,
                            models.speaker,
                            text,
                            reference,
                            cfg.alpha,
                            optimize_sc,
                            Some((&cfg.specaugment, &mut rng)),
                        )?;
                        cycle_sum += tape.scalar(parts.cycle);
                        if let Some(sc) = parts.sc {
                            sc_sum += tape.scalar(sc);
                        }
                        unpaired_n += 1;
                        parts.total
                    }
                };
                let mut grads = tape.backward(loss)?;
                accum.absorb(&bound, &mut grads);
            }
            accum.mean();
            opt.step(store, &accum);
        }

        let (val_cycle, val_sc) = evaluate_unpaired(store, models, corpus, cfg.seed)?;
        let val_objective = if optimize_sc {
            val_cycle + cfg.alpha * val_sc
        } else {
            val_cycle
        };
        epochs.push(JointEpoch {
            phase,
            epoch,
            train_paired_ce: (paired_n > 0).then(|| paired_ce_sum / paired_n as f64),
            train_tts_loss: (phase == JointPhase::B && paired_n > 0)
                .then(|| tts_loss_sum / paired_n as f64),
            train_cycle: (unpaired_n > 0).then(|| cycle_sum / unpaired_n as f64),
            train_sc: (optimize_sc && unpaired_n > 0).then(|| sc_sum / unpaired_n as f64),
            val_cycle,
            val_sc,
            val_objective,
        });
        if let Some(h) = hook.as_mut() {
            h(phase, epoch, store)?;
        }

        let improved = best.as_ref().map_or(true, |(b, _)| val_objective < *b);
        if improved {
            best = Some((val_objective, store.snapshot(snapshot_prefixes)));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let best_val_objective = match best {
        Some((v, snapshot)) => {
            store.restore(&snapshot)?;
            v
        }
        None => f64::INFINITY,
    };
    let names = store.partition_names();
    let optimizer_partitions = opt
        .iter_state()
        .map(|(part, _, _, _, _)| names[part].clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(PhaseReport {
        phase,
        epochs,
        optimizer_partitions,
        best_val_objective,
    })
}

/// Phase A: the synthesizer (and speaker embedder) stay frozen while the
/// recognizer trains on the mixed paired/unpaired stream.
pub fn run_phase_a(
    store: &mut ParamStore,
    tts: &TtsModel,
    asr: &AsrModel,
    speaker: &SpeakerModel,
    corpus: &CorpusSplit,
    cfg: &TrainConfig,
    hook: Option<&mut EpochHook>,
) -> Result<PhaseReport> {
    store.set_frozen_prefix("tts.", true);
    store.set_frozen_prefix("speaker.", true);
    let models = JointModels { tts, asr, speaker };
    run_phase(store, &models, corpus, cfg, JointPhase::A, hook)
}

/// Phase B: the synthesizer unfreezes — except its duration predictor — and
/// paired batches optimize the supervised synthesis loss alongside the
/// recognizer's cross entropy.
pub fn run_phase_b(
    store: &mut ParamStore,
    tts: &TtsModel,
    asr: &AsrModel,
    speaker: &SpeakerModel,
    corpus: &CorpusSplit,
    cfg: &TrainConfig,
    hook: Option<&mut EpochHook>,
) -> Result<PhaseReport> {
    store.set_frozen_prefix("tts.", false);
    store.set_frozen_prefix("tts.va.dur", true);
    store.set_frozen_prefix("speaker.", true);
    let models = JointModels { tts, asr, speaker };
    run_phase(store, &models, corpus, cfg, JointPhase::B, hook)
}

/// Outcome of the full joint-training schedule.
pub struct JointOutcome {
    pub phase_a: Option<PhaseReport>,
    pub phase_b: PhaseReport,
}

impl JointOutcome {
    /// All epoch records in execution order.
    pub fn all_epochs(&self) -> Vec<JointEpoch> {
        let mut out = Vec::new();
        if let Some(a) = &self.phase_a {
            out.extend_from_slice(&a.epochs);
        }
        out.extend_from_slice(&self.phase_b.epochs);
        out
    }
}

/// Runs the configured schedule: phase A then phase B when step-wise training
/// is enabled, otherwise phase B alone (synthesizer trainable from the start).
pub fn run_joint(
    store: &mut ParamStore,
    tts: &TtsModel,
    asr: &AsrModel,
    speaker: &SpeakerModel,
    corpus: &CorpusSplit,
    cfg: &TrainConfig,
    mut hook: Option<&mut EpochHook>,
) -> Result<JointOutcome> {
    cfg.validate()?;
    let phase_a = if cfg.use_stepwise {
        Some(run_phase_a(store, tts, asr, speaker, corpus, cfg, hook.as_deref_mut())?)
    } else {
        None
    };
    let phase_b = run_phase_b(store, tts, asr, speaker, corpus, cfg, hook)?;
    Ok(JointOutcome { phase_a, phase_b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::AsrConfig;
    use crate::blocks::BlockConfig;
    use crate::corpus::{make_splits, CorpusConfig, EOS, FEATURE_DIM, VOCAB_SIZE};
    use crate::params::uniform_init;
    use crate::speaker::SpeakerConfig;
    use crate::tts::TtsConfig;

    fn tiny_block(d: usize) -> BlockConfig {
        BlockConfig {
            model_dim: d,
            head_count: 2,
            ff_dim: d,
            layer_count: 1,
        }
    }

    struct Rig {
        store: ParamStore,
        tts: TtsModel,
        asr: AsrModel,
        speaker: SpeakerModel,
    }

    fn tiny_rig(seed: u64) -> Rig {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let speaker = SpeakerModel::define(
            &mut store,
            &mut rng,
            SpeakerConfig {
                block: tiny_block(16),
                pool_dim: 8,
                embed_dim: 8,
                class_count: 2,
            },
        )
        .unwrap();
        let tts = TtsModel::define(
            &mut store,
            &mut rng,
            TtsConfig {
                vocab_size: VOCAB_SIZE,
                feature_dim: FEATURE_DIM,
                speaker_dim: 8,
                encoder: tiny_block(16),
                decoder: tiny_block(16),
                variance_hidden: 8,
                postnet_hidden: 8,
                postnet_kernel: 3,
                max_duration: 16,
            },
        )
        .unwrap();
        let asr = AsrModel::define(
            &mut store,
            &mut rng,
            AsrConfig {
                vocab_size: VOCAB_SIZE,
                feature_dim: FEATURE_DIM,
                subsample: 2,
                encoder: tiny_block(16),
                decoder: tiny_block(16),
                max_decode_len: 64,
            },
        )
        .unwrap();
        Rig {
            store,
            tts,
            asr,
            speaker,
        }
    }

    fn tiny_corpus(seed: u64) -> CorpusSplit {
        make_splits(
            &CorpusConfig {
                speakers: 2,
                paired: 10,
                unpaired: 12,
                validation: 4,
                test: 4,
                paired_words: 8,
                extended_words: 14,
                noise_sigma: 0.01,
                tempo_sigma: 0.0,
                pitch_sigma: 0.0,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            alpha: 0.1,
            learning_rate: 1e-4,
            batch_size: 4,
            patience: 5,
            max_epochs: 2,
            specaugment: SpecAugmentPolicy {
                time_masks: 2,
                time_width: 6,
                freq_masks: 2,
                freq_width: 3,
            },
            use_speaker_consistency: true,
            use_stepwise: true,
            optimizer: OptimizerKind::Adam,
            seed: 7,
        }
    }

    #[test]
    fn zero_width_masks_leave_input_unchanged() {
        let policy = SpecAugmentPolicy {
            time_masks: 2,
            time_width: 0,
            freq_masks: 2,
            freq_width: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = specaugment_mask(9, 5, &policy, &mut rng);
        assert!(mask.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn masking_zeroes_bounded_cells_and_keeps_the_rest_bit_identical() {
        let policy = SpecAugmentPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data_rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let rows = 20 + (trial % 13);
            let cols = 16;
            let x = uniform_init(&mut data_rng, &[rows, cols], 1.0)
                .mapv(|v| v + 2.0_f64.copysign(v)); // keep cells away from zero
            let mask = specaugment_mask(rows, cols, &policy, &mut rng);
            let masked = &x * &mask.clone().into_dyn();
            let zeroed = masked.iter().filter(|&&v| v == 0.0).count();
            assert!(
                zeroed <= 2 * policy.time_width * cols + 2 * policy.freq_width * rows,
                "trial {trial}: {zeroed} zeroed cells"
            );
            for (m, (orig, kept)) in mask.iter().zip(x.iter().zip(masked.iter())) {
                if *m == 1.0 {
                    assert_eq!(orig.to_bits(), kept.to_bits());
                } else {
                    assert_eq!(*kept, 0.0);
                }
            }
        }
    }

    #[test]
    fn masking_survives_inputs_shorter_than_the_mask_width() {
        let policy = SpecAugmentPolicy::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = specaugment_mask(3, 4, &policy, &mut rng);
            assert_eq!(mask.shape(), &[3, 4]);
        }
    }

    #[test]
    fn consistency_loss_of_identical_speech_is_minus_one() {
        let rig = tiny_rig(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let features: Array2<f64> = uniform_init(&mut rng, &[12, FEATURE_DIM], 1.0)
            .into_dimensionality()
            .unwrap();
        let mut tape = Tape::new();
        let bound = rig.store.bind_const(&mut tape, &[]);
        let x = tape.constant(features.clone().into_dyn());
        let loss = speaker_consistency_loss(&mut tape, &bound, &rig.speaker, x, &features).unwrap();
        assert!((tape.scalar(loss) + 1.0).abs() < 1e-10);
    }

    #[test]
    fn consistency_loss_on_constructed_embeddings_hits_the_cosine_bounds() {
        let mut tape = Tape::new();
        let a = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![1.0, 0.0, 2.0, 0.0]).unwrap());
        let orth = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![0.0, 3.0, 0.0, -1.0]).unwrap());
        let anti = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![-2.0, 0.0, -4.0, 0.0]).unwrap());
        let l_orth = sc_loss_from_embeddings(&mut tape, a, orth).unwrap();
        assert!(tape.scalar(l_orth).abs() < 1e-12);
        let l_anti = sc_loss_from_embeddings(&mut tape, a, anti).unwrap();
        assert!((tape.scalar(l_anti) - 1.0).abs() < 1e-12);
        let l_self = sc_loss_from_embeddings(&mut tape, a, a).unwrap();
        assert!((tape.scalar(l_self) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_total_decomposes_into_cycle_plus_weighted_consistency() {
        let rig = tiny_rig(6);
        let corpus = tiny_corpus(60);
        let text = &corpus.unpaired_texts[0];
        let reference = &corpus.paired[0].features;
        let mut tape = Tape::new();
        let bound = rig.store.bind_const(&mut tape, &[]);
        let alpha = 0.1;
        let parts = unpaired_loss(
            &mut tape,
            &bound,
            &rig.tts,
            &rig.asr,
            &rig.speaker,
            text,
            reference,
            alpha,
            true,
            None,
        )
        .unwrap();
        let total = tape.scalar(parts.total);
        let cycle = tape.scalar(parts.cycle);
        let sc = tape.scalar(parts.sc.unwrap());
        assert!((total - (cycle + alpha * sc)).abs() < 1e-12);

        // Without the consistency term the total IS the cycle loss.
        let plain = unpaired_loss(
            &mut tape,
            &bound,
            &rig.tts,
            &rig.asr,
            &rig.speaker,
            text,
            reference,
            alpha,
            false,
            None,
        )
        .unwrap();
        assert_eq!(
            tape.scalar(plain.total).to_bits(),
            tape.scalar(plain.cycle).to_bits()
        );
        assert!(plain.sc.is_none());
    }

    #[test]
    fn cycle_gradient_reaches_the_synthesizer_only_when_unfrozen() {
        let corpus = tiny_corpus(61);
        let text = &corpus.unpaired_texts[0];
        let reference = &corpus.paired[0].features;
        let grads_for = |freeze_tts: bool| {
            let mut rig = tiny_rig(7);
            rig.store.set_frozen_prefix("tts.", freeze_tts);
            let mut tape = Tape::new();
            let bound = rig.store.bind(&mut tape, &[]);
            let loss = cycle_loss(
                &mut tape,
                &bound,
                &rig.tts,
                &rig.asr,
                &rig.speaker,
                text,
                reference,
            )
            .unwrap();
            let mut grads = tape.backward(loss).unwrap();
            let mut accum = GradAccum::new(&rig.store);
            accum.absorb(&bound, &mut grads);
            let enc_id = rig.store.id("tts.enc", "embed").unwrap();
            let asr_id = rig.store.id("asr.enc", "in_proj.w").unwrap();
            (
                accum.get(enc_id).map(|g| g.iter().any(|v| v.abs() > 0.0)),
                accum.get(asr_id).map(|g| g.iter().any(|v| v.abs() > 0.0)),
            )
        };
        let (tts_grad, asr_grad) = grads_for(false);
        assert_eq!(tts_grad, Some(true), "unfrozen synthesizer got no gradient");
        assert_eq!(asr_grad, Some(true));
        let (tts_grad, asr_grad) = grads_for(true);
        assert!(tts_grad.is_none(), "frozen synthesizer still got a gradient");
        assert_eq!(asr_grad, Some(true));
    }

    #[test]
    fn phase_a_leaves_the_synthesizer_bit_identical() {
        let mut rig = tiny_rig(8);
        let corpus = tiny_corpus(62);
        let before = rig.store.snapshot(&["tts.", "speaker."]);
        let report = run_phase_a(
            &mut rig.store,
            &rig.tts,
            &rig.asr,
            &rig.speaker,
            &corpus,
            &tiny_train_cfg(),
            None,
        )
        .unwrap();
        let after = rig.store.snapshot(&["tts.", "speaker."]);
        assert_eq!(before.len(), after.len());
        for ((p1, n1, v1), (p2, n2, v2)) in before.iter().zip(after.iter()) {
            assert_eq!((p1, n1), (p2, n2));
            for (a, b) in v1.iter().zip(v2.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{p1}/{n1} moved during phase A");
            }
        }
        assert!(!report.epochs.is_empty());
        assert!(
            report
                .optimizer_partitions
                .iter()
                .all(|p| p.starts_with("asr.")),
            "optimizer touched non-recognizer partitions: {:?}",
            report.optimizer_partitions
        );
        assert!(!report.optimizer_partitions.is_empty());
    }

    #[test]
    fn phase_b_freezes_duration_predictor_but_moves_the_rest() {
        let mut rig = tiny_rig(9);
        let corpus = tiny_corpus(63);
        let dur_before = rig.store.snapshot(&["tts.va.dur"]);
        let enc_before = rig.store.snapshot(&["tts.enc"]);
        let report = run_phase_b(
            &mut rig.store,
            &rig.tts,
            &rig.asr,
            &rig.speaker,
            &corpus,
            &tiny_train_cfg(),
            None,
        )
        .unwrap();
        let dur_after = rig.store.snapshot(&["tts.va.dur"]);
        for ((p, n, v1), (_, _, v2)) in dur_before.iter().zip(dur_after.iter()) {
            for (a, b) in v1.iter().zip(v2.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{p}/{n} moved during phase B");
            }
        }
        let enc_after = rig.store.snapshot(&["tts.enc"]);
        let moved = enc_before
            .iter()
            .zip(enc_after.iter())
            .any(|((_, _, v1), (_, _, v2))| v1.iter().zip(v2.iter()).any(|(a, b)| a != b));
        assert!(moved, "synthesizer encoder never moved in phase B");
        assert!(report.epochs.iter().all(|e| e.train_tts_loss.is_some()));
        assert!(report
            .optimizer_partitions
            .iter()
            .all(|p| !p.starts_with("tts.va.dur") && !p.starts_with("speaker.")));
    }

    #[test]
    fn epoch_records_decompose_the_validation_objective() {
        let mut rig = tiny_rig(10);
        let corpus = tiny_corpus(64);
        let cfg = tiny_train_cfg();
        let report = run_phase_b(
            &mut rig.store,
            &rig.tts,
            &rig.asr,
            &rig.speaker,
            &corpus,
            &cfg,
            None,
        )
        .unwrap();
        for e in &report.epochs {
            assert!(
                (e.val_objective - (e.val_cycle + cfg.alpha * e.val_sc)).abs() < 1e-12,
                "objective does not decompose at epoch {}",
                e.epoch
            );
        }
    }

    #[test]
    fn fixed_seed_reproduces_final_parameters_bit_for_bit() {
        let corpus = tiny_corpus(65);
        let run = || {
            let mut rig = tiny_rig(11);
            let mut calls = 0usize;
            let mut hook = |_: JointPhase, _: usize, _: &ParamStore| {
                calls += 1;
                Ok(())
            };
            let outcome = run_joint(
                &mut rig.store,
                &rig.tts,
                &rig.asr,
                &rig.speaker,
                &corpus,
                &tiny_train_cfg(),
                Some(&mut hook),
            )
            .unwrap();
            let epochs = outcome.all_epochs().len();
            assert_eq!(calls, epochs, "hook must fire once per epoch");
            (rig.store.snapshot(&[]), epochs)
        };
        let (a, ea) = run();
        let (b, eb) = run();
        assert_eq!(ea, eb);
        assert_eq!(a.len(), b.len());
        for ((p1, n1, v1), (_, n2, v2)) in a.iter().zip(b.iter()) {
            assert_eq!(n1, n2);
            for (x, y) in v1.iter().zip(v2.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{p1}/{n1} differs between runs");
            }
        }
    }

    #[test]
    fn disabling_stepwise_skips_phase_a() {
        let mut rig = tiny_rig(12);
        let corpus = tiny_corpus(66);
        let cfg = TrainConfig {
            use_stepwise: false,
            ..tiny_train_cfg()
        };
        let outcome = run_joint(
            &mut rig.store,
            &rig.tts,
            &rig.asr,
            &rig.speaker,
            &corpus,
            &cfg,
            None,
        )
        .unwrap();
        assert!(outcome.phase_a.is_none());
        assert!(!outcome.phase_b.epochs.is_empty());
    }

    #[test]
    fn config_invariants_are_enforced() {
        let bad_alpha = TrainConfig {
            alpha: -0.1,
            ..TrainConfig::default()
        };
        assert!(bad_alpha.validate().is_err());
        let bad_patience = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad_patience.validate().is_err());
    }

    #[test]
    fn default_weighting_matches_the_reported_setting() {
        assert_eq!(TrainConfig::default().alpha, 0.1);
    }

    const _: () = assert!(EOS < VOCAB_SIZE);
}
