//! Transformer encoder–decoder speech recognizer.
//!
//! The encoder stacks adjacent frame pairs (halving the sequence length),
//! projects them into the model width, and applies pre-norm self-attention
//! blocks. The decoder consumes a BOS-prefixed token sequence under a causal
//! mask with cross-attention into the encoder memory, and a linear head maps
//! decoder states to vocabulary logits.
//!
//! Parameters live in three partitions — `asr.enc`, `asr.dec`, `asr.linear` —
//! so the orchestrator can freeze or reload them independently. All forward
//! ops take the acoustic input as a tape [`Var`], which is what lets losses
//! differentiate through synthesized speech into the synthesizer.

use crate::autodiff::{Tape, Var};
use crate::blocks::{causal_mask, positional_encoding, BlockConfig, DecoderBlock, EncoderBlock, Linear, Norm};
use crate::corpus::{CorpusSplit, Utterance, BOS, EOS, FEATURE_DIM, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::params::{xavier_init, Bound, GradAccum, Optimizer, OptimizerKind, ParamId, ParamStore};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ASR_ENC: &str = "asr.enc";
pub const ASR_DEC: &str = "asr.dec";
pub const ASR_LINEAR: &str = "asr.linear";

/// Architecture of the recognizer.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AsrConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Adjacent frames stacked into one encoder input row.
    pub subsample: usize,
    pub encoder: BlockConfig,
    pub decoder: BlockConfig,
    pub max_decode_len: usize,
}

impl Default for AsrConfig {
    fn default() -> Self {
        let block = BlockConfig {
            model_dim: 64,
            head_count: 2,
            ff_dim: 128,
            layer_count: 2,
        };
        AsrConfig {
            vocab_size: VOCAB_SIZE,
            feature_dim: FEATURE_DIM,
            subsample: 2,
            encoder: block,
            decoder: block,
            max_decode_len: 64,
        }
    }
}

impl AsrConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.model_dim != self.decoder.model_dim {
            return Err(Error::config("encoder and decoder widths must match"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocabulary must hold at least two tokens"));
        }
        if self.subsample == 0 || self.feature_dim == 0 {
            return Err(Error::config("subsample factor and feature dim must be positive"));
        }
        if self.max_decode_len == 0 {
            return Err(Error::config("max decode length must be at least 1"));
        }
        Ok(())
    }
}

/// Parameter handles for one recognizer.
pub struct AsrModel {
    pub cfg: AsrConfig,
    in_proj: Linear,
    enc_blocks: Vec<EncoderBlock>,
    enc_norm: Norm,
    embed: ParamId,
    dec_blocks: Vec<DecoderBlock>,
    dec_norm: Norm,
    out: Linear,
}

impl AsrModel {
    pub fn define(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: AsrConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.model_dim;
        let in_proj = Linear::define(
            store,
            rng,
            ASR_ENC,
            "in_proj",
            cfg.feature_dim * cfg.subsample,
            d,
        );
        let enc_blocks = (0..cfg.encoder.layer_count)
            .map(|i| EncoderBlock::define(store, rng, ASR_ENC, &format!("blk{i}"), &cfg.encoder))
            .collect();
        let enc_norm = Norm::define(store, ASR_ENC, "final_norm", d);
        let embed = store.define(ASR_DEC, "embed", xavier_init(rng, cfg.vocab_size, d));
        let dec_blocks = (0..cfg.decoder.layer_count)
            .map(|i| DecoderBlock::define(store, rng, ASR_DEC, &format!("blk{i}"), &cfg.decoder))
            .collect();
        let dec_norm = Norm::define(store, ASR_DEC, "final_norm", d);
        let out = Linear::define_scaled(store, rng, ASR_LINEAR, "out", d, cfg.vocab_size, 0.1);
        Ok(AsrModel {
            cfg,
            in_proj,
            enc_blocks,
            enc_norm,
            embed,
            dec_blocks,
            dec_norm,
            out,
        })
    }

    /// Stacks each group of `subsample` consecutive frames into one row,
    /// zero-padding the tail, so `[T, F]` becomes `[⌈T/s⌉, s·F]`.
    fn stack_frames(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (t, f) = (shape[0], shape[1]);
        let s = self.cfg.subsample;
        let rows = t.div_ceil(s);
        let padded = if rows * s == t {
            x
        } else {
            let pad = tape.constant(ArrayD::zeros(IxDyn(&[rows * s - t, f])));
            tape.concat(0, &[x, pad])?
        };
        tape.reshape(padded, &[rows, s * f])
    }

    /// Encodes acoustic features `[T, F]` into memory `[⌈T/s⌉, D]`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.feature_dim {
            return Err(Error::contract(format!(
                "recognizer expects [T, {}] features, got {:?}",
                self.cfg.feature_dim, shape
            )));
        }
        if shape[0] == 0 {
            return Err(Error::contract("recognizer needs at least one frame"));
        }
        let d = self.cfg.encoder.model_dim;
        let stacked = self.stack_frames(tape, x)?;
        let mut h = self.in_proj.apply(tape, bound, stacked)?;
        let rows = tape.shape(h)[0];
        let pe = tape.constant(positional_encoding(rows, d)?);
        h = tape.add(h, pe)?;
        for blk in &self.enc_blocks {
            h = blk.apply(tape, bound, h, None)?;
        }
        self.enc_norm.apply(tape, bound, h)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::contract("token sequence must be non-empty"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::contract(format!(
                "token {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the decoder over `inputs` (already BOS-prefixed) against the
    /// encoder memory, producing one logit row per input position.
    fn decode_logits(&self, tape: &mut Tape, bound: &Bound, memory: Var, inputs: &[usize]) -> Result<Var> {
        self.check_tokens(inputs)?;
        let d = self.cfg.decoder.model_dim;
        let table = bound.var(self.embed);
        let mut h = tape.gather_rows(table, inputs)?;
        let pe = tape.constant(positional_encoding(inputs.len(), d)?);
        h = tape.add(h, pe)?;
        let mask = causal_mask(inputs.len());
        for blk in &self.dec_blocks {
            h = blk.apply(tape, bound, h, memory, &mask)?;
        }
        let h = self.dec_norm.apply(tape, bound, h)?;
        self.out.apply(tape, bound, h)
    }

    fn teacher_inputs(y: &[usize]) -> Vec<usize> {
        let mut inputs = Vec::with_capacity(y.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&y[..y.len() - 1]);
        inputs
    }

    /// Posterior over the next token given the decoded prefix: `[1, vocab]`.
    pub fn step_posterior(&self, tape: &mut Tape, bound: &Bound, memory: Var, prefix: &[usize]) -> Result<Var> {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(prefix);
        let logits = self.decode_logits(tape, bound, memory, &inputs)?;
        let last = tape.slice_axis(logits, 0, inputs.len() - 1, inputs.len())?;
        Ok(tape.softmax(last))
    }

    /// Teacher-forced cross entropy: mean over positions of the negative log
    /// posterior of each target token.
    pub fn ce_loss(&self, tape: &mut Tape, bound: &Bound, x: Var, y: &[usize]) -> Result<Var> {
        self.check_tokens(y)?;
        let memory = self.encode(tape, bound, x)?;
        self.ce_loss_with_memory(tape, bound, memory, y)
    }

    /// Same loss against an already-encoded memory (lets callers share one
    /// encoder pass across losses).
    pub fn ce_loss_with_memory(&self, tape: &mut Tape, bound: &Bound, memory: Var, y: &[usize]) -> Result<Var> {
        self.check_tokens(y)?;
        let logits = self.decode_logits(tape, bound, memory, &Self::teacher_inputs(y))?;
        tape.cross_entropy_mean(logits, y)
    }

    /// Cross entropy where each decoder input token is, with probability
    /// `sampling_prob`, a token sampled from the model's own teacher-forced
    /// posterior at that position instead of the ground truth. At probability
    /// zero this computes exactly the teacher-forced loss.
    pub fn scheduled_sampling_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        y: &[usize],
        sampling_prob: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if !(0.0..=1.0).contains(&sampling_prob) {
            return Err(Error::Domain {
                op: "scheduled_sampling_forward".into(),
                detail: format!("sampling_prob {sampling_prob} outside [0, 1]"),
            });
        }
        self.check_tokens(y)?;
        let memory = self.encode(tape, bound, x)?;
        let teacher = Self::teacher_inputs(y);
        // First pass: teacher-forced posteriors the model would emit. Only the
        // sampled token values survive into the second pass, so no gradient
        // flows through this pass.
        let logits = self.decode_logits(tape, bound, memory, &teacher)?;
        let probs = tape.softmax(logits);
        let probs = tape.value(probs).clone();
        let mut mixed = teacher.clone();
        for i in 1..mixed.len() {
            if rng.gen::<f64>() < sampling_prob {
                // The model's prediction for position i is posterior row i-1.
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut tok = self.cfg.vocab_size - 1;
                for v in 0..self.cfg.vocab_size {
                    acc += probs[[i - 1, v]];
                    if u < acc {
                        tok = v;
                        break;
                    }
                }
                mixed[i] = tok;
            }
        }
        let logits = self.decode_logits(tape, bound, memory, &mixed)?;
        tape.cross_entropy_mean(logits, y)
    }

    /// Argmax decoding until EOS or `max_len` tokens.
    pub fn greedy_decode(&self, store: &ParamStore, features: &Array2<f64>, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &["asr."]);
        let x = tape.constant(features.clone().into_dyn());
        let memory = self.encode(&mut tape, &bound, x)?;
        let mut decoded: Vec<usize> = Vec::new();
        while decoded.len() < max_len {
            let posterior = self.step_posterior(&mut tape, &bound, memory, &decoded)?;
            let row = tape.value(posterior);
            let token = (0..self.cfg.vocab_size)
                .max_by(|&a, &b| row[[0, a]].partial_cmp(&row[[0, b]]).unwrap())
                .unwrap();
            decoded.push(token);
            if token == EOS {
                break;
            }
        }
        Ok(decoded)
    }

    /// Exponentiated teacher-forced cross entropy of `y` given `features`.
    pub fn perplexity(&self, store: &ParamStore, features: &Array2<f64>, y: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &["asr."]);
        let x = tape.constant(features.clone().into_dyn());
        let loss = self.ce_loss(&mut tape, &bound, x, y)?;
        Ok(tape.scalar(loss).exp())
    }

    /// Mean teacher-forced cross entropy over a set of utterances.
    pub fn evaluate_ce(&self, store: &ParamStore, items: &[Utterance]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::contract("evaluation set must be non-empty"));
        }
        let mut sum = 0.0;
        for u in items {
            let mut tape = Tape::new();
            let bound = store.bind_const(&mut tape, &["asr."]);
            let x = tape.constant(u.features.clone().into_dyn());
            let loss = self.ce_loss(&mut tape, &bound, x, &u.text)?;
            sum += tape.scalar(loss);
        }
        Ok(sum / items.len() as f64)
    }
}

/// Linear ramp from 0 at epoch 0 to `max_prob` at `ramp_epochs`, flat after.
pub fn scheduled_sampling_prob(epoch: usize, ramp_epochs: usize, max_prob: f64) -> f64 {
    if ramp_epochs == 0 {
        return max_prob;
    }
    max_prob * (epoch as f64 / ramp_epochs as f64).min(1.0)
}

/// One epoch of the recognizer pretraining curve.
#[derive(Clone, Copy, Debug)]
pub struct AsrEpoch {
    pub epoch: usize,
    pub sampling_prob: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Settings for [`pretrain_asr`].
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AsrPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    /// Epochs over which the sampling probability ramps from 0 to its cap.
    pub ss_ramp_epochs: usize,
    pub ss_max_prob: f64,
    /// Derived from the experiment seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AsrPretrainConfig {
    fn default() -> Self {
        AsrPretrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-3,
            patience: 5,
            ss_ramp_epochs: 20,
            ss_max_prob: 0.4,
            seed: 0,
        }
    }
}

/// Trains the recognizer on the paired split with a scheduled-sampling ramp,
/// early stops on validation cross entropy, and restores the best weights.
/// The recognizer is left unfrozen: later training stages keep updating it.
pub fn pretrain_asr(
    store: &mut ParamStore,
    model: &AsrModel,
    corpus: &CorpusSplit,
    cfg: &AsrPretrainConfig,
) -> Result<Vec<AsrEpoch>> {
    if corpus.paired.is_empty() {
        return Err(Error::contract("recognizer pretraining needs paired data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6173_725f_7072_65);
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, store);
    let mut curve = Vec::new();
    let mut best: Option<(f64, Vec<(String, String, ArrayD<f64>)>)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        let sampling_prob = scheduled_sampling_prob(epoch, cfg.ss_ramp_epochs, cfg.ss_max_prob);
        let mut order: Vec<usize> = (0..corpus.paired.len()).collect();
        order.shuffle(&mut rng);
        let mut train_loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut accum = GradAccum::new(store);
            for &i in chunk {
                let u = &corpus.paired[i];
                let mut tape = Tape::new();
                let bound = store.bind(&mut tape, &["asr."]);
                let x = tape.constant(u.features.clone().into_dyn());
                let loss = if sampling_prob > 0.0 {
                    model.scheduled_sampling_forward(&mut tape, &bound, x, &u.text, sampling_prob, &mut rng)?
                } else {
                    model.ce_loss(&mut tape, &bound, x, &u.text)?
                };
                train_loss_sum += tape.scalar(loss);
                let mut grads = tape.backward(loss)?;
                accum.absorb(&bound, &mut grads);
            }
            accum.mean();
            opt.step(store, &accum);
        }
        let train_loss = train_loss_sum / corpus.paired.len() as f64;
        let val_loss = model.evaluate_ce(store, &corpus.validation)?;
        curve.push(AsrEpoch {
            epoch,
            sampling_prob,
            train_loss,
            val_loss,
        });

        let improved = best.as_ref().map_or(true, |(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, store.snapshot(&["asr."])));
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
    use crate::corpus::{make_splits, CorpusConfig};
    use crate::params::uniform_init;

    fn tiny_cfg() -> AsrConfig {
        let block = BlockConfig {
            model_dim: 16,
            head_count: 2,
            ff_dim: 16,
            layer_count: 1,
        };
        AsrConfig {
            vocab_size: 8,
            feature_dim: 4,
            subsample: 2,
            encoder: block,
            decoder: block,
            max_decode_len: 12,
        }
    }

    fn build(seed: u64, cfg: AsrConfig) -> (ParamStore, AsrModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = AsrModel::define(&mut store, &mut rng, cfg).unwrap();
        (store, model)
    }

    fn random_features(seed: u64, t: usize, f: usize) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform_init(&mut rng, &[t, f], 1.0)
    }

    #[test]
    fn encoder_rows_are_frames_over_subsample_rounded_up() {
        let (store, model) = build(1, tiny_cfg());
        for (t, rows) in [(10, 5), (9, 5), (1, 1), (2, 1)] {
            let mut tape = Tape::new();
            let bound = store.bind_const(&mut tape, &[]);
            let x = tape.constant(random_features(t as u64, t, 4));
            let h = model.encode(&mut tape, &bound, x).unwrap();
            assert_eq!(tape.shape(h), &[rows, 16], "t={t}");
        }
    }

    #[test]
    fn encoder_rejects_empty_or_misshaped_input() {
        let (store, model) = build(2, tiny_cfg());
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let empty = tape.constant(ArrayD::zeros(IxDyn(&[0, 4])));
        assert!(model.encode(&mut tape, &bound, empty).is_err());
        let wrong = tape.constant(ArrayD::zeros(IxDyn(&[3, 5])));
        assert!(model.encode(&mut tape, &bound, wrong).is_err());
    }

    #[test]
    fn encoding_is_deterministic_and_every_frame_reaches_it() {
        let (store, model) = build(3, tiny_cfg());
        let base = random_features(30, 7, 4);
        let run = |input: ArrayD<f64>| {
            let mut tape = Tape::new();
            let bound = store.bind_const(&mut tape, &[]);
            let x = tape.constant(input);
            let h = model.encode(&mut tape, &bound, x).unwrap();
            tape.value(h).clone()
        };
        assert_eq!(run(base.clone()), run(base.clone()), "bit-stable reruns");
        for t in [0, 3, 6] {
            let mut perturbed = base.clone();
            perturbed[[t, 2]] += 0.25;
            assert_ne!(run(base.clone()), run(perturbed), "frame {t} is dead");
        }
    }

    #[test]
    fn step_posterior_is_a_distribution() {
        let (store, model) = build(4, tiny_cfg());
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let x = tape.constant(random_features(5, 6, 4));
        let memory = model.encode(&mut tape, &bound, x).unwrap();
        let posterior = model.step_posterior(&mut tape, &bound, memory, &[4, 5]).unwrap();
        let row = tape.value(posterior);
        assert_eq!(row.shape(), &[1, 8]);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|p| *p > 0.0));
    }

    #[test]
    fn untrained_model_scores_near_log_vocab() {
        let ln_v = (tiny_cfg().vocab_size as f64).ln();
        for seed in 0..5 {
            let (store, model) = build(100 + seed, tiny_cfg());
            let mut tape = Tape::new();
            let bound = store.bind_const(&mut tape, &[]);
            let x = tape.constant(random_features(seed, 8, 4));
            let loss = model.ce_loss(&mut tape, &bound, x, &[4, 6, 5, 2]).unwrap();
            let ce = tape.scalar(loss);
            assert!(
                (ce - ln_v).abs() / ln_v < 0.10,
                "seed {seed}: ce {ce} vs ln|V| {ln_v}"
            );
        }
    }

    #[test]
    fn zeroed_output_head_gives_uniform_posteriors() {
        // A zeroed head makes every posterior exactly uniform, so the loss is
        // ln |V| and the perplexity is |V|; checked for a 32-token vocabulary.
        let cfg = AsrConfig {
            vocab_size: 32,
            ..tiny_cfg()
        };
        let (mut store, model) = build(6, cfg);
        store.value_mut(model.out.w).fill(0.0);
        store.value_mut(model.out.b).fill(0.0);
        let feats = random_features(7, 6, 4);
        let y = vec![4, 9, 31, 2];
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let x = tape.constant(feats.clone());
        let loss = model.ce_loss(&mut tape, &bound, x, &y).unwrap();
        let ce = tape.scalar(loss);
        assert!((ce - 32f64.ln()).abs() < 1e-10, "ce {ce}");
        let feats2 = feats.clone().into_dimensionality().unwrap();
        let perp = model.perplexity(&store, &feats2, &y).unwrap();
        assert!((perp - 32.0).abs() < 1e-8, "perplexity {perp}");
    }

    #[test]
    fn sequence_log_probability_factorizes_over_steps() {
        let (store, model) = build(8, tiny_cfg());
        let y = vec![4, 7, 5, 4, 2];
        let feats = random_features(9, 9, 4);
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let x = tape.constant(feats);
        let loss = model.ce_loss(&mut tape, &bound, x, &y).unwrap();
        let total = tape.scalar(loss) * y.len() as f64;
        // Independent recomputation: one posterior query per prefix.
        let x2 = tape.constant(random_features(9, 9, 4));
        let memory = model.encode(&mut tape, &bound, x2).unwrap();
        let mut stepwise = 0.0;
        for l in 0..y.len() {
            let posterior = model.step_posterior(&mut tape, &bound, memory, &y[..l]).unwrap();
            stepwise -= tape.value(posterior)[[0, y[l]]].ln();
        }
        assert!(
            (total - stepwise).abs() < 1e-10,
            "joint {total} vs stepwise {stepwise}"
        );
    }

    #[test]
    fn posterior_ignores_future_tokens() {
        let (store, model) = build(10, tiny_cfg());
        let feats = random_features(11, 8, 4);
        let logits_for = |y: &[usize]| {
            let mut tape = Tape::new();
            let bound = store.bind_const(&mut tape, &[]);
            let x = tape.constant(feats.clone());
            let memory = model.encode(&mut tape, &bound, x).unwrap();
            let logits = model
                .decode_logits(&mut tape, &bound, memory, &AsrModel::teacher_inputs(y))
                .unwrap();
            tape.value(logits).clone()
        };
        let a = logits_for(&[4, 5, 6, 7, 2]);
        let b = logits_for(&[4, 5, 3, 3, 2]);
        for row in 0..3 {
            for v in 0..8 {
                assert_eq!(
                    a[[row, v]].to_bits(),
                    b[[row, v]].to_bits(),
                    "row {row} sees a future edit"
                );
            }
        }
        let row3 = |m: &ArrayD<f64>| (0..8).map(|v| m[[3, v]]).collect::<Vec<_>>();
        assert_ne!(row3(&a), row3(&b));
    }

    #[test]
    fn perplexity_equals_exp_cross_entropy() {
        let (store, model) = build(12, tiny_cfg());
        let feats: Array2<f64> = random_features(13, 7, 4).into_dimensionality().unwrap();
        let y = vec![5, 6, 2];
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let x = tape.constant(feats.clone().into_dyn());
        let ce_loss = model.ce_loss(&mut tape, &bound, x, &y).unwrap();
        let ce = tape.scalar(ce_loss);
        let perp = model.perplexity(&store, &feats, &y).unwrap();
        assert!((perp - ce.exp()).abs() < 1e-10 * perp.max(1.0));
    }

    #[test]
    fn zero_sampling_probability_reproduces_teacher_forcing_exactly() {
        let (store, model) = build(14, tiny_cfg());
        let feats = random_features(15, 10, 4);
        let y = vec![4, 5, 6, 7, 4, 2];
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let x = tape.constant(feats);
        let teacher_loss = model.ce_loss(&mut tape, &bound, x, &y).unwrap();
        let teacher = tape.scalar(teacher_loss);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sampled_loss = model
            .scheduled_sampling_forward(&mut tape, &bound, x, &y, 0.0, &mut rng)
            .unwrap();
        let sampled = tape.scalar(sampled_loss);
        assert_eq!(teacher.to_bits(), sampled.to_bits());
    }

    #[test]
    fn full_sampling_is_no_easier_than_teacher_forcing() {
        // Once the decoder has learned anything about prefixes, conditioning
        // on its own sampled (usually wrong) tokens cannot score better in
        // expectation than conditioning on the truth.
        let cfg = CorpusConfig {
            speakers: 2,
            paired: 16,
            unpaired: 4,
            validation: 6,
            test: 4,
            paired_words: 8,
            extended_words: 12,
            noise_sigma: 0.01,
            tempo_sigma: 0.0,
            pitch_sigma: 0.0,
        };
        let corpus = make_splits(&cfg, 55).unwrap();
        let block = BlockConfig {
            model_dim: 32,
            head_count: 2,
            ff_dim: 32,
            layer_count: 1,
        };
        let asr_cfg = AsrConfig {
            vocab_size: VOCAB_SIZE,
            feature_dim: FEATURE_DIM,
            subsample: 2,
            encoder: block,
            decoder: block,
            max_decode_len: 64,
        };
        let (mut store, model) = build(56, asr_cfg);
        let pretrain_cfg = AsrPretrainConfig {
            epochs: 4,
            batch_size: 8,
            learning_rate: 1e-3,
            patience: 5,
            ss_ramp_epochs: 20,
            ss_max_prob: 0.4,
            seed: 0,
        };
        pretrain_asr(&mut store, &model, &corpus, &pretrain_cfg).unwrap();

        let u = &corpus.validation[0];
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let x = tape.constant(u.features.clone().into_dyn());
        let teacher_loss = model.ce_loss(&mut tape, &bound, x, &u.text).unwrap();
        let teacher = tape.scalar(teacher_loss);
        let mut sampled_sum = 0.0;
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sampled_loss = model
                .scheduled_sampling_forward(&mut tape, &bound, x, &u.text, 1.0, &mut rng)
                .unwrap();
            sampled_sum += tape.scalar(sampled_loss);
        }
        let sampled = sampled_sum / 30.0;
        assert!(
            sampled >= teacher,
            "free-running mean {sampled} beat teacher-forced {teacher}"
        );
    }

    #[test]
    fn sampling_probability_outside_unit_interval_is_rejected() {
        let (store, model) = build(16, tiny_cfg());
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let x = tape.constant(random_features(17, 4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bad in [-0.1, 1.5] {
            assert!(matches!(
                model.scheduled_sampling_forward(&mut tape, &bound, x, &[4, 2], bad, &mut rng),
                Err(Error::Domain { .. })
            ));
        }
    }

    #[test]
    fn sampling_schedule_ramps_linearly_then_saturates() {
        assert_eq!(scheduled_sampling_prob(0, 20, 0.4), 0.0);
        assert!((scheduled_sampling_prob(10, 20, 0.4) - 0.2).abs() < 1e-15);
        assert!((scheduled_sampling_prob(20, 20, 0.4) - 0.4).abs() < 1e-15);
        assert!((scheduled_sampling_prob(35, 20, 0.4) - 0.4).abs() < 1e-15);
        assert_eq!(scheduled_sampling_prob(7, 0, 0.4), 0.4);
    }

    #[test]
    fn greedy_decode_terminates_and_is_deterministic() {
        let (store, model) = build(18, tiny_cfg());
        let feats: Array2<f64> = random_features(19, 6, 4).into_dimensionality().unwrap();
        let a = model.greedy_decode(&store, &feats, 7).unwrap();
        let b = model.greedy_decode(&store, &feats, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 7);
        if let Some((last, rest)) = a.split_last() {
            if *last != EOS {
                assert_eq!(a.len(), 7, "stopped early without EOS");
            }
            assert!(rest.iter().all(|t| *t != EOS));
        }
        assert!(matches!(
            model.greedy_decode(&store, &feats, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn rejects_empty_and_out_of_vocabulary_targets() {
        let (store, model) = build(20, tiny_cfg());
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &[]);
        let x = tape.constant(random_features(21, 4, 4));
        assert!(model.ce_loss(&mut tape, &bound, x, &[]).is_err());
        assert!(model.ce_loss(&mut tape, &bound, x, &[4, 99]).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let (store, model) = build(22, tiny_cfg());
        let y = vec![4, 5];
        let feats = random_features(23, 5, 4);
        let report = finite_diff_check(&[feats], 1e-5, 1e-6, |tape, vars| {
            let bound = store.bind_const(tape, &[]);
            model.ce_loss(tape, &bound, vars[0], &y)
        })
        .unwrap();
        report.assert_within(1e-3);
    }

    #[test]
    fn training_reduces_validation_loss() {
        let cfg = CorpusConfig {
            speakers: 2,
            paired: 24,
            unpaired: 4,
            validation: 8,
            test: 4,
            paired_words: 8,
            extended_words: 12,
            noise_sigma: 0.01,
            tempo_sigma: 0.0,
            pitch_sigma: 0.0,
        };
        let corpus = make_splits(&cfg, 77).unwrap();
        let (mut store, model) = build(78, AsrConfig::default());
        let pretrain_cfg = AsrPretrainConfig {
            epochs: 40,
            batch_size: 4,
            learning_rate: 1e-3,
            patience: 8,
            ss_ramp_epochs: 20,
            ss_max_prob: 0.4,
            seed: 0,
        };
        let initial = model.evaluate_ce(&store, &corpus.validation).unwrap();
        let curve = pretrain_asr(&mut store, &model, &corpus, &pretrain_cfg).unwrap();
        assert!(!curve.is_empty());
        assert!(curve.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite()));
        let best = curve.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(
            best < 0.6 * initial,
            "validation loss {initial} only reached {best}"
        );
        let final_val = model.evaluate_ce(&store, &corpus.validation).unwrap();
        assert!(
            (final_val - best).abs() < 1e-9,
            "best weights were not restored: {final_val} vs {best}"
        );
    }
}
