//! Speaker embedder: a small self-attention frame encoder with attentive
//! pooling, pretrained by speaker classification and frozen afterwards.
//!
//! The embedder owns two partitions: `speaker.enc` (everything on the
//! embedding path) and `speaker.head` (the classification head, which only
//! matters during pretraining). After [`pretrain_speaker`] both are frozen;
//! downstream losses differentiate *through* the embedder into its inputs,
//! never into its parameters.

use crate::autodiff::{Tape, Var};
use crate::blocks::{positional_encoding, BlockConfig, EncoderBlock, Linear, Norm};
use crate::corpus::{CorpusSplit, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::params::{Bound, GradAccum, Optimizer, OptimizerKind, ParamStore};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture of the embedder.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpeakerConfig {
    pub block: BlockConfig,
    /// Width of the pooling scorer's hidden layer.
    pub pool_dim: usize,
    /// Dimension of the produced speaker embedding.
    pub embed_dim: usize,
    /// Number of speaker classes for the pretraining head.
    pub class_count: usize,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        SpeakerConfig {
            block: BlockConfig {
                model_dim: 32,
                head_count: 2,
                ff_dim: 64,
                layer_count: 1,
            },
            pool_dim: 16,
            embed_dim: 16,
            class_count: 4,
        }
    }
}

impl SpeakerConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.pool_dim == 0 || self.embed_dim == 0 {
            return Err(Error::config("speaker pool/embed dims must be positive"));
        }
        if self.class_count < 2 {
            return Err(Error::config("speaker pretraining needs at least 2 classes"));
        }
        Ok(())
    }
}

/// The embedder's parameter handles.
pub struct SpeakerModel {
    pub cfg: SpeakerConfig,
    in_proj: Linear,
    blocks: Vec<EncoderBlock>,
    final_norm: Norm,
    pool_hidden: Linear,
    pool_score: Linear,
    out_proj: Linear,
    head: Linear,
}

pub const SPEAKER_ENC: &str = "speaker.enc";
pub const SPEAKER_HEAD: &str = "speaker.head";

impl SpeakerModel {
    pub fn define(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: SpeakerConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.block.model_dim;
        let in_proj = Linear::define(store, rng, SPEAKER_ENC, "in_proj", FEATURE_DIM, d);
        let blocks = (0..cfg.block.layer_count)
            .map(|i| EncoderBlock::define(store, rng, SPEAKER_ENC, &format!("blk{i}"), &cfg.block))
            .collect();
        let final_norm = Norm::define(store, SPEAKER_ENC, "final_norm", d);
        let pool_hidden = Linear::define(store, rng, SPEAKER_ENC, "pool.hidden", d, cfg.pool_dim);
        let pool_score = Linear::define(store, rng, SPEAKER_ENC, "pool.score", cfg.pool_dim, 1);
        let out_proj = Linear::define(store, rng, SPEAKER_ENC, "out_proj", d, cfg.embed_dim);
        let head = Linear::define(store, rng, SPEAKER_HEAD, "classify", cfg.embed_dim, cfg.class_count);
        Ok(SpeakerModel {
            cfg,
            in_proj,
            blocks,
            final_norm,
            pool_hidden,
            pool_score,
            out_proj,
            head,
        })
    }

    /// Attention-weighted mean over the rows of `h`: additive scorer, then a
    /// softmax over time. Returns `(pooled [1, d], weights [1, T])`.
    pub fn attentive_pool(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<(Var, Var)> {
        let hidden = self.pool_hidden.apply(tape, bound, h)?;
        let act = tape.tanh(hidden);
        let scores = self.pool_score.apply(tape, bound, act)?;
        let row = tape.transpose(scores)?;
        let weights = tape.softmax(row);
        let pooled = tape.matmul(weights, h)?;
        Ok((pooled, weights))
    }

    /// Embeds `[T, F]` features into a `[1, embed_dim]` speaker vector,
    /// also exposing the pooling weights.
    pub fn embed_detail(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::contract("speaker embedder needs at least one frame"));
        }
        let t = shape[0];
        let d = self.cfg.block.model_dim;
        let mut h = self.in_proj.apply(tape, bound, features)?;
        let pe = tape.constant(positional_encoding(t, d)?);
        h = tape.add(h, pe)?;
        for blk in &self.blocks {
            h = blk.apply(tape, bound, h, None)?;
        }
        let h = self.final_norm.apply(tape, bound, h)?;
        let (pooled, weights) = self.attentive_pool(tape, bound, h)?;
        let emb = self.out_proj.apply(tape, bound, pooled)?;
        Ok((emb, weights))
    }

    pub fn embed(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        Ok(self.embed_detail(tape, bound, features)?.0)
    }

    /// Class logits for pretraining: `[1, class_count]`.
    pub fn classify_logits(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let emb = self.embed(tape, bound, features)?;
        self.head.apply(tape, bound, emb)
    }
}

/// One epoch of the speaker-classification learning curve.
#[derive(Clone, Copy, Debug)]
pub struct SpeakerEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Settings for [`pretrain_speaker`].
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    /// Derived from the experiment seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SpeakerPretrainConfig {
    fn default() -> Self {
        SpeakerPretrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 2e-3,
            patience: 10,
            seed: 0,
        }
    }
}

fn classification_loss(
    model: &SpeakerModel,
    tape: &mut Tape,
    bound: &Bound,
    features: &Array2<f64>,
    speaker: usize,
) -> Result<Var> {
    let x = tape.constant(features.clone().into_dyn());
    let logits = model.classify_logits(tape, bound, x)?;
    tape.cross_entropy_mean(logits, &[speaker])
}

/// Trains the embedder as a speaker classifier on the paired split, early
/// stops on validation loss, restores the best weights, and freezes both
/// speaker partitions. Returns the learning curve.
pub fn pretrain_speaker(
    store: &mut ParamStore,
    model: &SpeakerModel,
    corpus: &CorpusSplit,
    cfg: &SpeakerPretrainConfig,
) -> Result<Vec<SpeakerEpoch>> {
    if corpus.speakers.len() < 2 {
        return Err(Error::contract("speaker pretraining needs at least 2 speakers"));
    }
    if corpus.speakers.len() > model.cfg.class_count {
        return Err(Error::contract(format!(
            "classification head supports {} classes but corpus has {} speakers",
            model.cfg.class_count,
            corpus.speakers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7370_6561_6b65_72);
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.learning_rate, store);
    let mut curve = Vec::new();
    let mut best: Option<(f64, Vec<(String, String, ndarray::ArrayD<f64>)>)> = None;
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
                let bound = store.bind(&mut tape, &["speaker."]);
                let loss = classification_loss(model, &mut tape, &bound, &u.features, u.speaker)?;
                train_loss_sum += tape.scalar(loss);
                let mut grads = tape.backward(loss)?;
                accum.absorb(&bound, &mut grads);
            }
            accum.mean();
            opt.step(store, &accum);
        }
        let train_loss = train_loss_sum / corpus.paired.len() as f64;

        let (val_loss, val_accuracy) = evaluate_speaker(store, model, corpus)?;
        curve.push(SpeakerEpoch {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });

        let improved = best.as_ref().map_or(true, |(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, store.snapshot(&["speaker."])));
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
    store.set_frozen_prefix("speaker.", true);
    Ok(curve)
}

/// Mean validation cross-entropy and top-1 accuracy under frozen-style
/// (constant) bindings.
pub fn evaluate_speaker(
    store: &ParamStore,
    model: &SpeakerModel,
    corpus: &CorpusSplit,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for u in &corpus.validation {
        let mut tape = Tape::new();
        let bound = store.bind_const(&mut tape, &["speaker."]);
        let x = tape.constant(u.features.clone().into_dyn());
        let logits = model.classify_logits(&mut tape, &bound, x)?;
        let loss = tape.cross_entropy_mean(logits, &[u.speaker])?;
        loss_sum += tape.scalar(loss);
        let row = tape.value(logits);
        let argmax = (0..row.shape()[1])
            .max_by(|&a, &b| row[[0, a]].partial_cmp(&row[[0, b]]).unwrap())
            .unwrap();
        if argmax == u.speaker {
            correct += 1;
        }
    }
    let n = corpus.validation.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}
