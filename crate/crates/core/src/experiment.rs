//! The experiment driver: every CLI command's actual work.
//!
//! All artifacts of one experiment live under `out_dir/name/`:
//!
//! ```text
//! corpus/              manifest + feature files
//! checkpoints/         speaker-pretrain / tts-pretrain / asr-pretrain /
//!                      joint-<variant>.ckpt
//! logs/                per-stage CSV learning curves,
//!                      perplexity-<variant>.csv
//! eval/                <checkpoint>-<split>.json reports
//! figures/             perplexity.svg + perplexity.csv
//! ```
//!
//! Commands are deterministic under a fixed config: the experiment seed
//! drives corpus generation, model initialization, and every training stage.
//! An advisory lock file guards the directory against concurrent commands.

use crate::asr::{pretrain_asr, AsrModel};
use crate::autodiff::Tape;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::config::{variant_name, ExperimentConfig};
use crate::corpus::{core_tokens, load_corpus, make_splits, save_corpus, CorpusSplit, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{
    human_perplexity, levenshtein, mcd, synthesized_perplexity, MetricsReport, PerplexityCurve,
    PerplexityPoint,
};
use crate::params::ParamStore;
use crate::speaker::{pretrain_speaker, SpeakerModel};
use crate::train::{run_joint, JointPhase};
use crate::tts::{pretrain_tts, SynthesisMode, TtsModel};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Decorrelates model initialization from the corpus and training streams.
const MODEL_INIT_SALT: u64 = 0x6d6f_6465_6c73;

/// The three model definitions of one experiment, always created in the same
/// order so parameter identities line up across commands.
pub struct Models {
    pub speaker: SpeakerModel,
    pub tts: TtsModel,
    pub asr: AsrModel,
}

/// Defines speaker embedder, synthesizer, and recognizer in `store`,
/// initialized from the experiment seed.
pub fn define_models(cfg: &ExperimentConfig, store: &mut ParamStore) -> Result<Models> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.experiment.seed ^ MODEL_INIT_SALT);
    let speaker = SpeakerModel::define(store, &mut rng, cfg.speaker_config())?;
    let tts = TtsModel::define(store, &mut rng, cfg.tts_config())?;
    let asr = AsrModel::define(store, &mut rng, cfg.asr_config())?;
    Ok(Models { speaker, tts, asr })
}

/// Advisory lock on an experiment directory. Concurrent commands on one
/// directory are unsupported; the lock makes the collision loud instead of
/// corrupting artifacts. Dropped (or crashed) processes leave the file
/// behind only on hard kills, in which case the error message says what to
/// remove.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::contract(format!(
                "another command holds {}; if no other process is running, delete the file",
                path.display()
            ))),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        std::fs::remove_file(&self.path).ok();
    }
}

fn corpus_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.dir().join("corpus")
}

fn checkpoint_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.dir().join("checkpoints")
}

fn log_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.dir().join("logs")
}

/// Path of a pretraining checkpoint ("speaker", "tts", or "asr").
pub fn pretrain_checkpoint_path(cfg: &ExperimentConfig, stage: &str) -> PathBuf {
    checkpoint_dir(cfg).join(format!("{stage}-pretrain.ckpt"))
}

/// Path of a joint-training checkpoint for an ablation variant.
pub fn joint_checkpoint_path(cfg: &ExperimentConfig, variant: &str) -> PathBuf {
    checkpoint_dir(cfg).join(format!("joint-{variant}.ckpt"))
}

/// Path of the per-epoch perplexity series for an ablation variant.
pub fn perplexity_csv_path(cfg: &ExperimentConfig, variant: &str) -> PathBuf {
    log_dir(cfg).join(format!("perplexity-{variant}.csv"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Generates and saves the corpus. Refuses to overwrite an existing corpus
/// unless `force` is set; generation is deterministic, so two forced runs
/// with one seed produce identical files.
pub fn gen_corpus(cfg: &ExperimentConfig, force: bool) -> Result<PathBuf> {
    let dir = corpus_dir(cfg);
    if dir.join("manifest.json").exists() && !force {
        return Err(Error::config(format!(
            "{} already holds a corpus; pass --force to regenerate",
            dir.display()
        )));
    }
    let corpus = make_splits(&cfg.corpus, cfg.experiment.seed)?;
    save_corpus(&dir, &corpus)?;
    Ok(dir)
}

/// Loads this experiment's corpus, failing with a startup error when it has
/// not been generated yet.
pub fn load_experiment_corpus(cfg: &ExperimentConfig) -> Result<CorpusSplit> {
    let dir = corpus_dir(cfg);
    if !dir.join("manifest.json").exists() {
        return Err(Error::missing(format!(
            "no corpus at {}; run gen-corpus first",
            dir.display()
        )));
    }
    load_corpus(&dir)
}

fn meta_for(cfg: &ExperimentConfig, label: &str, epoch: Option<usize>) -> CheckpointMeta {
    CheckpointMeta {
        label: label.to_string(),
        config_hash: cfg.hash(),
        epoch,
        seed: Some(cfg.experiment.seed),
    }
}

/// Which model a `pretrain` command trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainTarget {
    Speaker,
    Tts,
    Asr,
}

impl PretrainTarget {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "speaker" => Ok(PretrainTarget::Speaker),
            "tts" => Ok(PretrainTarget::Tts),
            "asr" => Ok(PretrainTarget::Asr),
            other => Err(Error::config(format!(
                "unknown pretrain target {other:?} (expected speaker, tts, or asr)"
            ))),
        }
    }

    fn stage(self) -> &'static str {
        match self {
            PretrainTarget::Speaker => "speaker",
            PretrainTarget::Tts => "tts",
            PretrainTarget::Asr => "asr",
        }
    }
}

/// Runs one supervised pretraining stage, then writes its checkpoint and CSV
/// learning curve. Stages chain: the synthesizer restores the speaker
/// checkpoint (it conditions on reference embeddings) and the recognizer
/// restores the synthesizer checkpoint, so `asr-pretrain.ckpt` holds the
/// complete pretrained system. Run speaker → tts → asr.
pub fn pretrain(cfg: &ExperimentConfig, target: PretrainTarget) -> Result<PathBuf> {
    let _lock = DirLock::acquire(&cfg.dir())?;
    let corpus = load_experiment_corpus(cfg)?;
    let mut store = ParamStore::new();
    let models = define_models(cfg, &mut store)?;
    let stage = target.stage();
    if let Some(previous) = match target {
        PretrainTarget::Speaker => None,
        PretrainTarget::Tts => Some("speaker"),
        PretrainTarget::Asr => Some("tts"),
    } {
        let ckpt = load_checkpoint(&pretrain_checkpoint_path(cfg, previous)).map_err(|e| match e {
            Error::MissingArtifact(m) => {
                Error::missing(format!("{m}; run pretrain {previous} first"))
            }
            other => other,
        })?;
        warn_on_hash_mismatch(&ckpt, cfg);
        ckpt.restore_into(&mut store)?;
    }
    let (csv, best_epoch) = match target {
        PretrainTarget::Speaker => {
            let curve = pretrain_speaker(&mut store, &models.speaker, &corpus, &cfg.pretrain.speaker)?;
            let mut csv = String::from("epoch,train_loss,val_loss,val_accuracy\n");
            let mut best = (0usize, f64::INFINITY);
            for e in &curve {
                let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_accuracy);
                if e.val_loss < best.1 {
                    best = (e.epoch, e.val_loss);
                }
            }
            (csv, best.0)
        }
        PretrainTarget::Tts => {
            let curve = pretrain_tts(&mut store, &models.tts, &models.speaker, &corpus, &cfg.pretrain.tts)?;
            let mut csv = String::from("epoch,train_loss,val_loss\n");
            let mut best = (0usize, f64::INFINITY);
            for e in &curve {
                let _ = writeln!(csv, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
                if e.val_loss < best.1 {
                    best = (e.epoch, e.val_loss);
                }
            }
            (csv, best.0)
        }
        PretrainTarget::Asr => {
            let curve = pretrain_asr(&mut store, &models.asr, &corpus, &cfg.pretrain.asr)?;
            let mut csv = String::from("epoch,sampling_prob,train_loss,val_loss\n");
            let mut best = (0usize, f64::INFINITY);
            for e in &curve {
                let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.sampling_prob, e.train_loss, e.val_loss);
                if e.val_loss < best.1 {
                    best = (e.epoch, e.val_loss);
                }
            }
            (csv, best.0)
        }
    };
    write_text(&log_dir(cfg).join(format!("{stage}-pretrain.csv")), &csv)?;
    let path = pretrain_checkpoint_path(cfg, stage);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&path, &store, meta_for(cfg, &format!("{stage}-pretrain"), Some(best_epoch)))?;
    Ok(path)
}

fn warn_on_hash_mismatch(ckpt: &Checkpoint, cfg: &ExperimentConfig) {
    if let Some(warning) = ckpt.config_mismatch_warning(&cfg.hash()) {
        eprintln!("warning: {warning}");
    }
}

/// Corpus-level phoneme error rate of greedy transcripts over `items`:
/// total edit count over total reference length, as a percentage.
pub fn decode_per(store: &ParamStore, asr: &AsrModel, items: &[Utterance], max_len: usize) -> Result<f64> {
    let mut edits = 0usize;
    let mut tokens = 0usize;
    for u in items {
        let hyp = asr.greedy_decode(store, &u.features, max_len)?;
        let reference = core_tokens(&u.text);
        edits += levenshtein(reference, core_tokens(&hyp));
        tokens += reference.len();
    }
    if tokens == 0 {
        return Err(Error::contract("error rate needs non-empty references"));
    }
    Ok(edits as f64 / tokens as f64 * 100.0)
}

/// Everything `joint_train` leaves behind.
pub struct JointArtifacts {
    pub variant: &'static str,
    pub checkpoint: PathBuf,
    pub log_csv: PathBuf,
    pub perplexity_csv: PathBuf,
    /// Epochs that ran in each phase (phase A is zero when step-wise
    /// optimization is disabled).
    pub phase_a_epochs: usize,
    pub phase_b_epochs: usize,
    /// Validation PER of the final (best-restored) parameters.
    pub final_val_per: f64,
}

/// Runs joint training for one ablation variant on top of the three
/// pretraining checkpoints, tracking the synthesized-speech perplexity curve
/// under the frozen pretrained recognizer.
pub fn joint_train(cfg: &ExperimentConfig, use_sc: bool, use_stepwise: bool) -> Result<JointArtifacts> {
    let _lock = DirLock::acquire(&cfg.dir())?;
    let corpus = load_experiment_corpus(cfg)?;
    let mut store = ParamStore::new();
    let models = define_models(cfg, &mut store)?;
    // Pretraining stages chain, so the recognizer checkpoint carries the
    // complete pretrained system (speaker encoder, synthesizer, recognizer).
    let ckpt = load_checkpoint(&pretrain_checkpoint_path(cfg, "asr")).map_err(|e| match e {
        Error::MissingArtifact(m) => Error::missing(format!(
            "{m}; run pretrain speaker, pretrain tts, and pretrain asr first"
        )),
        other => other,
    })?;
    warn_on_hash_mismatch(&ckpt, cfg);
    ckpt.restore_into(&mut store)?;

    // The perplexity diagnostic scores synthesized speech with the
    // recognizer as it was BEFORE joint training ever saw synthetic input.
    let pretrained = store.clone();
    let human_baseline = human_perplexity(&pretrained, &models.asr, &corpus.validation)?;
    let mut points = vec![PerplexityPoint {
        phase: "pretrained".into(),
        epoch: 0,
        synthesized: synthesized_perplexity(
            &store,
            &models.tts,
            &models.speaker,
            &pretrained,
            &models.asr,
            &corpus.validation,
        )?,
    }];

    let mut train_cfg = cfg.joint;
    train_cfg.use_speaker_consistency = use_sc;
    train_cfg.use_stepwise = use_stepwise;
    let variant = variant_name(use_sc, use_stepwise);

    let outcome = {
        let tts = &models.tts;
        let speaker = &models.speaker;
        let asr = &models.asr;
        let validation = &corpus.validation;
        let pretrained = &pretrained;
        let points = &mut points;
        let mut hook = move |phase: JointPhase, epoch: usize, live: &ParamStore| -> Result<()> {
            points.push(PerplexityPoint {
                phase: phase.label().into(),
                epoch,
                synthesized: synthesized_perplexity(live, tts, speaker, pretrained, asr, validation)?,
            });
            Ok(())
        };
        run_joint(&mut store, tts, asr, speaker, &corpus, &train_cfg, Some(&mut hook))?
    };

    // Training log: one row per epoch, perplexity column joined from the
    // curve (the hook fires exactly once per epoch, in order).
    let epochs = outcome.all_epochs();
    let mut csv = String::from(
        "phase,epoch,train_paired_ce,train_tts_loss,train_cycle,train_sc,val_cycle,val_sc,val_objective,val_synth_perplexity\n",
    );
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (e, p) in epochs.iter().zip(points.iter().skip(1)) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            e.phase.label(),
            e.epoch,
            fmt_opt(e.train_paired_ce),
            fmt_opt(e.train_tts_loss),
            fmt_opt(e.train_cycle),
            fmt_opt(e.train_sc),
            e.val_cycle,
            e.val_sc,
            e.val_objective,
            p.synthesized,
        );
    }
    let log_csv = log_dir(cfg).join(format!("joint-{variant}.csv"));
    write_text(&log_csv, &csv)?;

    let curve = PerplexityCurve {
        points,
        human_baseline,
    };
    let perplexity_csv = perplexity_csv_path(cfg, variant);
    write_text(&perplexity_csv, &curve.to_csv())?;

    let checkpoint = joint_checkpoint_path(cfg, variant);
    if let Some(parent) = checkpoint.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(
        &checkpoint,
        &store,
        meta_for(cfg, &format!("joint-{variant}"), Some(epochs.len())),
    )?;

    let final_val_per = decode_per(&store, &models.asr, &corpus.validation, cfg.model.max_decode_len)?;
    Ok(JointArtifacts {
        variant,
        checkpoint,
        log_csv,
        perplexity_csv,
        phase_a_epochs: outcome.phase_a.as_ref().map_or(0, |r| r.epochs.len()),
        phase_b_epochs: outcome.phase_b.epochs.len(),
        final_val_per,
    })
}

/// A full evaluation of one checkpoint on one split: recognition scores plus
/// synthesis scores under both reference conditions.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitEvaluation {
    pub split: String,
    pub checkpoint_label: String,
    /// Synthesis references drawn from held-out utterances of the same
    /// speaker as each evaluated item.
    pub same_speaker: MetricsReport,
    /// Synthesis references drawn from held-out utterances of a different
    /// speaker.
    pub cross_speaker: MetricsReport,
}

fn resynthesize(
    store: &ParamStore,
    models: &Models,
    item: &Utterance,
    reference: &Utterance,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let bound = store.bind_const(&mut tape, &["tts.", "speaker."]);
    let r = tape.constant(reference.features.clone().into_dyn());
    let s = models.speaker.embed(&mut tape, &bound, r)?;
    let synth = models.tts.synthesize(
        &mut tape,
        &bound,
        &item.text,
        s,
        SynthesisMode::Teacher {
            pitch: &item.prosody.pitch,
            energy: &item.prosody.energy,
            duration: &item.prosody.duration,
        },
    )?;
    Ok(tape
        .value(synth.post_output)
        .clone()
        .into_dimensionality()
        .expect("synthesis output is a frame matrix"))
}

/// Evaluates the checkpoint at `path` on a named split ("validation" or
/// "test"). Recognition is greedy decoding; synthesis quality is measured on
/// teacher-mode resynthesis against ground truth, with speaker references
/// drawn from the other held-out split.
pub fn evaluate(cfg: &ExperimentConfig, path: &Path, split: &str) -> Result<SplitEvaluation> {
    let _lock = DirLock::acquire(&cfg.dir())?;
    let corpus = load_experiment_corpus(cfg)?;
    let (items, reference_pool) = match split {
        "validation" => (&corpus.validation, &corpus.test),
        "test" => (&corpus.test, &corpus.validation),
        other => {
            return Err(Error::missing(format!(
                "split {other:?} not found (expected \"validation\" or \"test\")"
            )))
        }
    };
    let mut store = ParamStore::new();
    let models = define_models(cfg, &mut store)?;
    let ckpt = load_checkpoint(path)?;
    warn_on_hash_mismatch(&ckpt, cfg);
    ckpt.restore_into(&mut store)?;

    let per_percent = decode_per(&store, &models.asr, items, cfg.model.max_decode_len)?;
    let perplexity = human_perplexity(&store, &models.asr, items)?;

    let pick = |item: &Utterance, same: bool| -> Result<&Utterance> {
        reference_pool
            .iter()
            .find(|r| (r.speaker == item.speaker) == same)
            .ok_or_else(|| {
                Error::contract(format!(
                    "no held-out reference with {} speaker {}",
                    if same { "the same" } else { "a different" },
                    item.speaker
                ))
            })
    };
    let mut scores = [(0.0f64, 0.0f64), (0.0f64, 0.0f64)]; // (mcd, f0) × {same, cross}
    for item in items {
        for (slot, same) in [(0usize, true), (1usize, false)] {
            let reference = pick(item, same)?;
            let rendered = resynthesize(&store, &models, item, reference)?;
            scores[slot].0 += mcd(&item.features, &rendered)?;
            scores[slot].1 += crate::metrics::f0_rmse(&item.features, &rendered)?;
        }
    }
    let n = items.len() as f64;
    let report = |(mcd_sum, f0_sum): (f64, f64)| MetricsReport {
        per_percent,
        mcd_db: mcd_sum / n,
        f0_rmse: f0_sum / n,
        perplexity,
        utterances: items.len(),
        config_hash: cfg.hash(),
    };
    let eval = SplitEvaluation {
        split: split.to_string(),
        checkpoint_label: ckpt.meta.label.clone(),
        same_speaker: report(scores[0]),
        cross_speaker: report(scores[1]),
    };

    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let out = cfg.dir().join("eval").join(format!("{stem}-{split}.json"));
    let json = serde_json::to_string_pretty(&eval).expect("report serializes");
    write_text(&out, &json)?;
    Ok(eval)
}

/// Table-style rendering of an evaluation, one row per reference condition.
pub fn format_report(eval: &SplitEvaluation) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>9} {:>10} {:>9}  reference",
        "method", "PER (%)", "MCD (dB)", "F0 RMSE"
    );
    for (label, r) in [
        ("same-speaker", &eval.same_speaker),
        ("cross-speaker", &eval.cross_speaker),
    ] {
        let _ = writeln!(
            out,
            "{:<24} {:>9.2} {:>10.3} {:>9.4}  {label}",
            eval.checkpoint_label, r.per_percent, r.mcd_db, r.f0_rmse
        );
    }
    out
}

/// One series read back from a perplexity CSV.
struct Series {
    variant: &'static str,
    points: Vec<PerplexityPoint>,
    human_baseline: f64,
}

fn read_perplexity_csv(cfg: &ExperimentConfig, variant: &'static str) -> Result<Option<Series>> {
    let path = perplexity_csv_path(cfg, variant);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::Io(e)),
    };
    let mut points = Vec::new();
    let mut baseline = None;
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue; // header
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(format!("{}: malformed row {i}", path.display())));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::format(format!("{}: bad number in row {i}", path.display())))
        };
        points.push(PerplexityPoint {
            phase: fields[1].to_string(),
            epoch: fields[2]
                .parse()
                .map_err(|_| Error::format(format!("{}: bad epoch in row {i}", path.display())))?,
            synthesized: parse(fields[3])?,
        });
        baseline = Some(parse(fields[4])?);
    }
    match baseline {
        Some(human_baseline) => Ok(Some(Series {
            variant,
            points,
            human_baseline,
        })),
        None => Ok(None),
    }
}

/// Reads back the perplexity curve a `joint_train` run of `variant` wrote,
/// or `None` when that variant has not been trained.
pub fn load_perplexity_curve(
    cfg: &ExperimentConfig,
    variant: &'static str,
) -> Result<Option<PerplexityCurve>> {
    Ok(read_perplexity_csv(cfg, variant)?.map(|s| PerplexityCurve {
        points: s.points,
        human_baseline: s.human_baseline,
    }))
}

/// What `plot_perplexity` produced.
pub struct PlotOutcome {
    pub svg: PathBuf,
    pub csv: PathBuf,
    /// Present when a series could not be found; the plot is partial.
    pub warnings: Vec<String>,
}

/// Index of the first point strictly below the baseline, if any.
pub fn first_crossing(points: &[PerplexityPoint], baseline: f64) -> Option<usize> {
    points.iter().position(|p| p.synthesized < baseline)
}

/// Emits the perplexity figure: synthesized-speech perplexity with and
/// without step-wise optimization, plus the constant real-speech baseline.
/// Preferring the richest available run for each arm, it degrades to a
/// partial plot (with warnings) when one arm was never trained.
pub fn plot_perplexity(cfg: &ExperimentConfig) -> Result<PlotOutcome> {
    let _lock = DirLock::acquire(&cfg.dir())?;
    let mut warnings = Vec::new();
    let mut pick_series = |candidates: [&'static str; 2], arm: &str| -> Result<Option<Series>> {
        for v in candidates {
            if let Some(s) = read_perplexity_csv(cfg, v)? {
                return Ok(Some(s));
            }
        }
        warnings.push(format!(
            "no {arm} series found (expected a perplexity CSV from joint-train variant {} or {})",
            candidates[0], candidates[1]
        ));
        Ok(None)
    };
    let with_sw = pick_series(["proposed", "no-sc"], "step-wise")?;
    let without_sw = pick_series(["no-stepwise", "conventional"], "non-step-wise")?;
    if with_sw.is_none() && without_sw.is_none() {
        return Err(Error::missing(
            "no perplexity series at all; run joint-train first".to_string(),
        ));
    }

    let baseline = with_sw
        .as_ref()
        .or(without_sw.as_ref())
        .map(|s| s.human_baseline)
        .unwrap();
    let max_len = with_sw
        .as_ref()
        .map_or(0, |s| s.points.len())
        .max(without_sw.as_ref().map_or(0, |s| s.points.len()));

    // Long-format CSV: every series row-by-row over the shared step axis.
    let mut csv = String::from("series,step,phase,epoch,perplexity\n");
    for s in [&with_sw, &without_sw].into_iter().flatten() {
        let label = series_label(s.variant);
        for (step, p) in s.points.iter().enumerate() {
            let _ = writeln!(csv, "{label},{step},{},{},{}", p.phase, p.epoch, p.synthesized);
        }
    }
    for step in 0..max_len {
        let _ = writeln!(csv, "human-baseline,{step},-,{step},{baseline}");
    }

    let svg = render_svg(&with_sw, &without_sw, baseline);
    let figures = cfg.dir().join("figures");
    let svg_path = figures.join("perplexity.svg");
    let csv_path = figures.join("perplexity.csv");
    write_text(&svg_path, &svg)?;
    write_text(&csv_path, &csv)?;
    Ok(PlotOutcome {
        svg: svg_path,
        csv: csv_path,
        warnings,
    })
}

fn series_label(variant: &str) -> &'static str {
    match variant {
        "proposed" | "no-sc" => "with-step-wise",
        _ => "without-step-wise",
    }
}

fn render_svg(with_sw: &Option<Series>, without_sw: &Option<Series>, baseline: f64) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const ML: f64 = 60.0; // margins
    const MR: f64 = 20.0;
    const MT: f64 = 36.0;
    const MB: f64 = 48.0;

    let series: Vec<(&str, &str, &[PerplexityPoint])> = [
        with_sw.as_ref().map(|s| ("with step-wise", "#d95f02", s.points.as_slice())),
        without_sw.as_ref().map(|s| ("without step-wise", "#1b6ca8", s.points.as_slice())),
    ]
    .into_iter()
    .flatten()
    .collect();

    let max_step = series.iter().map(|(_, _, p)| p.len()).max().unwrap_or(2).max(2) - 1;
    let mut y_min = baseline;
    let mut y_max = baseline;
    for (_, _, pts) in &series {
        for p in *pts {
            y_min = y_min.min(p.synthesized);
            y_max = y_max.max(p.synthesized);
        }
    }
    let pad = 0.08 * (y_max - y_min).max(1e-9);
    let (y_min, y_max) = (y_min - pad, y_max + pad);
    let x = |step: usize| ML + (W - ML - MR) * step as f64 / max_step as f64;
    let y = |v: f64| MT + (H - MT - MB) * (1.0 - (v - y_min) / (y_max - y_min));

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{tx}" y="20" text-anchor="middle" font-size="14">Perplexity of synthesized validation speech (frozen pretrained recognizer)</text>
"#,
        tx = W / 2.0
    );
    // Axes.
    let _ = writeln!(
        svg,
        r#"<line x1="{ML}" y1="{yb}" x2="{xr}" y2="{yb}" stroke="black"/><line x1="{ML}" y1="{MT}" x2="{ML}" y2="{yb}" stroke="black"/>"#,
        yb = H - MB,
        xr = W - MR
    );
    // Y ticks.
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x0}" y1="{yy}" x2="{ML}" y2="{yy}" stroke="black"/><text x="{xt}" y="{yt}" text-anchor="end">{v:.1}</text>"#,
            x0 = ML - 4.0,
            yy = y(v),
            xt = ML - 8.0,
            yt = y(v) + 4.0
        );
    }
    // X ticks: at most 10, integer steps.
    let tick_every = (max_step / 10).max(1);
    for step in (0..=max_step).step_by(tick_every) {
        let _ = writeln!(
            svg,
            r#"<line x1="{xx}" y1="{yb}" x2="{xx}" y2="{y1}" stroke="black"/><text x="{xx}" y="{yt}" text-anchor="middle">{step}</text>"#,
            xx = x(step),
            yb = H - MB,
            y1 = H - MB + 4.0,
            yt = H - MB + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{tx}" y="{ty}" text-anchor="middle">training epoch (0 = pretrained)</text>"#,
        tx = (ML + W - MR) / 2.0,
        ty = H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{ty}" transform="rotate(-90 16 {ty})" text-anchor="middle">mean perplexity</text>"#,
        ty = (MT + H - MB) / 2.0
    );
    // Baseline.
    let _ = writeln!(
        svg,
        r#"<line x1="{ML}" y1="{yy}" x2="{xr}" y2="{yy}" stroke="black" stroke-dasharray="6 4"/>"#,
        yy = y(baseline),
        xr = W - MR
    );
    // Series.
    for (_, color, pts) in &series {
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(step, p)| format!("{:.2},{:.2}", x(step), y(p.synthesized)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
    }
    // Legend.
    let mut ly = MT + 10.0;
    for (label, color, _) in &series {
        let _ = writeln!(
            svg,
            r#"<line x1="{x0}" y1="{ly}" x2="{x1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{xt}" y="{yt}">{label}</text>"#,
            x0 = W - MR - 190.0,
            x1 = W - MR - 160.0,
            xt = W - MR - 152.0,
            yt = ly + 4.0
        );
        ly += 18.0;
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{x0}" y1="{ly}" x2="{x1}" y2="{ly}" stroke="black" stroke-dasharray="6 4"/><text x="{xt}" y="{yt}">human speech</text>"#,
        x0 = W - MR - 190.0,
        x1 = W - MR - 160.0,
        xt = W - MR - 152.0,
        yt = ly + 4.0
    );
    svg.push_str("</svg>\n");
    svg
}
