//! The five pipeline commands (plus synthetic data generation) bound to a
//! [`RunConfig`]. Each returns a summary for the caller to print and writes
//! its files to the configured paths.

mod bench;
mod config;
mod predictions;


use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::{info, warn};
use serde::Serialize;
use thiserror::Error;

pub use bench::{run_bench, timed_pass, BenchReport, Hardware, Sample, StageTimes, Stat};
pub use config::{apply_override, BenchConfig, Paths, PredictConfig, RunConfig, CONFIG_ENV};
pub use predictions::{
    event_edges, read_predictions, window_events, write_predictions, DocumentPrediction, EventEdge,
    TokenEdge, WindowPrediction,
};

use crate::checkpoint::{self, CheckpointError, CheckpointMeta};
use crate::corpus::{
    generate_synthetic, load_corpus, load_raw, store_corpus, CorpusError, Document, RawInput,
    SyntheticConfig,
};
use crate::decode_eval::{
    decode, evaluate, gold_pairs, predicted_pairs, DecodeError, EvalReport, PairLabels,
    TemporalGraph,
};
use crate::exec::{self, Execution};
use crate::format::FormatError;
use crate::model::{EmbeddingMode, ExternalVectors, Model, ModelError, Vocab};
use crate::objective::{write_loss_curve, EpochSummary, ObjectiveError, Trainer};
use crate::preprocess::{
    corpus_windows, load_windows, raw_windows, store_windows, PreprocessError, RawWindow,
    WindowInstance,
};
use crate::schema::{DatasetProfile, SchemaError};
use crate::tensor::Scalar;
use config::required;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("config: `{0}` must be set for this command")]
    MissingPath(&'static str),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("predictions do not match the gold corpus: {0}")]
    Alignment(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn format_is_io(e: &FormatError) -> bool {
    matches!(e, FormatError::Io { .. })
}

impl PipelineError {
    /// Process exit status: 1 usage or configuration, 2 invalid data,
    /// 3 runtime failure.
    pub fn exit_code(&self) -> i32 {
        use PipelineError::*;
        match self {
            Config(_) | MissingPath(_) | Schema(_) => 1,
            Checkpoint(CheckpointError::Profile(_)) => 1,
            Checkpoint(CheckpointError::Io { .. }) => 3,
            Checkpoint(_) => 2,
            Model(ModelError::Config(_)) | Objective(ObjectiveError::Config(_)) => 1,
            Model(ModelError::Vectors(_)) | Objective(ObjectiveError::NoTrainingData) => 2,
            Format(e) | Corpus(CorpusError::Format(e)) if format_is_io(e) => 3,
            Preprocess(PreprocessError::Format(e)) if format_is_io(e) => 3,
            Corpus(_) | Preprocess(_) | Format(_) | Alignment(_) => 2,
            Model(_) | Objective(_) | Decode(_) | Io { .. } => 3,
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(io_error(path))
}

/// What `preprocess` produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreprocessSummary {
    pub documents: usize,
    pub windows: usize,
    pub dropped_tlinks: usize,
    pub skipped_windows: usize,
    /// Gold token-pair counts per relation over the upper triangle.
    pub label_histogram: BTreeMap<String, usize>,
}

/// Windows the corpus and writes them (and the summary, if configured).
pub fn cmd_preprocess(config: &RunConfig) -> Result<PreprocessSummary, PipelineError> {
    let profile = config.dataset_profile()?;
    let corpus = required(&config.paths.corpus, "paths.corpus")?;
    let out = required(&config.paths.windows, "paths.windows")?;
    let docs = load_corpus(corpus)?;
    let cw = corpus_windows(&docs, &profile, &config.preprocess)?;
    store_windows(out, &cw.windows, &profile)?;
    let summary = PreprocessSummary {
        documents: docs.len(),
        windows: cw.windows.len(),
        dropped_tlinks: cw.dropped_tlinks,
        skipped_windows: cw.skipped_windows,
        label_histogram: cw
            .label_histogram(&profile)
            .into_iter()
            .map(|(r, c)| (r.name().to_string(), c))
            .collect(),
    };
    if let Some(path) = &config.paths.summary {
        write_json(path, &summary)?;
    }
    Ok(summary)
}

/// Vocabulary of the training windows, in first-seen order.
pub fn build_vocab(windows: &[WindowInstance]) -> Vocab {
    Vocab::build(windows.iter().flat_map(|w| w.tokens.iter().map(String::as_str)))
}

/// Fresh model for `windows` as configured, loading external vectors if the
/// embedding mode asks for them.
pub fn init_model(config: &RunConfig, windows: &[WindowInstance]) -> Result<Model<f32>, PipelineError> {
    let profile = config.dataset_profile()?;
    let external = match &config.model.embedding {
        EmbeddingMode::External { path } => Some(ExternalVectors::load(path)?),
        EmbeddingMode::Lookup => None,
    };
    Ok(Model::new(
        config.model.clone(),
        profile,
        build_vocab(windows),
        external,
        config.train.seed,
    )?)
}

fn score_windows<F: Scalar>(
    model: &Model<F>,
    tokens: &[&[String]],
    execution: Execution,
) -> Result<Vec<TemporalGraph>, ModelError> {
    execution.try_map(tokens, |t| {
        if t.is_empty() {
            return Ok(TemporalGraph::new(0));
        }
        model.score(t).map(|s| decode(&s))
    })
}

/// Decodes every window and scores the event-level result against `gold`.
pub fn evaluate_windows<F: Scalar>(
    model: &Model<F>,
    windows: &[WindowInstance],
    gold: &PairLabels,
    execution: Execution,
) -> Result<EvalReport, PipelineError> {
    let tokens: Vec<&[String]> = windows.iter().map(|w| w.tokens.as_slice()).collect();
    let graphs = score_windows(model, &tokens, execution)?;
    let pred = predicted_pairs(
        windows
            .iter()
            .zip(&graphs)
            .map(|(w, g)| (w.doc_id.as_str(), g, &w.event_first_tokens)),
        model.profile(),
    )?;
    Ok(evaluate(&pred, gold, model.profile())?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub mean_arc: f64,
    pub mean_rel: f64,
    pub mean_joint: f64,
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub windows: usize,
    pub vocab: usize,
    pub steps: u64,
    pub epochs: Vec<EpochReport>,
    /// Zero-based epoch with the best dev F1, when a dev corpus is set.
    pub best_epoch: Option<usize>,
    pub best_dev_f1: Option<f64>,
}

/// Trains on the window file for the configured epochs, keeping the best
/// dev epoch when a dev corpus is given, and writes the checkpoints and loss
/// curve.
pub fn cmd_train(config: &RunConfig) -> Result<TrainReport, PipelineError> {
    let profile = config.dataset_profile()?;
    let windows_path = required(&config.paths.windows, "paths.windows")?;
    let final_path = required(&config.paths.checkpoint, "paths.checkpoint")?;
    let windows = load_windows(windows_path, &profile)?;
    let dev = match &config.paths.dev_corpus {
        Some(path) => {
            let docs = load_corpus(path)?;
            let gold = gold_pairs(&docs, &profile)?;
            let cw = corpus_windows(&docs, &profile, &config.preprocess)?;
            Some((cw.windows, gold))
        }
        None => None,
    };

    let model = init_model(config, &windows)?;
    let vocab = model.vocab().len();
    let mut trainer = Trainer::new(model, config.optimizer.clone(), config.train.clone())?;
    let epochs = config.train.epochs_for(&profile);
    let mut reports = Vec::with_capacity(epochs);
    let mut best: Option<(usize, f64)> = None;
    for _ in 0..epochs {
        let EpochSummary {
            epoch,
            steps,
            mean_arc,
            mean_rel,
            mean_joint,
        } = trainer.run_epoch(&windows)?;
        let dev_f1 = match &dev {
            Some((dev_windows, gold)) => Some(
                evaluate_windows(trainer.model(), dev_windows, gold, Execution::Parallel)?
                    .micro
                    .f1,
            ),
            None => None,
        };
        info!(
            "epoch {}: {} steps, arc {:.5}, rel {:.5}, joint {:.5}{}",
            epoch + 1,
            steps,
            mean_arc,
            mean_rel,
            mean_joint,
            dev_f1.map_or(String::new(), |f| format!(", dev F1 {f:.4}"))
        );
        if let Some(f1) = dev_f1 {
            if best.map_or(true, |(_, b)| f1 > b) {
                best = Some((epoch, f1));
                if let Some(path) = &config.paths.best_checkpoint {
                    let meta = CheckpointMeta {
                        seed: config.train.seed,
                        epochs: epoch + 1,
                        steps: trainer.optimizer().step_count(),
                        dev_f1: Some(f1),
                    };
                    checkpoint::save(path, trainer.model(), &meta)?;
                }
            }
        }
        reports.push(EpochReport {
            epoch,
            steps,
            mean_arc,
            mean_rel,
            mean_joint,
            dev_f1,
        });
    }
    let meta = CheckpointMeta {
        seed: config.train.seed,
        epochs,
        steps: trainer.optimizer().step_count(),
        dev_f1: reports.last().and_then(|r| r.dev_f1),
    };
    checkpoint::save(final_path, trainer.model(), &meta)?;
    if let Some(path) = &config.paths.loss_curve {
        write_loss_curve(path, trainer.curve())?;
    }
    Ok(TrainReport {
        windows: windows.len(),
        vocab,
        steps: trainer.optimizer().step_count(),
        epochs: reports,
        best_epoch: best.map(|b| b.0),
        best_dev_f1: best.map(|b| b.1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictSummary {
    pub documents: usize,
    pub windows: usize,
    pub skipped_windows: usize,
    pub token_edges: usize,
    pub event_pairs: Option<usize>,
}

/// Predicts token graphs for every window of the input, plus event-pair
/// relations when `predict.events` is set, written in input order.
pub fn cmd_predict(config: &RunConfig) -> Result<PredictSummary, PipelineError> {
    let profile = config.dataset_profile()?;
    let ckpt = required(&config.paths.checkpoint, "paths.checkpoint")?;
    let input = required(&config.paths.input, "paths.input")?;
    let out = required(&config.paths.predictions, "paths.predictions")?;
    let (model, _) = checkpoint::load_for(ckpt, &profile)?;
    let (raw, docs): (Vec<RawInput>, Option<Vec<Document>>) = if config.predict.events {
        let docs = load_corpus(input)?;
        (docs.iter().map(RawInput::from).collect(), Some(docs))
    } else {
        (load_raw(input)?, None)
    };
    let records = predict_documents(&model, &raw, docs.as_deref(), config)?;
    write_predictions(out, &records)?;
    Ok(PredictSummary {
        documents: records.len(),
        windows: records.iter().map(|r| r.windows.len()).sum(),
        skipped_windows: records.iter().map(|r| r.skipped_windows.len()).sum(),
        token_edges: records
            .iter()
            .flat_map(|r| &r.windows)
            .map(|w| w.edges.len())
            .sum(),
        event_pairs: docs
            .as_ref()
            .map(|_| records.iter().filter_map(|r| r.event_pairs.as_ref()).map(Vec::len).sum()),
    })
}

/// Prediction records for `raw` (one per document, same order). With
/// `docs`, event-pair relations are projected from each document's events.
pub fn predict_documents<F: Scalar>(
    model: &Model<F>,
    raw: &[RawInput],
    docs: Option<&[Document]>,
    config: &RunConfig,
) -> Result<Vec<DocumentPrediction>, PipelineError> {
    let profile = model.profile();
    let max_len = config.preprocess.max_len;
    let per_doc: Vec<(Vec<RawWindow>, Vec<usize>)> =
        raw.iter().map(|d| raw_windows(d, max_len)).collect();
    for (d, (_, skipped)) in raw.iter().zip(&per_doc) {
        if !skipped.is_empty() {
            warn!(
                "document `{}`: window(s) {:?} exceed {} tokens and were skipped",
                d.doc_id, skipped, max_len
            );
        }
    }
    let flat: Vec<&RawWindow> = per_doc.iter().flat_map(|(w, _)| w).collect();
    let tokens: Vec<&[String]> = flat.iter().map(|w| w.tokens.as_slice()).collect();
    let execution = config.predict.execution;
    let graphs = exec::with_workers(config.predict.workers, || {
        score_windows(model, &tokens, execution)
    })?;

    let mut graphs = graphs.into_iter();
    let mut out = Vec::with_capacity(raw.len());
    for (k, (d, (windows, skipped))) in raw.iter().zip(per_doc).enumerate() {
        let mut preds = Vec::with_capacity(windows.len());
        let mut decoded = Vec::with_capacity(windows.len());
        for w in &windows {
            let g = graphs.next().expect("one graph per window");
            let sentences: BTreeSet<usize> = w.token_origin.iter().map(|o| o.0).collect();
            preds.push(WindowPrediction::from_graph(
                w.index,
                sentences.into_iter().collect(),
                &g,
                profile,
            )?);
            decoded.push(g);
        }
        let event_pairs = match docs {
            Some(docs) => {
                let doc = &docs[k];
                let events: Vec<BTreeMap<String, usize>> = preds
                    .iter()
                    .map(|p| window_events(doc, &p.sentences).map_err(PipelineError::Alignment))
                    .collect::<Result<_, _>>()?;
                let pairs = predicted_pairs(
                    decoded
                        .iter()
                        .zip(&events)
                        .map(|(g, e)| (d.doc_id.as_str(), g, e)),
                    profile,
                )?;
                Some(event_edges(&pairs, profile)?)
            }
            None => None,
        };
        out.push(DocumentPrediction {
            doc_id: d.doc_id.clone(),
            windows: preds,
            skipped_windows: skipped,
            event_pairs,
        });
    }
    Ok(out)
}

/// Event-level predictions of a predictions file, checked against the gold
/// corpus document by document. Records carrying event pairs are used as
/// they are; otherwise pairs are read off the token edges through the gold
/// event spans.
pub fn prediction_pairs(
    records: &[DocumentPrediction],
    gold: &[Document],
    profile: &DatasetProfile,
) -> Result<PairLabels, PipelineError> {
    let by_id: BTreeMap<&str, &Document> = gold.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut seen = BTreeSet::new();
    for r in records {
        if !by_id.contains_key(r.doc_id.as_str()) {
            return Err(PipelineError::Alignment(format!(
                "document `{}` is not in the gold corpus",
                r.doc_id
            )));
        }
        if !seen.insert(r.doc_id.as_str()) {
            return Err(PipelineError::Alignment(format!(
                "document `{}` predicted twice",
                r.doc_id
            )));
        }
    }
    if let Some(missing) = gold.iter().find(|d| !seen.contains(d.doc_id.as_str())) {
        return Err(PipelineError::Alignment(format!(
            "gold document `{}` has no predictions",
            missing.doc_id
        )));
    }

    let mut pairs = PairLabels::new();
    for r in records {
        let doc = by_id[r.doc_id.as_str()];
        let align = |m: String| PipelineError::Alignment(format!("document `{}`: {m}", r.doc_id));
        if let Some(edges) = &r.event_pairs {
            for e in edges {
                for id in [&e.src, &e.dst] {
                    if doc.event(id).is_none() {
                        return Err(align(format!("unknown event `{id}`")));
                    }
                }
                let label = profile.id_of(e.label)?;
                pairs.insert(&r.doc_id, &e.src, &e.dst, label, profile)?;
            }
            continue;
        }
        for w in &r.windows {
            let events = window_events(doc, &w.sentences).map_err(align)?;
            let len: usize = w.sentences.iter().map(|&s| doc.sentences[s].len()).sum();
            if len != w.tokens {
                return Err(align(format!(
                    "window {} has {} tokens, the gold sentences have {len}",
                    w.index, w.tokens
                )));
            }
            let graph = w.to_graph(profile).map_err(align)?;
            let window = std::iter::once((r.doc_id.as_str(), &graph, &events));
            for (key, label) in predicted_pairs(window, profile)?.iter() {
                pairs.insert(&key.0, &key.1, &key.2, label, profile)?;
            }
        }
    }
    Ok(pairs)
}

/// Scores the predictions file against the gold corpus and writes the TSV
/// report if configured.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalReport, PipelineError> {
    let profile = config.dataset_profile()?;
    let pred_path = required(&config.paths.predictions, "paths.predictions")?;
    let gold_path = required(&config.paths.gold, "paths.gold")?;
    let gold_docs = load_corpus(gold_path)?;
    let records = read_predictions(pred_path)?;
    let pred = prediction_pairs(&records, &gold_docs, &profile)?;
    let gold = gold_pairs(&gold_docs, &profile)?;
    let report = evaluate(&pred, &gold, &profile)?;
    if let Some(path) = &config.paths.report {
        std::fs::write(path, report.to_tsv()).map_err(io_error(path))?;
    }
    Ok(report)
}

/// Times end-to-end inference over the input documents.
pub fn cmd_bench(config: &RunConfig) -> Result<BenchReport, PipelineError> {
    let profile = config.dataset_profile()?;
    let ckpt = required(&config.paths.checkpoint, "paths.checkpoint")?;
    let input = required(&config.paths.input, "paths.input")?;
    let (model, _) = checkpoint::load_for(ckpt, &profile)?;
    let raw = load_raw(input)?;
    let b = &config.bench;
    let report = run_bench(
        &model,
        &raw,
        config.preprocess.max_len,
        b.execution,
        b.workers,
        b.warmup,
        b.repetitions,
    )?;
    if let Some(path) = &config.paths.bench_report {
        write_json(path, &report)?;
    }
    Ok(report)
}

/// Settings for a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub documents: usize,
    pub seed: u64,
    /// Drop events and TLINKs, leaving prediction input.
    pub raw: bool,
}

/// Writes a synthetic corpus for the configured profile.
pub fn cmd_generate(
    config: &RunConfig,
    options: &GenerateOptions,
    out: &Path,
) -> Result<usize, PipelineError> {
    let profile = config.dataset_profile()?;
    let mut docs = generate_synthetic(&SyntheticConfig::new(options.seed, options.documents, profile));
    if options.raw {
        for d in &mut docs {
            d.events.clear();
            d.tlinks.clear();
        }
    }
    store_corpus(out, &docs)?;
    Ok(docs.len())
}
