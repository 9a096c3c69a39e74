//! Per-episode workflow and corpus benchmarks.
//!
//! One episode runs: frontend, segment plan, support labels, W0, support
//! fine-tuning, W1, optional negative selection (W2), optional adaptation of
//! the student classifier towards the teacher, then thresholding and scoring.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{adapt_student, AdaptiveConfig, StepLog};
use crate::audio::{load_wav, mel_pcen, resample, FrontendConfig, PcenGram};
use crate::embed::{
    embed_normalized, finetune_on_support, pretrain_embedder, EmbedderKind, EmbedderSpec,
    EmbeddingMatrix, LabeledWindows, TrainLog,
};
use crate::error::{Error, Result, Stage, StageExt};
use crate::eval::{
    discard_support_overlap, match_events, threshold_and_merge, write_predictions, Counts,
    EvalConfig, EvalReport, EventInterval, Scores,
};
use crate::proto::{
    build_prototypes, predict_probs, rebuild_classifier, select_negatives, ClassifierDump,
    ClassifierWeights, Provenance, SelectionResult,
};
use crate::synth::{derive_seed, CorpusManifest, Split};
use crate::task::{
    build_episode, frames_to_seconds, label_support_segments, make_grid, parse_annotations,
    plan_segments, AnnotationEvent, Episode, EpisodeManifest, GridRole, SegmentGrid, SegmentLabel,
    SegmentPlan,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Segments drawn uniformly from the query grid (baseline).
    RandomQuery,
    /// Support segments that touch no annotation.
    SupportBackground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            lr: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// 0 disables pretraining.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fixed training segment length, frames.
    pub seg_len: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            lr: 1e-4,
            batch_size: 64,
            seg_len: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub name: String,
    pub frontend: FrontendConfig,
    pub student: EmbedderSpec,
    pub teacher: EmbedderSpec,
    pub adaptive: AdaptiveConfig,
    pub eval: EvalConfig,
    pub negative_source: NegativeSource,
    pub use_nss: bool,
    pub use_al: bool,
    /// Apply negative selection to the teacher's prototypes as well.
    pub teacher_nss: bool,
    pub finetune: FinetuneConfig,
    pub pretrain: PretrainConfig,
    /// Lower bound `B` on the number of selected negatives.
    pub negative_floor: usize,
    /// Random query negatives per positive support segment in `random_query` mode.
    pub random_negatives_per_positive: usize,
    pub n_shots: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            name: "nss_al".into(),
            frontend: FrontendConfig::default(),
            student: EmbedderSpec::student_default(),
            teacher: EmbedderSpec::teacher_default(),
            adaptive: AdaptiveConfig::default(),
            eval: EvalConfig::default(),
            negative_source: NegativeSource::SupportBackground,
            use_nss: true,
            use_al: true,
            teacher_nss: false,
            finetune: FinetuneConfig::default(),
            pretrain: PretrainConfig::default(),
            negative_floor: 5,
            random_negatives_per_positive: 5,
            n_shots: 5,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Ablation rows: `none`, `ns`, `nss`, `al`, `nss_al`.
    pub fn ablation(name: &str) -> Option<Self> {
        let (source, nss, al) = match name {
            "none" => (NegativeSource::RandomQuery, false, false),
            "ns" => (NegativeSource::SupportBackground, false, false),
            "nss" => (NegativeSource::SupportBackground, true, false),
            "al" => (NegativeSource::SupportBackground, false, true),
            "nss_al" => (NegativeSource::SupportBackground, true, true),
            _ => return None,
        };
        Some(Self {
            name: name.into(),
            negative_source: source,
            use_nss: nss,
            use_al: al,
            ..Self::default()
        })
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.student.validate()?;
        self.teacher.validate()?;
        self.adaptive.validate()?;
        self.eval.validate()?;
        if self.negative_floor == 0 || self.n_shots == 0 || self.random_negatives_per_positive == 0
        {
            return Err(Error::InvalidConfig(
                "negative_floor, n_shots and random_negatives_per_positive must be >= 1".into(),
            ));
        }
        if self.use_al && self.student == self.teacher {
            return Err(Error::InvalidConfig(
                "use_al needs a teacher that differs from the student".into(),
            ));
        }
        Ok(())
    }
}

/// Counts behind the support prototypes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub positive: usize,
    pub negative: usize,
    pub ambiguous: usize,
    /// Positives added because an event had no segment with enough overlap.
    pub forced_positive: usize,
    /// Negatives taken from the least-overlapping segments for lack of clean ones.
    pub negative_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub recording_id: String,
    pub config_name: String,
    pub plan: SegmentPlan,
    pub query_start_s: f64,
    pub query_end_s: f64,
    pub support: SupportSummary,
    pub query_segments: usize,
    pub provenance: Vec<Provenance>,
    pub classifiers: Vec<ClassifierDump>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune: Option<TrainLog>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_selection: Option<SelectionResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adaptation: Option<Vec<StepLog>>,
    pub predictions: Vec<EventInterval>,
    pub eval: EvalReport,
    /// Wall-clock milliseconds per stage; the only nondeterministic field.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timing_ms: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn counts(&self) -> Counts {
        let s = &self.eval.overall;
        Counts {
            tp: s.tp,
            fp: s.fp,
            fn_: s.fn_,
        }
    }

    /// Report JSON with the timing map emptied.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.timing_ms.clear();
        Ok(serde_json::to_string_pretty(&r)?)
    }

    /// `predictions.csv`, `report.json` without timings, `timing.json` and,
    /// when adaptation ran, `steps.jsonl`.
    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_predictions(dir.join("predictions.csv"), &self.predictions)?;
        let report = dir.join("report.json");
        std::fs::write(&report, self.canonical_json()?).map_err(|e| Error::io(&report, e))?;
        let timing = dir.join("timing.json");
        std::fs::write(&timing, serde_json::to_string_pretty(&self.timing_ms)?)
            .map_err(|e| Error::io(&timing, e))?;
        if let Some(steps) = &self.adaptation {
            let path = dir.join("steps.jsonl");
            let mut f = std::io::BufWriter::new(
                std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?,
            );
            for s in steps {
                writeln!(f, "{}", serde_json::to_string(s)?).map_err(|e| Error::io(&path, e))?;
            }
            f.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Decoded recording, its PCEN matrix and its annotations.
#[derive(Debug, Clone)]
pub struct LoadedRecording {
    pub recording_id: String,
    pub gram: PcenGram,
    pub duration_s: f64,
    pub events: Vec<AnnotationEvent>,
}

impl LoadedRecording {
    pub fn episode(&self, n_shots: usize) -> Result<Episode> {
        build_episode(&self.recording_id, &self.events, self.duration_s, n_shots)
            .stage(Stage::Episode)
    }
}

pub fn load_recording(
    recording_id: &str,
    wav: impl AsRef<Path>,
    csv: impl AsRef<Path>,
    frontend: &FrontendConfig,
) -> Result<LoadedRecording> {
    let mut w = load_wav(wav).stage(Stage::Load)?;
    let events = parse_annotations(csv).stage(Stage::Load)?;
    if w.sample_rate != frontend.target_rate {
        w = resample(&w, frontend.target_rate);
    }
    let gram = mel_pcen(&w, frontend).stage(Stage::Frontend)?;
    Ok(LoadedRecording {
        recording_id: recording_id.to_string(),
        gram,
        duration_s: w.duration_seconds(),
        events,
    })
}

/// Load the recording named by `source` and run one episode on it.
pub fn run_episode(source: &EpisodeManifest, cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let t0 = Instant::now();
    let rec = load_recording(
        &source.recording,
        &source.wav_path,
        &source.csv_path,
        &cfg.frontend,
    )?;
    let load_ms = t0.elapsed().as_secs_f64() * 1e3;
    let episode = rec.episode(source.n_shots)?;
    let mut report = run_loaded_episode(&episode, &rec.gram, cfg)?;
    report.timing_ms.insert("load".into(), load_ms);
    Ok(report)
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// First frame at or after `t`.
fn frame_at_or_after(t: f64, frame_shift_ms: f64) -> usize {
    (t * 1000.0 / frame_shift_ms - 1e-9).ceil().max(0.0) as usize
}

struct SupportSets {
    positive: Vec<usize>,
    negative: Vec<usize>,
    summary: SupportSummary,
}

fn support_sets(grid: &SegmentGrid, episode: &Episode) -> Result<SupportSets> {
    let annotations = episode.support_annotations();
    let mut labels: Vec<SegmentLabel> = label_support_segments(grid, &annotations)
        .into_iter()
        .map(|l| l.label)
        .collect();
    let abs = grid.absolute();
    let shift = grid.frame_shift_ms;
    let overlap =
        |(s, e): (usize, usize), (on, off): (usize, usize)| e.min(off).saturating_sub(s.max(on));

    let mut summary = SupportSummary::default();
    for ev in &episode.support_events {
        let span = ev.frames(shift);
        let covered = abs
            .iter()
            .zip(&labels)
            .any(|(&seg, &l)| l == SegmentLabel::Positive && overlap(seg, span) > 0);
        if covered {
            continue;
        }
        let best = abs
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| overlap(**a, span).cmp(&overlap(**b, span)).then(j.cmp(i)))
            .map(|(i, _)| i);
        if let Some(i) = best.filter(|&i| overlap(abs[i], span) > 0) {
            labels[i] = SegmentLabel::Positive;
            summary.forced_positive += 1;
        }
    }

    let positive: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == SegmentLabel::Positive)
        .collect();
    let mut negative: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == SegmentLabel::Negative)
        .collect();
    if positive.is_empty() {
        return Err(Error::EmptyClass("positive"));
    }
    if negative.is_empty() {
        let spans: Vec<(usize, usize)> = annotations.iter().map(|e| e.frames(shift)).collect();
        let touched: Vec<usize> = abs
            .iter()
            .map(|&seg| spans.iter().map(|&sp| overlap(seg, sp)).sum())
            .collect();
        let candidates: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] != SegmentLabel::Positive)
            .collect();
        if let Some(min) = candidates.iter().map(|&i| touched[i]).min() {
            negative = candidates
                .into_iter()
                .filter(|&i| touched[i] == min)
                .collect();
            summary.negative_fallback = true;
        }
    }
    summary.positive = positive.len();
    summary.negative = negative.len();
    summary.ambiguous = labels.len()
        - positive.len()
        - labels
            .iter()
            .filter(|&&l| l == SegmentLabel::Negative)
            .count();
    Ok(SupportSets {
        positive,
        negative,
        summary,
    })
}

fn random_query_rows(n_query: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n_query, count.min(n_query)).into_vec();
    idx.sort_unstable();
    idx
}

/// Prototype inputs of one embedder: positive rows and negative rows.
fn class_rows(
    support: &EmbeddingMatrix,
    query: &EmbeddingMatrix,
    pos: &[usize],
    neg: &Negatives,
) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let negs = match neg {
        Negatives::Support(idx) => support.select(idx),
        Negatives::Query(idx) => query.select(idx),
    };
    (support.select(pos), negs)
}

enum Negatives {
    Support(Vec<usize>),
    Query(Vec<usize>),
}

impl Negatives {
    fn len(&self) -> usize {
        match self {
            Negatives::Support(v) | Negatives::Query(v) => v.len(),
        }
    }
}

/// Run one episode on a precomputed PCEN matrix.
pub fn run_loaded_episode(
    episode: &Episode,
    gram: &PcenGram,
    cfg: &PipelineConfig,
) -> Result<RunReport> {
    cfg.validate()?;
    let mut timing = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timing: &mut BTreeMap<String, f64>| {
        timing.insert(name.to_string(), clock.elapsed().as_secs_f64() * 1e3);
        clock = Instant::now();
    };
    let shift = gram.frame_shift_ms;
    let episode_seed = derive_seed(cfg.seed, stable_hash(&episode.recording_id));

    // segmentation
    let plan = plan_segments(&episode.support_events, shift).stage(Stage::Segmentation)?;
    let n_frames = gram.n_frames();
    let q0 = frame_at_or_after(episode.query_start_s, shift).min(n_frames.saturating_sub(1));
    let support_grid = make_grid(q0, &plan)
        .at(0, GridRole::Support)
        .with_frame_shift(shift);
    let query_grid = make_grid(n_frames - q0, &plan)
        .at(q0, GridRole::Query)
        .with_frame_shift(shift);
    let sets = support_sets(&support_grid, episode).stage(Stage::Segmentation)?;
    let n_pos = sets.positive.len();
    lap("segmentation", &mut timing);

    // student embeddings and W0
    let mut student = cfg.student.clone();
    let mut s_support = embed_normalized(&student, gram, &support_grid).stage(Stage::Embedding)?;
    let mut s_query = embed_normalized(&student, gram, &query_grid).stage(Stage::Embedding)?;
    let negatives = match cfg.negative_source {
        NegativeSource::SupportBackground => Negatives::Support(sets.negative.clone()),
        NegativeSource::RandomQuery => Negatives::Query(random_query_rows(
            query_grid.len(),
            cfg.random_negatives_per_positive * n_pos,
            episode_seed,
        )),
    };
    let (pos, neg) = class_rows(&s_support, &s_query, &sets.positive, &negatives);
    let w0 = build_prototypes(&pos, &neg, Provenance::W0).stage(Stage::Prototypes)?;
    lap("embedding", &mut timing);

    // support fine-tuning
    let mut finetune = None;
    if student.kind == EmbedderKind::Trainable {
        let support_abs = support_grid.absolute();
        let query_abs = query_grid.absolute();
        let mut windows: Vec<(usize, usize)> =
            sets.positive.iter().map(|&i| support_abs[i]).collect();
        let mut labels = vec![0usize; windows.len()];
        match &negatives {
            Negatives::Support(idx) => windows.extend(idx.iter().map(|&i| support_abs[i])),
            Negatives::Query(idx) => windows.extend(idx.iter().map(|&i| query_abs[i])),
        }
        labels.resize(windows.len(), 1);
        let data = LabeledWindows {
            gram: gram.clone(),
            windows,
            labels,
        };
        let (tuned, log) = finetune_on_support(
            &student,
            &data,
            cfg.finetune.lr,
            cfg.finetune.steps,
            episode_seed,
        )
        .stage(Stage::FineTune)?;
        if tuned != student {
            student = tuned;
            s_support = embed_normalized(&student, gram, &support_grid).stage(Stage::Embedding)?;
            s_query = embed_normalized(&student, gram, &query_grid).stage(Stage::Embedding)?;
        }
        finetune = Some(log);
    }
    let (pos, neg) = class_rows(&s_support, &s_query, &sets.positive, &negatives);
    let w1 = build_prototypes(&pos, &neg, Provenance::W1).stage(Stage::Prototypes)?;
    lap("finetune", &mut timing);

    let mut chain = vec![w0, w1.clone()];
    let mut current = w1;
    let mut selection = None;
    if cfg.use_nss {
        let sel = select_negatives(
            &current,
            &s_query,
            n_pos,
            negatives.len(),
            cfg.negative_floor,
        )
        .stage(Stage::NegativeSelection)?;
        let w2 = rebuild_classifier(&pos, &neg, Some(&s_query.select(&sel.selected_indices)))
            .stage(Stage::NegativeSelection)?;
        chain.push(w2.clone());
        current = w2;
        selection = Some(sel);
    }
    lap("negative_selection", &mut timing);

    let mut adaptation = None;
    let mut teacher_selection = None;
    if cfg.use_al {
        let t_support =
            embed_normalized(&cfg.teacher, gram, &support_grid).stage(Stage::Adaptation)?;
        let t_query = embed_normalized(&cfg.teacher, gram, &query_grid).stage(Stage::Adaptation)?;
        let (t_pos, t_neg) = class_rows(&t_support, &t_query, &sets.positive, &negatives);
        let mut teacher_w =
            build_prototypes(&t_pos, &t_neg, Provenance::W1).stage(Stage::Adaptation)?;
        if cfg.teacher_nss {
            let sel = select_negatives(
                &teacher_w,
                &t_query,
                n_pos,
                negatives.len(),
                cfg.negative_floor,
            )
            .stage(Stage::Adaptation)?;
            teacher_w =
                rebuild_classifier(&t_pos, &t_neg, Some(&t_query.select(&sel.selected_indices)))
                    .stage(Stage::Adaptation)?;
            teacher_selection = Some(sel);
        }
        let p_te = predict_probs(&teacher_w, &t_query).stage(Stage::Adaptation)?;
        let (adapted, steps) =
            adapt_student(&current, &s_query, &p_te, plan.seg_len, &cfg.adaptive)
                .stage(Stage::Adaptation)?;
        chain.push(adapted.clone());
        current = adapted;
        adaptation = Some(steps);
    }
    lap("adaptation", &mut timing);

    // events and scoring
    let probs = predict_probs(&current, &s_query).stage(Stage::PostProcess)?;
    let q_offset = frames_to_seconds(q0, shift);
    let mut events = threshold_and_merge(&probs.positive(), &query_grid, q_offset, &cfg.eval)
        .stage(Stage::PostProcess)?;
    for e in &mut events {
        e.offset_s = e.offset_s.min(episode.query_end_s);
    }
    events.retain(|e| e.offset_s > e.onset_s);
    let events = discard_support_overlap(events, episode.query_start_s);
    let refs: Vec<EventInterval> = episode
        .reference_events
        .iter()
        .map(EventInterval::from)
        .collect();
    let matched = match_events(&events, &refs, &cfg.eval);
    let eval = EvalReport::from_tasks([(episode.recording_id.as_str(), &matched)]);
    lap("scoring", &mut timing);

    Ok(RunReport {
        recording_id: episode.recording_id.clone(),
        config_name: cfg.name.clone(),
        plan,
        query_start_s: episode.query_start_s,
        query_end_s: episode.query_end_s,
        support: sets.summary,
        query_segments: query_grid.len(),
        provenance: chain.iter().map(|w| w.provenance).collect(),
        classifiers: chain.iter().map(ClassifierWeights::to_dump).collect(),
        finetune,
        selection,
        teacher_selection,
        adaptation,
        predictions: events,
        eval,
        timing_ms: timing,
    })
}

// ---------------------------------------------------------------------------
// corpus runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub recording: String,
    pub stage: Option<Stage>,
    pub message: String,
}

impl EpisodeFailure {
    fn new(recording: &str, e: &Error) -> Self {
        Self {
            recording: recording.to_string(),
            stage: e.stage(),
            message: e.to_string(),
        }
    }
}

/// Results of one configuration over every test recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub config: PipelineConfig,
    pub eval: EvalReport,
    pub per_profile: BTreeMap<String, Scores>,
    pub failures: Vec<EpisodeFailure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<TrainLog>,
    #[serde(skip)]
    pub episodes: Vec<RunReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub runs: Vec<BenchmarkRun>,
}

impl BenchmarkReport {
    pub fn has_failures(&self) -> bool {
        self.runs.iter().any(|r| !r.failures.is_empty())
    }

    /// One row per configuration and scope (`overall` or a profile name).
    pub fn comparison_rows(&self) -> Vec<(String, String, Scores)> {
        let mut rows = Vec::new();
        for run in &self.runs {
            rows.push((
                run.config.name.clone(),
                "overall".to_string(),
                run.eval.overall,
            ));
            for (profile, s) in &run.per_profile {
                rows.push((run.config.name.clone(), profile.clone(), *s));
            }
        }
        rows
    }

    pub fn comparison_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:<16} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9}\n",
            "config", "scope", "tp", "fp", "fn", "precision", "recall", "f"
        );
        for (name, scope, s) in self.comparison_rows() {
            out.push_str(&format!(
                "{:<16} {:<16} {:>5} {:>5} {:>5} {:>9.4} {:>9.4} {:>9.4}\n",
                name, scope, s.tp, s.fp, s.fn_, s.precision, s.recall, s.f_measure
            ));
        }
        out
    }

    /// `benchmark.json`, `comparison.csv` and per-episode outputs under `<config>/<recording>/`.
    pub fn write(&self, out_dir: impl AsRef<Path>) -> Result<()> {
        let out_dir = out_dir.as_ref();
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let json = out_dir.join("benchmark.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(&json, e))?;
        let csv_path = out_dir.join("comparison.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record([
            "config",
            "scope",
            "tp",
            "fp",
            "fn",
            "precision",
            "recall",
            "f_measure",
        ])?;
        for (name, scope, s) in self.comparison_rows() {
            w.write_record([
                name,
                scope,
                s.tp.to_string(),
                s.fp.to_string(),
                s.fn_.to_string(),
                s.precision.to_string(),
                s.recall.to_string(),
                s.f_measure.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        for run in &self.runs {
            for ep in &run.episodes {
                ep.write_outputs(out_dir.join(&run.config.name).join(&ep.recording_id))?;
            }
        }
        Ok(())
    }
}

/// Labelled fixed-length windows over a fully annotated recording.
fn training_windows(rec: &LoadedRecording, seg_len: usize) -> Option<LabeledWindows> {
    let plan = SegmentPlan {
        median_frames: seg_len,
        seg_len,
        hop: crate::task::hop_for_segment(seg_len),
    };
    let grid = make_grid(rec.gram.n_frames(), &plan)
        .at(0, GridRole::Support)
        .with_frame_shift(rec.gram.frame_shift_ms);
    let abs = grid.absolute();
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    for l in label_support_segments(&grid, &rec.events) {
        let y = match l.label {
            SegmentLabel::Positive => 0,
            SegmentLabel::Negative => 1,
            SegmentLabel::Ambiguous => continue,
        };
        windows.push(abs[l.index]);
        labels.push(y);
    }
    (!windows.is_empty()).then(|| LabeledWindows {
        gram: rec.gram.clone(),
        windows,
        labels,
    })
}

/// Pretrain a trainable student on labelled training recordings.
pub fn pretrain_student(
    cfg: &PipelineConfig,
    train: &[LoadedRecording],
) -> Result<(EmbedderSpec, TrainLog)> {
    let corpus: Vec<LabeledWindows> = train
        .iter()
        .filter_map(|r| training_windows(r, cfg.pretrain.seg_len))
        .collect();
    if corpus.is_empty() {
        return Err(Error::SingleClassCorpus);
    }
    pretrain_embedder(
        &corpus,
        &cfg.student,
        cfg.pretrain.epochs,
        cfg.pretrain.lr,
        cfg.pretrain.batch_size,
        cfg.seed,
    )
}

type LoadOutcome = std::result::Result<LoadedRecording, EpisodeFailure>;

fn load_split(
    manifest: &CorpusManifest,
    split: Split,
    frontend: &FrontendConfig,
) -> Vec<(String, String, LoadOutcome)> {
    let entries: Vec<_> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|e| {
            let rec = load_recording(
                &e.recording,
                manifest.resolve(&e.wav_path),
                manifest.resolve(&e.csv_path),
                frontend,
            )
            .map_err(|err| EpisodeFailure::new(&e.recording, &err));
            (e.recording.clone(), e.profile.clone(), rec)
        })
        .collect()
}

/// Run every configuration over every test recording of the manifest.
///
/// Failures are recorded per episode and do not stop the run.
pub fn run_benchmark(
    manifest: &CorpusManifest,
    configs: &[PipelineConfig],
) -> Result<BenchmarkReport> {
    let test_entries: Vec<_> = manifest.split(Split::Test).collect();
    if test_entries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if configs.is_empty() {
        return Err(Error::InvalidConfig("no configuration given".into()));
    }
    for c in configs {
        c.validate()?;
    }
    let shots: BTreeMap<&str, usize> = test_entries
        .iter()
        .map(|e| (e.recording.as_str(), e.n_shots))
        .collect();

    // decoded recordings are shared by configurations with the same frontend
    let mut cache: Vec<(FrontendConfig, Vec<(String, String, LoadOutcome)>)> = Vec::new();
    let mut train_cache: Vec<(FrontendConfig, Vec<LoadedRecording>)> = Vec::new();

    let mut runs = Vec::new();
    for cfg in configs {
        if !cache.iter().any(|(f, _)| f == &cfg.frontend) {
            cache.push((
                cfg.frontend.clone(),
                load_split(manifest, Split::Test, &cfg.frontend),
            ));
        }
        let loaded = &cache
            .iter()
            .find(|(f, _)| f == &cfg.frontend)
            .expect("cached")
            .1;

        let mut cfg = cfg.clone();
        let mut pretrain = None;
        if cfg.student.kind == EmbedderKind::Trainable && cfg.pretrain.epochs > 0 {
            if !train_cache.iter().any(|(f, _)| f == &cfg.frontend) {
                let train = load_split(manifest, Split::Train, &cfg.frontend)
                    .into_iter()
                    .filter_map(|(_, _, r)| r.ok())
                    .collect();
                train_cache.push((cfg.frontend.clone(), train));
            }
            let train = &train_cache
                .iter()
                .find(|(f, _)| f == &cfg.frontend)
                .expect("cached")
                .1;
            match pretrain_student(&cfg, train) {
                Ok((spec, log)) => {
                    cfg.student = spec;
                    pretrain = Some(log);
                }
                Err(e) => log::warn!("{}: pretraining skipped: {e}", cfg.name),
            }
        }

        let outcomes: Vec<(
            String,
            String,
            std::result::Result<RunReport, EpisodeFailure>,
        )> = loaded
            .par_iter()
            .map(|(id, profile, rec)| {
                let out = match rec {
                    Ok(rec) => rec
                        .episode(shots[id.as_str()])
                        .and_then(|ep| run_loaded_episode(&ep, &rec.gram, &cfg))
                        .map_err(|e| EpisodeFailure::new(id, &e)),
                    Err(f) => Err(f.clone()),
                };
                (id.clone(), profile.clone(), out)
            })
            .collect();

        let mut episodes = Vec::new();
        let mut failures = Vec::new();
        let mut by_profile: BTreeMap<String, Counts> = BTreeMap::new();
        for (id, profile, out) in outcomes {
            match out {
                Ok(r) => {
                    let c = by_profile.entry(profile).or_default();
                    *c = c.add(r.counts());
                    episodes.push(r);
                }
                Err(f) => {
                    log::error!("{}: {id}: {}", cfg.name, f.message);
                    failures.push(f);
                }
            }
        }
        let mut eval = EvalReport::default();
        let mut total = Counts::default();
        for ep in &episodes {
            total = total.add(ep.counts());
            eval.per_task
                .insert(ep.recording_id.clone(), ep.eval.overall);
            for (k, v) in &ep.eval.matches {
                eval.matches.insert(k.clone(), v.clone());
            }
        }
        eval.overall = total.into();
        runs.push(BenchmarkRun {
            config: cfg,
            eval,
            per_profile: by_profile.into_iter().map(|(k, v)| (k, v.into())).collect(),
            failures,
            pretrain,
            episodes,
        });
    }
    Ok(BenchmarkReport { runs })
}
