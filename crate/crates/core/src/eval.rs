//! Segment probabilities to events, IoU matching and event-level F-measure.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{frames_to_seconds, AnnotationEvent, SegmentGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventInterval {
    pub onset_s: f64,
    pub offset_s: f64,
    /// Mean positive probability of the merged segments.
    pub score: f64,
}

impl EventInterval {
    pub fn new(onset_s: f64, offset_s: f64) -> Self {
        Self {
            onset_s,
            offset_s,
            score: 1.0,
        }
    }
}

impl From<&AnnotationEvent> for EventInterval {
    fn from(e: &AnnotationEvent) -> Self {
        Self::new(e.onset_s, e.offset_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub prob_threshold: f64,
    pub iou_threshold: f64,
    /// Drop merged events shorter than this; off by default.
    pub min_duration_s: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prob_threshold: 0.5,
            iou_threshold: 0.3,
            min_duration_s: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.prob_threshold) || !open(self.iou_threshold) {
            return Err(Error::InvalidConfig(
                "eval thresholds must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Keep segments with `p >= threshold` and merge kept intervals that overlap or touch.
pub fn threshold_and_merge(
    positive_probs: &[f64],
    grid: &SegmentGrid,
    query_offset_s: f64,
    cfg: &EvalConfig,
) -> Result<Vec<EventInterval>> {
    if positive_probs.len() != grid.len() {
        return Err(Error::AlignmentMismatch {
            probs: positive_probs.len(),
            segments: grid.len(),
        });
    }
    let shift = grid.frame_shift_ms;
    let mut events: Vec<EventInterval> = Vec::new();
    let mut members = 0usize;
    let mut score_sum = 0.0;
    for (&(start, end), &p) in grid.segments.iter().zip(positive_probs) {
        if p < cfg.prob_threshold {
            continue;
        }
        let onset = query_offset_s + frames_to_seconds(start, shift);
        let offset = query_offset_s + frames_to_seconds(end, shift);
        match events.last_mut() {
            Some(cur) if onset <= cur.offset_s => {
                cur.offset_s = cur.offset_s.max(offset);
                members += 1;
                score_sum += p;
                cur.score = score_sum / members as f64;
            }
            _ => {
                events.push(EventInterval {
                    onset_s: onset,
                    offset_s: offset,
                    score: p,
                });
                members = 1;
                score_sum = p;
            }
        }
    }
    if let Some(min) = cfg.min_duration_s {
        events.retain(|e| e.offset_s - e.onset_s >= min);
    }
    Ok(events)
}

/// Merge overlapping or touching intervals of an onset-sorted list.
///
/// Scores of merged intervals are averaged weighted by duration.
pub fn merge_intervals(events: &[EventInterval]) -> Vec<EventInterval> {
    let mut sorted = events.to_vec();
    sorted.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    let mut out: Vec<(EventInterval, f64, f64)> = Vec::new();
    for e in sorted {
        let dur = e.offset_s - e.onset_s;
        match out.last_mut() {
            Some((cur, wsum, dsum)) if e.onset_s <= cur.offset_s => {
                cur.offset_s = cur.offset_s.max(e.offset_s);
                *wsum += e.score * dur;
                *dsum += dur;
                cur.score = *wsum / *dsum;
            }
            _ => out.push((e, e.score * dur, dur)),
        }
    }
    out.into_iter().map(|(e, _, _)| e).collect()
}

/// Drop predictions that begin before the query span.
pub fn discard_support_overlap(
    preds: Vec<EventInterval>,
    query_start_s: f64,
) -> Vec<EventInterval> {
    preds
        .into_iter()
        .filter(|e| e.onset_s >= query_start_s)
        .collect()
}

pub fn iou(a: &EventInterval, b: &EventInterval) -> f64 {
    let inter = (a.offset_s.min(b.offset_s) - a.onset_s.max(b.onset_s)).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = (a.offset_s - a.onset_s) + (b.offset_s - b.onset_s) - inter;
    inter / union
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventMatch {
    pub pred: usize,
    pub reference: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub matches: Vec<EventMatch>,
}

/// Greedy one-to-one matching by descending IoU.
///
/// Pairs below the IoU threshold are never matched. Ties go to the earlier
/// reference onset, then the earlier prediction onset.
pub fn match_events(
    preds: &[EventInterval],
    refs: &[EventInterval],
    cfg: &EvalConfig,
) -> MatchResult {
    let mut pairs: Vec<EventMatch> = Vec::new();
    for (pi, p) in preds.iter().enumerate() {
        for (ri, r) in refs.iter().enumerate() {
            let v = iou(p, r);
            if v >= cfg.iou_threshold {
                pairs.push(EventMatch {
                    pred: pi,
                    reference: ri,
                    iou: v,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(
                refs[a.reference]
                    .onset_s
                    .total_cmp(&refs[b.reference].onset_s),
            )
            .then(preds[a.pred].onset_s.total_cmp(&preds[b.pred].onset_s))
            .then(a.reference.cmp(&b.reference))
            .then(a.pred.cmp(&b.pred))
    });
    let mut pred_used = vec![false; preds.len()];
    let mut ref_used = vec![false; refs.len()];
    let mut matches = Vec::new();
    for m in pairs {
        if !pred_used[m.pred] && !ref_used[m.reference] {
            pred_used[m.pred] = true;
            ref_used[m.reference] = true;
            matches.push(m);
        }
    }
    let tp = matches.len();
    MatchResult {
        tp,
        fp: preds.len() - tp,
        fn_: refs.len() - tp,
        matches,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl From<&MatchResult> for Counts {
    fn from(m: &MatchResult) -> Self {
        Counts {
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// Precision, recall and F-measure; every ratio with a zero denominator is 0.
pub fn f_measure(tp: usize, fp: usize, fn_: usize) -> Scores {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f_measure: f,
    }
}

impl From<Counts> for Scores {
    fn from(c: Counts) -> Self {
        f_measure(c.tp, c.fp, c.fn_)
    }
}

/// Micro-averaged scores overall and per task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Scores,
    pub per_task: BTreeMap<String, Scores>,
    pub matches: BTreeMap<String, Vec<EventMatch>>,
}

impl EvalReport {
    pub fn from_tasks<'a>(tasks: impl IntoIterator<Item = (&'a str, &'a MatchResult)>) -> Self {
        let mut total = Counts::default();
        let mut report = EvalReport::default();
        for (name, m) in tasks {
            let c = Counts::from(m);
            total = total.add(c);
            report.per_task.insert(name.to_string(), c.into());
            report.matches.insert(name.to_string(), m.matches.clone());
        }
        report.overall = total.into();
        report
    }
}

const PRED_HEADER: [&str; 3] = ["onset_s", "offset_s", "score"];

pub fn write_predictions(path: impl AsRef<Path>, events: &[EventInterval]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PRED_HEADER)?;
    for e in events {
        w.write_record([
            e.onset_s.to_string(),
            e.offset_s.to_string(),
            e.score.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<EventInterval>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::MalformedRow {
                    row: i + 1,
                    reason: format!("column {j} is missing or not a number"),
                })
        };
        let (onset_s, offset_s) = (num(0)?, num(1)?);
        let score = if rec.len() > 2 { num(2)? } else { 1.0 };
        out.push(EventInterval {
            onset_s,
            offset_s,
            score,
        });
    }
    out.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    Ok(out)
}

/// `time_s,probability` trace of the query grid, one row per segment start.
pub fn write_probability_trace(
    path: impl AsRef<Path>,
    grid: &SegmentGrid,
    query_offset_s: f64,
    positive_probs: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time_s", "probability"])?;
    for (&(start, _), p) in grid.segments.iter().zip(positive_probs) {
        let t = query_offset_s + frames_to_seconds(start, grid.frame_shift_ms);
        w.write_record([t.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{make_grid, SegmentPlan};

    fn frame_grid(span: usize, seg_len: usize, hop: usize) -> SegmentGrid {
        // one "frame" per second keeps times equal to frame indices
        make_grid(
            span,
            &SegmentPlan {
                median_frames: seg_len,
                seg_len,
                hop,
            },
        )
        .with_frame_shift(1000.0)
    }

    fn ev(a: f64, b: f64) -> EventInterval {
        EventInterval::new(a, b)
    }

    #[test]
    fn touch_merge_example() {
        let grid = frame_grid(10, 4, 1);
        // segments start at 0..=6; keep starts 0, 1 and 6
        let mut p = vec![0.0; grid.len()];
        p[0] = 0.9;
        p[1] = 0.7;
        p[6] = 0.6;
        let evs = threshold_and_merge(&p, &grid, 0.0, &EvalConfig::default()).unwrap();
        assert_eq!(evs.len(), 2);
        assert_eq!((evs[0].onset_s, evs[0].offset_s), (0.0, 5.0));
        assert!((evs[0].score - 0.8).abs() < 1e-12);
        assert_eq!((evs[1].onset_s, evs[1].offset_s), (6.0, 10.0));
    }

    #[test]
    fn nothing_above_threshold() {
        let grid = frame_grid(10, 4, 1);
        let p = vec![0.49; grid.len()];
        assert!(threshold_and_merge(&p, &grid, 0.0, &EvalConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn everything_above_threshold_is_one_event() {
        let grid = frame_grid(10, 4, 2);
        let p = vec![0.5; grid.len()];
        let evs = threshold_and_merge(&p, &grid, 3.0, &EvalConfig::default()).unwrap();
        assert_eq!(evs.len(), 1);
        assert_eq!((evs[0].onset_s, evs[0].offset_s), (3.0, 13.0));
    }

    #[test]
    fn alignment_checked() {
        let grid = frame_grid(10, 4, 2);
        assert!(matches!(
            threshold_and_merge(&[0.5], &grid, 0.0, &EvalConfig::default()),
            Err(Error::AlignmentMismatch { .. })
        ));
    }

    #[test]
    fn min_duration_filter() {
        let grid = frame_grid(10, 2, 2);
        let mut p = vec![0.0; grid.len()];
        p[0] = 0.9;
        p[2] = 0.9;
        p[3] = 0.9;
        let cfg = EvalConfig {
            min_duration_s: Some(3.0),
            ..Default::default()
        };
        let evs = threshold_and_merge(&p, &grid, 0.0, &cfg).unwrap();
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].onset_s, 4.0);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&ev(1.0, 2.0), &ev(1.0, 2.0)), 1.0);
        assert!((iou(&ev(0.0, 10.0), &ev(5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&ev(0.0, 1.0), &ev(2.0, 3.0)), 0.0);
        assert_eq!(iou(&ev(0.0, 1.0), &ev(1.0, 3.0)), 0.0);
    }

    #[test]
    fn matching_examples() {
        let cfg = EvalConfig::default();
        let m = match_events(
            &[ev(0.0, 10.0), ev(20.0, 30.0)],
            &[ev(1.0, 9.0), ev(21.0, 29.0)],
            &cfg,
        );
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));

        let m = match_events(&[ev(0.0, 10.0)], &[ev(0.0, 6.0), ev(6.0, 12.0)], &cfg);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 1));
        assert_eq!(m.matches[0].reference, 0);

        let m = match_events(&[], &[ev(0.0, 1.0), ev(2.0, 3.0), ev(4.0, 5.0)], &cfg);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 3));
    }

    #[test]
    fn f_measure_examples() {
        let s = f_measure(2, 1, 1);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.f_measure - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f_measure(4, 0, 0).f_measure, 1.0);
        assert_eq!(f_measure(0, 3, 2).f_measure, 0.0);
        assert_eq!(f_measure(0, 0, 0).f_measure, 0.0);
    }

    #[test]
    fn micro_average_sums_counts() {
        let a = MatchResult {
            tp: 1,
            fp: 0,
            fn_: 1,
            matches: vec![],
        };
        let b = MatchResult {
            tp: 3,
            fp: 1,
            fn_: 0,
            matches: vec![],
        };
        let r = EvalReport::from_tasks([("a", &a), ("b", &b)]);
        assert_eq!(r.overall, f_measure(4, 1, 1));
        assert_eq!(r.per_task["a"].f_measure, f_measure(1, 0, 1).f_measure);
    }

    #[test]
    fn support_overlap_discarded() {
        let kept = discard_support_overlap(vec![ev(1.0, 2.0), ev(5.0, 6.0)], 4.0);
        assert_eq!(kept, vec![ev(5.0, 6.0)]);
    }

    #[test]
    fn predictions_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let evs = vec![
            EventInterval {
                onset_s: 1.25,
                offset_s: 2.5,
                score: 0.75,
            },
            EventInterval {
                onset_s: 3.0,
                offset_s: 4.125,
                score: 0.6,
            },
        ];
        write_predictions(&p, &evs).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), evs);
    }
}
