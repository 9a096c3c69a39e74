//! Annotations, 5-shot episodes and the per-recording segment grid.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventLabel {
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "UNK")]
    Unk,
}

impl EventLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            EventLabel::Pos => "POS",
            EventLabel::Unk => "UNK",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub label: EventLabel,
}

impl AnnotationEvent {
    pub fn pos(onset_s: f64, offset_s: f64) -> Self {
        Self {
            onset_s,
            offset_s,
            label: EventLabel::Pos,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }

    /// Half-open frame range `[onset, offset)`, at least one frame long.
    pub fn frames(&self, frame_shift_ms: f64) -> (usize, usize) {
        let on = seconds_to_frames(self.onset_s, frame_shift_ms);
        let off = seconds_to_frames(self.offset_s, frame_shift_ms).max(on + 1);
        (on, off)
    }
}

pub fn seconds_to_frames(t: f64, frame_shift_ms: f64) -> usize {
    (t * 1000.0 / frame_shift_ms).round().max(0.0) as usize
}

pub fn frames_to_seconds(frames: usize, frame_shift_ms: f64) -> f64 {
    frames as f64 * frame_shift_ms / 1000.0
}

const CSV_HEADER: [&str; 3] = ["onset_s", "offset_s", "label"];

/// Parse `onset_s,offset_s,label` rows; the result is sorted by onset.
pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationEvent>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_from(f)
}

pub fn parse_annotations_from(reader: impl Read) -> Result<Vec<AnnotationEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::MalformedRow {
            row: 0,
            reason: format!("expected header {:?}", CSV_HEADER.join(",")),
        });
    }

    let mut events = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::MalformedRow {
                row,
                reason: format!("expected 3 fields, got {}", rec.len()),
            });
        }
        let time = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedRow {
                    row,
                    reason: format!("{name} {s:?} is not a number"),
                })
        };
        let onset_s = time(&rec[0], "onset")?;
        let offset_s = time(&rec[1], "offset")?;
        if onset_s < 0.0 || onset_s >= offset_s {
            return Err(Error::MalformedRow {
                row,
                reason: format!("need 0 <= onset < offset, got {onset_s} / {offset_s}"),
            });
        }
        let label = match &rec[2] {
            "POS" => EventLabel::Pos,
            "UNK" => EventLabel::Unk,
            other => {
                return Err(Error::UnknownLabel {
                    row,
                    label: other.to_string(),
                })
            }
        };
        events.push(AnnotationEvent {
            onset_s,
            offset_s,
            label,
        });
    }
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    Ok(events)
}

pub fn write_annotations(path: impl AsRef<Path>, events: &[AnnotationEvent]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for e in events {
        w.write_record([
            e.onset_s.to_string(),
            e.offset_s.to_string(),
            e.label.as_str().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One recording split into an annotated support head and a query tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub recording_id: String,
    pub support_events: Vec<AnnotationEvent>,
    /// UNK events that start inside the support span.
    pub support_unknown: Vec<AnnotationEvent>,
    pub query_start_s: f64,
    pub query_end_s: f64,
    /// Held-out positives, used for scoring only.
    pub reference_events: Vec<AnnotationEvent>,
}

impl Episode {
    /// Every annotation visible to the detector.
    pub fn support_annotations(&self) -> Vec<AnnotationEvent> {
        let mut all: Vec<_> = self
            .support_events
            .iter()
            .chain(&self.support_unknown)
            .copied()
            .collect();
        all.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
        all
    }
}

pub fn build_episode(
    recording_id: impl Into<String>,
    events: &[AnnotationEvent],
    duration_s: f64,
    n_shots: usize,
) -> Result<Episode> {
    let mut pos: Vec<AnnotationEvent> = events
        .iter()
        .filter(|e| e.label == EventLabel::Pos)
        .copied()
        .collect();
    if pos.is_empty() || n_shots == 0 {
        return Err(Error::NoPositives);
    }
    pos.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    let shots = n_shots.min(pos.len());
    let reference_events = pos.split_off(shots);
    let query_start_s = pos.last().expect("nonempty").offset_s;
    if duration_s <= query_start_s {
        return Err(Error::EmptyQuery {
            duration_s,
            support_end_s: query_start_s,
        });
    }
    let support_unknown = events
        .iter()
        .filter(|e| e.label == EventLabel::Unk && e.onset_s < query_start_s)
        .copied()
        .collect();
    Ok(Episode {
        recording_id: recording_id.into(),
        support_events: pos,
        support_unknown,
        query_start_s,
        query_end_s: duration_s,
        reference_events,
    })
}

/// Episode description as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub recording: String,
    pub wav_path: PathBuf,
    pub csv_path: PathBuf,
    #[serde(default = "default_shots")]
    pub n_shots: usize,
}

fn default_shots() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub median_frames: usize,
    pub seg_len: usize,
    pub hop: usize,
}

/// Segment length for a median event duration of `m` frames.
///
/// Bins are left-open, right-closed: `m <= 20 -> 20`, `(20,100] -> m`,
/// `(100,200] -> m/2`, `(200,400] -> m/4`, `> 400 -> m/8`.
pub fn segment_length_for_median(m: usize) -> usize {
    match m {
        0..=20 => 20,
        21..=100 => m,
        101..=200 => m / 2,
        201..=400 => m / 4,
        _ => m / 8,
    }
}

pub fn hop_for_segment(seg_len: usize) -> usize {
    (seg_len / 4).max(1)
}

pub fn plan_segments(
    support_events: &[AnnotationEvent],
    frame_shift_ms: f64,
) -> Result<SegmentPlan> {
    if support_events.is_empty() {
        return Err(Error::NoPositives);
    }
    let mut durations: Vec<usize> = support_events
        .iter()
        .map(|e| seconds_to_frames(e.duration_s(), frame_shift_ms))
        .collect();
    durations.sort_unstable();
    // lower median for even counts
    let m = durations[(durations.len() - 1) / 2];
    let seg_len = segment_length_for_median(m);
    Ok(SegmentPlan {
        median_frames: m,
        seg_len,
        hop: hop_for_segment(seg_len),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridRole {
    Support,
    Query,
}

impl GridRole {
    pub fn as_str(self) -> &'static str {
        match self {
            GridRole::Support => "support",
            GridRole::Query => "query",
        }
    }
}

/// Fixed-length, hop-spaced segments over a span of frames.
///
/// Segment bounds are relative to `origin`, the absolute frame index of the
/// span start inside the recording's PCEN matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentGrid {
    pub segments: Vec<(usize, usize)>,
    pub seg_len: usize,
    pub hop: usize,
    pub span: usize,
    pub origin: usize,
    pub frame_shift_ms: f64,
    pub role: GridRole,
}

impl SegmentGrid {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn at(mut self, origin: usize, role: GridRole) -> Self {
        self.origin = origin;
        self.role = role;
        self
    }

    pub fn with_frame_shift(mut self, frame_shift_ms: f64) -> Self {
        self.frame_shift_ms = frame_shift_ms;
        self
    }

    /// Absolute frame bounds of every segment.
    pub fn absolute(&self) -> Vec<(usize, usize)> {
        self.segments
            .iter()
            .map(|&(s, e)| (s + self.origin, e + self.origin))
            .collect()
    }
}

/// Segments at starts `0, hop, 2*hop, ...` with `start + seg_len <= span`;
/// a span shorter than one segment yields a single zero-padded segment.
pub fn make_grid(span: usize, plan: &SegmentPlan) -> SegmentGrid {
    let seg_len = plan.seg_len.max(1);
    let hop = plan.hop.max(1);
    let segments = if span < seg_len {
        vec![(0, seg_len)]
    } else {
        (0..=span - seg_len)
            .step_by(hop)
            .map(|s| (s, s + seg_len))
            .collect()
    };
    SegmentGrid {
        segments,
        seg_len,
        hop,
        span,
        origin: 0,
        frame_shift_ms: 10.0,
        role: GridRole::Query,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    Positive,
    Negative,
    Ambiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub index: usize,
    pub label: SegmentLabel,
}

/// Minimum share of a segment's frames inside positive events for it to count as positive.
pub const POSITIVE_OVERLAP: f64 = 0.5;

/// Positive when at least half the segment's frames lie in POS events, negative
/// when it touches no annotated event at all, ambiguous otherwise.
pub fn label_support_segments(
    grid: &SegmentGrid,
    annotations: &[AnnotationEvent],
) -> Vec<LabeledSegment> {
    let shift = grid.frame_shift_ms;
    let frames: Vec<(usize, usize, EventLabel)> = annotations
        .iter()
        .map(|e| {
            let (on, off) = e.frames(shift);
            (on, off, e.label)
        })
        .collect();

    grid.absolute()
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| {
            let mut pos_frames = 0usize;
            let mut touches_any = false;
            for f in start..end {
                let mut in_pos = false;
                for &(on, off, label) in &frames {
                    if f >= on && f < off {
                        touches_any = true;
                        in_pos |= label == EventLabel::Pos;
                    }
                }
                pos_frames += in_pos as usize;
            }
            let label = if pos_frames as f64 >= POSITIVE_OVERLAP * (end - start) as f64 {
                SegmentLabel::Positive
            } else if !touches_any {
                SegmentLabel::Negative
            } else {
                SegmentLabel::Ambiguous
            };
            LabeledSegment { index, label }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<AnnotationEvent>> {
        parse_annotations_from(s.as_bytes())
    }

    #[test]
    fn parses_single_row() {
        let ev = parse("onset_s,offset_s,label\n0.5,1.0,POS\n").unwrap();
        assert_eq!(ev, vec![AnnotationEvent::pos(0.5, 1.0)]);
    }

    #[test]
    fn empty_body() {
        assert!(parse("onset_s,offset_s,label\n").unwrap().is_empty());
    }

    #[test]
    fn reversed_times_rejected() {
        let err = parse("onset_s,offset_s,label\n1.0,0.5,POS\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 1, .. }));
    }

    #[test]
    fn non_numeric_and_label_errors() {
        assert!(matches!(
            parse("onset_s,offset_s,label\nabc,0.5,POS\n"),
            Err(Error::MalformedRow { .. })
        ));
        assert!(matches!(
            parse("onset_s,offset_s,label\n0.1,0.5,NEG\n"),
            Err(Error::UnknownLabel { .. })
        ));
        assert!(matches!(
            parse("start,end,label\n0.1,0.5,POS\n"),
            Err(Error::MalformedRow { row: 0, .. })
        ));
    }

    #[test]
    fn rows_sorted_by_onset() {
        let ev = parse("onset_s,offset_s,label\n2.0,3.0,POS\n0.5,1.0,UNK\n").unwrap();
        assert_eq!(ev[0].onset_s, 0.5);
        assert_eq!(ev[1].label, EventLabel::Pos);
    }

    fn pos_events(n: usize) -> Vec<AnnotationEvent> {
        (0..n)
            .map(|i| AnnotationEvent::pos(i as f64 * 2.0, i as f64 * 2.0 + 0.5))
            .collect()
    }

    #[test]
    fn episode_splits_first_shots() {
        let ep = build_episode("r", &pos_events(7), 20.0, 5).unwrap();
        assert_eq!(ep.support_events.len(), 5);
        assert_eq!(ep.reference_events.len(), 2);
        assert_eq!(ep.query_start_s, 8.5);
        assert_eq!(ep.query_end_s, 20.0);
    }

    #[test]
    fn exactly_five_positives() {
        let ep = build_episode("r", &pos_events(5), 20.0, 5).unwrap();
        assert!(ep.reference_events.is_empty());
        assert_eq!(ep.query_start_s, 8.5);
    }

    #[test]
    fn shots_clipped_when_fewer_positives() {
        let ep = build_episode("r", &pos_events(3), 20.0, 5).unwrap();
        assert_eq!(ep.support_events.len(), 3);
        assert_eq!(ep.query_start_s, 4.5);
    }

    #[test]
    fn no_positives() {
        let unk = [AnnotationEvent {
            onset_s: 0.0,
            offset_s: 1.0,
            label: EventLabel::Unk,
        }];
        assert!(matches!(
            build_episode("r", &unk, 10.0, 5),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn support_unknowns_kept_query_unknowns_dropped() {
        let mut ev = pos_events(6);
        ev.push(AnnotationEvent {
            onset_s: 1.0,
            offset_s: 1.2,
            label: EventLabel::Unk,
        });
        ev.push(AnnotationEvent {
            onset_s: 15.0,
            offset_s: 15.2,
            label: EventLabel::Unk,
        });
        let ep = build_episode("r", &ev, 20.0, 5).unwrap();
        assert_eq!(ep.support_unknown.len(), 1);
        assert_eq!(ep.support_annotations().len(), 6);
    }

    fn events_of_frames(durations: &[usize]) -> Vec<AnnotationEvent> {
        durations
            .iter()
            .enumerate()
            .map(|(i, &d)| AnnotationEvent::pos(i as f64 * 10.0, i as f64 * 10.0 + d as f64 * 0.01))
            .collect()
    }

    #[test]
    fn plan_small_median() {
        let plan = plan_segments(&events_of_frames(&[10, 12, 15, 18, 19]), 10.0).unwrap();
        assert_eq!(
            plan,
            SegmentPlan {
                median_frames: 15,
                seg_len: 20,
                hop: 5
            }
        );
    }

    #[test]
    fn plan_bins() {
        assert_eq!(segment_length_for_median(60), 60);
        assert_eq!(hop_for_segment(60), 15);
        assert_eq!(segment_length_for_median(800), 100);
        assert_eq!(hop_for_segment(100), 25);
        assert_eq!(segment_length_for_median(20), 20);
        assert_eq!(segment_length_for_median(21), 21);
        assert_eq!(segment_length_for_median(100), 100);
        assert_eq!(segment_length_for_median(101), 50);
        assert_eq!(segment_length_for_median(400), 100);
        assert_eq!(segment_length_for_median(401), 50);
    }

    #[test]
    fn plan_lower_median_on_even_count() {
        let plan = plan_segments(&events_of_frames(&[30, 40, 50, 60]), 10.0).unwrap();
        assert_eq!(plan.median_frames, 40);
    }

    #[test]
    fn grid_examples() {
        let plan = |seg_len, hop| SegmentPlan {
            median_frames: seg_len,
            seg_len,
            hop,
        };
        let g = make_grid(12, &plan(4, 1));
        assert_eq!(g.len(), 9);
        assert_eq!(g.segments[8], (8, 12));
        let g = make_grid(3, &plan(4, 1));
        assert_eq!(g.segments, vec![(0, 4)]);
        let g = make_grid(8, &plan(4, 2));
        let starts: Vec<_> = g.segments.iter().map(|s| s.0).collect();
        assert_eq!(starts, vec![0, 2, 4]);
    }

    #[test]
    fn labels_by_overlap() {
        let plan = SegmentPlan {
            median_frames: 4,
            seg_len: 4,
            hop: 4,
        };
        // frames: event at [4, 8), then segment [8,12) overlaps [11,20) by one frame
        let grid = make_grid(20, &plan);
        let ann = [
            AnnotationEvent::pos(0.04, 0.08),
            AnnotationEvent::pos(0.11, 0.2),
        ];
        let labels = label_support_segments(&grid, &ann);
        let l: Vec<_> = labels.iter().map(|l| l.label).collect();
        assert_eq!(
            l,
            vec![
                SegmentLabel::Negative,
                SegmentLabel::Positive,
                SegmentLabel::Ambiguous,
                SegmentLabel::Positive,
                SegmentLabel::Positive,
            ]
        );
    }

    #[test]
    fn unknown_events_block_negatives() {
        let plan = SegmentPlan {
            median_frames: 4,
            seg_len: 4,
            hop: 4,
        };
        let grid = make_grid(8, &plan);
        let ann = [AnnotationEvent {
            onset_s: 0.0,
            offset_s: 0.04,
            label: EventLabel::Unk,
        }];
        let l = label_support_segments(&grid, &ann);
        assert_eq!(l[0].label, SegmentLabel::Ambiguous);
        assert_eq!(l[1].label, SegmentLabel::Negative);
    }
}
