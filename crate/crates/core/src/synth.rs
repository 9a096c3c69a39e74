//! Seeded synthetic recordings with annotated tone or chirp events.
//!
//! A task is background noise (pink or white) with non-overlapping target
//! events, optionally interleaved with unannotated distractor events. Event
//! bounds are exact to the sample.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::task::{write_annotations, AnnotationEvent};

/// Smallest allowed silence between any two placed events.
pub const MIN_GAP_S: f64 = 0.1;
/// Carriers of different sound classes stay at least this far apart.
pub const MIN_CARRIER_SEPARATION_HZ: f64 = 500.0;
const PLACEMENT_RETRIES: usize = 64;
const MIN_EVENTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Tone,
    /// Linear sweep starting at the carrier.
    Chirp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Pink,
    White,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationShape {
    Uniform,
    LogUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationDist {
    pub min_s: f64,
    pub max_s: f64,
    pub shape: DurationShape,
}

impl DurationDist {
    pub fn uniform(min_s: f64, max_s: f64) -> Self {
        Self {
            min_s,
            max_s,
            shape: DurationShape::Uniform,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max_s <= self.min_s {
            return self.min_s;
        }
        let u: f64 = rng.random();
        match self.shape {
            DurationShape::Uniform => self.min_s + u * (self.max_s - self.min_s),
            DurationShape::LogUniform => {
                (self.min_s.ln() + u * (self.max_s / self.min_s).ln()).exp()
            }
        }
    }

    fn mean(&self) -> f64 {
        match self.shape {
            DurationShape::Uniform => 0.5 * (self.min_s + self.max_s),
            DurationShape::LogUniform if self.max_s > self.min_s => {
                (self.max_s - self.min_s) / (self.max_s / self.min_s).ln()
            }
            DurationShape::LogUniform => self.min_s,
        }
    }
}

/// Unannotated events that compete with the targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distractors {
    pub rate_per_min: f64,
    pub duration: DurationDist,
    /// Reuse the target carrier instead of drawing a separated one.
    #[serde(default)]
    pub same_carrier: bool,
    /// Amplitude relative to the target events.
    #[serde(default = "one")]
    pub gain: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub name: String,
    pub event_duration: DurationDist,
    pub event_rate_per_min: f64,
    pub event_kind: EventKind,
    /// Range the per-task carrier is drawn from, Hz.
    pub carrier_hz: (f64, f64),
    /// Sweep width of chirps, Hz.
    #[serde(default)]
    pub chirp_span_hz: f64,
    pub snr_db: f64,
    pub background: Background,
    pub recording_len_s: f64,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    /// Raised-cosine ramp at each end of an event, capped at a quarter of its duration.
    #[serde(default = "default_ramp")]
    pub ramp_s: f64,
    /// Silence between neighbouring events and at both ends; at least [`MIN_GAP_S`].
    #[serde(default = "default_gap")]
    pub min_gap_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractors: Option<Distractors>,
    /// Each target event is attenuated by a uniform draw from `[0, level_jitter_db]` dB.
    #[serde(default)]
    pub level_jitter_db: f64,
}

fn default_gap() -> f64 {
    MIN_GAP_S
}

fn default_rate() -> u32 {
    16_000
}

fn default_ramp() -> f64 {
    0.01
}

impl SynthProfile {
    fn base(name: &str, duration: DurationDist, rate: f64, len_s: f64) -> Self {
        Self {
            name: name.to_string(),
            event_duration: duration,
            event_rate_per_min: rate,
            event_kind: EventKind::Tone,
            carrier_hz: (1000.0, 4000.0),
            chirp_span_hz: 0.0,
            snr_db: 30.0,
            background: Background::Pink,
            recording_len_s: len_s,
            sample_rate: default_rate(),
            ramp_s: default_ramp(),
            min_gap_s: MIN_GAP_S,
            distractors: None,
            level_jitter_db: 0.0,
        }
    }

    /// Well separated tones at 30 dB.
    pub fn easy() -> Self {
        let mut p = Self::base("easy", DurationDist::uniform(0.2, 0.5), 16.0, 60.0);
        p.min_gap_s = 1.0;
        p
    }

    /// Short calls, moderately sparse.
    pub fn me() -> Self {
        let mut p = Self::base("me", DurationDist::uniform(0.1, 0.3), 20.0, 60.0);
        p.snr_db = 20.0;
        p
    }

    /// Very short chirps at a high rate.
    pub fn pb() -> Self {
        let mut p = Self::base(
            "pb",
            DurationDist {
                min_s: 0.03,
                max_s: 0.12,
                shape: DurationShape::LogUniform,
            },
            40.0,
            60.0,
        );
        p.event_kind = EventKind::Chirp;
        p.chirp_span_hz = 600.0;
        p.snr_db = 20.0;
        p
    }

    /// Long calls of one to four seconds.
    pub fn hb() -> Self {
        let mut p = Self::base("hb", DurationDist::uniform(1.0, 4.0), 8.0, 120.0);
        p.snr_db = 20.0;
        p
    }

    /// Long, quiet calls of uneven loudness covering about two thirds of the recording.
    pub fn dense() -> Self {
        let mut p = Self::base("dense", DurationDist::uniform(3.0, 5.0), 9.75, 150.0);
        p.snr_db = 5.0;
        p.min_gap_s = 1.2;
        p.level_jitter_db = 12.0;
        p
    }

    /// Long calls mixed with short bursts at the same carrier.
    pub fn hb_distractors() -> Self {
        let mut p = Self::hb();
        p.name = "hb_distractors".into();
        p.distractors = Some(Distractors {
            rate_per_min: 12.0,
            duration: DurationDist::uniform(0.3, 0.5),
            same_carrier: true,
            gain: 1.0,
        });
        p
    }

    pub fn builtin(name: &str) -> Option<Self> {
        Some(match name {
            "easy" => Self::easy(),
            "me" => Self::me(),
            "pb" => Self::pb(),
            "hb" => Self::hb(),
            "dense" => Self::dense(),
            "hb_distractors" => Self::hb_distractors(),
            _ => return None,
        })
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["easy", "me", "pb", "hb", "dense", "hb_distractors"]
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.event_duration;
        let bad = |what: &str| {
            Err(Error::InvalidConfig(format!(
                "profile {}: {what}",
                self.name
            )))
        };
        if !(d.min_s > 0.0 && d.max_s >= d.min_s) {
            return bad("durations must be positive with min <= max");
        }
        if let Some(x) = &self.distractors {
            if !(x.duration.min_s > 0.0
                && x.duration.max_s >= x.duration.min_s
                && x.rate_per_min >= 0.0)
            {
                return bad("invalid distractor settings");
            }
        }
        if !(self.level_jitter_db >= 0.0) {
            return bad("level jitter must be non-negative");
        }
        if self.min_gap_s < MIN_GAP_S {
            return bad("gaps must be at least 100 ms");
        }
        if !(self.event_rate_per_min > 0.0 && self.recording_len_s > 0.0 && self.sample_rate > 0) {
            return bad("rate, length and sample rate must be positive");
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let top = self.carrier_hz.1 + self.chirp_span_hz.max(0.0);
        if !(self.carrier_hz.0 > 0.0 && self.carrier_hz.1 >= self.carrier_hz.0 && top < nyquist) {
            return bad("carrier range must lie below Nyquist");
        }
        Ok(())
    }

    fn n_events(&self) -> usize {
        (self.event_rate_per_min * self.recording_len_s / 60.0).round() as usize
    }

    fn n_distractors(&self) -> usize {
        self.distractors.map_or(0, |x| {
            (x.rate_per_min * self.recording_len_s / 60.0).round() as usize
        })
    }

    /// Expected share of the recording covered by target events.
    pub fn expected_coverage(&self) -> f64 {
        self.n_events() as f64 * self.event_duration.mean() / self.recording_len_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub waveform: Waveform,
    pub annotations: Vec<AnnotationEvent>,
    /// Unannotated distractor intervals, for diagnostics.
    pub distractors: Vec<AnnotationEvent>,
    pub carrier_hz: f64,
    pub seed: u64,
}

struct Placed {
    start: usize,
    len: usize,
    target: bool,
}

/// Non-overlapping placement with at least `gap_s` between neighbours and
/// from both recording ends. Spare time is split uniformly at random.
fn place_events(
    durations: &[(f64, bool)],
    length_s: f64,
    gap_s: f64,
    sr: f64,
    rng: &mut impl Rng,
) -> Option<Vec<Placed>> {
    let total: usize = (length_s * sr).round() as usize;
    let gap = (gap_s * sr).ceil() as usize;
    let lens: Vec<usize> = durations
        .iter()
        .map(|(d, _)| ((d * sr).round() as usize).max(1))
        .collect();
    let used: usize = lens.iter().sum::<usize>() + gap * (lens.len() + 1);
    if used > total {
        return None;
    }
    let spare = total - used;
    let mut cuts: Vec<usize> = (0..lens.len())
        .map(|_| rng.random_range(0..=spare))
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(lens.len());
    let mut cursor = gap;
    let mut prev_cut = 0;
    for ((len, &(_, target)), cut) in lens.iter().zip(durations).zip(cuts) {
        cursor += cut - prev_cut;
        prev_cut = cut;
        out.push(Placed {
            start: cursor,
            len: *len,
            target,
        });
        cursor += len + gap;
    }
    Some(out)
}

/// Voss-McCartney pink noise with 16 octave rows plus a white term.
fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    const ROWS: usize = 16;
    let mut rows: Vec<f64> = (0..ROWS).map(|_| rng.sample(StandardNormal)).collect();
    let mut running: f64 = rows.iter().sum();
    (0..n)
        .map(|i| {
            if i > 0 {
                // update the row given by the number of trailing zeros of the counter
                let k = (i.trailing_zeros() as usize).min(ROWS - 1);
                let fresh: f64 = rng.sample(StandardNormal);
                running += fresh - rows[k];
                rows[k] = fresh;
            }
            let white: f64 = rng.sample(StandardNormal);
            running + white
        })
        .collect()
}

fn background(kind: Background, n: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut x: Vec<f64> = match kind {
        Background::White => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        Background::Pink => pink_noise(n, rng),
    };
    let mean = x.iter().sum::<f64>() / n.max(1) as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
    let scale = if var > 0.0 { sigma / var.sqrt() } else { 0.0 };
    x.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    x
}

fn envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 4).max(1);
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
    }
}

fn render_event(
    out: &mut [f64],
    ev: &Placed,
    profile: &SynthProfile,
    f0: f64,
    amp: f64,
    phase: f64,
) {
    let sr = profile.sample_rate as f64;
    let ramp = (profile.ramp_s * sr).round() as usize;
    let dur = ev.len as f64 / sr;
    let sweep = match profile.event_kind {
        EventKind::Tone => 0.0,
        EventKind::Chirp => profile.chirp_span_hz / dur,
    };
    for i in 0..ev.len {
        let t = i as f64 / sr;
        let arg = 2.0 * PI * (f0 * t + 0.5 * sweep * t * t) + phase;
        out[ev.start + i] += amp * envelope(i, ev.len, ramp) * arg.sin();
    }
}

fn draw_separated_carrier(target: f64, range: (f64, f64), rng: &mut impl Rng) -> f64 {
    for _ in 0..PLACEMENT_RETRIES {
        let c = rng.random_range(range.0..=range.1);
        if (c - target).abs() >= MIN_CARRIER_SEPARATION_HZ {
            return c;
        }
    }
    // range too narrow: step outside it
    if target - MIN_CARRIER_SEPARATION_HZ > range.0 {
        target - MIN_CARRIER_SEPARATION_HZ
    } else {
        target + MIN_CARRIER_SEPARATION_HZ
    }
}

/// One recording with annotations. Same profile and seed give identical output.
pub fn generate_task(profile: &SynthProfile, seed: u64) -> Result<SynthTask> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = profile.sample_rate as f64;
    let n_targets = profile.n_events();
    if n_targets < MIN_EVENTS {
        return Err(Error::PlacementFailure {
            wanted: MIN_EVENTS,
            length_s: profile.recording_len_s,
        });
    }
    let n_distract = profile.n_distractors();

    let mut placed = None;
    for _ in 0..PLACEMENT_RETRIES {
        let mut durs: Vec<(f64, bool)> = (0..n_targets)
            .map(|_| (profile.event_duration.sample(&mut rng), true))
            .collect();
        if let Some(x) = &profile.distractors {
            durs.extend((0..n_distract).map(|_| (x.duration.sample(&mut rng), false)));
        }
        durs.shuffle(&mut rng);
        if let Some(p) = place_events(
            &durs,
            profile.recording_len_s,
            profile.min_gap_s,
            sr,
            &mut rng,
        ) {
            placed = Some(p);
            break;
        }
    }
    let placed = placed.ok_or(Error::PlacementFailure {
        wanted: n_targets + n_distract,
        length_s: profile.recording_len_s,
    })?;

    let n = (profile.recording_len_s * sr).round() as usize;
    let snr = 10f64.powf(profile.snr_db / 10.0);
    // tone power amp^2/2 over noise power sigma^2; peaks stay below 0.95
    let sigma = 0.95 / ((2.0 * snr).sqrt() + 4.0);
    let amp = sigma * (2.0 * snr).sqrt();
    let mut signal = background(profile.background, n, sigma, &mut rng);

    let carrier = rng.random_range(profile.carrier_hz.0..=profile.carrier_hz.1);
    let (distract_carrier, distract_gain) = match &profile.distractors {
        Some(x) if x.same_carrier => (carrier, x.gain),
        Some(x) => (
            draw_separated_carrier(carrier, profile.carrier_hz, &mut rng),
            x.gain,
        ),
        None => (carrier, 1.0),
    };

    let mut annotations = Vec::new();
    let mut distractors = Vec::new();
    for ev in &placed {
        let phase = rng.random_range(0.0..2.0 * PI);
        let (f0, a) = if ev.target {
            let cut = if profile.level_jitter_db > 0.0 {
                rng.random_range(0.0..=profile.level_jitter_db)
            } else {
                0.0
            };
            (carrier, amp * 10f64.powf(-cut / 20.0))
        } else {
            (distract_carrier, amp * distract_gain)
        };
        render_event(&mut signal, ev, profile, f0, a, phase);
        let e = AnnotationEvent::pos(ev.start as f64 / sr, (ev.start + ev.len) as f64 / sr);
        if ev.target {
            annotations.push(e);
        } else {
            distractors.push(e);
        }
    }

    let samples = signal.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect();
    Ok(SynthTask {
        waveform: Waveform::new(samples, profile.sample_rate)?,
        annotations,
        distractors,
        carrier_hz: carrier,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub recording: String,
    /// Relative to the manifest's directory unless absolute.
    pub wav_path: PathBuf,
    pub csv_path: PathBuf,
    pub split: Split,
    pub profile: String,
    pub seed: u64,
    #[serde(default = "five")]
    pub n_shots: usize,
}

fn five() -> usize {
    5
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub recordings: Vec<CorpusEntry>,
    /// Directory relative paths are resolved against; not serialised.
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl CorpusManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: CorpusManifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.recordings.iter().filter(move |e| e.split == split)
    }
}

/// Per-recording seed derived from the corpus seed (SplitMix64 finaliser).
pub fn derive_seed(corpus_seed: u64, index: u64) -> u64 {
    let mut z = corpus_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Write `n_train + n_test` recordings per profile plus `manifest.json`.
pub fn generate_corpus(
    profiles: &[SynthProfile],
    n_train: usize,
    n_test: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<CorpusManifest> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidConfig(
            "n_train and n_test must be at least 1".into(),
        ));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut jobs = Vec::new();
    for (pi, profile) in profiles.iter().enumerate() {
        for i in 0..n_train + n_test {
            let split = if i < n_train {
                Split::Train
            } else {
                Split::Test
            };
            let idx = if i < n_train { i } else { i - n_train };
            let tag = match split {
                Split::Train => "train",
                Split::Test => "test",
            };
            let recording = format!("{}_{tag}_{idx:03}", profile.name);
            let seed = derive_seed(seed, (pi * (n_train + n_test) + i) as u64);
            jobs.push((profile, recording, split, seed));
        }
    }

    let recordings = jobs
        .into_par_iter()
        .map(|(profile, recording, split, seed)| {
            let task = generate_task(profile, seed)?;
            let wav = PathBuf::from(format!("{recording}.wav"));
            let csv = PathBuf::from(format!("{recording}.csv"));
            write_wav(out_dir.join(&wav), &task.waveform)?;
            write_annotations(out_dir.join(&csv), &task.annotations)?;
            Ok(CorpusEntry {
                recording,
                wav_path: wav,
                csv_path: csv,
                split,
                profile: profile.name.clone(),
                seed,
                n_shots: five(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = CorpusManifest {
        recordings,
        root: out_dir.to_path_buf(),
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Power at `freq` over `samples`, from the squared magnitude of the
/// windowed projection onto a complex exponential.
pub fn band_power(samples: &[f32], sample_rate: u32, freq: f64) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    let w = 2.0 * PI * freq / sample_rate as f64;
    let (mut re, mut im, mut wsum) = (0.0, 0.0, 0.0);
    for (i, &s) in samples.iter().enumerate() {
        let win = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
        re += win * s as f64 * (w * i as f64).cos();
        im += win * s as f64 * (w * i as f64).sin();
        wsum += win;
    }
    (re * re + im * im) / (wsum * wsum)
}
