use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// Per-channel energy normalisation constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcenConfig {
    /// IIR smoothing coefficient `s` of the running energy estimate.
    pub smoothing: f64,
    /// Gain exponent `alpha`.
    pub exponent: f64,
    /// Bias `delta`.
    pub bias: f64,
    /// Root compression `r`.
    pub root: f64,
    /// Floor `eps` added to the smoothed energy.
    pub floor: f64,
}

impl Default for PcenConfig {
    fn default() -> Self {
        Self {
            smoothing: 0.025,
            exponent: 0.98,
            bias: 2.0,
            root: 0.5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub target_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub n_mels: usize,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub pcen: PcenConfig,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            target_rate: 16000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            n_mels: 128,
            fft_size: 1024,
            fmin: 0.0,
            fmax: 8000.0,
            pcen: PcenConfig::default(),
        }
    }
}

impl FrontendConfig {
    pub fn frame_length(&self) -> usize {
        (self.frame_length_ms * self.target_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        (self.frame_shift_ms * self.target_rate as f64 / 1000.0).round() as usize
    }

    /// Number of frames produced for a signal of `len` samples (no centring).
    pub fn n_frames(&self, len: usize) -> usize {
        let fl = self.frame_length();
        if len < fl {
            0
        } else {
            1 + (len - fl) / self.frame_shift()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.target_rate == 0 {
            return bad("target_rate must be positive");
        }
        if self.frame_shift() == 0 || self.frame_shift_ms > self.frame_length_ms {
            return bad("need 0 < frame_shift <= frame_length");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1");
        }
        if self.fft_size < self.frame_length() {
            return bad("fft_size must cover one frame");
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin) {
            return bad("need 0 <= fmin < fmax");
        }
        let p = &self.pcen;
        if !(p.exponent > 0.0 && p.exponent <= 1.0) {
            return bad("pcen exponent must be in (0, 1]");
        }
        if !(p.root > 0.0 && p.floor > 0.0) {
            return bad("pcen root and floor must be positive");
        }
        if !(p.smoothing > 0.0 && p.smoothing <= 1.0) {
            return bad("pcen smoothing must be in (0, 1]");
        }
        Ok(())
    }
}

/// PCEN time-frequency matrix, `n_frames x n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcenGram {
    pub values: Array2<f64>,
    pub frame_shift_ms: f64,
}

impl PcenGram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels + 2` band edges equally spaced on the mel scale.
fn mel_edges(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|j| mel_to_hz(lo + (hi - lo) * j as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Centre frequency (Hz) of every mel filter.
pub fn mel_center_frequencies(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let edges = mel_edges(n_mels, fmin, fmax);
    edges[1..=n_mels].to_vec()
}

/// Triangular filters with unit peak, `n_mels x (fft_size/2 + 1)`.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Array2<f64> {
    let n_bins = cfg.fft_size / 2 + 1;
    let edges = mel_edges(cfg.n_mels, cfg.fmin, cfg.fmax);
    let bin_hz = cfg.target_rate as f64 / cfg.fft_size as f64;
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, b)| {
        let f = b as f64 * bin_hz;
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > lo && f <= c {
            (f - lo) / (c - lo)
        } else if f > c && f < hi {
            (hi - f) / (hi - c)
        } else {
            0.0
        }
    })
}

/// PCEN over a nonnegative energy matrix `frames x channels`.
pub fn pcen(energy: &Array2<f64>, p: &PcenConfig) -> Array2<f64> {
    let (n_frames, n_ch) = energy.dim();
    let mut out = Array2::zeros((n_frames, n_ch));
    let offset = p.bias.powf(p.root);
    for c in 0..n_ch {
        let mut m = energy[[0, c]];
        for t in 0..n_frames {
            let e = energy[[t, c]];
            if t > 0 {
                m = (1.0 - p.smoothing) * m + p.smoothing * e;
            }
            let gain = (p.floor + m).powf(p.exponent);
            out[[t, c]] = (e / gain + p.bias).powf(p.root) - offset;
        }
    }
    out
}

/// Hann-windowed power STFT, mel filterbank and PCEN.
pub fn mel_pcen(w: &Waveform, cfg: &FrontendConfig) -> Result<PcenGram> {
    cfg.validate()?;
    if w.sample_rate != cfg.target_rate {
        return Err(Error::SampleRateMismatch {
            got: w.sample_rate,
            expected: cfg.target_rate,
        });
    }
    let frame_len = cfg.frame_length();
    let hop = cfg.frame_shift();
    let n_frames = cfg.n_frames(w.len());
    if n_frames == 0 {
        return Err(Error::TooShort {
            samples: w.len(),
            needed: frame_len,
        });
    }

    // periodic Hann
    let window: Vec<f64> = (0..frame_len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / frame_len as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg);
    let n_bins = cfg.fft_size / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);

    let mut mel = Array2::zeros((n_frames, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; n_bins];
    for t in 0..n_frames {
        let start = t * hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (b, &win)) in buf.iter_mut().zip(&window).enumerate() {
            b.re = w.samples[start + i] as f64 * win;
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let row = fb.row(m);
            mel[[t, m]] = row.iter().zip(&power).map(|(a, b)| a * b).sum();
        }
    }

    Ok(PcenGram {
        values: pcen(&mel, &cfg.pcen),
        frame_shift_ms: cfg.frame_shift_ms,
    })
}

const PCEN_MAGIC: &[u8; 4] = b"PCEN";

/// Binary dump: `"PCEN"`, u32 frames, u32 mels, u32 reserved, then f32 LE row-major.
pub fn write_pcen_dump(path: impl AsRef<Path>, gram: &PcenGram) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(16 + 4 * gram.values.len());
    bytes.extend_from_slice(PCEN_MAGIC);
    bytes.extend_from_slice(&(gram.n_frames() as u32).to_le_bytes());
    bytes.extend_from_slice(&(gram.n_mels() as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for v in gram.values.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

/// Read a dump written by [`write_pcen_dump`]. Frame shift is not stored and is supplied by the caller.
pub fn read_pcen_dump(path: impl AsRef<Path>, frame_shift_ms: f64) -> Result<PcenGram> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != PCEN_MAGIC {
        return Err(Error::CorruptHeader("missing PCEN magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    if bytes.len() != 16 + 4 * rows * cols {
        return Err(Error::CorruptHeader(format!(
            "payload is {} bytes, header says {rows}x{cols}",
            bytes.len() - 16
        )));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(PcenGram {
        values: Array2::from_shape_vec((rows, cols), data).expect("shape checked"),
        frame_shift_ms,
    })
}
