//! Audio input and the mel/PCEN front end.

mod frontend;
mod resample;
mod wav;

pub use frontend::{
    mel_center_frequencies, mel_filterbank, mel_pcen, pcen, read_pcen_dump, write_pcen_dump,
    FrontendConfig, PcenConfig, PcenGram,
};
pub use resample::resample;
pub use wav::{load_wav, write_wav};

use crate::error::{Error, Result};

/// Mono signal at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteValue { row: i, col: 0 });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
