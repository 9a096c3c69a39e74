use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

const MAX_CHANNELS: u16 = 8;

/// Read a RIFF/WAVE file and downmix it to mono by averaging channels.
///
/// Integer PCM (16, 24 or 32 bit) is scaled by `1 / 2^(bits-1)`; 32-bit float is
/// passed through. The waveform keeps the file's native sample rate.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > MAX_CHANNELS {
        return Err(Error::UnsupportedEncoding(format!(
            "{} channels (1..={MAX_CHANNELS} supported)",
            spec.channels
        )));
    }
    if spec.sample_rate == 0 {
        return Err(Error::CorruptHeader("sample rate is zero".into()));
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_hound(path, e))?
        }
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{bits}-bit {}",
                match fmt {
                    SampleFormat::Int => "integer PCM",
                    SampleFormat::Float => "float",
                }
            )))
        }
    };

    let channels = spec.channels as usize;
    if interleaved.len() < channels {
        return Err(Error::EmptyAudio);
    }
    let samples: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().sum::<f64>() / channels as f64) as f32)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Write a mono waveform as 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &w.samples {
        writer.write_sample(s).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::CorruptHeader(format!("truncated file: {io}"))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::CorruptHeader(msg.to_string()),
        hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported WAVE format".into()),
        other => Error::CorruptHeader(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_int16(path: &Path, channels: u16, samples: &[i16]) {
        let spec = WavSpec {
            channels,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn int16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_int16(&p, 1, &[0, 16384, -16384]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.sample_rate, 16000);
        let expected = [0.0, 0.5, -0.5];
        for (a, b) in w.samples.iter().zip(expected) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    #[test]
    fn identical_stereo_equals_mono() {
        let dir = tempfile::tempdir().unwrap();
        let mono = dir.path().join("m.wav");
        let stereo = dir.path().join("s.wav");
        let data = [100i16, -2000, 3000, 7];
        write_int16(&mono, 1, &data);
        let inter: Vec<i16> = data.iter().flat_map(|&s| [s, s]).collect();
        write_int16(&stereo, 2, &inter);
        assert_eq!(load_wav(&mono).unwrap(), load_wav(&stereo).unwrap());
    }

    #[test]
    fn antiphase_stereo_cancels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(1.0f32).unwrap();
            w.write_sample(-1.0f32).unwrap();
        }
        w.finalize().unwrap();
        let wave = load_wav(&p).unwrap();
        assert_eq!(wave.len(), 10);
        assert!(wave.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn float_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let w = Waveform::new(vec![0.25, -0.125, 0.999], 22050).unwrap();
        write_wav(&p, &w).unwrap();
        assert_eq!(load_wav(&p).unwrap(), w);
    }

    #[test]
    fn empty_file_is_empty_audio() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.wav");
        write_int16(&p, 1, &[]);
        assert!(matches!(load_wav(&p), Err(Error::EmptyAudio)));
    }

    #[test]
    fn compressed_format_rejected() {
        // Minimal RIFF header with format tag 2 (MS ADPCM).
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&36u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&32000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("adpcm.wav");
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_wav(&p), Err(Error::UnsupportedEncoding(_))));
    }

    #[test]
    fn garbage_is_corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.wav");
        std::fs::write(&p, b"not a wave file at all").unwrap();
        assert!(matches!(load_wav(&p), Err(Error::CorruptHeader(_))));
    }
}
