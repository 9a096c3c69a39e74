use super::Waveform;

/// Zero crossings of the prototype sinc on each side of the kernel centre.
const ZERO_CROSSINGS: f64 = 24.0;
/// Fraction of the output Nyquist frequency kept in the passband.
const ROLLOFF: f64 = 0.94;
const KAISER_BETA: f64 = 9.0;
/// Above this many phases the kernel is evaluated per output sample.
const MAX_TABLE_PHASES: u64 = 2048;

/// Band-limited rate conversion by a windowed-sinc polyphase filter.
///
/// Output length is `round(len * target / native)`. Each filter phase is
/// normalised to unit DC gain. Samples outside the input are treated as zero.
pub fn resample(w: &Waveform, target_rate: u32) -> Waveform {
    assert!(target_rate > 0, "target rate must be positive");
    if w.sample_rate == target_rate || w.samples.is_empty() {
        return w.clone();
    }
    let g = gcd(w.sample_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = w.sample_rate as u64 / g;

    let n_in = w.samples.len() as u64;
    let n_out = ((n_in * up + down / 2) / down) as usize;

    let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);
    let half = (ZERO_CROSSINGS / cutoff).ceil() as i64;
    let taps = (2 * half) as usize;
    let input: Vec<f64> = w.samples.iter().map(|&s| s as f64).collect();

    let table = (up <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|p| phase_kernel(p as f64 / up as f64, half, cutoff))
            .collect::<Vec<_>>()
    });

    let mut out = Vec::with_capacity(n_out);
    let mut scratch = vec![0.0; taps];
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let phase = pos % up;
        let kernel: &[f64] = match &table {
            Some(t) => &t[phase as usize],
            None => {
                scratch = phase_kernel(phase as f64 / up as f64, half, cutoff);
                &scratch
            }
        };
        let mut acc = 0.0;
        for (j, &k) in kernel.iter().enumerate() {
            let idx = base - half + 1 + j as i64;
            if idx >= 0 && (idx as usize) < input.len() {
                acc += k * input[idx as usize];
            }
        }
        out.push(acc as f32);
    }

    Waveform {
        samples: out,
        sample_rate: target_rate,
    }
}

/// Taps for input offsets `-half+1 ..= half` relative to the base sample,
/// for an output instant `frac` samples after the base.
fn phase_kernel(frac: f64, half: i64, cutoff: f64) -> Vec<f64> {
    let i0_beta = bessel_i0(KAISER_BETA);
    let mut k: Vec<f64> = (-half + 1..=half)
        .map(|j| {
            let tau = j as f64 - frac;
            let u = tau / half as f64;
            if u.abs() >= 1.0 {
                return 0.0;
            }
            let win = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta;
            cutoff * sinc(cutoff * tau) * win
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, rate: u32, n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn identity_when_rates_match() {
        let w = Waveform::new(sine(300.0, 16000, 500), 16000).unwrap();
        assert_eq!(resample(&w, 16000), w);
    }

    #[test]
    fn dc_preserved() {
        let w = Waveform::new(vec![1.0; 8000], 32000).unwrap();
        let out = resample(&w, 16000);
        assert_eq!(out.len(), 4000);
        for &s in &out.samples[200..3800] {
            assert!((s as f64 - 1.0).abs() < 1e-3, "{s}");
        }
    }

    #[test]
    fn sine_downsampled_matches_analytic() {
        let n = 32000;
        let w = Waveform::new(sine(440.0, 32000, n), 32000).unwrap();
        let out = resample(&w, 16000);
        assert_eq!(out.len(), 16000);
        let expected = sine(440.0, 16000, 16000);
        for i in 500..15500 {
            assert!(
                (out.samples[i] - expected[i]).abs() < 0.01,
                "sample {i}: {} vs {}",
                out.samples[i],
                expected[i]
            );
        }
    }

    #[test]
    fn output_length_rounds() {
        let w = Waveform::new(vec![0.0; 1001], 44100).unwrap();
        let out = resample(&w, 16000);
        assert_eq!(out.len(), (1001.0f64 * 16000.0 / 44100.0).round() as usize);
    }

    #[test]
    fn up_then_down_roundtrip() {
        let n = 8000;
        let x = sine(1000.0, 16000, n);
        let w = Waveform::new(x.clone(), 16000).unwrap();
        let back = resample(&resample(&w, 48000), 16000);
        assert_eq!(back.len(), n);
        for i in 300..n - 300 {
            assert!((back.samples[i] - x[i]).abs() < 1e-3, "sample {i}");
        }
    }

    #[test]
    fn large_phase_count_path() {
        // 16001/16000 forces per-sample kernel evaluation.
        let w = Waveform::new(vec![1.0; 4000], 16000).unwrap();
        let out = resample(&w, 16001);
        assert_eq!(out.len(), 4000);
        assert!((out.samples[2000] - 1.0).abs() < 1e-3);
    }
}
