use super::{AudioError, Result, Waveform};

/// Zero crossings of the sinc kernel on each side of the centre tap.
const HALF_ZEROS: usize = 16;
const ROLLOFF: f64 = 0.95;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Windowed-sinc polyphase resampler.
///
/// For an up/down ratio `L/M` (reduced), output sample `n` sits at source time
/// `n·M/L`; its fractional part takes one of `L` values, and each gets its own
/// Hann-windowed sinc filter normalised to unit DC gain.
pub fn resample(wave: &Waveform, target_sr: u32) -> Result<Waveform> {
    if target_sr == 0 {
        return Err(AudioError::InvalidArgument(
            "target sample rate must be positive".into(),
        ));
    }
    if target_sr == wave.sample_rate {
        return Ok(wave.clone());
    }
    let g = gcd(wave.sample_rate as u64, target_sr as u64);
    let up = target_sr as u64 / g;
    let down = wave.sample_rate as u64 / g;
    let n_in = wave.samples.len() as u64;
    let n_out = (n_in * up).div_ceil(down) as usize;

    // Cutoff relative to the source Nyquist.
    let cutoff = (up as f64 / down as f64).min(1.0) * ROLLOFF;
    let half = (HALF_ZEROS as f64 / cutoff).ceil() as isize;
    let taps = (2 * half + 1) as usize;
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut h: Vec<f64> = (0..taps)
                .map(|i| {
                    let offset = (i as isize - half) as f64 - frac;
                    let w = offset / (half as f64 + 1.0);
                    let window = 0.5 + 0.5 * (std::f64::consts::PI * w).cos();
                    cutoff * sinc(cutoff * offset) * window
                })
                .collect();
            let s: f64 = h.iter().sum();
            h.iter_mut().for_each(|v| *v /= s);
            h
        })
        .collect();

    let x = &wave.samples;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as isize;
        let phase = &phases[(pos % up) as usize];
        let mut acc = 0.0f64;
        for (i, h) in phase.iter().enumerate() {
            let k = base + i as isize - half;
            if k >= 0 && (k as usize) < x.len() {
                acc += x[k as usize] as f64 * h;
            }
        }
        out.push(acc as f32);
    }
    Waveform::new(out, target_sr)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Index of the largest |X_k| for k in 1..N/2, by direct O(N²) DFT.
    fn dominant_bin(x: &[f32]) -> usize {
        let n = x.len();
        (1..n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (t, v) in x.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    re += *v as f64 * a.cos();
                    im += *v as f64 * a.sin();
                }
                (k, re * re + im * im)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    fn sine(freq: f64, sr: u32, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32 * 0.5)
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    #[test]
    fn identity_is_bit_exact() {
        let w = sine(440.0, 16000, 1000);
        assert_eq!(resample(&w, 16000).unwrap(), w);
    }

    #[test]
    fn silence_stays_silent() {
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let r = resample(&w, 8000).unwrap();
        assert_eq!(r.samples.len(), 8000);
        assert!(r.samples.iter().all(|&s| s == 0.0));
        assert_eq!(r.sample_rate, 8000);
    }

    #[test]
    fn tone_keeps_its_frequency() {
        // 2048 output samples at 8 kHz -> 3.90625 Hz per bin, 440 Hz is bin 112.64
        let w = sine(440.0, 16000, 4096);
        let r = resample(&w, 8000).unwrap();
        assert_eq!(r.samples.len(), 2048);
        let bin = dominant_bin(&r.samples);
        let hz = bin as f64 * 8000.0 / 2048.0;
        assert!((hz - 440.0).abs() <= 8000.0 / 2048.0, "{hz}");
    }

    #[test]
    fn duration_is_preserved() {
        for (n, from, to) in [(1001usize, 16000u32, 8000u32), (333, 8000, 24000), (4410, 44100, 16000)] {
            let w = Waveform::new(vec![0.1; n], from).unwrap();
            let r = resample(&w, to).unwrap();
            let err = (r.duration_secs() - w.duration_secs()).abs();
            assert!(err <= 1.0 / to as f64, "{n} {from}->{to}: {err}");
        }
    }

    #[test]
    fn composition_is_idempotent_and_zero_rate_rejected() {
        let w = sine(300.0, 16000, 500);
        let once = resample(&w, 8000).unwrap();
        assert_eq!(resample(&once, 8000).unwrap(), once);
        assert!(resample(&w, 0).is_err());
    }

    #[test]
    fn downsampling_suppresses_aliases() {
        // 5 kHz is above the 4 kHz Nyquist of the target and must be filtered out.
        let w = sine(5000.0, 16000, 8000);
        let r = resample(&w, 8000).unwrap();
        let rms: f64 = (r.samples[200..3800].iter().map(|s| (*s as f64).powi(2)).sum::<f64>() / 3600.0).sqrt();
        assert!(rms < 0.01, "alias rms {rms}");
    }
}
