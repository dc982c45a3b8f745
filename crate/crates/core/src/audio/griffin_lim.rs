use rustfft::num_complex::Complex;

use super::mel::{istft, stft, MelFilterbank};
use super::{FrontendConfig, MelSpectrogram, Result, Waveform, N_MELS};

/// Reconstructs a waveform of `T·hop` samples from a log-mel spectrogram.
///
/// Mel energies are spread back onto linear-frequency bins by inverting each
/// triangle's area weighting, then phases are estimated with `iterations`
/// rounds of Griffin-Lim starting from zero phase.
pub fn griffin_lim_invert(
    mel: &MelSpectrogram,
    cfg: &FrontendConfig,
    iterations: usize,
) -> Result<Waveform> {
    cfg.validate()?;
    let t = mel.n_frames();
    if t == 0 {
        return Waveform::new(Vec::new(), cfg.sample_rate);
    }
    let fb = MelFilterbank::new(cfg);
    let n_bins = fb.n_bins;
    let area: Vec<f64> = (0..N_MELS).map(|m| fb.filter(m).iter().sum()).collect();
    let coverage: Vec<f64> = (0..n_bins)
        .map(|k| (0..N_MELS).map(|m| fb.weight(m, k)).sum())
        .collect();

    let magnitudes: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let energy: Vec<f64> = mel.frame(i).iter().map(|&v| (v as f64).exp()).collect();
            (0..n_bins)
                .map(|k| {
                    if coverage[k] <= 0.0 {
                        return 0.0;
                    }
                    let p: f64 = (0..N_MELS)
                        .filter(|&m| area[m] > 0.0)
                        .map(|m| fb.weight(m, k) * energy[m] / area[m])
                        .sum::<f64>()
                        / coverage[k];
                    p.max(0.0).sqrt()
                })
                .collect()
        })
        .collect();

    let len = t * cfg.hop_length;
    let mut spec: Vec<Vec<Complex<f64>>> = magnitudes
        .iter()
        .map(|row| row.iter().map(|&m| Complex::new(m, 0.0)).collect())
        .collect();
    let mut signal = istft(&spec, cfg.n_fft, cfg.hop_length, len);
    for _ in 0..iterations {
        let est = stft(&signal, cfg.n_fft, cfg.hop_length);
        for (row, (est_row, mag)) in spec.iter_mut().zip(est.iter().zip(&magnitudes)) {
            for (v, (e, m)) in row.iter_mut().zip(est_row.iter().zip(mag)) {
                let n = e.norm();
                *v = if n > 1e-12 {
                    e * (*m / n)
                } else {
                    Complex::new(*m, 0.0)
                };
            }
        }
        signal = istft(&spec, cfg.n_fft, cfg.hop_length, len);
    }
    let samples = signal.into_iter().map(|s| s as f32).collect();
    Waveform::new(samples, cfg.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{mel_spectrogram, MelOrigin};
    use std::f64::consts::PI;

    fn tone(freq: f64, sr: u32, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin() as f32 * 0.5)
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    fn dominant_hz(x: &[f32], sr: u32) -> f64 {
        let n = x.len();
        let k = (1..n / 2)
            .max_by(|&a, &b| {
                let p = |k: usize| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (i, v) in x.iter().enumerate() {
                        let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                        re += *v as f64 * ang.cos();
                        im += *v as f64 * ang.sin();
                    }
                    re * re + im * im
                };
                p(a).total_cmp(&p(b))
            })
            .unwrap();
        k as f64 * sr as f64 / n as f64
    }

    #[test]
    fn empty_in_empty_out() {
        let cfg = FrontendConfig::for_rate(8000);
        let m = MelSpectrogram::empty(8000, 80, MelOrigin::Predicted);
        assert!(griffin_lim_invert(&m, &cfg, 10).unwrap().is_empty());
    }

    #[test]
    fn zero_iterations_has_correct_length() {
        let cfg = FrontendConfig::for_rate(8000);
        let m = mel_spectrogram(&tone(500.0, 8000, 800), &cfg).unwrap();
        let w = griffin_lim_invert(&m, &cfg, 0).unwrap();
        assert_eq!(w.len(), m.n_frames() * 80);
        assert!(w.samples.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn tone_frequency_survives_inversion() {
        let cfg = FrontendConfig::for_rate(8000);
        let m = mel_spectrogram(&tone(500.0, 8000, 1600), &cfg).unwrap();
        let w = griffin_lim_invert(&m, &cfg, 60).unwrap();
        let hz = dominant_hz(&w.samples, 8000);
        assert!((hz - 500.0).abs() <= 8000.0 / w.len() as f64, "{hz}");
    }
}
