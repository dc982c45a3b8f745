use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FrontendConfig, MelOrigin, MelSpectrogram, Result, Waveform, N_MELS};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels x (n_fft/2 + 1)`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_bins: usize,
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let n_bins = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        let points: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; N_MELS * n_bins];
        for m in 0..N_MELS {
            let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
            for k in 0..n_bins {
                let f = bin_hz(k);
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        MelFilterbank {
            n_bins,
            weights,
            centers_hz: points[1..=N_MELS].to_vec(),
        }
    }

    pub fn weight(&self, mel: usize, bin: usize) -> f64 {
        self.weights[mel * self.n_bins + bin]
    }

    pub fn filter(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_bins..(mel + 1) * self.n_bins]
    }

    pub fn center_hz(&self, mel: usize) -> f64 {
        self.centers_hz[mel]
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        (0..N_MELS)
            .map(|m| self.filter(m).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

pub(crate) fn hann(n: usize) -> Vec<f64> {
    // periodic Hann
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Centred STFT with reflect padding: frame `t` is centred on sample `t·hop`
/// and there are `ceil(N / hop)` frames.
pub(crate) fn stft(signal: &[f64], n_fft: usize, hop: usize) -> Vec<Vec<Complex<f64>>> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let n_frames = n.div_ceil(hop);
    let window = hann(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let half = (n_fft / 2) as isize;
    (0..n_frames)
        .map(|t| {
            let start = (t * hop) as isize - half;
            let mut buf: Vec<Complex<f64>> = (0..n_fft)
                .map(|i| {
                    let idx = reflect(start + i as isize, n);
                    Complex::new(signal[idx] * window[i], 0.0)
                })
                .collect();
            fft.process(&mut buf);
            buf.truncate(n_fft / 2 + 1);
            buf
        })
        .collect()
}

/// Inverse of [`stft`] by windowed overlap-add, trimmed to `len` samples.
pub(crate) fn istft(frames: &[Vec<Complex<f64>>], n_fft: usize, hop: usize, len: usize) -> Vec<f64> {
    let window = hann(n_fft);
    let ifft = FftPlanner::new().plan_fft_inverse(n_fft);
    let half = n_fft / 2;
    let total = len + n_fft;
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    for (t, spec) in frames.iter().enumerate() {
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for (k, v) in spec.iter().enumerate() {
            buf[k] = *v;
            if k > 0 && k < n_fft - k {
                buf[n_fft - k] = v.conj();
            }
        }
        ifft.process(&mut buf);
        // Output index `t·hop - half + i`, shifted by `half` to stay non-negative.
        let base = t * hop;
        for i in 0..n_fft {
            let pos = base + i;
            if pos < total {
                out[pos] += buf[i].re / n_fft as f64 * window[i];
                norm[pos] += window[i] * window[i];
            }
        }
    }
    (0..len)
        .map(|i| {
            let pos = i + half;
            if norm[pos] > 1e-8 {
                out[pos] / norm[pos]
            } else {
                0.0
            }
        })
        .collect()
}

/// Power spectra `|X|²` of the centred STFT, one row per frame.
pub fn stft_power(wave: &Waveform, cfg: &FrontendConfig) -> Vec<Vec<f64>> {
    let x: Vec<f64> = wave.samples.iter().map(|&s| s as f64).collect();
    stft(&x, cfg.n_fft, cfg.hop_length)
        .into_iter()
        .map(|f| f.iter().map(|c| c.norm_sqr()).collect())
        .collect()
}

/// 80-channel log-mel spectrogram; `log(max(energy, log_floor))` per entry.
pub fn mel_spectrogram(wave: &Waveform, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if wave.is_empty() {
        return Ok(MelSpectrogram::empty(
            cfg.sample_rate,
            cfg.hop_length as u32,
            MelOrigin::Source,
        ));
    }
    let fb = MelFilterbank::new(cfg);
    let mut data = Vec::with_capacity(wave.len().div_ceil(cfg.hop_length) * N_MELS);
    for power in stft_power(wave, cfg) {
        data.extend(
            fb.apply(&power)
                .into_iter()
                .map(|e| e.max(cfg.log_floor).ln() as f32),
        );
    }
    MelSpectrogram::new(
        data,
        wave.sample_rate,
        cfg.hop_length as u32,
        MelOrigin::Source,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, sr: u32, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin() as f32 * 0.5)
            .collect();
        Waveform::new(s, sr).unwrap()
    }

    #[test]
    fn silence_maps_to_floor() {
        let cfg = FrontendConfig::for_rate(8000);
        assert_eq!(cfg.hop_length, 80);
        let mel = mel_spectrogram(&Waveform::new(vec![0.0; 8000], 8000).unwrap(), &cfg).unwrap();
        assert_eq!(mel.n_frames(), 100);
        let floor = (1e-10f64).ln() as f32;
        assert!(mel.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = FrontendConfig::for_rate(8000);
        for (n, t) in [(800usize, 10usize), (801, 11), (1, 1), (79, 1)] {
            let mel = mel_spectrogram(&Waveform::new(vec![0.1; n], 8000).unwrap(), &cfg).unwrap();
            assert_eq!(mel.n_frames(), t, "N = {n}");
        }
        let empty = mel_spectrogram(&Waveform::new(vec![], 8000).unwrap(), &cfg).unwrap();
        assert_eq!(empty.n_frames(), 0);
    }

    #[test]
    fn tone_lands_in_expected_channel() {
        let cfg = FrontendConfig::for_rate(16000);
        let fb = MelFilterbank::new(&cfg);
        // Oracle: the filter whose centre frequency is closest to 1 kHz.
        let expected = (0..N_MELS)
            .min_by(|&a, &b| {
                (fb.center_hz(a) - 1000.0)
                    .abs()
                    .total_cmp(&(fb.center_hz(b) - 1000.0).abs())
            })
            .unwrap();
        let mel = mel_spectrogram(&tone(1000.0, 16000, 16000), &cfg).unwrap();
        let mean = mel.mean_frame();
        let argmax = (0..N_MELS).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        assert_eq!(argmax, expected);
    }

    #[test]
    fn stft_istft_round_trip() {
        let x: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.05).sin()).collect();
        let frames = stft(&x, 200, 80);
        let y = istft(&frames, 200, 80, x.len());
        for (a, b) in x.iter().zip(&y).skip(100).take(800) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = FrontendConfig::for_rate(8000);
        assert!(cfg.validate().is_ok());
        cfg.hop_length = 500;
        assert!(cfg.validate().is_err());
        let mut cfg = FrontendConfig::for_rate(8000);
        cfg.f_max = 5000.0;
        assert!(cfg.validate().is_err());
    }
}
