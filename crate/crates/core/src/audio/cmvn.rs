use serde::{Deserialize, Serialize};

use super::{AudioError, MelSpectrogram, Result, N_MELS};

/// Per-channel mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl CmvnStats {
    pub fn identity() -> Self {
        CmvnStats {
            mean: vec![0.0; N_MELS],
            var: vec![1.0; N_MELS],
        }
    }

    /// Pooled statistics over all frames; variances below `var_floor` are raised
    /// to it (channels that never leave the log floor have zero variance).
    pub fn from_spectrograms<'a>(
        mels: impl IntoIterator<Item = &'a MelSpectrogram>,
        var_floor: f64,
    ) -> Self {
        let mut sum = vec![0.0f64; N_MELS];
        let mut sq = vec![0.0f64; N_MELS];
        let mut n = 0usize;
        for m in mels {
            for t in 0..m.n_frames() {
                for (c, &v) in m.frame(t).iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            n += m.n_frames();
        }
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let var = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / nf - m * m).max(var_floor))
            .collect();
        CmvnStats { mean, var }
    }

    fn check(&self) -> Result<()> {
        if self.mean.len() != N_MELS || self.var.len() != N_MELS {
            return Err(AudioError::InvalidStats(format!(
                "expected {N_MELS} channels, got {}/{}",
                self.mean.len(),
                self.var.len()
            )));
        }
        if let Some(c) = self.var.iter().position(|v| !(*v > 0.0)) {
            return Err(AudioError::InvalidStats(format!(
                "variance of channel {c} is {}",
                self.var[c]
            )));
        }
        Ok(())
    }
}

/// `(x - mean_c) / sqrt(var_c)` per channel.
pub fn cmvn_normalize(mel: &MelSpectrogram, stats: &CmvnStats) -> Result<MelSpectrogram> {
    stats.check()?;
    let mut out = mel.clone();
    let sd: Vec<f64> = stats.var.iter().map(|v| v.sqrt()).collect();
    for row in out.data_mut().chunks_mut(N_MELS) {
        for (c, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - stats.mean[c]) / sd[c]) as f32;
        }
    }
    Ok(out)
}

/// Inverse of [`cmvn_normalize`].
pub fn cmvn_denormalize(mel: &MelSpectrogram, stats: &CmvnStats) -> Result<MelSpectrogram> {
    stats.check()?;
    let mut out = mel.clone();
    for row in out.data_mut().chunks_mut(N_MELS) {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v as f64 * stats.var[c].sqrt() + stats.mean[c]) as f32;
        }
    }
    Ok(out)
}
