use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MelSpectrogram, N_MELS};

/// Frequency and time masking policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAugmentPolicy {
    pub freq_mask_width_max: usize,
    pub n_freq_masks: usize,
    pub time_mask_width_max: usize,
    pub n_time_masks: usize,
    pub mask_value: f32,
}

impl SpecAugmentPolicy {
    pub fn none() -> Self {
        SpecAugmentPolicy {
            freq_mask_width_max: 0,
            n_freq_masks: 0,
            time_mask_width_max: 0,
            n_time_masks: 0,
            mask_value: 0.0,
        }
    }

    /// Two frequency masks of up to 27 bins and two time masks of up to 5% of
    /// `n_frames` (at least one frame).
    pub fn basic(n_frames: usize) -> Self {
        SpecAugmentPolicy {
            freq_mask_width_max: 27,
            n_freq_masks: 2,
            time_mask_width_max: ((n_frames as f64 * 0.05) as usize).max(1),
            n_time_masks: 2,
            mask_value: 0.0,
        }
    }

    /// Upper bound on the number of entries any application can modify.
    pub fn max_modified(&self, n_frames: usize) -> usize {
        self.n_freq_masks * self.freq_mask_width_max * n_frames
            + self.n_time_masks * self.time_mask_width_max * N_MELS
    }
}

/// Applies randomly placed frequency then time masks, deterministic in `seed`.
pub fn spec_augment(mel: &MelSpectrogram, policy: &SpecAugmentPolicy, seed: u64) -> MelSpectrogram {
    let mut out = mel.clone();
    let t = mel.n_frames();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = out.data_mut();
    for _ in 0..policy.n_freq_masks {
        let w = rng.gen_range(0..=policy.freq_mask_width_max.min(N_MELS));
        let f0 = rng.gen_range(0..=N_MELS - w);
        for frame in 0..t {
            for c in f0..f0 + w {
                data[frame * N_MELS + c] = policy.mask_value;
            }
        }
    }
    for _ in 0..policy.n_time_masks {
        let w = rng.gen_range(0..=policy.time_mask_width_max.min(t));
        let t0 = rng.gen_range(0..=t - w);
        for frame in t0..t0 + w {
            data[frame * N_MELS..(frame + 1) * N_MELS].fill(policy.mask_value);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::MelOrigin;
    use proptest::prelude::*;

    fn ones(t: usize) -> MelSpectrogram {
        MelSpectrogram::new(vec![1.0; t * N_MELS], 8000, 80, MelOrigin::Source).unwrap()
    }

    #[test]
    fn empty_policy_is_identity() {
        let m = ones(10);
        assert_eq!(spec_augment(&m, &SpecAugmentPolicy::none(), 3), m);
    }

    #[test]
    fn single_wide_freq_mask_zeroes_whole_columns() {
        let policy = SpecAugmentPolicy {
            freq_mask_width_max: 80,
            n_freq_masks: 1,
            ..SpecAugmentPolicy::none()
        };
        for seed in 0..20 {
            let out = spec_augment(&ones(10), &policy, seed);
            let zero_cols: Vec<usize> = (0..N_MELS)
                .filter(|&c| (0..10).all(|t| out.get(t, c) == 0.0))
                .collect();
            assert!(zero_cols.len() <= 80);
            for c in 0..N_MELS {
                if !zero_cols.contains(&c) {
                    assert!((0..10).all(|t| out.get(t, c) == 1.0));
                }
            }
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let m = ones(40);
        let p = SpecAugmentPolicy::basic(40);
        assert_eq!(spec_augment(&m, &p, 11), spec_augment(&m, &p, 11));
    }

    proptest! {
        #[test]
        fn modified_mass_bound(t in 0usize..60, seed in any::<u64>(), nf in 0usize..3, wf in 0usize..30, nt in 0usize..3, wt in 0usize..8) {
            let m = MelSpectrogram::new(
                (0..t * N_MELS).map(|i| 1.0 + i as f32).collect(), 8000, 80, MelOrigin::Source).unwrap();
            let p = SpecAugmentPolicy { freq_mask_width_max: wf, n_freq_masks: nf, time_mask_width_max: wt, n_time_masks: nt, mask_value: 0.0 };
            let out = spec_augment(&m, &p, seed);
            let changed = m.data().iter().zip(out.data()).filter(|(a, b)| a != b).count();
            prop_assert!(changed <= p.max_modified(t));
            for (a, b) in m.data().iter().zip(out.data()) {
                prop_assert!(a == b || *b == 0.0);
            }
        }
    }
}
