use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Time and feature band masking without time warping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpecAugConfig {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub feat_masks: usize,
    pub max_feat_width: usize,
}

impl SpecAugConfig {
    pub fn is_identity(&self) -> bool {
        self.time_masks == 0 && self.feat_masks == 0
    }
}

/// Zeroes random bands; widths are clipped to the utterance size.
pub fn spec_augment(features: &Tensor, cfg: &SpecAugConfig, rng: &mut Rng) -> Tensor {
    let mut out = features.clone();
    if cfg.is_identity() {
        return out;
    }
    let (t, d) = (features.rows(), features.cols());
    let data = out.data_mut();
    for _ in 0..cfg.time_masks {
        let w = rng.random_range(0..=cfg.max_time_width.min(t));
        let start = rng.random_range(0..=t - w);
        data[start * d..(start + w) * d].iter_mut().for_each(|x| *x = 0.0);
    }
    for _ in 0..cfg.feat_masks {
        let w = rng.random_range(0..=cfg.max_feat_width.min(d));
        let start = rng.random_range(0..=d - w);
        for row in data.chunks_mut(d) {
            row[start..start + w].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    out
}
