//! Synthetic feature sequences: keyword-like templates embedded in longer
//! multichannel "utterances" with time warping, recording gain and noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

/// Knobs of the sequence generator. The degenerate settings (unit warp and
/// gains, zero noise) reproduce templates exactly, which the tests rely on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceGenConfig {
    pub channels: usize,
    pub target_frames: usize,
    /// Inclusive range of per-class template lengths, in frames.
    pub template_frames: (usize, usize),
    /// Inclusive range of time-warp factors applied to embedded instances.
    pub warp_range: (f64, f64),
    /// Std of the additive noise on embedded and exemplar instances.
    pub insert_noise_std: f64,
    /// Per-recording amplitude gain range, applied to a whole sequence.
    pub amp_range: (f64, f64),
    /// Per-recording, per-channel gain jitter range.
    pub channel_gain_range: (f64, f64),
    /// Distractor templates of other classes placed in every target.
    pub distractors: usize,
}

impl Default for SequenceGenConfig {
    fn default() -> Self {
        SequenceGenConfig {
            channels: 16,
            target_frames: 200,
            template_frames: (28, 40),
            warp_range: (0.8, 1.25),
            insert_noise_std: 0.15,
            amp_range: (0.6, 1.4),
            channel_gain_range: (0.7, 1.3),
            distractors: 2,
        }
    }
}

impl SequenceGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.target_frames == 0 {
            return Err(Error::invalid("sequence extents must be positive".to_string()));
        }
        if self.template_frames.0 == 0 || self.template_frames.0 > self.template_frames.1 {
            return Err(Error::invalid(format!(
                "bad template length range {:?}",
                self.template_frames
            )));
        }
        if !(self.warp_range.0 > 0.0) || self.warp_range.0 > self.warp_range.1 {
            return Err(Error::invalid(format!("bad warp range {:?}", self.warp_range)));
        }
        if self.insert_noise_std < 0.0 {
            return Err(Error::invalid("noise std must be nonnegative".to_string()));
        }
        Ok(())
    }

    /// Degenerate settings for exactness tests: unit warp, unit gains, no
    /// noise, no distractors.
    pub fn exact() -> Self {
        SequenceGenConfig {
            warp_range: (1.0, 1.0),
            insert_noise_std: 0.0,
            amp_range: (1.0, 1.0),
            channel_gain_range: (1.0, 1.0),
            distractors: 0,
            ..SequenceGenConfig::default()
        }
    }
}

/// A target sequence plus, for positives, the class and frame interval of the
/// embedded instance.
#[derive(Clone, Debug)]
pub struct SequenceTarget {
    /// `[channels, frames]`
    pub features: Tensor,
    /// `(class_id, (start_frame, length))`
    pub embedded: Option<(u64, (usize, usize))>,
}

/// Per-class template length, drawn deterministically from the class seed.
pub fn template_len(class_seed: u64, config: &SequenceGenConfig) -> usize {
    let (lo, hi) = config.template_frames;
    let mut rng = rng_from(derive_seed(class_seed, "template-len", 0));
    rng.gen_range(lo..=hi)
}

/// The canonical `[channels, len]` template of a class: a sum of a few
/// sinusoids per channel with class-specific frequencies and phases.
pub fn class_template(class_seed: u64, config: &SequenceGenConfig) -> Tensor {
    let len = template_len(class_seed, config);
    let mut rng = rng_from(derive_seed(class_seed, "template", 0));
    let mut values = vec![0.0f64; config.channels * len];
    for ch in 0..config.channels {
        let offset = rng.gen_range(-0.3..0.3);
        let parts: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.25..1.0),
                    rng.gen_range(0.15..1.2),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        for t in 0..len {
            let mut v = offset;
            for &(amp, freq, phase) in &parts {
                v += amp * (freq * t as f64 + phase).sin();
            }
            values[ch * len + t] = v;
        }
    }
    Tensor::new(vec![config.channels, len], values).expect("fixed extents")
}

/// Linear-interpolation resampling of a `[c, len]` sequence to `new_len`
/// frames. Unit-factor resampling lands on integer positions and reproduces
/// the input exactly.
pub fn warp_resample(template: &Tensor, new_len: usize) -> Tensor {
    let c = template.shape()[0];
    let len = template.shape()[1];
    let mut values = vec![0.0f64; c * new_len];
    for ch in 0..c {
        for t in 0..new_len {
            let pos = if new_len > 1 {
                t as f64 * (len - 1) as f64 / (new_len - 1) as f64
            } else {
                0.0
            };
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            let frac = pos - lo as f64;
            values[ch * new_len + t] =
                template.values()[ch * len + lo] * (1.0 - frac) + template.values()[ch * len + hi] * frac;
        }
    }
    Tensor::new(vec![c, new_len], values).expect("fixed extents")
}

fn apply_gains(features: &mut Tensor, amp: f64, gains: &[f64]) {
    let c = features.shape()[0];
    let len = features.shape()[1];
    let vals = features.values_mut();
    for ch in 0..c {
        let g = amp * gains[ch];
        for t in 0..len {
            vals[ch * len + t] *= g;
        }
    }
}

fn draw_gains(rng: &mut rand_chacha::ChaCha8Rng, config: &SequenceGenConfig) -> (f64, Vec<f64>) {
    let amp = rng.gen_range(config.amp_range.0..=config.amp_range.1);
    let gains = (0..config.channels)
        .map(|_| rng.gen_range(config.channel_gain_range.0..=config.channel_gain_range.1))
        .collect();
    (amp, gains)
}

/// A warped, noised copy of the class template under its own recording gain:
/// the exemplar the model is handed at evaluation time.
pub fn sequence_instance(class_seed: u64, instance_seed: u64, config: &SequenceGenConfig) -> Tensor {
    let template = class_template(class_seed, config);
    let mut rng = rng_from(derive_seed(class_seed, "seq-instance", instance_seed));
    let warp = rng.gen_range(config.warp_range.0..=config.warp_range.1);
    let new_len = ((template.shape()[1] as f64 * warp).round() as usize).max(1);
    let mut inst = warp_resample(&template, new_len);
    if config.insert_noise_std > 0.0 {
        let noise = Normal::new(0.0, config.insert_noise_std).expect("positive std");
        for v in inst.values_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let (amp, gains) = draw_gains(&mut rng, config);
    apply_gains(&mut inst, amp, gains);
    inst
}

/// Builds one target sequence: smooth structured background, distractor
/// templates of other classes, and, when `positive_class` is set, one warped
/// noisy instance of that class at a random recorded interval. The whole
/// recording is then scaled by its amplitude and channel gains.
pub fn gen_sequence_target(
    positive_class: Option<u64>,
    distractor_classes: &[u64],
    seed: u64,
    config: &SequenceGenConfig,
) -> Result<SequenceTarget> {
    config.validate()?;
    let frames = config.target_frames;
    let mut rng = rng_from(derive_seed(seed, "seq-target", 0));

    // Smooth background: box-filtered white noise plus a slow drift.
    let mut values = vec![0.0f64; config.channels * frames];
    let normal = Normal::new(0.0, 1.0).expect("positive std");
    for ch in 0..config.channels {
        let white: Vec<f64> = (0..frames).map(|_| normal.sample(&mut rng)).collect();
        let drift_freq = rng.gen_range(0.01..0.05);
        let drift_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for t in 0..frames {
            let lo = t.saturating_sub(2);
            let hi = (t + 2).min(frames - 1);
            let mean: f64 = white[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            values[ch * frames + t] =
                0.35 * mean + 0.25 * (drift_freq * t as f64 + drift_phase).sin();
        }
    }
    let mut features = Tensor::new(vec![config.channels, frames], values)?;

    let mut occupied: Vec<(usize, usize)> = Vec::new();
    let mut place = |features: &mut Tensor,
                     rng: &mut rand_chacha::ChaCha8Rng,
                     class_seed: u64,
                     occupied: &mut Vec<(usize, usize)>|
     -> Result<Option<(usize, usize)>> {
        let template = class_template(class_seed, config);
        let base_len = template.shape()[1];
        if base_len >= frames {
            return Err(Error::invalid(format!(
                "template of {base_len} frames does not fit a {frames}-frame target"
            )));
        }
        let warp = rng.gen_range(config.warp_range.0..=config.warp_range.1);
        let len = ((base_len as f64 * warp).round() as usize).clamp(1, frames);
        let mut copy = warp_resample(&template, len);
        if config.insert_noise_std > 0.0 {
            let noise = Normal::new(0.0, config.insert_noise_std).expect("positive std");
            for v in copy.values_mut() {
                *v += noise.sample(rng);
            }
        }
        for _ in 0..32 {
            let start = rng.gen_range(0..=frames - len);
            let clash = occupied.iter().any(|&(s, l)| start < s + l && s < start + len);
            if clash {
                continue;
            }
            let vals = features.values_mut();
            for ch in 0..config.channels {
                for t in 0..len {
                    vals[ch * frames + start + t] = copy.values()[ch * len + t];
                }
            }
            occupied.push((start, len));
            return Ok(Some((start, len)));
        }
        Ok(None)
    };

    let embedded = match positive_class {
        Some(class_seedable) => {
            let interval = place(&mut features, &mut rng, class_seedable, &mut occupied)?
                .ok_or_else(|| Error::invalid("could not place the embedded instance".to_string()))?;
            Some((class_seedable, interval))
        }
        None => None,
    };
    for &d in distractor_classes.iter().take(config.distractors) {
        // Best effort: skip a distractor when no free slot is found.
        let _ = place(&mut features, &mut rng, d, &mut occupied)?;
    }

    let (amp, gains) = draw_gains(&mut rng, config);
    apply_gains(&mut features, amp, gains);
    Ok(SequenceTarget { features, embedded })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_targets_have_no_embedded_interval() {
        let cfg = SequenceGenConfig::default();
        let t = gen_sequence_target(None, &[11, 12], 3, &cfg).unwrap();
        assert!(t.embedded.is_none());
        assert_eq!(t.features.shape(), &[16, 200]);
    }

    #[test]
    fn degenerate_settings_embed_an_exact_copy() {
        let cfg = SequenceGenConfig::exact();
        let class_seed = 21;
        let t = gen_sequence_target(Some(class_seed), &[], 5, &cfg).unwrap();
        let (cls, (start, len)) = t.embedded.unwrap();
        assert_eq!(cls, class_seed);
        let template = class_template(class_seed, &cfg);
        assert_eq!(len, template.shape()[1]);
        let frames = cfg.target_frames;
        for ch in 0..cfg.channels {
            for k in 0..len {
                let got = t.features.values()[ch * frames + start + k];
                let want = template.values()[ch * len + k];
                assert_eq!(got, want, "channel {ch} frame {k}");
            }
        }
    }

    #[test]
    fn recorded_interval_length_follows_the_warp() {
        let cfg = SequenceGenConfig { warp_range: (1.25, 1.25), insert_noise_std: 0.0, ..SequenceGenConfig::exact() };
        let class_seed = 4;
        let t = gen_sequence_target(Some(class_seed), &[], 8, &cfg).unwrap();
        let (_, (_, len)) = t.embedded.unwrap();
        let base = template_len(class_seed, &cfg);
        assert_eq!(len, (base as f64 * 1.25).round() as usize);
    }

    #[test]
    fn oversized_template_is_rejected() {
        let cfg = SequenceGenConfig {
            target_frames: 30,
            template_frames: (40, 40),
            ..SequenceGenConfig::exact()
        };
        assert!(gen_sequence_target(Some(1), &[], 0, &cfg).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SequenceGenConfig::default();
        let a = gen_sequence_target(Some(2), &[7, 8], 123, &cfg).unwrap();
        let b = gen_sequence_target(Some(2), &[7, 8], 123, &cfg).unwrap();
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.features), bits(&b.features));
        assert_eq!(a.embedded, b.embedded);
    }
}
