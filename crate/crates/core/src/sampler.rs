//! Reverse-process samplers: unconditional joint sampling and trajectory
//! prediction conditioned on an observed clip.

use eqdiff_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    add_posterior_noise, check_clip_shape, diffuse_rows, normal_vec, posterior_mean, reverse_step_batch, JointBatch,
    NoisePredictor,
};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::types::{StateActionPair, TrajectoryAction, VideoClipState};

/// Rows evaluated per network call.
const CHUNK: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Drop the ancestral noise of the action update and keep the posterior
    /// mean only.
    pub deterministic: bool,
    /// Keep `a_T, ..., a_0`.
    pub record_intermediates: bool,
    /// Reuse one state-noise draw for every step instead of a fresh draw per
    /// step.
    pub pin_state_noise: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledTrajectory {
    /// Final action, clipped to `[-1, 1]`.
    pub action: TrajectoryAction,
    /// `T + 1` snapshots from `a_T` down to the returned `a_0`.
    pub intermediates: Option<Vec<TrajectoryAction>>,
}

/// How the observed clip enters each reverse step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guidance {
    /// Re-noise the clip to level `t` at every step.
    ForwardDiffused,
    /// Feed the clean clip at every level.
    Naive,
}

fn clip_tensor(clips: &[VideoClipState]) -> Result<Tensor> {
    let first = &clips[0];
    let mut data = Vec::with_capacity(clips.len() * first.len());
    for c in clips {
        if !c.same_shape(first) {
            return Err(Error::shape("clips in a batch must share their shapes"));
        }
        data.extend(c.to_channels_first());
    }
    Ok(Tensor::new(&[clips.len(), first.frames() * 3, first.height(), first.width()], data)?)
}

fn to_actions(a: &Tensor, clip: bool) -> Vec<TrajectoryAction> {
    let rows = a.shape()[0];
    let len = a.numel() / rows.max(1);
    a.data()
        .chunks(len)
        .map(|r| {
            let t = TrajectoryAction::from_flat(r).expect("finite action");
            if clip {
                t.clipped()
            } else {
                t
            }
        })
        .collect()
}

fn sample_chunk<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    sched: &NoiseSchedule,
    clips: &[VideoClipState],
    guidance: Guidance,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<SampledTrajectory>> {
    let dims = net.dims();
    for c in clips {
        check_clip_shape(dims, c)?;
        c.validate_clean()?;
    }
    let s_star = clip_tensor(clips)?;
    let b = clips.len();
    let mut action = Tensor::new(&[b, 2 * dims.points], normal_vec(b * 2 * dims.points, rng))?;
    let mut snapshots: Vec<Vec<TrajectoryAction>> = vec![Vec::new(); b];
    let record = |snaps: &mut Vec<Vec<TrajectoryAction>>, a: &Tensor| {
        for (s, t) in snaps.iter_mut().zip(to_actions(a, false)) {
            s.push(t);
        }
    };
    if cfg.record_intermediates {
        record(&mut snapshots, &action);
    }
    let pinned = cfg.pin_state_noise.then(|| normal_vec(s_star.numel(), rng));
    for t in (1..=sched.steps()).rev() {
        let steps = vec![t; b];
        let state = match guidance {
            Guidance::Naive => s_star.clone(),
            Guidance::ForwardDiffused => {
                let eps = match &pinned {
                    Some(e) => e.clone(),
                    None => normal_vec(s_star.numel(), rng),
                };
                diffuse_rows(&s_star, &eps, &steps, sched)
            }
        };
        let (_, eps_a) = net.predict_noise(&state, &action, &steps);
        posterior_mean(action.data_mut(), eps_a.data(), t, sched);
        if !cfg.deterministic {
            add_posterior_noise(action.data_mut(), t, sched, rng);
        }
        if let Some(i) = action.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                what: "sampled action".into(),
                index: i / (2 * dims.points),
            });
        }
        if cfg.record_intermediates {
            record(&mut snapshots, &action);
        }
    }
    Ok(to_actions(&action, true)
        .into_iter()
        .zip(snapshots)
        .map(|(action, mut snaps)| {
            if let Some(last) = snaps.last_mut() {
                *last = action.clone();
            }
            SampledTrajectory {
                intermediates: cfg.record_intermediates.then_some(snaps),
                action,
            }
        })
        .collect())
}

/// Predicts one trajectory per clip. Clips are processed in fixed chunks,
/// so results depend only on the seed and the clip order.
pub fn sample_conditional_batch<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    sched: &NoiseSchedule,
    clips: &[VideoClipState],
    guidance: Guidance,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<SampledTrajectory>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(CHUNK) {
        out.extend(sample_chunk(net, sched, chunk, guidance, cfg, rng)?);
    }
    Ok(out)
}

/// Forward-diffusion-guided prediction for a single clip.
pub fn sample_conditional<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    sched: &NoiseSchedule,
    s_star: &VideoClipState,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampledTrajectory> {
    let mut out = sample_chunk(net, sched, std::slice::from_ref(s_star), Guidance::ForwardDiffused, cfg, rng)?;
    Ok(out.pop().expect("one clip"))
}

/// Conditions on the clean clip at every level.
pub fn sample_conditional_naive<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    sched: &NoiseSchedule,
    s_star: &VideoClipState,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampledTrajectory> {
    let mut out = sample_chunk(net, sched, std::slice::from_ref(s_star), Guidance::Naive, cfg, rng)?;
    Ok(out.pop().expect("one clip"))
}

/// Draws `count` joint samples from `x_T ~ N(0, I)`. Both parts are
/// clipped to `[-1, 1]`.
pub fn sample_unconditional<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    net: &P,
    sched: &NoiseSchedule,
    rng: &mut R,
    count: usize,
    deterministic: bool,
) -> Result<Vec<StateActionPair>> {
    let dims = net.dims();
    let mut out = Vec::with_capacity(count);
    let mut left = count;
    while left > 0 {
        let b = left.min(CHUNK);
        left -= b;
        let sl = dims.frames * 3 * dims.height * dims.width;
        let al = 2 * dims.points;
        let mut x = JointBatch {
            state: Tensor::new(&[b, dims.frames * 3, dims.height, dims.width], normal_vec(b * sl, rng))?,
            action: Tensor::new(&[b, al], normal_vec(b * al, rng))?,
        };
        for t in (1..=sched.steps()).rev() {
            x = reverse_step_batch(net, &x, t, sched, rng, deterministic)?;
        }
        for v in x.state.data_mut().iter_mut().chain(x.action.data_mut()) {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    what: "unconditional sample".into(),
                    index: out.len(),
                });
            }
            *v = v.clamp(-1.0, 1.0);
        }
        out.extend(x.to_pairs(0)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScheduleKind;
    use crate::diffusion::tests::{toy_pairs, Oracle};
    use crate::diffusion::{forward_diffuse, NoisePair};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_step_oracle_recovers_the_action() {
        let sched = NoiseSchedule::new(1, 1e-2, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = toy_pairs(1, &mut rng).pop().unwrap();
        let oracle = Oracle {
            x0: JointBatch::from_pairs(std::slice::from_ref(&x0)).unwrap(),
            sched: sched.clone(),
        };
        for cfg in [SamplerConfig::default(), SamplerConfig { deterministic: true, ..Default::default() }] {
            let got = sample_conditional(&oracle, &sched, &x0.state, &cfg, &mut rng).unwrap();
            for (a, b) in got.action.flat().iter().zip(x0.action.flat()) {
                assert!((a - b).abs() < 1e-4, "{a} {b}");
            }
        }
        // the oracle inverts whatever noise the sampler drew, so the naive
        // variant also lands on x_0 at T = 1
        let naive = sample_conditional_naive(&oracle, &sched, &x0.state, &SamplerConfig::default(), &mut rng).unwrap();
        for (a, b) in naive.action.flat().iter().zip(x0.action.flat()) {
            assert!((a - b).abs() < 1e-4);
        }
        let _ = forward_diffuse(&x0, 1, &NoisePair::zeros(96, 6), &sched).unwrap();
    }

    #[test]
    fn intermediates_and_determinism() {
        let sched = NoiseSchedule::new(7, 1e-2, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = toy_pairs(2, &mut rng);
        let oracle = Oracle {
            x0: JointBatch::from_pairs(&x0).unwrap(),
            sched: sched.clone(),
        };
        let cfg = SamplerConfig {
            deterministic: true,
            record_intermediates: true,
            ..Default::default()
        };
        let clips: Vec<_> = x0.iter().map(|p| p.state.clone()).collect();
        let run = |seed| sample_conditional_batch(&oracle, &sched, &clips, Guidance::ForwardDiffused, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = run(5);
        assert_eq!(a, run(5));
        for s in &a {
            let snaps = s.intermediates.as_ref().unwrap();
            assert_eq!(snaps.len(), 8);
            assert_eq!(snaps.last().unwrap(), &s.action);
            let n0: f32 = snaps[0].flat().iter().map(|v| v * v).sum::<f32>().sqrt();
            for snap in snaps {
                let n: f32 = snap.flat().iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!(n <= 10.0 * n0);
            }
            assert!(s.action.flat().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let sched = NoiseSchedule::new(3, 1e-2, 0.2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = toy_pairs(1, &mut rng);
        let oracle = Oracle {
            x0: JointBatch::from_pairs(&x0).unwrap(),
            sched: sched.clone(),
        };
        let wrong = VideoClipState::zeros(3, 4);
        assert!(matches!(
            sample_conditional(&oracle, &sched, &wrong, &SamplerConfig::default(), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unconditional_count_and_reproducibility() {
        let sched = NoiseSchedule::new(4, 1e-2, 0.2, ScheduleKind::Linear).unwrap();
        let x0 = toy_pairs(3, &mut ChaCha8Rng::seed_from_u64(2));
        let oracle = Oracle {
            x0: JointBatch::from_pairs(&x0).unwrap(),
            sched: sched.clone(),
        };
        assert!(sample_unconditional(&oracle, &sched, &mut ChaCha8Rng::seed_from_u64(0), 0, false).unwrap().is_empty());
        let run = || sample_unconditional(&oracle, &sched, &mut ChaCha8Rng::seed_from_u64(9), 3, false).unwrap();
        let a = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, run());
        assert!(a.iter().all(|p| p.noise_level == 0 && p.action.flat().iter().all(|v| v.abs() <= 1.0)));
    }
}
