//! Trajectory errors in pixels: ADE, FDE and the discrete Fréchet
//! distance, plus per-split aggregation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::denormalize_trajectory;
use crate::types::{TrajectoryAction, VideoClipState};

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_equal(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "prediction has {} points but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::shape("trajectories must not be empty"));
    }
    Ok(())
}

/// Mean pointwise L2 distance.
pub fn ade_points(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_equal(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64)
}

/// L2 distance between the final points.
pub fn fde_points(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_equal(pred, gt)?;
    Ok(dist(*pred.last().unwrap(), *gt.last().unwrap()))
}

/// Discrete Fréchet distance between two polylines.
pub fn frechet_points(p: &[[f64; 2]], q: &[[f64; 2]]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::shape("Fréchet distance needs non-empty sequences"));
    }
    let m = q.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            let d = dist(pi, qj);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// ADE in pixels of a `height x width` image.
pub fn ade(pred: &TrajectoryAction, gt: &TrajectoryAction, height: usize, width: usize) -> Result<f64> {
    ade_points(&denormalize_trajectory(pred, height, width), &denormalize_trajectory(gt, height, width))
}

pub fn fde(pred: &TrajectoryAction, gt: &TrajectoryAction, height: usize, width: usize) -> Result<f64> {
    fde_points(&denormalize_trajectory(pred, height, width), &denormalize_trajectory(gt, height, width))
}

pub fn frechet(pred: &TrajectoryAction, gt: &TrajectoryAction, height: usize, width: usize) -> Result<f64> {
    frechet_points(&denormalize_trajectory(pred, height, width), &denormalize_trajectory(gt, height, width))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ade: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fde: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Population mean and standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub failures: usize,
    pub ade: Summary,
    pub fde: Summary,
    pub fd: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub records: Vec<ClipMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    /// Aggregates per-clip records; failed clips are counted but excluded.
    pub fn from_records(split: &str, mut records: Vec<ClipMetrics>) -> Self {
        records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        let ok: Vec<&ClipMetrics> = records.iter().filter(|r| r.error.is_none()).collect();
        let col = |f: fn(&ClipMetrics) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
        let aggregate = Aggregate {
            count: ok.len(),
            failures: records.len() - ok.len(),
            ade: Summary::of(&col(|r| r.ade)),
            fde: Summary::of(&col(|r| r.fde)),
            fd: Summary::of(&col(|r| r.fd)),
        };
        Self {
            split: split.to_string(),
            records,
            aggregate,
        }
    }

    /// Line-delimited JSON: one record per clip, then the aggregate.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain record"));
            out.push('\n');
        }
        let agg = serde_json::json!({ "split": self.split, "aggregate": self.aggregate });
        out.push_str(&agg.to_string());
        out.push('\n');
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// A clip with its ground-truth future.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub clip_id: String,
    pub state: VideoClipState,
    pub gt: TrajectoryAction,
}

/// Scores precomputed predictions against labeled clips in pixels.
pub fn score(split: &str, clips: &[LabeledClip], preds: &[Result<TrajectoryAction>]) -> MetricsReport {
    let records = clips
        .iter()
        .zip(preds)
        .map(|(c, p)| {
            let (h, w) = (c.state.height(), c.state.width());
            let metrics = p.as_ref().map_err(|e| e.to_string()).and_then(|p| {
                Ok((
                    ade(p, &c.gt, h, w).map_err(|e| e.to_string())?,
                    fde(p, &c.gt, h, w).map_err(|e| e.to_string())?,
                    frechet(p, &c.gt, h, w).map_err(|e| e.to_string())?,
                ))
            });
            match metrics {
                Ok((a, f, d)) => ClipMetrics {
                    clip_id: c.clip_id.clone(),
                    ade: Some(a),
                    fde: Some(f),
                    fd: Some(d),
                    error: None,
                },
                Err(e) => ClipMetrics {
                    clip_id: c.clip_id.clone(),
                    ade: None,
                    fde: None,
                    fd: None,
                    error: Some(e),
                },
            }
        })
        .collect();
    MetricsReport::from_records(split, records)
}

/// Runs `predictor` on every clip and scores the results.
pub fn evaluate<F>(split: &str, clips: &[LabeledClip], mut predictor: F) -> MetricsReport
where
    F: FnMut(&VideoClipState) -> Result<TrajectoryAction>,
{
    let preds: Vec<_> = clips.iter().map(|c| predictor(&c.state)).collect();
    score(split, clips, &preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Minimum over every monotone coupling of the maximum coupled distance.
    fn brute_frechet(p: &[[f64; 2]], q: &[[f64; 2]]) -> f64 {
        fn walk(p: &[[f64; 2]], q: &[[f64; 2]], i: usize, j: usize, worst: f64, best: &mut f64) {
            let worst = worst.max(dist(p[i], q[j]));
            if i + 1 == p.len() && j + 1 == q.len() {
                *best = best.min(worst);
                return;
            }
            if i + 1 < p.len() {
                walk(p, q, i + 1, j, worst, best);
            }
            if j + 1 < q.len() {
                walk(p, q, i, j + 1, worst, best);
            }
            if i + 1 < p.len() && j + 1 < q.len() {
                walk(p, q, i + 1, j + 1, worst, best);
            }
        }
        let mut best = f64::INFINITY;
        walk(p, q, 0, 0, 0.0, &mut best);
        best
    }

    fn pts(max_len: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec(prop::array::uniform2(-50.0f64..50.0), 1..=max_len)
    }

    #[test]
    fn hand_examples() {
        let p = [[0.0, 0.0], [1.0, 0.0]];
        let q = [[0.0, 1.0], [1.0, 1.0]];
        assert_eq!(frechet_points(&p, &q).unwrap(), 1.0);
        assert_eq!(brute_frechet(&p, &q), 1.0);
        let gt: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let off: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        assert!((ade_points(&off, &gt).unwrap() - 5.0).abs() < 1e-12);
        let mut last = gt.clone();
        last[5][1] += 2.0;
        assert_eq!(fde_points(&last, &gt).unwrap(), 2.0);
        assert!((ade_points(&last, &gt).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(ade_points(&gt, &gt).unwrap(), 0.0);
        assert_eq!(frechet_points(&gt, &gt).unwrap(), 0.0);
        assert!(ade_points(&gt[..5], &gt).is_err());
        assert!(frechet_points(&[], &gt).is_err());
    }

    #[test]
    fn frechet_can_undercut_the_identity_coupling() {
        // a lagged copy: reparametrizing removes the pointwise error
        let p = [[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let q = [[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]];
        assert_eq!(frechet_points(&p, &q).unwrap(), 0.0);
        assert!(ade_points(&p, &q).unwrap() > 0.0);
    }

    #[test]
    fn single_clip_has_zero_spread() {
        let clip = LabeledClip {
            clip_id: "a".into(),
            state: VideoClipState::zeros(1, 4),
            gt: TrajectoryAction::from_flat(&[0.0, 0.5, 0.2, 0.1]).unwrap(),
        };
        let r = evaluate("test", std::slice::from_ref(&clip), |_| Ok(clip.gt.clone()));
        assert_eq!(r.aggregate.count, 1);
        assert_eq!(r.aggregate.ade, Summary { mean: 0.0, std: 0.0 });
        let r = evaluate("test", &[clip], |_| Err(Error::Data("boom".into())));
        assert_eq!((r.aggregate.count, r.aggregate.failures), (0, 1));
    }

    proptest! {
        #[test]
        fn dp_matches_enumeration(p in pts(5), q in pts(5)) {
            let dp = frechet_points(&p, &q).unwrap();
            prop_assert_eq!(dp, brute_frechet(&p, &q));
            prop_assert_eq!(dp, frechet_points(&q, &p).unwrap());
        }

        #[test]
        fn frechet_bounds(n in 1usize..8, seed in prop::collection::vec(prop::array::uniform4(-20.0f64..20.0), 8)) {
            let p: Vec<[f64; 2]> = seed[..n].iter().map(|s| [s[0], s[1]]).collect();
            let q: Vec<[f64; 2]> = seed[..n].iter().map(|s| [s[2], s[3]]).collect();
            let fd = frechet_points(&p, &q).unwrap();
            let max_pt = p.iter().zip(&q).map(|(a, b)| dist(*a, *b)).fold(0.0, f64::max);
            prop_assert!(fd <= max_pt + 1e-12);
            prop_assert!(fde_points(&p, &q).unwrap() <= fd + 1e-12);
            prop_assert!(dist(p[0], q[0]) <= fd + 1e-12);
            prop_assert!(ade_points(&p, &q).unwrap() <= max_pt + 1e-12);
        }

        #[test]
        fn rigid_rotation_invariance(p in pts(6), angle in 0.0f64..6.3, cx in -10.0f64..10.0, cy in -10.0f64..10.0) {
            let q: Vec<[f64; 2]> = p.iter().rev().map(|v| [v[1] * 0.5, v[0] - 1.0]).collect();
            let (s, c) = angle.sin_cos();
            let rot = |v: &[f64; 2]| {
                let (x, y) = (v[0] - cx, v[1] - cy);
                [c * x - s * y + cx, s * x + c * y + cy]
            };
            let pr: Vec<_> = p.iter().map(rot).collect();
            let qr: Vec<_> = q.iter().map(rot).collect();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(1e-9) + 1e-9;
            prop_assert!(close(ade_points(&p, &q).unwrap(), ade_points(&pr, &qr).unwrap()));
            prop_assert!(close(fde_points(&p, &q).unwrap(), fde_points(&pr, &qr).unwrap()));
            prop_assert!(close(frechet_points(&p, &q).unwrap(), frechet_points(&pr, &qr).unwrap()));
        }
    }
}
