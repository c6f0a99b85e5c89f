//! Absolute trajectory error against ground truth.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::dataset::StampedPose;
use super::HarnessError;
use crate::util::fmt_sig;

/// Largest timestamp gap accepted when pairing poses (s).
pub const MATCH_WINDOW: f64 = 0.010;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AteMode {
    /// `sqrt(mean ‖t_est − t_gt‖)`.
    #[default]
    Paper,
    /// `sqrt(mean ‖t_est − t_gt‖²)`.
    Rmse,
}

impl AteMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AteMode::Paper => "paper",
            AteMode::Rmse => "rmse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: AteMode,
    pub ate: f64,
    /// (estimate timestamp, position error) per matched pair.
    pub errors: Vec<(f64, f64)>,
    /// Path length of the matched ground-truth poses (m).
    pub length: f64,
}

/// Index of the ground-truth pose nearest to `t` within the match window.
fn nearest(gt: &[StampedPose], t: f64) -> Option<usize> {
    let i = gt.partition_point(|p| p.t < t);
    let mut best: Option<usize> = None;
    for j in [i.wrapping_sub(1), i] {
        if j < gt.len() && (gt[j].t - t).abs() <= MATCH_WINDOW && best.is_none_or(|b| (gt[j].t - t).abs() < (gt[b].t - t).abs()) {
            best = Some(j);
        }
    }
    best
}

/// Pair each estimate with its nearest ground truth and score positions.
/// No alignment is applied. `gt` must be sorted by time.
pub fn evaluate_ate(est: &[StampedPose], gt: &[StampedPose], mode: AteMode) -> Result<EvalReport, HarnessError> {
    let mut errors = Vec::new();
    let mut matched_gt = Vec::new();
    for e in est {
        if let Some(j) = nearest(gt, e.t) {
            errors.push((e.t, (e.pose.translation - gt[j].pose.translation).norm()));
            matched_gt.push(j);
        }
    }
    if errors.is_empty() {
        return Err(HarnessError::NoMatches);
    }
    let n = errors.len() as f64;
    let ate = match mode {
        AteMode::Paper => (errors.iter().map(|e| e.1).sum::<f64>() / n).sqrt(),
        AteMode::Rmse => (errors.iter().map(|e| e.1 * e.1).sum::<f64>() / n).sqrt(),
    };
    let length = matched_gt
        .windows(2)
        .map(|w| (gt[w[1]].pose.translation - gt[w[0]].pose.translation).norm())
        .sum();
    Ok(EvalReport { mode, ate, errors, length })
}

/// `t,error` header followed by one row per matched pair.
pub fn write_error_curve<W: Write>(mut w: W, report: &EvalReport) -> std::io::Result<()> {
    writeln!(w, "t,error")?;
    for (t, e) in &report.errors {
        writeln!(w, "{},{}", fmt_sig(*t), fmt_sig(*e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn traj(pts: &[(f64, [f64; 3])]) -> Vec<StampedPose> {
        pts.iter()
            .map(|(t, p)| StampedPose {
                t: *t,
                pose: Pose::from_translation(Vector3::from(*p)),
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = traj(&[(0.0, [0.0; 3]), (0.1, [1.0, 0.0, 0.0]), (0.2, [1.0, 1.0, 0.0])]);
        for mode in [AteMode::Paper, AteMode::Rmse] {
            let r = evaluate_ate(&gt, &gt, mode).unwrap();
            assert_eq!(r.ate, 0.0);
            assert_eq!(r.errors.len(), 3);
            assert!((r.length - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_offset() {
        let gt = traj(&[(0.0, [0.0; 3]), (1.0, [5.0, 0.0, 0.0]), (2.0, [5.0, 5.0, 0.0])]);
        let est = traj(&[(0.0, [0.0, 0.0, 1.0]), (1.0, [5.0, 0.0, 1.0]), (2.0, [5.0, 5.0, 1.0])]);
        assert!((evaluate_ate(&est, &gt, AteMode::Paper).unwrap().ate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_three_pose_case() {
        let gt = traj(&[(0.0, [0.0; 3]), (1.0, [0.0; 3]), (2.0, [0.0; 3])]);
        let est = traj(&[(0.0, [0.0; 3]), (1.0, [3.0, 0.0, 0.0]), (2.0, [0.0, 4.0, 0.0])]);
        let paper = evaluate_ate(&est, &gt, AteMode::Paper).unwrap().ate;
        let rmse = evaluate_ate(&est, &gt, AteMode::Rmse).unwrap().ate;
        assert!((paper - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((rmse - (25.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn matching_window() {
        let gt = traj(&[(0.0, [0.0; 3]), (1.0, [0.0; 3])]);
        let est = traj(&[(0.009, [1.0, 0.0, 0.0]), (0.5, [9.0, 0.0, 0.0]), (1.011, [9.0, 0.0, 0.0])]);
        let r = evaluate_ate(&est, &gt, AteMode::Rmse).unwrap();
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.ate, 1.0);
        assert!(matches!(evaluate_ate(&est[1..], &gt, AteMode::Paper), Err(HarnessError::NoMatches)));
    }

    #[test]
    fn error_curve_rows_match_pairs() {
        let gt = traj(&[(0.0, [0.0; 3]), (1.0, [0.0; 3])]);
        let est = traj(&[(0.0, [0.5, 0.0, 0.0]), (1.0, [0.0, 0.25, 0.0]), (7.0, [0.0; 3])]);
        let r = evaluate_ate(&est, &gt, AteMode::Paper).unwrap();
        let mut buf = Vec::new();
        write_error_curve(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,error\n0,0.5\n1,0.25\n");
        assert_eq!(text.lines().count() - 1, r.errors.len());
    }

    proptest! {
        #[test]
        fn self_comparison_is_zero(pts in proptest::collection::vec(proptest::array::uniform3(-100.0f64..100.0), 1..50)) {
            let gt: Vec<StampedPose> = pts.iter().enumerate().map(|(i, p)| StampedPose {
                t: i as f64 * 0.05,
                pose: Pose::from_translation(Vector3::from(*p)),
            }).collect();
            prop_assert_eq!(evaluate_ate(&gt, &gt, AteMode::Paper).unwrap().ate, 0.0);
            prop_assert_eq!(evaluate_ate(&gt, &gt, AteMode::Rmse).unwrap().ate, 0.0);
        }

        #[test]
        fn mean_mode_squared_never_exceeds_rmse(errs in proptest::collection::vec(0.0f64..10.0, 1..30)) {
            // By Jensen, mean e ≤ sqrt(mean e²).
            let gt: Vec<StampedPose> = errs.iter().enumerate().map(|(i, _)| StampedPose { t: i as f64, pose: Pose::identity() }).collect();
            let est: Vec<StampedPose> = errs.iter().enumerate().map(|(i, e)| StampedPose { t: i as f64, pose: Pose::from_translation(Vector3::new(*e, 0.0, 0.0)) }).collect();
            let p = evaluate_ate(&est, &gt, AteMode::Paper).unwrap().ate;
            let r = evaluate_ate(&est, &gt, AteMode::Rmse).unwrap().ate;
            prop_assert!(p * p <= r + 1e-12);
        }
    }
}
