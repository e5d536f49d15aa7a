//! Segmentation and regression metrics.

use serde::{Deserialize, Serialize};

pub const DEFAULT_SMOOTH: f64 = 1e-6;
pub const BCE_EPS: f64 = 1e-7;
pub const DEFAULT_BINARIZE: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("inputs are empty")]
    Empty,
}

fn check(a: &[f64], b: &[f64]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// `(2·Σ g·p + smooth) / (Σ g + Σ p + smooth)`.
pub fn dice_coefficient(g: &[f64], p: &[f64], smooth: f64) -> Result<f64, MetricsError> {
    check(g, p)?;
    let inter: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
    let total: f64 = g.iter().sum::<f64>() + p.iter().sum::<f64>();
    let den = total + smooth;
    // 0/0 only for two empty masks without smoothing: perfect agreement
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * inter + smooth) / den)
}

pub fn dice_loss(g: &[f64], p: &[f64], smooth: f64) -> Result<f64, MetricsError> {
    Ok(1.0 - dice_coefficient(g, p, smooth)?)
}

/// Mean binary cross-entropy with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce(g: &[f64], p: &[f64]) -> Result<f64, MetricsError> {
    check(g, p)?;
    if g.is_empty() {
        return Err(MetricsError::Empty);
    }
    let s: f64 = g
        .iter()
        .zip(p)
        .map(|(&g, &p)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            g * p.ln() + (1.0 - g) * (1.0 - p).ln()
        })
        .sum();
    Ok(-s / g.len() as f64)
}

/// `dice_loss + bce`.
pub fn combined_loss(g: &[f64], p: &[f64], smooth: f64) -> Result<f64, MetricsError> {
    Ok(dice_loss(g, p, smooth)? + bce(g, p)?)
}

/// Jaccard index after binarizing both inputs at `cut`; an empty union scores 1.
pub fn iou(g: &[f64], p: &[f64], cut: f64) -> Result<f64, MetricsError> {
    check(g, p)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in g.iter().zip(p) {
        let (a, b) = (a >= cut, b >= cut);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
}

pub fn regression_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<Regression, MetricsError> {
    check(y_true, y_pred)?;
    if y_true.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = y_true.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in y_true.iter().zip(y_pred) {
        let d = b - a;
        se += d * d;
        ae += d.abs();
    }
    let mse = se / n;
    Ok(Regression {
        mse,
        mae: ae / n,
        rmse: mse.sqrt(),
    })
}

/// RMSE divided by the maximum of the reference curve.
pub fn normalized_rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64, MetricsError> {
    let r = regression_metrics(y_true, y_pred)?;
    let peak = y_true.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(r.rmse / peak)
}

/// Mask comparison block, keyed like a validation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    #[serde(rename = "Val Loss")]
    pub loss: f64,
    #[serde(rename = "Val Dice")]
    pub dice: f64,
    #[serde(rename = "Val IoU")]
    pub iou: f64,
    pub smooth: f64,
    pub bce_eps: f64,
    pub binarize_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TacMetrics {
    #[serde(rename = "Val MSE")]
    pub mse: f64,
    #[serde(rename = "Val MAE")]
    pub mae: f64,
    #[serde(rename = "Val RMSE")]
    pub rmse: f64,
    #[serde(rename = "nRMSE")]
    pub nrmse: f64,
}

pub fn mask_metrics(
    truth: &[f64],
    pred: &[f64],
    smooth: f64,
    cut: f64,
) -> Result<MaskMetrics, MetricsError> {
    Ok(MaskMetrics {
        loss: combined_loss(truth, pred, smooth)?,
        dice: dice_coefficient(truth, pred, smooth)?,
        iou: iou(truth, pred, cut)?,
        smooth,
        bce_eps: BCE_EPS,
        binarize_at: cut,
    })
}

pub fn tac_metrics(truth: &[f64], pred: &[f64]) -> Result<TacMetrics, MetricsError> {
    let r = regression_metrics(truth, pred)?;
    Ok(TacMetrics {
        mse: r.mse,
        mae: r.mae,
        rmse: r.rmse,
        nrmse: normalized_rmse(truth, pred)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ones(idx: &[usize], n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        for &i in idx {
            v[i] = 1.0;
        }
        v
    }

    #[test]
    fn dice_examples() {
        let a = ones(&[0, 1, 2, 3], 20);
        assert!((dice_coefficient(&a, &a, DEFAULT_SMOOTH).unwrap() - 1.0).abs() < 1e-7);
        let g = ones(&(0..10).collect::<Vec<_>>(), 20);
        let p = ones(&(10..20).collect::<Vec<_>>(), 20);
        assert!(dice_coefficient(&g, &p, DEFAULT_SMOOTH).unwrap() <= 1e-7);
        let g = ones(&[0, 1, 2, 3], 10);
        let p = ones(&[2, 3, 4, 5], 10);
        assert_eq!(dice_coefficient(&g, &p, 0.0).unwrap(), 0.5);
        assert_eq!(dice_loss(&g, &p, 0.0).unwrap(), 0.5);
        assert!((dice_loss(&a, &a, DEFAULT_SMOOTH).unwrap()).abs() < 1e-7);
        assert!(dice_coefficient(&g, &p[..3], 0.0).is_err());
    }

    #[test]
    fn bce_examples() {
        let g = ones(&[0, 2], 4);
        assert!(bce(&g, &g).unwrap() <= 1.1e-6);
        let half = vec![0.5; 4];
        assert!((bce(&g, &half).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        let worst = bce(&[1.0], &[0.0]).unwrap();
        assert!((worst - 16.1181).abs() < 1e-4);
        assert!((worst + (1e-7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn combined_examples() {
        let g = ones(&[0, 2], 4);
        assert!(combined_loss(&g, &g, DEFAULT_SMOOTH).unwrap() <= 2e-6);
        let half = vec![0.5; 4];
        let c = combined_loss(&g, &half, DEFAULT_SMOOTH).unwrap();
        let want = dice_loss(&g, &half, DEFAULT_SMOOTH).unwrap() + std::f64::consts::LN_2;
        assert!((c - want).abs() < 1e-9);
        let w = combined_loss(&[1.0], &[0.0], DEFAULT_SMOOTH).unwrap();
        assert!((w - (1.0 + 16.1181)).abs() < 1e-3);
    }

    #[test]
    fn iou_examples() {
        let g = ones(&[0, 1, 2, 3], 10);
        assert_eq!(iou(&g, &g, 0.5).unwrap(), 1.0);
        assert_eq!(iou(&g, &ones(&[5, 6], 10), 0.5).unwrap(), 0.0);
        let p = ones(&[2, 3, 4, 5], 10);
        assert!((iou(&g, &p, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&[0.0; 3], &[0.0; 3], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn regression_examples() {
        assert_eq!(
            regression_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            Regression {
                mse: 0.0,
                mae: 0.0,
                rmse: 0.0
            }
        );
        let r = regression_metrics(&[0.0, 0.0], &[0.0, 2.0]).unwrap();
        assert_eq!((r.mse, r.mae), (2.0, 1.0));
        assert!((r.rmse - 1.41421).abs() < 1e-5);
        assert_eq!(regression_metrics(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn metric_json_keys() {
        let m = mask_metrics(&[1.0, 0.0], &[1.0, 0.0], DEFAULT_SMOOTH, 0.5).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(
            s.contains("\"Val Dice\"") && s.contains("\"Val IoU\"") && s.contains("\"Val Loss\"")
        );
        let t = tac_metrics(&[1.0, 2.0], &[1.0, 2.5]).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"Val RMSE\"") && s.contains("\"nRMSE\""));
        assert!((t.nrmse - t.rmse / 2.0).abs() < 1e-15);
    }

    fn binary() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..200).prop_flat_map(|n| {
            (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(|(a, b)| {
                    let f = |v: Vec<bool>| v.into_iter().map(|x| x as u8 as f64).collect();
                    (f(a), f(b))
                })
        })
    }

    proptest! {
        #[test]
        fn dice_iou_identity((g, p) in binary()) {
            if g.iter().chain(&p).any(|&v| v > 0.0) {
                let d = dice_coefficient(&g, &p, 0.0).unwrap();
                let j = iou(&g, &p, 0.5).unwrap();
                prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-9);
            }
        }

        #[test]
        fn dice_symmetric_and_bounded((g, p) in binary(), smooth in 0.0f64..1.0) {
            let a = dice_coefficient(&g, &p, smooth).unwrap();
            let b = dice_coefficient(&p, &g, smooth).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn losses_nonnegative_and_combined_dominates(
            (g, p) in binary(),
            soft in proptest::collection::vec(0.0f64..=1.0, 200),
        ) {
            let p: Vec<f64> = p.iter().zip(&soft).map(|(&b, &s)| 0.5 * (b + s)).collect();
            let b = bce(&g, &p).unwrap();
            let dl = dice_loss(&g, &p, DEFAULT_SMOOTH).unwrap();
            let c = combined_loss(&g, &p, DEFAULT_SMOOTH).unwrap();
            prop_assert!(b >= 0.0);
            prop_assert_eq!(c, dl + b);
            prop_assert!(c >= dl && c >= b);
        }

        #[test]
        fn rmse_squared_is_mse(a in proptest::collection::vec(-1e3f64..1e3, 1..50), seed in any::<u64>()) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + ((seed >> (i % 64)) & 7) as f64 - 3.5).collect();
            let r = regression_metrics(&a, &b).unwrap();
            prop_assert!((r.rmse * r.rmse - r.mse).abs() <= 1e-9 * r.mse.max(1.0));
        }
    }
}
