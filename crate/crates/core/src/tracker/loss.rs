use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the classification term.
    pub beta: f64,
    /// Label value separating target cells from background, and the score
    /// below which background cells cost nothing.
    pub hinge: f64,
    /// Label bump width in score cells.
    pub label_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 100.0,
            hinge: 0.05,
            label_sigma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.label_sigma > 0.0 && self.hinge.is_finite()) {
            return Err(Error::Config(format!("invalid loss settings {self:?}")));
        }
        Ok(())
    }
}

/// `(1, 1, size, size)` Gaussian bump with peak 1 at score coordinates
/// `(cy, cx)`.
pub fn gaussian_label(size: usize, cy: f64, cx: f64, sigma: f64) -> Tensor {
    Tensor::from_fn([1, 1, size, size], |i| {
        let (r, c) = ((i / size) as f64, (i % size) as f64);
        (-((r - cy).powi(2) + (c - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub bb: f64,
    pub total: f64,
}

/// Per-cell residual: `s - y` where the label reaches the hinge, otherwise
/// the amount by which the score exceeds it.
fn residual(s: f64, y: f64, hinge: f64) -> f64 {
    if y >= hinge {
        s - y
    } else {
        (s - hinge).max(0.0)
    }
}

pub fn classification_loss(score: &Tensor, label: &Tensor, hinge: f64) -> Result<f64> {
    if score.shape() != label.shape() || score.numel() == 0 {
        return Err(Error::Shape(format!("score {:?} vs label {:?}", score.shape(), label.shape())));
    }
    let sum: f64 = score
        .data()
        .iter()
        .zip(label.data())
        .map(|(&s, &y)| residual(s, y, hinge).powi(2))
        .sum();
    Ok(sum / score.numel() as f64)
}

/// `beta * L_cls + L_bb`, with `L_cls` the mean squared hinged residual and
/// `L_bb` the mean squared IoU error.
pub fn compute_loss(
    score: &Tensor,
    label: &Tensor,
    pred_iou: &[f64],
    true_iou: &[f64],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let cls = classification_loss(score, label, cfg.hinge)?;
    if pred_iou.len() != true_iou.len() {
        return Err(Error::Shape(format!("{} IoU predictions for {} targets", pred_iou.len(), true_iou.len())));
    }
    let bb = if pred_iou.is_empty() {
        0.0
    } else {
        pred_iou.iter().zip(true_iou).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred_iou.len() as f64
    };
    Ok(LossParts {
        cls,
        bb,
        total: cfg.beta * cls + bb,
    })
}

/// The same loss recorded on a tape. Returns `(total, cls, bb)`.
pub fn loss_on_tape(
    tape: &mut Tape,
    score: Var,
    label: &Tensor,
    pred_iou: Var,
    true_iou: &Tensor,
    cfg: &LossConfig,
) -> Result<(Var, Var, Var)> {
    if tape.value(score).shape() != label.shape() {
        return Err(Error::Shape(format!(
            "score {:?} vs label {:?}",
            tape.value(score).shape(),
            label.shape()
        )));
    }
    let fg = label.map(|y| if y >= cfg.hinge { 1.0 } else { 0.0 });
    let bg = fg.map(|m| 1.0 - m);
    let y = tape.constant(label.clone());
    let fg = tape.constant(fg);
    let bg = tape.constant(bg);
    let diff = tape.sub(score, y)?;
    let pos = tape.mul(diff, fg)?;
    let over = tape.add_scalar(score, -cfg.hinge);
    let over = tape.relu(over);
    let neg = tape.mul(over, bg)?;
    let r = tape.add(pos, neg)?;
    let r2 = tape.mul(r, r)?;
    let cls = tape.mean(r2);

    let t = tape.constant(true_iou.clone());
    let d = tape.sub(pred_iou, t)?;
    let d2 = tape.mul(d, d)?;
    let bb = tape.mean(d2);
    let weighted = tape.scale(cls, cfg.beta);
    let total = tape.add(weighted, bb)?;
    Ok((total, cls, bb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighting_example() {
        // L_cls = 0.01 from a single foreground cell with residual 0.1
        let label = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        let score = Tensor::new([1, 1, 1, 1], vec![0.9]).unwrap();
        let pred = [1.0 - 0.5f64.sqrt()];
        let l = compute_loss(&score, &label, &pred, &[1.0], &LossConfig::default()).unwrap();
        assert!((l.cls - 0.01).abs() < 1e-15);
        assert!((l.bb - 0.5).abs() < 1e-15);
        assert!((l.total - 1.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let label = gaussian_label(17, 8.3, 4.1, 1.0);
        let l = compute_loss(&label, &label, &[0.3, 0.9], &[0.3, 0.9], &LossConfig::default()).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn background_below_hinge_is_free() {
        let label = Tensor::new([1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        let score = Tensor::new([1, 1, 1, 2], vec![0.049, -3.0]).unwrap();
        assert_eq!(classification_loss(&score, &label, 0.05).unwrap(), 0.0);
        let score = Tensor::new([1, 1, 1, 2], vec![0.15, 0.0]).unwrap();
        assert!((classification_loss(&score, &label, 0.05).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn tape_matches_direct_loss() {
        let label = gaussian_label(5, 2.2, 1.7, 1.0);
        let score = Tensor::from_fn([1, 1, 5, 5], |i| ((i * 7) % 11) as f64 / 10.0 - 0.3);
        let pred = Tensor::new([3, 1, 1, 1], vec![0.2, 0.5, 0.9]).unwrap();
        let truth = Tensor::new([3, 1, 1, 1], vec![0.1, 0.7, 0.9]).unwrap();
        let cfg = LossConfig::default();
        let direct = compute_loss(&score, &label, pred.data(), truth.data(), &cfg).unwrap();
        let mut tape = Tape::new();
        let s = tape.leaf(score);
        let p = tape.leaf(pred);
        let (total, _, _) = loss_on_tape(&mut tape, s, &label, p, &truth, &cfg).unwrap();
        assert!((tape.value(total).data()[0] - direct.total).abs() < 1e-12);
    }
}
