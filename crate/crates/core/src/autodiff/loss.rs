//! Soft dice loss: `1 - 2·Σ p·t / (Σ p² + Σ t²)` per class, smoothed and macro-averaged.

use crate::tensor::{Scalar, ShapeError, Tensor};

/// Added to the numerator and denominator of every per-class ratio, so an empty
/// class against an empty prediction scores dice 1 instead of 0/0.
pub const DICE_SMOOTH: f64 = 1e-6;

/// Per-class sums over the batch and spatial axes.
#[derive(Debug, Clone)]
pub(crate) struct DiceSums {
    pub classes: Vec<usize>,
    pub inter: Vec<f64>,
    pub p_sq: Vec<f64>,
    pub t_sq: Vec<f64>,
}

/// Channels averaged by the loss: the foreground channels `1..C`, or every
/// channel when `foreground_only` is unset or the tensor has a single channel.
pub(crate) fn reduced_classes(channels: usize, foreground_only: bool) -> Vec<usize> {
    if foreground_only && channels > 1 {
        (1..channels).collect()
    } else {
        (0..channels).collect()
    }
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize), ShapeError> {
    if shape.len() < 2 {
        return Err(ShapeError::Rank {
            op: "dice_loss",
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    let spatial = shape[2..].iter().product();
    Ok((shape[0], shape[1], spatial))
}

pub(crate) fn dice_sums<T: Scalar>(
    p: &Tensor<T>,
    t: &Tensor<T>,
    foreground_only: bool,
) -> Result<DiceSums, ShapeError> {
    if p.shape() != t.shape() {
        return Err(ShapeError::Incompatible {
            op: "dice_loss",
            lhs: p.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let (n, c, s) = layout(p.shape())?;
    let classes = reduced_classes(c, foreground_only);
    let mut sums = DiceSums {
        inter: vec![0.0; classes.len()],
        p_sq: vec![0.0; classes.len()],
        t_sq: vec![0.0; classes.len()],
        classes,
    };
    let (pd, td) = (p.data(), t.data());
    for b in 0..n {
        for (k, &cls) in sums.classes.iter().enumerate() {
            let off = (b * c + cls) * s;
            for (&pv, &tv) in pd[off..off + s].iter().zip(&td[off..off + s]) {
                let (pv, tv) = (pv.to_f64_lossy(), tv.to_f64_lossy());
                sums.inter[k] += pv * tv;
                sums.p_sq[k] += pv * pv;
                sums.t_sq[k] += tv * tv;
            }
        }
    }
    Ok(sums)
}

impl DiceSums {
    pub fn per_class_dice(&self) -> Vec<f64> {
        (0..self.classes.len())
            .map(|k| {
                (2.0 * self.inter[k] + DICE_SMOOTH) / (self.p_sq[k] + self.t_sq[k] + DICE_SMOOTH)
            })
            .collect()
    }

    pub fn loss(&self) -> f64 {
        let dice = self.per_class_dice();
        1.0 - dice.iter().sum::<f64>() / dice.len() as f64
    }
}

/// Gradients of the loss with respect to `p` and `t`, scaled by `upstream`.
pub(crate) fn dice_backward<T: Scalar>(
    p: &Tensor<T>,
    t: &Tensor<T>,
    sums: &DiceSums,
    upstream: f64,
) -> (Vec<T>, Vec<T>) {
    let (n, c, s) = layout(p.shape()).expect("validated in forward");
    let mut gp = vec![T::zero(); p.len()];
    let mut gt = vec![T::zero(); t.len()];
    let scale = -upstream / sums.classes.len() as f64;
    for (k, &cls) in sums.classes.iter().enumerate() {
        let num = 2.0 * sums.inter[k] + DICE_SMOOTH;
        let den = sums.p_sq[k] + sums.t_sq[k] + DICE_SMOOTH;
        let inv_den = 1.0 / den;
        let ratio = num / (den * den);
        for b in 0..n {
            let off = (b * c + cls) * s;
            for i in off..off + s {
                let (pv, tv) = (p.data()[i].to_f64_lossy(), t.data()[i].to_f64_lossy());
                gp[i] = T::from_f64_lossy(scale * (2.0 * tv * inv_den - 2.0 * pv * ratio));
                gt[i] = T::from_f64_lossy(scale * (2.0 * pv * inv_den - 2.0 * tv * ratio));
            }
        }
    }
    (gp, gt)
}
