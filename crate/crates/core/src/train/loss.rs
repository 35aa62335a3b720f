//! Segmentation losses on logits.

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 2.0,
            dice: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.bce >= 0.0 && self.dice >= 0.0) {
            return arg_err("loss weights", "weights must be non-negative");
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn check<T: Scalar>(op: &'static str, logits: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    if logits.shape() != mask.shape() || logits.ndim() == 0 {
        return shape_err(
            op,
            format!("logits {:?} vs mask {:?}", logits.shape(), mask.shape()),
        );
    }
    Ok(())
}

/// Mean binary cross-entropy on logits, `max(z,0) - z y + log(1 + e^-|z|)`.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<T> {
    check("bce", logits, mask)?;
    let mut acc = T::zero();
    for (&z, &y) in logits.data().iter().zip(mask.data()) {
        acc += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
    }
    let loss = acc / T::lit(logits.numel() as f64);
    if !loss.is_finite() {
        return Err(crate::Error::NonFinite { op: "bce" });
    }
    Ok(loss)
}

/// Per-image sums `(sum p y, sum p + sum y)` over the leading axis.
fn dice_terms<T: Scalar>(p: &[T], y: &[T], batch: usize) -> Vec<(T, T)> {
    let n = p.len() / batch;
    (0..batch)
        .map(|b| {
            let r = b * n..(b + 1) * n;
            let (mut inter, mut total) = (T::zero(), T::zero());
            for (&pi, &yi) in p[r.clone()].iter().zip(&y[r]) {
                inter += pi * yi;
                total += pi + yi;
            }
            (inter, total)
        })
        .collect()
}

/// `1 - (2 sum(p y) + s) / (sum p + sum y + s)` per image with `p = sigmoid(z)`,
/// averaged over the batch.
pub fn dice_loss<T: Scalar>(logits: &Tensor<T>, mask: &Tensor<T>, smooth: T) -> Result<T> {
    check("dice", logits, mask)?;
    if !(smooth > T::zero()) {
        return arg_err("dice", "smoothing must be positive");
    }
    let batch = logits.shape()[0];
    let p: Vec<T> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    let two = T::lit(2.0);
    let sum: T = dice_terms(&p, mask.data(), batch)
        .into_iter()
        .map(|(i, t)| T::one() - (two * i + smooth) / (t + smooth))
        .sum();
    Ok(sum / T::lit(batch as f64))
}

pub fn joint_loss<T: Scalar>(logits: &Tensor<T>, mask: &Tensor<T>, w: LossWeights) -> Result<T> {
    let smooth = T::lit(DICE_SMOOTH);
    Ok(T::lit(w.bce) * bce_loss(logits, mask)? + T::lit(w.dice) * dice_loss(logits, mask, smooth)?)
}

impl<T: Scalar> Tape<T> {
    pub fn bce_loss(&mut self, logits: Var, mask: &Tensor<T>) -> Result<Var> {
        let out = Tensor::scalar(bce_loss(self.value(logits), mask)?);
        let y = mask.clone();
        self.push(
            "bce",
            out,
            &[logits],
            Box::new(move |c| {
                let k = c.grad.item() / T::lit(y.numel() as f64);
                Ok(vec![Some(
                    c.inputs[0].zip_map(&y, "bce", |z, y| k * (sigmoid(z) - y))?,
                )])
            }),
        )
    }

    pub fn dice_loss(&mut self, logits: Var, mask: &Tensor<T>, smooth: T) -> Result<Var> {
        let out = Tensor::scalar(dice_loss(self.value(logits), mask, smooth)?);
        let y = mask.clone();
        self.push(
            "dice",
            out,
            &[logits],
            Box::new(move |c| {
                let z = c.inputs[0];
                let batch = z.shape()[0];
                let n = z.numel() / batch;
                let p: Vec<T> = z.data().iter().map(|&v| sigmoid(v)).collect();
                let terms = dice_terms(&p, y.data(), batch);
                let k = c.grad.item() / T::lit(batch as f64);
                let two = T::lit(2.0);
                let mut g = Vec::with_capacity(p.len());
                for (b, &(inter, total)) in terms.iter().enumerate() {
                    let den = total + smooth;
                    let num = two * inter + smooth;
                    for i in b * n..(b + 1) * n {
                        let dp = -(two * y.data()[i] * den - num) / (den * den);
                        g.push(k * dp * p[i] * (T::one() - p[i]));
                    }
                }
                Ok(vec![Some(Tensor::from_vec(z.shape(), g)?)])
            }),
        )
    }

    pub fn joint_loss(&mut self, logits: Var, mask: &Tensor<T>, w: LossWeights) -> Result<Var> {
        let bce = self.bce_loss(logits, mask)?;
        let bce = self.scale(bce, T::lit(w.bce))?;
        let dice = self.dice_loss(logits, mask, T::lit(DICE_SMOOTH))?;
        let dice = self.scale(dice, T::lit(w.dice))?;
        self.add(bce, dice)
    }
}
