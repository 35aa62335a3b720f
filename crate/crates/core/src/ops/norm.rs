use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{split_axis, Tensor};

/// Normalized values and inverse standard deviations saved for backward.
struct Normalized<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Normalizes `x` along `axis` to zero mean and unit population variance,
/// then applies `gamma * xhat + beta` with `gamma`, `beta` of length `shape[axis]`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    axis: usize,
    eps: T,
) -> Result<Tensor<T>> {
    let (y, _) = layer_norm_impl(x, gamma, beta, axis, eps)?;
    Ok(y)
}

fn layer_norm_impl<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    axis: usize,
    eps: T,
) -> Result<(Tensor<T>, Normalized<T>)> {
    if !(eps > T::zero()) {
        return arg_err("layer_norm", format!("eps must be positive, got {eps}"));
    }
    if axis >= x.ndim() {
        return shape_err("layer_norm", format!("axis {axis} for {:?}", x.shape()));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    if gamma.shape() != [n] || beta.shape() != [n] {
        return shape_err(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} for extent {n}",
                gamma.shape(),
                beta.shape()
            ),
        );
    }
    let d = x.data();
    let (g, b) = (gamma.data(), beta.data());
    let nt = T::lit(n as f64);
    let mut xhat = vec![T::zero(); d.len()];
    let mut y = vec![T::zero(); d.len()];
    let mut inv_std = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            let mean = (0..n).map(|i| d[at(i)]).sum::<T>() / nt;
            let var = (0..n).map(|i| (d[at(i)] - mean).powi(2)).sum::<T>() / nt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[o * inner + j] = inv;
            for i in 0..n {
                let xh = (d[at(i)] - mean) * inv;
                xhat[at(i)] = xh;
                y[at(i)] = g[i] * xh + b[i];
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), y)?,
        Normalized { xhat, inv_std },
    ))
}

/// Shared backward for mean/variance normalization over groups of `n` values.
/// Returns `dx` given `dxhat` for the normalized values.
fn normalize_backward<T: Scalar>(
    dxhat: &[T],
    xhat: &[T],
    inv_std: T,
    n: usize,
    at: impl Fn(usize) -> usize,
    dx: &mut [T],
) {
    let nt = T::lit(n as f64);
    let (mut s1, mut s2) = (T::zero(), T::zero());
    for i in 0..n {
        s1 += dxhat[at(i)];
        s2 += dxhat[at(i)] * xhat[at(i)];
    }
    for i in 0..n {
        let k = at(i);
        dx[k] = inv_std / nt * (nt * dxhat[k] - s1 - xhat[k] * s2);
    }
}

/// Batch normalization over `(B, H, W)` per channel of `[B, C, H, W]`.
pub struct BatchNormOutput<T> {
    pub y: Tensor<T>,
    pub mean: Tensor<T>,
    /// Population variance of the batch.
    pub var: Tensor<T>,
}

fn check_bn<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(usize, usize, usize)> {
    if !(eps > T::zero()) {
        return arg_err("batch_norm", format!("eps must be positive, got {eps}"));
    }
    let s = x.shape();
    if s.len() != 4 {
        return shape_err("batch_norm", format!("expected [B,C,H,W], got {s:?}"));
    }
    if gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
        return shape_err(
            "batch_norm",
            format!(
                "gamma {:?} / beta {:?} for {} channels",
                gamma.shape(),
                beta.shape(),
                s[1]
            ),
        );
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

fn bn_train_impl<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(BatchNormOutput<T>, Normalized<T>)> {
    let (b, c, hw) = check_bn(x, gamma, beta, eps)?;
    let d = x.data();
    let n = b * hw;
    let nt = T::lit(n as f64);
    let at = |ch: usize, i: usize| (i / hw * c + ch) * hw + i % hw;
    let mut xhat = vec![T::zero(); d.len()];
    let mut y = vec![T::zero(); d.len()];
    let mut means = vec![T::zero(); c];
    let mut vars = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let mean = (0..n).map(|i| d[at(ch, i)]).sum::<T>() / nt;
        let var = (0..n).map(|i| (d[at(ch, i)] - mean).powi(2)).sum::<T>() / nt;
        let inv = T::one() / (var + eps).sqrt();
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for i in 0..n {
            let k = at(ch, i);
            xhat[k] = (d[k] - mean) * inv;
            y[k] = g * xhat[k] + bt;
        }
        means[ch] = mean;
        vars[ch] = var;
        inv_std[ch] = inv;
    }
    Ok((
        BatchNormOutput {
            y: Tensor::from_vec(x.shape(), y)?,
            mean: Tensor::from_vec(&[c], means)?,
            var: Tensor::from_vec(&[c], vars)?,
        },
        Normalized { xhat, inv_std },
    ))
}

/// Training-mode batch normalization with batch statistics.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<BatchNormOutput<T>> {
    Ok(bn_train_impl(x, gamma, beta, eps)?.0)
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (_, c, hw) = check_bn(x, gamma, beta, eps)?;
    if mean.shape() != [c] || var.shape() != [c] {
        return shape_err("batch_norm", "running statistics shape");
    }
    let mut y = x.data().to_vec();
    for (k, v) in y.iter_mut().enumerate() {
        let ch = (k / hw) % c;
        let inv = T::one() / (var.data()[ch] + eps).sqrt();
        *v = gamma.data()[ch] * (*v - mean.data()[ch]) * inv + beta.data()[ch];
    }
    Tensor::from_vec(x.shape(), y)
}

impl<T: Scalar> Tape<T> {
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: T,
    ) -> Result<Var> {
        let (y, saved) = layer_norm_impl(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            axis,
            eps,
        )?;
        self.push(
            "layer_norm",
            y,
            &[x, gamma, beta],
            Box::new(move |c| {
                let (outer, n, inner) = split_axis(c.inputs[0].shape(), axis);
                let g = c.grad.data();
                let gamma = c.inputs[1].data();
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); g.len()];
                for (k, (&gk, &xh)) in g.iter().zip(&saved.xhat).enumerate() {
                    let i = (k / inner) % n;
                    dgamma[i] += gk * xh;
                    dbeta[i] += gk;
                    dxhat[k] = gk * gamma[i];
                }
                let mut dx = vec![T::zero(); g.len()];
                if c.needs[0] {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * n + i) * inner + j;
                            normalize_backward(
                                &dxhat,
                                &saved.xhat,
                                saved.inv_std[o * inner + j],
                                n,
                                at,
                                &mut dx,
                            );
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::from_vec(c.inputs[0].shape(), dx)?),
                    Some(Tensor::from_vec(&[n], dgamma)?),
                    Some(Tensor::from_vec(&[n], dbeta)?),
                ])
            }),
        )
    }

    /// Training-mode batch norm; returns the output and the batch mean/variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let (out, saved) = bn_train_impl(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let BatchNormOutput { y, mean, var } = out;
        let v = self.push(
            "batch_norm",
            y,
            &[x, gamma, beta],
            Box::new(move |c| {
                let s = c.inputs[0].shape();
                let (b, ch_n, hw) = (s[0], s[1], s[2] * s[3]);
                let g = c.grad.data();
                let gamma = c.inputs[1].data();
                let mut dgamma = vec![T::zero(); ch_n];
                let mut dbeta = vec![T::zero(); ch_n];
                let mut dxhat = vec![T::zero(); g.len()];
                for (k, (&gk, &xh)) in g.iter().zip(&saved.xhat).enumerate() {
                    let ch = (k / hw) % ch_n;
                    dgamma[ch] += gk * xh;
                    dbeta[ch] += gk;
                    dxhat[k] = gk * gamma[ch];
                }
                let mut dx = vec![T::zero(); g.len()];
                if c.needs[0] {
                    for ch in 0..ch_n {
                        let at = |i: usize| (i / hw * ch_n + ch) * hw + i % hw;
                        normalize_backward(
                            &dxhat,
                            &saved.xhat,
                            saved.inv_std[ch],
                            b * hw,
                            at,
                            &mut dx,
                        );
                    }
                }
                Ok(vec![
                    Some(Tensor::from_vec(s, dx)?),
                    Some(Tensor::from_vec(&[ch_n], dgamma)?),
                    Some(Tensor::from_vec(&[ch_n], dbeta)?),
                ])
            }),
        )?;
        Ok((v, mean, var))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let y = batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mean,
            var,
            eps,
        )?;
        let inv: Vec<T> = var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let mean = mean.clone();
        self.push(
            "batch_norm_eval",
            y,
            &[x, gamma, beta],
            Box::new(move |c| {
                let s = c.inputs[0].shape();
                let (ch_n, hw) = (s[1], s[2] * s[3]);
                let (g, xd, gamma) = (c.grad.data(), c.inputs[0].data(), c.inputs[1].data());
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); ch_n];
                let mut dbeta = vec![T::zero(); ch_n];
                for k in 0..g.len() {
                    let ch = (k / hw) % ch_n;
                    let xhat = (xd[k] - mean.data()[ch]) * inv[ch];
                    dx[k] = g[k] * gamma[ch] * inv[ch];
                    dgamma[ch] += g[k] * xhat;
                    dbeta[ch] += g[k];
                }
                Ok(vec![
                    Some(Tensor::from_vec(s, dx)?),
                    Some(Tensor::from_vec(&[ch_n], dgamma)?),
                    Some(Tensor::from_vec(&[ch_n], dbeta)?),
                ])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = t(&[2, 3], &[4.0; 6]);
        let y = layer_norm(&x, &t(&[3], &[1.0; 3]), &t(&[3], &[0.0; 3]), 1, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_values() {
        let y = layer_norm(
            &t(&[1, 2], &[1.0, 3.0]),
            &t(&[2], &[1.0, 1.0]),
            &t(&[2], &[0.0, 0.0]),
            1,
            1e-12,
        )
        .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_affine_collapse() {
        let x = t(&[2, 2], &[0.3, -7.0, 2.0, 9.0]);
        let y = layer_norm(&x, &t(&[2], &[0.0, 0.0]), &t(&[2], &[5.0, 5.0]), 1, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn layer_norm_over_channel_axis() {
        // [1, 2, 1, 2]: normalize the two channels at each spatial site
        let x = t(&[1, 2, 1, 2], &[1.0, 10.0, 3.0, 20.0]);
        let y = layer_norm(&x, &t(&[2], &[1.0, 1.0]), &t(&[2], &[0.0, 0.0]), 1, 1e-12).unwrap();
        let d = y.data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[2] - 1.0).abs() < 1e-9);
        assert!((d[1] + 1.0).abs() < 1e-9 && (d[3] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let g = t(&[2], &[1.0, 1.0]);
        assert!(layer_norm(&x, &g, &g, 1, 0.0).is_err());
    }

    #[test]
    fn batch_norm_constant_is_zero() {
        let x = t(&[2, 1, 2, 2], &[3.0; 8]);
        let out = batch_norm_train(&x, &t(&[1], &[1.0]), &t(&[1], &[0.0]), 1e-5).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_two_values() {
        let x = t(&[1, 1, 1, 2], &[0.0, 2.0]);
        let out = batch_norm_train(&x, &t(&[1], &[1.0]), &t(&[1], &[0.0]), 1e-12).unwrap();
        assert!((out.y.data()[0] + 1.0).abs() < 1e-9 && (out.y.data()[1] - 1.0).abs() < 1e-9);
        assert_eq!(out.mean.data(), &[1.0]);
        assert_eq!(out.var.data(), &[1.0]);
    }

    #[test]
    fn batch_norm_eval_with_batch_stats_matches_train() {
        let x = t(&[2, 2, 1, 2], &[0.5, 1.5, -2.0, 4.0, 3.0, 0.0, 1.0, 1.0]);
        let (g, b) = (t(&[2], &[1.3, 0.7]), t(&[2], &[0.1, -0.2]));
        let tr = batch_norm_train(&x, &g, &b, 1e-5).unwrap();
        let ev = batch_norm_eval(&x, &g, &b, &tr.mean, &tr.var, 1e-5).unwrap();
        assert!(tr.y.max_abs_diff(&ev).unwrap() < 1e-12);
    }
}
