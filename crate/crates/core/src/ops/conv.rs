use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{gemm, Mat, Tensor};

/// Stride, zero padding and channel grouping of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn geometry<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Geometry> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return shape_err(
            "conv2d",
            format!("expected 4-D input and weight, got {xs:?} and {ws:?}"),
        );
    }
    let groups = spec.groups;
    if groups == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 {
        return arg_err(
            "conv2d",
            format!(
                "groups {groups} must divide Cin {} and Cout {}",
                xs[1], ws[0]
            ),
        );
    }
    if ws[1] * groups != xs[1] {
        return shape_err(
            "conv2d",
            format!(
                "weight {ws:?} expects {} input channels, input has {}",
                ws[1] * groups,
                xs[1]
            ),
        );
    }
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return shape_err(
                "conv2d",
                format!("bias {:?} for {} output channels", b.shape(), ws[0]),
            );
        }
    }
    let (Some(ho), Some(wo)) = (
        spec.output_extent(xs[2], ws[2]),
        spec.output_extent(xs[3], ws[3]),
    ) else {
        return shape_err(
            "conv2d",
            format!(
                "kernel {}x{} does not fit input {}x{} with padding {}",
                ws[2], ws[3], xs[2], xs[3], spec.padding
            ),
        );
    };
    Ok(Geometry {
        batch: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        ho,
        wo,
        groups,
    })
}

/// Output columns `[lo, hi)` whose input column `ox * stride - pad + kj`
/// lies inside `[0, w)`.
fn valid_cols(wo: usize, w: usize, stride: usize, pad: usize, kj: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride).min(wo);
    let hi = if w + pad > kj {
        ((w + pad - kj - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one image `[Cin, H, W]` into `[Cin*kh*kw, Ho*Wo]` patch columns.
fn im2col<T: Scalar>(img: &[T], g: &Geometry, spec: Conv2dSpec, col: &mut [T]) {
    let (so, pad, stride) = (g.spatial_out(), spec.padding, spec.stride);
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * so;
                let (lo, hi) = valid_cols(g.wo, g.w, stride, pad, kj);
                for oy in 0..g.ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let start = lo * stride + kj - pad;
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, &v) in dst[lo..hi]
                            .iter_mut()
                            .zip(src[start..].iter().step_by(stride))
                        {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `[Cin, H, W]`.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, spec: Conv2dSpec, img: &mut [T]) {
    let (so, pad, stride) = (g.spatial_out(), spec.padding, spec.stride);
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * so;
                let (lo, hi) = valid_cols(g.wo, g.w, stride, pad, kj);
                if lo == hi {
                    continue;
                }
                let start = lo * stride + kj - pad;
                for oy in 0..g.ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wo + lo..row + oy * g.wo + hi];
                    let dst = &mut plane[iy as usize * g.w + start..(iy as usize + 1) * g.w];
                    for (d, &v) in dst.iter_mut().step_by(stride).zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation plus bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = geometry(x, weight, bias, spec)?;
    let so = g.spatial_out();
    let (in_sz, out_sz) = (g.cin * g.h * g.w, g.cout * so);
    let mut out = vec![T::zero(); g.batch * out_sz];
    let mut col = vec![T::zero(); g.cin * g.kh * g.kw * so];
    let (cout_g, patch) = (g.cout_g(), g.patch());
    for b in 0..g.batch {
        im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &g, spec, &mut col);
        let dst = &mut out[b * out_sz..(b + 1) * out_sz];
        for grp in 0..g.groups {
            let wmat = &weight.data()[grp * cout_g * patch..(grp + 1) * cout_g * patch];
            let cmat = &col[grp * patch * so..(grp + 1) * patch * so];
            gemm(
                Mat::new(wmat, cout_g, patch),
                Mat::new(cmat, patch, so),
                T::zero(),
                &mut dst[grp * cout_g * so..(grp + 1) * cout_g * so],
            );
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                dst[co * so..(co + 1) * so]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_vec(&[g.batch, g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: Conv2dSpec,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = geometry(x, weight, None, spec)?;
    if grad_out.shape() != [g.batch, g.cout, g.ho, g.wo] {
        return shape_err("conv2d_backward", format!("grad {:?}", grad_out.shape()));
    }
    let so = g.spatial_out();
    let (in_sz, out_sz) = (g.cin * g.h * g.w, g.cout * so);
    let (cout_g, patch) = (g.cout_g(), g.patch());
    let mut col = vec![T::zero(); g.cin * g.kh * g.kw * so];
    let mut dcol = vec![T::zero(); col.len()];
    let mut dw = vec![T::zero(); weight.numel()];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_input.then(|| vec![T::zero(); x.numel()]);
    for b in 0..g.batch {
        im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &g, spec, &mut col);
        let gout = &grad_out.data()[b * out_sz..(b + 1) * out_sz];
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += gout[co * so..(co + 1) * so].iter().copied().sum::<T>();
        }
        for grp in 0..g.groups {
            let gmat = &gout[grp * cout_g * so..(grp + 1) * cout_g * so];
            let cmat = &col[grp * patch * so..(grp + 1) * patch * so];
            gemm(
                Mat::new(gmat, cout_g, so),
                Mat::new(cmat, patch, so).t(),
                T::one(),
                &mut dw[grp * cout_g * patch..(grp + 1) * cout_g * patch],
            );
            if dx.is_some() {
                let wmat = &weight.data()[grp * cout_g * patch..(grp + 1) * cout_g * patch];
                gemm(
                    Mat::new(wmat, cout_g, patch).t(),
                    Mat::new(gmat, cout_g, so),
                    T::zero(),
                    &mut dcol[grp * patch * so..(grp + 1) * patch * so],
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            col2im(&dcol, &g, spec, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    let dx = dx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?;
    Ok((
        dx,
        Tensor::from_vec(weight.shape(), dw)?,
        Tensor::from_vec(&[g.cout], db)?,
    ))
}

impl<T: Scalar> Tape<T> {
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let out = conv2d(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            &inputs,
            Box::new(move |c| {
                let (dx, dw, db) =
                    conv2d_backward(c.inputs[0], c.inputs[1], c.grad, spec, c.needs[0])?;
                let mut grads = vec![dx, Some(dw)];
                if c.inputs.len() == 3 {
                    grads.push(Some(db));
                }
                Ok(grads)
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window sum, independent of the im2col/gemm path.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        spec: Conv2dSpec,
    ) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let cout_g = cout / spec.groups;
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        let mut out = vec![0.0; bn * cout * ho * wo];
        for n in 0..bn {
            for co in 0..cout {
                let grp = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..cin_g {
                            let c = grp * cin_g + ci;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy =
                                        (oy * spec.stride + ki) as isize - spec.padding as isize;
                                    let ix =
                                        (ox * spec.stride + kj) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((n * cin + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin_g + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((n * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[bn, cout, ho, wo], out).unwrap()
    }

    #[test]
    fn scalar_product() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap();
        let w = Tensor::from_f64(&[1, 1, 1, 1], &[3.0]).unwrap();
        let b = Tensor::from_f64(&[1], &[0.0]).unwrap();
        assert_eq!(
            conv2d(&x, &w, Some(&b), Conv2dSpec::default())
                .unwrap()
                .data(),
            &[6.0]
        );
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[2, 1, 5, 4], -1.0, 1.0, &mut rng);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::from_f64(&[1, 1, 3, 3], &k).unwrap();
        let y = conv2d(&x, &w, None, Conv2dSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        for spec in [
            Conv2dSpec::new(1, 0, 1),
            Conv2dSpec::new(1, 1, 1),
            Conv2dSpec::new(2, 1, 1),
        ] {
            let got = conv2d(&x, &w, Some(&b), spec).unwrap();
            let want = naive_conv(&x, &w, &b, spec);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-6, "{spec:?}");
        }
    }

    #[test]
    fn grouped_and_depthwise_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);
        let wd = Tensor::uniform(&[4, 1, 3, 3], -1.0, 1.0, &mut rng);
        let bd = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
        let spec = Conv2dSpec::new(1, 1, 4);
        let got = conv2d(&x, &wd, Some(&bd), spec).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &wd, &bd, spec)).unwrap() < 1e-12);

        let wg = Tensor::uniform(&[6, 2, 3, 3], -1.0, 1.0, &mut rng);
        let bg = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);
        let spec = Conv2dSpec::new(2, 1, 2);
        let got = conv2d(&x, &wg, Some(&bg), spec).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &wg, &bg, spec)).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_bad_groups_and_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[4, 1, 3, 3]);
        assert!(conv2d(&x, &w, None, Conv2dSpec::new(1, 1, 2)).is_err());
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        assert!(conv2d(&x, &w, None, Conv2dSpec::default()).is_err());
        let w = Tensor::zeros(&[4, 3, 7, 7]);
        assert!(conv2d(&x, &w, None, Conv2dSpec::default()).is_err());
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let spec = Conv2dSpec::new(1, 1, 1);
        let (a, b) = (1.7, -0.4);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d(&mix, &w, None, spec).unwrap();
        let rhs = conv2d(&x, &w, None, spec)
            .unwrap()
            .scale(a)
            .add(&conv2d(&y, &w, None, spec).unwrap().scale(b))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-6);
    }

    #[test]
    fn unfold_matches_oracle_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (h, w, k, stride, pad) in [
            (5, 7, 3, 1, 1),
            (6, 5, 3, 2, 1),
            (7, 7, 5, 3, 2),
            (4, 6, 1, 2, 0),
            (5, 5, 3, 2, 2),
        ] {
            let x = Tensor::<f64>::uniform(&[1, 2, h, w], -1.0, 1.0, &mut rng);
            let wt = Tensor::uniform(&[3, 2, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::zeros(&[3]);
            let spec = Conv2dSpec::new(stride, pad, 1);
            let got = conv2d(&x, &wt, None, spec).unwrap();
            assert!(
                got.max_abs_diff(&naive_conv(&x, &wt, &b, spec)).unwrap() < 1e-12,
                "{h}x{w} k{k} s{stride} p{pad}"
            );
            let g = geometry(&x, &wt, None, spec).unwrap();
            let mut col = vec![0.0; 2 * k * k * g.spatial_out()];
            im2col(x.data(), &g, spec, &mut col);
            let c: Vec<f64> = (0..col.len())
                .map(|i| ((i * 7919) % 13) as f64 - 6.0)
                .collect();
            let mut back = vec![0.0; x.numel()];
            col2im(&c, &g, spec, &mut back);
            let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
