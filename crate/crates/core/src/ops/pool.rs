use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Divisor used at padded borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    /// Divide by `kernel^2` regardless of padding.
    IncludePad,
    /// Divide by the number of in-bounds cells in the window.
    ExcludePad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub count_mode: CountMode,
}

impl PoolSpec {
    /// Stride-1 pooling with the padding that preserves spatial extent (odd kernels).
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            count_mode: CountMode::ExcludePad,
        }
    }
}

/// One output cell's window: clipped input ranges and the divisor.
struct Window {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    inv_count: f64,
}

fn windows(h: usize, w: usize, spec: PoolSpec) -> Result<(usize, usize, Vec<Window>)> {
    if spec.kernel == 0 || spec.stride == 0 {
        return arg_err("avg_pool2d", "kernel and stride must be at least 1");
    }
    let (ph, pw) = (h + 2 * spec.padding, w + 2 * spec.padding);
    if spec.kernel > ph || spec.kernel > pw {
        return arg_err(
            "avg_pool2d",
            format!("kernel {} larger than padded input {ph}x{pw}", spec.kernel),
        );
    }
    let ho = (ph - spec.kernel) / spec.stride + 1;
    let wo = (pw - spec.kernel) / spec.stride + 1;
    let mut out = Vec::with_capacity(ho * wo);
    let p = spec.padding as isize;
    for oy in 0..ho {
        for ox in 0..wo {
            let sy = (oy * spec.stride) as isize - p;
            let sx = (ox * spec.stride) as isize - p;
            let k = spec.kernel as isize;
            let (y0, y1) = (sy.max(0) as usize, (sy + k).min(h as isize).max(0) as usize);
            let (x0, x1) = (sx.max(0) as usize, (sx + k).min(w as isize).max(0) as usize);
            let count = match spec.count_mode {
                CountMode::IncludePad => spec.kernel * spec.kernel,
                CountMode::ExcludePad => (y1.saturating_sub(y0)) * (x1.saturating_sub(x0)),
            };
            let inv_count = if count == 0 { 0.0 } else { 1.0 / count as f64 };
            out.push(Window {
                y0,
                y1,
                x0,
                x1,
                inv_count,
            });
        }
    }
    Ok((ho, wo, out))
}

fn dims4<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => shape_err(op, format!("expected [B,C,H,W], got {:?}", x.shape())),
    }
}

pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, spec: PoolSpec) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(x, "avg_pool2d")?;
    let (ho, wo, wins) = windows(h, w, spec)?;
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        for win in &wins {
            let mut acc = T::zero();
            for y in win.y0..win.y1 {
                for v in &plane[y * w + win.x0..y * w + win.x1] {
                    acc += *v;
                }
            }
            out.push(acc * T::lit(win.inv_count));
        }
    }
    Tensor::from_vec(&[b, c, ho, wo], out)
}

fn avg_pool2d_backward<T: Scalar>(
    shape: &[usize],
    grad: &Tensor<T>,
    spec: PoolSpec,
) -> Result<Tensor<T>> {
    let (h, w) = (shape[2], shape[3]);
    let (ho, wo, wins) = windows(h, w, spec)?;
    let mut dx = vec![T::zero(); shape.iter().product()];
    for (plane, g) in dx.chunks_mut(h * w).zip(grad.data().chunks(ho * wo)) {
        for (win, &gv) in wins.iter().zip(g) {
            let share = gv * T::lit(win.inv_count);
            for y in win.y0..win.y1 {
                for v in &mut plane[y * w + win.x0..y * w + win.x1] {
                    *v += share;
                }
            }
        }
    }
    Tensor::from_vec(shape, dx)
}

/// Source index pairs and weights for half-pixel (align-corners off) sampling.
fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and border clamping.
pub fn bilinear_upsample2d<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(x, "bilinear_upsample2d")?;
    if out_h == 0 || out_w == 0 {
        return arg_err("bilinear_upsample2d", "output extents must be at least 1");
    }
    let (ty, tx) = (linear_taps(h, out_h), linear_taps(w, out_w));
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, wy0, wy1) in &ty {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for &(x0, x1, wx0, wx1) in &tx {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let top = plane[y0 * w + x0] * wx0 + plane[y0 * w + x1] * wx1;
                let bot = plane[y1 * w + x0] * wx0 + plane[y1 * w + x1] * wx1;
                out.push(top * wy0 + bot * wy1);
            }
        }
    }
    Tensor::from_vec(&[b, c, out_h, out_w], out)
}

fn bilinear_backward<T: Scalar>(shape: &[usize], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (shape[2], shape[3]);
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
    let (ty, tx) = (linear_taps(h, oh), linear_taps(w, ow));
    let mut dx = vec![T::zero(); shape.iter().product()];
    for (plane, g) in dx.chunks_mut(h * w).zip(grad.data().chunks(oh * ow)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = g[oy * ow + ox];
                plane[y0 * w + x0] += gv * T::lit(wy0 * wx0);
                plane[y0 * w + x1] += gv * T::lit(wy0 * wx1);
                plane[y1 * w + x0] += gv * T::lit(wy1 * wx0);
                plane[y1 * w + x1] += gv * T::lit(wy1 * wx1);
            }
        }
    }
    Tensor::from_vec(shape, dx)
}

impl<T: Scalar> Tape<T> {
    pub fn avg_pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let out = avg_pool2d(self.value(x), spec)?;
        self.push(
            "avg_pool2d",
            out,
            &[x],
            Box::new(move |c| {
                Ok(vec![Some(avg_pool2d_backward(
                    c.inputs[0].shape(),
                    c.grad,
                    spec,
                )?)])
            }),
        )
    }

    pub fn bilinear_upsample2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = bilinear_upsample2d(self.value(x), out_h, out_w)?;
        self.push(
            "bilinear_upsample2d",
            out,
            &[x],
            Box::new(|c| Ok(vec![Some(bilinear_backward(c.inputs[0].shape(), c.grad)?)])),
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
    fn pool_constant_map_exclude_pad() {
        let x = t(&[1, 1, 4, 5], &[2.5; 20]);
        for k in [1, 3, 5] {
            let y = avg_pool2d(&x, PoolSpec::same(k)).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        }
    }

    #[test]
    fn pool_hand_mean() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let spec = PoolSpec {
            kernel: 2,
            stride: 2,
            padding: 0,
            count_mode: CountMode::ExcludePad,
        };
        assert_eq!(avg_pool2d(&x, spec).unwrap().data(), &[2.5]);
    }

    #[test]
    fn pool_kernel_one_is_identity() {
        let x = t(&[1, 2, 2, 2], &[1.0, -2.0, 3.0, 0.5, 9.0, 8.0, 7.0, 6.0]);
        assert_eq!(avg_pool2d(&x, PoolSpec::same(1)).unwrap(), x);
    }

    #[test]
    fn pool_include_pad_shrinks_borders() {
        let x = t(&[1, 1, 3, 3], &[1.0; 9]);
        let spec = PoolSpec {
            count_mode: CountMode::IncludePad,
            ..PoolSpec::same(3)
        };
        let y = avg_pool2d(&x, spec).unwrap();
        assert!((y.data()[0] - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(y.data()[4], 1.0);
    }

    #[test]
    fn pool_rejects_oversized_kernel() {
        let x = t(&[1, 1, 2, 2], &[1.0; 4]);
        let spec = PoolSpec {
            kernel: 3,
            stride: 1,
            padding: 0,
            count_mode: CountMode::ExcludePad,
        };
        assert!(avg_pool2d(&x, spec).is_err());
    }

    #[test]
    fn upsample_constant_and_identity() {
        let x = t(&[1, 1, 2, 3], &[4.0; 6]);
        let y = bilinear_upsample2d(&x, 5, 7).unwrap();
        assert!(y.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
        let z = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(bilinear_upsample2d(&z, 2, 2).unwrap(), z);
    }

    #[test]
    fn upsample_half_pixel_weights() {
        // src = (dst + 0.5) * 0.5 - 0.5 clamped to [0, 1]
        let y = bilinear_upsample2d(&t(&[1, 1, 1, 2], &[0.0, 1.0]), 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }
}
