use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{gemm, Mat, Tensor};

fn check<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize)> {
    let (dout, din) = match *weight.shape() {
        [o, i] => (o, i),
        _ => {
            return shape_err(
                "linear",
                format!("weight must be [Dout, Din], got {:?}", weight.shape()),
            )
        }
    };
    if x.shape().last() != Some(&din) {
        return shape_err(
            "linear",
            format!("input {:?} does not end in {din}", x.shape()),
        );
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return shape_err("linear", format!("bias {:?} for {dout} outputs", b.shape()));
        }
    }
    Ok((x.numel() / din, din, dout))
}

/// Affine map `x W^T + b` along the trailing axis.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (rows, din, dout) = check(x, weight, bias)?;
    let mut out = vec![T::zero(); rows * dout];
    if let Some(b) = bias {
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        Mat::new(x.data(), rows, din),
        Mat::new(weight.data(), dout, din).t(),
        T::one(),
        &mut out,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::from_vec(&shape, out)
}

impl<T: Scalar> Tape<T> {
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = linear(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            "linear",
            out,
            &inputs,
            Box::new(|c| {
                let (x, w) = (c.inputs[0], c.inputs[1]);
                let (dout, din) = (w.shape()[0], w.shape()[1]);
                let rows = x.numel() / din;
                let g = c.grad.data();
                let dx = if c.needs[0] {
                    let mut dx = vec![T::zero(); x.numel()];
                    gemm(
                        Mat::new(g, rows, dout),
                        Mat::new(w.data(), dout, din),
                        T::zero(),
                        &mut dx,
                    );
                    Some(Tensor::from_vec(x.shape(), dx)?)
                } else {
                    None
                };
                let mut dw = vec![T::zero(); w.numel()];
                gemm(
                    Mat::new(g, rows, dout).t(),
                    Mat::new(x.data(), rows, din),
                    T::zero(),
                    &mut dw,
                );
                let mut grads = vec![dx, Some(Tensor::from_vec(w.shape(), dw)?)];
                if c.inputs.len() == 3 {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    grads.push(Some(Tensor::from_vec(&[dout], db)?));
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

    #[test]
    fn identity_weight() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let mut eye = vec![0.0; 9];
        eye[0] = 1.0;
        eye[4] = 1.0;
        eye[8] = 1.0;
        let w = Tensor::from_f64(&[3, 3], &eye).unwrap();
        assert_eq!(linear(&x, &w, Some(&Tensor::zeros(&[3]))).unwrap(), x);
    }

    #[test]
    fn zero_weight_gives_bias() {
        let x = Tensor::<f64>::from_f64(&[2, 2, 3], &[1.0; 12]).unwrap();
        let b = Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap();
        let y = linear(&x, &Tensor::zeros(&[2, 3]), Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert!(y.data().chunks(2).all(|r| r == [0.5, -1.5]));
    }

    #[test]
    fn matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[2], -1.0, 1.0, &mut rng);
        let y = linear(&x, &w, Some(&b)).unwrap();
        for r in 0..4 {
            for o in 0..2 {
                let want: f64 = (0..3)
                    .map(|i| x.data()[r * 3 + i] * w.data()[o * 3 + i])
                    .sum::<f64>()
                    + b.data()[o];
                assert!((y.data()[r * 2 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 4]);
        assert!(linear(&x, &Tensor::zeros(&[2, 3]), None).is_err());
    }
}
