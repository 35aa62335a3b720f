//! Parameters, forward sessions and the basic layers the network is built from.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::ops::Conv2dSpec;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A named tensor with an accumulated gradient. Non-trainable entries hold
/// buffers such as batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        trainable: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.params[id.0].trainable)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of learnable scalars.
    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return shape_err(
                "set_value",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            );
        }
        p.value = value;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optionally backward) evaluation: a fresh tape bound to
/// a parameter store.
pub struct Session<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    mode: Mode,
    bound: HashMap<ParamId, Var>,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            bound: HashMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Runs backward from `loss` and overwrites every trainable parameter's
    /// `grad` (zeroed first).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        self.store.zero_grads();
        for (&id, &v) in &self.bound {
            let p = self.store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(v) {
                p.grad = g.clone();
            }
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.register(
            format!("{name}.weight"),
            fan_in_uniform(&[dout, din], din, rng),
            true,
        );
        let bias = bias.then(|| {
            store.register(
                format!("{name}.bias"),
                fan_in_uniform(&[dout], din, rng),
                true,
            )
        });
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let cin_g = cin / spec.groups;
        let fan_in = cin_g * kernel * kernel;
        let weight = store.register(
            format!("{name}.weight"),
            fan_in_uniform(&[cout, cin_g, kernel, kernel], fan_in, rng),
            true,
        );
        let bias = bias.then(|| {
            store.register(
                format!("{name}.bias"),
                fan_in_uniform(&[cout], fan_in, rng),
                true,
            )
        });
        Self { weight, bias, spec }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, w, b, self.spec)
    }
}

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batches_seen: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.register(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            ),
            running_var: store.register(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                false,
            ),
            batches_seen: store.register(
                format!("{name}.batches_seen"),
                Tensor::zeros(&[1]),
                false,
            ),
            momentum: BN_MOMENTUM,
            eps: NORM_EPS,
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running averages; eval mode uses the running averages and fails if
    /// they were never updated.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        let eps = T::lit(self.eps);
        match s.mode() {
            Mode::Train => {
                let (y, mean, var) = s.tape.batch_norm_train(x, g, b, eps)?;
                let m = T::lit(self.momentum);
                let store = s.store_mut();
                for (id, batch) in [(self.running_mean, &mean), (self.running_var, &var)] {
                    let run = &mut store.get_mut(id).value;
                    for (r, &v) in run.data_mut().iter_mut().zip(batch.data()) {
                        *r = (T::one() - m) * *r + m * v;
                    }
                }
                store.get_mut(self.batches_seen).value.data_mut()[0] += T::one();
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store();
                if store.value(self.batches_seen).item() <= T::zero() {
                    return Err(Error::Uninitialized(format!(
                        "batch norm `{}` evaluated before any running-statistics update",
                        store.get(self.gamma).name
                    )));
                }
                let mean = store.value(self.running_mean).clone();
                let var = store.value(self.running_var).clone();
                s.tape.batch_norm_eval(x, g, b, &mean, &var, eps)
            }
        }
    }
}

/// Layer normalization along one axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub axis: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        features: usize,
        axis: usize,
    ) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::ones(&[features]), true),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[features]), true),
            axis,
            eps: NORM_EPS,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.tape.layer_norm(x, g, b, self.axis, T::lit(self.eps))
    }
}

/// Convolution (no bias, batch norm supplies the shift), batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                cin,
                cout,
                kernel,
                spec,
                false,
                rng,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        s.tape.relu(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn count_single_pointwise_conv() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv2d::new(
            &mut store,
            "c",
            2,
            3,
            1,
            Conv2dSpec::default(),
            true,
            &mut rng,
        );
        assert_eq!(store.count_trainable(), 9);
    }

    #[test]
    fn count_depthwise_conv() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv2d::new(
            &mut store,
            "dw",
            4,
            4,
            3,
            Conv2dSpec::new(1, 1, 4),
            true,
            &mut rng,
        );
        assert_eq!(store.count_trainable(), 40);
    }

    #[test]
    fn batch_norm_eval_requires_statistics() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let x = Tensor::from_f64(&[1, 1, 1, 2], &[0.0, 2.0]).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval);
        let xv = s.input(x.clone());
        assert!(matches!(
            bn.forward(&mut s, xv),
            Err(Error::Uninitialized(_))
        ));
    }

    #[test]
    fn batch_norm_full_momentum_uses_batch_statistics() {
        let mut store = ParamStore::<f64>::new();
        let mut bn = BatchNorm2d::new(&mut store, "bn", 1);
        bn.momentum = 1.0;
        let x = Tensor::from_f64(&[1, 1, 1, 2], &[0.0, 2.0]).unwrap();
        let train_out = {
            let mut s = Session::new(&mut store, Mode::Train);
            let xv = s.input(x.clone());
            let y = bn.forward(&mut s, xv).unwrap();
            s.value(y).clone()
        };
        assert_eq!(store.value(bn.running_mean).data(), &[1.0]);
        assert_eq!(store.value(bn.running_var).data(), &[1.0]);
        let mut s = Session::new(&mut store, Mode::Eval);
        let xv = s.input(x);
        let y = bn.forward(&mut s, xv).unwrap();
        assert!(s.value(y).max_abs_diff(&train_out).unwrap() < 1e-12);
    }

    #[test]
    fn backward_fills_param_grads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng);
        let mut s = Session::new(&mut store, Mode::Train);
        let x = s.input(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let y = lin.forward(&mut s, x).unwrap();
        let loss = s.tape.sum(y).unwrap();
        s.backward(loss).unwrap();
        assert_eq!(
            store.get(lin.weight).grad.data(),
            &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        );
        assert_eq!(store.get(lin.bias.unwrap()).grad.data(), &[1.0, 1.0]);
    }
}
