//! Feature-map scanning and the bidirectional matrix-memory layer.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::memory::{mlstm_sequence, ChunkConfig, ForgetGate, MLstmProjections};
use crate::nn::{LayerNorm, Linear, ParamStore, Session};
use crate::ops::{layer_norm, linear};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Order in which the `H x W` sites of a map become tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanOrder {
    /// Row-major: token `t` is site `(t / W, t % W)`.
    #[default]
    Raster,
}

fn map_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => shape_err(op, format!("expected [B, C, H, W], got {shape:?}")),
    }
}

/// `[B, C, H, W]` to `[B, H*W, C]`.
pub fn scan_to_tokens<T: Scalar>(x: &Tensor<T>, order: ScanOrder) -> Result<Tensor<T>> {
    let (b, c, h, w) = map_dims(x.shape(), "scan_to_tokens")?;
    match order {
        ScanOrder::Raster => x.reshape(&[b, c, h * w])?.transpose(1, 2),
    }
}

/// Inverse of [`scan_to_tokens`] for an `h x w` map.
pub fn tokens_to_map<T: Scalar>(
    tokens: &Tensor<T>,
    order: ScanOrder,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (b, t, c) = token_dims(tokens.shape(), h, w)?;
    debug_assert_eq!(t, h * w);
    match order {
        ScanOrder::Raster => tokens.transpose(1, 2)?.into_reshape(&[b, c, h, w]),
    }
}

fn token_dims(shape: &[usize], h: usize, w: usize) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, t, c] if t == h * w => Ok((b, t, c)),
        _ => shape_err("tokens_to_map", format!("{shape:?} is not [B, {h}*{w}, C]")),
    }
}

/// Reverses token order of a `[B, T, C]` sequence.
pub fn flip_sequence<T: Scalar>(tokens: &Tensor<T>) -> Result<Tensor<T>> {
    if tokens.ndim() != 3 {
        return shape_err(
            "flip_sequence",
            format!("expected [B, T, C], got {:?}", tokens.shape()),
        );
    }
    tokens.flip_axis(1)
}

impl<T: Scalar> Tape<T> {
    pub fn scan_to_tokens(&mut self, x: Var, order: ScanOrder) -> Result<Var> {
        let (b, c, h, w) = map_dims(self.shape(x), "scan_to_tokens")?;
        match order {
            ScanOrder::Raster => {
                let flat = self.reshape(x, &[b, c, h * w])?;
                self.transpose(flat, 1, 2)
            }
        }
    }

    pub fn tokens_to_map(
        &mut self,
        tokens: Var,
        order: ScanOrder,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let (b, _, c) = token_dims(self.shape(tokens), h, w)?;
        match order {
            ScanOrder::Raster => {
                let t = self.transpose(tokens, 1, 2)?;
                self.reshape(t, &[b, c, h, w])
            }
        }
    }

    pub fn flip_sequence(&mut self, tokens: Var) -> Result<Var> {
        if self.shape(tokens).len() != 3 {
            return shape_err(
                "flip_sequence",
                format!("expected [B, T, C], got {:?}", self.shape(tokens)),
            );
        }
        self.flip(tokens, 1)
    }
}

/// Matrix-memory cell with learned projections, over `[B, T, Din]`.
#[derive(Debug, Clone)]
pub struct MLstm {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub i: Linear,
    pub f: Linear,
    pub o: Linear,
    pub heads: usize,
    pub forget: ForgetGate,
}

impl MLstm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        width: usize,
        heads: usize,
        forget: ForgetGate,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return crate::error::arg_err(
                "mlstm",
                format!("{heads} heads do not split width {width}"),
            );
        }
        let cell = Self {
            q: Linear::new(store, &format!("{name}.q"), din, width, false, rng),
            k: Linear::new(store, &format!("{name}.k"), din, width, false, rng),
            v: Linear::new(store, &format!("{name}.v"), din, width, false, rng),
            i: Linear::new(store, &format!("{name}.i"), din, heads, true, rng),
            f: Linear::new(store, &format!("{name}.f"), din, heads, true, rng),
            o: Linear::new(store, &format!("{name}.o"), din, width, true, rng),
            heads,
            forget,
        };
        for gate in [&cell.i, &cell.f] {
            let b = gate.bias.expect("gate bias");
            store.set_value(b, Tensor::zeros(&[heads]))?;
        }
        Ok(cell)
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        cfg: ChunkConfig,
    ) -> Result<Var> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, x)?;
        let width = s.tape.shape(k).last().copied().unwrap_or(1);
        let k = s
            .tape
            .scale(k, T::one() / T::lit((width / self.heads) as f64).sqrt())?;
        let v = self.v.forward(s, x)?;
        let i = self.i.forward(s, x)?;
        let f = self.f.forward(s, x)?;
        let o = self.o.forward(s, x)?;
        let o = s.tape.sigmoid(o)?;
        let h = s
            .tape
            .mlstm_cell(q, k, v, i, f, self.heads, self.forget, cfg)?;
        s.tape.mul(h, o)
    }

    /// Current parameter values as a standalone projection set.
    pub fn projections<T: Scalar>(&self, store: &ParamStore<T>) -> MLstmProjections<T> {
        let w = |l: &Linear| store.value(l.weight).clone();
        let b = |l: &Linear| store.value(l.bias.expect("gate bias")).clone();
        MLstmProjections {
            wq: w(&self.q),
            wk: w(&self.k),
            wv: w(&self.v),
            wi: w(&self.i),
            bi: b(&self.i),
            wf: w(&self.f),
            bf: b(&self.f),
            wo: w(&self.o),
            bo: b(&self.o),
            heads: self.heads,
            forget: self.forget,
        }
    }
}

/// One reading direction: optional pre-norm, input projection, cell.
#[derive(Debug, Clone)]
pub struct DirectionalPath {
    pub norm: Option<LayerNorm>,
    pub proj: Linear,
    pub cell: MLstm,
}

impl DirectionalPath {
    fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, cfg: ChunkConfig) -> Result<Var> {
        let y = match &self.norm {
            Some(n) => n.forward(s, x)?,
            None => x,
        };
        let y = self.proj.forward(s, y)?;
        self.cell.forward(s, y, cfg)
    }

    fn eval<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        cfg: ChunkConfig,
    ) -> Result<Tensor<T>> {
        let y = match &self.norm {
            Some(n) => layer_norm(
                x,
                store.value(n.gamma),
                store.value(n.beta),
                n.axis,
                T::lit(n.eps),
            )?,
            None => x.clone(),
        };
        let y = linear(
            &y,
            store.value(self.proj.weight),
            self.proj.bias.map(|b| store.value(b)),
        )?;
        let proj = self.cell.projections(store);
        let (b, t, c) = (y.shape()[0], y.shape()[1], y.shape()[2]);
        let mut out = Vec::with_capacity(b * t * c);
        for n in 0..b {
            let seq = Tensor::from_vec(&[t, c], y.data()[n * t * c..(n + 1) * t * c].to_vec())?;
            out.extend_from_slice(mlstm_sequence(&seq, &proj, cfg)?.data());
        }
        Tensor::from_vec(&[b, t, c], out)
    }
}

/// Layer settings shared by every xLSTM layer of a block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XLstmConfig {
    pub heads: usize,
    pub forget: ForgetGate,
    pub chunk: ChunkConfig,
}

impl Default for XLstmConfig {
    fn default() -> Self {
        Self {
            heads: 1,
            forget: ForgetGate::Exponential,
            chunk: ChunkConfig::default(),
        }
    }
}

/// Bidirectional residual layer over `[B, T, C]`:
/// `Out(Flip(M_b(Flip(L_b x))) * M_f(L_f(LN x))) + x`.
#[derive(Debug, Clone)]
pub struct XLstmLayer {
    pub forward_path: DirectionalPath,
    pub backward_path: DirectionalPath,
    pub out: Linear,
    pub cfg: XLstmConfig,
}

impl XLstmLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: XLstmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let forward_path = DirectionalPath {
            norm: Some(LayerNorm::new(store, &format!("{name}.norm"), channels, 2)),
            proj: Linear::new(
                store,
                &format!("{name}.fwd_in"),
                channels,
                channels,
                true,
                rng,
            ),
            cell: MLstm::new(
                store,
                &format!("{name}.fwd_cell"),
                channels,
                channels,
                cfg.heads,
                cfg.forget,
                rng,
            )?,
        };
        let backward_path = DirectionalPath {
            norm: None,
            proj: Linear::new(
                store,
                &format!("{name}.bwd_in"),
                channels,
                channels,
                true,
                rng,
            ),
            cell: MLstm::new(
                store,
                &format!("{name}.bwd_cell"),
                channels,
                channels,
                cfg.heads,
                cfg.forget,
                rng,
            )?,
        };
        let out = Linear::new(store, &format!("{name}.out"), channels, channels, true, rng);
        Ok(Self {
            forward_path,
            backward_path,
            out,
            cfg,
        })
    }

    /// The same parameters with the two reading directions exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            forward_path: self.backward_path.clone(),
            backward_path: self.forward_path.clone(),
            out: self.out.clone(),
            cfg: self.cfg,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let chunk = self.cfg.chunk;
        let fwd = self.forward_path.forward(s, x, chunk)?;
        let flipped = s.tape.flip_sequence(x)?;
        let bwd = self.backward_path.forward(s, flipped, chunk)?;
        let bwd = s.tape.flip_sequence(bwd)?;
        let mixed = s.tape.mul(bwd, fwd)?;
        let y = self.out.forward(s, mixed)?;
        s.tape.add(y, x)
    }

    /// Tape-free evaluation built from the pure tensor functions.
    pub fn eval<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 3 {
            return shape_err(
                "xlstm_layer",
                format!("expected [B, T, C], got {:?}", x.shape()),
            );
        }
        let chunk = self.cfg.chunk;
        let fwd = self.forward_path.eval(store, x, chunk)?;
        let bwd = flip_sequence(&self.backward_path.eval(store, &flip_sequence(x)?, chunk)?)?;
        let mixed = bwd.mul(&fwd)?;
        let y = linear(
            &mixed,
            store.value(self.out.weight),
            self.out.bias.map(|b| store.value(b)),
        )?;
        y.add(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradcheckOptions};
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(store: &mut ParamStore<f64>, c: usize, seed: u64) -> XLstmLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        XLstmLayer::new(store, "x", c, XLstmConfig::default(), &mut rng).unwrap()
    }

    fn run(store: &mut ParamStore<f64>, l: &XLstmLayer, x: &Tensor<f64>) -> Tensor<f64> {
        let mut s = Session::new(store, Mode::Eval);
        let xv = s.input(x.clone());
        let y = l.forward(&mut s, xv).unwrap();
        s.value(y).clone()
    }

    #[test]
    fn scan_examples() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 2], &[1.5, -2.0]).unwrap();
        let t = scan_to_tokens(&x, ScanOrder::Raster).unwrap();
        assert_eq!(t.shape(), &[1, 2, 1]);
        assert_eq!(t.data(), &[1.5, -2.0]);
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            scan_to_tokens(&x, ScanOrder::Raster).unwrap().data(),
            &[1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn scan_round_trip_multichannel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let t = scan_to_tokens(&x, ScanOrder::Raster).unwrap();
        assert_eq!(t.shape(), &[2, 20, 3]);
        // channel 2 of the token at row 1, col 3
        assert_eq!(
            t.data()[(1 * 20 + 8) * 3 + 2],
            x.data()[((1 * 3 + 2) * 4 + 1) * 5 + 3]
        );
        assert_eq!(tokens_to_map(&t, ScanOrder::Raster, 4, 5).unwrap(), x);
    }

    #[test]
    fn flip_examples() {
        let x = Tensor::<f64>::from_f64(&[1, 3, 1], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flip_sequence(&x).unwrap().data(), &[3.0, 2.0, 1.0]);
        assert_eq!(flip_sequence(&flip_sequence(&x).unwrap()).unwrap(), x);
        let one = Tensor::<f64>::from_f64(&[1, 1, 2], &[4.0, 5.0]).unwrap();
        assert_eq!(flip_sequence(&one).unwrap(), one);
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 8, 3);
        store
            .set_value(l.out.weight, Tensor::zeros(&[8, 8]))
            .unwrap();
        store
            .set_value(l.out.bias.unwrap(), Tensor::zeros(&[8]))
            .unwrap();
        let x = Tensor::uniform(&[2, 5, 8], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(run(&mut store, &l, &x), x);
    }

    #[test]
    fn output_shape_matches_input() {
        for (b, t, c) in [(1, 4, 8), (2, 9, 16)] {
            let mut store = ParamStore::new();
            let l = layer(&mut store, c, 5);
            let x = Tensor::uniform(&[b, t, c], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
            let y = run(&mut store, &l, &x);
            assert_eq!(y.shape(), x.shape());
            assert!(y.is_finite());
        }
    }

    #[test]
    fn tape_matches_composition_oracle() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 6, 7);
        let x = Tensor::uniform(&[2, 11, 6], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let tape = run(&mut store, &l, &x);
        assert_eq!(tape, l.eval(&store, &x).unwrap());
    }

    #[test]
    fn swapping_directions_commutes_with_flip() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 6, 9);
        let x = Tensor::uniform(&[2, 10, 6], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(10));
        let y = flip_sequence(&run(&mut store, &l, &x)).unwrap();
        let y_swapped = run(&mut store, &l.swapped(), &flip_sequence(&x).unwrap());
        assert!(y.max_abs_diff(&y_swapped).unwrap() < 1e-6);
    }

    #[test]
    fn layer_gradcheck() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::uniform(&[1, 6, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[1, 6, 4], -1.0, 1.0, &mut rng);
        let xs = store.register("input", x, true);
        let report = gradcheck(
            &mut store,
            |s| {
                let xv = s.param(xs);
                let y = l.forward(s, xv)?;
                s.tape.dot_const(y, &w)
            },
            &GradcheckOptions {
                step: 1e-6,
                tolerance: 1e-4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
