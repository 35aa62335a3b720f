//! Multi-scale token-memory block.
//!
//! ```text
//! p   = mean(x, avgpool_3(x), avgpool_5(x), avgpool_7(x))
//! h   = p; repeat L times: h = DWConv(h); h = map(xLSTM(tokens(h)))
//! out = LN_channel(p) + x + h
//! ```
//!
//! Each stage of the pathway can be switched off, which replaces it by the
//! identity and removes its parameters.

use rand::Rng;

use crate::error::{arg_err, Result};
use crate::nn::{ConvBnRelu, LayerNorm, ParamStore, Session};
use crate::ops::{avg_pool2d, Conv2dSpec, PoolSpec};
use crate::scalar::Scalar;
use crate::sequence::{ScanOrder, XLstmConfig, XLstmLayer};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_POOL_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Debug, Clone, PartialEq)]
pub struct MstmConfig {
    /// Number of DWConv/xLSTM rounds.
    pub layers: usize,
    pub pool_kernels: Vec<usize>,
    pub enable_xlstm: bool,
    pub enable_pooling: bool,
    pub enable_dwconv: bool,
    pub xlstm: XLstmConfig,
    pub scan: ScanOrder,
}

impl Default for MstmConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            pool_kernels: DEFAULT_POOL_KERNELS.to_vec(),
            enable_xlstm: true,
            enable_pooling: true,
            enable_dwconv: true,
            xlstm: XLstmConfig::default(),
            scan: ScanOrder::Raster,
        }
    }
}

impl MstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return arg_err("mstm", "at least one layer is required");
        }
        if let Some(k) = self.pool_kernels.iter().find(|&&k| k % 2 == 0) {
            return arg_err("mstm", format!("pool kernel {k} is not odd"));
        }
        Ok(())
    }

    /// Kernels actually applied by the pooling stage.
    pub fn active_kernels(&self) -> &[usize] {
        if self.enable_pooling {
            &self.pool_kernels
        } else {
            &[]
        }
    }
}

/// Mean of the input and its same-size average pools.
pub fn multi_scale_pool<T: Scalar>(x: &Tensor<T>, kernels: &[usize]) -> Result<Tensor<T>> {
    let mut acc = x.clone();
    for &k in kernels {
        acc = acc.add(&avg_pool2d(x, PoolSpec::same(k))?)?;
    }
    Ok(acc.scale(T::one() / T::lit((kernels.len() + 1) as f64)))
}

impl<T: Scalar> Tape<T> {
    pub fn multi_scale_pool(&mut self, x: Var, kernels: &[usize]) -> Result<Var> {
        if kernels.is_empty() {
            return Ok(x);
        }
        let mut acc = x;
        for &k in kernels {
            let p = self.avg_pool2d(x, PoolSpec::same(k))?;
            acc = self.add(acc, p)?;
        }
        self.scale(acc, T::one() / T::lit((kernels.len() + 1) as f64))
    }
}

/// The block's terms, kept separate for inspection.
#[derive(Debug, Clone, Copy)]
pub struct MstmParts {
    pub pooled: Var,
    pub norm: Var,
    pub pathway: Var,
    pub out: Var,
}

#[derive(Debug, Clone)]
pub struct MstmBlock {
    pub channels: usize,
    pub cfg: MstmConfig,
    pub dwconv: Vec<ConvBnRelu>,
    pub xlstm: Vec<XLstmLayer>,
    pub norm: LayerNorm,
}

impl MstmBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &MstmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut dwconv = Vec::new();
        let mut xlstm = Vec::new();
        for l in 0..cfg.layers {
            if cfg.enable_dwconv {
                let spec = Conv2dSpec::new(1, 1, channels);
                dwconv.push(ConvBnRelu::new(
                    store,
                    &format!("{name}.dw{l}"),
                    channels,
                    channels,
                    3,
                    spec,
                    rng,
                ));
            }
            if cfg.enable_xlstm {
                xlstm.push(XLstmLayer::new(
                    store,
                    &format!("{name}.xlstm{l}"),
                    channels,
                    cfg.xlstm,
                    rng,
                )?);
            }
        }
        let norm = LayerNorm::new(store, &format!("{name}.norm"), channels, 1);
        Ok(Self {
            channels,
            cfg: cfg.clone(),
            dwconv,
            xlstm,
            norm,
        })
    }

    /// DWConv/xLSTM rounds applied to the pooled map.
    pub fn pathway<T: Scalar>(&self, s: &mut Session<'_, T>, p: Var) -> Result<Var> {
        let (h, w) = {
            let sh = s.tape.shape(p);
            (sh[2], sh[3])
        };
        let mut y = p;
        for l in 0..self.cfg.layers {
            if let Some(dw) = self.dwconv.get(l) {
                y = dw.forward(s, y)?;
            }
            if let Some(layer) = self.xlstm.get(l) {
                let tokens = s.tape.scan_to_tokens(y, self.cfg.scan)?;
                let tokens = layer.forward(s, tokens)?;
                y = s.tape.tokens_to_map(tokens, self.cfg.scan, h, w)?;
            }
        }
        Ok(y)
    }

    pub fn forward_parts<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<MstmParts> {
        let c = s.tape.shape(x).get(1).copied();
        if s.tape.shape(x).len() != 4 || c != Some(self.channels) {
            return crate::error::shape_err(
                "mstm",
                format!(
                    "expected [B, {}, H, W], got {:?}",
                    self.channels,
                    s.tape.shape(x)
                ),
            );
        }
        let pooled = s.tape.multi_scale_pool(x, self.cfg.active_kernels())?;
        let pathway = self.pathway(s, pooled)?;
        let norm = self.norm.forward(s, pooled)?;
        let nx = s.tape.add(norm, x)?;
        let out = s.tape.add(nx, pathway)?;
        Ok(MstmParts {
            pooled,
            norm,
            pathway,
            out,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(s, x)?.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradcheckOptions};
    use crate::nn::Mode;
    use crate::ops::{batch_norm_train, conv2d, layer_norm};
    use crate::sequence::{scan_to_tokens, tokens_to_map};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg_with(x: bool, p: bool, d: bool) -> MstmConfig {
        MstmConfig {
            enable_xlstm: x,
            enable_pooling: p,
            enable_dwconv: d,
            ..Default::default()
        }
    }

    fn pool_oracle(x: &Tensor<f64>, k: usize) -> Tensor<f64> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let r = (k / 2) as isize;
        let mut out = vec![0.0; h * w];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let (mut sum, mut n) = (0.0, 0.0);
                for di in -r..=r {
                    for dj in -r..=r {
                        let (y, z) = (i + di, j + dj);
                        if y >= 0 && y < h as isize && z >= 0 && z < w as isize {
                            sum += x.data()[(y * w as isize + z) as usize];
                            n += 1.0;
                        }
                    }
                }
                out[(i * w as isize + j) as usize] = sum / n;
            }
        }
        Tensor::from_vec(x.shape(), out).unwrap()
    }

    #[test]
    fn pooling_examples() {
        let c = Tensor::<f64>::full(&[1, 2, 5, 5], 0.75);
        assert_eq!(multi_scale_pool(&c, &DEFAULT_POOL_KERNELS).unwrap(), c);
        let x = Tensor::<f64>::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(multi_scale_pool(&x, &[]).unwrap(), x);
        let expect = x.add(&pool_oracle(&x, 3)).unwrap().scale(0.5);
        assert!(
            multi_scale_pool(&x, &[3])
                .unwrap()
                .max_abs_diff(&expect)
                .unwrap()
                < 1e-15
        );
    }

    fn run(store: &mut ParamStore<f64>, block: &MstmBlock, x: &Tensor<f64>) -> Tensor<f64> {
        let mut s = Session::new(store, Mode::Train);
        let xv = s.input(x.clone());
        let y = block.forward(&mut s, xv).unwrap();
        s.value(y).clone()
    }

    #[test]
    fn all_toggles_off_is_norm_plus_twice_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block =
            MstmBlock::new(&mut store, "m", 3, &cfg_with(false, false, false), &mut rng).unwrap();
        assert_eq!(store.count_trainable(), 6);
        let x = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let ln = layer_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1, 1e-5).unwrap();
        let expect = ln.add(&x).unwrap().add(&x).unwrap();
        assert_eq!(run(&mut store, &block, &x), expect);
    }

    #[test]
    fn shape_preserved_for_every_toggle_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for bits in 0..8u8 {
            let cfg = cfg_with(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
            for shape in [[1, 16, 8, 8], [2, 32, 16, 16]] {
                if bits != 7 && shape[1] == 32 {
                    continue;
                }
                let mut store = ParamStore::<f64>::new();
                let block = MstmBlock::new(&mut store, "m", shape[1], &cfg, &mut rng).unwrap();
                let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
                let y = run(&mut store, &block, &x);
                assert_eq!(y.shape(), &shape);
                assert!(y.is_finite());
            }
        }
    }

    #[test]
    fn output_decomposes_into_three_terms() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = MstmBlock::new(&mut store, "m", 4, &MstmConfig::default(), &mut rng).unwrap();
        let x = Tensor::uniform(&[1, 4, 5, 5], -1.0, 1.0, &mut rng);
        let mut s = Session::new(&mut store, Mode::Train);
        let xv = s.input(x.clone());
        let parts = block.forward_parts(&mut s, xv).unwrap();
        let (norm, path, out) = (
            s.value(parts.norm),
            s.value(parts.pathway),
            s.value(parts.out),
        );
        assert_eq!(&norm.add(&x).unwrap().add(path).unwrap(), out);
        let residual = out.sub(&x).unwrap().sub(norm).unwrap();
        assert!(residual.max_abs_diff(path).unwrap() < 1e-12);
    }

    #[test]
    fn matches_manual_composition() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = MstmConfig::default();
        let block = MstmBlock::new(&mut store, "m", 4, &cfg, &mut rng).unwrap();
        let x = Tensor::uniform(&[2, 4, 3, 5], -1.0, 1.0, &mut rng);
        let p = multi_scale_pool(&x, &cfg.pool_kernels).unwrap();
        let mut h = p.clone();
        for l in 0..cfg.layers {
            let dw = &block.dwconv[l];
            let v = |id| store.value(id);
            let y = conv2d(&h, v(dw.conv.weight), dw.conv.bias.map(v), dw.conv.spec).unwrap();
            let y = batch_norm_train(&y, v(dw.bn.gamma), v(dw.bn.beta), 1e-5)
                .unwrap()
                .y;
            let y = y.map(|a: f64| a.max(0.0));
            let t = scan_to_tokens(&y, cfg.scan).unwrap();
            let t = block.xlstm[l].eval(&store, &t).unwrap();
            h = tokens_to_map(&t, cfg.scan, 3, 5).unwrap();
        }
        let ln = layer_norm(
            &p,
            store.value(block.norm.gamma),
            store.value(block.norm.beta),
            1,
            1e-5,
        )
        .unwrap();
        let expect = ln.add(&x).unwrap().add(&h).unwrap();
        assert_eq!(run(&mut store, &block, &x), expect);
    }

    #[test]
    fn block_gradcheck() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = MstmBlock::new(&mut store, "m", 4, &MstmConfig::default(), &mut rng).unwrap();
        let x = Tensor::uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[1, 4, 6, 6], -1.0, 1.0, &mut rng);
        let xs = store.register("input", x, true);
        let report = gradcheck(
            &mut store,
            |s| {
                let xv = s.param(xs);
                let y = block.forward(s, xv)?;
                s.tape.dot_const(y, &w)
            },
            &GradcheckOptions {
                step: 1e-5,
                tolerance: 1e-4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
