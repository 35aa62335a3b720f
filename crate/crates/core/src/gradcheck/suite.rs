//! Named 64-bit gradient checks, from single primitives up to the full model.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, GradcheckOptions};
use crate::error::{Error, Result};
use crate::memory::{ChunkConfig, ForgetGate};
use crate::model::{ModelConfig, Preset, TmUnet};
use crate::mstm::{MstmBlock, MstmConfig};
use crate::nn::{ParamStore, Session};
use crate::ops::{Conv2dSpec, PoolSpec};
use crate::sequence::{MLstm, ScanOrder, XLstmConfig, XLstmLayer};
use crate::tape::{Activation, Var};
use crate::tensor::Tensor;
use crate::train::LossWeights;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
pub const PRIMITIVE_STEP: f64 = 1e-5;
/// Balances truncation against rounding for the gated recurrences.
pub const COMPOSITE_STEP: f64 = 5e-5;
/// Seed of the reference run. Elementwise relative error is brittle where a
/// gradient element nearly cancels, so the suite is pinned to one draw.
pub const DEFAULT_SEED: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Cell,
    Xlstm,
    Mstm,
    Model,
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "primitives" => Scope::Primitives,
            "cell" => Scope::Cell,
            "xlstm" => Scope::Xlstm,
            "mstm" => Scope::Mstm,
            "model" => Scope::Model,
            "all" => Scope::All,
            _ => {
                return Err(Error::Config {
                    key: "scope".into(),
                    msg: format!("`{s}` is not one of primitives, cell, xlstm, mstm, model, all"),
                })
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Parameter, analytic and numeric value at the worst element.
    pub worst: Option<(String, f64, f64)>,
}

impl CaseResult {
    fn from_report(name: &str, report: &super::GradcheckReport) -> Self {
        Self {
            name: name.into(),
            max_rel_error: report.max_rel_error(),
            tolerance: report.tolerance,
            checked: report.checked(),
            skipped: report.skipped(),
            worst: report
                .worst()
                .map(|p| (p.name.clone(), p.worst_analytic, p.worst_numeric)),
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.checked > 0
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err {:.3e} (tol {:.0e}) checked {} skipped {} {}",
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.checked,
            self.skipped,
            if self.passed() { "ok" } else { "FAIL" }
        )?;
        match &self.worst {
            Some((p, a, n)) if !self.passed() => {
                write!(f, " at {p}: analytic {a:.6e} numeric {n:.6e}")
            }
            _ => Ok(()),
        }
    }
}

/// Tensor in `[lo, hi]` whose entries are at least `gap` away from zero.
fn away_from_zero(
    shape: &[usize],
    lo: f64,
    hi: f64,
    gap: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<f64> {
    let t = Tensor::uniform(shape, lo, hi, rng);
    t.map(|v: f64| {
        if v.abs() < gap {
            v + gap.copysign(v) * 2.0
        } else {
            v
        }
    })
}

/// Random weights of mean size 1/N. The relative-error floor is absolute, so
/// the checked scalar is kept small enough that one ulp of it, divided by the
/// step, stays below the floor where a gradient is exactly zero.
fn contraction(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product::<usize>() as f64;
    Tensor::uniform(shape, -1.0, 1.0, rng).scale(1.0 / n)
}

/// Checks `f` with each input registered as a trainable leaf, contracted
/// against fixed random weights.
fn case<F>(
    name: &str,
    tol: f64,
    step: f64,
    inputs: Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
    f: F,
) -> Result<CaseResult>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.register(format!("{name}.in{i}"), t, true))
        .collect();
    let out_shape = {
        let mut s = Session::new(&mut store, crate::nn::Mode::Train);
        let vs: Vec<Var> = ids.iter().map(|&id| s.param(id)).collect();
        let y = f(&mut s, &vs)?;
        s.tape.shape(y).to_vec()
    };
    let w = contraction(&out_shape, rng);
    let report = gradcheck(
        &mut store,
        |s| {
            let vs: Vec<Var> = ids.iter().map(|&id| s.param(id)).collect();
            let y = f(s, &vs)?;
            s.tape.dot_const(y, &w)
        },
        &GradcheckOptions {
            step,
            tolerance: tol,
            ..Default::default()
        },
    )?;
    Ok(CaseResult::from_report(name, &report))
}

/// Checks every trainable parameter of `store` (inputs included if registered).
fn store_case<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    opts: GradcheckOptions,
    f: F,
) -> Result<CaseResult>
where
    F: FnMut(&mut Session<'_, f64>) -> Result<Var>,
{
    let report = gradcheck(store, f, &opts)?;
    Ok(CaseResult::from_report(name, &report))
}

pub fn primitives(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let (tol, h) = (PRIMITIVE_TOLERANCE, PRIMITIVE_STEP);
    let u = |s: &[usize], r: &mut ChaCha8Rng| Tensor::<f64>::uniform(s, -1.0, 1.0, r);
    let mut out = Vec::new();
    let (a, b) = (u(&[2, 3, 4], r), u(&[2, 3, 4], r));
    out.push(case(
        "add",
        tol,
        h,
        vec![a.clone(), b.clone()],
        r,
        |s, v| s.tape.add(v[0], v[1]),
    )?);
    out.push(case(
        "sub",
        tol,
        h,
        vec![a.clone(), b.clone()],
        r,
        |s, v| s.tape.sub(v[0], v[1]),
    )?);
    out.push(case(
        "mul",
        tol,
        h,
        vec![a.clone(), b.clone()],
        r,
        |s, v| s.tape.mul(v[0], v[1]),
    )?);
    out.push(case("scale", tol, h, vec![a.clone()], r, |s, v| {
        s.tape.scale(v[0], -1.7)
    })?);
    let kinked = away_from_zero(&[2, 3, 4], -1.0, 1.0, 0.05, r);
    out.push(case("relu", tol, h, vec![kinked], r, |s, v| {
        s.tape.relu(v[0])
    })?);
    for kind in [Activation::Sigmoid, Activation::Exp, Activation::Tanh] {
        out.push(case(
            kind.name(),
            tol,
            h,
            vec![a.clone()],
            r,
            move |s, v| s.tape.activation(v[0], kind),
        )?);
    }
    out.push(case("sum", tol, h, vec![a.clone()], r, |s, v| {
        s.tape.sum(v[0])
    })?);
    out.push(case("mean", tol, h, vec![a.clone()], r, |s, v| {
        s.tape.mean(v[0])
    })?);
    out.push(case("reshape", tol, h, vec![a.clone()], r, |s, v| {
        s.tape.reshape(v[0], &[6, 4])
    })?);
    out.push(case("transpose", tol, h, vec![a.clone()], r, |s, v| {
        s.tape.transpose(v[0], 0, 2)
    })?);
    out.push(case("flip", tol, h, vec![a.clone()], r, |s, v| {
        s.tape.flip(v[0], 1)
    })?);
    out.push(case(
        "concat",
        tol,
        h,
        vec![a.clone(), u(&[2, 2, 4], r)],
        r,
        |s, v| s.tape.concat(&[v[0], v[1]], 1),
    )?);
    out.push(case(
        "linear",
        tol,
        h,
        vec![u(&[2, 3, 4], r), u(&[5, 4], r), u(&[5], r)],
        r,
        |s, v| s.tape.linear(v[0], v[1], Some(v[2])),
    )?);
    let img = u(&[2, 4, 5, 5], r);
    for (name, wshape, spec, bias) in [
        ("conv2d", [3, 4, 3, 3], Conv2dSpec::new(1, 1, 1), true),
        (
            "conv2d_stride2",
            [3, 4, 3, 3],
            Conv2dSpec::new(2, 1, 1),
            false,
        ),
        (
            "conv2d_grouped",
            [6, 2, 3, 3],
            Conv2dSpec::new(1, 0, 2),
            true,
        ),
        (
            "conv2d_depthwise",
            [4, 1, 3, 3],
            Conv2dSpec::new(1, 1, 4),
            false,
        ),
        (
            "conv2d_pointwise",
            [2, 4, 1, 1],
            Conv2dSpec::default(),
            true,
        ),
    ] {
        let mut inputs = vec![img.clone(), u(&wshape, r)];
        if bias {
            inputs.push(u(&[wshape[0]], r));
        }
        out.push(case(name, tol, h, inputs, r, move |s, v| {
            s.tape.conv2d(v[0], v[1], v.get(2).copied(), spec)
        })?);
    }
    let (gamma, beta) = (Tensor::uniform(&[4], 0.5, 1.5, r), u(&[4], r));
    out.push(case(
        "batch_norm_train",
        tol,
        h,
        vec![img.clone(), gamma.clone(), beta.clone()],
        r,
        |s, v| Ok(s.tape.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
    )?);
    let (mean, var) = (u(&[4], r), Tensor::uniform(&[4], 0.5, 2.0, r));
    out.push(case(
        "batch_norm_eval",
        tol,
        h,
        vec![img.clone(), gamma.clone(), beta.clone()],
        r,
        move |s, v| s.tape.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5),
    )?);
    out.push(case(
        "layer_norm_channel",
        tol,
        h,
        vec![img.clone(), gamma.clone(), beta.clone()],
        r,
        |s, v| s.tape.layer_norm(v[0], v[1], v[2], 1, 1e-5),
    )?);
    out.push(case(
        "layer_norm_last",
        tol,
        h,
        vec![u(&[2, 3, 4], r), gamma, beta],
        r,
        |s, v| s.tape.layer_norm(v[0], v[1], v[2], 2, 1e-5),
    )?);
    out.push(case(
        "avg_pool_same5",
        tol,
        h,
        vec![img.clone()],
        r,
        |s, v| s.tape.avg_pool2d(v[0], PoolSpec::same(5)),
    )?);
    out.push(case(
        "multi_scale_pool",
        tol,
        h,
        vec![img.clone()],
        r,
        |s, v| s.tape.multi_scale_pool(v[0], &[3, 5, 7]),
    )?);
    out.push(case(
        "bilinear_upsample",
        tol,
        h,
        vec![u(&[1, 2, 3, 4], r)],
        r,
        |s, v| s.tape.bilinear_upsample2d(v[0], 6, 8),
    )?);
    out.push(case(
        "scan_to_tokens",
        tol,
        h,
        vec![img.clone()],
        r,
        |s, v| s.tape.scan_to_tokens(v[0], ScanOrder::Raster),
    )?);
    out.push(case(
        "tokens_to_map",
        tol,
        h,
        vec![u(&[2, 6, 3], r)],
        r,
        |s, v| s.tape.tokens_to_map(v[0], ScanOrder::Raster, 2, 3),
    )?);
    out.push(case(
        "flip_sequence",
        tol,
        h,
        vec![u(&[2, 6, 3], r)],
        r,
        |s, v| s.tape.flip_sequence(v[0]),
    )?);
    let z = Tensor::uniform(&[2, 1, 3, 3], -2.0, 2.0, r);
    let y = Tensor::uniform(&[2, 1, 3, 3], 0.0, 1.0, r).map(|v: f64| v.round());
    let (y1, y2) = (y.clone(), y.clone());
    out.push(case(
        "bce_loss",
        tol,
        h,
        vec![z.clone()],
        r,
        move |s, v| s.tape.bce_loss(v[0], &y1),
    )?);
    out.push(case(
        "dice_loss",
        tol,
        h,
        vec![z.clone()],
        r,
        move |s, v| s.tape.dice_loss(v[0], &y2, 1.0),
    )?);
    out.push(case("joint_loss", tol, h, vec![z], r, move |s, v| {
        s.tape.joint_loss(v[0], &y, LossWeights::default())
    })?);
    Ok(out)
}

/// The matrix-memory cell alone and inside its projection module.
pub fn cell(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let (b, t, width) = (2, 8, 4);
    for forget in [ForgetGate::Exponential, ForgetGate::Sigmoid] {
        let f_range = if forget == ForgetGate::Exponential {
            (-1.0, 0.0)
        } else {
            (0.0, 2.0)
        };
        for (label, cfg) in [
            ("recurrent", ChunkConfig::recurrent()),
            ("chunk3", ChunkConfig::chunkwise(3)),
        ] {
            for heads in [1, 2] {
                let inputs = vec![
                    Tensor::uniform(&[b, t, width], -1.0, 1.0, r),
                    Tensor::uniform(&[b, t, width], -1.0, 1.0, r),
                    Tensor::uniform(&[b, t, width], -1.0, 1.0, r),
                    Tensor::uniform(&[b, t, heads], -1.0, 1.0, r),
                    Tensor::uniform(&[b, t, heads], f_range.0, f_range.1, r),
                ];
                let name = format!("mlstm_cell_{forget:?}_{label}_h{heads}").to_lowercase();
                out.push(case(
                    &name,
                    COMPOSITE_TOLERANCE,
                    COMPOSITE_STEP,
                    inputs,
                    r,
                    move |s, v| {
                        s.tape
                            .mlstm_cell(v[0], v[1], v[2], v[3], v[4], heads, forget, cfg)
                    },
                )?);
            }
        }
    }
    let mut store = ParamStore::new();
    let m = MLstm::new(
        &mut store,
        "mlstm",
        width,
        width,
        1,
        ForgetGate::Exponential,
        r,
    )?;
    let x = Tensor::uniform(&[1, t, width], -1.0, 1.0, r);
    let w = contraction(&[1, t, width], r);
    let xs = store.register("input", x, true);
    let opts = GradcheckOptions {
        step: COMPOSITE_STEP,
        tolerance: COMPOSITE_TOLERANCE,
        ..Default::default()
    };
    out.push(store_case("mlstm_sequence", &mut store, opts, |s| {
        let xv = s.param(xs);
        let y = m.forward(s, xv, ChunkConfig::default())?;
        s.tape.dot_const(y, &w)
    })?);
    Ok(out)
}

pub fn xlstm(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = XLstmLayer::new(&mut store, "xlstm", 4, XLstmConfig::default(), &mut rng)?;
    randomize_norm_affines(&mut store, &mut rng)?;
    let x = Tensor::uniform(&[1, 6, 4], -1.0, 1.0, &mut rng);
    let w = contraction(&[1, 6, 4], &mut rng);
    let xs = store.register("input", x, true);
    let opts = GradcheckOptions {
        step: COMPOSITE_STEP,
        tolerance: COMPOSITE_TOLERANCE,
        ..Default::default()
    };
    Ok(vec![store_case("xlstm_layer", &mut store, opts, |s| {
        let xv = s.param(xs);
        let y = layer.forward(s, xv)?;
        s.tape.dot_const(y, &w)
    })?])
}

/// Moves norm scales and shifts off their initial values so that no ReLU
/// sits on its kink by construction.
fn randomize_norm_affines(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        let (lo, hi) = if p.name.ends_with(".gamma") {
            (0.5, 1.5)
        } else if p.name.ends_with(".beta") {
            (-0.5, 0.5)
        } else {
            continue;
        };
        let v = Tensor::uniform(p.value.shape(), lo, hi, rng);
        store.set_value(id, v)?;
    }
    Ok(())
}

pub fn mstm(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (c, side) in [(4, 6), (8, 8)] {
        let mut store = ParamStore::new();
        let block = MstmBlock::new(&mut store, "mstm", c, &MstmConfig::default(), &mut rng)?;
        randomize_norm_affines(&mut store, &mut rng)?;
        let x = Tensor::uniform(&[1, c, side, side], -1.0, 1.0, &mut rng);
        let w = contraction(&[1, c, side, side], &mut rng);
        let xs = store.register("input", x, true);
        let opts = GradcheckOptions {
            step: COMPOSITE_STEP,
            tolerance: COMPOSITE_TOLERANCE,
            seed,
            ..Default::default()
        };
        out.push(store_case(
            &format!("mstm_block_1x{c}x{side}x{side}"),
            &mut store,
            opts,
            |s| {
                let xv = s.param(xs);
                let y = block.forward(s, xv)?;
                s.tape.dot_const(y, &w)
            },
        )?);
    }
    Ok(out)
}

/// Joint loss through the tiny preset on one 32x32 image; two sampled
/// elements per parameter tensor. Both loss weights are divided by 100 for
/// the same reason as [`contraction`]: some gradients are exactly zero (an
/// input-gate bias shift cancels in the stabilized readout).
pub fn model(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = TmUnet::new(&mut store, &ModelConfig::preset(Preset::Tiny), &mut rng)?;
    randomize_norm_affines(&mut store, &mut rng)?;
    let x = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let y = Tensor::from_vec(
        &[1, 1, 32, 32],
        (0..1024).map(|_| rng.gen_range(0..2) as f64).collect(),
    )?;
    let d = LossWeights::default();
    let weights = LossWeights {
        bce: d.bce / 100.0,
        dice: d.dice / 100.0,
    };
    let opts = GradcheckOptions {
        step: COMPOSITE_STEP,
        tolerance: COMPOSITE_TOLERANCE,
        max_elements_per_param: Some(2),
        seed,
        ..Default::default()
    };
    Ok(vec![store_case(
        "tiny_model_joint_loss",
        &mut store,
        opts,
        |s| {
            let xv = s.input(x.clone());
            let z = net.forward(s, xv)?;
            s.tape.joint_loss(z, &y, weights)
        },
    )?])
}

pub fn run(scope: Scope, seed: u64) -> Result<Vec<CaseResult>> {
    Ok(match scope {
        Scope::Primitives => primitives(seed)?,
        Scope::Cell => cell(seed)?,
        Scope::Xlstm => xlstm(seed)?,
        Scope::Mstm => mstm(seed)?,
        Scope::Model => model(seed)?,
        Scope::All => {
            let mut v = primitives(seed)?;
            v.extend(cell(seed)?);
            v.extend(xlstm(seed)?);
            v.extend(mstm(seed)?);
            v.extend(model(seed)?);
            v
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names() {
        assert_eq!("mstm".parse::<Scope>().unwrap(), Scope::Mstm);
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn primitives_pass_at_reference_seed() {
        for case in primitives(DEFAULT_SEED).unwrap() {
            assert!(case.passed(), "{case}");
        }
    }
}
