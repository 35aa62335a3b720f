//! Analytic forward-pass cost. One multiply-accumulate counts as two FLOPs;
//! biases, normalizations, pooling and elementwise gating are included.

use crate::error::Result;
use crate::model::{ModelConfig, STAGES};
use crate::mstm::MstmConfig;

pub fn conv_flops(
    cin: usize,
    cout: usize,
    kernel: usize,
    groups: usize,
    out_h: usize,
    out_w: usize,
    bias: bool,
) -> u64 {
    let macs = (kernel * kernel * cin * cout / groups) as u64 * (out_h * out_w) as u64;
    2 * macs
        + if bias {
            (cout * out_h * out_w) as u64
        } else {
            0
        }
}

pub fn linear_flops(tokens: usize, din: usize, dout: usize, bias: bool) -> u64 {
    let t = tokens as u64;
    2 * t * (din * dout) as u64 + if bias { t * dout as u64 } else { 0 }
}

/// Normalize plus affine: two FLOPs per element.
pub fn norm_flops(elements: usize) -> u64 {
    2 * elements as u64
}

fn conv_bn_relu(cin: usize, cout: usize, groups: usize, out_h: usize, out_w: usize) -> u64 {
    let n = cout * out_h * out_w;
    conv_flops(cin, cout, 3, groups, out_h, out_w, false) + norm_flops(n) + n as u64
}

/// Chunkwise matrix-memory cell over `t` tokens of width `d` split into
/// `heads`: intra-chunk scores and mixing `O(T S d)`, state carry and
/// readout `O(T d^2)`.
pub fn mlstm_cell_flops(t: usize, d: usize, heads: usize, chunk: usize) -> u64 {
    let s = chunk.clamp(1, t.max(1)) as u64;
    let dh = (d / heads.max(1)) as u64;
    let (t, h) = (t as u64, heads as u64);
    h * (4 * t * s * dh + 4 * t * dh * dh)
}

fn mlstm_flops(t: usize, c: usize, mstm: &MstmConfig) -> u64 {
    let x = &mstm.xlstm;
    let proj = 3 * linear_flops(t, c, c, false)
        + 2 * linear_flops(t, c, x.heads, true)
        + linear_flops(t, c, c, true);
    // Sigmoid output gate and its product.
    let gate = 2 * (t * c) as u64;
    proj + gate + mlstm_cell_flops(t, c, x.heads, x.chunk.chunk_size)
}

fn xlstm_layer_flops(t: usize, c: usize, mstm: &MstmConfig) -> u64 {
    let n = (t * c) as u64;
    let paths = 2 * (linear_flops(t, c, c, true) + mlstm_flops(t, c, mstm));
    norm_flops(t * c) + paths + n + linear_flops(t, c, c, true) + n
}

pub fn mstm_flops(c: usize, h: usize, w: usize, mstm: &MstmConfig) -> u64 {
    let n = c * h * w;
    let kernels = mstm.active_kernels();
    let mut total: u64 = kernels.iter().map(|&k| (k * k * n) as u64).sum();
    if !kernels.is_empty() {
        total += (kernels.len() * n + n) as u64;
    }
    for _ in 0..mstm.layers {
        if mstm.enable_dwconv {
            total += conv_bn_relu(c, c, c, h, w);
        }
        if mstm.enable_xlstm {
            total += xlstm_layer_flops(h * w, c, mstm);
        }
    }
    total + norm_flops(n) + 2 * n as u64
}

/// FLOPs of one forward pass on a single `h x w` image.
pub fn estimate_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    cfg.validate()?;
    let div = 1 << STAGES;
    if h % div != 0 || w % div != 0 {
        return crate::error::arg_err("flops", format!("input {h}x{w} is not divisible by {div}"));
    }
    let ch = cfg.channels;
    let c = ch.channels;
    let mut total = 0u64;
    let (mut hh, mut ww) = (h, w);
    let mut dims = Vec::with_capacity(STAGES);
    for k in 0..STAGES {
        let cin = if k == 0 { ch.input_channels } else { c[k - 1] };
        total += conv_bn_relu(cin, c[k], 1, hh, ww) + conv_bn_relu(c[k], c[k], 1, hh, ww);
        hh /= 2;
        ww /= 2;
        total += conv_bn_relu(c[k], c[k], 1, hh, ww);
        if k >= 3 {
            total += mstm_flops(c[k], hh, ww, &cfg.mstm);
        }
        dims.push((hh, ww));
    }
    for k in (0..STAGES).rev() {
        let (skip, out, (sh, sw)) = if k == 0 {
            (ch.input_channels, c[0], (h, w))
        } else {
            (c[k - 1], c[k - 1], dims[k - 1])
        };
        // Bilinear: four taps, three lerps per output element.
        total += 7 * (c[k] * sh * sw) as u64;
        total += conv_bn_relu(c[k] + skip, out, 1, sh, sw) + conv_bn_relu(out, out, 1, sh, sw);
        if k >= 3 {
            total += mstm_flops(out, sh, sw, &cfg.mstm);
        }
    }
    Ok(total + conv_flops(c[0], ch.num_classes, 1, 1, h, w, true))
}
