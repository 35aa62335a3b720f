//! Wall-clock timing of the matrix-memory cell in either evaluation mode.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::memory::{run_cell, CellInputs, ChunkConfig, EvalMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub len: usize,
    pub chunk: usize,
    pub mode: EvalMode,
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl TimingRecord {
    pub const HEADER: &'static str = "T,S,mode,mean_ms,std_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6}",
            self.len,
            self.chunk,
            self.mode.name(),
            self.mean_ms,
            self.std_ms
        )
    }
}

/// Random single-sequence cell inputs of width `heads * head_dim`.
#[derive(Debug, Clone)]
pub struct BenchInputs {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    i_pre: Vec<f32>,
    log_f: Vec<f32>,
    len: usize,
    heads: usize,
    head_dim: usize,
}

impl BenchInputs {
    pub fn random(len: usize, heads: usize, head_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = heads * head_dim;
        let mut draw = |n: usize, lo: f64, hi: f64| {
            Tensor::<f32>::uniform(&[n], lo, hi, &mut rng)
                .data()
                .to_vec()
        };
        let scale = 1.0 / (head_dim as f64).sqrt();
        Self {
            q: draw(len * width, -1.0, 1.0),
            k: draw(len * width, -scale, scale),
            v: draw(len * width, -1.0, 1.0),
            i_pre: draw(len * heads, -1.0, 1.0),
            log_f: draw(len * heads, -0.1, 0.0),
            len,
            heads,
            head_dim,
        }
    }

    pub fn cell(&self) -> CellInputs<'_, f32> {
        CellInputs {
            q: &self.q,
            k: &self.k,
            v: &self.v,
            i_pre: &self.i_pre,
            log_f: &self.log_f,
            len: self.len,
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }
}

/// Mean and sample standard deviation in milliseconds over `reps` timed
/// runs of `f`, after one untimed warm-up.
pub fn time_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    f()?;
    let mut samples = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, var.sqrt()))
}

pub fn time_cell(inputs: &BenchInputs, cfg: ChunkConfig, reps: usize) -> Result<TimingRecord> {
    let cell = inputs.cell();
    let (mean_ms, std_ms) = time_ms(reps, || run_cell(&cell, cfg).map(|_| ()))?;
    Ok(TimingRecord {
        len: inputs.len,
        chunk: cfg.effective_chunk(inputs.len),
        mode: cfg.mode,
        mean_ms,
        std_ms,
    })
}

/// Every `(T, S)` pair in chunkwise mode followed by one recurrent run per `T`.
pub fn sweep(
    lens: &[usize],
    chunks: &[usize],
    head_dim: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<TimingRecord>> {
    let mut out = Vec::new();
    for &len in lens {
        let inputs = BenchInputs::random(len, 1, head_dim, seed);
        for &s in chunks {
            out.push(time_cell(&inputs, ChunkConfig::chunkwise(s), reps)?);
        }
        out.push(time_cell(&inputs, ChunkConfig::recurrent(), reps)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_rows() {
        let recs = sweep(&[8, 16], &[4, 32], 4, 1, 0).unwrap();
        assert_eq!(recs.len(), 6);
        assert_eq!(recs[1].chunk, 8);
        assert_eq!(recs[2].mode, EvalMode::Recurrent);
        let row = recs[0].csv_row();
        assert!(row.starts_with("8,4,chunkwise,"), "{row}");
        assert!(recs.iter().all(|r| r.mean_ms >= 0.0 && r.std_ms >= 0.0));
    }
}
