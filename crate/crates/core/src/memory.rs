//! Token-memory recurrence.
//!
//! Contains the scalar LSTM reference step, the exponential input gate and
//! the sigmoid/exponential forget gate, and the matrix-memory cell:
//!
//! ```text
//! m_t = max(log f_t + m_{t-1}, i~_t)
//! i'  = exp(i~_t - m_t),   f' = exp(log f_t + m_{t-1} - m_t)
//! C_t = f' C_{t-1} + i' v_t k_t^T
//! n_t = f' n_{t-1} + i' k_t
//! h_t = o_t * C_t q_t / max(|n_t . q_t|, 1)
//! ```
//!
//! `C`, `n` are stored already divided by `exp(m)`, so every exponent the
//! cell evaluates is non-positive. The sequence can be evaluated step by
//! step ([`EvalMode::Recurrent`]) or in chunks of `S` tokens
//! ([`EvalMode::Chunkwise`]): inside a chunk the outputs are an
//! attention-like weighted sum over the chunk's tokens plus a read of the
//! carried state, and only the chunk boundary state is materialized. Both
//! modes compute the same function; the backward pass uses the chunkwise
//! form with reverse-carried state gradients.

use rand::Rng;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::nn::fan_in_uniform;
use crate::ops::linear;
use crate::scalar::Scalar;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::{gemm, Mat, Tensor};

/// Activation of the forget gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForgetGate {
    Sigmoid,
    Exponential,
}

impl ForgetGate {
    /// `log f` for a pre-activation.
    pub fn log_value<T: Scalar>(self, pre: T) -> T {
        match self {
            ForgetGate::Exponential => pre,
            // log(sigmoid(x)) = -softplus(-x)
            ForgetGate::Sigmoid => -softplus(-pre),
        }
    }

    /// `d log f / d pre`.
    pub fn log_derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            ForgetGate::Exponential => T::one(),
            ForgetGate::Sigmoid => sigmoid(-pre),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ForgetGate::Sigmoid => "sigmoid",
            ForgetGate::Exponential => "exponential",
        }
    }
}

impl std::str::FromStr for ForgetGate {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sigmoid" => Ok(ForgetGate::Sigmoid),
            "exponential" | "exp" => Ok(ForgetGate::Exponential),
            _ => Err(format!(
                "unknown forget gate `{s}` (expected sigmoid|exponential)"
            )),
        }
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Input-weight, recurrent-weight and bias of one scalar gate.
#[derive(Debug, Clone)]
pub struct GateParams<T> {
    pub w: Tensor<T>,
    pub r: T,
    pub b: T,
}

/// A gate's pre-activation, activation and log-activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateValue<T> {
    pub pre: T,
    pub value: T,
    pub log_value: T,
}

fn gate_pre<T: Scalar>(x: &Tensor<T>, h_prev: T, p: &GateParams<T>) -> Result<T> {
    if p.w.shape() != x.shape() {
        return shape_err(
            "gate",
            format!("weights {:?} vs input {:?}", p.w.shape(), x.shape()),
        );
    }
    Ok(p.w.mul(x)?.sum() + p.r * h_prev + p.b)
}

/// `i = exp(w.x + r h + b)`; the pre-activation is kept for stabilization.
pub fn exp_input_gate<T: Scalar>(
    x: &Tensor<T>,
    h_prev: T,
    p: &GateParams<T>,
) -> Result<GateValue<T>> {
    let pre = gate_pre(x, h_prev, p)?;
    Ok(GateValue {
        pre,
        value: pre.exp(),
        log_value: pre,
    })
}

pub fn forget_gate<T: Scalar>(
    x: &Tensor<T>,
    h_prev: T,
    p: &GateParams<T>,
    kind: ForgetGate,
) -> Result<GateValue<T>> {
    let pre = gate_pre(x, h_prev, p)?;
    let value = match kind {
        ForgetGate::Exponential => pre.exp(),
        ForgetGate::Sigmoid => sigmoid(pre),
    };
    Ok(GateValue {
        pre,
        value,
        log_value: kind.log_value(pre),
    })
}

/// Cell and hidden vectors of the classical LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarLstmState<T> {
    pub c: Tensor<T>,
    pub h: Tensor<T>,
}

/// Cell output nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellActivation {
    Identity,
    Tanh,
}

/// `c_t = f * c_{t-1} + i * z`, `h_t = o * psi(c_t)`.
pub fn lstm_scalar_step<T: Scalar>(
    state: &ScalarLstmState<T>,
    z: &Tensor<T>,
    i: &Tensor<T>,
    f: &Tensor<T>,
    o: &Tensor<T>,
    psi: CellActivation,
) -> Result<ScalarLstmState<T>> {
    let c = f.mul(&state.c)?.add(&i.mul(z)?)?;
    let activated = match psi {
        CellActivation::Identity => c.clone(),
        CellActivation::Tanh => c.map(|v| v.tanh()),
    };
    let h = o.mul(&activated)?;
    c.ensure_finite("lstm_scalar_step")?;
    h.ensure_finite("lstm_scalar_step")?;
    Ok(ScalarLstmState { c, h })
}

/// Matrix memory of every head: `c` is `[heads, d, d]` (rows indexed by
/// value, columns by key), `n` is `[heads, d]`, `m` is `[heads]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixMemoryState<T> {
    pub c: Tensor<T>,
    pub n: Tensor<T>,
    pub m: Tensor<T>,
}

impl<T: Scalar> MatrixMemoryState<T> {
    /// Empty memory with stabilizer `m = 0`.
    pub fn zeros(heads: usize, d: usize) -> Self {
        Self {
            c: Tensor::zeros(&[heads, d, d]),
            n: Tensor::zeros(&[heads, d]),
            m: Tensor::zeros(&[heads]),
        }
    }

    pub fn heads(&self) -> usize {
        self.m.numel()
    }

    pub fn head_dim(&self) -> usize {
        self.n.shape()[1]
    }

    fn head(&self, h: usize) -> HeadState<T> {
        let d = self.head_dim();
        HeadState {
            c: self.c.data()[h * d * d..(h + 1) * d * d].to_vec(),
            n: self.n.data()[h * d..(h + 1) * d].to_vec(),
            m: self.m.data()[h],
        }
    }

    fn set_head(&mut self, h: usize, s: &HeadState<T>) {
        let d = self.head_dim();
        self.c.data_mut()[h * d * d..(h + 1) * d * d].copy_from_slice(&s.c);
        self.n.data_mut()[h * d..(h + 1) * d].copy_from_slice(&s.n);
        self.m.data_mut()[h] = s.m;
    }

    pub fn ensure_finite(&self) -> Result<()> {
        self.c.ensure_finite("matrix memory C")?;
        self.n.ensure_finite("matrix memory n")?;
        self.m.ensure_finite("matrix memory m")
    }
}

#[derive(Debug, Clone)]
struct HeadState<T> {
    c: Vec<T>,
    n: Vec<T>,
    m: T,
}

impl<T: Scalar> HeadState<T> {
    fn zeros(d: usize) -> Self {
        Self {
            c: vec![T::zero(); d * d],
            n: vec![T::zero(); d],
            m: T::zero(),
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// One stabilized update plus readout for a single head. Returns which
/// side won the stabilizer max and whether the denominator clamp was active.
fn step_head<T: Scalar>(
    st: &mut HeadState<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: T,
    log_f: T,
    h: &mut [T],
) -> u64 {
    let d = q.len();
    let m_new = (log_f + st.m).max(i_pre);
    let fp = (log_f + st.m - m_new).exp();
    let ip = (i_pre - m_new).exp();
    for r in 0..d {
        let row = &mut st.c[r * d..(r + 1) * d];
        let vr = ip * v[r];
        for (cv, &kv) in row.iter_mut().zip(k) {
            *cv = fp * *cv + vr * kv;
        }
    }
    for (nv, &kv) in st.n.iter_mut().zip(k) {
        *nv = fp * *nv + ip * kv;
    }
    let input_wins = i_pre > log_f + st.m;
    st.m = m_new;
    let nq = dot(&st.n, q).abs();
    let den = nq.max(T::one());
    for r in 0..d {
        h[r] = dot(&st.c[r * d..(r + 1) * d], q) / den;
    }
    input_wins as u64 | ((nq > T::one()) as u64) << 1
}

/// Same recurrence with the stabilizer pinned at zero. Test hook showing the
/// stabilizer is what keeps large gate pre-activations finite.
#[doc(hidden)]
pub fn step_head_unstabilized<T: Scalar>(
    c: &mut [T],
    n: &mut [T],
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: T,
    log_f: T,
    h: &mut [T],
) {
    let mut st = HeadState {
        c: c.to_vec(),
        n: n.to_vec(),
        m: T::zero(),
    };
    let d = q.len();
    let (fp, ip) = (log_f.exp(), i_pre.exp());
    for r in 0..d {
        for j in 0..d {
            st.c[r * d + j] = fp * st.c[r * d + j] + ip * v[r] * k[j];
        }
    }
    for j in 0..d {
        st.n[j] = fp * st.n[j] + ip * k[j];
    }
    let den = dot(&st.n, q).abs().max(T::one());
    for r in 0..d {
        h[r] = dot(&st.c[r * d..(r + 1) * d], q) / den;
    }
    c.copy_from_slice(&st.c);
    n.copy_from_slice(&st.n);
}

/// Per-token cell inputs for one sequence: `q`, `k`, `v` are `[T, heads*d]`
/// row-major (`k` already scaled), `i_pre`/`log_f` are `[T, heads]`.
#[derive(Debug, Clone, Copy)]
pub struct CellInputs<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub i_pre: &'a [T],
    pub log_f: &'a [T],
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl<'a, T: Scalar> CellInputs<'a, T> {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn check(&self) -> Result<()> {
        let w = self.width();
        if self.len == 0 || w == 0 {
            return arg_err("mlstm", "empty sequence or head dimension");
        }
        for (name, buf, cols) in [
            ("q", self.q, w),
            ("k", self.k, w),
            ("v", self.v, w),
            ("i_pre", self.i_pre, self.heads),
            ("log_f", self.log_f, self.heads),
        ] {
            if buf.len() != self.len * cols {
                return shape_err(
                    "mlstm",
                    format!(
                        "{name} has {} values, expected {}",
                        buf.len(),
                        self.len * cols
                    ),
                );
            }
        }
        Ok(())
    }

    /// Contiguous `[T, d]` copies of head `h`'s q/k/v and its `[T]` gates.
    fn head(&self, h: usize) -> HeadInputs<T> {
        let (w, d, len) = (self.width(), self.head_dim, self.len);
        let gather = |src: &[T]| {
            let mut out = Vec::with_capacity(len * d);
            for t in 0..len {
                out.extend_from_slice(&src[t * w + h * d..t * w + (h + 1) * d]);
            }
            out
        };
        HeadInputs {
            q: gather(self.q),
            k: gather(self.k),
            v: gather(self.v),
            i_pre: (0..len).map(|t| self.i_pre[t * self.heads + h]).collect(),
            log_f: (0..len).map(|t| self.log_f[t * self.heads + h]).collect(),
        }
    }
}

struct HeadInputs<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    i_pre: Vec<T>,
    log_f: Vec<T>,
}

fn scatter_head<T: Scalar>(dst: &mut [T], src: &[T], h: usize, d: usize, width: usize) {
    for (t, row) in src.chunks(d).enumerate() {
        dst[t * width + h * d..t * width + (h + 1) * d].copy_from_slice(row);
    }
}

/// Step-by-step evaluation. Returns `h~` as `[T, heads*d]` and updates `state`.
pub fn recurrent_forward<T: Scalar>(
    inp: &CellInputs<'_, T>,
    state: &mut MatrixMemoryState<T>,
) -> Result<Vec<T>> {
    recurrent_impl(inp, state, &mut Vec::new())
}

/// `branches` receives one code per head and token identifying the smooth
/// piece the evaluation ran on.
fn recurrent_impl<T: Scalar>(
    inp: &CellInputs<'_, T>,
    state: &mut MatrixMemoryState<T>,
    branches: &mut Vec<u64>,
) -> Result<Vec<T>> {
    inp.check()?;
    check_state(inp, state)?;
    let (w, d) = (inp.width(), inp.head_dim);
    let mut out = vec![T::zero(); inp.len * w];
    for h in 0..inp.heads {
        let hi = inp.head(h);
        let mut st = state.head(h);
        let mut ht = vec![T::zero(); d];
        for t in 0..inp.len {
            let r = t * d..(t + 1) * d;
            branches.push(step_head(
                &mut st,
                &hi.q[r.clone()],
                &hi.k[r.clone()],
                &hi.v[r],
                hi.i_pre[t],
                hi.log_f[t],
                &mut ht,
            ));
            out[t * w + h * d..t * w + (h + 1) * d].copy_from_slice(&ht);
        }
        state.set_head(h, &st);
    }
    state.ensure_finite()?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "mlstm recurrent",
        });
    }
    Ok(out)
}

fn check_state<T: Scalar>(inp: &CellInputs<'_, T>, state: &MatrixMemoryState<T>) -> Result<()> {
    if state.heads() != inp.heads || state.head_dim() != inp.head_dim {
        return shape_err(
            "mlstm",
            format!(
                "state has {}x{} heads/dim, inputs {}x{}",
                state.heads(),
                state.head_dim(),
                inp.heads,
                inp.head_dim
            ),
        );
    }
    Ok(())
}

/// Quantities of one chunk shared by forward and backward.
struct ChunkTerms<T> {
    len: usize,
    /// Stabilizer per token.
    m: Vec<T>,
    /// `None` when the carried state term attains the max.
    argmax: Vec<Option<usize>>,
    /// `exp(F_j + m_prev - m_j)`.
    carry_w: Vec<T>,
    /// Lower-triangular `exp(F_j - F_i + i_i - m_j)`, row-major `[S, S]`.
    w: Vec<T>,
    /// `q_j . k_i`, `[S, S]`.
    qk: Vec<T>,
    /// `C_prev q_j`, `[S, d]`.
    cq: Vec<T>,
    /// `n_prev . q_j`.
    nq: Vec<T>,
    /// Unnormalized readout numerator `[S, d]` and denominator argument.
    a: Vec<T>,
    b: Vec<T>,
}

fn chunk_terms<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: &[T],
    log_f: &[T],
    st: &HeadState<T>,
    d: usize,
) -> ChunkTerms<T> {
    let s = i_pre.len();
    let mut cum = vec![T::zero(); s];
    let mut acc = T::zero();
    for j in 0..s {
        acc += log_f[j];
        cum[j] = acc;
    }
    let mut carry_log = vec![T::zero(); s];
    let mut m = vec![T::zero(); s];
    let mut argmax = vec![None; s];
    let mut w = vec![T::zero(); s * s];
    for j in 0..s {
        let c0 = cum[j] + st.m;
        carry_log[j] = c0;
        let mut best = c0;
        let mut arg = None;
        // Summing the decay segment directly keeps D_ji exactly independent of f_l for l <= i.
        let mut seg = T::zero();
        for i in (0..=j).rev() {
            let dji = seg + i_pre[i];
            w[j * s + i] = dji;
            if dji > best || (dji == best && arg.is_some_and(|a| a > i)) {
                best = dji;
                arg = Some(i);
            }
            seg += log_f[i];
        }
        m[j] = best;
        argmax[j] = arg;
        for i in 0..=j {
            w[j * s + i] = (w[j * s + i] - best).exp();
        }
    }
    let carry_w: Vec<T> = (0..s).map(|j| (carry_log[j] - m[j]).exp()).collect();
    let mut qk = vec![T::zero(); s * s];
    gemm(Mat::new(q, s, d), Mat::new(k, s, d).t(), T::zero(), &mut qk);
    let mut cq = vec![T::zero(); s * d];
    gemm(
        Mat::new(q, s, d),
        Mat::new(&st.c, d, d).t(),
        T::zero(),
        &mut cq,
    );
    let nq: Vec<T> = q.chunks(d).map(|qj| dot(&st.n, qj)).collect();

    // a_j = e_j C q_j + sum_i w_ji (q_j.k_i) v_i ; b_j = e_j n.q_j + sum_i w_ji (q_j.k_i)
    let mut p = vec![T::zero(); s * s];
    let mut b = vec![T::zero(); s];
    for j in 0..s {
        let mut bj = carry_w[j] * nq[j];
        for i in 0..=j {
            let pij = w[j * s + i] * qk[j * s + i];
            p[j * s + i] = pij;
            bj += pij;
        }
        b[j] = bj;
    }
    let mut a: Vec<T> = cq
        .iter()
        .enumerate()
        .map(|(idx, &c)| carry_w[idx / d] * c)
        .collect();
    gemm(Mat::new(&p, s, s), Mat::new(v, s, d), T::one(), &mut a);
    ChunkTerms {
        len: s,
        m,
        argmax,
        carry_w,
        w,
        qk,
        cq,
        nq,
        a,
        b,
    }
}

/// Advances the head state past a chunk.
fn chunk_end_state<T: Scalar>(
    terms: &ChunkTerms<T>,
    k: &[T],
    v: &[T],
    st: &HeadState<T>,
    d: usize,
) -> HeadState<T> {
    let s = terms.len;
    let last = s - 1;
    let e = terms.carry_w[last];
    let mut c: Vec<T> = st.c.iter().map(|&x| e * x).collect();
    let mut n: Vec<T> = st.n.iter().map(|&x| e * x).collect();
    let wl = &terms.w[last * s..last * s + s];
    // C += V^T diag(w) K
    let vw: Vec<T> = v
        .chunks(d)
        .zip(wl)
        .flat_map(|(vi, &wi)| vi.iter().map(move |&x| x * wi))
        .collect();
    gemm(Mat::new(&vw, s, d).t(), Mat::new(k, s, d), T::one(), &mut c);
    for (i, ki) in k.chunks(d).enumerate() {
        for (nv, &kv) in n.iter_mut().zip(ki) {
            *nv += wl[i] * kv;
        }
    }
    HeadState {
        c,
        n,
        m: terms.m[last],
    }
}

fn chunk_bounds(len: usize, chunk: usize) -> impl Iterator<Item = (usize, usize)> {
    let chunk = chunk.max(1);
    (0..len)
        .step_by(chunk)
        .map(move |s| (s, (s + chunk).min(len)))
}

/// Chunked evaluation with carried state. Chunks longer than the sequence
/// collapse to a single chunk.
pub fn chunkwise_forward<T: Scalar>(
    inp: &CellInputs<'_, T>,
    chunk: usize,
    state: &mut MatrixMemoryState<T>,
) -> Result<Vec<T>> {
    chunkwise_impl(inp, chunk, state, &mut Vec::new())
}

fn chunkwise_impl<T: Scalar>(
    inp: &CellInputs<'_, T>,
    chunk: usize,
    state: &mut MatrixMemoryState<T>,
    branches: &mut Vec<u64>,
) -> Result<Vec<T>> {
    inp.check()?;
    check_state(inp, state)?;
    if chunk == 0 {
        return arg_err("mlstm", "chunk size must be at least 1");
    }
    let (w, d) = (inp.width(), inp.head_dim);
    let mut out = vec![T::zero(); inp.len * w];
    for h in 0..inp.heads {
        let hi = inp.head(h);
        let mut st = state.head(h);
        let mut hout = vec![T::zero(); inp.len * d];
        for (t0, t1) in chunk_bounds(inp.len, chunk) {
            let (q, k, v) = (
                &hi.q[t0 * d..t1 * d],
                &hi.k[t0 * d..t1 * d],
                &hi.v[t0 * d..t1 * d],
            );
            let terms = chunk_terms(q, k, v, &hi.i_pre[t0..t1], &hi.log_f[t0..t1], &st, d);
            for j in 0..terms.len {
                let clamp_off = terms.b[j].abs() > T::one();
                branches.push(terms.argmax[j].map_or(0, |i| i as u64 + 1) << 1 | clamp_off as u64);
                let den = terms.b[j].abs().max(T::one());
                for r in 0..d {
                    hout[(t0 + j) * d + r] = terms.a[j * d + r] / den;
                }
            }
            st = chunk_end_state(&terms, k, v, &st, d);
        }
        scatter_head(&mut out, &hout, h, d, w);
        state.set_head(h, &st);
    }
    state.ensure_finite()?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "mlstm chunkwise",
        });
    }
    Ok(out)
}

/// Gradients of the cell output with respect to its inputs.
#[derive(Debug, Clone)]
pub struct CellGrads<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub i_pre: Vec<T>,
    pub log_f: Vec<T>,
}

/// Reverse pass of the chunkwise form starting from the empty state.
/// `grad` is `dL/dh~` shaped like the output.
pub fn chunkwise_backward<T: Scalar>(
    inp: &CellInputs<'_, T>,
    chunk: usize,
    grad: &[T],
) -> Result<CellGrads<T>> {
    inp.check()?;
    if chunk == 0 {
        return arg_err("mlstm", "chunk size must be at least 1");
    }
    let (w, d, len) = (inp.width(), inp.head_dim, inp.len);
    if grad.len() != len * w {
        return shape_err("mlstm backward", "gradient shape");
    }
    let mut out = CellGrads {
        q: vec![T::zero(); len * w],
        k: vec![T::zero(); len * w],
        v: vec![T::zero(); len * w],
        i_pre: vec![T::zero(); len * inp.heads],
        log_f: vec![T::zero(); len * inp.heads],
    };
    let bounds: Vec<(usize, usize)> = chunk_bounds(len, chunk).collect();
    for h in 0..inp.heads {
        let hi = inp.head(h);
        let mut dh = Vec::with_capacity(len * d);
        for t in 0..len {
            dh.extend_from_slice(&grad[t * w + h * d..t * w + (h + 1) * d]);
        }
        // chunk start states
        let mut starts = Vec::with_capacity(bounds.len());
        let mut st = HeadState::zeros(d);
        for &(t0, t1) in &bounds {
            let (k, v) = (&hi.k[t0 * d..t1 * d], &hi.v[t0 * d..t1 * d]);
            let terms = chunk_terms(
                &hi.q[t0 * d..t1 * d],
                k,
                v,
                &hi.i_pre[t0..t1],
                &hi.log_f[t0..t1],
                &st,
                d,
            );
            let next = chunk_end_state(&terms, k, v, &st, d);
            starts.push(st);
            st = next;
        }
        let mut dq = vec![T::zero(); len * d];
        let mut dk = vec![T::zero(); len * d];
        let mut dv = vec![T::zero(); len * d];
        let mut di = vec![T::zero(); len];
        let mut dlf = vec![T::zero(); len];
        let mut carry = HeadState {
            c: vec![T::zero(); d * d],
            n: vec![T::zero(); d],
            m: T::zero(),
        };
        for (ci, &(t0, t1)) in bounds.iter().enumerate().rev() {
            let r = t0 * d..t1 * d;
            let g = chunk_backward(
                &hi.q[r.clone()],
                &hi.k[r.clone()],
                &hi.v[r.clone()],
                &hi.i_pre[t0..t1],
                &hi.log_f[t0..t1],
                &starts[ci],
                &dh[r.clone()],
                &carry,
                d,
            );
            dq[r.clone()].copy_from_slice(&g.q);
            dk[r.clone()].copy_from_slice(&g.k);
            dv[r].copy_from_slice(&g.v);
            di[t0..t1].copy_from_slice(&g.i_pre);
            dlf[t0..t1].copy_from_slice(&g.log_f);
            carry = g.start;
        }
        scatter_head(&mut out.q, &dq, h, d, w);
        scatter_head(&mut out.k, &dk, h, d, w);
        scatter_head(&mut out.v, &dv, h, d, w);
        for t in 0..len {
            out.i_pre[t * inp.heads + h] = di[t];
            out.log_f[t * inp.heads + h] = dlf[t];
        }
    }
    Ok(out)
}

struct ChunkGrads<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    i_pre: Vec<T>,
    log_f: Vec<T>,
    /// Gradients with respect to the chunk's start state.
    start: HeadState<T>,
}

/// Backward through one chunk given `dL/dh~` for its tokens and the
/// gradient `end` with respect to the state it hands to the next chunk.
#[allow(clippy::too_many_arguments)]
fn chunk_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    i_pre: &[T],
    log_f: &[T],
    st: &HeadState<T>,
    dh: &[T],
    end: &HeadState<T>,
    d: usize,
) -> ChunkGrads<T> {
    let t = chunk_terms(q, k, v, i_pre, log_f, st, d);
    let s = t.len;
    let mut dq = vec![T::zero(); s * d];
    let mut dk = vec![T::zero(); s * d];
    let mut dv = vec![T::zero(); s * d];
    let mut d_log = vec![T::zero(); s * s];
    let mut d_carry_log = vec![T::zero(); s];
    let mut dm = vec![T::zero(); s];
    let mut dc_prev = vec![T::zero(); d * d];
    let mut dn_prev = vec![T::zero(); d];

    // readout h = a / max(|b|, 1)
    let mut abar = vec![T::zero(); s * d];
    let mut bbar = vec![T::zero(); s];
    for j in 0..s {
        let (aj, dhj) = (&t.a[j * d..(j + 1) * d], &dh[j * d..(j + 1) * d]);
        let bj = t.b[j];
        if bj.abs() > T::one() {
            let inv = T::one() / bj.abs();
            for r in 0..d {
                abar[j * d + r] = dhj[r] * inv;
            }
            bbar[j] = -bj.signum() * dot(dhj, aj) / (bj * bj);
        } else {
            abar[j * d..(j + 1) * d].copy_from_slice(dhj);
        }
        dm[j] = -(dot(&abar[j * d..(j + 1) * d], aj) + bbar[j] * bj);
    }

    // intra-chunk terms: u_ji = abar_j . v_i + bbar_j
    let mut u = vec![T::zero(); s * s];
    gemm(
        Mat::new(&abar, s, d),
        Mat::new(v, s, d).t(),
        T::zero(),
        &mut u,
    );
    let mut coef_qk = vec![T::zero(); s * s]; // w_ji u_ji, weights k_i in dq_j and q_j in dk_i
    let mut coef_v = vec![T::zero(); s * s]; // w_ji (q_j.k_i), weights abar_j in dv_i
    for j in 0..s {
        for i in 0..=j {
            let idx = j * s + i;
            let uji = u[idx] + bbar[j];
            let wu = t.w[idx] * uji;
            coef_qk[idx] = wu;
            coef_v[idx] = t.w[idx] * t.qk[idx];
            d_log[idx] += wu * t.qk[idx];
        }
    }
    gemm(
        Mat::new(&coef_qk, s, s),
        Mat::new(k, s, d),
        T::zero(),
        &mut dq,
    );
    gemm(
        Mat::new(&coef_qk, s, s).t(),
        Mat::new(q, s, d),
        T::zero(),
        &mut dk,
    );
    gemm(
        Mat::new(&coef_v, s, s).t(),
        Mat::new(&abar, s, d),
        T::zero(),
        &mut dv,
    );

    // carried-state readout terms
    for j in 0..s {
        let e = t.carry_w[j];
        let (abj, qj) = (&abar[j * d..(j + 1) * d], &q[j * d..(j + 1) * d]);
        d_carry_log[j] += e * (dot(abj, &t.cq[j * d..(j + 1) * d]) + bbar[j] * t.nq[j]);
        let dqj = &mut dq[j * d..(j + 1) * d];
        for r in 0..d {
            let ea = e * abj[r];
            let crow = &st.c[r * d..(r + 1) * d];
            let dcrow = &mut dc_prev[r * d..(r + 1) * d];
            for c in 0..d {
                dqj[c] += ea * crow[c];
                dcrow[c] += ea * qj[c];
            }
        }
        let eb = e * bbar[j];
        for c in 0..d {
            dqj[c] += eb * st.n[c];
            dn_prev[c] += eb * qj[c];
        }
    }

    // state handed to the next chunk
    let last = s - 1;
    dm[last] += end.m;
    for i in 0..s {
        let wli = t.w[last * s + i];
        let (ki, vi) = (&k[i * d..(i + 1) * d], &v[i * d..(i + 1) * d]);
        let mut ck = vec![T::zero(); d]; // C_end_grad k_i
        let mut ctv = vec![T::zero(); d]; // C_end_grad^T v_i
        for r in 0..d {
            let row = &end.c[r * d..(r + 1) * d];
            ck[r] = dot(row, ki);
            for c in 0..d {
                ctv[c] += row[c] * vi[r];
            }
        }
        let g = wli * (dot(vi, &ck) + dot(&end.n, ki));
        d_log[last * s + i] += g;
        dm[last] -= g;
        for r in 0..d {
            dv[i * d + r] += wli * ck[r];
            dk[i * d + r] += wli * (ctv[r] + end.n[r]);
        }
    }
    let e_last = t.carry_w[last];
    let g0 = e_last * (dot(&end.c, &st.c) + dot(&end.n, &st.n));
    d_carry_log[last] += g0;
    dm[last] -= g0;
    for (dc, &ec) in dc_prev.iter_mut().zip(&end.c) {
        *dc += e_last * ec;
    }
    for (dn, &en) in dn_prev.iter_mut().zip(&end.n) {
        *dn += e_last * en;
    }

    // stabilizer gradient flows to whichever log-weight attained the max
    for j in 0..s {
        match t.argmax[j] {
            None => d_carry_log[j] += dm[j],
            Some(i) => d_log[j * s + i] += dm[j],
        }
    }

    // log-weights: carry_j = F_j + m_prev, D_ji = F_j - F_i + i_i
    let mut d_cum = vec![T::zero(); s];
    let mut di = vec![T::zero(); s];
    let mut dm_prev = T::zero();
    for j in 0..s {
        d_cum[j] += d_carry_log[j];
        dm_prev += d_carry_log[j];
        for i in 0..=j {
            let g = d_log[j * s + i];
            d_cum[j] += g;
            d_cum[i] -= g;
            di[i] += g;
        }
    }
    let mut dlf = vec![T::zero(); s];
    let mut acc = T::zero();
    for j in (0..s).rev() {
        acc += d_cum[j];
        dlf[j] = acc;
    }
    ChunkGrads {
        q: dq,
        k: dk,
        v: dv,
        i_pre: di,
        log_f: dlf,
        start: HeadState {
            c: dc_prev,
            n: dn_prev,
            m: dm_prev,
        },
    }
}

/// How [`mlstm_sequence`] walks the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Recurrent,
    Chunkwise,
}

impl std::str::FromStr for EvalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "recurrent" => Ok(EvalMode::Recurrent),
            "chunkwise" => Ok(EvalMode::Chunkwise),
            _ => Err(format!("unknown mode `{s}` (expected recurrent|chunkwise)")),
        }
    }
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Recurrent => "recurrent",
            EvalMode::Chunkwise => "chunkwise",
        }
    }
}

pub const DEFAULT_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkConfig {
    pub chunk_size: usize,
    pub mode: EvalMode,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK,
            mode: EvalMode::Chunkwise,
        }
    }
}

impl ChunkConfig {
    pub fn new(chunk_size: usize, mode: EvalMode) -> Result<Self> {
        if chunk_size == 0 {
            return arg_err("chunk config", "chunk size must be at least 1");
        }
        Ok(Self { chunk_size, mode })
    }

    pub fn recurrent() -> Self {
        Self {
            chunk_size: 1,
            mode: EvalMode::Recurrent,
        }
    }

    pub fn chunkwise(chunk_size: usize) -> Self {
        Self {
            chunk_size: chunk_size.max(1),
            mode: EvalMode::Chunkwise,
        }
    }

    /// Chunk length actually used for a sequence of `len` tokens.
    pub fn effective_chunk(&self, len: usize) -> usize {
        self.chunk_size.clamp(1, len.max(1))
    }
}

/// Evaluates the cell from the empty state in the configured mode.
pub fn run_cell<T: Scalar>(inp: &CellInputs<'_, T>, cfg: ChunkConfig) -> Result<Vec<T>> {
    run_cell_traced(inp, cfg, &mut Vec::new())
}

fn run_cell_traced<T: Scalar>(
    inp: &CellInputs<'_, T>,
    cfg: ChunkConfig,
    branches: &mut Vec<u64>,
) -> Result<Vec<T>> {
    let mut state = MatrixMemoryState::zeros(inp.heads, inp.head_dim);
    match cfg.mode {
        EvalMode::Recurrent => recurrent_impl(inp, &mut state, branches),
        EvalMode::Chunkwise => {
            chunkwise_impl(inp, cfg.effective_chunk(inp.len), &mut state, branches)
        }
    }
}

/// Projection weights producing the cell inputs from token embeddings.
#[derive(Debug, Clone)]
pub struct MLstmProjections<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// Input-gate weights `[heads, Din]` and bias `[heads]`.
    pub wi: Tensor<T>,
    pub bi: Tensor<T>,
    /// Forget-gate weights `[heads, Din]` and bias `[heads]`.
    pub wf: Tensor<T>,
    pub bf: Tensor<T>,
    /// Output-gate weights `[D, Din]` and bias `[D]`.
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub heads: usize,
    pub forget: ForgetGate,
}

/// Cell inputs for a whole sequence plus the output gate.
#[derive(Debug, Clone)]
pub struct Projected<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub i_pre: Tensor<T>,
    pub f_pre: Tensor<T>,
    pub o: Tensor<T>,
}

impl<T: Scalar> Projected<T> {
    pub fn log_f(&self, kind: ForgetGate) -> Vec<T> {
        self.f_pre
            .data()
            .iter()
            .map(|&f| kind.log_value(f))
            .collect()
    }
}

impl<T: Scalar> MLstmProjections<T> {
    pub fn random<R: Rng + ?Sized>(
        din: usize,
        width: usize,
        heads: usize,
        forget: ForgetGate,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return arg_err("mlstm", format!("{heads} heads do not split width {width}"));
        }
        Ok(Self {
            wq: fan_in_uniform(&[width, din], din, rng),
            wk: fan_in_uniform(&[width, din], din, rng),
            wv: fan_in_uniform(&[width, din], din, rng),
            wi: fan_in_uniform(&[heads, din], din, rng),
            bi: Tensor::zeros(&[heads]),
            wf: fan_in_uniform(&[heads, din], din, rng),
            bf: Tensor::zeros(&[heads]),
            wo: fan_in_uniform(&[width, din], din, rng),
            bo: Tensor::zeros(&[width]),
            heads,
            forget,
        })
    }

    pub fn width(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn din(&self) -> usize {
        self.wq.shape()[1]
    }

    /// Projects `[T, Din]` tokens; `k` is scaled by `1/sqrt(d)`.
    pub fn project(&self, tokens: &Tensor<T>) -> Result<Projected<T>> {
        let scale = T::one() / T::lit(self.head_dim() as f64).sqrt();
        let o = linear(tokens, &self.wo, Some(&self.bo))?.map(sigmoid);
        Ok(Projected {
            q: linear(tokens, &self.wq, None)?,
            k: linear(tokens, &self.wk, None)?.scale(scale),
            v: linear(tokens, &self.wv, None)?,
            i_pre: linear(tokens, &self.wi, Some(&self.bi))?,
            f_pre: linear(tokens, &self.wf, Some(&self.bf))?,
            o,
        })
    }
}

/// One recurrent step on a single token `x_t` of shape `[Din]`.
pub fn mlstm_step<T: Scalar>(
    state: &MatrixMemoryState<T>,
    x_t: &Tensor<T>,
    proj: &MLstmProjections<T>,
) -> Result<(MatrixMemoryState<T>, Tensor<T>)> {
    let tokens = x_t.reshape(&[1, proj.din()])?;
    let p = proj.project(&tokens)?;
    let log_f = p.log_f(proj.forget);
    let inp = CellInputs {
        q: p.q.data(),
        k: p.k.data(),
        v: p.v.data(),
        i_pre: p.i_pre.data(),
        log_f: &log_f,
        len: 1,
        heads: proj.heads,
        head_dim: proj.head_dim(),
    };
    let mut next = state.clone();
    let h = recurrent_forward(&inp, &mut next)?;
    let h = Tensor::from_vec(&[proj.width()], h)?.mul(&p.o.reshape(&[proj.width()])?)?;
    Ok((next, h))
}

/// Gated cell output for a `[T, Din]` token sequence, `[T, width]`.
pub fn mlstm_sequence<T: Scalar>(
    tokens: &Tensor<T>,
    proj: &MLstmProjections<T>,
    cfg: ChunkConfig,
) -> Result<Tensor<T>> {
    if tokens.ndim() != 2 {
        return shape_err(
            "mlstm_sequence",
            format!("expected [T, Din], got {:?}", tokens.shape()),
        );
    }
    let len = tokens.shape()[0];
    let p = proj.project(tokens)?;
    let log_f = p.log_f(proj.forget);
    let inp = CellInputs {
        q: p.q.data(),
        k: p.k.data(),
        v: p.v.data(),
        i_pre: p.i_pre.data(),
        log_f: &log_f,
        len,
        heads: proj.heads,
        head_dim: proj.head_dim(),
    };
    let h = run_cell(&inp, cfg)?;
    Tensor::from_vec(&[len, proj.width()], h)?.mul(&p.o)
}

impl<T: Scalar> Tape<T> {
    /// Matrix-memory cell over `[B, T, heads*d]` projections with
    /// `[B, T, heads]` gate pre-activations; returns the ungated readout.
    #[allow(clippy::too_many_arguments)]
    pub fn mlstm_cell(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        i_pre: Var,
        f_pre: Var,
        heads: usize,
        forget: ForgetGate,
        cfg: ChunkConfig,
    ) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return shape_err(
                "mlstm_cell",
                format!("q/k/v must share a [B,T,D] shape, got {qs:?}"),
            );
        }
        let (b, len, width) = (qs[0], qs[1], qs[2]);
        if heads == 0 || width % heads != 0 {
            return arg_err(
                "mlstm_cell",
                format!("{heads} heads do not split width {width}"),
            );
        }
        if self.shape(i_pre) != [b, len, heads] || self.shape(f_pre) != [b, len, heads] {
            return shape_err("mlstm_cell", "gate pre-activations must be [B,T,heads]");
        }
        let d = width / heads;
        let seq = len * width;
        let gseq = len * heads;
        let mut out = Vec::with_capacity(b * seq);
        let mut branches = Vec::new();
        {
            let (qd, kd, vd) = (
                self.value(q).data(),
                self.value(k).data(),
                self.value(v).data(),
            );
            let (id, fd) = (self.value(i_pre).data(), self.value(f_pre).data());
            for n in 0..b {
                let log_f: Vec<T> = fd[n * gseq..(n + 1) * gseq]
                    .iter()
                    .map(|&f| forget.log_value(f))
                    .collect();
                let inp = CellInputs {
                    q: &qd[n * seq..(n + 1) * seq],
                    k: &kd[n * seq..(n + 1) * seq],
                    v: &vd[n * seq..(n + 1) * seq],
                    i_pre: &id[n * gseq..(n + 1) * gseq],
                    log_f: &log_f,
                    len,
                    heads,
                    head_dim: d,
                };
                out.extend(run_cell_traced(&inp, cfg, &mut branches)?);
            }
        }
        self.record_branches(branches.into_iter());
        let chunk = cfg.effective_chunk(len);
        let value = Tensor::from_vec(&qs, out)?;
        self.push(
            "mlstm_cell",
            value,
            &[q, k, v, i_pre, f_pre],
            Box::new(move |c| {
                let (qd, kd, vd) = (c.inputs[0].data(), c.inputs[1].data(), c.inputs[2].data());
                let (id, fd) = (c.inputs[3].data(), c.inputs[4].data());
                let mut gq = Vec::with_capacity(b * seq);
                let mut gk = Vec::with_capacity(b * seq);
                let mut gv = Vec::with_capacity(b * seq);
                let mut gi = Vec::with_capacity(b * gseq);
                let mut gf = Vec::with_capacity(b * gseq);
                for n in 0..b {
                    let fpre = &fd[n * gseq..(n + 1) * gseq];
                    let log_f: Vec<T> = fpre.iter().map(|&f| forget.log_value(f)).collect();
                    let inp = CellInputs {
                        q: &qd[n * seq..(n + 1) * seq],
                        k: &kd[n * seq..(n + 1) * seq],
                        v: &vd[n * seq..(n + 1) * seq],
                        i_pre: &id[n * gseq..(n + 1) * gseq],
                        log_f: &log_f,
                        len,
                        heads,
                        head_dim: d,
                    };
                    let g =
                        chunkwise_backward(&inp, chunk, &c.grad.data()[n * seq..(n + 1) * seq])?;
                    gq.extend(g.q);
                    gk.extend(g.k);
                    gv.extend(g.v);
                    gi.extend(g.i_pre);
                    gf.extend(
                        g.log_f
                            .iter()
                            .zip(fpre)
                            .map(|(&gl, &f)| gl * forget.log_derivative(f)),
                    );
                }
                let gshape = [b, len, heads];
                Ok(vec![
                    Some(Tensor::from_vec(&qs, gq)?),
                    Some(Tensor::from_vec(&qs, gk)?),
                    Some(Tensor::from_vec(&qs, gv)?),
                    Some(Tensor::from_vec(&gshape, gi)?),
                    Some(Tensor::from_vec(&gshape, gf)?),
                ])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn lstm_step_reset_and_retain() {
        let st = ScalarLstmState {
            c: t(&[2], &[5.0, -1.0]),
            h: t(&[2], &[0.0, 0.0]),
        };
        let z = t(&[2], &[0.3, 0.7]);
        let one = t(&[2], &[1.0, 1.0]);
        let zero = t(&[2], &[0.0, 0.0]);
        let reset = lstm_scalar_step(&st, &z, &one, &zero, &one, CellActivation::Identity).unwrap();
        assert_eq!(reset.c, z);
        assert_eq!(reset.h, z);
        let keep = lstm_scalar_step(&st, &z, &zero, &one, &one, CellActivation::Identity).unwrap();
        assert_eq!(keep.c, st.c);
    }

    #[test]
    fn lstm_step_hand_arithmetic() {
        let st = ScalarLstmState {
            c: t(&[1], &[1.0]),
            h: t(&[1], &[0.0]),
        };
        let one = t(&[1], &[1.0]);
        let out = lstm_scalar_step(
            &st,
            &t(&[1], &[2.0]),
            &one,
            &one,
            &t(&[1], &[0.5]),
            CellActivation::Identity,
        )
        .unwrap();
        assert_eq!(out.c.data(), &[3.0]);
        assert_eq!(out.h.data(), &[1.5]);
    }

    #[test]
    fn input_gate_values() {
        let x = t(&[3], &[0.4, -1.0, 2.0]);
        let zero = GateParams {
            w: t(&[3], &[0.0; 3]),
            r: 0.0,
            b: 0.0,
        };
        let g = exp_input_gate(&x, 0.7, &zero).unwrap();
        assert_eq!((g.pre, g.value), (0.0, 1.0));
        let ln2 = GateParams {
            b: 2f64.ln(),
            ..zero.clone()
        };
        assert!((exp_input_gate(&x, 0.7, &ln2).unwrap().value - 2.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::uniform(&[3], -1.0, 1.0, &mut rng);
        let p = GateParams {
            w: w.clone(),
            r: 0.3,
            b: -0.2,
        };
        let want = (w.data()[0] * 0.4 - w.data()[1] + 2.0 * w.data()[2] + 0.3 * 0.5 - 0.2).exp();
        assert!((exp_input_gate(&x, 0.5, &p).unwrap().value - want).abs() < 1e-7);
    }

    #[test]
    fn forget_gate_values() {
        let x = t(&[1], &[0.0]);
        let p = GateParams {
            w: t(&[1], &[0.0]),
            r: 0.0,
            b: 0.0,
        };
        assert_eq!(
            forget_gate(&x, 0.0, &p, ForgetGate::Sigmoid).unwrap().value,
            0.5
        );
        assert_eq!(
            forget_gate(&x, 0.0, &p, ForgetGate::Exponential)
                .unwrap()
                .value,
            1.0
        );
        let half = GateParams {
            b: -(2f64.ln()),
            ..p
        };
        let g = forget_gate(&x, 0.0, &half, ForgetGate::Exponential).unwrap();
        assert!((g.value - 0.5).abs() < 1e-15);
        let s = forget_gate(&x, 0.0, &half, ForgetGate::Sigmoid).unwrap();
        assert!((s.log_value - s.value.ln()).abs() < 1e-15);
    }

    fn single(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        i_pre: f64,
        log_f: f64,
        state: &mut MatrixMemoryState<f64>,
    ) -> Vec<f64> {
        let inp = CellInputs {
            q,
            k,
            v,
            i_pre: &[i_pre],
            log_f: &[log_f],
            len: 1,
            heads: 1,
            head_dim: q.len(),
        };
        recurrent_forward(&inp, state).unwrap()
    }

    #[test]
    fn covariance_update_by_hand() {
        // m_1 = i~ = 0 so i' = 1; log f = -inf so f' = 0
        let mut st = MatrixMemoryState::zeros(1, 2);
        let h = single(
            &[1.0, 0.0],
            &[1.0, 0.0],
            &[2.0, 3.0],
            0.0,
            f64::NEG_INFINITY,
            &mut st,
        );
        assert_eq!(st.c.data(), &[2.0, 0.0, 3.0, 0.0]);
        assert_eq!(st.n.data(), &[1.0, 0.0]);
        assert_eq!(h, vec![2.0, 3.0]);
    }

    #[test]
    fn closed_input_gate_keeps_memory() {
        let mut st = MatrixMemoryState::zeros(1, 2);
        single(&[1.0, 0.0], &[0.6, 0.8], &[2.0, 3.0], 0.5, 0.0, &mut st);
        let before = st.clone();
        // i~ -> -inf, f = 1: memory untouched, h reads the old memory
        let h = single(
            &[0.6, 0.8],
            &[9.0, 9.0],
            &[9.0, 9.0],
            f64::NEG_INFINITY,
            0.0,
            &mut st,
        );
        assert_eq!(st.c, before.c);
        assert_eq!(st.n, before.n);
        let cq: Vec<f64> = (0..2)
            .map(|r| before.c.data()[r * 2] * 0.6 + before.c.data()[r * 2 + 1] * 0.8)
            .collect();
        let den = (before.n.data()[0] * 0.6 + before.n.data()[1] * 0.8)
            .abs()
            .max(1.0);
        assert!((h[0] - cq[0] / den).abs() < 1e-15 && (h[1] - cq[1] / den).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_query_reads_zero() {
        let mut st = MatrixMemoryState::zeros(1, 2);
        single(&[1.0, 0.0], &[1.0, 0.0], &[2.0, 3.0], 0.0, 0.0, &mut st);
        single(&[1.0, 0.0], &[2.0, 0.0], &[-1.0, 4.0], 0.3, 0.0, &mut st);
        let h = single(
            &[0.0, 1.0],
            &[1.0, 0.0],
            &[5.0, 5.0],
            f64::NEG_INFINITY,
            0.0,
            &mut st,
        );
        assert_eq!(h, vec![0.0, 0.0]);
    }

    #[test]
    fn chunk_config_clamps_to_sequence() {
        let cfg = ChunkConfig::chunkwise(32);
        assert_eq!(cfg.effective_chunk(16), 16);
        assert_eq!(cfg.effective_chunk(100), 32);
        assert!(ChunkConfig::new(0, EvalMode::Chunkwise).is_err());
    }

    #[test]
    fn single_token_modes_agree_with_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proj =
            MLstmProjections::<f64>::random(5, 4, 1, ForgetGate::Exponential, &mut rng).unwrap();
        let x = Tensor::uniform(&[1, 5], -1.0, 1.0, &mut rng);
        let (_, h) = mlstm_step(
            &MatrixMemoryState::zeros(1, 4),
            &x.reshape(&[5]).unwrap(),
            &proj,
        )
        .unwrap();
        for cfg in [
            ChunkConfig::recurrent(),
            ChunkConfig::chunkwise(1),
            ChunkConfig::chunkwise(16),
        ] {
            let seq = mlstm_sequence(&x, &proj, cfg).unwrap();
            assert!(
                seq.reshape(&[4]).unwrap().max_rel_diff(&h, 1e-300).unwrap() < 1e-12,
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn chunked_state_matches_recurrent_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (len, heads, d) = (13, 2, 3);
        let w = heads * d;
        let q: Vec<f64> = (0..len * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..len * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..len * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ig: Vec<f64> = (0..len * heads).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lf: Vec<f64> = (0..len * heads).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let inp = CellInputs {
            q: &q,
            k: &k,
            v: &v,
            i_pre: &ig,
            log_f: &lf,
            len,
            heads,
            head_dim: d,
        };
        let mut rs = MatrixMemoryState::zeros(heads, d);
        let rh = recurrent_forward(&inp, &mut rs).unwrap();
        for chunk in [1, 2, 4, 5, 13, 40] {
            let mut cs = MatrixMemoryState::zeros(heads, d);
            let ch = chunkwise_forward(&inp, chunk, &mut cs).unwrap();
            let a = Tensor::from_vec(&[len * w], ch).unwrap();
            let b = Tensor::from_vec(&[len * w], rh.clone()).unwrap();
            assert!(a.max_rel_diff(&b, 1e-12).unwrap() < 1e-10, "chunk {chunk}");
            assert!((cs.m.data()[0] - rs.m.data()[0]).abs() < 1e-10);
            assert!(cs.c.max_rel_diff(&rs.c, 1e-12).unwrap() < 1e-10);
            assert!(cs.n.max_rel_diff(&rs.n, 1e-12).unwrap() < 1e-10);
        }
    }

    #[test]
    fn large_gates_stay_finite_only_with_stabilizer() {
        let d = 2;
        let (q, k, v) = ([0.5, -0.5], [0.3, 0.9], [1.0, -2.0]);
        let mut st = MatrixMemoryState::zeros(1, d);
        let (mut c, mut n) = (vec![0.0; d * d], vec![0.0; d]);
        let mut h = vec![0.0; d];
        let mut overflowed = false;
        for step in 0..12 {
            let (i_pre, log_f) = if step % 2 == 0 {
                (80.0, 80.0)
            } else {
                (-80.0, 80.0)
            };
            let out = single(&q, &k, &v, i_pre, log_f, &mut st);
            assert!(out.iter().all(|x| x.is_finite()));
            step_head_unstabilized(&mut c, &mut n, &q, &k, &v, i_pre, log_f, &mut h);
            overflowed |= c.iter().chain(&n).chain(&h).any(|x| !x.is_finite());
        }
        st.ensure_finite().unwrap();
        assert!(overflowed);
    }

    fn cell_gradcheck(heads: usize, forget: ForgetGate, cfg: ChunkConfig) -> f64 {
        use crate::gradcheck::{gradcheck, GradcheckOptions};
        use crate::nn::ParamStore;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, len, width) = (2, 8, 4);
        let mut store = ParamStore::new();
        let mut reg = |name: &str, shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
            store.register(name, Tensor::uniform(shape, lo, hi, rng), true)
        };
        let q = reg("q", &[b, len, width], -1.0, 1.0, &mut rng);
        let k = reg("k", &[b, len, width], -1.0, 1.0, &mut rng);
        let v = reg("v", &[b, len, width], -1.0, 1.0, &mut rng);
        // Keep log f in roughly [-1, 0] so no gradient vanishes below difference noise.
        let (flo, fhi) = match forget {
            ForgetGate::Exponential => (-1.0, 0.0),
            ForgetGate::Sigmoid => (0.0, 2.0),
        };
        let i = reg("i", &[b, len, heads], -1.0, 1.0, &mut rng);
        let f = reg("f", &[b, len, heads], flo, fhi, &mut rng);
        let weights = Tensor::uniform(&[b, len, width], -1.0, 1.0, &mut rng);
        let report = gradcheck(
            &mut store,
            |s| {
                let (q, k, v, i, f) = (s.param(q), s.param(k), s.param(v), s.param(i), s.param(f));
                let h = s.tape.mlstm_cell(q, k, v, i, f, heads, forget, cfg)?;
                s.tape.dot_const(h, &weights)
            },
            &GradcheckOptions {
                step: 1e-6,
                tolerance: 1e-4,
                ..Default::default()
            },
        )
        .unwrap();
        report.max_rel_error()
    }

    #[test]
    fn cell_gradients_match_finite_differences() {
        for forget in [ForgetGate::Exponential, ForgetGate::Sigmoid] {
            for heads in [1, 2] {
                for cfg in [
                    ChunkConfig::recurrent(),
                    ChunkConfig::chunkwise(1),
                    ChunkConfig::chunkwise(3),
                    ChunkConfig::chunkwise(16),
                ] {
                    let err = cell_gradcheck(heads, forget, cfg);
                    assert!(err < 1e-4, "{forget:?} heads {heads} {cfg:?}: {err}");
                }
            }
        }
    }
}
