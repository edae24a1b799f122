//! Slice-level numeric kernels shared by the tape and the inference path.
//!
//! All matrices are row-major. Reductions are sequential in index order.

use super::counter::{self, Component};
use super::Float;

pub const RMS_EPS: f64 = 1e-6;

/// Strided matrix operand: element `(i, j)` lives at `offset + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout {
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = a * b + (accumulate ? c : 0)` with `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
    lc: Layout,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(lc.max_index(m, n) < c.len(), "gemm: output out of bounds");
    counter::record_matmul(m, k, n);
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[lc.offset + i * lc.rs + j * lc.cs] = T::zero();
                }
            }
        }
        return;
    }
    assert!(la.max_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(lb.max_index(k, n) < b.len(), "gemm: rhs out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds of every reachable index were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

/// Dense product of row-major buffers with optional operand transposes.
///
/// `a` is `m x k` (stored `k x m` when `ta`), `b` is `k x n` (stored `n x k`
/// when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Float>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    let la = if ta {
        Layout::transposed(m)
    } else {
        Layout::row_major(k)
    };
    let lb = if tb {
        Layout::transposed(k)
    } else {
        Layout::row_major(n)
    };
    gemm(m, k, n, T::one(), a, la, b, lb, c, Layout::row_major(n), accumulate);
}

pub fn softmax_rows_inplace<T: Float>(x: &mut [T], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in x.chunks_mut(cols) {
        softmax_slice(row);
    }
}

fn softmax_slice<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Returns the normalized output and the per-row inverse RMS.
pub fn rms_norm_forward<T: Float>(x: &[T], gain: &[T], d: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let eps = T::of(eps);
    let dt = T::of(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mut ss = T::zero();
        for &v in xr {
            ss += v * v;
        }
        let ir = T::one() / (ss / dt + eps).sqrt();
        inv.push(ir);
        for ((o, &v), &g) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = v * ir * g;
        }
    }
    (out, inv)
}

/// Gradient of RMS norm; accumulates into `dx` and `dgain` when given.
pub fn rms_norm_backward<T: Float>(
    x: &[T],
    gain: &[T],
    inv: &[T],
    dy: &[T],
    d: usize,
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
) {
    let rows = x.len() / d;
    let dt = T::of(d as f64);
    if let Some(dg) = dgain {
        for r in 0..rows {
            for j in 0..d {
                dg[j] += dy[r * d + j] * x[r * d + j] * inv[r];
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let ir = inv[r];
            let xr = &x[r * d..(r + 1) * d];
            let dyr = &dy[r * d..(r + 1) * d];
            let mut dot = T::zero();
            for j in 0..d {
                dot += dyr[j] * gain[j] * xr[j] * ir;
            }
            let mean = dot / dt;
            for j in 0..d {
                let xhat = xr[j] * ir;
                dx[r * d + j] += ir * (dyr[j] * gain[j] - xhat * mean);
            }
        }
    }
}

/// Precomputed rotary cosine/sine tables, `positions x head_dim / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Float> RopeTable<T> {
    pub fn new(head_dim: usize, max_positions: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for i in 0..half {
                let inv_freq = base.powf(-((2 * i) as f64) / head_dim as f64);
                let angle = p as f64 * inv_freq;
                cos.push(T::of(angle.cos()));
                sin.push(T::of(angle.sin()));
            }
        }
        RopeTable { half, cos, sin }
    }

    pub fn max_positions(&self) -> usize {
        if self.half == 0 {
            usize::MAX
        } else {
            self.cos.len() / self.half
        }
    }

    /// Rotates each head's halves in place for rows at positions `pos0..`.
    /// `inverse` applies the transpose rotation (used for gradients).
    pub fn apply(&self, x: &mut [T], d: usize, n_heads: usize, pos0: usize, inverse: bool) {
        let hd = d / n_heads;
        let half = self.half;
        debug_assert_eq!(hd, 2 * half);
        for (r, row) in x.chunks_mut(d).enumerate() {
            let base = (pos0 + r) * half;
            let cos = &self.cos[base..base + half];
            let sin = &self.sin[base..base + half];
            for h in 0..n_heads {
                let head = &mut row[h * hd..(h + 1) * hd];
                for i in 0..half {
                    let (a, b) = (head[i], head[i + half]);
                    let s = if inverse { -sin[i] } else { sin[i] };
                    head[i] = a * cos[i] - b * s;
                    head[i + half] = b * cos[i] + a * s;
                }
            }
        }
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `silu(gate) * up`, elementwise.
pub fn swiglu_forward<T: Float>(gate: &[T], up: &[T]) -> Vec<T> {
    gate.iter()
        .zip(up)
        .map(|(&g, &u)| g * sigmoid(g) * u)
        .collect()
}

pub fn swiglu_backward<T: Float>(
    gate: &[T],
    up: &[T],
    dy: &[T],
    dgate: Option<&mut [T]>,
    dup: Option<&mut [T]>,
) {
    if let Some(dg) = dgate {
        for i in 0..gate.len() {
            let s = sigmoid(gate[i]);
            let dsilu = s * (T::one() + gate[i] * (T::one() - s));
            dg[i] += dy[i] * up[i] * dsilu;
        }
    }
    if let Some(du) = dup {
        for i in 0..gate.len() {
            du[i] += dy[i] * gate[i] * sigmoid(gate[i]);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Multi-head causal attention over `q: tq x d` and `k, v: tk x d`.
///
/// Query row `i` sits at absolute position `q_pos0 + i` and may attend to key
/// `j` iff `j <= q_pos0 + i`. Scores are computed as a full `tq x tk` product
/// per head, then masked. Returns the output and, when `keep_probs`, the
/// attention probabilities laid out `heads x tq x tk`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    tq: usize,
    tk: usize,
    d: usize,
    n_heads: usize,
    q_pos0: usize,
    keep_probs: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let hd = d / n_heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut out = vec![T::zero(); tq * d];
    let mut probs = if keep_probs {
        Some(vec![T::zero(); n_heads * tq * tk])
    } else {
        None
    };
    let mut scores = vec![T::zero(); tq * tk];
    for h in 0..n_heads {
        counter::with_component(Component::AttentionScores, || {
            gemm(
                tq,
                hd,
                tk,
                scale,
                q,
                Layout::row_major(d).at(h * hd),
                k,
                Layout::transposed(d).at(h * hd),
                &mut scores,
                Layout::row_major(tk),
                false,
            );
        });
        for i in 0..tq {
            let allowed = (q_pos0 + i + 1).min(tk);
            let row = &mut scores[i * tk..(i + 1) * tk];
            softmax_slice(&mut row[..allowed]);
            row[allowed..].fill(T::zero());
        }
        counter::with_component(Component::AttentionValues, || {
            gemm(
                tq,
                tk,
                hd,
                T::one(),
                &scores,
                Layout::row_major(tk),
                v,
                Layout::row_major(d).at(h * hd),
                &mut out,
                Layout::row_major(d).at(h * hd),
                false,
            );
        });
        if let Some(p) = probs.as_mut() {
            p[h * tq * tk..(h + 1) * tq * tk].copy_from_slice(&scores);
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] given saved probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    t: usize,
    d: usize,
    n_heads: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let hd = d / n_heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dp = vec![T::zero(); t * t];
    for h in 0..n_heads {
        let p = &probs[h * t * t..(h + 1) * t * t];
        let col = Layout::row_major(d).at(h * hd);
        // dP = dO_h V_h^T
        gemm(
            t,
            hd,
            t,
            T::one(),
            dout,
            col,
            v,
            Layout::transposed(d).at(h * hd),
            &mut dp,
            Layout::row_major(t),
            false,
        );
        // dV_h += P^T dO_h
        gemm(t, t, hd, T::one(), p, Layout::transposed(t), dout, col, dv, col, true);
        // dS = P * (dP - rowdot(dP, P)) * scale
        for i in 0..t {
            let pr = &p[i * t..(i + 1) * t];
            let dr = &mut dp[i * t..(i + 1) * t];
            let mut dot = T::zero();
            for j in 0..=i {
                dot += pr[j] * dr[j];
            }
            for j in 0..t {
                dr[j] = if j <= i {
                    pr[j] * (dr[j] - dot) * scale
                } else {
                    T::zero()
                };
            }
        }
        // dQ_h += dS K_h ; dK_h += dS^T Q_h
        gemm(t, t, hd, T::one(), &dp, Layout::row_major(t), k, col, dq, col, true);
        gemm(t, t, hd, T::one(), &dp, Layout::transposed(t), q, col, dk, col, true);
    }
}

/// Sum of negative log-likelihoods over masked-in rows plus the softmax rows
/// for those positions (in mask order).
pub fn cross_entropy_forward<T: Float>(
    logits: &[T],
    vocab: usize,
    targets: &[u32],
    mask: &[bool],
) -> (T, Vec<T>) {
    let mut total = T::zero();
    let mut probs = Vec::new();
    for (r, (&tgt, &on)) in targets.iter().zip(mask).enumerate() {
        if !on {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        let start = probs.len();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            probs.push(e);
        }
        for p in &mut probs[start..] {
            *p /= sum;
        }
        total += max + sum.ln() - row[tgt as usize];
    }
    (total, probs)
}
