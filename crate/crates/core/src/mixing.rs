//! Token mixing: rotary embedding, causal attention weights, the multi-head
//! attention reference, pre-/post-mixing aggregation and the decode cache.

use rand::Rng;

use crate::error::{Result, UmoeError};
use crate::tensor::{axpy, dot, softmax, vec_mat, Matrix, Real};

/// Rotates pairs `(x[2j], x[2j+1])` by `position / base^(2j/d)` in place.
pub fn rope_in_place<T: Real>(x: &mut [T], position: usize, base: f64) {
    rotate(x, position as f64, base);
}

/// Inverse rotation; maps gradients w.r.t. a rotated vector back to the input.
pub fn rope_inverse_in_place<T: Real>(x: &mut [T], position: usize, base: f64) {
    rotate(x, -(position as f64), base);
}

fn rotate<T: Real>(x: &mut [T], position: f64, base: f64) {
    let d = x.len();
    for j in 0..d / 2 {
        let theta = position / base.powf(2.0 * j as f64 / d as f64);
        let (sin, cos) = theta.sin_cos();
        let (s, c) = (T::lit(sin), T::lit(cos));
        let a = x[2 * j];
        let b = x[2 * j + 1];
        x[2 * j] = a * c - b * s;
        x[2 * j + 1] = a * s + b * c;
    }
}

pub fn rope<T: Real>(x: &[T], position: usize, base: f64) -> Result<Vec<T>> {
    if !x.len().is_multiple_of(2) {
        return Err(UmoeError::OddDim(x.len()));
    }
    let mut out = x.to_vec();
    rope_in_place(&mut out, position, base);
    Ok(out)
}

/// Softmax of `q·K_j / √d_k` over rows `j ≤ causal_limit`; later rows get exactly 0.
pub fn attn_weights<T: Real>(q: &[T], keys: &Matrix<T>, d_k: usize, causal_limit: usize) -> Result<Vec<T>> {
    if keys.rows() == 0 {
        return Err(UmoeError::EmptyKeys);
    }
    if keys.cols() != q.len() || q.len() != d_k {
        return Err(UmoeError::ShapeMismatch(format!(
            "query of width {} against keys of width {}",
            q.len(),
            keys.cols()
        )));
    }
    let visible = (causal_limit + 1).min(keys.rows());
    let mut row = attn_row(q, keys.head_rows(visible), d_k);
    row.resize(keys.rows(), T::zero());
    Ok(row)
}

/// Attention weights of `q` over the `len / d_k` flat key rows in `keys`.
pub(crate) fn attn_row<T: Real>(q: &[T], keys: &[T], d_k: usize) -> Vec<T> {
    let scale = T::lit(1.0 / (d_k as f64).sqrt());
    let scores: Vec<T> = keys.chunks_exact(d_k).map(|k| dot(q, k) * scale).collect();
    softmax(&scores)
}

/// Pre-mixing: `Σ_j a_j · X[j]`, a vector in model space.
pub fn premix<T: Real>(a: &[T], x: &Matrix<T>) -> Result<Vec<T>> {
    mix(a, x)
}

/// Post-mixing: the same weighted sum applied to per-token expert outputs.
pub fn postmix<T: Real>(a: &[T], y: &Matrix<T>) -> Result<Vec<T>> {
    mix(a, y)
}

fn mix<T: Real>(a: &[T], x: &Matrix<T>) -> Result<Vec<T>> {
    if a.len() != x.rows() {
        return Err(UmoeError::LengthMismatch {
            expected: x.rows(),
            got: a.len(),
        });
    }
    Ok(mix_rows(a, x.data(), x.cols()))
}

pub(crate) fn mix_rows<T: Real>(a: &[T], rows: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for (&w, row) in a.iter().zip(rows.chunks_exact(width)) {
        axpy(&mut out, w, row);
    }
    out
}

/// Per-sequence causal cache: one key row and one hidden (or value) row per past token.
#[derive(Clone, Debug, PartialEq)]
pub struct MixState<T> {
    keys: Vec<T>,
    hidden: Vec<T>,
    key_width: usize,
    hidden_width: usize,
    t: usize,
    context_len: usize,
}

impl<T: Real> MixState<T> {
    pub fn new(key_width: usize, hidden_width: usize, context_len: usize) -> Self {
        Self {
            keys: Vec::with_capacity(key_width * context_len.min(4096)),
            hidden: Vec::with_capacity(hidden_width * context_len.min(4096)),
            key_width,
            hidden_width,
            t: 0,
            context_len,
        }
    }

    pub fn cache_step(&mut self, new_key: &[T], new_hidden: &[T]) -> Result<()> {
        if self.t >= self.context_len {
            return Err(UmoeError::ContextOverflow {
                position: self.t,
                context_len: self.context_len,
            });
        }
        if new_key.len() != self.key_width || new_hidden.len() != self.hidden_width {
            return Err(UmoeError::ShapeMismatch(format!(
                "cache rows of width {}/{} expected, got {}/{}",
                self.key_width,
                self.hidden_width,
                new_key.len(),
                new_hidden.len()
            )));
        }
        self.keys.extend_from_slice(new_key);
        self.hidden.extend_from_slice(new_hidden);
        self.t += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn key_width(&self) -> usize {
        self.key_width
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    pub fn keys(&self) -> &[T] {
        &self.keys
    }

    pub fn hidden(&self) -> &[T] {
        &self.hidden
    }

    pub fn key(&self, j: usize) -> &[T] {
        &self.keys[j * self.key_width..(j + 1) * self.key_width]
    }

    pub fn hidden_row(&self, j: usize) -> &[T] {
        &self.hidden[j * self.hidden_width..(j + 1) * self.hidden_width]
    }

    pub fn cached_keys(&self) -> Matrix<T> {
        Matrix::from_vec(self.t, self.key_width, self.keys.clone()).expect("consistent cache")
    }

    pub fn cached_hidden(&self) -> Matrix<T> {
        Matrix::from_vec(self.t, self.hidden_width, self.hidden.clone()).expect("consistent cache")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseAttnParams<T> {
    /// `d × (h·d_k)`
    pub wq: Matrix<T>,
    /// `d × (h·d_k)`
    pub wk: Matrix<T>,
    /// `d × (h·d_v)`
    pub wv: Matrix<T>,
    /// `(h·d_v) × d`
    pub wo: Matrix<T>,
}

/// Head geometry for dense attention. `rope_base: None` disables rotary embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadShape {
    pub n_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub rope_base: Option<f64>,
}

impl<T: Real> DenseAttnParams<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, shape: HeadShape, rng: &mut R) -> Self {
        let qk = shape.n_heads * shape.key_dim;
        let v = shape.n_heads * shape.value_dim;
        let xavier = |a: usize, b: usize| (2.0 / (a + b) as f64).sqrt();
        Self {
            wq: Matrix::randn(d, qk, xavier(d, qk), rng),
            wk: Matrix::randn(d, qk, xavier(d, qk), rng),
            wv: Matrix::randn(d, v, xavier(d, v), rng),
            wo: Matrix::randn(v, d, xavier(v, d), rng),
        }
    }

    fn check(&self, x: &Matrix<T>, shape: HeadShape) -> Result<()> {
        let d = x.cols();
        let qk = shape.n_heads * shape.key_dim;
        let v = shape.n_heads * shape.value_dim;
        let ok = self.wq.shape() == (d, qk)
            && self.wk.shape() == (d, qk)
            && self.wv.shape() == (d, v)
            && self.wo.shape() == (v, d);
        if !ok {
            return Err(UmoeError::ShapeMismatch(
                "dense attention weights do not match the head shape".into(),
            ));
        }
        if shape.rope_base.is_some() && !shape.key_dim.is_multiple_of(2) {
            return Err(UmoeError::OddDim(shape.key_dim));
        }
        Ok(())
    }

    /// Roped per-head queries and keys for every row of `x`.
    fn queries_keys(&self, x: &Matrix<T>, shape: HeadShape) -> (Matrix<T>, Matrix<T>) {
        let mut q = x.matmul(&self.wq).expect("checked");
        let mut k = x.matmul(&self.wk).expect("checked");
        if let Some(base) = shape.rope_base {
            for t in 0..x.rows() {
                for h in 0..shape.n_heads {
                    let span = h * shape.key_dim..(h + 1) * shape.key_dim;
                    rope_in_place(&mut q.row_mut(t)[span.clone()], t, base);
                    rope_in_place(&mut k.row_mut(t)[span], t, base);
                }
            }
        }
        (q, k)
    }

    /// Causal attention matrix (`n × n`) of one head.
    pub fn head_weights(&self, x: &Matrix<T>, head: usize, shape: HeadShape) -> Result<Matrix<T>> {
        self.check(x, shape)?;
        if head >= shape.n_heads {
            return Err(UmoeError::IndexOutOfRange {
                index: head,
                len: shape.n_heads,
            });
        }
        let (q, k) = self.queries_keys(x, shape);
        let n = x.rows();
        let qk_block = |m: &Matrix<T>| m.col_block(head * shape.key_dim, shape.key_dim);
        let (qh, kh) = (qk_block(&q), qk_block(&k));
        let mut a = Matrix::zeros(n, n);
        for t in 0..n {
            let row = attn_weights(qh.row(t), &kh, shape.key_dim, t)?;
            a.row_mut(t).copy_from_slice(&row);
        }
        Ok(a)
    }

    /// `W_v^i W_o^i`, the `d × d` map that head `i` applies to mixed hidden states.
    pub fn head_value_output(&self, head: usize, shape: HeadShape) -> Matrix<T> {
        let wv = self.wv.col_block(head * shape.value_dim, shape.value_dim);
        let wo = self.wo.row_block(head * shape.value_dim, shape.value_dim);
        wv.matmul(&wo).expect("consistent blocks")
    }
}

/// Multi-head causal attention: per-head softmax mixing of values, heads concatenated, then `W_o`.
pub fn vanilla_mha<T: Real>(params: &DenseAttnParams<T>, x: &Matrix<T>, shape: HeadShape) -> Result<Matrix<T>> {
    params.check(x, shape)?;
    let n = x.rows();
    let (q, k) = params.queries_keys(x, shape);
    let v = x.matmul(&params.wv)?;
    let (dk, dv) = (shape.key_dim, shape.value_dim);
    let mut concat = Matrix::zeros(n, shape.n_heads * dv);
    for h in 0..shape.n_heads {
        let kh = k.col_block(h * dk, dk);
        let vh = v.col_block(h * dv, dv);
        for t in 0..n {
            let a = attn_row(&q.row(t)[h * dk..(h + 1) * dk], kh.head_rows(t + 1), dk);
            let o = mix_rows(&a, vh.head_rows(t + 1), dv);
            concat.row_mut(t)[h * dv..(h + 1) * dv].copy_from_slice(&o);
        }
    }
    concat.matmul(&params.wo)
}

/// The same attention evaluated as `Σ_i premix(a_i, X) · W_v^i W_o^i`.
pub fn premix_mha<T: Real>(params: &DenseAttnParams<T>, x: &Matrix<T>, shape: HeadShape) -> Result<Matrix<T>> {
    params.check(x, shape)?;
    let n = x.rows();
    let mut out = Matrix::zeros(n, x.cols());
    for h in 0..shape.n_heads {
        let a = params.head_weights(x, h, shape)?;
        let vo = params.head_value_output(h, shape);
        for t in 0..n {
            let mixed = premix(a.row(t), x)?;
            let y = vec_mat(&mixed, &vo);
            for (o, v) in out.row_mut(t).iter_mut().zip(&y) {
                *o += *v;
            }
        }
    }
    Ok(out)
}

/// The same attention evaluated as `Σ_i postmix(a_i, X · W_v^i W_o^i)`.
pub fn postmix_mha<T: Real>(params: &DenseAttnParams<T>, x: &Matrix<T>, shape: HeadShape) -> Result<Matrix<T>> {
    params.check(x, shape)?;
    let n = x.rows();
    let mut out = Matrix::zeros(n, x.cols());
    for h in 0..shape.n_heads {
        let a = params.head_weights(x, h, shape)?;
        let per_token = x.matmul(&params.head_value_output(h, shape))?;
        for t in 0..n {
            let y = postmix(a.row(t), &per_token)?;
            for (o, v) in out.row_mut(t).iter_mut().zip(&y) {
                *o += *v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_rel_premix: f64,
    pub max_rel_postmix: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the three attention formulations on random shapes at 64-bit.
pub fn check_equivalence(trials: usize, seed: u64) -> Result<EquivalenceReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let tolerance = 1e-12;
    let (mut pre, mut post) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let n = rng.gen_range(1..=16);
        let d = [8, 32][rng.gen_range(0..2)];
        let shape = HeadShape {
            n_heads: [1, 2, 4][rng.gen_range(0..3)],
            key_dim: 2 * rng.gen_range(1..=4),
            value_dim: rng.gen_range(1..=d),
            rope_base: Some(10000.0),
        };
        let p = DenseAttnParams::<f64>::init(d, shape, &mut rng);
        let x = Matrix::<f64>::randn(n, d, 1.0, &mut rng);
        let a = vanilla_mha(&p, &x, shape)?;
        pre = pre.max(crate::tensor::rel_max_diff(a.data(), premix_mha(&p, &x, shape)?.data()));
        post = post.max(crate::tensor::rel_max_diff(
            a.data(),
            postmix_mha(&p, &x, shape)?.data(),
        ));
    }
    Ok(EquivalenceReport {
        trials,
        max_rel_premix: pre,
        max_rel_postmix: post,
        tolerance,
        passed: pre < tolerance && post < tolerance,
    })
}
