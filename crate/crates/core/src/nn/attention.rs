//! Scaled dot-product attention with per-token probability maps.
//!
//! `A = softmax(Q Kᵀ / √d)` with `Q` from latent features and `K`, `V` from
//! the conditioning sequence; `out = A V`. The probabilities are returned
//! so losses can act on them, and the backward pass accepts an extra
//! gradient on `A` alongside the usual output gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::ops::{linear, linear_backward, softmax_rows};
use crate::real::{gemm, MatMut, MatRef};
use crate::{Error, Real, Result};

/// One head: `P = softmax(scale · Q Kᵀ)`, `out = P V` written into `out`.
pub fn head_forward<T: Real>(q: MatRef<'_, T>, k: MatRef<'_, T>, v: MatRef<'_, T>, scale: T, out: MatMut<'_, T>) -> Vec<T> {
    let (m, l) = (q.rows(), k.rows());
    let mut p = vec![T::zero(); m * l];
    gemm(scale, q, k.t(), T::zero(), MatMut::new(&mut p, m, l));
    softmax_rows(&mut p, l);
    gemm(T::one(), MatRef::new(&p, m, l), v, T::zero(), out);
    p
}

/// Gradients of one head. `dp_extra` is an additional upstream gradient on
/// the probabilities. Results are accumulated into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn head_backward<T: Real>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    p: &[T],
    dout: MatRef<'_, T>,
    dp_extra: Option<&[T]>,
    scale: T,
    dq: MatMut<'_, T>,
    dk: MatMut<'_, T>,
    dv: MatMut<'_, T>,
) {
    let (m, l) = (q.rows(), k.rows());
    let mut dp = match dp_extra {
        Some(extra) => extra.to_vec(),
        None => vec![T::zero(); m * l],
    };
    gemm(T::one(), dout, v.t(), T::one(), MatMut::new(&mut dp, m, l));
    gemm(T::one(), MatRef::new(p, m, l).t(), dout, T::one(), dv);
    // softmax Jacobian: dS = P ⊙ (dP − Σ_j dP P)
    for (dprow, prow) in dp.chunks_exact_mut(l).zip(p.chunks_exact(l)) {
        let dot = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
        for (g, &pv) in dprow.iter_mut().zip(prow) {
            *g = pv * (*g - dot);
        }
    }
    let ds = MatRef::new(&dp, m, l);
    gemm(scale, ds, k, T::one(), dq);
    gemm(scale, ds.t(), q, T::one(), dk);
}

/// Projection matrices of a single-head cross-attention.
#[derive(Debug, Clone)]
pub struct CrossAttentionWeights<T> {
    /// `d_in × d`
    pub w_q: Vec<T>,
    /// `d_txt × d`
    pub w_k: Vec<T>,
    /// `d_txt × d_v`
    pub w_v: Vec<T>,
    pub d_in: usize,
    pub d_txt: usize,
    pub d: usize,
    pub d_v: usize,
}

impl<T: Real> CrossAttentionWeights<T> {
    fn check(&self, latent_len: usize, m: usize, text_len: usize, l: usize) -> Result<()> {
        let ok = self.w_q.len() == self.d_in * self.d
            && self.w_k.len() == self.d_txt * self.d
            && self.w_v.len() == self.d_txt * self.d_v
            && latent_len == m * self.d_in
            && text_len == l * self.d_txt
            && self.d > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "latent {latent_len} (m={m}, d_in={}), text {text_len} (l={l}, d_txt={}), \
                 W^q {}, W^k {}, W^v {} (d={}, d_v={})",
                self.d_in,
                self.d_txt,
                self.w_q.len(),
                self.w_k.len(),
                self.w_v.len(),
                self.d,
                self.d_v
            )))
        }
    }
}

/// Forward values kept for [`cross_attention_backward`].
#[derive(Debug, Clone)]
pub struct CrossAttentionOutput<T> {
    /// `m × d_v`
    pub out: Vec<T>,
    /// Attention probabilities, `m × l`; each row sums to one.
    pub attn: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
}

/// Single-head cross-attention of `m` latent rows over `l` text tokens.
pub fn cross_attention<T: Real>(
    latent: &[T],
    m: usize,
    text: &[T],
    l: usize,
    w: &CrossAttentionWeights<T>,
) -> Result<CrossAttentionOutput<T>> {
    w.check(latent.len(), m, text.len(), l)?;
    let q = linear(latent, m, w.d_in, &w.w_q, None, w.d);
    let k = linear(text, l, w.d_txt, &w.w_k, None, w.d);
    let v = linear(text, l, w.d_txt, &w.w_v, None, w.d_v);
    let scale = T::one() / T::lit(w.d as f64).sqrt();
    let mut out = vec![T::zero(); m * w.d_v];
    let attn = head_forward(
        MatRef::new(&q, m, w.d),
        MatRef::new(&k, l, w.d),
        MatRef::new(&v, l, w.d_v),
        scale,
        MatMut::new(&mut out, m, w.d_v),
    );
    Ok(CrossAttentionOutput { out, attn, q, k, v })
}

#[derive(Debug, Clone)]
pub struct CrossAttentionGrads<T> {
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub latent: Vec<T>,
    pub text: Vec<T>,
}

/// Backward of [`cross_attention`] for upstream gradients on the output
/// and on the attention map.
pub fn cross_attention_backward<T: Real>(
    latent: &[T],
    m: usize,
    text: &[T],
    l: usize,
    w: &CrossAttentionWeights<T>,
    fwd: &CrossAttentionOutput<T>,
    d_out: Option<&[T]>,
    d_attn: Option<&[T]>,
) -> CrossAttentionGrads<T> {
    let (d, dv_dim) = (w.d, w.d_v);
    let zeros = vec![T::zero(); m * dv_dim];
    let d_out = d_out.unwrap_or(&zeros);
    let mut dq = vec![T::zero(); m * d];
    let mut dk = vec![T::zero(); l * d];
    let mut dv = vec![T::zero(); l * dv_dim];
    head_backward(
        MatRef::new(&fwd.q, m, d),
        MatRef::new(&fwd.k, l, d),
        MatRef::new(&fwd.v, l, dv_dim),
        &fwd.attn,
        MatRef::new(d_out, m, dv_dim),
        d_attn,
        T::one() / T::lit(d as f64).sqrt(),
        MatMut::new(&mut dq, m, d),
        MatMut::new(&mut dk, l, d),
        MatMut::new(&mut dv, l, dv_dim),
    );
    let mut g = CrossAttentionGrads {
        w_q: vec![T::zero(); w.d_in * d],
        w_k: vec![T::zero(); w.d_txt * d],
        w_v: vec![T::zero(); w.d_txt * dv_dim],
        latent: vec![T::zero(); m * w.d_in],
        text: vec![T::zero(); l * w.d_txt],
    };
    linear_backward(latent, m, w.d_in, &w.w_q, &dq, d, Some(&mut g.w_q), None, Some(&mut g.latent));
    linear_backward(text, l, w.d_txt, &w.w_k, &dk, d, Some(&mut g.w_k), None, Some(&mut g.text));
    linear_backward(text, l, w.d_txt, &w.w_v, &dv, dv_dim, Some(&mut g.w_v), None, Some(&mut g.text));
    g
}

/// Multi-head attention cache for one call.
#[derive(Debug, Clone)]
pub struct MhaCache<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Per head, `m × l`.
    pub probs: Vec<Vec<T>>,
    /// Concatenated head outputs before the output projection, `m × width`.
    pub heads_out: Vec<T>,
}

/// Parameter slices of a multi-head attention block.
pub struct MhaWeights<'a, T> {
    pub w_q: &'a [T],
    pub w_k: &'a [T],
    pub w_v: &'a [T],
    pub w_o: &'a [T],
    pub b_o: &'a [T],
}

/// Gradient slots; `None` skips that parameter.
pub struct MhaGrads<'a, T> {
    pub w_q: Option<&'a mut [T]>,
    pub w_k: Option<&'a mut [T]>,
    pub w_v: Option<&'a mut [T]>,
    pub w_o: Option<&'a mut [T]>,
    pub b_o: Option<&'a mut [T]>,
}

/// Shapes of a multi-head attention: queries `m × width`, context `l × ctx_dim`.
#[derive(Debug, Clone, Copy)]
pub struct MhaShape {
    pub m: usize,
    pub l: usize,
    pub width: usize,
    pub ctx_dim: usize,
    pub heads: usize,
}

impl MhaShape {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn scale<T: Real>(&self) -> T {
        T::one() / T::lit(self.head_dim() as f64).sqrt()
    }
}

pub fn mha_forward<T: Real>(x: &[T], ctx: &[T], s: MhaShape, w: &MhaWeights<'_, T>) -> (Vec<T>, MhaCache<T>) {
    let q = linear(x, s.m, s.width, w.w_q, None, s.width);
    let k = linear(ctx, s.l, s.ctx_dim, w.w_k, None, s.width);
    let v = linear(ctx, s.l, s.ctx_dim, w.w_v, None, s.width);
    let hd = s.head_dim();
    let mut heads_out = vec![T::zero(); s.m * s.width];
    let mut probs = Vec::with_capacity(s.heads);
    for h in 0..s.heads {
        let p = head_forward(
            MatRef::new(&q, s.m, s.width).col_block(h * hd, hd),
            MatRef::new(&k, s.l, s.width).col_block(h * hd, hd),
            MatRef::new(&v, s.l, s.width).col_block(h * hd, hd),
            s.scale(),
            MatMut::new(&mut heads_out, s.m, s.width).col_block(h * hd, hd),
        );
        probs.push(p);
    }
    let out = linear(&heads_out, s.m, s.width, w.w_o, Some(w.b_o), s.width);
    (
        out,
        MhaCache {
            q,
            k,
            v,
            probs,
            heads_out,
        },
    )
}

/// Backward of [`mha_forward`]. Accumulates into `dx` and `dctx` when given.
#[allow(clippy::too_many_arguments)]
pub fn mha_backward<T: Real>(
    x: &[T],
    ctx: &[T],
    s: MhaShape,
    w: &MhaWeights<'_, T>,
    cache: &MhaCache<T>,
    dout: &[T],
    dprobs: Option<&[Vec<T>]>,
    grads: MhaGrads<'_, T>,
    dx: Option<&mut [T]>,
    dctx: Option<&mut [T]>,
) {
    let hd = s.head_dim();
    let mut dheads = vec![T::zero(); s.m * s.width];
    linear_backward(
        &cache.heads_out,
        s.m,
        s.width,
        w.w_o,
        dout,
        s.width,
        grads.w_o,
        grads.b_o,
        Some(&mut dheads),
    );
    let mut dq = vec![T::zero(); s.m * s.width];
    let mut dk = vec![T::zero(); s.l * s.width];
    let mut dv = vec![T::zero(); s.l * s.width];
    for h in 0..s.heads {
        head_backward(
            MatRef::new(&cache.q, s.m, s.width).col_block(h * hd, hd),
            MatRef::new(&cache.k, s.l, s.width).col_block(h * hd, hd),
            MatRef::new(&cache.v, s.l, s.width).col_block(h * hd, hd),
            &cache.probs[h],
            MatRef::new(&dheads, s.m, s.width).col_block(h * hd, hd),
            dprobs.map(|d| d[h].as_slice()),
            s.scale(),
            MatMut::new(&mut dq, s.m, s.width).col_block(h * hd, hd),
            MatMut::new(&mut dk, s.l, s.width).col_block(h * hd, hd),
            MatMut::new(&mut dv, s.l, s.width).col_block(h * hd, hd),
        );
    }
    linear_backward(x, s.m, s.width, w.w_q, &dq, s.width, grads.w_q, None, dx);
    if let Some(dctx) = dctx {
        linear_backward(ctx, s.l, s.ctx_dim, w.w_k, &dk, s.width, grads.w_k, None, Some(&mut *dctx));
        linear_backward(ctx, s.l, s.ctx_dim, w.w_v, &dv, s.width, grads.w_v, None, Some(dctx));
    } else {
        linear_backward(ctx, s.l, s.ctx_dim, w.w_k, &dk, s.width, grads.w_k, None, None);
        linear_backward(ctx, s.l, s.ctx_dim, w.w_v, &dv, s.width, grads.w_v, None, None);
    }
}
