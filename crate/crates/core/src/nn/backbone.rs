//! The toy latent-diffusion backbone and the adapter trait the trainer uses.
//!
//! Layout: a position-aware token embedding as text encoder; a denoiser of
//! `conv_in → down.0 → down.1 → mid → up.0 → up.1 → conv_out` with additive
//! skips (`down.1 → up.0`, `down.0 → up.1`). Every block is
//! `conv3×3 → self-attention → cross-attention` with residual connections,
//! all at the latent resolution, so every cross-attention map is `N × N`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::nn::attention::{mha_backward, mha_forward, MhaCache, MhaGrads, MhaShape, MhaWeights};
use crate::nn::ops::{
    add_into, col2im3, im2col3, layer_norm, layer_norm_backward, linear, linear_backward, silu, silu_backward,
    timestep_embedding,
};
use crate::nn::params::{Grads, ParamId, ParamStore};
use crate::nn::schedule::{EpsPredictor, LatentGrid, NoiseSchedule};
use crate::prompting::EmbeddingTable;
use crate::rng::{fill_normal, stream_rng, Stream};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub latent_size: usize,
    pub latent_channels: usize,
    pub width: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub max_tokens: usize,
    pub init_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            latent_size: 16,
            latent_channels: 4,
            width: 64,
            heads: 2,
            text_dim: 64,
            max_tokens: crate::prompting::MAX_TOKENS,
            init_seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSide {
    Down,
    Mid,
    Up,
}

/// One cross-attention probability map: `resolution² × tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    pub layer: String,
    pub side: LayerSide,
    pub head: usize,
    pub data: Vec<T>,
}

/// Cross-attention maps collected from the down and up blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<T> {
    pub maps: Vec<AttentionMap<T>>,
    pub resolution: usize,
    pub tokens: usize,
}

impl<T: Real> AttentionRecord<T> {
    /// The `resolution²` slice of map `i` at token position `k`.
    pub fn token_map(&self, i: usize, k: usize) -> Vec<T> {
        self.maps[i].data.iter().skip(k).step_by(self.tokens).copied().collect()
    }

    /// Token-`k` map averaged over every layer and head.
    pub fn mean_token_map(&self, k: usize) -> Vec<f64> {
        let cells = self.resolution * self.resolution;
        let mut out = vec![0.0; cells];
        for i in 0..self.maps.len() {
            for (o, v) in out.iter_mut().zip(self.token_map(i, k)) {
                *o += v.f64();
            }
        }
        let n = self.maps.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput<T> {
    pub eps_hat: LatentGrid<T>,
    pub attention: AttentionRecord<T>,
}

/// The only surface the trainer, losses and evaluation touch. A full-scale
/// backbone implements this to replace the toy model.
pub trait DiffusionBackbone<T: Real> {
    type Tape;

    fn latent_size(&self) -> usize;
    fn latent_channels(&self) -> usize;
    fn schedule(&self) -> &NoiseSchedule;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Token-embedding table and its row width, for sparse row updates.
    fn token_embedding(&self) -> Option<(ParamId, usize)>;

    fn encode_text(&self, token_ids: &[u32]) -> Vec<T>;
    fn forward_denoise(&self, z_t: &LatentGrid<T>, t: usize, text_emb: &[T]) -> DenoiseOutput<T>;
    /// Forward from token ids, keeping what the backward pass needs.
    fn forward_train(&self, z_t: &LatentGrid<T>, t: usize, token_ids: &[u32]) -> (DenoiseOutput<T>, Self::Tape);
    /// Accumulates parameter gradients for upstream gradients on `eps_hat`
    /// and (optionally) on each attention map, in record order. Only
    /// parameters flagged in `trainable` receive gradients.
    fn backward(
        &self,
        tape: &Self::Tape,
        d_eps: &[T],
        d_attention: Option<&[Vec<T>]>,
        trainable: &[bool],
        grads: &mut Grads<T>,
    );
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    ob: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    conv_w: ParamId,
    conv_b: ParamId,
    self_attn: AttnIdx,
    cross_attn: AttnIdx,
}

pub const BLOCKS: [(&str, LayerSide); 5] = [
    ("down.0", LayerSide::Down),
    ("down.1", LayerSide::Down),
    ("mid", LayerSide::Mid),
    ("up.0", LayerSide::Up),
    ("up.1", LayerSide::Up),
];

#[derive(Debug, Clone)]
pub struct ToyBackbone<T> {
    cfg: ToyConfig,
    schedule: NoiseSchedule,
    params: ParamStore<T>,
    tok: ParamId,
    pos: ParamId,
    temb_w: ParamId,
    temb_b: ParamId,
    conv_in_w: ParamId,
    conv_in_b: ParamId,
    blocks: Vec<BlockIdx>,
    conv_out_w: ParamId,
    conv_out_b: ParamId,
}

#[derive(Debug, Clone)]
struct BlockTape<T> {
    h0: Vec<T>,
    col: Vec<T>,
    n1: Vec<T>,
    r1: Vec<T>,
    sa: MhaCache<T>,
    n2: Vec<T>,
    r2: Vec<T>,
    ca: MhaCache<T>,
}

#[derive(Debug, Clone)]
pub struct ToyTape<T> {
    tokens: Vec<u32>,
    text: Vec<T>,
    t_sin: Vec<T>,
    t_pre: Vec<T>,
    col_in: Vec<T>,
    blocks: Vec<BlockTape<T>>,
    f: Vec<T>,
    rf: Vec<T>,
    col_out: Vec<T>,
}

impl<T: Real> ToyBackbone<T> {
    /// Randomly initialized backbone with `vocab_size` token rows.
    pub fn new(cfg: ToyConfig, vocab_size: usize, schedule: NoiseSchedule) -> Result<Self> {
        if cfg.heads == 0 || cfg.width % cfg.heads != 0 || cfg.width % 2 != 0 {
            return Err(Error::Config(alloc::format!(
                "width {} must be even and divisible by heads {}",
                cfg.width,
                cfg.heads
            )));
        }
        let mut rng = stream_rng(cfg.init_seed, Stream::Init, 0, 0);
        let mut params = ParamStore::new();
        let mut normal = |name: String, shape: Vec<usize>, std: f64, params: &mut ParamStore<T>| {
            let mut data = vec![T::zero(); shape.iter().product()];
            fill_normal(&mut rng, &mut data, std);
            params.push(name, shape, data)
        };
        let zeros = |name: String, n: usize, params: &mut ParamStore<T>| params.push(name, vec![n], vec![T::zero(); n]);
        let (d, dt, c) = (cfg.width, cfg.text_dim, cfg.latent_channels);
        let inv = |fan: usize| 1.0 / Float::sqrt(fan as f64);

        let tok = normal("text_encoder.token_embedding".into(), vec![vocab_size, dt], 1.0, &mut params);
        let pos = normal("text_encoder.position_embedding".into(), vec![cfg.max_tokens, dt], 0.1, &mut params);
        let temb_w = normal("unet.time_embed.linear.weight".into(), vec![d, d], inv(d), &mut params);
        let temb_b = zeros("unet.time_embed.linear.bias".into(), d, &mut params);
        let conv_in_w = normal("unet.conv_in.weight".into(), vec![9 * c, d], inv(9 * c), &mut params);
        let conv_in_b = zeros("unet.conv_in.bias".into(), d, &mut params);
        let mut blocks = Vec::new();
        for (name, _) in BLOCKS {
            let p = alloc::format!("unet.{name}");
            let conv_w = normal(alloc::format!("{p}.conv.weight"), vec![9 * d, d], inv(9 * d), &mut params);
            let conv_b = zeros(alloc::format!("{p}.conv.bias"), d, &mut params);
            let mut attn = |kind: &str, ctx: usize, params: &mut ParamStore<T>| AttnIdx {
                q: normal(alloc::format!("{p}.{kind}.to_q.weight"), vec![d, d], inv(d), params),
                k: normal(alloc::format!("{p}.{kind}.to_k.weight"), vec![ctx, d], inv(ctx), params),
                v: normal(alloc::format!("{p}.{kind}.to_v.weight"), vec![ctx, d], inv(ctx), params),
                o: normal(alloc::format!("{p}.{kind}.to_out.weight"), vec![d, d], inv(d), params),
                ob: zeros(alloc::format!("{p}.{kind}.to_out.bias"), d, params),
            };
            let self_attn = attn("self_attn", d, &mut params);
            let cross_attn = attn("cross_attn", dt, &mut params);
            blocks.push(BlockIdx {
                conv_w,
                conv_b,
                self_attn,
                cross_attn,
            });
        }
        let conv_out_w = normal("unet.conv_out.weight".into(), vec![9 * d, c], inv(9 * d), &mut params);
        let conv_out_b = zeros("unet.conv_out.bias".into(), c, &mut params);
        Ok(ToyBackbone {
            cfg,
            schedule,
            params,
            tok,
            pos,
            temb_w,
            temb_b,
            conv_in_w,
            conv_in_b,
            blocks,
            conv_out_w,
            conv_out_b,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn vocab_rows(&self) -> usize {
        self.params.param(self.tok).shape[0]
    }

    fn m(&self) -> usize {
        self.cfg.latent_size * self.cfg.latent_size
    }

    fn self_shape(&self) -> MhaShape {
        MhaShape {
            m: self.m(),
            l: self.m(),
            width: self.cfg.width,
            ctx_dim: self.cfg.width,
            heads: self.cfg.heads,
        }
    }

    fn cross_shape(&self) -> MhaShape {
        MhaShape {
            m: self.m(),
            l: self.cfg.max_tokens,
            width: self.cfg.width,
            ctx_dim: self.cfg.text_dim,
            heads: self.cfg.heads,
        }
    }

    fn weights(&self, a: AttnIdx) -> MhaWeights<'_, T> {
        MhaWeights {
            w_q: self.params.get(a.q),
            w_k: self.params.get(a.k),
            w_v: self.params.get(a.v),
            w_o: self.params.get(a.o),
            b_o: self.params.get(a.ob),
        }
    }

    fn time_embedding(&self, t: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let d = self.cfg.width;
        let t_sin = timestep_embedding::<T>(t, d);
        let t_pre = linear(&t_sin, 1, d, self.params.get(self.temb_w), Some(self.params.get(self.temb_b)), d);
        let temb = silu(&t_pre);
        (t_sin, t_pre, temb)
    }

    fn block_forward(&self, b: &BlockIdx, x: &[T], temb: &[T], text: &[T]) -> (Vec<T>, BlockTape<T>) {
        let (m, d, n) = (self.m(), self.cfg.width, self.cfg.latent_size);
        let mut h0 = x.to_vec();
        for row in h0.chunks_exact_mut(d) {
            add_into(row, temb);
        }
        let col = im2col3(&silu(&h0), n, d);
        let conv = linear(&col, m, 9 * d, self.params.get(b.conv_w), Some(self.params.get(b.conv_b)), d);
        let mut h = h0.clone();
        add_into(&mut h, &conv);
        let (n1, r1) = layer_norm(&h, m, d);
        let (s, sa) = mha_forward(&n1, &n1, self.self_shape(), &self.weights(b.self_attn));
        add_into(&mut h, &s);
        let (n2, r2) = layer_norm(&h, m, d);
        let (xa, ca) = mha_forward(&n2, text, self.cross_shape(), &self.weights(b.cross_attn));
        add_into(&mut h, &xa);
        (
            h,
            BlockTape {
                h0,
                col,
                n1,
                r1,
                sa,
                n2,
                r2,
                ca,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: &BlockIdx,
        tape: &BlockTape<T>,
        text: &[T],
        dh: Vec<T>,
        dprobs: Option<&[Vec<T>]>,
        trainable: &[bool],
        grads: &mut Grads<T>,
        dtext: &mut [T],
        dtemb: &mut [T],
    ) -> Vec<T> {
        let (m, d, n) = (self.m(), self.cfg.width, self.cfg.latent_size);
        let ca = b.cross_attn;
        let [gq, gk, gv, go, gob] = pick(grads, [ca.q, ca.k, ca.v, ca.o, ca.ob], trainable);
        let mut dn2 = vec![T::zero(); m * d];
        mha_backward(
            &tape.n2,
            text,
            self.cross_shape(),
            &self.weights(ca),
            &tape.ca,
            &dh,
            dprobs,
            MhaGrads {
                w_q: gq,
                w_k: gk,
                w_v: gv,
                w_o: go,
                b_o: gob,
            },
            Some(&mut dn2),
            Some(dtext),
        );
        let mut dh = dh;
        layer_norm_backward(&dn2, &tape.n2, &tape.r2, m, d, &mut dh);

        let sa = b.self_attn;
        let [gq, gk, gv, go, gob] = pick(grads, [sa.q, sa.k, sa.v, sa.o, sa.ob], trainable);
        let mut dn1 = vec![T::zero(); m * d];
        let mut dn1_ctx = vec![T::zero(); m * d];
        mha_backward(
            &tape.n1,
            &tape.n1,
            self.self_shape(),
            &self.weights(sa),
            &tape.sa,
            &dh,
            None,
            MhaGrads {
                w_q: gq,
                w_k: gk,
                w_v: gv,
                w_o: go,
                b_o: gob,
            },
            Some(&mut dn1),
            Some(&mut dn1_ctx),
        );
        add_into(&mut dn1, &dn1_ctx);
        layer_norm_backward(&dn1, &tape.n1, &tape.r1, m, d, &mut dh);

        let [gw, gb] = pick(grads, [b.conv_w, b.conv_b], trainable);
        let mut dcol = vec![T::zero(); m * 9 * d];
        linear_backward(&tape.col, m, 9 * d, self.params.get(b.conv_w), &dh, d, gw, gb, Some(&mut dcol));
        let mut da = vec![T::zero(); m * d];
        col2im3(&dcol, n, d, &mut da);
        silu_backward(&tape.h0, &da, &mut dh);
        for row in dh.chunks_exact(d) {
            add_into(dtemb, row);
        }
        dh
    }

    fn forward(&self, z_t: &LatentGrid<T>, t: usize, text: &[T], tokens: Vec<u32>) -> (DenoiseOutput<T>, ToyTape<T>) {
        assert_eq!(z_t.size, self.cfg.latent_size, "latent size");
        assert_eq!(z_t.channels, self.cfg.latent_channels, "latent channels");
        assert_eq!(text.len(), self.cfg.max_tokens * self.cfg.text_dim, "text embedding length");
        let (m, d, n, c) = (self.m(), self.cfg.width, self.cfg.latent_size, self.cfg.latent_channels);
        let (t_sin, t_pre, temb) = self.time_embedding(t);
        let col_in = im2col3(&z_t.values, n, c);
        let h = linear(&col_in, m, 9 * c, self.params.get(self.conv_in_w), Some(self.params.get(self.conv_in_b)), d);

        let mut tapes = Vec::with_capacity(5);
        let (d0, tp) = self.block_forward(&self.blocks[0], &h, &temb, text);
        tapes.push(tp);
        let (d1, tp) = self.block_forward(&self.blocks[1], &d0, &temb, text);
        tapes.push(tp);
        let (mut x, tp) = self.block_forward(&self.blocks[2], &d1, &temb, text);
        tapes.push(tp);
        add_into(&mut x, &d1);
        let (mut x, tp) = self.block_forward(&self.blocks[3], &x, &temb, text);
        tapes.push(tp);
        add_into(&mut x, &d0);
        let (u1, tp) = self.block_forward(&self.blocks[4], &x, &temb, text);
        tapes.push(tp);

        let (f, rf) = layer_norm(&u1, m, d);
        let col_out = im2col3(&silu(&f), n, d);
        let eps = linear(&col_out, m, 9 * d, self.params.get(self.conv_out_w), Some(self.params.get(self.conv_out_b)), c);

        let mut maps = Vec::new();
        for (i, (name, side)) in BLOCKS.iter().enumerate() {
            if *side == LayerSide::Mid {
                continue;
            }
            for (head, p) in tapes[i].ca.probs.iter().enumerate() {
                maps.push(AttentionMap {
                    layer: name.to_string(),
                    side: *side,
                    head,
                    data: p.clone(),
                });
            }
        }
        let out = DenoiseOutput {
            eps_hat: LatentGrid {
                size: n,
                channels: c,
                values: eps,
            },
            attention: AttentionRecord {
                maps,
                resolution: n,
                tokens: self.cfg.max_tokens,
            },
        };
        let tape = ToyTape {
            tokens,
            text: text.to_vec(),
            t_sin,
            t_pre,
            col_in,
            blocks: tapes,
            f,
            rf,
            col_out,
        };
        (out, tape)
    }
}

/// Mutable gradient slots for `ids`, `None` for frozen parameters.
fn pick<'a, T, const K: usize>(grads: &'a mut Grads<T>, ids: [ParamId; K], trainable: &[bool]) -> [Option<&'a mut [T]>; K] {
    let mut out: [Option<&'a mut [T]>; K] = core::array::from_fn(|_| None);
    for (i, g) in grads.data.iter_mut().enumerate() {
        if let Some(slot) = ids.iter().position(|id| id.0 == i) {
            if trainable[i] {
                out[slot] = Some(g.as_mut_slice());
            }
        }
    }
    out
}

impl<T: Real> DiffusionBackbone<T> for ToyBackbone<T> {
    type Tape = ToyTape<T>;

    fn latent_size(&self) -> usize {
        self.cfg.latent_size
    }

    fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn token_embedding(&self) -> Option<(ParamId, usize)> {
        Some((self.tok, self.cfg.text_dim))
    }

    fn encode_text(&self, token_ids: &[u32]) -> Vec<T> {
        let dt = self.cfg.text_dim;
        let tok = self.params.get(self.tok);
        let pos = self.params.get(self.pos);
        let mut out = vec![T::zero(); self.cfg.max_tokens * dt];
        for (p, row) in out.chunks_exact_mut(dt).enumerate() {
            let id = token_ids.get(p).copied().unwrap_or(crate::prompting::PAD_ID) as usize;
            let id = if id < self.vocab_rows() { id } else { crate::prompting::UNK_ID as usize };
            for ((o, &e), &q) in row.iter_mut().zip(&tok[id * dt..(id + 1) * dt]).zip(&pos[p * dt..(p + 1) * dt]) {
                *o = e + q;
            }
        }
        out
    }

    fn forward_denoise(&self, z_t: &LatentGrid<T>, t: usize, text_emb: &[T]) -> DenoiseOutput<T> {
        self.forward(z_t, t, text_emb, Vec::new()).0
    }

    fn forward_train(&self, z_t: &LatentGrid<T>, t: usize, token_ids: &[u32]) -> (DenoiseOutput<T>, ToyTape<T>) {
        let text = self.encode_text(token_ids);
        self.forward(z_t, t, &text, token_ids.to_vec())
    }

    fn backward(
        &self,
        tape: &ToyTape<T>,
        d_eps: &[T],
        d_attention: Option<&[Vec<T>]>,
        trainable: &[bool],
        grads: &mut Grads<T>,
    ) {
        let (m, d, n, c, dt) = (
            self.m(),
            self.cfg.width,
            self.cfg.latent_size,
            self.cfg.latent_channels,
            self.cfg.text_dim,
        );
        let heads = self.cfg.heads;
        let slot = |i: usize| -> Option<&[Vec<T>]> {
            let s = match i {
                0 => 0,
                1 => 1,
                3 => 2,
                4 => 3,
                _ => return None,
            };
            d_attention.map(|da| &da[s * heads..(s + 1) * heads])
        };

        let [gw, gb] = pick(grads, [self.conv_out_w, self.conv_out_b], trainable);
        let mut dcol = vec![T::zero(); m * 9 * d];
        linear_backward(&tape.col_out, m, 9 * d, self.params.get(self.conv_out_w), d_eps, c, gw, gb, Some(&mut dcol));
        let mut dg = vec![T::zero(); m * d];
        col2im3(&dcol, n, d, &mut dg);
        let mut df = vec![T::zero(); m * d];
        silu_backward(&tape.f, &dg, &mut df);
        let mut du = vec![T::zero(); m * d];
        layer_norm_backward(&df, &tape.f, &tape.rf, m, d, &mut du);

        let mut dtext = vec![T::zero(); self.cfg.max_tokens * dt];
        let mut dtemb = vec![T::zero(); d];
        let text = &tape.text;
        let mut bw = |i: usize, dh: Vec<T>, grads: &mut Grads<T>| {
            self.block_backward(&self.blocks[i], &tape.blocks[i], text, dh, slot(i), trainable, grads, &mut dtext, &mut dtemb)
        };
        // up.1 input = up.0 out + down.0 out; up.0 input = mid out + down.1 out
        let dx4 = bw(4, du, grads);
        let mut dd0 = dx4.clone();
        let dx3 = bw(3, dx4, grads);
        let mut dd1 = dx3.clone();
        let dx2 = bw(2, dx3, grads);
        add_into(&mut dd1, &dx2);
        let dx1 = bw(1, dd1, grads);
        add_into(&mut dd0, &dx1);
        let dh = bw(0, dd0, grads);

        let [gw, gb] = pick(grads, [self.conv_in_w, self.conv_in_b], trainable);
        linear_backward(&tape.col_in, m, 9 * c, self.params.get(self.conv_in_w), &dh, d, gw, gb, None);

        let [gw, gb] = pick(grads, [self.temb_w, self.temb_b], trainable);
        if gw.is_some() || gb.is_some() {
            let mut dpre = vec![T::zero(); d];
            silu_backward(&tape.t_pre, &dtemb, &mut dpre);
            linear_backward(&tape.t_sin, 1, d, self.params.get(self.temb_w), &dpre, d, gw, gb, None);
        }

        let [gtok, gpos] = pick(grads, [self.tok, self.pos], trainable);
        if let Some(gtok) = gtok {
            for (p, row) in dtext.chunks_exact(dt).enumerate() {
                let id = tape.tokens.get(p).copied().unwrap_or(crate::prompting::PAD_ID) as usize;
                let id = if id < self.vocab_rows() { id } else { crate::prompting::UNK_ID as usize };
                add_into(&mut gtok[id * dt..(id + 1) * dt], row);
            }
        }
        if let Some(gpos) = gpos {
            add_into(gpos, &dtext);
        }
    }
}

impl<T: Real> EpsPredictor<T> for ToyBackbone<T> {
    fn predict_eps(&self, z_t: &LatentGrid<T>, t: usize, text_emb: &[T]) -> LatentGrid<T> {
        self.forward_denoise(z_t, t, text_emb).eps_hat
    }
}

impl<T: Real> EmbeddingTable for ToyBackbone<T> {
    fn push_row_from(&mut self, sources: &[usize]) -> usize {
        let dt = self.cfg.text_dim;
        let p = self.params.param_mut(self.tok);
        let mut row = vec![T::zero(); dt];
        if let [only] = sources {
            row.copy_from_slice(&p.data[only * dt..(only + 1) * dt]);
        } else {
            let inv = T::one() / T::lit(sources.len() as f64);
            for &s in sources {
                for (r, &v) in row.iter_mut().zip(&p.data[s * dt..(s + 1) * dt]) {
                    *r += v * inv;
                }
            }
        }
        p.data.extend_from_slice(&row);
        p.shape[0] += 1;
        p.shape[0] - 1
    }
}

/// Fixed 3 → 4 channel lift from pooled RGB to the latent.
pub const LIFT: [[f64; 3]; 4] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.5, -0.25, -0.25],
];

/// Average-pools an `S × S` RGB image to `size × size`, maps pixels to
/// `[-1, 1]`, and lifts to the latent channels with [`LIFT`].
pub fn latent_from_image<T: Real>(img: &Image, size: usize) -> Result<LatentGrid<T>> {
    if img.channels != 3 || img.width != img.height {
        return Err(Error::Shape(alloc::format!(
            "expected square RGB image, got {}x{}x{}",
            img.width,
            img.height,
            img.channels
        )));
    }
    if img.width % size != 0 {
        return Err(Error::IndivisibleSize {
            size: img.width,
            target: size,
        });
    }
    let cell = img.width / size;
    let area = (cell * cell) as f64;
    let mut values = Vec::with_capacity(size * size * LIFT.len());
    for gy in 0..size {
        for gx in 0..size {
            let mut rgb = [0.0f64; 3];
            for y in gy * cell..(gy + 1) * cell {
                for x in gx * cell..(gx + 1) * cell {
                    for (acc, &v) in rgb.iter_mut().zip(img.pixel(x, y)) {
                        *acc += v as f64;
                    }
                }
            }
            let rgb = rgb.map(|v| v / area / 127.5 - 1.0);
            for row in LIFT {
                values.push(T::lit(row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2]));
            }
        }
    }
    LatentGrid::from_values(size, LIFT.len(), values)
}

/// Least-squares inverse of [`latent_from_image`], nearest-upsampled to
/// `out_size` pixels.
pub fn image_from_latent<T: Real>(latent: &LatentGrid<T>, out_size: usize) -> Image {
    let pinv = lift_pinv();
    let n = latent.size;
    let mut img = Image::filled(out_size, out_size, [0, 0, 0]);
    for y in 0..out_size {
        let gy = y * n / out_size;
        for x in 0..out_size {
            let gx = x * n / out_size;
            let cell = &latent.values[(gy * n + gx) * latent.channels..(gy * n + gx + 1) * latent.channels];
            let px = img.pixel_mut(x, y);
            for (ch, prow) in pinv.iter().enumerate() {
                let v: f64 = prow.iter().zip(cell).map(|(a, b)| a * b.f64()).sum();
                px[ch] = Float::round((v + 1.0) * 127.5).clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

fn lift_pinv() -> [[f64; 4]; 3] {
    // (LᵀL)⁻¹ Lᵀ
    let mut ltl = [[0.0; 3]; 3];
    for (i, row) in ltl.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = LIFT.iter().map(|r| r[i] * r[j]).sum();
        }
    }
    let inv = invert3(ltl);
    let mut out = [[0.0; 4]; 3];
    for i in 0..3 {
        for (k, lrow) in LIFT.iter().enumerate() {
            out[i][k] = (0..3).map(|j| inv[i][j] * lrow[j]).sum();
        }
    }
    out
}

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut r = [[0.0; 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small(seed: u64) -> ToyBackbone<f64> {
        let cfg = ToyConfig {
            latent_size: 4,
            latent_channels: 4,
            width: 8,
            heads: 2,
            text_dim: 6,
            max_tokens: 5,
            init_seed: seed,
        };
        ToyBackbone::new(cfg, 10, NoiseSchedule::standard()).unwrap()
    }

    #[test]
    fn lift_round_trips_through_pinv() {
        let img = Image::filled(32, 32, [200, 40, 90]);
        let lat = latent_from_image::<f64>(&img, 16).unwrap();
        let back = image_from_latent(&lat, 32);
        assert_eq!(back.pixel(5, 7), &[200, 40, 90]);
    }

    #[test]
    fn pad_prompt_is_pad_plus_position() {
        let m = small(1);
        let emb = m.encode_text(&[]);
        let tok = m.params.get(m.tok);
        let pos = m.params.get(m.pos);
        for p in 0..5 {
            for j in 0..6 {
                assert_eq!(emb[p * 6 + j], tok[j] + pos[p * 6 + j]);
            }
        }
    }

    #[test]
    fn record_has_down_and_up_rows_normalized() {
        let m = small(2);
        let z = LatentGrid::gaussian(4, 4, &mut seeded(3));
        let out = m.forward_denoise(&z, 500, &m.encode_text(&[3, 4, 5]));
        assert_eq!(out.eps_hat.values.len(), z.values.len());
        assert_eq!(out.attention.maps.len(), 8);
        assert!(out.attention.maps.iter().any(|a| a.side == LayerSide::Down));
        assert!(out.attention.maps.iter().any(|a| a.side == LayerSide::Up));
        for map in &out.attention.maps {
            for row in map.data.chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    /// Whole-model gradient check on a scalar objective mixing eps and attention.
    #[test]
    fn backward_matches_finite_differences() {
        let mut m = small(4);
        let tokens = [3u32, 7, 2];
        let z = LatentGrid::gaussian(4, 4, &mut seeded(5));
        let t = 321;
        let mut rng = seeded(6);
        let r_eps: Vec<f64> = (0..64).map(|_| crate::rng::normal(&mut rng)).collect();
        let r_att: Vec<Vec<f64>> = (0..8).map(|_| (0..80).map(|_| crate::rng::normal(&mut rng)).collect()).collect();
        let objective = |m: &ToyBackbone<f64>| {
            let (o, _) = m.forward_train(&z, t, &tokens);
            let a: f64 = o.eps_hat.values.iter().zip(&r_eps).map(|(x, y)| x * y).sum();
            let b: f64 = o
                .attention
                .maps
                .iter()
                .zip(&r_att)
                .flat_map(|(mp, r)| mp.data.iter().zip(r).map(|(x, y)| x * y))
                .sum();
            a + b
        };
        let trainable = vec![true; m.params.len()];
        let mut g = Grads::zeros_like(&m.params);
        let (_, tape) = m.forward_train(&z, t, &tokens);
        m.backward(&tape, &r_eps, Some(&r_att), &trainable, &mut g);
        let h = 1e-6;
        let ids: Vec<ParamId> = m.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let len = m.params.get(id).len();
            for i in [0, len / 2, len - 1] {
                let orig = m.params.get(id)[i];
                m.params.param_mut(id).data[i] = orig + h;
                let fp = objective(&m);
                m.params.param_mut(id).data[i] = orig - h;
                let fm = objective(&m);
                m.params.param_mut(id).data[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = g.get(id)[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(err < 1e-4, "{} [{i}]: fd {fd} analytic {an}", m.params.param(id).name);
            }
        }
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let m = small(7);
        let z = LatentGrid::gaussian(4, 4, &mut seeded(8));
        let (o, tape) = m.forward_train(&z, 10, &[2, 3]);
        let trainable: Vec<bool> = m.params.iter().map(|(_, p)| !p.name.contains("conv")).collect();
        let mut g = Grads::zeros_like(&m.params);
        m.backward(&tape, &o.eps_hat.values, None, &trainable, &mut g);
        for (id, p) in m.params.iter() {
            let nz = g.get(id).iter().any(|&v| v != 0.0);
            assert_eq!(nz, trainable[id.0], "{}", p.name);
        }
    }
}
