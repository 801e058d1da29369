//! A small post-LayerNorm transformer encoder with a pooled `[CLS]` head.
//!
//! Parameters live in one flat `Vec<f64>`; gradients use the same layout so
//! the optimizer and serialization treat the network as a single vector.
//! Forward and backward passes are written out by hand and checked against
//! finite differences in the tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenizer::Encoded;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    /// Adds a learned embedding for "word also occurs in the other segment".
    pub match_feature: bool,
}

impl EncoderConfig {
    /// Parses backbone ids of the form `tiny-encoder[:h=32,l=2,a=2,ff=64,match=1]`.
    pub fn from_backbone_id(id: &str, vocab_size: usize, max_len: usize) -> Result<Self> {
        let (name, opts) = id.split_once(':').unwrap_or((id, ""));
        if name != "tiny-encoder" {
            return Err(Error::Config(format!(
                "unknown backbone `{name}` (available: tiny-encoder)"
            )));
        }
        let mut cfg = EncoderConfig {
            vocab_size,
            hidden: 32,
            layers: 2,
            heads: 2,
            ff: 64,
            max_len,
            match_feature: true,
        };
        for kv in opts.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad backbone option `{kv}`")))?;
            let n: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("bad backbone value `{kv}`")))?;
            match k {
                "h" => cfg.hidden = n,
                "l" => cfg.layers = n,
                "a" => cfg.heads = n,
                "ff" => cfg.ff = n,
                "match" => cfg.match_feature = n != 0,
                _ => return Err(Error::Config(format!("unknown backbone option `{k}`"))),
            }
        }
        if cfg.heads == 0 || !cfg.hidden.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                cfg.hidden, cfg.heads
            )));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct LayerOffsets {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Layout {
    tok: usize,
    pos: usize,
    seg: usize,
    mtch: usize,
    lne_g: usize,
    lne_b: usize,
    layers: Vec<LayerOffsets>,
    wp: usize,
    bp: usize,
    wh: usize,
    bh: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &EncoderConfig, extra_dim: usize, n_out: usize) -> Self {
        let d = cfg.hidden;
        let mut at = 0usize;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok = take(cfg.vocab_size * d);
        let pos = take(cfg.max_len * d);
        let seg = take(2 * d);
        let mtch = take(if cfg.match_feature { 2 * d } else { 0 });
        let lne_g = take(d);
        let lne_b = take(d);
        let layers = (0..cfg.layers)
            .map(|_| LayerOffsets {
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln1_g: take(d),
                ln1_b: take(d),
                w1: take(d * cfg.ff),
                b1: take(cfg.ff),
                w2: take(cfg.ff * d),
                b2: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
            })
            .collect();
        let wp = take(d * d);
        let bp = take(d);
        let wh = take((d + extra_dim) * n_out);
        let bh = take(n_out);
        Layout { tok, pos, seg, mtch, lne_g, lne_b, layers, wp, bp, wh, bh, total: at }
    }
}

/// Encoder + tanh pooler + linear head over `pooled ⊕ extra`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub cfg: EncoderConfig,
    pub extra_dim: usize,
    pub n_out: usize,
    layout: Layout,
    pub params: Vec<f64>,
}

// ---- dense helpers (row-major) -------------------------------------------

/// out[n×m] = a[n×k] · b[k×m] + bias
fn affine(a: &[f64], n: usize, k: usize, b: &[f64], bias: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        row.copy_from_slice(bias);
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                row[j] += av * brow[j];
            }
        }
    }
    out
}

/// gw[k×m] += aᵀ g, gb[m] += Σ_rows g, returns da[n×k] = g · wᵀ
fn affine_backward(
    a: &[f64],
    n: usize,
    k: usize,
    w: &[f64],
    g: &[f64],
    m: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut da = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for j in 0..m {
            gb[j] += grow[j];
        }
        for p in 0..k {
            let av = a[i * k + p];
            let wrow = &w[p * m..(p + 1) * m];
            let gwrow = &mut gw[p * m..(p + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                gwrow[j] += av * grow[j];
                acc += grow[j] * wrow[j];
            }
            da[i * k + p] = acc;
        }
    }
    da
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], n: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            xhat[i * d + j] = xh;
            y[i * d + j] = g[j] * xh + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &[f64], n: usize, d: usize, g: &[f64], c: &LnCache, dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            let idx = i * d + j;
            dg[j] += dy[idx] * c.xhat[idx];
            db[j] += dy[idx];
            let dxh = dy[idx] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * c.xhat[idx];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for j in 0..d {
            let idx = i * d + j;
            let dxh = dy[idx] * g[j];
            dx[idx] = c.inv_std[i] * (dxh - mean_dxh - c.xhat[idx] * mean_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerCache {
    x_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>, // heads × L × L
    ctx: Vec<f64>,
    ln1: LnCache,
    h1: Vec<f64>,
    u: Vec<f64>,
    gact: Vec<f64>,
    ln2: LnCache,
}

pub struct ForwardCache {
    len: usize,
    ids: Vec<u32>,
    segments: Vec<u8>,
    matches: Vec<u8>,
    ln_e: LnCache,
    layers: Vec<LayerCache>,
    cls: Vec<f64>,
    pooled: Vec<f64>,
    z: Vec<f64>,
}

impl Network {
    pub fn new(cfg: EncoderConfig, extra_dim: usize, n_out: usize, seed: u64) -> Self {
        let layout = Layout::new(&cfg, extra_dim, n_out);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden;
        let mut fill = |params: &mut [f64], std: f64| {
            let normal = Normal::new(0.0, std).unwrap();
            for p in params.iter_mut() {
                *p = normal.sample(&mut rng);
            }
        };
        let emb_end = layout.lne_g;
        fill(&mut params[layout.tok..emb_end], 1.0);
        params[layout.lne_g..layout.lne_g + d].fill(1.0);
        let inv = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        for l in &layout.layers {
            fill(&mut params[l.wq..l.wq + d * d], inv(d));
            fill(&mut params[l.wk..l.wk + d * d], inv(d));
            fill(&mut params[l.wv..l.wv + d * d], inv(d));
            fill(&mut params[l.wo..l.wo + d * d], inv(d));
            fill(&mut params[l.w1..l.w1 + d * cfg.ff], inv(d));
            fill(&mut params[l.w2..l.w2 + cfg.ff * d], inv(cfg.ff));
            params[l.ln1_g..l.ln1_g + d].fill(1.0);
            params[l.ln2_g..l.ln2_g + d].fill(1.0);
        }
        fill(&mut params[layout.wp..layout.wp + d * d], inv(d));
        fill(&mut params[layout.wh..layout.wh + (d + extra_dim) * n_out], inv(d + extra_dim));
        Network { cfg, extra_dim, n_out, layout, params }
    }

    pub fn from_params(cfg: EncoderConfig, extra_dim: usize, n_out: usize, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&cfg, extra_dim, n_out);
        if params.len() != layout.total {
            return Err(Error::Input(format!(
                "weights hold {} values, architecture needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Network { cfg, extra_dim, n_out, layout, params })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Parameters excluding the head's extra-feature rows.
    pub fn param_count_without_extra(&self) -> usize {
        self.layout.total - self.extra_dim * self.n_out
    }

    fn p(&self, at: usize, n: usize) -> &[f64] {
        &self.params[at..at + n]
    }

    pub fn logits(&self, input: &Encoded, extra: &[f64]) -> Vec<f64> {
        self.forward(input, extra).0
    }

    pub fn forward(&self, input: &Encoded, extra: &[f64]) -> (Vec<f64>, ForwardCache) {
        assert_eq!(extra.len(), self.extra_dim, "extra feature width");
        let cfg = &self.cfg;
        let lay = &self.layout;
        let d = cfg.hidden;
        let n = input.len().min(cfg.max_len);
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut e = vec![0.0; n * d];
        for i in 0..n {
            let row = &mut e[i * d..(i + 1) * d];
            let tok = (input.ids[i] as usize).min(cfg.vocab_size - 1);
            let parts = [
                lay.tok + tok * d,
                lay.pos + i * d,
                lay.seg + input.segments[i] as usize * d,
            ];
            for at in parts {
                for (r, v) in row.iter_mut().zip(self.p(at, d)) {
                    *r += v;
                }
            }
            if cfg.match_feature {
                let at = lay.mtch + input.matches[i] as usize * d;
                for (r, v) in row.iter_mut().zip(self.p(at, d)) {
                    *r += v;
                }
            }
        }
        let (mut x, ln_e) = layer_norm(&e, n, d, self.p(lay.lne_g, d), self.p(lay.lne_b, d));

        let mut caches = Vec::with_capacity(cfg.layers);
        for l in &lay.layers {
            let q = affine(&x, n, d, self.p(l.wq, d * d), self.p(l.bq, d), d);
            let k = affine(&x, n, d, self.p(l.wk, d * d), self.p(l.bk, d), d);
            let v = affine(&x, n, d, self.p(l.wv, d * d), self.p(l.bv, d), d);
            let mut probs = vec![0.0; heads * n * n];
            let mut ctx = vec![0.0; n * d];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let prow = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        let mut s = 0.0;
                        for t in 0..dh {
                            s += q[i * d + off + t] * k[j * d + off + t];
                        }
                        prow[j] = s * scale;
                        max = max.max(prow[j]);
                    }
                    let mut sum = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    for pj in prow.iter_mut() {
                        *pj /= sum;
                    }
                    for j in 0..n {
                        let pj = prow[j];
                        for t in 0..dh {
                            ctx[i * d + off + t] += pj * v[j * d + off + t];
                        }
                    }
                }
            }
            let a = affine(&ctx, n, d, self.p(l.wo, d * d), self.p(l.bo, d), d);
            let r1: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
            let (h1, ln1) = layer_norm(&r1, n, d, self.p(l.ln1_g, d), self.p(l.ln1_b, d));
            let u = affine(&h1, n, d, self.p(l.w1, d * cfg.ff), self.p(l.b1, cfg.ff), cfg.ff);
            let gact: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let f = affine(&gact, n, cfg.ff, self.p(l.w2, cfg.ff * d), self.p(l.b2, d), d);
            let r2: Vec<f64> = h1.iter().zip(&f).map(|(p, q)| p + q).collect();
            let (x_out, ln2) = layer_norm(&r2, n, d, self.p(l.ln2_g, d), self.p(l.ln2_b, d));
            caches.push(LayerCache { x_in: x, q, k, v, probs, ctx, ln1, h1, u, gact, ln2 });
            x = x_out;
        }

        let cls = x[..d].to_vec();
        let pooled: Vec<f64> = affine(&cls, 1, d, self.p(lay.wp, d * d), self.p(lay.bp, d), d)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let mut z = pooled.clone();
        z.extend_from_slice(extra);
        let zin = d + self.extra_dim;
        let logits = affine(&z, 1, zin, self.p(lay.wh, zin * self.n_out), self.p(lay.bh, self.n_out), self.n_out);
        let cache = ForwardCache {
            len: n,
            ids: input.ids[..n].to_vec(),
            segments: input.segments[..n].to_vec(),
            matches: input.matches[..n].to_vec(),
            ln_e,
            layers: caches,
            cls,
            pooled,
            z,
        };
        (logits, cache)
    }

    /// Accumulates ∂loss/∂params into `grad` given ∂loss/∂logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) {
        let cfg = &self.cfg;
        let lay = &self.layout;
        let d = cfg.hidden;
        let n = cache.len;
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let zin = d + self.extra_dim;

        let (gw, gb) = split_two(grad, lay.wh, zin * self.n_out, lay.bh, self.n_out);
        let dz = affine_backward(&cache.z, 1, zin, self.p(lay.wh, zin * self.n_out), dlogits, self.n_out, gw, gb);
        let dpre: Vec<f64> = (0..d).map(|j| dz[j] * (1.0 - cache.pooled[j] * cache.pooled[j])).collect();
        let (gw, gb) = split_two(grad, lay.wp, d * d, lay.bp, d);
        let dcls = affine_backward(&cache.cls, 1, d, self.p(lay.wp, d * d), &dpre, d, gw, gb);

        let mut dx = vec![0.0; n * d];
        dx[..d].copy_from_slice(&dcls);

        for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
            let (gg, gbb) = split_two(grad, l.ln2_g, d, l.ln2_b, d);
            let dr2 = layer_norm_backward(&dx, n, d, self.p(l.ln2_g, d), &c.ln2, gg, gbb);
            let mut dh1 = dr2.clone();
            let (gw, gb) = split_two(grad, l.w2, cfg.ff * d, l.b2, d);
            let dg = affine_backward(&c.gact, n, cfg.ff, self.p(l.w2, cfg.ff * d), &dr2, d, gw, gb);
            let du: Vec<f64> = dg.iter().zip(&c.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            let (gw, gb) = split_two(grad, l.w1, d * cfg.ff, l.b1, cfg.ff);
            let dh1_ff = affine_backward(&c.h1, n, d, self.p(l.w1, d * cfg.ff), &du, cfg.ff, gw, gb);
            for (a, b) in dh1.iter_mut().zip(&dh1_ff) {
                *a += b;
            }
            let (gg, gbb) = split_two(grad, l.ln1_g, d, l.ln1_b, d);
            let dr1 = layer_norm_backward(&dh1, n, d, self.p(l.ln1_g, d), &c.ln1, gg, gbb);
            let mut dx_in = dr1.clone();
            let (gw, gb) = split_two(grad, l.wo, d * d, l.bo, d);
            let dctx = affine_backward(&c.ctx, n, d, self.p(l.wo, d * d), &dr1, d, gw, gb);

            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; n];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let prow = &c.probs[(h * n + i) * n..(h * n + i + 1) * n];
                    let mut dot = 0.0;
                    for j in 0..n {
                        let mut s = 0.0;
                        for t in 0..dh {
                            s += dctx[i * d + off + t] * c.v[j * d + off + t];
                            dv[j * d + off + t] += prow[j] * dctx[i * d + off + t];
                        }
                        dp[j] = s;
                        dot += s * prow[j];
                    }
                    for j in 0..n {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            dq[i * d + off + t] += ds * c.k[j * d + off + t];
                            dk[j * d + off + t] += ds * c.q[i * d + off + t];
                        }
                    }
                }
            }
            for (w, b, dproj) in [(l.wq, l.bq, &dq), (l.wk, l.bk, &dk), (l.wv, l.bv, &dv)] {
                let (gw, gb) = split_two(grad, w, d * d, b, d);
                let back = affine_backward(&c.x_in, n, d, self.p(w, d * d), dproj, d, gw, gb);
                for (a, b) in dx_in.iter_mut().zip(&back) {
                    *a += b;
                }
            }
            dx = dx_in;
        }

        let (gg, gbb) = split_two(grad, lay.lne_g, d, lay.lne_b, d);
        let de = layer_norm_backward(&dx, n, d, self.p(lay.lne_g, d), &cache.ln_e, gg, gbb);
        for i in 0..n {
            let row = &de[i * d..(i + 1) * d];
            let tok = (cache.ids[i] as usize).min(cfg.vocab_size - 1);
            let mut targets = vec![lay.tok + tok * d, lay.pos + i * d, lay.seg + cache.segments[i] as usize * d];
            if cfg.match_feature {
                targets.push(lay.mtch + cache.matches[i] as usize * d);
            }
            for at in targets {
                for (g, v) in grad[at..at + d].iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
    }
}

/// Two disjoint mutable windows of the gradient vector; `a` must precede `b`.
fn split_two(grad: &mut [f64], a: usize, an: usize, b: usize, bn: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + an <= b);
    let (left, right) = grad.split_at_mut(b);
    (&mut left[a..a + an], &mut right[..bn])
}

/// Softmax cross-entropy for one example; returns (loss, ∂loss/∂logits).
pub fn cross_entropy(logits: &[f64], target: usize, weight: f64) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[target] / sum).ln() * weight;
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| weight * (e / sum - if i == target { 1.0 } else { 0.0 }))
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nllfg::tokenizer::Tokenizer;

    fn tiny(extra: usize, match_feature: bool) -> (Network, Encoded, Vec<f64>) {
        let tok = Tokenizer::fit(["alpha beta gamma delta", "does it mention alpha"], 50, 1, 4);
        let cfg = EncoderConfig {
            vocab_size: tok.vocab_size(),
            hidden: 8,
            layers: 2,
            heads: 2,
            ff: 12,
            max_len: 16,
            match_feature,
        };
        let net = Network::new(cfg, extra, 2, 11);
        let enc = tok.encode_pair("alpha beta gamma", "does it mention alpha ?", 16);
        let extra_v: Vec<f64> = (0..extra).map(|i| 0.3 * i as f64 - 0.2).collect();
        (net, enc, extra_v)
    }

    /// Central finite differences on every parameter that receives gradient.
    fn grad_check(net: &mut Network, enc: &Encoded, extra: &[f64]) {
        let target = 1;
        let (logits, cache) = net.forward(enc, extra);
        let (_, dlogits) = cross_entropy(&logits, target, 1.0);
        let mut grad = vec![0.0; net.param_count()];
        net.backward(&cache, &dlogits, &mut grad);
        let h = 1e-5;
        let mut checked = 0;
        for i in 0..net.param_count() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let lp = cross_entropy(&net.logits(enc, extra), target, 1.0).0;
            net.params[i] = orig - h;
            let lm = cross_entropy(&net.logits(enc, extra), target, 1.0).0;
            net.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let tol = 1e-6 + 1e-4 * fd.abs().max(grad[i].abs());
            assert!((fd - grad[i]).abs() <= tol, "param {i}: analytic {} vs numeric {fd}", grad[i]);
            if fd != 0.0 {
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} parameters carried gradient");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut net, enc, extra) = tiny(0, true);
        grad_check(&mut net, &enc, &extra);
    }

    #[test]
    fn gradients_match_with_extra_features_and_no_match_embedding() {
        let (mut net, enc, extra) = tiny(3, false);
        grad_check(&mut net, &enc, &extra);
    }

    #[test]
    fn zero_extra_width_matches_vanilla_parameter_count() {
        let (a, _, _) = tiny(0, true);
        let (b, _, _) = tiny(5, true);
        assert_eq!(a.param_count(), b.param_count_without_extra());
        assert_eq!(a.param_count(), a.param_count_without_extra());
    }

    #[test]
    fn forward_is_deterministic() {
        let (net, enc, extra) = tiny(0, true);
        assert_eq!(net.logits(&enc, &extra), net.logits(&enc, &extra));
        let (again, _, _) = tiny(0, true);
        assert_eq!(net.params, again.params);
    }

    #[test]
    fn backbone_id_parsing() {
        let c = EncoderConfig::from_backbone_id("tiny-encoder:h=16,l=1,a=4,ff=32,match=0", 100, 64).unwrap();
        assert_eq!((c.hidden, c.layers, c.heads, c.ff, c.match_feature), (16, 1, 4, 32, false));
        assert!(EncoderConfig::from_backbone_id("bert-base-cased", 10, 8).is_err());
        assert!(EncoderConfig::from_backbone_id("tiny-encoder:h=10,a=3", 10, 8).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let (loss, g) = cross_entropy(&[0.0, 0.0], 0, 1.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
    }
}
