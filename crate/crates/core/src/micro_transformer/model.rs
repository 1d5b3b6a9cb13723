// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameters, forward pass with taps, and the adapter backward pass.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::linear::{LinearCache, LoraAdapter, ProjectionLinear};
use super::tokenizer::{format_prompt, HIGH_TOKEN, LOW_TOKEN};
use super::{LoraConfig, LoraTarget, ModelConfig};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Array1<f64>,
    pub q: ProjectionLinear,
    pub k: ProjectionLinear,
    pub v: ProjectionLinear,
    pub o: ProjectionLinear,
    pub mlp_norm: Array1<f64>,
    pub gate: ProjectionLinear,
    pub up: ProjectionLinear,
    pub down: ProjectionLinear,
}

impl Block {
    pub fn proj(&self, target: LoraTarget) -> &ProjectionLinear {
        match target {
            LoraTarget::Q => &self.q,
            LoraTarget::K => &self.k,
            LoraTarget::V => &self.v,
            LoraTarget::O => &self.o,
            LoraTarget::Gate => &self.gate,
            LoraTarget::Up => &self.up,
            LoraTarget::Down => &self.down,
        }
    }

    pub fn proj_mut(&mut self, target: LoraTarget) -> &mut ProjectionLinear {
        match target {
            LoraTarget::Q => &mut self.q,
            LoraTarget::K => &mut self.k,
            LoraTarget::V => &mut self.v,
            LoraTarget::O => &mut self.o,
            LoraTarget::Gate => &mut self.gate,
            LoraTarget::Up => &mut self.up,
            LoraTarget::Down => &mut self.down,
        }
    }
}

/// Final-token activations from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TapBundle {
    /// Token position the taps were read at.
    pub position: usize,
    /// `layers x heads x head_dim`, attention output before `o`.
    pub head_pre_proj: Array3<f64>,
    /// `layers x model_dim`, residual after the attention addition.
    pub post_attn_residual: Array2<f64>,
    /// `layers x model_dim`, residual after the MLP addition.
    pub post_mlp_residual: Array2<f64>,
    /// `layers x model_dim`, residual entering each block.
    pub residual_in: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Low,
    High,
}

impl Label {
    pub fn as_binary(self) -> u8 {
        match self {
            Label::Low => 0,
            Label::High => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Low => "low",
            Label::High => "high",
        }
    }
}

/// Answer-token decision with both logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub label: Label,
    pub high_logit: f64,
    pub low_logit: f64,
}

impl Classification {
    /// Argmax over the two answer logits; ties go to `Low`.
    pub fn from_logits(high_logit: f64, low_logit: f64) -> Self {
        let label = if high_logit > low_logit { Label::High } else { Label::Low };
        Classification {
            label,
            high_logit,
            low_logit,
        }
    }
}

/// Gradients for every adapter, `(dA, dB)` per `(layer, target)` slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    slots: Vec<[Option<(Array2<f64>, Array2<f64>)>; 7]>,
}

impl AdapterGrads {
    fn zeros_like(model: &Model) -> Self {
        let slots = model
            .blocks
            .iter()
            .map(|b| {
                LoraTarget::ALL.map(|t| {
                    b.proj(t)
                        .lora
                        .as_ref()
                        .map(|l| (Array2::zeros(l.a.raw_dim()), Array2::zeros(l.b.raw_dim())))
                })
            })
            .collect();
        AdapterGrads { slots }
    }

    fn slot(&mut self, layer: usize, target: LoraTarget) -> Option<(&mut Array2<f64>, &mut Array2<f64>)> {
        self.slots[layer][target as usize].as_mut().map(|(a, b)| (a, b))
    }

    /// Flattened in [`Model::adapter_tensors`] order.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        self.slots
            .iter()
            .flat_map(|s| s.iter().flatten().flat_map(|(a, b)| [a, b]))
            .collect()
    }

    pub(crate) fn accumulate(&mut self, other: &AdapterGrads, weight: f64) {
        for (mine, theirs) in self.slots.iter_mut().zip(&other.slots) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                if let (Some((ma, mb)), Some((ta, tb))) = (m.as_mut(), t.as_ref()) {
                    ma.scaled_add(weight, ta);
                    mb.scaled_add(weight, tb);
                }
            }
        }
    }
}

/// The desk-scale decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embed: Array2<f64>,
    blocks: Vec<Block>,
    final_norm: Array1<f64>,
    lm_head: Array2<f64>,
    lora: Option<LoraConfig>,
    rope_cos: Array2<f64>,
    rope_sin: Array2<f64>,
}

struct BlockCache {
    x_in: Array2<f64>,
    r1: Vec<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<f64>,
    qc: LinearCache,
    kc: LinearCache,
    vc: LinearCache,
    oc: LinearCache,
    h: Array2<f64>,
    r2: Vec<f64>,
    g: Array2<f64>,
    u: Array2<f64>,
    gc: LinearCache,
    uc: LinearCache,
    dc: LinearCache,
}

struct ForwardOutput {
    logits: Array1<f64>,
    taps: TapBundle,
    caches: Vec<BlockCache>,
    final_x: Array1<f64>,
    final_r: f64,
}

fn gaussian(rows: usize, cols: usize, fan_in: usize, seed: u64, label: &str) -> Array2<f64> {
    let mut rng = rng_for(seed, label);
    let scale = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

fn rope_tables(cfg: &ModelConfig) -> (Array2<f64>, Array2<f64>) {
    let half = cfg.head_dim() / 2;
    let mut cos = Array2::zeros((cfg.max_context, half));
    let mut sin = Array2::zeros((cfg.max_context, half));
    for pos in 0..cfg.max_context {
        for i in 0..half {
            let freq = cfg.rope_base.powf(-2.0 * i as f64 / cfg.head_dim() as f64);
            let angle = pos as f64 * freq;
            cos[[pos, i]] = angle.cos();
            sin[[pos, i]] = angle.sin();
        }
    }
    (cos, sin)
}

impl Model {
    /// Seeded Gaussian initialization scaled by `1 / sqrt(fan_in)`; norm
    /// gains start at one. Embedding rows are unit Gaussian.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let m = config.mlp_hidden_dim;
        let seed = config.seed;
        let blocks = (0..config.n_layers)
            .map(|l| {
                let w = |rows, cols, t: &str| ProjectionLinear::new(gaussian(rows, cols, cols, seed, &format!("layers.{l}.{t}")));
                Block {
                    attn_norm: Array1::ones(d),
                    q: w(d, d, "q"),
                    k: w(d, d, "k"),
                    v: w(d, d, "v"),
                    o: w(d, d, "o"),
                    mlp_norm: Array1::ones(d),
                    gate: w(m, d, "gate"),
                    up: w(m, d, "up"),
                    down: w(d, m, "down"),
                }
            })
            .collect();
        let embed = gaussian(config.vocab_size, d, 1, seed, "embed");
        let lm_head = gaussian(config.vocab_size, d, d, seed, "lm_head");
        Model::from_parts(config, embed, blocks, Array1::ones(d), lm_head)
    }

    /// Assembles a model from explicit tensors (shapes are checked).
    pub fn from_parts(
        config: ModelConfig,
        embed: Array2<f64>,
        blocks: Vec<Block>,
        final_norm: Array1<f64>,
        lm_head: Array2<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let (d, m, vocab) = (config.model_dim, config.mlp_hidden_dim, config.vocab_size);
        let shape_err = |what: String| Error::Shape(what);
        if embed.dim() != (vocab, d) || lm_head.dim() != (vocab, d) || final_norm.len() != d {
            return Err(shape_err("embedding, head, or final norm shape".into()));
        }
        if blocks.len() != config.n_layers {
            return Err(shape_err(format!("{} blocks for {} layers", blocks.len(), config.n_layers)));
        }
        for (l, b) in blocks.iter().enumerate() {
            for t in LoraTarget::ALL {
                let expected = match t {
                    LoraTarget::Gate | LoraTarget::Up => (m, d),
                    LoraTarget::Down => (d, m),
                    _ => (d, d),
                };
                if b.proj(t).weight.dim() != expected {
                    return Err(shape_err(format!("layers.{l}.{t} weight shape")));
                }
            }
            if b.attn_norm.len() != d || b.mlp_norm.len() != d {
                return Err(shape_err(format!("layers.{l} norm shape")));
            }
        }
        let lora = blocks
            .iter()
            .any(|b| LoraTarget::ALL.iter().any(|&t| b.proj(t).lora.is_some()))
            .then(LoraConfig::default);
        let (rope_cos, rope_sin) = rope_tables(&config);
        Ok(Model {
            config,
            embed,
            blocks,
            final_norm,
            lm_head,
            lora,
            rope_cos,
            rope_sin,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub(crate) fn set_lora_config(&mut self, cfg: Option<LoraConfig>) {
        self.lora = cfg;
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn embed(&self) -> &Array2<f64> {
        &self.embed
    }

    pub fn final_norm(&self) -> &Array1<f64> {
        &self.final_norm
    }

    pub fn lm_head(&self) -> &Array2<f64> {
        &self.lm_head
    }

    /// Name written into activation files.
    pub fn name(&self) -> &'static str {
        if self.lora.is_some() {
            "micro-transformer+lora"
        } else {
            "micro-transformer"
        }
    }

    /// Applies layer `layer`'s output projection to concatenated head outputs.
    pub fn output_projection(&self, layer: usize, heads_concat: ArrayView1<f64>) -> Array1<f64> {
        let x = heads_concat.insert_axis(Axis(0));
        self.blocks[layer].o.forward(x).index_axis_move(Axis(0), 0)
    }

    // -- adapters --------------------------------------------------------

    /// Returns a copy with fresh adapters on every targeted projection:
    /// `A` seeded Gaussian, `B` zero, so outputs are initially unchanged.
    pub fn apply_lora(&self, cfg: &LoraConfig) -> Result<Model> {
        cfg.validate()?;
        if self.lora.is_some() {
            return Err(Error::Config("model already carries adapters".into()));
        }
        let mut out = self.clone();
        let mut targets = cfg.targets.clone();
        targets.sort();
        targets.dedup();
        for (l, block) in out.blocks.iter_mut().enumerate() {
            for &t in &targets {
                let lin = block.proj_mut(t);
                let (din, dout) = (lin.in_dim(), lin.out_dim());
                let limit = din.min(dout);
                if cfg.rank >= limit {
                    return Err(Error::DegenerateRank {
                        target: format!("layers.{l}.{t}"),
                        rank: cfg.rank,
                        limit,
                    });
                }
                lin.lora = Some(LoraAdapter {
                    a: gaussian(cfg.rank, din, din, cfg.seed, &format!("lora.{l}.{t}")),
                    b: Array2::zeros((dout, cfg.rank)),
                    scale: cfg.scale(),
                    dropout: cfg.dropout,
                });
            }
        }
        out.lora = Some(cfg.clone());
        Ok(out)
    }

    /// Adapter tensors as `(name, tensor)`, `A` before `B`, layer-major.
    pub fn adapter_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            for t in LoraTarget::ALL {
                if let Some(lora) = &b.proj(t).lora {
                    out.push((format!("layers.{l}.{t}.lora_a"), &lora.a));
                    out.push((format!("layers.{l}.{t}.lora_b"), &lora.b));
                }
            }
        }
        out
    }

    /// Mutable view of the adapter tensors in [`Model::adapter_tensors`] order.
    pub fn adapter_tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                [
                    &mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.gate, &mut b.up, &mut b.down,
                ]
                .into_iter()
                .filter_map(|p| p.lora.as_mut())
                .flat_map(|l| [&mut l.a, &mut l.b])
                .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Frozen (non-adapter) parameters as `(name, tensor)`.
    pub fn base_tensors(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f64>)> {
        let mut out = vec![("embed".to_string(), self.embed.view().into_dyn())];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), b.attn_norm.view().into_dyn()));
            out.push((format!("layers.{l}.mlp_norm"), b.mlp_norm.view().into_dyn()));
            for t in LoraTarget::ALL {
                out.push((format!("layers.{l}.{t}"), b.proj(t).weight.view().into_dyn()));
            }
        }
        out.push(("final_norm".to_string(), self.final_norm.view().into_dyn()));
        out.push(("lm_head".to_string(), self.lm_head.view().into_dyn()));
        out
    }

    // -- forward ---------------------------------------------------------

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_context {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                max: self.config.max_context,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Causal forward; returns final-position logits and final-token taps.
    pub fn forward_with_taps(&self, tokens: &[u32]) -> Result<(Array1<f64>, TapBundle)> {
        self.check_tokens(tokens)?;
        let out = self.forward_impl(tokens, None, tokens.len() - 1, false);
        Ok((out.logits, out.taps))
    }

    /// Like [`Model::forward_with_taps`] but reads taps at `position`.
    pub fn taps_at(&self, tokens: &[u32], position: usize) -> Result<TapBundle> {
        self.check_tokens(tokens)?;
        if position >= tokens.len() {
            return Err(Error::SequenceLength {
                len: position + 1,
                max: tokens.len(),
            });
        }
        Ok(self.forward_impl(tokens, None, position, false).taps)
    }

    /// Post-softmax attention per layer, shaped `heads x T x T`.
    pub fn attention_patterns(&self, tokens: &[u32]) -> Result<Vec<Array3<f64>>> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let h = self.config.n_heads;
        let out = self.forward_impl(tokens, None, n - 1, true);
        Ok(out
            .caches
            .into_iter()
            .map(|c| Array3::from_shape_vec((h, n, n), c.probs).expect("probs shape"))
            .collect())
    }

    /// Renders the evaluator prompt and picks the larger answer logit.
    pub fn classify(&self, review: &str) -> Result<Classification> {
        let prompt = format_prompt(review, self.config.max_context)?;
        let (logits, _) = self.forward_with_taps(&prompt.tokens)?;
        Ok(Classification::from_logits(
            logits[HIGH_TOKEN as usize],
            logits[LOW_TOKEN as usize],
        ))
    }

    fn rms_norm(&self, x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Vec<f64>) {
        let d = x.ncols() as f64;
        let eps = self.config.norm_eps;
        let mut y = x.clone();
        let mut rinv = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
            let r = 1.0 / (ms + eps).sqrt();
            Zip::from(&mut row).and(gain).for_each(|v, &g| *v = *v * r * g);
            rinv.push(r);
        }
        (y, rinv)
    }

    fn rope(&self, x: &mut Array2<f64>, inverse: bool) {
        let hd = self.config.head_dim();
        let half = hd / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (pos, mut row) in x.rows_mut().into_iter().enumerate() {
            for h in 0..self.config.n_heads {
                for i in 0..half {
                    let (c, s) = (self.rope_cos[[pos, i]], sign * self.rope_sin[[pos, i]]);
                    let (a, b) = (h * hd + 2 * i, h * hd + 2 * i + 1);
                    let (x0, x1) = (row[a], row[b]);
                    row[a] = x0 * c - x1 * s;
                    row[b] = x0 * s + x1 * c;
                }
            }
        }
    }

    /// Causal softmax attention over explicit loops so that position `t`
    /// only ever touches keys `0..=t`.
    fn attention(&self, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
        let n = q.nrows();
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Array2::zeros(q.raw_dim());
        let mut probs = vec![0.0; self.config.n_heads * n * n];
        let mut scores = vec![0.0; n];
        let mut oh = vec![0.0; n * hd];
        for h in 0..self.config.n_heads {
            let (qh, kh, vh) = (head_slice(q, h, hd), head_slice(k, h, hd), head_slice(v, h, hd));
            oh.fill(0.0);
            for t in 0..n {
                let qt = &qh[t * hd..(t + 1) * hd];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores[..=t].iter_mut().enumerate() {
                    *s = dot(qt, &kh[j * hd..(j + 1) * hd]) * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in &mut scores[..=t] {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(h * n + t) * n..(h * n + t + 1) * n];
                let ot = &mut oh[t * hd..(t + 1) * hd];
                for j in 0..=t {
                    let p = scores[j] / z;
                    prow[j] = p;
                    for (o, &vv) in ot.iter_mut().zip(&vh[j * hd..(j + 1) * hd]) {
                        *o += p * vv;
                    }
                }
            }
            out.slice_mut(ndarray::s![.., h * hd..(h + 1) * hd])
                .assign(&ndarray::ArrayView2::from_shape((n, hd), &oh).expect("head shape"));
        }
        (out, probs)
    }

    fn forward_impl(
        &self,
        tokens: &[u32],
        mut dropout: Option<&mut ChaCha8Rng>,
        tap_pos: usize,
        keep_cache: bool,
    ) -> ForwardOutput {
        let cfg = &self.config;
        let (nl, nh, hd, d) = (cfg.n_layers, cfg.n_heads, cfg.head_dim(), cfg.model_dim);
        let mut x = Array2::zeros((tokens.len(), d));
        for (t, &tok) in tokens.iter().enumerate() {
            x.row_mut(t).assign(&self.embed.row(tok as usize));
        }
        let mut taps = TapBundle {
            position: tap_pos,
            head_pre_proj: Array3::zeros((nl, nh, hd)),
            post_attn_residual: Array2::zeros((nl, d)),
            post_mlp_residual: Array2::zeros((nl, d)),
            residual_in: Array2::zeros((nl, d)),
        };
        let mut caches = Vec::with_capacity(if keep_cache { nl } else { 0 });

        for (l, block) in self.blocks.iter().enumerate() {
            taps.residual_in.row_mut(l).assign(&x.row(tap_pos));
            let (xn1, r1) = self.rms_norm(&x, &block.attn_norm);
            let (mut q, qc) = block.q.forward_train(xn1.view(), dropout.as_deref_mut());
            let (mut k, kc) = block.k.forward_train(xn1.view(), dropout.as_deref_mut());
            let (v, vc) = block.v.forward_train(xn1.view(), dropout.as_deref_mut());
            self.rope(&mut q, false);
            self.rope(&mut k, false);
            let (ocat, probs) = self.attention(&q, &k, &v);
            for h in 0..nh {
                taps.head_pre_proj
                    .index_axis_mut(Axis(0), l)
                    .row_mut(h)
                    .assign(&ocat.row(tap_pos).slice(ndarray::s![h * hd..(h + 1) * hd]));
            }
            let (attn_out, oc) = block.o.forward_train(ocat.view(), dropout.as_deref_mut());
            let h = &x + &attn_out;
            taps.post_attn_residual.row_mut(l).assign(&h.row(tap_pos));

            let (xn2, r2) = self.rms_norm(&h, &block.mlp_norm);
            let (g, gc) = block.gate.forward_train(xn2.view(), dropout.as_deref_mut());
            let (u, uc) = block.up.forward_train(xn2.view(), dropout.as_deref_mut());
            let act = Zip::from(&g).and(&u).map_collect(|&g, &u| silu(g) * u);
            let (m, dc) = block.down.forward_train(act.view(), dropout.as_deref_mut());
            let next = &h + &m;
            taps.post_mlp_residual.row_mut(l).assign(&next.row(tap_pos));

            if keep_cache {
                caches.push(BlockCache {
                    x_in: std::mem::replace(&mut x, next),
                    r1,
                    q,
                    k,
                    v,
                    probs,
                    qc,
                    kc,
                    vc,
                    oc,
                    h,
                    r2,
                    g,
                    u,
                    gc,
                    uc,
                    dc,
                });
            } else {
                x = next;
            }
        }

        let last = x.row(tokens.len() - 1).to_owned();
        let ms = last.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let final_r = 1.0 / (ms + cfg.norm_eps).sqrt();
        let xn = Zip::from(&last).and(&self.final_norm).map_collect(|&v, &g| v * final_r * g);
        let logits = self.lm_head.dot(&xn);
        ForwardOutput {
            logits,
            taps,
            caches,
            final_x: last,
            final_r,
        }
    }

    // -- backward --------------------------------------------------------

    /// Cross-entropy of `target` at the final position and its gradient with
    /// respect to every adapter tensor. `dropout` enables adapter dropout.
    pub fn loss_and_grads(
        &self,
        tokens: &[u32],
        target: u32,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, AdapterGrads)> {
        self.check_tokens(tokens)?;
        if target as usize >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: target,
                vocab: self.config.vocab_size,
            });
        }
        let n = tokens.len();
        let out = self.forward_impl(tokens, dropout, n - 1, true);
        let (loss, dlogits) = cross_entropy(&out.logits, target as usize);
        let mut grads = AdapterGrads::zeros_like(self);

        // Final norm on the last row only.
        let dxn = self.lm_head.t().dot(&dlogits);
        let dlast = rms_backward_row(
            dxn.view(),
            out.final_x.view(),
            out.final_r,
            &self.final_norm,
        );
        let mut dx = Array2::zeros((n, self.config.model_dim));
        dx.row_mut(n - 1).assign(&dlast);

        for (l, (block, c)) in self.blocks.iter().zip(&out.caches).enumerate().rev() {
            // MLP: next = h + down(silu(g) * u)
            let da = block.down.backward(dx.view(), &c.dc, grads.slot(l, LoraTarget::Down));
            let mut dg = Array2::zeros(da.raw_dim());
            let mut du = Array2::zeros(da.raw_dim());
            Zip::from(&mut dg)
                .and(&mut du)
                .and(&da)
                .and(&c.g)
                .and(&c.u)
                .for_each(|dg, du, &da, &g, &u| {
                    let sig = sigmoid(g);
                    *du = da * g * sig;
                    *dg = da * u * sig * (1.0 + g * (1.0 - sig));
                });
            let mut dxn2 = block.gate.backward(dg.view(), &c.gc, grads.slot(l, LoraTarget::Gate));
            dxn2 += &block.up.backward(du.view(), &c.uc, grads.slot(l, LoraTarget::Up));
            let mut dh = dx;
            dh += &rms_backward(&dxn2, &c.h, &c.r2, &block.mlp_norm);

            // Attention: h = x + o(attn(rope(q), rope(k), v))
            let docat = block.o.backward(dh.view(), &c.oc, grads.slot(l, LoraTarget::O));
            let (mut dq, mut dk, dv) = self.attention_backward(&docat, c);
            self.rope(&mut dq, true);
            self.rope(&mut dk, true);
            let mut dxn1 = block.q.backward(dq.view(), &c.qc, grads.slot(l, LoraTarget::Q));
            dxn1 += &block.k.backward(dk.view(), &c.kc, grads.slot(l, LoraTarget::K));
            dxn1 += &block.v.backward(dv.view(), &c.vc, grads.slot(l, LoraTarget::V));
            dx = dh;
            dx += &rms_backward(&dxn1, &c.x_in, &c.r1, &block.attn_norm);
        }
        Ok((loss, grads))
    }

    /// Final-position cross-entropy for `target` without gradients.
    pub fn loss(&self, tokens: &[u32], target: u32) -> Result<f64> {
        let (logits, _) = self.forward_with_taps(tokens)?;
        Ok(cross_entropy(&logits, target as usize).0)
    }

    fn attention_backward(&self, dout: &Array2<f64>, c: &BlockCache) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let n = dout.nrows();
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::zeros(dout.raw_dim());
        let mut dk = Array2::zeros(dout.raw_dim());
        let mut dv = Array2::zeros(dout.raw_dim());
        let mut dp = vec![0.0; n];
        let (mut dqh, mut dkh, mut dvh) = (vec![0.0; n * hd], vec![0.0; n * hd], vec![0.0; n * hd]);
        for h in 0..self.config.n_heads {
            let (qh, kh, vh) = (head_slice(&c.q, h, hd), head_slice(&c.k, h, hd), head_slice(&c.v, h, hd));
            let doh = head_slice(dout, h, hd);
            dqh.fill(0.0);
            dkh.fill(0.0);
            dvh.fill(0.0);
            for t in 0..n {
                let prow = &c.probs[(h * n + t) * n..(h * n + t + 1) * n];
                let dot_t = &doh[t * hd..(t + 1) * hd];
                let mut acc = 0.0;
                for j in 0..=t {
                    let s = dot(dot_t, &vh[j * hd..(j + 1) * hd]);
                    for (d, &g) in dvh[j * hd..(j + 1) * hd].iter_mut().zip(dot_t) {
                        *d += prow[j] * g;
                    }
                    dp[j] = s;
                    acc += prow[j] * s;
                }
                let qt = &qh[t * hd..(t + 1) * hd];
                for j in 0..=t {
                    let ds = prow[j] * (dp[j] - acc) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kh[j * hd..(j + 1) * hd];
                    for (d, &kk) in dqh[t * hd..(t + 1) * hd].iter_mut().zip(kj) {
                        *d += ds * kk;
                    }
                    for (d, &qq) in dkh[j * hd..(j + 1) * hd].iter_mut().zip(qt) {
                        *d += ds * qq;
                    }
                }
            }
            for (dst, src) in [(&mut dq, &dqh), (&mut dk, &dkh), (&mut dv, &dvh)] {
                dst.slice_mut(ndarray::s![.., h * hd..(h + 1) * hd])
                    .assign(&ndarray::ArrayView2::from_shape((n, hd), src).expect("head shape"));
            }
        }
        (dq, dk, dv)
    }
}

/// Contiguous `T x head_dim` copy of one head's columns.
fn head_slice(x: &Array2<f64>, head: usize, hd: usize) -> Vec<f64> {
    x.slice(ndarray::s![.., head * hd..(head + 1) * hd]).iter().copied().collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `(loss, dloss/dlogits)` for softmax cross-entropy.
pub(crate) fn cross_entropy(logits: &Array1<f64>, target: usize) -> (f64, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let z = exp.sum();
    let loss = z.ln() + max - logits[target];
    let mut grad = exp / z;
    grad[target] -= 1.0;
    (loss, grad)
}

fn rms_backward_row(dy: ArrayView1<f64>, x: ArrayView1<f64>, r: f64, gain: &Array1<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let dxhat = &dy * gain;
    let dot = dxhat.iter().zip(x.iter()).map(|(g, x)| g * x * r).sum::<f64>() / d;
    Zip::from(&dxhat).and(&x).map_collect(|&g, &x| r * (g - x * r * dot))
}

fn rms_backward(dy: &Array2<f64>, x: &Array2<f64>, rinv: &[f64], gain: &Array1<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(dy.raw_dim());
    for (t, mut row) in dx.rows_mut().into_iter().enumerate() {
        row.assign(&rms_backward_row(dy.row(t), x.row(t), rinv[t], gain));
    }
    dx
}
