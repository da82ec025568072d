//! Decoder-only transformer with rotary positions, pre-norm residual
//! blocks, GELU feed-forward, and grouped-query attention. The forward
//! pass accepts an arbitrary additive mask and can expose per-head
//! attention weights; the decode path runs against a [`HybridKVCache`]
//! without ever materializing a mask.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kvcache::{DecodeScratchView, HybridKVCache};
use crate::masking::AdditiveMask;
use crate::numerics::{
    dot, matmul_into, masked_softmax_row, softmax_row_inplace, Matrix, Rng,
};

pub type Token = u32;

const RMS_EPS: f32 = 1e-5;
const ROPE_BASE: f32 = 10000.0;

/// Architecture hyperparameters, shared by the engine and the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_position: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale GQA config: big enough to show attention-mass
        // structure, small enough for CPU tests.
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_q_heads: 8,
            n_kv_heads: 2,
            head_dim: 16,
            d_ff: 512,
            vocab_size: 256,
            max_position: 8192,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_q_heads == 0
            || self.n_kv_heads == 0
            || self.head_dim == 0
            || self.d_ff == 0
            || self.max_position == 0
        {
            return fail("all counts must be >= 1".into());
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_q_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            ));
        }
        if self.d_model != self.n_q_heads * self.head_dim {
            return fail(format!(
                "d_model ({}) must equal n_q_heads * head_dim ({})",
                self.d_model,
                self.n_q_heads * self.head_dim
            ));
        }
        if self.head_dim % 2 != 0 {
            return fail(format!(
                "head_dim must be even for rotary pairs, got {}",
                self.head_dim
            ));
        }
        Ok(())
    }

    pub fn q_dim(&self) -> usize {
        self.n_q_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Query heads served by each KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn param_count(&self) -> usize {
        let per_layer = self.d_model * self.q_dim()          // wq
            + 2 * self.d_model * self.kv_dim()               // wk, wv
            + self.q_dim() * self.d_model                    // wo
            + 2 * self.d_model                               // norm gains
            + 2 * self.d_model * self.d_ff;                  // w1, w2
        self.vocab_size * self.d_model
            + self.n_layers * per_layer
            + self.d_model
            + self.d_model * self.vocab_size
    }
}

/// Prefix/generated split of a laid-out sequence. The prefix holds the
/// conditioning tokens; the generated region holds everything decoded
/// after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub prefix_len: usize,
    pub gen_len: usize,
}

impl SequenceLayout {
    pub fn new(prefix_len: usize, gen_len: usize) -> Result<Self> {
        if prefix_len == 0 {
            return Err(Error::EmptyPrefix);
        }
        Ok(SequenceLayout {
            prefix_len,
            gen_len,
        })
    }

    pub fn total(&self) -> usize {
        self.prefix_len + self.gen_len
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn_norm: Matrix, // 1 x d_model
    pub wq: Matrix,        // d_model x q_dim
    pub wk: Matrix,        // d_model x kv_dim
    pub wv: Matrix,        // d_model x kv_dim
    pub wo: Matrix,        // q_dim x d_model
    pub ffn_norm: Matrix,  // 1 x d_model
    pub w1: Matrix,        // d_model x d_ff
    pub w2: Matrix,        // d_ff x d_model
}

#[derive(Debug, Clone)]
pub struct Params {
    pub embed: Matrix, // vocab x d_model
    pub layers: Vec<LayerParams>,
    pub final_norm: Matrix, // 1 x d_model
    pub head: Matrix,       // d_model x vocab
}

impl Params {
    /// Zero tensors with the shapes `config` implies; gradient and
    /// optimizer-moment containers reuse this layout.
    pub fn zeros(config: &ModelConfig) -> Params {
        Params {
            embed: Matrix::zeros(config.vocab_size, config.d_model),
            layers: (0..config.n_layers)
                .map(|_| LayerParams {
                    attn_norm: Matrix::zeros(1, config.d_model),
                    wq: Matrix::zeros(config.d_model, config.q_dim()),
                    wk: Matrix::zeros(config.d_model, config.kv_dim()),
                    wv: Matrix::zeros(config.d_model, config.kv_dim()),
                    wo: Matrix::zeros(config.q_dim(), config.d_model),
                    ffn_norm: Matrix::zeros(1, config.d_model),
                    w1: Matrix::zeros(config.d_model, config.d_ff),
                    w2: Matrix::zeros(config.d_ff, config.d_model),
                })
                .collect(),
            final_norm: Matrix::zeros(1, config.d_model),
            head: Matrix::zeros(config.d_model, config.vocab_size),
        }
    }

    /// Tensors in checkpoint declaration order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm.gain"), &l.attn_norm));
            out.push((format!("layers.{i}.attn.wq"), &l.wq));
            out.push((format!("layers.{i}.attn.wk"), &l.wk));
            out.push((format!("layers.{i}.attn.wv"), &l.wv));
            out.push((format!("layers.{i}.attn.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn_norm.gain"), &l.ffn_norm));
            out.push((format!("layers.{i}.ffn.w1"), &l.w1));
            out.push((format!("layers.{i}.ffn.w2"), &l.w2));
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm.gain"), &mut l.attn_norm));
            out.push((format!("layers.{i}.attn.wq"), &mut l.wq));
            out.push((format!("layers.{i}.attn.wk"), &mut l.wk));
            out.push((format!("layers.{i}.attn.wv"), &mut l.wv));
            out.push((format!("layers.{i}.attn.wo"), &mut l.wo));
            out.push((format!("layers.{i}.ffn_norm.gain"), &mut l.ffn_norm));
            out.push((format!("layers.{i}.ffn.w1"), &mut l.w1));
            out.push((format!("layers.{i}.ffn.w2"), &mut l.w2));
        }
        out.push(("final_norm.gain".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors()
            .iter()
            .map(|(_, m)| m.rows() * m.cols())
            .sum()
    }
}

/// Batched forward output: logits for every position, and optionally the
/// per-layer per-head attention weights for analysis.
#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub attention_weights: Option<Vec<Vec<Matrix>>>,
}

#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    rope_cos: Vec<f32>, // max_position x head_dim/2
    rope_sin: Vec<f32>,
}

impl Model {
    /// Initializes weights from a scaled normal: projections get
    /// sigma = 0.5 / sqrt(fan_in), the residual-writing ones (wo, w2)
    /// a further 1 / sqrt(2 * n_layers), embeddings sigma = 0.02, norm
    /// gains 1. Deterministic per seed.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let residual_scale = 1.0 / ((2 * config.n_layers) as f32).sqrt();
        let normal =
            |rows: usize, cols: usize, sigma: f32, rng: &mut Rng| -> Matrix {
                Matrix::from_vec(
                    rows,
                    cols,
                    (0..rows * cols).map(|_| rng.next_normal() * sigma).collect(),
                )
            };
        let proj_sigma = |fan_in: usize| 0.5 / (fan_in as f32).sqrt();

        let embed = normal(config.vocab_size, config.d_model, 0.02, rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                attn_norm: Matrix::from_vec(1, config.d_model, vec![1.0; config.d_model]),
                wq: normal(config.d_model, config.q_dim(), proj_sigma(config.d_model), rng),
                wk: normal(config.d_model, config.kv_dim(), proj_sigma(config.d_model), rng),
                wv: normal(config.d_model, config.kv_dim(), proj_sigma(config.d_model), rng),
                wo: normal(
                    config.q_dim(),
                    config.d_model,
                    proj_sigma(config.q_dim()) * residual_scale,
                    rng,
                ),
                ffn_norm: Matrix::from_vec(1, config.d_model, vec![1.0; config.d_model]),
                w1: normal(config.d_model, config.d_ff, proj_sigma(config.d_model), rng),
                w2: normal(
                    config.d_ff,
                    config.d_model,
                    proj_sigma(config.d_ff) * residual_scale,
                    rng,
                ),
            });
        }
        let final_norm = Matrix::from_vec(1, config.d_model, vec![1.0; config.d_model]);
        let head = normal(config.d_model, config.vocab_size, proj_sigma(config.d_model), rng);

        Ok(Model::from_params(
            config,
            Params {
                embed,
                layers,
                final_norm,
                head,
            },
        ))
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Model {
        let half = config.head_dim / 2;
        let mut rope_cos = vec![0.0f32; config.max_position * half];
        let mut rope_sin = vec![0.0f32; config.max_position * half];
        for pos in 0..config.max_position {
            for p in 0..half {
                let freq = ROPE_BASE.powf(-(2.0 * p as f32) / config.head_dim as f32);
                let angle = pos as f32 * freq;
                rope_cos[pos * half + p] = angle.cos();
                rope_sin[pos * half + p] = angle.sin();
            }
        }
        Model {
            config,
            params,
            rope_cos,
            rope_sin,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Rotates each head slice of `row` to absolute position `pos`.
    pub(crate) fn rope_rotate(&self, row: &mut [f32], n_heads: usize, pos: usize) {
        let hd = self.config.head_dim;
        let half = hd / 2;
        let cos = &self.rope_cos[pos * half..(pos + 1) * half];
        let sin = &self.rope_sin[pos * half..(pos + 1) * half];
        for h in 0..n_heads {
            let head = &mut row[h * hd..(h + 1) * hd];
            for p in 0..half {
                let (a, b) = (head[2 * p], head[2 * p + 1]);
                head[2 * p] = a * cos[p] - b * sin[p];
                head[2 * p + 1] = a * sin[p] + b * cos[p];
            }
        }
    }

    /// Inverse rotation; used by backprop.
    pub(crate) fn rope_rotate_inv(&self, row: &mut [f32], n_heads: usize, pos: usize) {
        let hd = self.config.head_dim;
        let half = hd / 2;
        let cos = &self.rope_cos[pos * half..(pos + 1) * half];
        let sin = &self.rope_sin[pos * half..(pos + 1) * half];
        for h in 0..n_heads {
            let head = &mut row[h * hd..(h + 1) * hd];
            for p in 0..half {
                let (a, b) = (head[2 * p], head[2 * p + 1]);
                head[2 * p] = a * cos[p] + b * sin[p];
                head[2 * p + 1] = -a * sin[p] + b * cos[p];
            }
        }
    }

    /// Full-sequence forward under an arbitrary additive mask.
    pub fn forward(
        &self,
        tokens: &[Token],
        mask: &AdditiveMask,
        capture_attention: bool,
    ) -> Result<ForwardOutput> {
        let (out, _) = self.forward_impl(tokens, mask, capture_attention, false)?;
        Ok(out)
    }

    pub(crate) fn forward_impl(
        &self,
        tokens: &[Token],
        mask: &AdditiveMask,
        capture_attention: bool,
        capture_kv: bool,
    ) -> Result<(ForwardOutput, Option<Vec<(Matrix, Matrix)>>)> {
        let cfg = &self.config;
        let t = tokens.len();
        if t > cfg.max_position {
            return Err(Error::SequenceTooLong {
                len: t,
                max_position: cfg.max_position,
            });
        }
        if mask.total() != t {
            return Err(Error::ShapeMismatch {
                expected_rows: t,
                expected_cols: t,
                got_rows: mask.total(),
                got_cols: mask.total(),
            });
        }
        for (r, &tok) in tokens.iter().enumerate() {
            if tok as usize >= cfg.vocab_size {
                return Err(Error::TargetOutOfVocab {
                    row: r,
                    target: tok,
                    vocab: cfg.vocab_size,
                });
            }
        }

        let mut h = Matrix::zeros(t, cfg.d_model);
        for (i, &tok) in tokens.iter().enumerate() {
            h.row_mut(i)
                .copy_from_slice(self.params.embed.row(tok as usize));
        }

        let mut attn_capture = capture_attention.then(Vec::new);
        let mut kv_capture = capture_kv.then(Vec::new);
        let mut normed = Matrix::zeros(t, cfg.d_model);
        let mut q = Matrix::zeros(t, cfg.q_dim());
        let mut k = Matrix::zeros(t, cfg.kv_dim());
        let mut v = Matrix::zeros(t, cfg.kv_dim());
        let mut attn_out = Matrix::zeros(t, cfg.q_dim());
        let mut proj = Matrix::zeros(t, cfg.d_model);
        let mut ffn_in = Matrix::zeros(t, cfg.d_ff);
        let mut ffn_out = Matrix::zeros(t, cfg.d_model);
        let mut scores = vec![0.0f32; t];
        let mut probs_row = vec![0.0f32; t];

        for layer in &self.params.layers {
            rmsnorm_rows(&h, &layer.attn_norm, &mut normed);
            matmul_into(&normed, &layer.wq, &mut q);
            matmul_into(&normed, &layer.wk, &mut k);
            matmul_into(&normed, &layer.wv, &mut v);
            for i in 0..t {
                self.rope_rotate(q.row_mut(i), cfg.n_q_heads, i);
                self.rope_rotate(k.row_mut(i), cfg.n_kv_heads, i);
            }
            if let Some(kv) = kv_capture.as_mut() {
                kv.push((k.clone(), v.clone()));
            }

            let mut layer_attn = capture_attention.then(|| {
                vec![Matrix::zeros(t, t); cfg.n_q_heads]
            });
            attn_out.fill(0.0);
            let scale = 1.0 / (cfg.head_dim as f32).sqrt();
            let hd = cfg.head_dim;
            for qh in 0..cfg.n_q_heads {
                let kvh = qh / cfg.group_size();
                for i in 0..t {
                    let q_slice = &q.row(i)[qh * hd..(qh + 1) * hd];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k_slice = &k.row(j)[kvh * hd..(kvh + 1) * hd];
                        *s = dot(q_slice, k_slice) * scale;
                    }
                    masked_softmax_row(&scores, mask.entries.row(i), &mut probs_row)
                        .map_err(|_| Error::AllMaskedRow { row: i })?;
                    let out_slice = &mut attn_out.row_mut(i)[qh * hd..(qh + 1) * hd];
                    for (j, &p) in probs_row.iter().enumerate() {
                        if p != 0.0 {
                            let v_slice = &v.row(j)[kvh * hd..(kvh + 1) * hd];
                            for (o, &vv) in out_slice.iter_mut().zip(v_slice) {
                                *o += p * vv;
                            }
                        }
                    }
                    if let Some(heads) = layer_attn.as_mut() {
                        heads[qh].row_mut(i).copy_from_slice(&probs_row);
                    }
                }
            }
            if let (Some(cap), Some(heads)) = (attn_capture.as_mut(), layer_attn) {
                cap.push(heads);
            }

            matmul_into(&attn_out, &layer.wo, &mut proj);
            add_assign(&mut h, &proj);

            rmsnorm_rows(&h, &layer.ffn_norm, &mut normed);
            matmul_into(&normed, &layer.w1, &mut ffn_in);
            for x in ffn_in.data_mut() {
                *x = gelu(*x);
            }
            matmul_into(&ffn_in, &layer.w2, &mut ffn_out);
            add_assign(&mut h, &ffn_out);
        }

        rmsnorm_rows(&h, &self.params.final_norm, &mut normed);
        let mut logits = Matrix::zeros(t, cfg.vocab_size);
        matmul_into(&normed, &self.params.head, &mut logits);

        Ok((
            ForwardOutput {
                logits,
                attention_weights: attn_capture,
            },
            kv_capture,
        ))
    }

    /// One incremental decode step against a prefilled cache. Attention
    /// runs over the cache's visible set (global prefix + rolling window)
    /// plus the fresh token itself, then the fresh K/V joins the window.
    /// Writes the logits row into `logits_out`; allocation-free.
    pub fn decode_step_into(
        &self,
        cache: &mut HybridKVCache,
        new_token: Token,
        logits_out: &mut [f32],
    ) -> Result<()> {
        let cfg = &self.config;
        cache.check_model(cfg)?;
        if new_token as usize >= cfg.vocab_size {
            return Err(Error::TargetOutOfVocab {
                row: 0,
                target: new_token,
                vocab: cfg.vocab_size,
            });
        }
        let pos = cache.next_position();
        if pos >= cfg.max_position {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                max_position: cfg.max_position,
            });
        }
        debug_assert_eq!(logits_out.len(), cfg.vocab_size);

        let hd = cfg.head_dim;
        let kv_dim = cfg.kv_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let visible = cache.visible_len() + 1;
        let mut scratch = cache.take_scratch();
        scratch.ensure_scores(visible);
        {
            let DecodeScratchView {
                h,
                normed,
                q,
                attn,
                proj,
                ffn,
                scores,
                pending_k,
                pending_v,
            } = scratch.view();
            h.copy_from_slice(self.params.embed.row(new_token as usize));

            for (l, layer) in self.params.layers.iter().enumerate() {
                let k_new = &mut pending_k[l * kv_dim..(l + 1) * kv_dim];
                let v_new = &mut pending_v[l * kv_dim..(l + 1) * kv_dim];
                rmsnorm_vec(h, layer.attn_norm.row(0), normed);
                matvec(normed, &layer.wq, q);
                matvec(normed, &layer.wk, k_new);
                matvec(normed, &layer.wv, v_new);
                self.rope_rotate(q, cfg.n_q_heads, pos);
                self.rope_rotate(k_new, cfg.n_kv_heads, pos);

                for qh in 0..cfg.n_q_heads {
                    let kvh = qh / cfg.group_size();
                    let q_slice = &q[qh * hd..(qh + 1) * hd];
                    let kv_off = kvh * hd;
                    let mut n = 0usize;
                    for (_, k_row, _) in cache.visible_entries(l) {
                        scores[n] = dot(q_slice, &k_row[kv_off..kv_off + hd]) * scale;
                        n += 1;
                    }
                    scores[n] = dot(q_slice, &k_new[kv_off..kv_off + hd]) * scale;
                    softmax_row_inplace(&mut scores[..visible]);

                    let out = &mut attn[qh * hd..(qh + 1) * hd];
                    out.fill(0.0);
                    let mut n = 0usize;
                    for (_, _, v_row) in cache.visible_entries(l) {
                        let p = scores[n];
                        for (o, &vv) in out.iter_mut().zip(&v_row[kv_off..kv_off + hd]) {
                            *o += p * vv;
                        }
                        n += 1;
                    }
                    let p = scores[n];
                    for (o, &vv) in out.iter_mut().zip(&v_new[kv_off..kv_off + hd]) {
                        *o += p * vv;
                    }
                }

                matvec(attn, &layer.wo, proj);
                for (hv, &pv) in h.iter_mut().zip(proj.iter()) {
                    *hv += pv;
                }

                rmsnorm_vec(h, layer.ffn_norm.row(0), normed);
                matvec(normed, &layer.w1, ffn);
                for x in ffn.iter_mut() {
                    *x = gelu(*x);
                }
                matvec(ffn, &layer.w2, proj);
                for (hv, &pv) in h.iter_mut().zip(proj.iter()) {
                    *hv += pv;
                }
            }

            rmsnorm_vec(h, self.params.final_norm.row(0), normed);
            matvec(normed, &self.params.head, logits_out);
        }

        cache.append_pending(&scratch);
        cache.put_scratch(scratch);
        Ok(())
    }

    /// Allocating convenience wrapper over [`Model::decode_step_into`].
    pub fn decode_step(&self, cache: &mut HybridKVCache, new_token: Token) -> Result<Vec<f32>> {
        let mut logits = vec![0.0f32; self.config.vocab_size];
        self.decode_step_into(cache, new_token, &mut logits)?;
        Ok(logits)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for field in config_fields(&self.config) {
            buf.extend_from_slice(&(field as u32).to_le_bytes());
        }
        for (name, tensor) in self.params.tensors() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&2u32.to_le_bytes());
            buf.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != CKPT_MAGIC {
            return Err(Error::BadCheckpoint("bad magic bytes".into()));
        }
        let version = cur.read_u32()?;
        if version != CKPT_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let mut fields = [0usize; 8];
        for f in fields.iter_mut() {
            *f = cur.read_u32()? as usize;
        }
        let config = ModelConfig {
            n_layers: fields[0],
            d_model: fields[1],
            n_q_heads: fields[2],
            n_kv_heads: fields[3],
            head_dim: fields[4],
            d_ff: fields[5],
            vocab_size: fields[6],
            max_position: fields[7],
        };
        config.validate()?;

        let mut rng = Rng::new(0);
        let mut model = Model::init(config, &mut rng)?;
        for (name, tensor) in model.params.tensors_mut() {
            let name_len = cur.read_u32()? as usize;
            let got_name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::BadCheckpoint("tensor name is not UTF-8".into()))?;
            if got_name != name {
                return Err(Error::BadCheckpoint(format!(
                    "expected tensor '{name}', found '{got_name}'"
                )));
            }
            let rank = cur.read_u32()?;
            if rank != 2 {
                return Err(Error::BadCheckpoint(format!(
                    "tensor '{name}' has rank {rank}, expected 2"
                )));
            }
            let rows = cur.read_u32()? as usize;
            let cols = cur.read_u32()? as usize;
            if rows != tensor.rows() || cols != tensor.cols() {
                return Err(Error::BadCheckpoint(format!(
                    "tensor '{name}' is {rows}x{cols}, expected {}x{}",
                    tensor.rows(),
                    tensor.cols()
                )));
            }
            for v in tensor.data_mut() {
                *v = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::BadCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(model)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"WANDCKPT";
const CKPT_VERSION: u32 = 1;

fn config_fields(c: &ModelConfig) -> [usize; 8] {
    [
        c.n_layers,
        c.d_model,
        c.n_q_heads,
        c.n_kv_heads,
        c.head_dim,
        c.d_ff,
        c.vocab_size,
        c.max_position,
    ]
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::BadCheckpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// y = x / rms(x) * gain, per row.
pub(crate) fn rmsnorm_rows(x: &Matrix, gain: &Matrix, out: &mut Matrix) {
    for r in 0..x.rows() {
        rmsnorm_vec(x.row(r), gain.row(0), out.row_mut(r));
    }
}

pub(crate) fn rmsnorm_vec(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let ms: f32 = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, &xv), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = xv * inv * g;
    }
}

pub(crate) fn inv_rms(x: &[f32]) -> f32 {
    let ms: f32 = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    1.0 / (ms + RMS_EPS).sqrt()
}

/// Tanh-approximate GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// out = row_vec @ m for a single row.
pub(crate) fn matvec(row_vec: &[f32], m: &Matrix, out: &mut [f32]) {
    debug_assert_eq!(row_vec.len(), m.rows());
    debug_assert_eq!(out.len(), m.cols());
    out.fill(0.0);
    for (k, &a) in row_vec.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let m_row = m.row(k);
        for (o, &mv) in out.iter_mut().zip(m_row) {
            *o += a * mv;
        }
    }
}

pub(crate) fn add_assign(a: &mut Matrix, b: &Matrix) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

/// Greedy argmax over a logits row; ties resolve to the lowest id.
pub fn sample_greedy(logits: &[f32]) -> Token {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as Token
}

/// Temperature + top-k sampling. `top_k = 0` means no truncation.
pub fn sample_topk(logits: &[f32], temperature: f32, top_k: usize, rng: &mut Rng) -> Token {
    if temperature <= 0.0 {
        return sample_greedy(logits);
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    if top_k > 0 && top_k < logits.len() {
        idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
        idx.truncate(top_k);
    }
    let max = idx.iter().map(|&i| logits[i]).fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = idx
        .iter()
        .map(|&i| (((logits[i] - max) / temperature) as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.next_f64() * total;
    for (w, &i) in weights.iter().zip(&idx) {
        draw -= w;
        if draw <= 0.0 {
            return i as Token;
        }
    }
    *idx.last().unwrap() as Token
}
