//! Two-part inference cache: an immutable global segment holding the
//! conditioning prefix and a fixed-capacity ring of generated-token K/V
//! entries. Once the ring fills, appends overwrite the oldest slot in
//! place, so steady-state decode allocates nothing and the footprint is
//! constant in the number of generated tokens.

use crate::error::{Error, Result};
use crate::masking::{causal_full_mask, WindowSpec};
use crate::model::{Model, ModelConfig, SequenceLayout, Token};
use crate::numerics::Matrix;

const F32_BYTES: usize = 4;

/// Reusable per-step buffers owned by the cache so the decode loop stays
/// allocation-free after prefill.
#[derive(Debug)]
pub(crate) struct DecodeScratch {
    pub h: Vec<f32>,
    pub normed: Vec<f32>,
    pub q: Vec<f32>,
    pub attn: Vec<f32>,
    pub proj: Vec<f32>,
    pub ffn: Vec<f32>,
    pub scores: Vec<f32>,
    pending_k: Vec<f32>, // n_layers x kv_dim
    pending_v: Vec<f32>,
}

impl DecodeScratch {
    fn new(cfg: &ModelConfig, score_capacity: usize) -> Self {
        DecodeScratch {
            h: vec![0.0; cfg.d_model],
            normed: vec![0.0; cfg.d_model],
            q: vec![0.0; cfg.q_dim()],
            attn: vec![0.0; cfg.q_dim()],
            proj: vec![0.0; cfg.d_model],
            ffn: vec![0.0; cfg.d_ff],
            scores: vec![0.0; score_capacity],
            pending_k: vec![0.0; cfg.n_layers * cfg.kv_dim()],
            pending_v: vec![0.0; cfg.n_layers * cfg.kv_dim()],
        }
    }

    pub(crate) fn pending(&self, layer: usize, kv_dim: usize) -> (&[f32], &[f32]) {
        let r = layer * kv_dim..(layer + 1) * kv_dim;
        (&self.pending_k[r.clone()], &self.pending_v[r])
    }

    /// Disjoint mutable views over every buffer, for the decode pass.
    pub(crate) fn view(&mut self) -> DecodeScratchView<'_> {
        DecodeScratchView {
            h: &mut self.h,
            normed: &mut self.normed,
            q: &mut self.q,
            attn: &mut self.attn,
            proj: &mut self.proj,
            ffn: &mut self.ffn,
            scores: &mut self.scores,
            pending_k: &mut self.pending_k,
            pending_v: &mut self.pending_v,
        }
    }

    pub(crate) fn ensure_scores(&mut self, n: usize) {
        if self.scores.len() < n {
            self.scores.resize(n, 0.0);
        }
    }

    fn heap_bytes(&self) -> usize {
        (self.h.capacity()
            + self.normed.capacity()
            + self.q.capacity()
            + self.attn.capacity()
            + self.proj.capacity()
            + self.ffn.capacity()
            + self.scores.capacity()
            + self.pending_k.capacity()
            + self.pending_v.capacity())
            * F32_BYTES
    }
}

pub(crate) struct DecodeScratchView<'a> {
    pub h: &'a mut [f32],
    pub normed: &'a mut [f32],
    pub q: &'a mut [f32],
    pub attn: &'a mut [f32],
    pub proj: &'a mut [f32],
    pub ffn: &'a mut [f32],
    pub scores: &'a mut [f32],
    pub pending_k: &'a mut [f32],
    pub pending_v: &'a mut [f32],
}

/// The hybrid decode cache. See module docs.
#[derive(Debug)]
pub struct HybridKVCache {
    config: ModelConfig,
    window: WindowSpec,
    prefix_len: usize,
    steps_taken: usize,
    global_k: Vec<Matrix>, // per layer, prefix_len x kv_dim
    global_v: Vec<Matrix>,
    ring_k: Vec<Vec<f32>>, // per layer, ring_cap x kv_dim
    ring_v: Vec<Vec<f32>>,
    positions: Vec<usize>, // absolute position per ring slot
    ring_cap: usize,
    head: usize,
    occupancy: usize,
    scratch: Option<DecodeScratch>,
}

impl HybridKVCache {
    /// Runs the prefix through the model under a causal mask and stores
    /// the per-layer K/V as the immutable global segment.
    pub fn prefill(model: &Model, prefix_tokens: &[Token], window: WindowSpec) -> Result<Self> {
        Self::prefill_with_capacity(model, prefix_tokens, window, 0)
    }

    /// As [`HybridKVCache::prefill`], reserving ring capacity for
    /// `expected_tokens` up front when the window is unbounded so the
    /// full-attention baseline does not reallocate mid-benchmark.
    pub fn prefill_with_capacity(
        model: &Model,
        prefix_tokens: &[Token],
        window: WindowSpec,
        expected_tokens: usize,
    ) -> Result<Self> {
        if prefix_tokens.is_empty() {
            return Err(Error::EmptyPrefix);
        }
        let cfg = *model.config();
        let layout = SequenceLayout::new(prefix_tokens.len(), 0)?;
        let mask = causal_full_mask(layout);
        let (_, kv) = model.forward_impl(prefix_tokens, &mask, false, true)?;
        let kv = kv.expect("kv capture requested");

        let ring_cap = match window {
            WindowSpec::Bounded(w) => w.max(1),
            WindowSpec::Unbounded => expected_tokens,
        };
        let kv_dim = cfg.kv_dim();
        let scratch_scores = prefix_tokens.len() + ring_cap + 1;
        let mut cache = HybridKVCache {
            config: cfg,
            window,
            prefix_len: prefix_tokens.len(),
            steps_taken: 0,
            global_k: Vec::with_capacity(cfg.n_layers),
            global_v: Vec::with_capacity(cfg.n_layers),
            ring_k: (0..cfg.n_layers)
                .map(|_| vec![0.0; ring_cap * kv_dim])
                .collect(),
            ring_v: (0..cfg.n_layers)
                .map(|_| vec![0.0; ring_cap * kv_dim])
                .collect(),
            positions: vec![0; ring_cap],
            ring_cap,
            head: 0,
            occupancy: 0,
            scratch: Some(DecodeScratch::new(&cfg, scratch_scores)),
        };
        for (k, v) in kv {
            cache.global_k.push(k);
            cache.global_v.push(v);
        }
        Ok(cache)
    }

    pub fn window(&self) -> WindowSpec {
        self.window
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    /// Absolute position the next decoded token will occupy.
    pub fn next_position(&self) -> usize {
        self.prefix_len + self.steps_taken
    }

    /// Prefix plus ring entries currently held.
    pub fn cached_positions(&self) -> usize {
        self.prefix_len + self.occupancy
    }

    pub(crate) fn visible_len(&self) -> usize {
        self.cached_positions()
    }

    pub(crate) fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if self.config != *cfg {
            return Err(Error::CacheConfigMismatch {
                cache: format!("{:?}", self.config),
                model: format!("{cfg:?}"),
            });
        }
        Ok(())
    }

    /// Ordered K/V visible to the next query: the global segment followed
    /// by the ring in ascending absolute position.
    pub fn visible_entries(
        &self,
        layer: usize,
    ) -> impl Iterator<Item = (usize, &[f32], &[f32])> + '_ {
        let kv_dim = self.config.kv_dim();
        let global_k = &self.global_k[layer];
        let global_v = &self.global_v[layer];
        let ring_k = &self.ring_k[layer];
        let ring_v = &self.ring_v[layer];
        let prefix = (0..self.prefix_len).map(move |j| (j, global_k.row(j), global_v.row(j)));
        let ring = (0..self.occupancy).map(move |i| {
            let slot = (self.head + i) % self.ring_cap;
            (
                self.positions[slot],
                &ring_k[slot * kv_dim..(slot + 1) * kv_dim],
                &ring_v[slot * kv_dim..(slot + 1) * kv_dim],
            )
        });
        prefix.chain(ring)
    }

    /// Absolute positions currently held in the ring, ascending.
    pub fn ring_positions(&self) -> Vec<usize> {
        (0..self.occupancy)
            .map(|i| self.positions[(self.head + i) % self.ring_cap])
            .collect()
    }

    /// Appends one K/V pair per layer for the token at the next position,
    /// evicting the oldest generated entry in place once the ring is full.
    pub fn append(&mut self, layer_kv: &[(&[f32], &[f32])]) {
        assert_eq!(layer_kv.len(), self.config.n_layers);
        let pos = self.next_position();
        let slot = self.claim_slot();
        let kv_dim = self.config.kv_dim();
        for (layer, (k, v)) in layer_kv.iter().enumerate() {
            self.ring_k[layer][slot * kv_dim..(slot + 1) * kv_dim].copy_from_slice(k);
            self.ring_v[layer][slot * kv_dim..(slot + 1) * kv_dim].copy_from_slice(v);
        }
        self.positions[slot] = pos;
        self.steps_taken += 1;
    }

    pub(crate) fn append_pending(&mut self, scratch: &DecodeScratch) {
        let pos = self.next_position();
        let slot = self.claim_slot();
        let kv_dim = self.config.kv_dim();
        for layer in 0..self.config.n_layers {
            let (k, v) = scratch.pending(layer, kv_dim);
            self.ring_k[layer][slot * kv_dim..(slot + 1) * kv_dim].copy_from_slice(k);
            self.ring_v[layer][slot * kv_dim..(slot + 1) * kv_dim].copy_from_slice(v);
        }
        self.positions[slot] = pos;
        self.steps_taken += 1;
    }

    fn claim_slot(&mut self) -> usize {
        match self.window {
            WindowSpec::Bounded(_) => {
                if self.occupancy < self.ring_cap {
                    let slot = (self.head + self.occupancy) % self.ring_cap;
                    self.occupancy += 1;
                    slot
                } else {
                    let slot = self.head;
                    self.head = (self.head + 1) % self.ring_cap;
                    slot
                }
            }
            WindowSpec::Unbounded => {
                if self.occupancy == self.ring_cap {
                    let new_cap = (self.ring_cap * 2).max(64);
                    let kv_dim = self.config.kv_dim();
                    for layer in 0..self.config.n_layers {
                        self.ring_k[layer].resize(new_cap * kv_dim, 0.0);
                        self.ring_v[layer].resize(new_cap * kv_dim, 0.0);
                    }
                    self.positions.resize(new_cap, 0);
                    self.ring_cap = new_cap;
                }
                let slot = self.occupancy;
                self.occupancy += 1;
                slot
            }
        }
    }

    pub(crate) fn take_scratch(&mut self) -> DecodeScratch {
        self.scratch.take().expect("decode scratch in use")
    }

    pub(crate) fn put_scratch(&mut self, scratch: DecodeScratch) {
        self.scratch = Some(scratch);
    }

    /// Logical cache size by the fp32 formula:
    /// 2 * n_layers * n_kv_heads * head_dim * cached_positions * 4.
    pub fn cache_bytes(&self) -> usize {
        cache_bytes_formula(
            &self.config,
            self.prefix_len,
            self.steps_taken,
            self.window,
        )
    }

    /// Heap bytes actually owned by this cache (capacities, not lengths).
    /// Constant from prefill onward for a bounded window.
    pub fn allocated_bytes(&self) -> usize {
        let tensors: usize = self
            .global_k
            .iter()
            .chain(self.global_v.iter())
            .map(|m| m.data().len() * F32_BYTES)
            .sum();
        let rings: usize = self
            .ring_k
            .iter()
            .chain(self.ring_v.iter())
            .map(|v| v.capacity() * F32_BYTES)
            .sum();
        let positions = self.positions.capacity() * std::mem::size_of::<usize>();
        let scratch = self.scratch.as_ref().map_or(0, |s| s.heap_bytes());
        tensors + rings + positions + scratch
    }

    /// One JSON line of decode-state telemetry for the bench harness.
    pub fn dump_line(&self, step: usize) -> String {
        format!(
            "{{\"step\":{},\"occupancy\":{},\"cached_positions\":{},\"bytes\":{}}}",
            step,
            self.occupancy,
            self.cached_positions(),
            self.cache_bytes()
        )
    }
}

/// Closed-form fp32 cache size after `steps` generated tokens.
pub fn cache_bytes_formula(
    config: &ModelConfig,
    prefix_len: usize,
    steps: usize,
    window: WindowSpec,
) -> usize {
    let cached = match window {
        WindowSpec::Bounded(w) => prefix_len + steps.min(w),
        WindowSpec::Unbounded => prefix_len + steps,
    };
    2 * config.n_layers * config.n_kv_heads * config.head_dim * cached * F32_BYTES
}
