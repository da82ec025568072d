//! Quantitative analyses: attention-mass decomposition over captured
//! weights, the closed-form KV/FLOPs cost model with published-baseline
//! presets, and the per-step decode latency benchmark.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::kvcache::{cache_bytes_formula, HybridKVCache};
use crate::masking::WindowSpec;
use crate::model::{sample_greedy, Model, ModelConfig, SequenceLayout, Token};
use crate::numerics::{Matrix, Rng};

/// Attention-mass decomposition of decode-region queries, in percent.
///
/// `local_w_over_gen` is the share of generated-token mass that falls on
/// the keys a windowed model would keep (the query itself plus the `w`
/// most recent generated predecessors). Coverage combines the parts:
/// prompt + generated * local/gen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionStats {
    pub prompt_mass: f64,
    pub generated_mass: f64,
    pub local_w_over_gen: f64,
    pub coverage: f64,
    pub window_used: usize,
}

/// Table-style coverage formula on percentage inputs.
pub fn coverage_from_parts(prompt: f64, generated: f64, local_over_gen: f64) -> f64 {
    prompt + generated * local_over_gen / 100.0
}

/// Decomposes captured full-attention weights (layers x heads x queries)
/// over the prefix/generated split. Only decode queries with at least `w`
/// generated predecessors count, so the local window is fully defined;
/// averaging is uniform over layers, heads, and eligible queries.
pub fn attention_decomposition(
    attention: &[Vec<Matrix>],
    layout: SequenceLayout,
    w: usize,
) -> Result<AttentionStats> {
    let prefix = layout.prefix_len;
    let total = layout.total();
    let first_eligible_k = w + 1; // 1-based index within the generated region
    if layout.gen_len < first_eligible_k {
        return Err(Error::NoEligibleQueries { window: w });
    }
    let mut prompt_sum = 0.0f64;
    let mut ratio_sum = 0.0f64;
    let mut count = 0usize;
    for heads in attention {
        for head in heads {
            for k in first_eligible_k..=layout.gen_len {
                let i = prefix + k - 1;
                let row = head.row(i);
                debug_assert_eq!(row.len(), total);
                let prefix_mass: f64 = row[..prefix].iter().map(|&p| p as f64).sum();
                let gen_mass: f64 = row[prefix..=i].iter().map(|&p| p as f64).sum();
                let local_mass: f64 = row[i - w..=i].iter().map(|&p| p as f64).sum();
                prompt_sum += prefix_mass;
                ratio_sum += if gen_mass > 1e-12 {
                    local_mass / gen_mass
                } else {
                    1.0
                };
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoEligibleQueries { window: w });
    }
    let prompt_mass = 100.0 * prompt_sum / count as f64;
    let generated_mass = 100.0 - prompt_mass;
    let local_w_over_gen = 100.0 * ratio_sum / count as f64;
    Ok(AttentionStats {
        prompt_mass,
        generated_mass,
        local_w_over_gen,
        coverage: coverage_from_parts(prompt_mass, generated_mass, local_w_over_gen),
        window_used: w,
    })
}

/// fp32 KV bytes after `gen_len` generated tokens.
pub fn kv_cost(config: &ModelConfig, prefix_len: usize, gen_len: usize, w: WindowSpec) -> u64 {
    cache_bytes_formula(config, prefix_len, gen_len, w) as u64
}

/// FLOPs for one decode step at a given visible context length: a
/// constant term for the projections, feed-forward, and output head
/// (2 FLOPs per multiply-accumulate), plus the attention term
/// 4 * n_layers * n_q_heads * head_dim * visible_len for QK^T and the
/// weighted V sum. Query heads count in full; KV heads are broadcast.
pub fn flops_per_step(config: &ModelConfig, visible_len: usize) -> u64 {
    let d = config.d_model as u64;
    let q_dim = config.q_dim() as u64;
    let kv_dim = config.kv_dim() as u64;
    let d_ff = config.d_ff as u64;
    let per_layer_const = 2 * d * q_dim      // Q projection
        + 2 * 2 * d * kv_dim                 // K and V projections
        + 2 * q_dim * d                      // output projection
        + 2 * 2 * d * d_ff;                  // feed-forward pair
    let constant = config.n_layers as u64 * per_layer_const + 2 * d * config.vocab_size as u64;
    let attention =
        4 * (config.n_layers * config.n_q_heads * config.head_dim * visible_len) as u64;
    constant + attention
}

/// Per-step and cumulative cost trace for one generation length.
#[derive(Debug, Clone, Copy)]
pub struct CostStep {
    pub step: usize,
    pub kv_bytes_full: u64,
    pub kv_bytes_windowed: u64,
    pub flops_full: u64,
    pub flops_windowed: u64,
    pub cum_flops_full: u64,
    pub cum_flops_windowed: u64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub per_step: Vec<CostStep>,
    pub final_kv_full: u64,
    pub final_kv_windowed: u64,
    pub reduction_pct: f64,
    pub cum_flops_full: u64,
    pub cum_flops_windowed: u64,
    pub flops_speedup: f64,
}

/// Runs the closed-form cost model for full vs windowed attention over
/// `gen_len` generated tokens.
pub fn cost_model(config: &ModelConfig, prefix_len: usize, gen_len: usize, w: usize) -> CostReport {
    let mut per_step = Vec::with_capacity(gen_len);
    let mut cum_full = 0u64;
    let mut cum_win = 0u64;
    for n in 1..=gen_len {
        let visible_full = prefix_len + n;
        let visible_win = prefix_len + n.min(w + 1);
        let flops_full = flops_per_step(config, visible_full);
        let flops_windowed = flops_per_step(config, visible_win);
        cum_full += flops_full;
        cum_win += flops_windowed;
        per_step.push(CostStep {
            step: n,
            kv_bytes_full: kv_cost(config, prefix_len, n, WindowSpec::Unbounded),
            kv_bytes_windowed: kv_cost(config, prefix_len, n, WindowSpec::Bounded(w)),
            flops_full,
            flops_windowed,
            cum_flops_full: cum_full,
            cum_flops_windowed: cum_win,
        });
    }
    let final_kv_full = kv_cost(config, prefix_len, gen_len, WindowSpec::Unbounded);
    let final_kv_windowed = kv_cost(config, prefix_len, gen_len, WindowSpec::Bounded(w));
    CostReport {
        final_kv_full,
        final_kv_windowed,
        reduction_pct: 100.0 * (1.0 - final_kv_windowed as f64 / final_kv_full as f64),
        cum_flops_full: cum_full,
        cum_flops_windowed: cum_win,
        flops_speedup: cum_full as f64 / cum_win as f64,
        per_step,
    }
}

/// A published-baseline preset: token rate and window from the paper's
/// setup, the prefix length solved from its reported cache pair, and the
/// reported MB / GFLOPs pairs for arithmetic cross-checks.
#[derive(Debug, Clone, Copy)]
pub struct CostPreset {
    pub name: &'static str,
    pub token_rate_hz: usize,
    pub window: usize,
    pub derived_prefix: usize,
    pub published_mb: (f64, f64),
    pub published_gflops: (f64, f64),
}

impl CostPreset {
    /// Reduction from the published cache pair, in percent.
    pub fn published_reduction_pct(&self) -> f64 {
        100.0 * (1.0 - self.published_mb.1 / self.published_mb.0)
    }

    /// Speedup from the published GFLOPs pair.
    pub fn published_speedup(&self) -> f64 {
        self.published_gflops.0 / self.published_gflops.1
    }

    /// Reduction recomputed from the derived prefix length and token
    /// rate via the cache formula; the per-position byte factor cancels.
    pub fn modeled_reduction_pct(&self, seconds: usize) -> f64 {
        let gen = self.token_rate_hz * seconds;
        let full = (self.derived_prefix + gen) as f64;
        let windowed = (self.derived_prefix + gen.min(self.window)) as f64;
        100.0 * (1.0 - windowed / full)
    }
}

pub fn cost_presets() -> [CostPreset; 3] {
    [
        CostPreset {
            name: "cosyvoice2-10s",
            token_rate_hz: 25,
            window: 32,
            derived_prefix: 187,
            published_mb: (10.48, 5.25),
            published_gflops: (11.55, 7.44),
        },
        CostPreset {
            name: "indextts-10s",
            token_rate_hz: 25,
            window: 32,
            derived_prefix: 80,
            published_mb: (38.44, 13.01),
            published_gflops: (6.18, 3.28),
        },
        CostPreset {
            name: "sparktts-10s",
            token_rate_hz: 50,
            window: 64,
            derived_prefix: 221,
            published_mb: (18.09, 7.15),
            published_gflops: (48.12, 31.74),
        },
    ]
}

pub fn find_preset(name: &str) -> Option<CostPreset> {
    cost_presets().into_iter().find(|p| p.name == name)
}

/// Wall-times of individual decode steps under one attention variant.
#[derive(Debug, Clone)]
pub struct LatencyTrace {
    pub variant: String,
    /// (generated token index, median step time in ns), warmup excluded.
    pub times: Vec<(usize, u64)>,
    pub tokens: Vec<Token>,
}

const LATENCY_WARMUP: usize = 32;

/// Times per-step greedy decode of `n_tokens` under `variant`, taking the
/// median over `repeats` runs per token index and discarding the first
/// 32 steps as warmup.
pub fn latency_bench(
    model: &Model,
    prefix: &[Token],
    n_tokens: usize,
    variant: WindowSpec,
    repeats: usize,
) -> Result<LatencyTrace> {
    if let WindowSpec::Bounded(w) = variant {
        if n_tokens < 4 * w {
            return Err(Error::InvalidConfig(format!(
                "need n_tokens >= 4 * W for the windowed variant, got {n_tokens} < {}",
                4 * w
            )));
        }
    }
    let repeats = repeats.max(1);
    let mut samples: Vec<Vec<u64>> = vec![Vec::with_capacity(repeats); n_tokens];
    let mut tokens_first: Vec<Token> = Vec::new();
    let mut logits = vec![0.0f32; model.config().vocab_size];
    for rep in 0..repeats {
        let mut cache = HybridKVCache::prefill_with_capacity(model, prefix, variant, n_tokens)?;
        let mut tok = *prefix.last().unwrap();
        let mut tokens = Vec::with_capacity(n_tokens);
        for step in 0..n_tokens {
            let t0 = Instant::now();
            model.decode_step_into(&mut cache, tok, &mut logits)?;
            let dt = t0.elapsed().as_nanos() as u64;
            tok = sample_greedy(&logits);
            tokens.push(tok);
            samples[step].push(dt);
        }
        if rep == 0 {
            tokens_first = tokens;
        } else if tokens != tokens_first {
            return Err(Error::InvalidConfig(
                "token trajectory changed between repeats".into(),
            ));
        }
    }
    let mut times = Vec::with_capacity(n_tokens.saturating_sub(LATENCY_WARMUP));
    for (idx, mut reps) in samples.into_iter().enumerate().skip(LATENCY_WARMUP) {
        reps.sort_unstable();
        let median = reps[reps.len() / 2];
        if median < 10 {
            return Err(Error::TimerResolution {
                step_ns: median as u128,
            });
        }
        times.push((idx, median));
    }
    Ok(LatencyTrace {
        variant: variant.to_string(),
        times,
        tokens: tokens_first,
    })
}

/// Least-squares slope of time against token index, in ns per token.
pub fn fit_slope(times: &[(usize, u64)]) -> f64 {
    let n = times.len() as f64;
    let mean_x = times.iter().map(|&(x, _)| x as f64).sum::<f64>() / n;
    let mean_y = times.iter().map(|&(_, y)| y as f64).sum::<f64>() / n;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for &(x, y) in times {
        let dx = x as f64 - mean_x;
        num += dx * (y as f64 - mean_y);
        den += dx * dx;
    }
    num / den
}

/// One-sided permutation test for a positive slope: shuffles the times
/// against the indices and counts permuted slopes at least as large.
pub fn slope_permutation_p(times: &[(usize, u64)], n_perm: usize, seed: u64) -> f64 {
    let observed = fit_slope(times);
    let xs: Vec<usize> = times.iter().map(|&(x, _)| x).collect();
    let mut ys: Vec<u64> = times.iter().map(|&(_, y)| y).collect();
    let mut rng = Rng::new(seed);
    let mut at_least = 0usize;
    for _ in 0..n_perm {
        // Fisher-Yates shuffle of the times.
        for i in (1..ys.len()).rev() {
            let j = rng.next_below((i + 1) as u64) as usize;
            ys.swap(i, j);
        }
        let permuted: Vec<(usize, u64)> = xs.iter().cloned().zip(ys.iter().cloned()).collect();
        if fit_slope(&permuted) >= observed {
            at_least += 1;
        }
    }
    (1 + at_least) as f64 / (n_perm + 1) as f64
}

pub fn attention_stats_csv(stats: &AttentionStats, n_layers: usize, n_heads: usize) -> String {
    let mut out =
        String::from("window,layers,heads,prompt_pct,generated_pct,local_over_gen_pct,coverage_pct\n");
    out.push_str(&format!(
        "{},{},{},{:.3},{:.3},{:.3},{:.3}\n",
        stats.window_used,
        n_layers,
        n_heads,
        stats.prompt_mass,
        stats.generated_mass,
        stats.local_w_over_gen,
        stats.coverage
    ));
    out
}

pub fn cost_report_csv(report: &CostReport) -> String {
    let mut out = String::from(
        "step,kv_bytes_full,kv_bytes_windowed,flops_full,flops_windowed,cum_flops_full,cum_flops_windowed\n",
    );
    for s in &report.per_step {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.step,
            s.kv_bytes_full,
            s.kv_bytes_windowed,
            s.flops_full,
            s.flops_windowed,
            s.cum_flops_full,
            s.cum_flops_windowed
        ));
    }
    out
}

pub fn latency_trace_csv(traces: &[LatencyTrace]) -> String {
    let mut out = String::from("variant,token_index,step_time_ns\n");
    for trace in traces {
        for &(idx, ns) in &trace.times {
            out.push_str(&format!("{},{},{}\n", trace.variant, idx, ns));
        }
    }
    out
}
