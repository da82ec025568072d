//! End-to-end engine checks: initialization contracts, mask equivalences,
//! incremental decode against the batched oracle, and checkpoint fidelity.

use wand_core::masking::{causal_full_mask, hybrid_mask, WindowSpec};
use wand_core::model::{
    sample_greedy, LayerParams, Model, ModelConfig, Params, SequenceLayout, Token,
};
use wand_core::numerics::{Matrix, Rng};
use wand_core::HybridKVCache;

fn gqa_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_q_heads: 4,
        n_kv_heads: 2,
        head_dim: 8,
        d_ff: 64,
        vocab_size: 17,
        max_position: 256,
    }
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<Token> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.next_below(vocab as u64) as Token).collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max)
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = Model::init(gqa_config(), &mut Rng::new(9)).unwrap();
    let b = Model::init(gqa_config(), &mut Rng::new(9)).unwrap();
    for ((_, ta), (_, tb)) in a.params().tensors().iter().zip(b.params().tensors()) {
        assert_eq!(ta.data(), tb.data());
    }
    let c = Model::init(gqa_config(), &mut Rng::new(10)).unwrap();
    assert_ne!(
        a.params().embed.data(),
        c.params().embed.data(),
        "different seeds must differ"
    );
}

#[test]
fn mha_param_count_matches_closed_form() {
    // Independent count: standard decoder formula with untied head.
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 48,
        n_q_heads: 6,
        n_kv_heads: 6,
        head_dim: 8,
        d_ff: 96,
        vocab_size: 50,
        max_position: 64,
    };
    let model = Model::init(cfg, &mut Rng::new(1)).unwrap();
    let d = 48usize;
    let per_layer = 4 * d * d + 2 * d * 96 + 2 * d;
    let expected = 50 * d + 3 * per_layer + d + d * 50;
    assert_eq!(model.params().param_count(), expected);
    assert_eq!(cfg.param_count(), expected);
}

#[test]
fn gqa_kv_projections_are_quarter_of_mha() {
    let mha = ModelConfig {
        n_q_heads: 8,
        n_kv_heads: 8,
        d_model: 64,
        head_dim: 8,
        ..gqa_config()
    };
    let gqa = ModelConfig {
        n_kv_heads: 2,
        ..mha
    };
    let kv_params = |c: &ModelConfig| 2 * c.d_model * c.kv_dim();
    assert_eq!(kv_params(&gqa) * 4, kv_params(&mha));
}

#[test]
fn causal_mask_blocks_future_influence() {
    let model = Model::init(gqa_config(), &mut Rng::new(3)).unwrap();
    let tokens = random_tokens(12, 17, 5);
    let layout = SequenceLayout::new(4, 8).unwrap();
    let mask = causal_full_mask(layout);
    let base = model.forward(&tokens, &mask, false).unwrap();

    let t = 7usize;
    let mut perturbed = tokens.clone();
    perturbed[t] = (perturbed[t] + 1) % 17;
    let out = model.forward(&perturbed, &mask, false).unwrap();
    for i in 0..t {
        let diff = max_abs_diff(base.logits.row(i), out.logits.row(i));
        assert!(diff <= 1e-6, "row {i} changed by {diff}");
    }
    // And the perturbed position itself must change.
    assert!(max_abs_diff(base.logits.row(t), out.logits.row(t)) > 1e-4);
}

#[test]
fn hybrid_equals_causal_when_window_not_binding() {
    let model = Model::init(gqa_config(), &mut Rng::new(4)).unwrap();
    let layout = SequenceLayout::new(5, 10).unwrap();
    let tokens = random_tokens(15, 17, 6);
    let full = model
        .forward(&tokens, &causal_full_mask(layout), false)
        .unwrap();
    let hybrid = model
        .forward(&tokens, &hybrid_mask(layout, WindowSpec::Bounded(12)), false)
        .unwrap();
    let diff = max_abs_diff(full.logits.data(), hybrid.logits.data());
    assert!(diff <= 1e-5, "diff {diff}");
}

#[test]
fn gqa_forward_matches_replicated_mha_oracle() {
    // Replicate each KV head across its query-head group: the grouped
    // model and the expanded MHA model must compute identical logits.
    let gqa_cfg = gqa_config();
    let gqa = Model::init(gqa_cfg, &mut Rng::new(12)).unwrap();

    let mha_cfg = ModelConfig {
        n_kv_heads: gqa_cfg.n_q_heads,
        ..gqa_cfg
    };
    let hd = gqa_cfg.head_dim;
    let group = gqa_cfg.n_q_heads / gqa_cfg.n_kv_heads;
    let replicate = |m: &Matrix| -> Matrix {
        let mut out = Matrix::zeros(m.rows(), gqa_cfg.n_q_heads * hd);
        for r in 0..m.rows() {
            for qh in 0..gqa_cfg.n_q_heads {
                let kvh = qh / group;
                for c in 0..hd {
                    out.set(r, qh * hd + c, m.get(r, kvh * hd + c));
                }
            }
        }
        out
    };
    let src = gqa.params();
    let params = Params {
        embed: src.embed.clone(),
        layers: src
            .layers
            .iter()
            .map(|l| LayerParams {
                attn_norm: l.attn_norm.clone(),
                wq: l.wq.clone(),
                wk: replicate(&l.wk),
                wv: replicate(&l.wv),
                wo: l.wo.clone(),
                ffn_norm: l.ffn_norm.clone(),
                w1: l.w1.clone(),
                w2: l.w2.clone(),
            })
            .collect(),
        final_norm: src.final_norm.clone(),
        head: src.head.clone(),
    };
    let mha = Model::from_params(mha_cfg, params);

    let layout = SequenceLayout::new(3, 9).unwrap();
    let tokens = random_tokens(12, 17, 31);
    let mask = causal_full_mask(layout);
    let a = gqa.forward(&tokens, &mask, false).unwrap();
    let b = mha.forward(&tokens, &mask, false).unwrap();
    let diff = max_abs_diff(a.logits.data(), b.logits.data());
    assert!(diff <= 1e-5, "diff {diff}");
}

#[test]
fn attention_rows_are_distributions() {
    let model = Model::init(gqa_config(), &mut Rng::new(8)).unwrap();
    let layout = SequenceLayout::new(4, 8).unwrap();
    let tokens = random_tokens(12, 17, 9);
    let out = model
        .forward(&tokens, &hybrid_mask(layout, WindowSpec::Bounded(3)), true)
        .unwrap();
    let attn = out.attention_weights.unwrap();
    assert_eq!(attn.len(), 2);
    for heads in &attn {
        assert_eq!(heads.len(), 4);
        for head in heads {
            for i in 0..head.rows() {
                let row = head.row(i);
                assert!(row.iter().all(|&p| p >= 0.0));
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-5, "row {i} sums to {sum}");
            }
        }
    }
}

fn decode_all(
    model: &Model,
    prefix: &[Token],
    gen: &[Token],
    window: WindowSpec,
) -> (Vec<Vec<f32>>, HybridKVCache) {
    let mut cache = HybridKVCache::prefill(model, prefix, window).unwrap();
    let mut rows = Vec::new();
    for &tok in gen {
        rows.push(model.decode_step(&mut cache, tok).unwrap());
    }
    (rows, cache)
}

#[test]
fn decode_matches_batched_forward_window_not_binding() {
    let model = Model::init(gqa_config(), &mut Rng::new(21)).unwrap();
    let prefix = random_tokens(6, 17, 40);
    let gen = random_tokens(16, 17, 41);
    let (rows, _) = decode_all(&model, &prefix, &gen, WindowSpec::Bounded(32));

    let mut tokens = prefix.clone();
    tokens.extend_from_slice(&gen);
    let layout = SequenceLayout::new(6, 16).unwrap();
    let out = model
        .forward(&tokens, &hybrid_mask(layout, WindowSpec::Bounded(32)), false)
        .unwrap();
    for (i, row) in rows.iter().enumerate() {
        let diff = max_abs_diff(row, out.logits.row(6 + i));
        assert!(diff <= 1e-5, "step {i}: diff {diff}");
    }
}

#[test]
fn decode_matches_batched_forward_with_binding_window() {
    let model = Model::init(gqa_config(), &mut Rng::new(22)).unwrap();
    let prefix = random_tokens(5, 17, 50);
    let gen = random_tokens(100, 17, 51);
    let (rows, cache) = decode_all(&model, &prefix, &gen, WindowSpec::Bounded(8));
    assert_eq!(cache.cached_positions(), 5 + 8);

    let mut tokens = prefix.clone();
    tokens.extend_from_slice(&gen);
    let layout = SequenceLayout::new(5, 100).unwrap();
    let out = model
        .forward(&tokens, &hybrid_mask(layout, WindowSpec::Bounded(8)), false)
        .unwrap();
    let mut worst = 0.0f32;
    for (i, row) in rows.iter().enumerate() {
        worst = worst.max(max_abs_diff(row, out.logits.row(5 + i)));
    }
    assert!(worst <= 1e-5, "worst diff {worst}");
}

#[test]
fn cache_length_follows_min_rule_during_decode() {
    let model = Model::init(gqa_config(), &mut Rng::new(23)).unwrap();
    let prefix = random_tokens(4, 17, 60);
    let mut cache = HybridKVCache::prefill(&model, &prefix, WindowSpec::Bounded(6)).unwrap();
    let gen = random_tokens(20, 17, 61);
    for (i, &tok) in gen.iter().enumerate() {
        model.decode_step(&mut cache, tok).unwrap();
        assert_eq!(cache.cached_positions(), 4 + (i + 1).min(6));
    }
}

#[test]
fn greedy_decode_identical_under_full_and_wide_window() {
    let model = Model::init(gqa_config(), &mut Rng::new(24)).unwrap();
    let prefix = random_tokens(6, 17, 70);
    let n = 24usize;
    let mut streams = Vec::new();
    for window in [WindowSpec::Unbounded, WindowSpec::Bounded(32)] {
        let mut cache = HybridKVCache::prefill(&model, &prefix, window).unwrap();
        let mut tok = *prefix.last().unwrap();
        let mut stream = Vec::new();
        for _ in 0..n {
            let logits = model.decode_step(&mut cache, tok).unwrap();
            tok = sample_greedy(&logits);
            stream.push(tok);
        }
        streams.push(stream);
    }
    assert_eq!(streams[0], streams[1]);
}

#[test]
fn decode_rejects_mismatched_cache() {
    let model = Model::init(gqa_config(), &mut Rng::new(25)).unwrap();
    let other = Model::init(
        ModelConfig {
            d_ff: 128,
            ..gqa_config()
        },
        &mut Rng::new(25),
    )
    .unwrap();
    let mut cache = HybridKVCache::prefill(&model, &[1, 2, 3], WindowSpec::Bounded(4)).unwrap();
    assert!(other.decode_step(&mut cache, 5).is_err());
}

#[test]
fn forward_rejects_over_length_sequence() {
    let cfg = ModelConfig {
        max_position: 8,
        ..gqa_config()
    };
    let model = Model::init(cfg, &mut Rng::new(2)).unwrap();
    let tokens = random_tokens(9, 17, 3);
    let layout = SequenceLayout::new(2, 7).unwrap();
    assert!(model
        .forward(&tokens, &causal_full_mask(layout), false)
        .is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.wand");
    let model = Model::init(gqa_config(), &mut Rng::new(77)).unwrap();
    model.save_checkpoint(&path).unwrap();
    let loaded = Model::load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    for ((na, ta), (nb, tb)) in model
        .params()
        .tensors()
        .iter()
        .zip(loaded.params().tensors())
    {
        assert_eq!(na, &nb);
        let a_bits: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
        let b_bits: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a_bits, b_bits, "tensor {na} not bit-exact");
    }

    // Same logits after the round trip.
    let tokens = random_tokens(10, 17, 80);
    let layout = SequenceLayout::new(3, 7).unwrap();
    let mask = causal_full_mask(layout);
    let a = model.forward(&tokens, &mask, false).unwrap();
    let b = loaded.forward(&tokens, &mask, false).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());
}

#[test]
fn checkpoint_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.wand");
    let model = Model::init(gqa_config(), &mut Rng::new(78)).unwrap();
    model.save_checkpoint(&path).unwrap();

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(Model::load_checkpoint(&path).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'W';
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(Model::load_checkpoint(&path).is_err());
}
