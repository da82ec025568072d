//! Subcommand implementations. Usage/config problems exit 2, runtime
//! failures exit 3; everything a run produces lands under `--out`.

use std::path::{Path, PathBuf};

use wand_core::analysis::{
    attention_decomposition, attention_stats_csv, cost_model, cost_presets, cost_report_csv,
    find_preset, fit_slope, latency_bench, latency_trace_csv, slope_permutation_p, AttentionStats,
    LatencyTrace,
};
use wand_core::harness::{
    ablation_report_csv, adapt_log_csv, adapt_student, generate_dataset, pretrain_teacher,
    run_ablations, train_log_csv, AblationGrid, ExperimentReport, Strategy, TrainSettings,
};
use wand_core::masking::{causal_full_mask, WindowSpec};
use wand_core::model::{sample_greedy, sample_topk, Model, ModelConfig, Token};
use wand_core::numerics::Rng;
use wand_core::{Error, HybridKVCache};

use crate::config::{render_config, RunConfig};

#[derive(Debug)]
pub enum CmdError {
    Usage(String),
    Runtime(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 2,
            CmdError::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Usage(m) | CmdError::Runtime(m) => m,
        }
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CmdError> {
    Err(CmdError::Usage(msg.into()))
}

/// Config validation and missing inputs are usage errors; failures inside
/// a validated run are runtime errors.
fn core_usage(e: Error) -> CmdError {
    CmdError::Usage(e.to_string())
}

fn core_runtime(e: Error) -> CmdError {
    match e {
        Error::InvalidConfig(_) | Error::EmptyPrefix => CmdError::Usage(e.to_string()),
        other => CmdError::Runtime(other.to_string()),
    }
}

fn ensure_out(out: &Path) -> Result<(), CmdError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CmdError::Runtime(format!("cannot create {}: {e}", out.display())))
}

fn write_out(path: &PathBuf, contents: &str) -> Result<(), CmdError> {
    std::fs::write(path, contents)
        .map_err(|e| CmdError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Model, CmdError> {
    if !path.exists() {
        return usage(format!("checkpoint {} does not exist", path.display()));
    }
    Model::load_checkpoint(path).map_err(core_usage)
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<(), CmdError> {
    if cfg.train.steps == 0 {
        return usage("steps must be >= 1; a zero-step run is a no-op");
    }
    cfg.task.validate().map_err(core_usage)?;
    cfg.model.validate().map_err(core_usage)?;
    ensure_out(out)?;

    let dataset = generate_dataset(&cfg.task, cfg.seed).map_err(core_usage)?;
    let (teacher, log) =
        pretrain_teacher(&dataset, &cfg.model, &cfg.train, cfg.seed).map_err(core_runtime)?;
    let ckpt = out.join("teacher.ckpt");
    teacher.save_checkpoint(&ckpt).map_err(core_runtime)?;
    write_out(&out.join("pretrain_log.csv"), &train_log_csv(&log))?;
    write_out(&out.join("run_config.cfg"), &render_config(cfg))?;

    let mask = causal_full_mask(cfg.task.layout());
    let (nll, acc) = wand_core::harness::evaluate(&teacher, &dataset.val, &mask)
        .map_err(core_runtime)?;
    println!(
        "pretrained {} steps; val nll {nll:.4} nats/token, token acc {acc:.3}",
        cfg.train.steps
    );
    println!("teacher checkpoint: {}", ckpt.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_adapt(
    teacher_path: &Path,
    cfg: &RunConfig,
    strategy: Strategy,
    settings: &TrainSettings,
    out: &Path,
) -> Result<(), CmdError> {
    if settings.steps == 0 {
        return usage("steps must be >= 1; a zero-step run is a no-op");
    }
    cfg.task.validate().map_err(core_usage)?;
    cfg.schedule.validate().map_err(core_usage)?;
    cfg.distill.validate().map_err(core_usage)?;
    ensure_out(out)?;

    let teacher = load_model(teacher_path)?;
    let dataset = generate_dataset(&cfg.task, cfg.seed).map_err(core_usage)?;
    let (student, log) = adapt_student(
        &teacher,
        &dataset,
        &cfg.schedule,
        &cfg.distill,
        strategy,
        settings,
        cfg.seed,
    )
    .map_err(core_runtime)?;

    let ckpt = out.join("student.ckpt");
    student.save_checkpoint(&ckpt).map_err(core_runtime)?;
    write_out(&out.join("adapt_loss.csv"), &adapt_log_csv(&log))?;
    write_out(&out.join("run_config.cfg"), &render_config(cfg))?;

    let eval_mask = wand_core::masking::hybrid_mask(
        cfg.task.layout(),
        WindowSpec::Bounded(cfg.schedule.w_target),
    );
    let (nll, acc) =
        wand_core::harness::evaluate(&student, &dataset.val, &eval_mask).map_err(core_runtime)?;
    println!(
        "adapted {} steps ({}); windowed (W={}) val nll {nll:.4}, token acc {acc:.3}",
        settings.steps,
        strategy.name(),
        cfg.schedule.w_target
    );
    println!("student checkpoint: {}", ckpt.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_generate(
    ckpt: &Path,
    cfg: &RunConfig,
    n_tokens: usize,
    window: WindowSpec,
    temperature: f32,
    top_k: usize,
    style: usize,
    out: &Path,
) -> Result<(), CmdError> {
    if n_tokens == 0 {
        return usage("need --tokens >= 1");
    }
    cfg.task.validate().map_err(core_usage)?;
    if style >= cfg.task.n_styles {
        return usage(format!(
            "style {style} out of range; the task has {} styles",
            cfg.task.n_styles
        ));
    }
    let model = load_model(ckpt)?;
    let prefix = cfg.task.prefix_for_style(style);
    if prefix.len() < 2 {
        return usage("generation needs a prefix of at least 2 tokens");
    }
    if prefix.len() + n_tokens > model.config().max_position {
        return usage(format!(
            "prefix {} + tokens {n_tokens} exceeds max_position {}; absolute positions would overflow",
            prefix.len(),
            model.config().max_position
        ));
    }
    ensure_out(out)?;

    let mut rng = Rng::new(cfg.seed);
    let mut cache = HybridKVCache::prefill(&model, &prefix[..prefix.len() - 1], window)
        .map_err(core_runtime)?;
    let mut tok = *prefix.last().unwrap();
    let mut trace = String::new();
    let mut tokens = Vec::with_capacity(n_tokens);
    for step in 0..n_tokens {
        let logits = model.decode_step(&mut cache, tok).map_err(core_runtime)?;
        tok = if temperature > 0.0 {
            sample_topk(&logits, temperature, top_k, &mut rng)
        } else {
            sample_greedy(&logits)
        };
        tokens.push(tok);
        trace.push_str(&cache.dump_line(step + 1));
        trace.push('\n');
    }
    write_out(&out.join("cache_trace.jsonl"), &trace)?;
    let rendered: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    println!("{}", rendered.join(" "));
    println!(
        "# window {window}, cached positions {}, cache bytes {}",
        cache.cached_positions(),
        cache.cache_bytes()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_bench(
    ckpt: Option<&Path>,
    cfg: &RunConfig,
    n_tokens: usize,
    window: usize,
    repeats: usize,
    prefix_len: usize,
    out: &Path,
) -> Result<(), CmdError> {
    if window == 0 {
        return usage("need --window >= 1");
    }
    if n_tokens < 4 * window {
        return usage(format!(
            "need --tokens >= 4 * window ({})",
            4 * window
        ));
    }
    let model = match ckpt {
        Some(path) => load_model(path)?,
        None => {
            let mcfg = ModelConfig::default();
            Model::init(mcfg, &mut Rng::new(cfg.seed)).map_err(core_usage)?
        }
    };
    let mcfg = *model.config();
    if prefix_len == 0 || prefix_len + n_tokens > mcfg.max_position {
        return usage(format!(
            "prefix {prefix_len} + tokens {n_tokens} exceeds max_position {}",
            mcfg.max_position
        ));
    }
    ensure_out(out)?;
    let prefix: Vec<Token> = (0..prefix_len)
        .map(|i| (i % mcfg.vocab_size) as Token)
        .collect();

    let mut traces: Vec<LatencyTrace> = Vec::new();
    for variant in [WindowSpec::Unbounded, WindowSpec::Bounded(window)] {
        let trace =
            latency_bench(&model, &prefix, n_tokens, variant, repeats).map_err(core_runtime)?;
        traces.push(trace);
    }
    write_out(&out.join("latency_trace.csv"), &latency_trace_csv(&traces))?;

    let full_slope = fit_slope(&traces[0].times);
    let win_slope = fit_slope(&traces[1].times);
    let p = slope_permutation_p(&traces[0].times, 1000, cfg.seed);
    println!("full attention slope: {full_slope:.3} ns/token (p = {p:.4})");
    println!(
        "windowed (W={window}) slope: {win_slope:.3} ns/token ({:.2}% of full)",
        100.0 * win_slope / full_slope
    );
    println!("trace: {}", out.join("latency_trace.csv").display());
    Ok(())
}

pub fn cmd_analyze(
    ckpt: &Path,
    cfg: &RunConfig,
    window: usize,
    n_seqs: usize,
    out: &Path,
) -> Result<(), CmdError> {
    if window == 0 || n_seqs == 0 {
        return usage("need --window >= 1 and --seqs >= 1");
    }
    cfg.task.validate().map_err(core_usage)?;
    let model = load_model(ckpt)?;
    ensure_out(out)?;
    let dataset = generate_dataset(&cfg.task, cfg.seed).map_err(core_usage)?;
    let seqs = &dataset.val[..n_seqs.min(dataset.val.len())];
    let layout = cfg.task.layout();
    let mask = causal_full_mask(layout);

    let mut acc: Option<AttentionStats> = None;
    for seq in seqs {
        let fwd = model.forward(&seq.tokens, &mask, true).map_err(core_runtime)?;
        let stats = attention_decomposition(&fwd.attention_weights.unwrap(), layout, window)
            .map_err(core_runtime)?;
        acc = Some(match acc {
            None => stats,
            Some(prev) => AttentionStats {
                prompt_mass: prev.prompt_mass + stats.prompt_mass,
                generated_mass: prev.generated_mass + stats.generated_mass,
                local_w_over_gen: prev.local_w_over_gen + stats.local_w_over_gen,
                coverage: 0.0,
                window_used: window,
            },
        });
    }
    let mut stats = acc.expect("at least one sequence");
    let n = seqs.len() as f64;
    stats.prompt_mass /= n;
    stats.generated_mass /= n;
    stats.local_w_over_gen /= n;
    stats.coverage = wand_core::analysis::coverage_from_parts(
        stats.prompt_mass,
        stats.generated_mass,
        stats.local_w_over_gen,
    );

    let mcfg = model.config();
    write_out(
        &out.join("attention_stats.csv"),
        &attention_stats_csv(&stats, mcfg.n_layers, mcfg.n_q_heads),
    )?;
    println!(
        "prompt {:.1} | generated {:.1} | local-{}/gen {:.1} | coverage {:.1}",
        stats.prompt_mass, stats.generated_mass, window, stats.local_w_over_gen, stats.coverage
    );
    Ok(())
}

pub fn cmd_cost(
    preset: Option<&str>,
    cfg: &RunConfig,
    prefix: usize,
    gen: usize,
    window: usize,
    out: &Path,
) -> Result<(), CmdError> {
    ensure_out(out)?;
    match preset {
        Some(name) => {
            let preset = match find_preset(name) {
                Some(p) => p,
                None => {
                    let names: Vec<&str> = cost_presets().iter().map(|p| p.name).collect();
                    return usage(format!(
                        "unknown preset `{name}`; available: {}",
                        names.join(", ")
                    ));
                }
            };
            let gen = preset.token_rate_hz * 10;
            let report = cost_model(&cfg.model, preset.derived_prefix, gen, preset.window);
            write_out(&out.join("cost_report.csv"), &cost_report_csv(&report))?;
            println!(
                "{}: reduction {:.1}% (published cache pair {:.2} -> {:.2} MB)",
                preset.name,
                preset.published_reduction_pct(),
                preset.published_mb.0,
                preset.published_mb.1
            );
            println!(
                "modeled reduction from derived prefix {} @ {} Hz, W={}: {:.1}%",
                preset.derived_prefix,
                preset.token_rate_hz,
                preset.window,
                preset.modeled_reduction_pct(10)
            );
            println!(
                "published GFLOPs speedup: {:.2}x ({:.2} -> {:.2})",
                preset.published_speedup(),
                preset.published_gflops.0,
                preset.published_gflops.1
            );
        }
        None => {
            if prefix == 0 || gen == 0 || window == 0 {
                return usage("need --prefix, --gen and --window >= 1 (or --preset)");
            }
            let report = cost_model(&cfg.model, prefix, gen, window);
            write_out(&out.join("cost_report.csv"), &cost_report_csv(&report))?;
            println!(
                "reduction {:.1}% ({} -> {} KV bytes); flops speedup {:.2}x",
                report.reduction_pct,
                report.final_kv_full,
                report.final_kv_windowed,
                report.flops_speedup
            );
        }
    }
    println!("report: {}", out.join("cost_report.csv").display());
    Ok(())
}

pub fn cmd_ablate(
    teacher_path: &Path,
    cfg: &RunConfig,
    seeds: &[u64],
    jobs: usize,
    settings: &TrainSettings,
    out: &Path,
) -> Result<(), CmdError> {
    if seeds.is_empty() {
        return usage("need at least one seed");
    }
    if settings.steps == 0 {
        return usage("steps must be >= 1");
    }
    cfg.task.validate().map_err(core_usage)?;
    cfg.schedule.validate().map_err(core_usage)?;
    ensure_out(out)?;
    let teacher = load_model(teacher_path)?;
    let dataset = generate_dataset(&cfg.task, cfg.seed).map_err(core_usage)?;

    let mut grid = AblationGrid::default_grid(cfg.schedule.clone(), *settings);
    grid.seeds = seeds.to_vec();
    grid.distill = cfg.distill;
    grid.jobs = jobs.max(1);
    let reports = run_ablations(&teacher, &dataset, &grid);
    write_out(&out.join("ablation_report.csv"), &ablation_report_csv(&reports))?;

    print_directional_summary(&reports);
    println!("table: {}", out.join("ablation_report.csv").display());
    Ok(())
}

fn mean_nll(reports: &[ExperimentReport], arm: &str, strategy: &str) -> f64 {
    let vals: Vec<f64> = reports
        .iter()
        .filter(|r| r.arm == arm && r.strategy == strategy && r.final_nll.is_finite())
        .map(|r| r.final_nll)
        .collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

/// Directional readout mirroring the loss-component and curriculum
/// ablations; reported, not asserted.
fn print_directional_summary(reports: &[ExperimentReport]) {
    for strategy in ["direct", "curriculum"] {
        for arm in ["sw_only", "ce_only", "kl_only", "ce_kl"] {
            let nll = mean_nll(reports, arm, strategy);
            println!("mean windowed nll [{strategy:10}] {arm:8}: {nll:.4}");
        }
    }
    let combined = mean_nll(reports, "ce_kl", "curriculum");
    let sw = mean_nll(reports, "sw_only", "curriculum");
    let ce = mean_nll(reports, "ce_only", "curriculum");
    let kl = mean_nll(reports, "kl_only", "curriculum");
    let direct = mean_nll(reports, "ce_kl", "direct");
    println!(
        "ce+kl vs sw-only: {} ({:.4} vs {:.4})",
        if combined <= sw { "improves" } else { "regresses" },
        combined,
        sw
    );
    println!(
        "ce+kl vs best single loss: {}",
        if combined <= ce.min(kl) { "best" } else { "not best" }
    );
    println!(
        "curriculum vs direct (ce+kl): {}",
        if combined <= direct { "curriculum ahead" } else { "direct ahead" }
    );
}
