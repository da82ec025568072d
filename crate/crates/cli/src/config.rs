//! Flat sectioned key-value config files, parsed strictly: unknown
//! sections or keys are errors, and a section that appears must be
//! complete. Absent sections fall back to defaults, so a file only pins
//! what it mentions.

use std::collections::BTreeMap;
use std::path::Path;

use wand_core::distill::DistillConfig;
use wand_core::harness::{SyntheticTaskSpec, TrainSettings};
use wand_core::model::ModelConfig;
use wand_core::schedule::CurriculumSchedule;

/// Everything a run needs; persisting this file and re-running it with
/// the same command reproduces the results.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: SyntheticTaskSpec,
    pub schedule: CurriculumSchedule,
    pub distill: DistillConfig,
    pub train: TrainSettings,
    pub seed: u64,
}

/// Training-friendly model default, sized to the task vocabulary.
pub fn default_train_model(task: &SyntheticTaskSpec) -> ModelConfig {
    let max_position = (task.prefix_len + task.seq_len).next_power_of_two().max(512);
    ModelConfig {
        n_layers: 2,
        d_model: 64,
        n_q_heads: 4,
        n_kv_heads: 2,
        head_dim: 16,
        d_ff: 256,
        vocab_size: task.vocab_size,
        max_position,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = SyntheticTaskSpec::default();
        RunConfig {
            model: default_train_model(&task),
            task,
            schedule: CurriculumSchedule::default(),
            distill: DistillConfig::default(),
            train: TrainSettings::pretrain_default(),
            seed: 0,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "n_layers",
    "d_model",
    "n_q_heads",
    "n_kv_heads",
    "d_ff",
    "vocab_size",
    "max_position",
];
const TASK_KEYS: &[&str] = &[
    "vocab_size",
    "prefix_len",
    "seq_len",
    "n_styles",
    "transition_order",
    "noise",
    "gen_alphabet",
    "branching",
    "n_train",
    "n_val",
];
const SCHEDULE_KEYS: &[&str] = &["window_start", "window_target", "tau_start", "tau_end", "t_c"];
const DISTILL_KEYS: &[&str] = &["lambda", "skew", "enable_ce", "enable_kl"];
const TRAIN_KEYS: &[&str] = &["steps", "eval_every", "eval_sequences", "peak_lr"];
const RUN_KEYS: &[&str] = &["seed"];

type Section = BTreeMap<String, String>;

fn parse_sections(text: &str) -> Result<BTreeMap<String, Section>, String> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            if sections.contains_key(&name) {
                return Err(format!("line {}: duplicate section [{name}]", lineno + 1));
            }
            sections.insert(name.clone(), Section::new());
            current = Some(name);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got `{line}`", lineno + 1))?;
        let section = current
            .as_ref()
            .ok_or_else(|| format!("line {}: key before any [section]", lineno + 1))?;
        let key = key.trim().to_string();
        let entry = sections.get_mut(section).unwrap();
        if entry.contains_key(&key) {
            return Err(format!("line {}: duplicate key `{key}`", lineno + 1));
        }
        entry.insert(key, value.trim().to_string());
    }
    Ok(sections)
}

fn check_keys(name: &str, section: &Section, allowed: &[&str]) -> Result<(), String> {
    for key in section.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(format!("unknown key `{key}` in [{name}]"));
        }
    }
    for key in allowed {
        if !section.contains_key(*key) {
            return Err(format!("missing key `{key}` in [{name}]"));
        }
    }
    Ok(())
}

fn get<T: std::str::FromStr>(section: &Section, key: &str, name: &str) -> Result<T, String> {
    section[key]
        .parse::<T>()
        .map_err(|_| format!("key `{key}` in [{name}] has invalid value `{}`", section[key]))
}

/// Parses a config file over the defaults. Unknown sections/keys and
/// incomplete sections are errors naming the offender.
pub fn parse_config(text: &str) -> Result<RunConfig, String> {
    let sections = parse_sections(text)?;
    let mut cfg = RunConfig::default();
    let mut model_given = false;
    for (name, section) in &sections {
        match name.as_str() {
            "model" => {
                check_keys(name, section, MODEL_KEYS)?;
                let d_model: usize = get(section, "d_model", name)?;
                let n_q_heads: usize = get(section, "n_q_heads", name)?;
                if n_q_heads == 0 || d_model % n_q_heads != 0 {
                    return Err(format!(
                        "key `n_q_heads` in [model] must divide d_model ({d_model})"
                    ));
                }
                cfg.model = ModelConfig {
                    n_layers: get(section, "n_layers", name)?,
                    d_model,
                    n_q_heads,
                    n_kv_heads: get(section, "n_kv_heads", name)?,
                    head_dim: d_model / n_q_heads,
                    d_ff: get(section, "d_ff", name)?,
                    vocab_size: get(section, "vocab_size", name)?,
                    max_position: get(section, "max_position", name)?,
                };
                model_given = true;
            }
            "task" => {
                check_keys(name, section, TASK_KEYS)?;
                cfg.task = SyntheticTaskSpec {
                    vocab_size: get(section, "vocab_size", name)?,
                    prefix_len: get(section, "prefix_len", name)?,
                    seq_len: get(section, "seq_len", name)?,
                    n_styles: get(section, "n_styles", name)?,
                    transition_order: get(section, "transition_order", name)?,
                    noise: get(section, "noise", name)?,
                    gen_alphabet: get(section, "gen_alphabet", name)?,
                    branching: get(section, "branching", name)?,
                    n_train: get(section, "n_train", name)?,
                    n_val: get(section, "n_val", name)?,
                };
            }
            "schedule" => {
                check_keys(name, section, SCHEDULE_KEYS)?;
                cfg.schedule = CurriculumSchedule {
                    w_start: get(section, "window_start", name)?,
                    w_target: get(section, "window_target", name)?,
                    tau_start: get(section, "tau_start", name)?,
                    tau_end: get(section, "tau_end", name)?,
                    t_c: get(section, "t_c", name)?,
                };
            }
            "distill" => {
                check_keys(name, section, DISTILL_KEYS)?;
                cfg.distill = DistillConfig {
                    lambda: get(section, "lambda", name)?,
                    skew: get(section, "skew", name)?,
                    enable_ce: get(section, "enable_ce", name)?,
                    enable_kl: get(section, "enable_kl", name)?,
                };
            }
            "train" => {
                check_keys(name, section, TRAIN_KEYS)?;
                cfg.train = TrainSettings {
                    steps: get(section, "steps", name)?,
                    eval_every: get(section, "eval_every", name)?,
                    eval_sequences: get(section, "eval_sequences", name)?,
                    peak_lr: get(section, "peak_lr", name)?,
                };
            }
            "run" => {
                check_keys(name, section, RUN_KEYS)?;
                cfg.seed = get(section, "seed", name)?;
            }
            other => return Err(format!("unknown section [{other}]")),
        }
    }
    if !model_given {
        cfg.model = default_train_model(&cfg.task);
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse_config(&text)
}

/// Renders a config back into the file format it parses from.
pub fn render_config(cfg: &RunConfig) -> String {
    format!(
        "[model]\n\
         n_layers = {}\nd_model = {}\nn_q_heads = {}\nn_kv_heads = {}\nd_ff = {}\n\
         vocab_size = {}\nmax_position = {}\n\n\
         [task]\n\
         vocab_size = {}\nprefix_len = {}\nseq_len = {}\nn_styles = {}\ntransition_order = {}\n\
         noise = {}\ngen_alphabet = {}\nbranching = {}\nn_train = {}\nn_val = {}\n\n\
         [schedule]\n\
         window_start = {}\nwindow_target = {}\ntau_start = {}\ntau_end = {}\nt_c = {}\n\n\
         [distill]\n\
         lambda = {}\nskew = {}\nenable_ce = {}\nenable_kl = {}\n\n\
         [train]\n\
         steps = {}\neval_every = {}\neval_sequences = {}\npeak_lr = {}\n\n\
         [run]\nseed = {}\n",
        cfg.model.n_layers,
        cfg.model.d_model,
        cfg.model.n_q_heads,
        cfg.model.n_kv_heads,
        cfg.model.d_ff,
        cfg.model.vocab_size,
        cfg.model.max_position,
        cfg.task.vocab_size,
        cfg.task.prefix_len,
        cfg.task.seq_len,
        cfg.task.n_styles,
        cfg.task.transition_order,
        cfg.task.noise,
        cfg.task.gen_alphabet,
        cfg.task.branching,
        cfg.task.n_train,
        cfg.task.n_val,
        cfg.schedule.w_start,
        cfg.schedule.w_target,
        cfg.schedule.tau_start,
        cfg.schedule.tau_end,
        cfg.schedule.t_c,
        cfg.distill.lambda,
        cfg.distill.skew,
        cfg.distill.enable_ce,
        cfg.distill.enable_kl,
        cfg.train.steps,
        cfg.train.eval_every,
        cfg.train.eval_sequences,
        cfg.train.peak_lr,
        cfg.seed,
    )
}
