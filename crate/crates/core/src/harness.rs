//! Desk-scale experimental rig: a prefix-conditioned synthetic sequence
//! task, full-attention pretraining of the teacher, windowed adaptation of
//! the student, and the ablation grid over loss components and training
//! strategies.
//!
//! The task is built so that, like speech tokens, the generated stream is
//! locally predictable once the global mode is fixed: the prefix encodes a
//! style id, and each style owns an order-k Markov chain over a small
//! emission alphabet. A model that loses the prefix cannot resolve the
//! style; a model that loses recent history cannot resolve the chain
//! state.

use crate::backprop::{backward, forward_train};
use crate::distill::{teacher_student_step, AdamW, DistillConfig, LossReport, OptimizerConfig};
use crate::error::{Error, Result};
use crate::masking::{causal_full_mask, curriculum_mask, hybrid_mask, AdditiveMask, WindowSpec};
use crate::model::{Model, ModelConfig, SequenceLayout, Token};
use crate::numerics::{nll_of_row, Matrix, Rng};
use crate::schedule::CurriculumSchedule;

/// Synthetic task parameters. `gen_alphabet` is the emission alphabet of
/// the per-style chains; `branching` is how many successors each context
/// can move to before noise mixing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub prefix_len: usize,
    pub seq_len: usize,
    pub n_styles: usize,
    pub transition_order: usize,
    pub noise: f64,
    pub gen_alphabet: usize,
    pub branching: usize,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 64,
            prefix_len: 24,
            seq_len: 256,
            n_styles: 8,
            transition_order: 2,
            noise: 0.05,
            gen_alphabet: 8,
            branching: 3,
            n_train: 1024,
            n_val: 128,
        }
    }
}

/// Number of leading prefix positions that repeat the style token.
const STYLE_MARKER_LEN: usize = 8;

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < self.gen_alphabet + self.n_styles + 1 {
            return fail(format!(
                "vocab_size {} too small for {} emissions + {} styles + filler",
                self.vocab_size, self.gen_alphabet, self.n_styles
            ));
        }
        if self.prefix_len == 0 || self.seq_len == 0 {
            return fail("prefix_len and seq_len must be >= 1".into());
        }
        if self.n_styles == 0 {
            return fail("n_styles must be >= 1".into());
        }
        if self.transition_order == 0 || self.transition_order > 3 {
            return fail(format!(
                "transition_order must be in 1..=3, got {}",
                self.transition_order
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return fail(format!("noise must be in [0, 1], got {}", self.noise));
        }
        if self.gen_alphabet < 2 || self.branching == 0 || self.branching > self.gen_alphabet {
            return fail(format!(
                "need 1 <= branching {} <= gen_alphabet {}",
                self.branching, self.gen_alphabet
            ));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return fail("n_train and n_val must be >= 1".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout {
            prefix_len: self.prefix_len,
            gen_len: self.seq_len,
        }
    }

    /// First style token id; emissions occupy [0, gen_alphabet).
    fn style_base(&self) -> Token {
        self.gen_alphabet as Token
    }

    fn filler_base(&self) -> Token {
        (self.gen_alphabet + self.n_styles) as Token
    }

    /// Deterministic, injective prefix for a style: repeated style marker
    /// followed by style-specific filler.
    pub fn prefix_for_style(&self, style: usize) -> Vec<Token> {
        assert!(style < self.n_styles);
        let mut prefix = Vec::with_capacity(self.prefix_len);
        let marker = self.style_base() + style as Token;
        let filler_range = (self.vocab_size as Token).saturating_sub(self.filler_base()).max(1);
        for i in 0..self.prefix_len {
            if i < STYLE_MARKER_LEN.min(self.prefix_len) {
                prefix.push(marker);
            } else {
                let fill = (style as Token * 31 + i as Token * 17) % filler_range;
                prefix.push(self.filler_base() + fill);
            }
        }
        prefix
    }
}

/// Per-style order-k Markov chains over the emission alphabet, with noise
/// already mixed into the rows.
#[derive(Debug, Clone)]
pub struct StyleChain {
    spec: SyntheticTaskSpec,
    /// rows[style][context] is a distribution over the next emission;
    /// context packs the recent tokens in base `gen_alphabet`, most
    /// recent in the lowest digit.
    rows: Vec<Vec<Vec<f64>>>,
}

impl StyleChain {
    pub fn build(spec: &SyntheticTaskSpec, rng: &mut Rng) -> Result<StyleChain> {
        spec.validate()?;
        let g = spec.gen_alphabet;
        let contexts = g.pow(spec.transition_order as u32);
        let mut rows = Vec::with_capacity(spec.n_styles);
        for _ in 0..spec.n_styles {
            let mut style_rows = Vec::with_capacity(contexts);
            for _ in 0..contexts {
                let mut row = vec![0.0f64; g];
                // Pick `branching` distinct successors with random weights.
                let mut successors: Vec<usize> = Vec::with_capacity(spec.branching);
                while successors.len() < spec.branching {
                    let cand = rng.next_below(g as u64) as usize;
                    if !successors.contains(&cand) {
                        successors.push(cand);
                    }
                }
                let mut total = 0.0f64;
                for &s in &successors {
                    let w = 0.25 + rng.next_f64();
                    row[s] = w;
                    total += w;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
                // Noise mixes a uniform draw over the whole alphabet.
                for v in row.iter_mut() {
                    *v = (1.0 - spec.noise) * *v + spec.noise / g as f64;
                }
                style_rows.push(row);
            }
            rows.push(style_rows);
        }
        Ok(StyleChain { spec: *spec, rows })
    }

    pub fn context_count(&self) -> usize {
        self.spec
            .gen_alphabet
            .pow(self.spec.transition_order as u32)
    }

    /// Style-derived initial context, so every generated position has a
    /// well-defined conditional distribution.
    fn initial_context(&self, style: usize) -> usize {
        let g = self.spec.gen_alphabet;
        let mut ctx = 0usize;
        for i in 0..self.spec.transition_order {
            ctx = ctx * g + (style * 3 + 1 + 2 * i) % g;
        }
        ctx
    }

    fn advance(&self, ctx: usize, next: usize) -> usize {
        let g = self.spec.gen_alphabet;
        (ctx * g + next) % self.context_count()
    }

    pub fn row(&self, style: usize, ctx: usize) -> &[f64] {
        &self.rows[style][ctx]
    }

    fn sample_row(&self, style: usize, ctx: usize, rng: &mut Rng) -> usize {
        let row = &self.rows[style][ctx];
        let mut draw = rng.next_f64();
        for (i, &p) in row.iter().enumerate() {
            draw -= p;
            if draw <= 0.0 {
                return i;
            }
        }
        row.len() - 1
    }

    /// Samples `len` emissions for a style, from its initial context.
    pub fn sample_sequence(&self, style: usize, len: usize, rng: &mut Rng) -> Vec<Token> {
        let mut ctx = self.initial_context(style);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let next = self.sample_row(style, ctx, rng);
            out.push(next as Token);
            ctx = self.advance(ctx, next);
        }
        out
    }

    /// Stationary distribution of one style's context chain, by power
    /// iteration from uniform. Errors if the chain fails to mix.
    fn stationary(&self, style: usize) -> Result<Vec<f64>> {
        let n = self.context_count();
        let g = self.spec.gen_alphabet;
        let mut pi = vec![1.0 / n as f64; n];
        let mut next = vec![0.0f64; n];
        for _ in 0..20_000 {
            next.iter_mut().for_each(|v| *v = 0.0);
            for ctx in 0..n {
                let mass = pi[ctx];
                if mass == 0.0 {
                    continue;
                }
                for (tok, &p) in self.rows[style][ctx].iter().enumerate() {
                    if p > 0.0 {
                        next[(ctx * g + tok) % n] += mass * p;
                    }
                }
            }
            let delta: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
            std::mem::swap(&mut pi, &mut next);
            if delta < 1e-13 {
                return Ok(pi);
            }
        }
        Err(Error::InvalidConfig(
            "context chain did not mix; entropy rate undefined".into(),
        ))
    }

    /// Analytic entropy rate in nats/token, averaged uniformly over
    /// styles: sum over contexts of pi(ctx) * H(row(ctx)).
    pub fn entropy_rate(&self) -> Result<f64> {
        let mut total = 0.0f64;
        for style in 0..self.spec.n_styles {
            let pi = self.stationary(style)?;
            let mut h = 0.0f64;
            for (ctx, &mass) in pi.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let row_h: f64 = self.rows[style][ctx]
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum();
                h += mass * row_h;
            }
            total += h;
        }
        Ok(total / self.spec.n_styles as f64)
    }
}

/// One task sequence: conditioning prefix followed by chain emissions.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub style: usize,
    pub tokens: Vec<Token>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticTaskSpec,
    pub chain: StyleChain,
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
}

/// Builds the chains and samples a train/validation split, all derived
/// deterministically from `seed`.
pub fn generate_dataset(spec: &SyntheticTaskSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let mut chain_rng = rng.split();
    let chain = StyleChain::build(spec, &mut chain_rng)?;
    let sample = |rng: &mut Rng| -> Sequence {
        let style = rng.next_below(spec.n_styles as u64) as usize;
        let mut tokens = spec.prefix_for_style(style);
        tokens.extend(chain.sample_sequence(style, spec.seq_len, rng));
        Sequence { style, tokens }
    };
    let train: Vec<Sequence> = (0..spec.n_train).map(|_| sample(&mut rng)).collect();
    let val: Vec<Sequence> = (0..spec.n_val).map(|_| sample(&mut rng)).collect();
    Ok(SyntheticDataset {
        spec: *spec,
        chain,
        train,
        val,
    })
}

/// Mean NLL (nats/token) and greedy accuracy over the generated region.
pub fn evaluate(model: &Model, sequences: &[Sequence], mask: &AdditiveMask) -> Result<(f64, f64)> {
    let layout = mask.layout;
    let loss_start = layout.prefix_len - 1;
    let mut nll = 0.0f64;
    let mut correct = 0usize;
    let mut count = 0usize;
    for seq in sequences {
        let out = model.forward(&seq.tokens, mask, false)?;
        for (i, &target) in seq.tokens[layout.prefix_len..].iter().enumerate() {
            let row = out.logits.row(loss_start + i);
            nll += nll_of_row(row, target as usize);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            correct += usize::from(argmax == target as usize);
            count += 1;
        }
    }
    Ok((nll / count as f64, correct as f64 / count as f64))
}

/// Cross-entropy training step against ground-truth targets only (no
/// teacher); used for pretraining.
fn ce_step(
    model: &mut Model,
    tokens: &[Token],
    mask: &AdditiveMask,
    opt: &mut AdamW,
) -> Result<f64> {
    let layout = mask.layout;
    let tape = forward_train(model, tokens, mask)?;
    let loss_start = layout.prefix_len - 1;
    let targets = &tokens[layout.prefix_len..];
    let n = targets.len();
    let vocab = model.config().vocab_size;
    let mut dlogits = Matrix::zeros(tokens.len(), vocab);
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f32; vocab];
    for (r, &t) in targets.iter().enumerate() {
        let row = tape.logits.row(loss_start + r);
        loss += nll_of_row(row, t as usize);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (p, &l) in probs.iter_mut().zip(row) {
            *p = (l - max).exp();
            sum += *p;
        }
        let grad = dlogits.row_mut(loss_start + r);
        for (g, &p) in grad.iter_mut().zip(&probs) {
            *g = p / sum / n as f32;
        }
        grad[t as usize] -= 1.0 / n as f32;
    }
    let grads = backward(model, &tape, &dlogits);
    opt.apply(model.params_mut(), &grads);
    Ok(loss / n as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Settings shared by the training entry points.
#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub steps: usize,
    pub eval_every: usize,
    pub eval_sequences: usize,
    pub peak_lr: f64,
}

impl TrainSettings {
    pub fn pretrain_default() -> Self {
        TrainSettings {
            steps: 5000,
            eval_every: 250,
            eval_sequences: 32,
            peak_lr: 2e-3,
        }
    }

    pub fn adapt_default() -> Self {
        TrainSettings {
            steps: 2000,
            eval_every: 250,
            eval_sequences: 32,
            peak_lr: 1e-3,
        }
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            peak_lr: self.peak_lr,
            ..OptimizerConfig::for_steps(self.steps)
        }
    }
}

/// Trains a full-attention model on the task from scratch. Aborts with
/// [`Error::Diverged`] when validation NLL rises for three consecutive
/// evals.
pub fn pretrain_teacher(
    dataset: &SyntheticDataset,
    model_cfg: &ModelConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(Model, Vec<TrainLogRow>)> {
    check_model_task(model_cfg, &dataset.spec)?;
    let mut rng = Rng::new(seed);
    let mut model = Model::init(*model_cfg, &mut rng.split())?;
    let mut opt = AdamW::new(model_cfg, settings.optimizer());
    let mask = causal_full_mask(dataset.spec.layout());
    let eval_slice = &dataset.val[..settings.eval_sequences.min(dataset.val.len())];

    let mut log = Vec::new();
    let mut rising = 0usize;
    let mut last_eval = f64::INFINITY;
    for step in 0..settings.steps {
        let seq = &dataset.train[rng.next_below(dataset.train.len() as u64) as usize];
        let loss = ce_step(&mut model, &seq.tokens, &mask, &mut opt)?;
        log.push(TrainLogRow {
            step,
            loss,
            lr: settings.optimizer().lr_at(step),
        });
        if (step + 1) % settings.eval_every == 0 {
            let (nll, _) = evaluate(&model, eval_slice, &mask)?;
            if nll > last_eval {
                rising += 1;
                if rising >= 3 {
                    return Err(Error::Diverged {
                        evals: rising,
                        last_nll: nll,
                    });
                }
            } else {
                rising = 0;
            }
            last_eval = nll;
        }
    }
    Ok((model, log))
}

/// Window-reduction strategy for adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Hard mask at the target window from step 0.
    Direct,
    /// Soft curriculum mask while t < t_c, hard target mask after.
    Curriculum,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::Curriculum => "curriculum",
        }
    }
}

/// One row of the adaptation loss CSV.
#[derive(Debug, Clone, Copy)]
pub struct AdaptLogRow {
    pub step: usize,
    pub report: LossReport,
    pub window: usize,
    /// None once the mask has gone hard.
    pub tau: Option<f64>,
}

/// Adapts a student (initialized from the teacher weights) to the target
/// window. Evaluation always uses the hard hybrid mask at `w_target`.
pub fn adapt_student(
    teacher: &Model,
    dataset: &SyntheticDataset,
    sched: &CurriculumSchedule,
    dcfg: &DistillConfig,
    strategy: Strategy,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(Model, Vec<AdaptLogRow>)> {
    sched.validate()?;
    dcfg.validate()?;
    check_model_task(teacher.config(), &dataset.spec)?;
    let layout = dataset.spec.layout();
    let mut rng = Rng::new(seed);
    let mut student = teacher.clone();
    let mut opt = AdamW::new(teacher.config(), settings.optimizer());
    let hard_target = hybrid_mask(layout, WindowSpec::Bounded(sched.w_target));

    let mut log = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let seq = &dataset.train[rng.next_below(dataset.train.len() as u64) as usize];
        let (soft_mask, window, tau) = match strategy {
            Strategy::Curriculum if step < sched.t_c => {
                let w = sched.window_at(step);
                let tau = sched.tau_at(step);
                (Some(curriculum_mask(layout, w, tau)), w, Some(tau))
            }
            _ => (None, sched.w_target, None),
        };
        let mask = soft_mask.as_ref().unwrap_or(&hard_target);
        let report =
            teacher_student_step(teacher, &mut student, &seq.tokens, mask, dcfg, &mut opt)?;
        log.push(AdaptLogRow {
            step,
            report,
            window,
            tau,
        });
    }
    Ok((student, log))
}

/// Loss-composition arm of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossArm {
    /// No adaptation at all: the teacher evaluated under the hard window.
    SwOnly,
    CeOnly,
    KlOnly,
    CeKl,
}

impl LossArm {
    pub fn name(&self) -> &'static str {
        match self {
            LossArm::SwOnly => "sw_only",
            LossArm::CeOnly => "ce_only",
            LossArm::KlOnly => "kl_only",
            LossArm::CeKl => "ce_kl",
        }
    }

    pub fn all() -> [LossArm; 4] {
        [LossArm::SwOnly, LossArm::CeOnly, LossArm::KlOnly, LossArm::CeKl]
    }

    fn distill_config(&self, base: &DistillConfig) -> Option<DistillConfig> {
        match self {
            LossArm::SwOnly => None,
            LossArm::CeOnly => Some(DistillConfig {
                enable_ce: true,
                enable_kl: false,
                ..*base
            }),
            LossArm::KlOnly => Some(DistillConfig {
                enable_ce: false,
                enable_kl: true,
                ..*base
            }),
            LossArm::CeKl => Some(DistillConfig {
                enable_ce: true,
                enable_kl: true,
                ..*base
            }),
        }
    }
}

/// One row per (arm, strategy, seed) of the ablation table.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub arm: String,
    pub strategy: String,
    pub seed: u64,
    pub final_nll: f64,
    pub token_acc: f64,
    pub steps: usize,
}

/// Full grid specification for [`run_ablations`].
#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub arms: Vec<(LossArm, Strategy)>,
    pub seeds: Vec<u64>,
    pub sched: CurriculumSchedule,
    pub distill: DistillConfig,
    pub settings: TrainSettings,
    pub eval_sequences: usize,
    pub jobs: usize,
}

impl AblationGrid {
    /// The default grid: every loss arm crossed with both strategies.
    pub fn default_grid(sched: CurriculumSchedule, settings: TrainSettings) -> Self {
        let mut arms = Vec::new();
        for arm in LossArm::all() {
            for strategy in [Strategy::Direct, Strategy::Curriculum] {
                arms.push((arm, strategy));
            }
        }
        AblationGrid {
            arms,
            seeds: vec![1, 2, 3],
            sched,
            distill: DistillConfig::default(),
            settings,
            eval_sequences: 48,
            jobs: 1,
        }
    }
}

/// Runs every (arm, strategy, seed) cell against a shared teacher and
/// dataset. A failed cell becomes a NaN row; the run continues. Cells are
/// independent, so `jobs` worker threads split them without changing the
/// results.
pub fn run_ablations(
    teacher: &Model,
    dataset: &SyntheticDataset,
    grid: &AblationGrid,
) -> Vec<ExperimentReport> {
    let cells: Vec<(LossArm, Strategy, u64)> = grid
        .arms
        .iter()
        .flat_map(|&(arm, strategy)| grid.seeds.iter().map(move |&s| (arm, strategy, s)))
        .collect();

    let eval_mask = hybrid_mask(
        dataset.spec.layout(),
        WindowSpec::Bounded(grid.sched.w_target),
    );
    let eval_slice = &dataset.val[..grid.eval_sequences.min(dataset.val.len())];

    let run_cell = |&(arm, strategy, seed): &(LossArm, Strategy, u64)| -> ExperimentReport {
        let outcome: Result<(f64, f64, usize)> = (|| {
            match arm.distill_config(&grid.distill) {
                None => {
                    let (nll, acc) = evaluate(teacher, eval_slice, &eval_mask)?;
                    Ok((nll, acc, 0))
                }
                Some(dcfg) => {
                    let (student, _) = adapt_student(
                        teacher,
                        dataset,
                        &grid.sched,
                        &dcfg,
                        strategy,
                        &grid.settings,
                        seed,
                    )?;
                    let (nll, acc) = evaluate(&student, eval_slice, &eval_mask)?;
                    Ok((nll, acc, grid.settings.steps))
                }
            }
        })();
        let (final_nll, token_acc, steps) = outcome.unwrap_or((f64::NAN, f64::NAN, 0));
        ExperimentReport {
            arm: arm.name().to_string(),
            strategy: strategy.name().to_string(),
            seed,
            final_nll,
            token_acc,
            steps,
        }
    };

    let jobs = grid.jobs.max(1);
    if jobs == 1 {
        return cells.iter().map(run_cell).collect();
    }
    let mut reports: Vec<Option<ExperimentReport>> = vec![None; cells.len()];
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..jobs.min(cells.len()) {
            let cells = &cells;
            let next = &next;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= cells.len() {
                        return out;
                    }
                    out.push((i, run_cell(&cells[i])));
                }
            }));
        }
        for handle in handles {
            for (i, report) in handle.join().expect("ablation worker panicked") {
                reports[i] = Some(report);
            }
        }
    });
    reports.into_iter().map(|r| r.expect("cell ran")).collect()
}

/// Fixed-column CSV of an ablation run.
pub fn ablation_report_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from("arm,strategy,seed,final_nll,token_acc,steps\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.arm, r.strategy, r.seed, r.final_nll, r.token_acc, r.steps
        ));
    }
    out
}

/// Loss-curve CSV for an adaptation run.
pub fn adapt_log_csv(log: &[AdaptLogRow]) -> String {
    let mut out = String::from("step,total,ce,kl,window,tau\n");
    for row in log {
        let tau = match row.tau {
            Some(t) => format!("{t:.6}"),
            None => "inf".to_string(),
        };
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{}\n",
            row.step, row.report.total, row.report.ce, row.report.kl, row.window, tau
        ));
    }
    out
}

/// Training-curve CSV for a pretraining run.
pub fn train_log_csv(log: &[TrainLogRow]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for row in log {
        out.push_str(&format!("{},{:.6},{:.6e}\n", row.step, row.loss, row.lr));
    }
    out
}

fn check_model_task(cfg: &ModelConfig, spec: &SyntheticTaskSpec) -> Result<()> {
    if cfg.vocab_size < spec.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "model vocab {} smaller than task vocab {}",
            cfg.vocab_size, spec.vocab_size
        )));
    }
    let total = spec.prefix_len + spec.seq_len;
    if total > cfg.max_position {
        return Err(Error::InvalidConfig(format!(
            "task sequences of {total} tokens exceed max_position {}",
            cfg.max_position
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            vocab_size: 32,
            prefix_len: 10,
            seq_len: 24,
            n_styles: 4,
            transition_order: 2,
            noise: 0.05,
            gen_alphabet: 6,
            branching: 3,
            n_train: 16,
            n_val: 8,
        }
    }

    #[test]
    fn dataset_is_deterministic_per_seed() {
        let spec = small_spec();
        let a = generate_dataset(&spec, 5).unwrap();
        let b = generate_dataset(&spec, 5).unwrap();
        assert_eq!(a.train.len(), 16);
        assert_eq!(a.val.len(), 8);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.style, y.style);
            assert_eq!(x.tokens, y.tokens);
        }
        let c = generate_dataset(&spec, 6).unwrap();
        assert!(a.train.iter().zip(&c.train).any(|(x, y)| x.tokens != y.tokens));
    }

    #[test]
    fn prefix_encodes_style_injectively() {
        let spec = small_spec();
        let mut seen = Vec::new();
        for style in 0..spec.n_styles {
            let p = spec.prefix_for_style(style);
            assert_eq!(p.len(), spec.prefix_len);
            assert!(!seen.contains(&p));
            seen.push(p);
        }
    }

    #[test]
    fn zero_noise_emissions_follow_the_table() {
        let spec = SyntheticTaskSpec {
            noise: 0.0,
            transition_order: 1,
            ..small_spec()
        };
        let mut rng = Rng::new(3);
        let chain = StyleChain::build(&spec, &mut rng).unwrap();
        let mut sample_rng = Rng::new(9);
        for style in 0..spec.n_styles {
            let seq = chain.sample_sequence(style, 500, &mut sample_rng);
            let mut ctx = chain.initial_context(style);
            for &tok in &seq {
                assert!(
                    chain.row(style, ctx)[tok as usize] > 0.0,
                    "emitted a zero-probability transition"
                );
                ctx = chain.advance(ctx, tok as usize);
            }
        }
    }

    #[test]
    fn empirical_frequencies_match_chain_rows() {
        // Count-based estimator over 1e5 samples of one style, order 1.
        let spec = SyntheticTaskSpec {
            transition_order: 1,
            ..small_spec()
        };
        let mut rng = Rng::new(11);
        let chain = StyleChain::build(&spec, &mut rng).unwrap();
        let style = 2usize;
        let mut sample_rng = Rng::new(17);
        let seq = chain.sample_sequence(style, 100_000, &mut sample_rng);

        let g = spec.gen_alphabet;
        let mut counts = vec![vec![0usize; g]; g];
        let mut ctx = chain.initial_context(style);
        for &tok in &seq {
            counts[ctx][tok as usize] += 1;
            ctx = chain.advance(ctx, tok as usize);
        }
        let mut weighted_tv = 0.0f64;
        let mut total = 0usize;
        for c in 0..g {
            let n: usize = counts[c].iter().sum();
            if n == 0 {
                continue;
            }
            let tv: f64 = counts[c]
                .iter()
                .zip(chain.row(style, c))
                .map(|(&k, &p)| (k as f64 / n as f64 - p).abs())
                .sum::<f64>()
                / 2.0;
            weighted_tv += tv * n as f64;
            total += n;
        }
        weighted_tv /= total as f64;
        assert!(weighted_tv <= 0.02, "mean TV {weighted_tv}");
    }

    #[test]
    fn entropy_rate_of_uniform_chain_is_ln_g() {
        // noise = 1 makes every row uniform: H = ln(gen_alphabet).
        let spec = SyntheticTaskSpec {
            noise: 1.0,
            ..small_spec()
        };
        let mut rng = Rng::new(2);
        let chain = StyleChain::build(&spec, &mut rng).unwrap();
        let h = chain.entropy_rate().unwrap();
        assert!((h - (spec.gen_alphabet as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_rate_positive_and_below_ln_g() {
        let spec = small_spec();
        let mut rng = Rng::new(4);
        let chain = StyleChain::build(&spec, &mut rng).unwrap();
        let h = chain.entropy_rate().unwrap();
        assert!(h > 0.0);
        assert!(h < (spec.gen_alphabet as f64).ln());
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_q_heads: 2,
            n_kv_heads: 2,
            head_dim: 8,
            d_ff: 32,
            vocab_size: 32,
            max_position: 64,
        }
    }

    #[test]
    fn pretrain_loss_decreases() {
        let dataset = generate_dataset(&small_spec(), 7).unwrap();
        let settings = TrainSettings {
            steps: 60,
            eval_every: 30,
            eval_sequences: 4,
            peak_lr: 2e-3,
        };
        let (_, log) = pretrain_teacher(&dataset, &tiny_model_cfg(), &settings, 1).unwrap();
        let first: f64 = log[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let last: f64 = log[50..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(
            last < first,
            "loss did not decrease: {first:.3} -> {last:.3}"
        );
    }

    #[test]
    fn adapt_runs_and_logs_monotone_window() {
        let dataset = generate_dataset(&small_spec(), 8).unwrap();
        let settings = TrainSettings {
            steps: 30,
            eval_every: 100,
            eval_sequences: 4,
            peak_lr: 1e-3,
        };
        let (teacher, _) = pretrain_teacher(&dataset, &tiny_model_cfg(), &settings, 1).unwrap();
        let sched = CurriculumSchedule {
            w_start: 16,
            w_target: 4,
            tau_start: 1.0,
            tau_end: 1e4,
            t_c: 20,
        };
        let (_, log) = adapt_student(
            &teacher,
            &dataset,
            &sched,
            &DistillConfig::default(),
            Strategy::Curriculum,
            &settings,
            2,
        )
        .unwrap();
        assert_eq!(log.len(), 30);
        let mut prev = usize::MAX;
        for row in &log {
            assert!(row.window <= prev);
            prev = row.window;
        }
        assert_eq!(log.last().unwrap().window, 4);
        assert!(log.last().unwrap().tau.is_none());
        // Soft phase rows carry a finite tau.
        assert!(log[0].tau.is_some());
    }

    #[test]
    fn unbinding_window_keeps_student_at_teacher_level() {
        // W_target >= seq_len: the mask never drops a key, so adaptation
        // is plain continued training and the student stays at (or just
        // below) the teacher's NLL.
        let spec = small_spec();
        let dataset = generate_dataset(&spec, 13).unwrap();
        let settings = TrainSettings {
            steps: 150,
            eval_every: 75,
            eval_sequences: 4,
            peak_lr: 2e-3,
        };
        let (teacher, _) = pretrain_teacher(&dataset, &tiny_model_cfg(), &settings, 5).unwrap();
        let sched = CurriculumSchedule {
            w_start: 64,
            w_target: spec.seq_len, // never binds
            tau_start: 1.0,
            tau_end: 1e4,
            t_c: 30,
        };
        let adapt_settings = TrainSettings {
            steps: 50,
            peak_lr: 5e-4,
            ..settings
        };
        let (student, _) = adapt_student(
            &teacher,
            &dataset,
            &sched,
            &DistillConfig::default(),
            Strategy::Curriculum,
            &adapt_settings,
            6,
        )
        .unwrap();
        let mask = hybrid_mask(spec.layout(), WindowSpec::Bounded(sched.w_target));
        let full = causal_full_mask(spec.layout());
        let (teacher_nll, _) = evaluate(&teacher, &dataset.val, &full).unwrap();
        let (student_nll, _) = evaluate(&student, &dataset.val, &mask).unwrap();
        assert!(
            (student_nll - teacher_nll).abs() <= 0.10 * teacher_nll,
            "student {student_nll:.4} strayed from teacher {teacher_nll:.4}"
        );
    }

    #[test]
    fn teacher_beats_unigram_baseline() {
        let spec = SyntheticTaskSpec {
            n_train: 128,
            n_val: 16,
            ..small_spec()
        };
        let dataset = generate_dataset(&spec, 21).unwrap();
        let settings = TrainSettings {
            steps: 500,
            eval_every: 250,
            eval_sequences: 8,
            peak_lr: 2e-3,
        };
        let model_cfg = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_q_heads: 2,
            n_kv_heads: 2,
            head_dim: 16,
            d_ff: 128,
            vocab_size: 32,
            max_position: 64,
        };
        let (teacher, _) = pretrain_teacher(&dataset, &model_cfg, &settings, 2).unwrap();
        let mask = causal_full_mask(spec.layout());
        let (nll, _) = evaluate(&teacher, &dataset.val, &mask).unwrap();

        // Unigram oracle: train-set emission frequencies scored on val.
        let mut counts = vec![0usize; spec.vocab_size];
        let mut total = 0usize;
        for seq in &dataset.train {
            for &t in &seq.tokens[spec.prefix_len..] {
                counts[t as usize] += 1;
                total += 1;
            }
        }
        let mut unigram_nll = 0.0f64;
        let mut n = 0usize;
        for seq in &dataset.val {
            for &t in &seq.tokens[spec.prefix_len..] {
                let p = (counts[t as usize].max(1)) as f64 / total as f64;
                unigram_nll -= p.ln();
                n += 1;
            }
        }
        unigram_nll /= n as f64;
        assert!(
            nll < unigram_nll,
            "teacher {nll:.4} not below unigram floor {unigram_nll:.4}"
        );
    }

    #[test]
    fn crashed_arms_become_nan_rows_and_run_continues() {
        let dataset = generate_dataset(&small_spec(), 9).unwrap();
        let settings = TrainSettings {
            steps: 2,
            eval_every: 100,
            eval_sequences: 2,
            peak_lr: 1e-3,
        };
        let (teacher, _) = pretrain_teacher(&dataset, &tiny_model_cfg(), &settings, 1).unwrap();
        // Broken schedule: every trained arm fails validation, the
        // untrained baseline still evaluates.
        let sched = CurriculumSchedule {
            w_start: 4,
            w_target: 8,
            tau_start: 1.0,
            tau_end: 1e4,
            t_c: 3,
        };
        let mut grid = AblationGrid::default_grid(sched, settings);
        grid.seeds = vec![1];
        grid.eval_sequences = 2;
        let reports = run_ablations(&teacher, &dataset, &grid);
        assert_eq!(reports.len(), 8);
        for r in &reports {
            if r.arm == "sw_only" {
                assert!(r.final_nll.is_finite());
            } else {
                assert!(r.final_nll.is_nan(), "{} should have failed", r.arm);
            }
        }
    }

    #[test]
    fn ablation_grid_produces_full_table() {
        let dataset = generate_dataset(&small_spec(), 9).unwrap();
        let settings = TrainSettings {
            steps: 4,
            eval_every: 100,
            eval_sequences: 2,
            peak_lr: 1e-3,
        };
        let (teacher, _) = pretrain_teacher(&dataset, &tiny_model_cfg(), &settings, 1).unwrap();
        let sched = CurriculumSchedule {
            w_start: 8,
            w_target: 4,
            tau_start: 1.0,
            tau_end: 1e4,
            t_c: 3,
        };
        let mut grid = AblationGrid::default_grid(sched, settings);
        grid.eval_sequences = 2;
        grid.jobs = 2;
        let reports = run_ablations(&teacher, &dataset, &grid);
        assert_eq!(reports.len(), 24);
        let csv = ablation_report_csv(&reports);
        assert_eq!(csv.lines().count(), 25);
        assert!(csv.starts_with("arm,strategy,seed,final_nll,token_acc,steps"));
        // Deterministic across job counts.
        grid.jobs = 1;
        let serial = run_ablations(&teacher, &dataset, &grid);
        for (a, b) in reports.iter().zip(&serial) {
            assert_eq!(a.final_nll.to_bits(), b.final_nll.to_bits());
        }
    }
}
