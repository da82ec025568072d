//! Adaptation objective: ground-truth cross entropy plus a skew-KL
//! distillation term against a frozen full-attention teacher, and the
//! AdamW step that applies it to the student.

use crate::backprop::{backward, forward_train};
use crate::error::{Error, Result};
use crate::masking::{causal_full_mask, AdditiveMask};
use crate::model::{Model, ModelConfig, Params, Token};
use crate::numerics::{nll_of_row, Matrix};

/// Loss-composition switches. `lambda` weighs the KL term; `skew` is the
/// teacher share of the mixture the KL is taken against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub lambda: f64,
    pub skew: f64,
    pub enable_ce: bool,
    pub enable_kl: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 1.0,
            skew: 0.1,
            enable_ce: true,
            enable_kl: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.enable_ce && !self.enable_kl {
            return Err(Error::InvalidConfig(
                "at least one of the CE and KL losses must be enabled".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.skew) {
            return Err(Error::InvalidSkew(self.skew));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Skew KL divergence KL(p || skew * p + (1 - skew) * q). Zero iff the
/// distributions match; finite under student support gaps when skew > 0.
pub fn skew_kl(teacher: &[f32], student: &[f32], skew: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&skew) {
        return Err(Error::InvalidSkew(skew));
    }
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch {
            expected_rows: 1,
            expected_cols: teacher.len(),
            got_rows: 1,
            got_cols: student.len(),
        });
    }
    let mut total = 0.0f64;
    for (&p, &q) in teacher.iter().zip(student) {
        let p = p as f64;
        if p <= 0.0 {
            continue;
        }
        let mix = skew * p + (1.0 - skew) * q as f64;
        total += p * (p / mix).ln();
    }
    Ok(total.max(0.0))
}

/// Loss decomposition for one optimizer step. `total` reconstructs from
/// the parts and the config exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
}

fn softmax_f64(logits: &[f32], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    for (&l, o) in logits.iter().zip(out.iter_mut()) {
        *o = (l as f64 - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Combined loss over matched logits rows; one row per target position.
/// The teacher side is a constant (no gradient flows through it).
pub fn distill_loss(
    teacher_logits: &Matrix,
    student_logits: &Matrix,
    targets: &[Token],
    cfg: &DistillConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if teacher_logits.rows() != student_logits.rows()
        || teacher_logits.cols() != student_logits.cols()
    {
        return Err(Error::ShapeMismatch {
            expected_rows: teacher_logits.rows(),
            expected_cols: teacher_logits.cols(),
            got_rows: student_logits.rows(),
            got_cols: student_logits.cols(),
        });
    }
    if student_logits.rows() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected_rows: targets.len(),
            expected_cols: student_logits.cols(),
            got_rows: student_logits.rows(),
            got_cols: student_logits.cols(),
        });
    }
    let vocab = student_logits.cols();
    let n = targets.len();
    let mut ce = 0.0f64;
    let mut kl = 0.0f64;
    let mut p = vec![0.0f64; vocab];
    let mut q = vec![0.0f64; vocab];
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= vocab {
            return Err(Error::TargetOutOfVocab {
                row: r,
                target: t,
                vocab,
            });
        }
        ce += nll_of_row(student_logits.row(r), t as usize);
        softmax_f64(teacher_logits.row(r), &mut p);
        softmax_f64(student_logits.row(r), &mut q);
        let mut row_kl = 0.0f64;
        for (&pv, &qv) in p.iter().zip(&q) {
            if pv > 0.0 {
                let mix = cfg.skew * pv + (1.0 - cfg.skew) * qv;
                row_kl += pv * (pv / mix).ln();
            }
        }
        kl += row_kl.max(0.0);
    }
    ce /= n as f64;
    kl /= n as f64;
    let total = if cfg.enable_ce { ce } else { 0.0 }
        + if cfg.enable_kl { cfg.lambda * kl } else { 0.0 };
    Ok(LossReport { total, ce, kl })
}

/// Gradient of the combined loss with respect to the student logits,
/// written into `dlogits` rows `loss_start..loss_start + targets.len()`.
fn loss_grad_into(
    teacher_logits: &Matrix,
    student_logits: &Matrix,
    targets: &[Token],
    loss_start: usize,
    cfg: &DistillConfig,
    dlogits: &mut Matrix,
) {
    let vocab = student_logits.cols();
    let n = targets.len() as f32;
    let mut p = vec![0.0f64; vocab];
    let mut q = vec![0.0f64; vocab];
    let mut s = vec![0.0f64; vocab];
    for (r, &t) in targets.iter().enumerate() {
        softmax_f64(student_logits.row(loss_start + r), &mut q);
        let grad = dlogits.row_mut(loss_start + r);
        if cfg.enable_ce {
            for (g, &qv) in grad.iter_mut().zip(&q) {
                *g += qv as f32 / n;
            }
            grad[t as usize] -= 1.0 / n;
        }
        if cfg.enable_kl && cfg.lambda > 0.0 {
            softmax_f64(teacher_logits.row(loss_start + r), &mut p);
            // dKL/dq_j = -(1 - skew) p_j / m_j, then through the softmax.
            let mut dot_sq = 0.0f64;
            for ((sv, &pv), &qv) in s.iter_mut().zip(&p).zip(&q) {
                let mix = cfg.skew * pv + (1.0 - cfg.skew) * qv;
                *sv = if pv > 0.0 {
                    -(1.0 - cfg.skew) * pv / mix
                } else {
                    0.0
                };
                dot_sq += *sv * qv;
            }
            let w = cfg.lambda / n as f64;
            for ((g, &sv), &qv) in grad.iter_mut().zip(&s).zip(&q) {
                *g += (w * qv * (sv - dot_sq)) as f32;
            }
        }
    }
}

/// Learning-rate and moment settings for [`AdamW`]. The rate warms up
/// linearly then decays on a cosine to `min_lr_frac * peak_lr`.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub min_lr_frac: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn for_steps(total_steps: usize) -> Self {
        OptimizerConfig {
            peak_lr: 2e-3,
            min_lr_frac: 0.1,
            warmup_steps: (total_steps / 20).max(10).min(total_steps),
            total_steps,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps.saturating_sub(self.warmup_steps)).max(1) as f64;
        let frac = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.peak_lr * self.min_lr_frac;
        floor + (self.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer. Norm gains are not
/// decayed.
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Params,
    v: Params,
    step: usize,
}

impl AdamW {
    pub fn new(model_cfg: &ModelConfig, cfg: OptimizerConfig) -> Self {
        AdamW {
            cfg,
            m: Params::zeros(model_cfg),
            v: Params::zeros(model_cfg),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn apply(&mut self, params: &mut Params, grads: &Params) {
        self.step += 1;
        let lr = self.cfg.lr_at(self.step - 1) as f32;
        let b1 = self.cfg.beta1 as f32;
        let b2 = self.cfg.beta2 as f32;
        let eps = self.cfg.eps as f32;
        let inv_bias1 = (1.0 / (1.0 - self.cfg.beta1.powi(self.step as i32))) as f32;
        let inv_bias2 = (1.0 / (1.0 - self.cfg.beta2.powi(self.step as i32))) as f32;

        let mut p_tensors = params.tensors_mut();
        let mut m_tensors = self.m.tensors_mut();
        let mut v_tensors = self.v.tensors_mut();
        let g_tensors = grads.tensors();
        for (((pname, p), (_, g)), ((_, m), (_, v))) in p_tensors
            .iter_mut()
            .zip(g_tensors.iter())
            .zip(m_tensors.iter_mut().zip(v_tensors.iter_mut()))
        {
            let decay = if pname.contains("norm") {
                0.0
            } else {
                self.cfg.weight_decay as f32
            };
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv * inv_bias1;
                let v_hat = *vv * inv_bias2;
                *pv -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * *pv);
            }
        }
    }
}

/// Loss only, through the inference forward path; no tape, no gradients.
pub fn evaluate_loss(
    teacher: &Model,
    student: &Model,
    tokens: &[Token],
    student_mask: &AdditiveMask,
    cfg: &DistillConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    let layout = student_mask.layout;
    let teacher_mask = causal_full_mask(layout);
    let teacher_out = teacher.forward(tokens, &teacher_mask, false)?;
    let student_out = student.forward(tokens, student_mask, false)?;
    let loss_start = layout.prefix_len - 1;
    let targets = &tokens[layout.prefix_len..];
    let t_rows = slice_rows(&teacher_out.logits, loss_start, targets.len());
    let s_rows = slice_rows(&student_out.logits, loss_start, targets.len());
    distill_loss(&t_rows, &s_rows, targets, cfg)
}

/// Computes the combined loss and the student gradients for one batch
/// without touching the weights. The teacher always runs the full causal
/// mask over the same tokens; the loss covers the generated region only.
pub fn loss_and_grads(
    teacher: &Model,
    student: &Model,
    tokens: &[Token],
    student_mask: &AdditiveMask,
    cfg: &DistillConfig,
) -> Result<(LossReport, Params)> {
    cfg.validate()?;
    let layout = student_mask.layout;
    let teacher_mask = causal_full_mask(layout);
    let teacher_out = teacher.forward(tokens, &teacher_mask, false)?;
    let tape = forward_train(student, tokens, student_mask)?;

    let loss_start = layout.prefix_len - 1;
    let targets = &tokens[layout.prefix_len..];
    let t_rows = slice_rows(&teacher_out.logits, loss_start, targets.len());
    let s_rows = slice_rows(&tape.logits, loss_start, targets.len());
    let report = distill_loss(&t_rows, &s_rows, targets, cfg)?;

    let mut dlogits = Matrix::zeros(tokens.len(), student.config().vocab_size);
    loss_grad_into(
        &teacher_out.logits,
        &tape.logits,
        targets,
        loss_start,
        cfg,
        &mut dlogits,
    );
    let grads = backward(student, &tape, &dlogits);
    Ok((report, grads))
}

/// One teacher-supervised optimizer step on the student.
pub fn teacher_student_step(
    teacher: &Model,
    student: &mut Model,
    tokens: &[Token],
    student_mask: &AdditiveMask,
    cfg: &DistillConfig,
    optimizer: &mut AdamW,
) -> Result<LossReport> {
    let (report, grads) = loss_and_grads(teacher, student, tokens, student_mask, cfg)?;
    optimizer.apply(student.params_mut(), &grads);
    Ok(report)
}

fn slice_rows(m: &Matrix, start: usize, n: usize) -> Matrix {
    let mut out = Matrix::zeros(n, m.cols());
    for r in 0..n {
        out.row_mut(r).copy_from_slice(m.row(start + r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{curriculum_mask, hybrid_mask, WindowSpec};
    use crate::model::SequenceLayout;
    use crate::numerics::Rng;

    #[test]
    fn skew_kl_zero_for_identical() {
        let p = [0.2f32, 0.5, 0.3];
        assert_eq!(skew_kl(&p, &p, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn skew_kl_standard_kl_at_zero_skew() {
        let loss = skew_kl(&[1.0, 0.0], &[0.5, 0.5], 0.0).unwrap();
        assert!((loss - 2.0f64.ln()).abs() <= 1e-7, "{loss}");
    }

    #[test]
    fn skew_kl_hand_mixed_example() {
        // mix = 0.1 * 1 + 0.9 * 0.5 = 0.55; loss = ln(1 / 0.55).
        let loss = skew_kl(&[1.0, 0.0], &[0.5, 0.5], 0.1).unwrap();
        assert!((loss - (1.0f64 / 0.55).ln()).abs() <= 1e-9, "{loss}");
    }

    #[test]
    fn skew_kl_rejects_skew_one() {
        assert!(matches!(
            skew_kl(&[1.0, 0.0], &[0.5, 0.5], 1.0),
            Err(Error::InvalidSkew(_))
        ));
    }

    #[test]
    fn skew_kl_finite_under_support_gap() {
        let loss = skew_kl(&[1.0, 0.0], &[0.0, 1.0], 0.1).unwrap();
        assert!(loss.is_finite());
        assert!((loss - (1.0f64 / 0.1).ln()).abs() <= 1e-9);
    }

    fn random_dist(n: usize, rng: &mut Rng) -> Vec<f32> {
        let mut v: Vec<f32> = (0..n).map(|_| rng.next_f32() + 1e-4).collect();
        let sum: f32 = v.iter().sum();
        for x in v.iter_mut() {
            *x /= sum;
        }
        v
    }

    #[test]
    fn skew_kl_non_negative_property() {
        let mut rng = Rng::new(17);
        for i in 0..2000 {
            let n = 2 + (rng.next_below(30) as usize);
            let p = random_dist(n, &mut rng);
            let q = random_dist(n, &mut rng);
            let beta = rng.next_f64() * 0.99;
            let loss = skew_kl(&p, &q, beta).unwrap();
            assert!(loss >= 0.0, "iteration {i}: loss {loss}");
        }
    }

    #[test]
    fn skew_kl_continuous_toward_zero_skew() {
        let mut rng = Rng::new(23);
        let p = random_dist(12, &mut rng);
        let q = random_dist(12, &mut rng);
        let base = skew_kl(&p, &q, 0.0).unwrap();
        for beta in [1e-3, 1e-5, 1e-7] {
            let v = skew_kl(&p, &q, beta).unwrap();
            assert!((v - base).abs() <= 20.0 * beta, "beta {beta}: {v} vs {base}");
        }
    }

    fn toy_logits(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.next_normal() * 2.0).collect(),
        )
    }

    #[test]
    fn distill_loss_ce_only_arm() {
        let t = toy_logits(4, 8, 1);
        let s = toy_logits(4, 8, 2);
        let targets = [0u32, 3, 7, 1];
        let cfg = DistillConfig {
            lambda: 0.0,
            ..DistillConfig::default()
        };
        let r = distill_loss(&t, &s, &targets, &cfg).unwrap();
        assert_eq!(r.total, r.ce);

        let cfg = DistillConfig {
            enable_kl: false,
            ..DistillConfig::default()
        };
        let r = distill_loss(&t, &s, &targets, &cfg).unwrap();
        assert_eq!(r.total, r.ce);
    }

    #[test]
    fn distill_loss_kl_only_arm() {
        let t = toy_logits(4, 8, 1);
        let s = toy_logits(4, 8, 2);
        let targets = [0u32, 3, 7, 1];
        let cfg = DistillConfig {
            enable_ce: false,
            lambda: 0.7,
            ..DistillConfig::default()
        };
        let r = distill_loss(&t, &s, &targets, &cfg).unwrap();
        assert!((r.total - 0.7 * r.kl).abs() <= 1e-12);
    }

    #[test]
    fn distill_loss_zero_kl_for_matching_logits() {
        let t = toy_logits(3, 6, 9);
        let targets = [2u32, 4, 0];
        let r = distill_loss(&t, &t, &targets, &DistillConfig::default()).unwrap();
        assert!(r.kl.abs() <= 1e-12);
        assert!((r.total - r.ce).abs() <= 1e-12);
    }

    #[test]
    fn distill_loss_decomposition_reconstructs() {
        let t = toy_logits(5, 9, 3);
        let s = toy_logits(5, 9, 4);
        let targets = [1u32, 2, 3, 4, 5];
        let cfg = DistillConfig {
            lambda: 0.37,
            skew: 0.2,
            enable_ce: true,
            enable_kl: true,
        };
        let r = distill_loss(&t, &s, &targets, &cfg).unwrap();
        assert!((r.total - (r.ce + 0.37 * r.kl)).abs() <= 1e-7);
    }

    #[test]
    fn distill_loss_rejects_disabled_both() {
        let t = toy_logits(2, 4, 1);
        let cfg = DistillConfig {
            enable_ce: false,
            enable_kl: false,
            ..DistillConfig::default()
        };
        assert!(distill_loss(&t, &t, &[0, 1], &cfg).is_err());
    }

    fn small_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            d_ff: 32,
            vocab_size: 10,
            max_position: 32,
        };
        Model::init(cfg, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn step_zero_kl_when_student_equals_teacher() {
        let teacher = small_model(7);
        let student = small_model(7);
        let layout = SequenceLayout::new(3, 6).unwrap();
        let mask = causal_full_mask(layout);
        let tokens: Vec<Token> = vec![1, 2, 3, 4, 5, 6, 7, 8, 9];
        let (report, _) = loss_and_grads(
            &teacher,
            &student,
            &tokens,
            &mask,
            &DistillConfig::default(),
        )
        .unwrap();
        assert!(report.kl.abs() <= 1e-10, "kl {}", report.kl);
    }

    #[test]
    fn step_leaves_teacher_unchanged_and_is_deterministic() {
        let teacher = small_model(7);
        let teacher_bytes: Vec<f32> = teacher
            .params()
            .tensors()
            .iter()
            .flat_map(|(_, m)| m.data().to_vec())
            .collect();
        let layout = SequenceLayout::new(3, 6).unwrap();
        let mask = curriculum_mask(layout, 2, 1.5);
        let tokens: Vec<Token> = vec![1, 2, 3, 4, 5, 6, 7, 8, 9];

        let run = |seed: u64| -> Vec<f64> {
            let mut student = small_model(seed);
            let mut opt = AdamW::new(student.config(), OptimizerConfig::for_steps(5));
            (0..5)
                .map(|_| {
                    teacher_student_step(
                        &teacher,
                        &mut student,
                        &tokens,
                        &mask,
                        &DistillConfig::default(),
                        &mut opt,
                    )
                    .unwrap()
                    .total
                })
                .collect()
        };
        let a = run(21);
        let b = run(21);
        assert_eq!(a, b);

        let after: Vec<f32> = teacher
            .params()
            .tensors()
            .iter()
            .flat_map(|(_, m)| m.data().to_vec())
            .collect();
        assert_eq!(teacher_bytes, after);
    }

    #[test]
    fn teacher_forward_is_student_mask_invariant() {
        // The step always runs the teacher under the full causal mask, so
        // its logits cannot depend on the student's curriculum phase.
        let teacher = small_model(3);
        let layout = SequenceLayout::new(3, 6).unwrap();
        let tokens: Vec<Token> = vec![1, 2, 3, 4, 5, 6, 7, 8, 9];
        let full = causal_full_mask(layout);
        let hybrid = hybrid_mask(layout, WindowSpec::Bounded(2));
        let a = teacher.forward(&tokens, &full, false).unwrap();
        let mut s1 = small_model(40);
        let mut s2 = small_model(40);
        let mut o1 = AdamW::new(s1.config(), OptimizerConfig::for_steps(1));
        let mut o2 = AdamW::new(s2.config(), OptimizerConfig::for_steps(1));
        teacher_student_step(&teacher, &mut s1, &tokens, &full, &DistillConfig::default(), &mut o1)
            .unwrap();
        teacher_student_step(
            &teacher,
            &mut s2,
            &tokens,
            &hybrid,
            &DistillConfig::default(),
            &mut o2,
        )
        .unwrap();
        let b = teacher.forward(&tokens, &full, false).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = OptimizerConfig::for_steps(1000);
        assert!(cfg.lr_at(0) < cfg.peak_lr);
        let peak_step = cfg.warmup_steps;
        assert!((cfg.lr_at(peak_step) - cfg.peak_lr).abs() / cfg.peak_lr < 0.01);
        let end = cfg.lr_at(999);
        assert!(end >= cfg.peak_lr * cfg.min_lr_frac * 0.99);
        assert!(end <= cfg.peak_lr * 0.2);
    }
}
