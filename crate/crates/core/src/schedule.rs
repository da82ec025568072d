//! Curriculum schedule: cosine progress, linear window shrink, and
//! log-interpolated mask temperature.

use crate::error::{Error, Result};

/// Parameters of the window-reduction curriculum.
///
/// Over `t_c` steps the effective window shrinks from `w_start` to
/// `w_target` while the soft-mask temperature rises from `tau_start` to
/// `tau_end`; both follow the same cosine progress `alpha(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    pub w_start: usize,
    pub w_target: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub t_c: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        // tau_end = 1e4 drives post-softmax leakage on masked keys below
        // 1e-40, indistinguishable from a hard mask.
        CurriculumSchedule {
            w_start: 128,
            w_target: 32,
            tau_start: 1.0,
            tau_end: 1e4,
            t_c: 1200,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.t_c == 0 {
            return Err(Error::ZeroCurriculum);
        }
        if self.tau_start <= 0.0 || self.tau_end <= 0.0 {
            return Err(Error::NonPositiveTau {
                tau_start: self.tau_start,
                tau_end: self.tau_end,
            });
        }
        if self.tau_end <= self.tau_start {
            return Err(Error::InvalidConfig(format!(
                "tau_end ({}) must exceed tau_start ({})",
                self.tau_end, self.tau_start
            )));
        }
        if self.w_target < 1 || self.w_start < self.w_target {
            return Err(Error::InvalidConfig(format!(
                "need w_start >= w_target >= 1, got {} -> {}",
                self.w_start, self.w_target
            )));
        }
        Ok(())
    }

    pub fn window_at(&self, t: usize) -> usize {
        window_at(t, self)
    }

    pub fn tau_at(&self, t: usize) -> f64 {
        tau_at(t, self)
    }
}

/// Cosine progress: alpha(t) = (1 - cos(pi * min(t / t_c, 1))) / 2.
/// Monotone from 0 at t = 0 to 1 at t = t_c, clamped thereafter.
pub fn alpha(t: usize, t_c: usize) -> Result<f64> {
    if t_c == 0 {
        return Err(Error::ZeroCurriculum);
    }
    let frac = (t as f64 / t_c as f64).min(1.0);
    Ok(0.5 * (1.0 - (std::f64::consts::PI * frac).cos()))
}

/// Effective window at step `t`, rounded half-up to the nearest integer.
pub fn window_at(t: usize, sched: &CurriculumSchedule) -> usize {
    let a = alpha(t, sched.t_c).expect("validated schedule");
    let w = sched.w_start as f64 - a * (sched.w_start as f64 - sched.w_target as f64);
    (w + 0.5).floor() as usize
}

/// Mask temperature at step `t`: log-scale interpolation between
/// `tau_start` and `tau_end`.
pub fn tau_at(t: usize, sched: &CurriculumSchedule) -> f64 {
    let a = alpha(t, sched.t_c).expect("validated schedule");
    (sched.tau_start.ln() + a * (sched.tau_end.ln() - sched.tau_start.ln())).exp()
}
