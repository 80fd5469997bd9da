//! Flow timesteps: the lognorm draw with dynamic time shifting, and the
//! per-token timestep field that lets clean condition tokens run at t = 0.

use crate::rng::{sample_normal, SeededRng};

/// Shift map t = s*u / (1 + (s-1)*u). Identity at s = 1, pushes mass toward
/// t = 1 for s > 1.
pub fn time_shift(u: f64, s: f64) -> f64 {
    s * u / (1.0 + (s - 1.0) * u)
}

/// Shift strength grows linearly with sequence length, clamped at base_len.
pub fn dynamic_shift(seq_len: usize, base_len: usize, max_shift: f64) -> f64 {
    let frac = (seq_len as f64 / base_len as f64).min(1.0);
    1.0 + (max_shift - 1.0) * frac
}

/// Lognorm strategy: u = sigmoid(n), n ~ N(0,1), then the dynamic shift.
pub fn sample_timestep(rng: &mut SeededRng, seq_len: usize, base_len: usize, max_shift: f64) -> f64 {
    let n = sample_normal(rng);
    let u = 1.0 / (1.0 + (-n).exp());
    time_shift(u, dynamic_shift(seq_len, base_len, max_shift))
}

/// Per-token timestep assignment. Fill mode uses one value for every token;
/// dev mode gives clean tokens t = 0 and noised tokens the current step.
#[derive(Debug, Clone, PartialEq)]
pub enum TimestepField {
    Uniform(f64),
    PerToken(Vec<f64>),
}

impl TimestepField {
    /// t = 0 on clean tokens, t elsewhere.
    pub fn per_token_from_mask(token_mask: &[bool], t: f64) -> TimestepField {
        TimestepField::PerToken(token_mask.iter().map(|&m| if m { t } else { 0.0 }).collect())
    }

    pub fn value_at(&self, token: usize) -> f64 {
        match self {
            TimestepField::Uniform(t) => *t,
            TimestepField::PerToken(ts) => ts[token],
        }
    }

    /// Distinct timestep values in ascending order.
    pub fn distinct_values(&self, n_tokens: usize) -> Vec<f64> {
        let mut vals: Vec<f64> = match self {
            TimestepField::Uniform(t) => vec![*t],
            TimestepField::PerToken(ts) => {
                assert_eq!(ts.len(), n_tokens, "timestep field length mismatch");
                ts.clone()
            }
        };
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        vals
    }

    /// Group index per token, aligned with `distinct_values`.
    pub fn group_of_tokens(&self, n_tokens: usize) -> (Vec<f64>, Vec<u32>) {
        let values = self.distinct_values(n_tokens);
        let groups = (0..n_tokens)
            .map(|i| {
                let t = self.value_at(i);
                values.iter().position(|&v| v == t).unwrap() as u32
            })
            .collect();
        (values, groups)
    }
}
