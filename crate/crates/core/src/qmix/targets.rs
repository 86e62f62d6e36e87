use crate::error::{Error, Result};

/// Peng's Q(λ) targets for one episode by backward recursion:
///
/// `G_t = r_t + γ·[(1−λ)·V_{t+1} + λ·G_{t+1}]`, `G_{T−1} = r_{T−1}`.
///
/// `next_values[t]` is the bootstrap value of the state reached after step
/// `t`; the last entry is unused because the episode is terminal there.
pub fn peng_targets(
    rewards: &[f64],
    next_values: &[f64],
    terminated: bool,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    if !terminated {
        return Err(Error::contract("Q(λ) targets need a terminated episode"));
    }
    if rewards.len() != next_values.len() {
        return Err(Error::contract(format!(
            "{} rewards but {} bootstrap values",
            rewards.len(),
            next_values.len()
        )));
    }
    let mut out = vec![0.0; rewards.len()];
    let Some(last) = rewards.len().checked_sub(1) else {
        return Ok(out);
    };
    out[last] = rewards[last];
    for t in (0..last).rev() {
        out[t] = rewards[t] + gamma * ((1.0 - lambda) * next_values[t] + lambda * out[t + 1]);
    }
    Ok(out)
}
