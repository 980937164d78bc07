use crate::error::{Error, Result};

/// Generalized advantage estimation over one environment's trajectory.
///
/// `values` holds `V(s_0..s_{n-1})` followed by the bootstrap value of the
/// state after the last transition. Returns `(advantages, returns)` with
/// `returns = advantages + values[..n]`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    gae_with_discounts(rewards, values, dones, &vec![gamma; rewards.len()], lambda)
}

/// As [`gae`] with a per-transition discount `discounts[t]` applied to the
/// successor value and advantage of step `t`.
pub fn gae_with_discounts(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    discounts: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 {
        return Err(Error::invalid(format!(
            "GAE needs {} values (one bootstrap per tail), got {}",
            n + 1,
            values.len()
        )));
    }
    if dones.len() != n || discounts.len() != n {
        return Err(Error::invalid("GAE inputs have inconsistent lengths"));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + discounts[t] * live * values[t + 1] - values[t];
        next = delta + discounts[t] * lambda * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}
