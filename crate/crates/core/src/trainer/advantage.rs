//! Group-normalized trajectory advantages and token-level GAE.

/// Groups whose reward spread is below this get zero advantages.
pub const SIGMA_GUARD: f64 = 1e-8;

/// (R_i - mean) / std over the group, population std. All zeros when the
/// group is degenerate.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < SIGMA_GUARD {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / sd).collect()
}

/// Generalized advantage estimates and returns for one token sequence.
/// `values[t]` estimates the value before token t; the value after the last
/// token is zero.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "one value per token");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_of_eight() {
        let a = compute_advantages(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((a[0] - 3f64.sqrt()).abs() < 1e-12);
        assert!((a[7] + 1.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_groups() {
        assert_eq!(compute_advantages(&[0.0; 8]), vec![0.0; 8]);
        assert_eq!(compute_advantages(&[1.0; 6]), vec![0.0; 6]);
        assert_eq!(compute_advantages(&[1.0]), vec![0.0]);
    }

    #[test]
    fn telescoping() {
        let (a, r) = gae(&[0.0, 0.0, 1.0], &[0.0; 3], 1.0, 1.0);
        assert_eq!(a, vec![1.0; 3]);
        assert_eq!(r, vec![1.0; 3]);
        let (a, _) = gae(&[0.0, 0.0, 0.0], &[0.0; 3], 1.0, 1.0);
        assert_eq!(a, vec![0.0; 3]);
    }
}
