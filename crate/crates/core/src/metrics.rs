use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 11] = [
    "iteration",
    "env_steps",
    "mean_return",
    "success_rate",
    "actor_loss",
    "value_loss",
    "bc_loss",
    "mean_ratio",
    "clip_fraction",
    "entropy",
    "wall_time_s",
];

/// One training iteration. `env_steps` is cumulative.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub bc_loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    /// Fields in header order. Floats use the shortest representation that
    /// parses back to the same value.
    pub fn to_record(&self) -> Vec<String> {
        let mut out = vec![self.iteration.to_string(), self.env_steps.to_string()];
        out.extend(
            [
                self.mean_return,
                self.success_rate,
                self.actor_loss,
                self.value_loss,
                self.bc_loss,
                self.mean_ratio,
                self.clip_fraction,
                self.entropy,
                self.wall_time_s,
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        out
    }

    pub fn from_record(fields: &[&str]) -> Result<Self> {
        if fields.len() != METRICS_HEADER.len() {
            return Err(Error::Format(format!(
                "expected {} metric fields, found {}",
                METRICS_HEADER.len(),
                fields.len()
            )));
        }
        let int = |i: usize| {
            fields[i]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("{}: '{}': {e}", METRICS_HEADER[i], fields[i])))
        };
        let float = |i: usize| {
            fields[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("{}: '{}': {e}", METRICS_HEADER[i], fields[i])))
        };
        Ok(Self {
            iteration: int(0)?,
            env_steps: int(1)?,
            mean_return: float(2)?,
            success_rate: float(3)?,
            actor_loss: float(4)?,
            value_loss: float(5)?,
            bc_loss: float(6)?,
            mean_ratio: float(7)?,
            clip_fraction: float(8)?,
            entropy: float(9)?,
            wall_time_s: float(10)?,
        })
    }
}

/// Least-squares slope of `ys` against `0, 1, 2, ...`.
pub fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xm;
        num += dx * (y - ym);
        den += dx * dx;
    }
    num / den
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(ys: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..ys.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            ys[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// First cumulative env-step count at which the `w`-iteration moving average
/// of `mean_return` reaches `threshold`.
pub fn steps_to_threshold(rows: &[MetricsRow], threshold: f64, w: usize) -> Option<usize> {
    let returns: Vec<f64> = rows.iter().map(|r| r.mean_return).collect();
    moving_average(&returns, w)
        .iter()
        .zip(rows)
        .find(|(m, _)| **m >= threshold)
        .map(|(_, r)| r.env_steps)
}
