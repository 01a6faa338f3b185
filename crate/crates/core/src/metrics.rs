//! Displacement-error metric kernels: ADE, FDE, best-of-k ADE, per-horizon
//! RMSE, and the class-weighted WSADE/WSFDE sums.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::decoder::MixturePrediction;
use crate::error::CoreError;
use crate::scene::AgentClass;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Ade,
    Fde,
    MinAdeK,
    Rmse,
    Wsade,
    Wsfde,
}

impl MetricName {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "ade" => Ok(MetricName::Ade),
            "fde" => Ok(MetricName::Fde),
            "min_ade_k" | "minade" | "min_ade" => Ok(MetricName::MinAdeK),
            "rmse" => Ok(MetricName::Rmse),
            "wsade" => Ok(MetricName::Wsade),
            "wsfde" => Ok(MetricName::Wsfde),
            other => Err(CoreError::config(alloc::format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: MetricName,
    /// Mode count for the min-of-k variants.
    pub k: usize,
    /// Per-class weights for the weighted variants.
    pub class_weights: Vec<(AgentClass, f64)>,
}

impl MetricSpec {
    pub fn simple(name: MetricName) -> Self {
        MetricSpec {
            name,
            k: 1,
            class_weights: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::validation("metric k must be >= 1"));
        }
        if matches!(self.name, MetricName::Wsade | MetricName::Wsfde) {
            let sum: f64 = self.class_weights.iter().map(|(_, w)| w).sum();
            if self.class_weights.iter().any(|(_, w)| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(CoreError::validation(
                    "weighted metrics need nonnegative class weights summing to 1",
                ));
            }
        }
        Ok(())
    }
}

fn check_paired(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<()> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(CoreError::domain(alloc::format!(
            "metric inputs must pair up: {} predictions vs {} ground truths",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    crate::mathx::sqrt(dx * dx + dy * dy)
}

/// Mean Euclidean displacement.
pub fn ade(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_paired(pred, gt)?;
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| dist(*p, *g)).sum();
    Ok(total / pred.len() as f64)
}

/// Final-frame Euclidean displacement.
pub fn fde(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    check_paired(pred, gt)?;
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]))
}

/// Minimum ADE over the k most probable modes.
pub fn min_ade_k(pred: &MixturePrediction, gt: &[[f64; 2]], k: usize) -> Result<f64> {
    if k == 0 || k > pred.modes() {
        return Err(CoreError::domain(alloc::format!(
            "k = {k} outside 1..={} modes",
            pred.modes()
        )));
    }
    let order = pred.modes_by_probability();
    let mut best = f64::INFINITY;
    for &mode in order.iter().take(k) {
        best = best.min(ade(&pred.mode_means(mode), gt)?);
    }
    Ok(best)
}

/// RMSE at each horizon frame (1-based) over a set of scenes.
pub fn rmse_by_horizon(
    preds: &[Vec<[f64; 2]>],
    gts: &[Vec<[f64; 2]>],
    horizons: &[usize],
) -> Result<Vec<f64>> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(CoreError::domain("rmse needs paired non-empty inputs"));
    }
    let t_f = gts[0].len();
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != t_f || g.len() != t_f {
            return Err(CoreError::domain("rmse inputs must share one horizon"));
        }
    }
    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        if h == 0 || h > t_f {
            return Err(CoreError::domain(alloc::format!(
                "horizon frame {h} outside 1..={t_f}"
            )));
        }
        let mut total = 0.0;
        for (p, g) in preds.iter().zip(gts) {
            let d = dist(p[h - 1], g[h - 1]);
            total += d * d;
        }
        out.push(crate::mathx::sqrt(total / preds.len() as f64));
    }
    Ok(out)
}

/// Weighted sum of per-class values: Σ w_c · value_c. Every class with a
/// nonzero weight must be present.
pub fn weighted_class_sum(
    per_class: &[(AgentClass, f64)],
    weights: &[(AgentClass, f64)],
) -> Result<f64> {
    let mut total = 0.0;
    for &(class, w) in weights {
        if w == 0.0 {
            continue;
        }
        match per_class.iter().find(|(c, _)| *c == class) {
            Some(&(_, v)) => total += w * v,
            None => {
                return Err(CoreError::domain(alloc::format!(
                    "weighted metric: class '{}' has weight {w} but no value",
                    class.name()
                )))
            }
        }
    }
    Ok(total)
}

/// WSADE: weighted sum of per-class ADEs.
pub fn wsade(per_class_ade: &[(AgentClass, f64)], weights: &[(AgentClass, f64)]) -> Result<f64> {
    weighted_class_sum(per_class_ade, weights)
}

/// WSFDE: weighted sum of per-class FDEs.
pub fn wsfde(per_class_fde: &[(AgentClass, f64)], weights: &[(AgentClass, f64)]) -> Result<f64> {
    weighted_class_sum(per_class_fde, weights)
}
