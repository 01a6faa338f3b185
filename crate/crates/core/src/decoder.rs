//! Causal decoder: composite tokens, backdoor averaging, factual-minus-
//! counterfactual combination, and the maneuver-conditioned Gaussian-mixture
//! trajectory head.
//!
//! Backdoor averaging sums per-element in ascending value order (see
//! [`Var::mean_stack`]); the mean is therefore bit-identical under any
//! permutation of the backdoor set, which the exactness contract asserts.
//!
//! The mixture head rolls a GRU for t_f steps per maneuver mode. Each step
//! emits a position delta and the bivariate-Gaussian scale parameters:
//! σ through softplus (plus a 1e-8 floor against underflow), ρ through
//! 0.999·tanh. Deltas accumulate from the scene origin so predictions live
//! in absolute coordinates.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::CoreError;
use crate::nn::{Forward, GruCell, Linear, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Result;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Factual,
    Counterfactual,
}

/// K×D composite token (one row per maneuver mode).
pub struct CompositeToken<'t> {
    pub values: Var<'t>,
    pub kind: TokenKind,
}

/// K maneuver probabilities with per-maneuver bivariate-Gaussian rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePrediction {
    /// Maneuver probabilities, sum 1.
    #[serde(rename = "probs")]
    pub maneuver_probs: Vec<f64>,
    /// Per mode: t_f frames of (μx, μy, σx, σy, ρ).
    #[serde(rename = "modes")]
    pub trajectories: Vec<Vec<[f64; 5]>>,
}

impl MixturePrediction {
    pub fn modes(&self) -> usize {
        self.maneuver_probs.len()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories.first().map(|t| t.len()).unwrap_or(0)
    }

    /// Mean positions of one mode.
    pub fn mode_means(&self, k: usize) -> Vec<[f64; 2]> {
        self.trajectories[k].iter().map(|f| [f[0], f[1]]).collect()
    }

    /// Index of the most probable mode.
    pub fn argmax_mode(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.maneuver_probs.iter().enumerate() {
            if p > self.maneuver_probs[best] {
                best = i;
            }
        }
        best
    }

    /// Mode indices ordered by descending probability (stable on ties).
    pub fn modes_by_probability(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.modes()).collect();
        order.sort_by(|&a, &b| {
            self.maneuver_probs[b]
                .partial_cmp(&self.maneuver_probs[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        order
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.len() != self.maneuver_probs.len() {
            return Err(CoreError::validation("mixture: mode count mismatch"));
        }
        let sum: f64 = self.maneuver_probs.iter().sum();
        if self.maneuver_probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(CoreError::validation(alloc::format!(
                "mixture: probabilities sum to {sum}, expected 1"
            )));
        }
        for mode in &self.trajectories {
            for frame in mode {
                if frame.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::Numerical("mixture: non-finite parameter".into()));
                }
                if frame[2] <= 0.0 || frame[3] <= 0.0 {
                    return Err(CoreError::validation("mixture: sigma must be positive"));
                }
                if frame[4].abs() >= 1.0 {
                    return Err(CoreError::validation("mixture: |rho| must be < 1"));
                }
            }
        }
        Ok(())
    }
}

/// Per-maneuver concatenation of a query row with the fusion feature,
/// projected back to D.
#[derive(Debug, Clone)]
pub struct TokenComposer {
    proj: Linear,
    pub modes: usize,
}

impl TokenComposer {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, modes: usize, rng: &mut Rng) -> Self {
        TokenComposer {
            proj: Linear::new(params, &alloc::format!("{name}.proj"), 2 * dim, dim, true, rng),
            modes,
        }
    }

    pub fn compose<'t>(
        &self,
        f: &Forward<'t, '_>,
        query: Var<'t>,
        fusion: Var<'t>,
        kind: TokenKind,
    ) -> CompositeToken<'t> {
        let k = query.shape().0;
        let ones = f.tape.constant(Tensor::filled(k, 1, 1.0));
        let fused_rows = ones.matmul(fusion); // broadcast 1×D to K×D
        let merged = Var::concat_cols(&[query, fused_rows]);
        CompositeToken {
            values: self.proj.forward(f, merged).tanh(),
            kind,
        }
    }
}

/// Arithmetic mean over the backdoor set, canonical summation order.
pub fn backdoor_average<'t>(tokens: &[CompositeToken<'t>]) -> Result<CompositeToken<'t>> {
    if tokens.is_empty() {
        return Err(CoreError::domain("backdoor average over an empty set"));
    }
    let kind = tokens[0].kind;
    if tokens.iter().any(|t| t.kind != kind) {
        return Err(CoreError::usage("backdoor average over mixed token kinds"));
    }
    let vars: Vec<Var<'t>> = tokens.iter().map(|t| t.values).collect();
    Ok(CompositeToken {
        values: Var::mean_stack(&vars),
        kind,
    })
}

/// Y = Ỹ − Ỹ_c in token space.
pub fn causal_combine<'t>(
    factual: &CompositeToken<'t>,
    counterfactual: &CompositeToken<'t>,
) -> Result<CompositeToken<'t>> {
    if factual.kind != TokenKind::Factual || counterfactual.kind != TokenKind::Counterfactual {
        return Err(CoreError::usage(
            "causal_combine expects (factual, counterfactual) in that order",
        ));
    }
    Ok(CompositeToken {
        values: factual.values.sub(counterfactual.values),
        kind: TokenKind::Factual,
    })
}

/// Decoded trajectories still on the tape, for loss construction.
pub struct DecodedVars<'t> {
    /// 1×K probabilities.
    pub probs: Var<'t>,
    pub modes: Vec<ModeVars<'t>>,
}

pub struct ModeVars<'t> {
    /// t_f×2 absolute mean positions.
    pub mu: Var<'t>,
    /// t_f×2 offsets before the origin shift.
    pub mu_offsets: Var<'t>,
    /// t_f×2 standard deviations.
    pub sigma: Var<'t>,
    /// t_f×1 correlations.
    pub rho: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryDecoder {
    gru: GruCell,
    head: Linear,
    prob_head: Linear,
    pub modes: usize,
}

impl TrajectoryDecoder {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, modes: usize, rng: &mut Rng) -> Self {
        TrajectoryDecoder {
            gru: GruCell::new(params, &alloc::format!("{name}.gru"), dim, dim, rng),
            head: Linear::new(params, &alloc::format!("{name}.head"), dim, 5, true, rng),
            prob_head: Linear::new(params, &alloc::format!("{name}.prob"), dim, 1, true, rng),
            modes,
        }
    }

    /// Roll out `horizon` frames per mode from the combined composite token.
    pub fn decode<'t>(
        &self,
        f: &Forward<'t, '_>,
        combined: &CompositeToken<'t>,
        horizon: usize,
        origin: [f64; 2],
    ) -> DecodedVars<'t> {
        let (k, _d) = combined.values.shape();
        debug_assert_eq!(k, self.modes);
        let logits = self.prob_head.forward(f, combined.values); // K×1
        let probs = logits.t().softmax_rows(); // 1×K
        let origin_var = f
            .tape
            .constant(Tensor::from_vec(1, 2, alloc::vec![origin[0], origin[1]]));
        let mut modes = Vec::with_capacity(k);
        for mode in 0..k {
            let token = combined.values.row(mode); // 1×D
            let mut h = token;
            let mut deltas = Vec::with_capacity(horizon);
            let mut sig = Vec::with_capacity(horizon);
            let mut rho = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                h = self.gru.step(f, token, h);
                let out = self.head.forward(f, h); // 1×5
                deltas.push(out.slice_cols(0, 2));
                sig.push(out.slice_cols(2, 2).softplus().add_scalar(1e-8));
                rho.push(out.slice_cols(4, 1).tanh().scale(0.999));
            }
            // Cumulative offsets.
            let mut positions = Vec::with_capacity(horizon);
            let mut acc = deltas[0];
            positions.push(acc);
            for d in &deltas[1..] {
                acc = acc.add(*d);
                positions.push(acc);
            }
            let mu_offsets = Var::concat_rows(&positions);
            let mu = mu_offsets.add_row(origin_var);
            modes.push(ModeVars {
                mu,
                mu_offsets,
                sigma: Var::concat_rows(&sig),
                rho: Var::concat_rows(&rho),
            });
        }
        DecodedVars { probs, modes }
    }
}

/// Snapshot decoded vars into a validated [`MixturePrediction`].
pub fn to_mixture(decoded: &DecodedVars<'_>) -> Result<MixturePrediction> {
    let probs = decoded.probs.value();
    let mut trajectories = Vec::with_capacity(decoded.modes.len());
    for mode in &decoded.modes {
        let mu = mode.mu.value();
        let sigma = mode.sigma.value();
        let rho = mode.rho.value();
        let mut frames = Vec::with_capacity(mu.rows);
        for t in 0..mu.rows {
            frames.push([
                mu.at(t, 0),
                mu.at(t, 1),
                sigma.at(t, 0),
                sigma.at(t, 1),
                rho.at(t, 0),
            ]);
        }
        trajectories.push(frames);
    }
    let mixture = MixturePrediction {
        maneuver_probs: probs.data.clone(),
        trajectories,
    };
    if !probs.all_finite() {
        return Err(CoreError::Numerical("mixture probabilities not finite".into()));
    }
    mixture.validate()?;
    Ok(mixture)
}

/// Negative log-likelihood of the ground-truth future under one mode's
/// bivariate Gaussians, summed over frames.
pub fn mixture_nll(
    pred: &MixturePrediction,
    gt_future: &[[f64; 2]],
    maneuver: usize,
) -> Result<f64> {
    if maneuver >= pred.modes() {
        return Err(CoreError::domain(alloc::format!(
            "maneuver {maneuver} outside 0..{}",
            pred.modes()
        )));
    }
    let mode = &pred.trajectories[maneuver];
    if mode.len() != gt_future.len() {
        return Err(CoreError::domain(alloc::format!(
            "ground truth has {} frames, prediction {}",
            gt_future.len(),
            mode.len()
        )));
    }
    let mut total = 0.0;
    for (frame, gt) in mode.iter().zip(gt_future) {
        let [mx, my, sx, sy, r] = *frame;
        if sx <= 0.0 || sy <= 0.0 {
            return Err(CoreError::domain("mixture_nll: sigma must be positive"));
        }
        let dx = gt[0] - mx;
        let dy = gt[1] - my;
        let omr2 = 1.0 - r * r;
        let z = (dx / sx) * (dx / sx) - 2.0 * r * dx * dy / (sx * sy) + (dy / sy) * (dy / sy);
        total += LN_2PI
            + crate::mathx::ln(sx)
            + crate::mathx::ln(sy)
            + 0.5 * crate::mathx::ln(omr2)
            + z / (2.0 * omr2);
    }
    Ok(total)
}

/// Differentiable NLL of one decoded mode against a fixed future.
pub fn mixture_nll_var<'t>(
    f: &Forward<'t, '_>,
    mode: &ModeVars<'t>,
    gt_future: &[[f64; 2]],
) -> Var<'t> {
    let t_f = gt_future.len();
    assert_eq!(mode.mu.shape().0, t_f, "horizon mismatch");
    let mut gt = Tensor::zeros(t_f, 2);
    for (i, p) in gt_future.iter().enumerate() {
        gt.set(i, 0, p[0]);
        gt.set(i, 1, p[1]);
    }
    let diff = f.tape.constant(gt).sub(mode.mu); // t_f×2
    let dx = diff.slice_cols(0, 1);
    let dy = diff.slice_cols(1, 1);
    let sx = mode.sigma.slice_cols(0, 1);
    let sy = mode.sigma.slice_cols(1, 1);
    let ones = f.tape.constant(Tensor::filled(t_f, 1, 1.0));
    let omr2 = ones.sub(mode.rho.mul(mode.rho));
    let nx = dx.div(sx);
    let ny = dy.div(sy);
    let cross = mode.rho.mul(nx).mul(ny).scale(2.0);
    let z = nx.mul(nx).add(ny.mul(ny)).sub(cross);
    let per_frame = sx
        .ln()
        .add(sy.ln())
        .add(omr2.ln().scale(0.5))
        .add(z.div(omr2.scale(2.0)))
        .add_scalar(LN_2PI);
    per_frame.sum()
}
