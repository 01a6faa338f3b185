//! Robustness perturbations: curvature-scaled noise and frame dropping.
//!
//! Noise follows σ_t = α(γ_t + 1) with γ_t = (ẋ_{t+δ} − ẋ_t)² + (ẏ_{t+δ} − ẏ_t)²
//! and velocities ẋ_t = x_{t+1} − x_t. Frames without a forward difference
//! reuse the last computable γ, and noise is applied per coordinate. Only
//! history frames are ever touched; ground-truth futures stay clean.

use alloc::vec::Vec;

use crate::error::CoreError;
use crate::rng::Rng;
use crate::scene::{AgentTrack, PerturbationKind, PerturbationSpec, Scene};
use crate::Result;

/// Per-frame noise scale σ_t over the first `history_len` frames.
pub fn curvature_sigmas(
    points: &[[f64; 2]],
    history_len: usize,
    alpha: f64,
    delta_t: usize,
) -> Vec<f64> {
    let mut gammas = Vec::with_capacity(history_len);
    let mut last_gamma = 0.0;
    for t in 0..history_len {
        // ẋ_t needs frame t+1; ẋ_{t+δ} needs frame t+δ+1.
        if t + delta_t + 1 < points.len() {
            let vx_t = points[t + 1][0] - points[t][0];
            let vy_t = points[t + 1][1] - points[t][1];
            let vx_d = points[t + delta_t + 1][0] - points[t + delta_t][0];
            let vy_d = points[t + delta_t + 1][1] - points[t + delta_t][1];
            let dx = vx_d - vx_t;
            let dy = vy_d - vy_t;
            last_gamma = dx * dx + dy * dy;
        }
        gammas.push(last_gamma);
    }
    gammas.iter().map(|g| alpha * (g + 1.0)).collect()
}

/// Additive Gaussian noise on history frames, σ_t from the track curvature.
///
/// The curvature is computed from the clean input track, then noise is added
/// per coordinate. Masked frames keep their zero sentinel.
pub fn inject_noise(
    track: &AgentTrack,
    history_len: usize,
    alpha: f64,
    delta_t: usize,
    seed: u64,
) -> Result<AgentTrack> {
    if alpha < 0.0 {
        return Err(CoreError::domain("inject_noise: alpha must be >= 0"));
    }
    if track.trajectory.len() < delta_t + 2 {
        return Err(CoreError::domain(alloc::format!(
            "inject_noise: track needs at least delta_t + 2 = {} frames, has {}",
            delta_t + 2,
            track.trajectory.len()
        )));
    }
    if alpha == 0.0 {
        return Ok(track.clone());
    }
    let history_len = history_len.min(track.trajectory.len());
    let sigmas = curvature_sigmas(&track.trajectory.points, history_len, alpha, delta_t);
    let mut rng = Rng::from_seed(seed);
    let mut out = track.clone();
    for (t, sigma) in sigmas.iter().enumerate() {
        // Draw for every frame to keep the stream layout independent of the
        // mask; skip application on masked frames.
        let nx = rng.normal() * sigma;
        let ny = rng.normal() * sigma;
        if out.trajectory.valid[t] {
            out.trajectory.points[t][0] += nx;
            out.trajectory.points[t][1] += ny;
        }
    }
    Ok(out)
}

/// Zero out `round(fraction * t_h)` uniformly chosen history frames and
/// clear their valid bits. The current frame (index t_h) is kept so the
/// scene retains a reference point.
pub fn drop_frames(
    track: &AgentTrack,
    t_h: usize,
    fraction: f64,
    seed: u64,
) -> Result<AgentTrack> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CoreError::domain(
            "drop_frames: fraction must be in [0, 1)",
        ));
    }
    let n_drop = crate::mathx::round(fraction * t_h as f64) as usize;
    let mut out = track.clone();
    if n_drop == 0 {
        return Ok(out);
    }
    let mut rng = Rng::from_seed(seed);
    let drop = rng.sample_indices(t_h, n_drop);
    for idx in drop {
        out.trajectory.points[idx] = [0.0, 0.0];
        out.trajectory.valid[idx] = false;
        if let Some(extras) = &mut out.extras {
            for v in extras[idx].iter_mut() {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Apply a perturbation spec to a scene's observed inputs (target and
/// neighbor histories). Futures and maps are untouched.
pub fn perturb_scene(scene: &Scene, spec: &PerturbationSpec) -> Result<Scene> {
    spec.validate()?;
    let mut out = scene.clone();
    match spec.kind {
        PerturbationKind::None => {}
        PerturbationKind::Noise => {
            let hist = scene.history_len();
            let base = crate::util::fnv1a64(scene.id.as_bytes()) ^ spec.rng_seed;
            out.target = inject_noise(&scene.target, hist, spec.alpha, spec.delta_t, base)?;
            for (i, n) in scene.neighbors.iter().enumerate() {
                out.neighbors[i] =
                    inject_noise(n, hist, spec.alpha, spec.delta_t, base.wrapping_add(1 + i as u64))?;
            }
        }
        PerturbationKind::FrameDrop => {
            let base = crate::util::fnv1a64(scene.id.as_bytes()) ^ spec.rng_seed;
            out.target = drop_frames(&scene.target, scene.t_h, spec.drop_fraction, base)?;
            for (i, n) in scene.neighbors.iter().enumerate() {
                out.neighbors[i] =
                    drop_frames(n, scene.t_h, spec.drop_fraction, base.wrapping_add(1 + i as u64))?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn straight_track(n: usize, v: f64) -> AgentTrack {
        AgentTrack::vehicle((0..n).map(|i| [i as f64 * v, 0.0]).collect())
    }

    #[test]
    fn constant_velocity_has_zero_curvature() {
        let track = straight_track(8, 2.0);
        let sigmas = curvature_sigmas(&track.trajectory.points, 6, 3.0, 1);
        for s in sigmas {
            assert!((s - 3.0).abs() < 1e-12, "sigma should equal alpha, got {s}");
        }
    }

    #[test]
    fn curvature_hand_case() {
        // x positions 0, 1, 3, 6: velocities 1, 2, 3; gamma_0 = (2-1)^2 = 1.
        let pts: Vec<[f64; 2]> = alloc::vec![[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [6.0, 0.0]];
        let sigmas = curvature_sigmas(&pts, 3, 1.0, 1);
        assert!((sigmas[0] - 2.0).abs() < 1e-12, "sigma_0 = 2*alpha, got {}", sigmas[0]);
        assert!((sigmas[1] - 2.0).abs() < 1e-12); // gamma_1 = (3-2)^2 = 1
        assert!((sigmas[2] - 2.0).abs() < 1e-12); // no forward diff: reuse gamma_1
    }

    #[test]
    fn zero_alpha_is_identity() {
        let track = straight_track(8, 1.5);
        let noised = inject_noise(&track, 5, 0.0, 1, 99).unwrap();
        assert_eq!(noised, track);
    }

    #[test]
    fn noise_leaves_future_untouched() {
        let track = straight_track(10, 1.0);
        let hist = 6;
        let noised = inject_noise(&track, hist, 4.0, 1, 7).unwrap();
        for t in hist..10 {
            assert_eq!(noised.trajectory.points[t], track.trajectory.points[t]);
        }
        // And history moved.
        assert!(noised.trajectory.points[0] != track.trajectory.points[0]);
    }

    #[test]
    fn negative_alpha_rejected() {
        let track = straight_track(6, 1.0);
        assert!(matches!(
            inject_noise(&track, 4, -0.5, 1, 0),
            Err(CoreError::Domain(_))
        ));
    }

    #[test]
    fn drop_zero_fraction_is_identity() {
        let track = straight_track(14, 1.0);
        assert_eq!(drop_frames(&track, 10, 0.0, 3).unwrap(), track);
    }

    #[test]
    fn drop_count_contract() {
        let track = straight_track(14, 1.0);
        let dropped = drop_frames(&track, 10, 0.2, 3).unwrap();
        let zeroed = dropped.trajectory.valid[..10].iter().filter(|v| !**v).count();
        assert_eq!(zeroed, 2);
        for t in 0..14 {
            if !dropped.trajectory.valid[t] {
                assert_eq!(dropped.trajectory.points[t], [0.0, 0.0]);
                assert!(t < 10, "only history frames may drop");
            }
        }
    }

    #[test]
    fn drop_is_deterministic_per_seed() {
        let track = straight_track(14, 1.0);
        let a = drop_frames(&track, 10, 0.4, 11).unwrap();
        let b = drop_frames(&track, 10, 0.4, 11).unwrap();
        assert_eq!(a, b);
        let c = drop_frames(&track, 10, 0.4, 12).unwrap();
        assert_ne!(a.trajectory.valid, c.trajectory.valid);
    }

    #[test]
    fn drop_full_fraction_rejected() {
        let track = straight_track(14, 1.0);
        assert!(drop_frames(&track, 10, 1.0, 0).is_err());
    }
}
