//! Evaluation harness: metric aggregation over scenes, robustness
//! perturbations, domain-generalization cross-evaluation, and the ablation
//! runner.
//!
//! Reports are canonical: scenes are processed in id order and per-scene
//! values are reduced with a canonical summation, so the same checkpoint,
//! dataset and seed produce byte-identical reports regardless of input
//! order or parallel scheduling.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::decoder::MixturePrediction;
use crate::error::CoreError;
use crate::metrics;
use crate::model::{AblationToggles, AblationVariant, CausalPredictor};
use crate::perturb::perturb_scene;
use crate::scene::{AgentClass, PerturbationSpec, Scene};
use crate::train::{train_diffusion, train_full, Checkpoint, TrainLogRow};
use crate::Result;

/// Aggregated metric values for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub scene_count: usize,
    pub metrics: BTreeMap<String, f64>,
    /// (horizon seconds, RMSE meters) pairs, horizons within t_f only.
    pub rmse_by_horizon: Vec<(f64, f64)>,
    pub perturbation: PerturbationSpec,
    pub config_fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Evaluate an arbitrary predictor over a dataset.
///
/// The perturbation touches observed inputs only; ground-truth futures come
/// from the clean scenes. Scenes are evaluated in id order.
pub fn evaluate_with<P>(
    predict: P,
    scenes: &[Scene],
    config: &Config,
    perturbation: &PerturbationSpec,
    split: &str,
    fingerprint: String,
    seed: u64,
) -> Result<EvalReport>
where
    P: Fn(&Scene) -> Result<MixturePrediction>,
{
    perturbation.validate()?;
    config.eval.validate()?;
    if scenes.is_empty() {
        return Err(CoreError::config("evaluate: empty dataset"));
    }
    let mut ordered: Vec<&Scene> = scenes.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let mut ade_all = Vec::new();
    let mut fde_all = Vec::new();
    let mut min_ade: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut per_class: BTreeMap<AgentClass, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut t_f = usize::MAX;
    let mut dt = 0.0;

    for scene in &ordered {
        let perturbed = perturb_scene(scene, perturbation)?;
        let mixture = predict(&perturbed)?;
        mixture.validate()?;
        if mixture.horizon() != scene.t_f {
            return Err(CoreError::config(alloc::format!(
                "prediction horizon {} does not match scene t_f {}",
                mixture.horizon(),
                scene.t_f
            )));
        }
        let gt = scene.target_future().to_vec();
        let best = mixture.mode_means(mixture.argmax_mode());
        let scene_ade = metrics::ade(&best, &gt)?;
        let scene_fde = metrics::fde(&best, &gt)?;
        ade_all.push(scene_ade);
        fde_all.push(scene_fde);
        for &k in &config.eval.min_ade_k {
            let k_eff = k.min(mixture.modes());
            min_ade
                .entry(k)
                .or_default()
                .push(metrics::min_ade_k(&mixture, &gt, k_eff)?);
        }
        let entry = per_class.entry(scene.target.class_label).or_default();
        entry.0.push(scene_ade);
        entry.1.push(scene_fde);
        preds.push(best);
        gts.push(gt);
        t_f = t_f.min(scene.t_f);
        dt = scene.dt;
    }

    let mut out = BTreeMap::new();
    out.insert("ade".into(), crate::util::canonical_mean(&mut ade_all));
    out.insert("fde".into(), crate::util::canonical_mean(&mut fde_all));
    for (k, mut values) in min_ade {
        out.insert(
            alloc::format!("min_ade_{k}"),
            crate::util::canonical_mean(&mut values),
        );
    }

    // Class-weighted sums over the classes present with nonzero weight.
    let mut class_ade = Vec::new();
    let mut class_fde = Vec::new();
    for (class, (mut ades, mut fdes)) in per_class {
        class_ade.push((class, crate::util::canonical_mean(&mut ades)));
        class_fde.push((class, crate::util::canonical_mean(&mut fdes)));
    }
    let active_weights: Vec<(AgentClass, f64)> = config
        .eval
        .class_weights
        .iter()
        .filter(|(c, w)| *w > 0.0 && class_ade.iter().any(|(pc, _)| pc == c))
        .cloned()
        .collect();
    if !active_weights.is_empty() {
        let norm: f64 = active_weights.iter().map(|(_, w)| w).sum();
        let renormed: Vec<(AgentClass, f64)> = active_weights
            .iter()
            .map(|&(c, w)| (c, w / norm))
            .collect();
        out.insert("wsade".into(), metrics::wsade(&class_ade, &renormed)?);
        out.insert("wsfde".into(), metrics::wsfde(&class_fde, &renormed)?);
    }

    // Per-horizon RMSE at whole-second horizons inside t_f.
    let mut horizon_frames = Vec::new();
    let mut horizon_seconds = Vec::new();
    for &h in &config.eval.horizons_s {
        let frame = crate::mathx::round(h / dt) as usize;
        if frame >= 1 && frame <= t_f {
            horizon_frames.push(frame);
            horizon_seconds.push(h);
        }
    }
    let rmse = metrics::rmse_by_horizon(&preds, &gts, &horizon_frames)?;
    if let Some(last) = rmse.last() {
        out.insert("rmse".into(), *last);
    }
    let rmse_by_horizon = horizon_seconds.into_iter().zip(rmse).collect();

    Ok(EvalReport {
        split: split.into(),
        scene_count: ordered.len(),
        metrics: out,
        rmse_by_horizon,
        perturbation: perturbation.clone(),
        config_fingerprint: fingerprint,
        seed,
    })
}

/// Evaluate a trained causal predictor.
pub fn evaluate(
    model: &CausalPredictor,
    scenes: &[Scene],
    config: &Config,
    perturbation: &PerturbationSpec,
    split: &str,
    seed: u64,
) -> Result<EvalReport> {
    let fingerprint = Config {
        model: model.config.clone(),
        ..config.clone()
    }
    .model_fingerprint();
    evaluate_with(
        |scene| Ok(model.predict(scene, seed)?.mixture),
        scenes,
        config,
        perturbation,
        split,
        fingerprint,
        seed,
    )
}

/// Two-sample Kolmogorov–Smirnov result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample KS test with the asymptotic p-value approximation.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(CoreError::domain("ks test needs non-empty samples"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len(), sb.len());
    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < na && j < nb {
        let x = if sa[i] <= sb[j] { sa[i] } else { sb[j] };
        while i < na && sa[i] <= x {
            i += 1;
        }
        while j < nb && sb[j] <= x {
            j += 1;
        }
        let fa = i as f64 / na as f64;
        let fb = j as f64 / nb as f64;
        d = d.max(crate::mathx::abs(fa - fb));
    }
    let n_eff = (na as f64 * nb as f64) / (na + nb) as f64;
    let sqrt_n = crate::mathx::sqrt(n_eff);
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    let p = if lambda < 1e-3 {
        1.0
    } else {
        let mut sum = 0.0;
        let mut sign = 1.0;
        for k in 1..=100 {
            let term = crate::mathx::exp(-2.0 * (k as f64) * (k as f64) * lambda * lambda);
            sum += sign * term;
            sign = -sign;
            if term < 1e-12 {
                break;
            }
        }
        (2.0 * sum).clamp(0.0, 1.0)
    };
    Ok(KsResult {
        statistic: d,
        p_value: p,
    })
}

/// Target speeds pooled over a split, for distribution comparisons.
pub fn split_speeds(scenes: &[Scene]) -> Vec<f64> {
    scenes.iter().map(|s| s.observed_speed()).collect()
}

/// Train-on-one, test-on-all cross-domain evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossDomainReport {
    pub split_names: Vec<String>,
    /// metric used for the matrix
    pub metric: String,
    /// matrix[i][j]: trained on split i, evaluated on split j.
    pub matrix: Vec<Vec<f64>>,
    /// Pairwise KS p-values over per-split speed distributions.
    pub ks_p_values: Vec<Vec<f64>>,
}

pub fn cross_domain_eval(
    splits: &[(String, Vec<Scene>)],
    config: &Config,
    toggles: AblationToggles,
) -> Result<CrossDomainReport> {
    if splits.len() < 2 {
        return Err(CoreError::config("cross-domain eval needs >= 2 splits"));
    }
    for (name, scenes) in splits {
        if scenes.len() < 2 {
            return Err(CoreError::config(alloc::format!(
                "split '{name}' has fewer than 2 scenes"
            )));
        }
    }
    let metric = "min_ade_1";
    let mut matrix = Vec::with_capacity(splits.len());
    for (_, train_scenes) in splits {
        let (_, diff_ckpt, _) = train_diffusion(train_scenes, config)?;
        let (model, _, _) = train_full(train_scenes, Some(&diff_ckpt), config, toggles)?;
        let mut row = Vec::with_capacity(splits.len());
        for (test_name, test_scenes) in splits {
            let report = evaluate(
                &model,
                test_scenes,
                config,
                &PerturbationSpec::none(),
                test_name,
                config.train.seed,
            )?;
            row.push(report.metric(metric).unwrap_or(f64::NAN));
        }
        matrix.push(row);
    }
    let speeds: Vec<Vec<f64>> = splits.iter().map(|(_, s)| split_speeds(s)).collect();
    let mut ks_p_values = Vec::with_capacity(splits.len());
    for a in &speeds {
        let mut row = Vec::with_capacity(splits.len());
        for b in &speeds {
            row.push(ks_two_sample(a, b)?.p_value);
        }
        ks_p_values.push(row);
    }
    Ok(CrossDomainReport {
        split_names: splits.iter().map(|(n, _)| n.clone()).collect(),
        metric: metric.into(),
        matrix,
        ks_p_values,
    })
}

/// Outcome of one ablation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub variant: AblationVariant,
    pub toggles: AblationToggles,
    pub report: EvalReport,
}

/// Train and evaluate one ablation variant. Variant D skips the diffusion
/// stage entirely; the others run both stages.
pub fn run_ablation(
    variant: AblationVariant,
    train_scenes: &[Scene],
    test_scenes: &[Scene],
    config: &Config,
) -> Result<(AblationOutcome, Checkpoint, Vec<TrainLogRow>)> {
    let toggles = variant.toggles();
    let diff_ckpt = if toggles.causal {
        Some(train_diffusion(train_scenes, config)?.1)
    } else {
        None
    };
    let (model, ckpt, logs) = train_full(train_scenes, diff_ckpt.as_ref(), config, toggles)?;
    let report = evaluate(
        &model,
        test_scenes,
        config,
        &PerturbationSpec::none(),
        "test",
        config.train.seed,
    )?;
    Ok((
        AblationOutcome {
            variant,
            toggles,
            report,
        },
        ckpt,
        logs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GeneratorConfig;
    use crate::synthetic::generate_split;

    fn tiny_config() -> Config {
        let mut config = Config::default();
        config.model.encoders.token_dim = 8;
        config.model.encoders.bev_pool = 8;
        config.model.encoders.bev_channels = 2;
        config.model.encoders.kernel_sizes = alloc::vec![3];
        config.model.diffusion.steps = 5;
        config.model.diffusion.set_size = 2;
        config.model.fusion.refine_iters = 2;
        config.train.epochs = 1;
        config.train.batch_size = 4;
        config.generator.bev_size = 16;
        config
    }

    fn dataset(n: usize, seed: u64) -> Vec<Scene> {
        let gen = GeneratorConfig {
            bev_size: 16,
            ..GeneratorConfig::default()
        };
        generate_split(&gen, seed, "train", n, 0.7).unwrap()
    }

    fn untrained_model(config: &Config) -> CausalPredictor {
        CausalPredictor::new(&config.model, AblationToggles::default(), 1).unwrap()
    }

    #[test]
    fn report_counts_and_idempotence() {
        let config = tiny_config();
        let scenes = dataset(6, 1);
        let model = untrained_model(&config);
        let report = evaluate(
            &model,
            &scenes,
            &config,
            &PerturbationSpec::none(),
            "test",
            7,
        )
        .unwrap();
        assert_eq!(report.scene_count, 6);
        assert!(report.metric("ade").unwrap().is_finite());
        assert!(report.metric("min_ade_1").is_some());
        assert!(report.metric("wsade").is_some());
        assert!(!report.rmse_by_horizon.is_empty());
        let again = evaluate(
            &model,
            &scenes,
            &config,
            &PerturbationSpec::none(),
            "test",
            7,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn none_equals_zero_alpha_noise() {
        let config = tiny_config();
        let scenes = dataset(4, 2);
        let model = untrained_model(&config);
        let none = evaluate(&model, &scenes, &config, &PerturbationSpec::none(), "t", 3).unwrap();
        let zero = evaluate(
            &model,
            &scenes,
            &config,
            &PerturbationSpec::noise(0.0, 3),
            "t",
            3,
        )
        .unwrap();
        assert_eq!(none.metrics, zero.metrics);
        assert_eq!(none.rmse_by_horizon, zero.rmse_by_horizon);
    }

    #[test]
    fn report_is_permutation_invariant() {
        let config = tiny_config();
        let scenes = dataset(5, 3);
        let model = untrained_model(&config);
        let a = evaluate(&model, &scenes, &config, &PerturbationSpec::none(), "t", 1).unwrap();
        let mut shuffled = scenes.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let b = evaluate(&model, &shuffled, &config, &PerturbationSpec::none(), "t", 1).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn ks_self_test_is_one_and_shifted_is_small() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let self_test = ks_two_sample(&xs, &xs).unwrap();
        assert_eq!(self_test.statistic, 0.0);
        assert_eq!(self_test.p_value, 1.0);

        // Disjoint speed regimes.
        let slow: Vec<f64> = (0..60).map(|i| 1.0 + 0.01 * i as f64).collect();
        let fast: Vec<f64> = (0..60).map(|i| 8.0 + 0.01 * i as f64).collect();
        let shifted = ks_two_sample(&slow, &fast).unwrap();
        assert!(shifted.p_value < 0.05, "p = {}", shifted.p_value);
        assert!(shifted.statistic > 0.9);
    }

    #[test]
    fn cross_domain_smoke_and_split_guards() {
        let mut config = tiny_config();
        config.train.epochs = 1;
        let a = dataset(6, 10);
        let b = dataset(6, 11);
        let report = cross_domain_eval(
            &[("a".into(), a.clone()), ("b".into(), b)],
            &config,
            AblationToggles::default(),
        )
        .unwrap();
        assert_eq!(report.matrix.len(), 2);
        assert_eq!(report.matrix[0].len(), 2);
        // Same-split KS against itself is 1 on the diagonal.
        assert_eq!(report.ks_p_values[0][0], 1.0);
        assert_eq!(report.ks_p_values[1][1], 1.0);

        assert!(matches!(
            cross_domain_eval(&[("a".into(), a)], &config, AblationToggles::default()),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn ablation_runner_wires_toggles() {
        let config = tiny_config();
        let train = dataset(6, 20);
        let test = dataset(4, 21);
        let (outcome, ckpt, _) =
            run_ablation(AblationVariant::D, &train, &test, &config).unwrap();
        assert!(!outcome.toggles.causal);
        assert_eq!(outcome.report.scene_count, 4);
        // D has no diffusion parameters at all.
        assert!(!ckpt.weights.keys().any(|k| k.starts_with("diffusion.")));
        let (outcome_e, ckpt_e, _) =
            run_ablation(AblationVariant::E, &train, &test, &config).unwrap();
        assert!(outcome_e.toggles.causal);
        assert!(ckpt_e.weights.keys().any(|k| k.starts_with("diffusion.")));
    }
}
