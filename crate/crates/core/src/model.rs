//! The full causal predictor: encoders → diffusion backdoor set → per-sample
//! multi-view attention → progressive + dual-scale fusion → composite tokens
//! → backdoor average → counterfactual subtraction → mixture decoding.
//!
//! Ablation toggles reproduce the study variants:
//! A drops the BEV encoder, B collapses progressive fusion to a single
//! refinement, C drops dual-scale fusion, D drops every causal mechanism
//! (no diffusion set, no counterfactual branch — the spatial tokens feed
//! attention directly and the composite decodes as-is), E is the full model.
//!
//! The backdoor sample seed is independent of the scene, so two scenes with
//! the same map and seed get bit-identical sample sets. Together with the
//! severed counterfactual inputs this makes Q_c^i, G_c and Ỹ_c bitwise
//! invariant to target-history changes, which the do-invariance contract
//! asserts end to end.

use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{AverageSpace, CombineSpace, ModelConfig, SampleMode};
use crate::decoder::{
    backdoor_average, causal_combine, to_mixture, CompositeToken, DecodedVars, MixturePrediction,
    ModeVars, TokenComposer, TokenKind, TrajectoryDecoder,
};
use crate::diffusion::{sample_backdoor_set, Denoiser, DiffusionSchedule};
use crate::encoders::{BevEncoder, SpatialEncoder, TemporalEncoder};
use crate::error::CoreError;
use crate::fusion::{DualScaleFusion, ProgressiveFusion};
use crate::multi_view::MultiViewAttention;
use crate::nn::{Forward, ParamSet};
use crate::rng::Rng;
use crate::scene::Scene;
use crate::tensor::Tensor;
use crate::Result;

/// Architecture toggles for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub bev: bool,
    pub progressive: bool,
    pub dual_scale: bool,
    pub causal: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles {
            bev: true,
            progressive: true,
            dual_scale: true,
            causal: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    A,
    B,
    C,
    D,
    E,
}

impl AblationVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_uppercase().as_str() {
            "A" => Ok(AblationVariant::A),
            "B" => Ok(AblationVariant::B),
            "C" => Ok(AblationVariant::C),
            "D" => Ok(AblationVariant::D),
            "E" => Ok(AblationVariant::E),
            other => Err(CoreError::config(alloc::format!(
                "unknown ablation variant '{other}' (expected A..E)"
            ))),
        }
    }

    pub fn toggles(&self) -> AblationToggles {
        let mut t = AblationToggles::default();
        match self {
            AblationVariant::A => t.bev = false,
            AblationVariant::B => t.progressive = false,
            AblationVariant::C => t.dual_scale = false,
            AblationVariant::D => t.causal = false,
            AblationVariant::E => {}
        }
        t
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::A => "A",
            AblationVariant::B => "B",
            AblationVariant::C => "C",
            AblationVariant::D => "D",
            AblationVariant::E => "E",
        }
    }
}

/// Everything one forward pass produces, still on the tape.
pub struct ForwardBundle<'t> {
    pub decoded: DecodedVars<'t>,
    /// Backdoor samples fed to the views (S^h itself when causal is off).
    pub samples: Vec<Var<'t>>,
    pub factual_contexts: Vec<Var<'t>>,
    pub counterfactual_contexts: Vec<Var<'t>>,
    pub factual_queries: Vec<Var<'t>>,
    pub counterfactual_queries: Vec<Var<'t>>,
    pub factual_composites: Vec<Var<'t>>,
    pub counterfactual_composites: Vec<Var<'t>>,
    /// Ỹ: backdoor-averaged factual composite.
    pub factual_token: Var<'t>,
    /// Ỹ_c, absent with causal off.
    pub counterfactual_token: Option<Var<'t>>,
    /// The token the decoder consumed (token-space combination), or the
    /// factual token in output-space mode.
    pub decoder_input: Var<'t>,
    pub fusion_factual: Var<'t>,
    pub fusion_counterfactual: Option<Var<'t>>,
    pub spatial_tokens: Var<'t>,
    pub no_valid_neighbors: bool,
}

/// Value-domain snapshot of a prediction for inspection and tests.
pub struct Prediction {
    pub mixture: MixturePrediction,
    pub factual_token: Tensor,
    pub counterfactual_token: Option<Tensor>,
    pub counterfactual_queries: Vec<Tensor>,
    pub fusion_counterfactual: Option<Tensor>,
    pub samples: Vec<Tensor>,
}

pub struct CausalPredictor {
    pub config: ModelConfig,
    pub toggles: AblationToggles,
    pub params: ParamSet,
    spatial: SpatialEncoder,
    temporal: TemporalEncoder,
    bev: Option<BevEncoder>,
    denoiser: Option<Denoiser>,
    schedule: Option<DiffusionSchedule>,
    mview: MultiViewAttention,
    progressive: ProgressiveFusion,
    dual: Option<DualScaleFusion>,
    composer: TokenComposer,
    decoder: TrajectoryDecoder,
    /// Per-scene backdoor sets under `SampleMode::FixedPerScene`.
    sample_cache: RefCell<alloc::collections::BTreeMap<String, Vec<Tensor>>>,
}

impl CausalPredictor {
    pub fn new(config: &ModelConfig, toggles: AblationToggles, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.encoders.token_dim;
        let k = config.decoder.modes;
        let mut rng = Rng::substream(seed, b"model-init");
        let mut params = ParamSet::new();
        let spatial = SpatialEncoder::new(&mut params, "spatial", &config.encoders, &mut rng);
        let temporal = TemporalEncoder::new(&mut params, "temporal", &config.encoders, &mut rng);
        let bev = toggles
            .bev
            .then(|| BevEncoder::new(&mut params, "bev", &config.encoders, &mut rng));
        let (denoiser, schedule) = if toggles.causal {
            (
                Some(Denoiser::new(
                    &mut params,
                    "diffusion.denoiser",
                    d,
                    config.diffusion.blocks,
                    &mut rng,
                )),
                Some(DiffusionSchedule::from_config(&config.diffusion)?),
            )
        } else {
            (None, None)
        };
        let mview = MultiViewAttention::new(&mut params, "mview", d, &config.attention, &mut rng);
        let progressive = ProgressiveFusion::new(&mut params, "fusion.prog", d, k, &mut rng);
        let dual = toggles
            .dual_scale
            .then(|| DualScaleFusion::new(&mut params, "fusion.dual", d, &config.fusion, &mut rng));
        let composer = TokenComposer::new(&mut params, "decoder.compose", d, k, &mut rng);
        let decoder = TrajectoryDecoder::new(&mut params, "decoder.traj", d, k, &mut rng);
        Ok(CausalPredictor {
            config: config.clone(),
            toggles,
            params,
            spatial,
            temporal,
            bev,
            denoiser,
            schedule,
            mview,
            progressive,
            dual,
            composer,
            decoder,
            sample_cache: RefCell::new(alloc::collections::BTreeMap::new()),
        })
    }

    pub fn refine_iters(&self) -> usize {
        if self.toggles.progressive {
            self.config.fusion.refine_iters
        } else {
            1
        }
    }

    pub fn spatial_encoder(&self) -> &SpatialEncoder {
        &self.spatial
    }

    pub fn denoiser(&self) -> Option<&Denoiser> {
        self.denoiser.as_ref()
    }

    pub fn schedule(&self) -> Option<&DiffusionSchedule> {
        self.schedule.as_ref()
    }

    /// Backdoor samples for a scene: fresh reverse chains, a cached set, or
    /// the raw spatial tokens when the causal machinery is off.
    pub fn make_samples<'t>(
        &self,
        f: &Forward<'t, '_>,
        scene: &Scene,
        spatial_tokens: Var<'t>,
        sample_seed: u64,
    ) -> Result<Vec<Var<'t>>> {
        if !self.toggles.causal {
            return Ok(alloc::vec![spatial_tokens]);
        }
        let denoiser = self.denoiser.as_ref().expect("causal model has denoiser");
        let schedule = self.schedule.as_ref().expect("causal model has schedule");
        let n = self.config.diffusion.set_size;
        match self.config.diffusion.sample_mode {
            SampleMode::FreshPerBatch => {
                let set = sample_backdoor_set(f, spatial_tokens, n, denoiser, schedule, sample_seed)?;
                Ok(set.samples)
            }
            SampleMode::FixedPerScene => {
                if let Some(cached) = self.sample_cache.borrow().get(&scene.id) {
                    return Ok(cached.iter().map(|t| f.tape.constant(t.clone())).collect());
                }
                let set = sample_backdoor_set(f, spatial_tokens, n, denoiser, schedule, sample_seed)?;
                let values: Vec<Tensor> = set.samples.iter().map(|v| v.value()).collect();
                self.sample_cache
                    .borrow_mut()
                    .insert(scene.id.clone(), values.clone());
                Ok(values.into_iter().map(|t| f.tape.constant(t)).collect())
            }
        }
    }

    /// Full forward pass with externally supplied backdoor samples.
    pub fn forward_with_samples<'t>(
        &self,
        f: &Forward<'t, '_>,
        scene: &Scene,
        spatial_tokens: Var<'t>,
        samples: Vec<Var<'t>>,
    ) -> Result<ForwardBundle<'t>> {
        if samples.is_empty() {
            return Err(CoreError::domain("forward needs at least one sample"));
        }
        let hist = scene.history_len();
        let temporal =
            self.temporal
                .encode(f, &scene.target, &scene.neighbors, hist, false)?;
        let bev_tokens = match &self.bev {
            Some(enc) => Some(enc.encode(f, &scene.bev)?.values),
            None => None,
        };
        let d = self.config.encoders.token_dim;
        let zero_view = f.tape.constant(Tensor::zeros(1, d));

        // Counterfactual target token: the zero input sequence. Neighbors
        // are row-independent in the GRU, so encoding the target alone gives
        // the same bits as re-encoding the whole batch.
        let xh_c = self
            .temporal
            .encode(f, &scene.target, &[], hist, true)?
            .target;

        let iters = self.refine_iters();
        let mut factual_contexts = Vec::with_capacity(samples.len());
        let mut counterfactual_contexts = Vec::with_capacity(samples.len());
        let mut factual_queries = Vec::with_capacity(samples.len());
        let mut counterfactual_queries = Vec::with_capacity(samples.len());
        let mut factual_composites = Vec::with_capacity(samples.len());
        let mut counterfactual_composites = Vec::with_capacity(samples.len());
        let mut no_valid_neighbors = false;

        // Dual-scale fusion is sample-independent; compute once.
        let (fusion_factual, fusion_counterfactual) = match &self.dual {
            Some(dual) => (
                dual.fuse(f, &scene.target, &scene.neighbors, hist, false).values,
                self.toggles
                    .causal
                    .then(|| dual.fuse(f, &scene.target, &scene.neighbors, hist, true).values),
            ),
            None => (
                f.tape.constant(Tensor::zeros(1, d)),
                self.toggles
                    .causal
                    .then(|| f.tape.constant(Tensor::zeros(1, d))),
            ),
        };

        let mut context_for = |xh: Var<'t>, sample: Var<'t>| -> Result<(Var<'t>, bool)> {
            let xs = self.mview.spatial_attention(f, xh, sample)?;
            let xb = match bev_tokens {
                Some(b) => self.mview.bev_attention(f, xh, b)?.values,
                None => zero_view,
            };
            let (xt, empty) =
                self.mview
                    .temporal_attention(f, xh, temporal.neighbors, &temporal.neighbor_mask)?;
            Ok((
                self.mview.aggregate_context(f, xs.values, xb, xt.values, xh),
                empty,
            ))
        };

        for &sample in &samples {
            let (ctx, empty) = context_for(temporal.target, sample)?;
            no_valid_neighbors |= empty;
            let (query, _) = self.progressive.refine(f, self.progressive.anchor_query(f), ctx, iters);
            factual_contexts.push(ctx);
            factual_queries.push(query.values);
            factual_composites.push(
                self.composer
                    .compose(f, query.values, fusion_factual, TokenKind::Factual)
                    .values,
            );

            if self.toggles.causal {
                let (ctx_c, _) = context_for(xh_c, sample)?;
                let (query_c, _) =
                    self.progressive
                        .refine(f, self.progressive.anchor_query(f), ctx_c, iters);
                counterfactual_contexts.push(ctx_c);
                counterfactual_queries.push(query_c.values);
                counterfactual_composites.push(
                    self.composer
                        .compose(
                            f,
                            query_c.values,
                            fusion_counterfactual.expect("causal branch has fusion"),
                            TokenKind::Counterfactual,
                        )
                        .values,
                );
            }
        }

        let wrap = |values: &[Var<'t>], kind: TokenKind| -> Vec<CompositeToken<'t>> {
            values
                .iter()
                .map(|&v| CompositeToken { values: v, kind })
                .collect()
        };
        let factual_token =
            backdoor_average(&wrap(&factual_composites, TokenKind::Factual))?.values;
        let counterfactual_token = if self.toggles.causal {
            Some(
                backdoor_average(&wrap(
                    &counterfactual_composites,
                    TokenKind::Counterfactual,
                ))?
                .values,
            )
        } else {
            None
        };

        let origin = scene.reference_point();
        let horizon = scene.t_f;
        let (decoded, decoder_input) = match self.config.fusion.average_space {
            AverageSpace::Token => {
                let factual = CompositeToken {
                    values: factual_token,
                    kind: TokenKind::Factual,
                };
                match (self.toggles.causal, self.config.fusion.combine_space) {
                    (false, _) => (
                        self.decoder.decode(f, &factual, horizon, origin),
                        factual_token,
                    ),
                    (true, CombineSpace::Token) => {
                        let combined = causal_combine(
                            &factual,
                            &CompositeToken {
                                values: counterfactual_token.unwrap(),
                                kind: TokenKind::Counterfactual,
                            },
                        )?;
                        let input = combined.values;
                        (self.decoder.decode(f, &combined, horizon, origin), input)
                    }
                    (true, CombineSpace::Output) => {
                        let decoded_f = self.decoder.decode(f, &factual, horizon, origin);
                        let token_c = CompositeToken {
                            values: counterfactual_token.unwrap(),
                            kind: TokenKind::Factual,
                        };
                        let decoded_c = self.decoder.decode(f, &token_c, horizon, origin);
                        (subtract_decoded(f, decoded_f, &decoded_c, origin), factual_token)
                    }
                }
            }
            AverageSpace::Output => {
                let mut per_sample = Vec::with_capacity(samples.len());
                for i in 0..samples.len() {
                    let factual = CompositeToken {
                        values: factual_composites[i],
                        kind: TokenKind::Factual,
                    };
                    let decoded_i = if !self.toggles.causal {
                        self.decoder.decode(f, &factual, horizon, origin)
                    } else {
                        match self.config.fusion.combine_space {
                            CombineSpace::Token => {
                                let combined = causal_combine(
                                    &factual,
                                    &CompositeToken {
                                        values: counterfactual_composites[i],
                                        kind: TokenKind::Counterfactual,
                                    },
                                )?;
                                self.decoder.decode(f, &combined, horizon, origin)
                            }
                            CombineSpace::Output => {
                                let decoded_f = self.decoder.decode(f, &factual, horizon, origin);
                                let token_c = CompositeToken {
                                    values: counterfactual_composites[i],
                                    kind: TokenKind::Factual,
                                };
                                let decoded_c = self.decoder.decode(f, &token_c, horizon, origin);
                                subtract_decoded(f, decoded_f, &decoded_c, origin)
                            }
                        }
                    };
                    per_sample.push(decoded_i);
                }
                (average_decoded(f, per_sample, origin), factual_token)
            }
        };

        Ok(ForwardBundle {
            decoded,
            samples,
            factual_contexts,
            counterfactual_contexts,
            factual_queries,
            counterfactual_queries,
            factual_composites,
            counterfactual_composites,
            factual_token,
            counterfactual_token,
            decoder_input,
            fusion_factual,
            fusion_counterfactual,
            spatial_tokens,
            no_valid_neighbors,
        })
    }

    pub fn forward<'t>(
        &self,
        f: &Forward<'t, '_>,
        scene: &Scene,
        sample_seed: u64,
    ) -> Result<ForwardBundle<'t>> {
        let spatial_tokens = self.spatial.encode(f, &scene.map)?.values;
        let samples = self.make_samples(f, scene, spatial_tokens, sample_seed)?;
        self.forward_with_samples(f, scene, spatial_tokens, samples)
    }

    /// Inference: run a forward pass on a fresh tape and snapshot values.
    pub fn predict(&self, scene: &Scene, sample_seed: u64) -> Result<Prediction> {
        scene.validate()?;
        let tape = Tape::new();
        let f = Forward::new(&tape, &self.params);
        let bundle = self.forward(&f, scene, sample_seed)?;
        let mixture = to_mixture(&bundle.decoded)?;
        crate::encoders::check_finite(&bundle.factual_token.value(), "composite token")?;
        Ok(Prediction {
            mixture,
            factual_token: bundle.factual_token.value(),
            counterfactual_token: bundle.counterfactual_token.map(|v| v.value()),
            counterfactual_queries: bundle
                .counterfactual_queries
                .iter()
                .map(|v| v.value())
                .collect(),
            fusion_counterfactual: bundle.fusion_counterfactual.map(|v| v.value()),
            samples: bundle.samples.iter().map(|v| v.value()).collect(),
        })
    }
}

/// Output-space combination: subtract counterfactual offsets from factual
/// offsets; σ, ρ and maneuver probabilities stay factual.
fn subtract_decoded<'t>(
    f: &Forward<'t, '_>,
    factual: DecodedVars<'t>,
    counterfactual: &DecodedVars<'t>,
    origin: [f64; 2],
) -> DecodedVars<'t> {
    let origin_var = f
        .tape
        .constant(Tensor::from_vec(1, 2, alloc::vec![origin[0], origin[1]]));
    let modes = factual
        .modes
        .into_iter()
        .zip(&counterfactual.modes)
        .map(|(fm, cm)| {
            let mu_offsets = fm.mu_offsets.sub(cm.mu_offsets);
            ModeVars {
                mu: mu_offsets.add_row(origin_var),
                mu_offsets,
                sigma: fm.sigma,
                rho: fm.rho,
            }
        })
        .collect();
    DecodedVars {
        probs: factual.probs,
        modes,
    }
}

/// Output-space backdoor averaging: mean offsets/σ/ρ and renormalized mean
/// probabilities over the per-sample decodes.
fn average_decoded<'t>(
    f: &Forward<'t, '_>,
    decodes: Vec<DecodedVars<'t>>,
    origin: [f64; 2],
) -> DecodedVars<'t> {
    assert!(!decodes.is_empty());
    if decodes.len() == 1 {
        return decodes.into_iter().next().unwrap();
    }
    let origin_var = f
        .tape
        .constant(Tensor::from_vec(1, 2, alloc::vec![origin[0], origin[1]]));
    let k = decodes[0].modes.len();
    let probs_mean = Var::mean_stack(&decodes.iter().map(|d| d.probs).collect::<Vec<_>>());
    let total = probs_mean.sum(); // 1×1
    let ones = f.tape.constant(Tensor::filled(1, k, 1.0));
    let probs = probs_mean.div(total.matmul(ones));
    let modes = (0..k)
        .map(|mode| {
            let offsets = Var::mean_stack(
                &decodes
                    .iter()
                    .map(|d| d.modes[mode].mu_offsets)
                    .collect::<Vec<_>>(),
            );
            let sigma = Var::mean_stack(
                &decodes
                    .iter()
                    .map(|d| d.modes[mode].sigma)
                    .collect::<Vec<_>>(),
            );
            let rho = Var::mean_stack(
                &decodes.iter().map(|d| d.modes[mode].rho).collect::<Vec<_>>(),
            );
            ModeVars {
                mu: offsets.add_row(origin_var),
                mu_offsets: offsets,
                sigma,
                rho,
            }
        })
        .collect();
    DecodedVars { probs, modes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GeneratorConfig;

    fn small_model_config() -> ModelConfig {
        let mut config = ModelConfig::default();
        config.encoders.token_dim = 16;
        config.encoders.bev_pool = 8;
        config.diffusion.steps = 8;
        config.diffusion.set_size = 2;
        config.fusion.refine_iters = 2;
        config
    }

    fn scenes(n: usize, seed: u64) -> Vec<Scene> {
        let gen = GeneratorConfig {
            bev_size: 16,
            ..GeneratorConfig::default()
        };
        crate::synthetic::generate_split(&gen, seed, "train", n, 0.7).unwrap()
    }

    #[test]
    fn forward_shapes_and_invariants() {
        let model =
            CausalPredictor::new(&small_model_config(), AblationToggles::default(), 3).unwrap();
        let scene = &scenes(1, 5)[0];
        let pred = model.predict(scene, 11).unwrap();
        assert_eq!(pred.mixture.modes(), 3);
        assert_eq!(pred.mixture.horizon(), scene.t_f);
        pred.mixture.validate().unwrap();
        assert_eq!(pred.samples.len(), 2);
        assert!(pred.counterfactual_token.is_some());
    }

    #[test]
    fn prediction_is_deterministic_per_seed() {
        let model =
            CausalPredictor::new(&small_model_config(), AblationToggles::default(), 3).unwrap();
        let scene = &scenes(1, 6)[0];
        let a = model.predict(scene, 7).unwrap();
        let b = model.predict(scene, 7).unwrap();
        assert_eq!(a.mixture, b.mixture);
        assert!(a.factual_token.bit_eq(&b.factual_token));
        let c = model.predict(scene, 8).unwrap();
        assert!(a.factual_token.max_abs_diff(&c.factual_token) > 0.0);
    }

    #[test]
    fn counterfactual_branch_is_history_invariant() {
        let model =
            CausalPredictor::new(&small_model_config(), AblationToggles::default(), 4).unwrap();
        let base = scenes(1, 9)[0].clone();
        let mut moved = base.clone();
        for t in 0..moved.history_len() {
            moved.target.trajectory.points[t][0] += 3.0;
            moved.target.trajectory.points[t][1] -= 1.5;
        }
        let a = model.predict(&base, 13).unwrap();
        let b = model.predict(&moved, 13).unwrap();
        let ca = a.counterfactual_token.unwrap();
        let cb = b.counterfactual_token.unwrap();
        assert!(ca.bit_eq(&cb), "counterfactual composite must ignore history");
        for (qa, qb) in a.counterfactual_queries.iter().zip(&b.counterfactual_queries) {
            assert!(qa.bit_eq(qb));
        }
        assert!(a
            .fusion_counterfactual
            .unwrap()
            .bit_eq(&b.fusion_counterfactual.unwrap()));
        // The factual branch must move.
        assert!(a.factual_token.max_abs_diff(&b.factual_token) > 0.0);
    }

    #[test]
    fn ablation_variants_run_and_reduce() {
        let scene = &scenes(1, 20)[0];
        for variant in [
            AblationVariant::A,
            AblationVariant::B,
            AblationVariant::C,
            AblationVariant::D,
            AblationVariant::E,
        ] {
            let model =
                CausalPredictor::new(&small_model_config(), variant.toggles(), 5).unwrap();
            let pred = model.predict(scene, 3).unwrap();
            pred.mixture.validate().unwrap();
            match variant {
                AblationVariant::D => {
                    assert_eq!(pred.samples.len(), 1, "D uses S^h directly");
                    assert!(pred.counterfactual_token.is_none());
                }
                _ => assert_eq!(pred.samples.len(), 2),
            }
        }
    }

    #[test]
    fn variant_toggle_map_matches_study_table() {
        assert_eq!(
            AblationVariant::A.toggles(),
            AblationToggles { bev: false, progressive: true, dual_scale: true, causal: true }
        );
        assert_eq!(
            AblationVariant::D.toggles(),
            AblationToggles { bev: true, progressive: true, dual_scale: true, causal: false }
        );
        assert_eq!(AblationVariant::E.toggles(), AblationToggles::default());
        assert!(AblationVariant::parse("b").is_ok());
        assert!(matches!(
            AblationVariant::parse("f"),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn output_space_modes_preserve_invariants() {
        let scene = &scenes(1, 30)[0];
        for (avg, comb) in [
            (AverageSpace::Output, CombineSpace::Token),
            (AverageSpace::Token, CombineSpace::Output),
            (AverageSpace::Output, CombineSpace::Output),
        ] {
            let mut config = small_model_config();
            config.fusion.average_space = avg;
            config.fusion.combine_space = comb;
            let model = CausalPredictor::new(&config, AblationToggles::default(), 6).unwrap();
            let pred = model.predict(scene, 2).unwrap();
            pred.mixture.validate().unwrap();
        }
    }

    #[test]
    fn fixed_per_scene_sampling_caches() {
        let mut config = small_model_config();
        config.diffusion.sample_mode = SampleMode::FixedPerScene;
        let model = CausalPredictor::new(&config, AblationToggles::default(), 7).unwrap();
        let scene = &scenes(1, 40)[0];
        let a = model.predict(scene, 100).unwrap();
        // Different sample seed, same scene: cache wins.
        let b = model.predict(scene, 999).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert!(sa.bit_eq(sb));
        }
    }
}
