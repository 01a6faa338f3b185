//! Targeted multi-view attention: the target token X^h queries each backdoor
//! spatial sample, the BEV tokens and the neighbor tokens independently; the
//! three views plus X^h itself are merged by an aggregation MLP into the
//! contextual target token X_attn^i.
//!
//! Masking is by exclusion: masked neighbor rows are gathered out before the
//! softmax, so they receive exactly zero weight rather than a large-negative
//! approximation. With every neighbor masked (or none present) the temporal
//! view is the zero vector and a flag is raised.

use alloc::vec::Vec;

use crate::autodiff::Var;
use crate::config::AttentionConfig;
use crate::error::CoreError;
use crate::nn::{Attention, Forward, LayerNorm, Mlp, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Result;

/// Contextual target token for one backdoor sample.
pub struct ContextToken<'t> {
    pub values: Var<'t>,
    /// 1-based index into the backdoor set.
    pub backdoor_index: usize,
    /// True when the temporal view saw no valid neighbors.
    pub no_valid_neighbors: bool,
}

/// One attention view's output: context vector plus weights for inspection.
pub struct ViewOutput<'t> {
    pub values: Var<'t>,
    /// Attention weight per key row (zeros at masked rows).
    pub weights: Tensor,
}

#[derive(Debug, Clone)]
pub struct MultiViewAttention {
    spatial: Attention,
    spatial_ln: LayerNorm,
    bev: Attention,
    bev_ln: LayerNorm,
    temporal: Attention,
    temporal_ln: LayerNorm,
    aggregate: Mlp,
    residual_ln: bool,
    dim: usize,
}

impl MultiViewAttention {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        config: &AttentionConfig,
        rng: &mut Rng,
    ) -> Self {
        MultiViewAttention {
            spatial: Attention::new(params, &alloc::format!("{name}.spatial"), dim, config.heads, rng),
            spatial_ln: LayerNorm::new(params, &alloc::format!("{name}.spatial_ln"), dim),
            bev: Attention::new(params, &alloc::format!("{name}.bev"), dim, config.heads, rng),
            bev_ln: LayerNorm::new(params, &alloc::format!("{name}.bev_ln"), dim),
            temporal: Attention::new(
                params,
                &alloc::format!("{name}.temporal"),
                dim,
                config.heads,
                rng,
            ),
            temporal_ln: LayerNorm::new(params, &alloc::format!("{name}.temporal_ln"), dim),
            aggregate: Mlp::new(
                params,
                &alloc::format!("{name}.aggregate"),
                4 * dim,
                2 * dim,
                dim,
                rng,
            ),
            residual_ln: config.residual_layer_norm,
            dim,
        }
    }

    fn finish<'t>(
        &self,
        f: &Forward<'t, '_>,
        xh: Var<'t>,
        raw: Var<'t>,
        ln: &LayerNorm,
    ) -> Var<'t> {
        let merged = xh.add(raw);
        if self.residual_ln {
            ln.forward(f, merged)
        } else {
            merged
        }
    }

    /// X^h attending over one backdoor spatial sample S^{h,i}.
    pub fn spatial_attention<'t>(
        &self,
        f: &Forward<'t, '_>,
        xh: Var<'t>,
        sample: Var<'t>,
    ) -> Result<ViewOutput<'t>> {
        if sample.shape().0 == 0 {
            return Err(CoreError::Attention(
                "spatial attention needs at least one key row".into(),
            ));
        }
        let (ctx, weights) = self.spatial.attend(f, xh, sample);
        Ok(ViewOutput {
            values: self.finish(f, xh, ctx, &self.spatial_ln),
            weights: weights.value(),
        })
    }

    /// X^h attending over the BEV tokens B^h.
    pub fn bev_attention<'t>(
        &self,
        f: &Forward<'t, '_>,
        xh: Var<'t>,
        bev_tokens: Var<'t>,
    ) -> Result<ViewOutput<'t>> {
        if bev_tokens.shape().0 == 0 {
            return Err(CoreError::Attention(
                "bev attention needs at least one key row".into(),
            ));
        }
        let (ctx, weights) = self.bev.attend(f, xh, bev_tokens);
        Ok(ViewOutput {
            values: self.finish(f, xh, ctx, &self.bev_ln),
            weights: weights.value(),
        })
    }

    /// X^h attending over neighbor tokens T^h under a row mask. An empty or
    /// fully masked neighborhood yields the zero context and a raised flag.
    pub fn temporal_attention<'t>(
        &self,
        f: &Forward<'t, '_>,
        xh: Var<'t>,
        neighbors: Var<'t>,
        mask: &[bool],
    ) -> Result<(ViewOutput<'t>, bool)> {
        let n = neighbors.shape().0;
        if mask.len() != n {
            return Err(CoreError::Attention(alloc::format!(
                "neighbor mask has {} entries for {} rows",
                mask.len(),
                n
            )));
        }
        let valid: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if valid.is_empty() {
            return Ok((
                ViewOutput {
                    values: f.tape.constant(Tensor::zeros(1, self.dim)),
                    weights: Tensor::zeros(1, n.max(1)),
                },
                true,
            ));
        }
        let d = neighbors.shape().1;
        let mut idx = Vec::with_capacity(valid.len() * d);
        for &row in &valid {
            for c in 0..d {
                idx.push((row * d + c) as i64);
            }
        }
        let kept = neighbors.gather(idx, valid.len(), d);
        let (ctx, weights) = self.temporal.attend(f, xh, kept);
        let kept_weights = weights.value();
        let mut full = Tensor::zeros(1, n);
        let heads = kept_weights.cols / valid.len();
        for (vi, &row) in valid.iter().enumerate() {
            // Average over heads for reporting.
            let mut w = 0.0;
            for h in 0..heads {
                w += kept_weights.data[h * valid.len() + vi];
            }
            full.data[row] = w / heads as f64;
        }
        Ok((
            ViewOutput {
                values: self.finish(f, xh, ctx, &self.temporal_ln),
                weights: full,
            },
            false,
        ))
    }

    /// Concatenate the three views with X^h and project back to D.
    pub fn aggregate_context<'t>(
        &self,
        f: &Forward<'t, '_>,
        spatial: Var<'t>,
        bev: Var<'t>,
        temporal: Var<'t>,
        xh: Var<'t>,
    ) -> Var<'t> {
        let merged = Var::concat_cols(&[spatial, bev, temporal, xh]);
        self.aggregate.forward(f, merged)
    }

    /// Full contextual token for backdoor sample `index` (1-based).
    #[allow(clippy::too_many_arguments)]
    pub fn context_for_sample<'t>(
        &self,
        f: &Forward<'t, '_>,
        xh: Var<'t>,
        sample: Var<'t>,
        bev_tokens: Var<'t>,
        neighbors: Var<'t>,
        mask: &[bool],
        index: usize,
    ) -> Result<ContextToken<'t>> {
        let xs = self.spatial_attention(f, xh, sample)?;
        let xb = self.bev_attention(f, xh, bev_tokens)?;
        let (xt, empty) = self.temporal_attention(f, xh, neighbors, mask)?;
        Ok(ContextToken {
            values: self.aggregate_context(f, xs.values, xb.values, xt.values, xh),
            backdoor_index: index,
            no_valid_neighbors: empty,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn setup(dim: usize, seed: u64) -> (ParamSet, MultiViewAttention) {
        let mut rng = Rng::from_seed(seed);
        let mut params = ParamSet::new();
        let mv = MultiViewAttention::new(
            &mut params,
            "mview",
            dim,
            &AttentionConfig::default(),
            &mut rng,
        );
        (params, mv)
    }

    fn randn(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = Rng::from_seed(seed);
        Tensor::randn(r, c, 1.0, &mut rng)
    }

    #[test]
    fn single_key_gets_weight_one() {
        let (params, mv) = setup(8, 1);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let xh = tape.constant(randn(1, 8, 2));
        let key = tape.constant(randn(1, 8, 3));
        let out = mv.spatial_attention(&f, xh, key).unwrap();
        assert_eq!(out.weights.data, alloc::vec![1.0]);
        assert_eq!(out.values.shape(), (1, 8));
    }

    #[test]
    fn identical_keys_split_weight_evenly() {
        let (params, mv) = setup(8, 4);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let xh = tape.constant(randn(1, 8, 5));
        let row = randn(1, 8, 6);
        let mut two = Tensor::zeros(2, 8);
        two.data[..8].copy_from_slice(&row.data);
        two.data[8..].copy_from_slice(&row.data);
        let out = mv.spatial_attention(&f, xh, tape.constant(two)).unwrap();
        assert_eq!(out.weights.data[0], 0.5);
        assert_eq!(out.weights.data[1], 0.5);
    }

    #[test]
    fn weights_sum_to_one() {
        let (params, mv) = setup(8, 7);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let xh = tape.constant(randn(1, 8, 8));
        let keys = tape.constant(randn(7, 8, 9));
        let out = mv.bev_attention(&f, xh, keys).unwrap();
        let sum: f64 = out.weights.data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_spatial_keys_are_an_attention_error() {
        let (params, mv) = setup(8, 10);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let xh = tape.constant(randn(1, 8, 11));
        let empty = tape.constant(Tensor::zeros(0, 8));
        assert!(matches!(
            mv.spatial_attention(&f, xh, empty),
            Err(CoreError::Attention(_))
        ));
    }

    #[test]
    fn mask_excludes_rows_exactly() {
        let (params, mv) = setup(8, 12);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let xh = tape.constant(randn(1, 8, 13));
        let neighbors = tape.constant(randn(4, 8, 14));
        // Only row 2 unmasked: equals single-key attention over that row.
        let (masked, flag) = mv
            .temporal_attention(&f, xh, neighbors, &[false, false, true, false])
            .unwrap();
        assert!(!flag);
        assert_eq!(masked.weights.data[2], 1.0);
        assert_eq!(
            masked.weights.data[0] + masked.weights.data[1] + masked.weights.data[3],
            0.0
        );
        let single = tape.constant(Tensor::from_vec(
            1,
            8,
            neighbors.value().row(2).to_vec(),
        ));
        let (direct, _) = mv
            .temporal_attention(&f, xh, single, &[true])
            .unwrap();
        assert!(masked.values.value().bit_eq(&direct.values.value()));
    }

    #[test]
    fn all_masked_or_empty_returns_zero_and_flag() {
        let (params, mv) = setup(8, 15);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let xh = tape.constant(randn(1, 8, 16));
        let neighbors = tape.constant(randn(3, 8, 17));
        let (out, flag) = mv
            .temporal_attention(&f, xh, neighbors, &[false, false, false])
            .unwrap();
        assert!(flag);
        assert_eq!(out.values.value(), Tensor::zeros(1, 8));
        let none = tape.constant(Tensor::zeros(0, 8));
        let (out0, flag0) = mv.temporal_attention(&f, xh, none, &[]).unwrap();
        assert!(flag0);
        assert_eq!(out0.values.value(), Tensor::zeros(1, 8));
    }

    #[test]
    fn unmasked_permutation_leaves_output_unchanged() {
        let (params, mv) = setup(8, 18);
        let xh_t = randn(1, 8, 19);
        let rows = randn(3, 8, 20);
        let run = |order: [usize; 3]| {
            let tape = Tape::new();
            let f = Forward::new(&tape, &params);
            let xh = tape.constant(xh_t.clone());
            let mut permuted = Tensor::zeros(3, 8);
            for (dst, &src) in order.iter().enumerate() {
                for c in 0..8 {
                    permuted.set(dst, c, rows.at(src, c));
                }
            }
            let (out, _) = mv
                .temporal_attention(&f, xh, tape.constant(permuted), &[true; 3])
                .unwrap();
            out.values.value()
        };
        let a = run([0, 1, 2]);
        let b = run([2, 0, 1]);
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn aggregate_shape_and_determinism() {
        let (params, mv) = setup(8, 21);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let parts: Vec<Var> = (0..4)
            .map(|i| tape.constant(randn(1, 8, 22 + i)))
            .collect();
        let a = mv
            .aggregate_context(&f, parts[0], parts[1], parts[2], parts[3])
            .value();
        assert_eq!(a.shape(), (1, 8));
        let tape2 = Tape::new();
        let f2 = Forward::new(&tape2, &params);
        let parts2: Vec<Var> = (0..4)
            .map(|i| tape2.constant(randn(1, 8, 22 + i)))
            .collect();
        let b = mv
            .aggregate_context(&f2, parts2[0], parts2[1], parts2[2], parts2[3])
            .value();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn aggregate_has_no_dead_branch() {
        // Finite-difference probe: each input branch moves the output.
        let (params, mv) = setup(8, 30);
        let base: Vec<Tensor> = (0..4).map(|i| randn(1, 8, 40 + i as u64)).collect();
        let eval = |inputs: &[Tensor]| {
            let tape = Tape::new();
            let f = Forward::new(&tape, &params);
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            mv.aggregate_context(&f, vars[0], vars[1], vars[2], vars[3])
                .squared_norm()
                .item()
        };
        let center = eval(&base);
        for branch in 0..4 {
            let mut moved = base.clone();
            moved[branch].data[3] += 1e-3;
            let delta = (eval(&moved) - center).abs();
            assert!(delta > 1e-12, "branch {branch} is dead");
        }
    }

    #[test]
    fn context_is_sensitive_to_backdoor_sample() {
        let (params, mv) = setup(8, 50);
        let xh_t = randn(1, 8, 51);
        let bev_t = randn(4, 8, 52);
        let nbr_t = randn(2, 8, 53);
        let sample = randn(3, 8, 54);
        let run = |s: &Tensor| {
            let tape = Tape::new();
            let f = Forward::new(&tape, &params);
            let ctx = mv
                .context_for_sample(
                    &f,
                    tape.constant(xh_t.clone()),
                    tape.constant(s.clone()),
                    tape.constant(bev_t.clone()),
                    tape.constant(nbr_t.clone()),
                    &[true, true],
                    1,
                )
                .unwrap();
            ctx.values.value()
        };
        let a = run(&sample);
        let perturbed = sample.map(|v| v + 0.1);
        let b = run(&perturbed);
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn context_gradients_match_fd_end_to_end() {
        // Gradient of ‖X_attn‖² w.r.t. the neighbor tokens via the full
        // attention + aggregation path.
        let (params, mv) = setup(8, 60);
        let xh_t = randn(1, 8, 61);
        let bev_t = randn(4, 8, 62);
        let sample = randn(3, 8, 63);
        let nbr = randn(2, 8, 64);
        let eval = |n: &Tensor, want_grad: bool| -> (f64, Option<Tensor>) {
            let tape = Tape::new();
            let f = Forward::new(&tape, &params);
            let leaf = tape.leaf(n.clone());
            let ctx = mv
                .context_for_sample(
                    &f,
                    tape.constant(xh_t.clone()),
                    tape.constant(sample.clone()),
                    tape.constant(bev_t.clone()),
                    leaf,
                    &[true, true],
                    1,
                )
                .unwrap();
            let loss = ctx.values.squared_norm();
            if want_grad {
                let g = tape.backward(loss);
                (loss.item(), Some(g.of(leaf)))
            } else {
                (loss.item(), None)
            }
        };
        let (_, grad) = eval(&nbr, true);
        let grad = grad.unwrap();
        let step = 1e-3;
        for i in 0..nbr.len() {
            let mut plus = nbr.clone();
            plus.data[i] += step;
            let mut minus = nbr.clone();
            minus.data[i] -= step;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * step);
            let a = grad.data[i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!(
                (a - fd).abs() / denom < 1e-4,
                "elem {i}: analytic {a} vs fd {fd}"
            );
        }
    }
}
