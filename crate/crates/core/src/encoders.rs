//! Token extraction: spatial, temporal and BEV encoders.
//!
//! * Spatial: a shared GRU reads each polyline point-by-point, then one graph
//!   attention layer mixes information across polylines (fully connected, so
//!   the result is permutation-equivariant). Output S^h is N_m×D, squashed
//!   to (-1, 1), which keeps the diffusion model's data range predictable.
//! * Temporal: one GRU over per-frame agent state `[x, y, extras.., valid]`
//!   shared between the target and all neighbors; rows are independent
//!   sequences. Masked frames contribute the zero sentinel (value zero AND
//!   valid bit zero, exactly what frame dropping writes).
//! * BEV: the three semantic layers are average-pooled onto a fixed grid,
//!   convolved with kernels of several sizes (im2col + matmul), fused and
//!   pooled to a pyramid of `grid²` tokens.

use alloc::vec::Vec;

use crate::autodiff::Var;
use crate::config::EncoderConfig;
use crate::error::CoreError;
use crate::nn::{Forward, GruCell, Linear, ParamSet};
use crate::rng::Rng;
use crate::scene::{AgentTrack, BevRaster, MapPolyline, MAP_POINT_WIDTH};
use crate::tensor::Tensor;
use crate::Result;

/// Spatial tokens S^h: one D-row per polyline.
pub struct SpatialTokens<'t> {
    pub values: Var<'t>,
}

/// Temporal tokens: target X^h (1×D) and neighbors T^h (N_a×D, possibly
/// zero rows). `neighbor_mask[i]` is false for padding rows.
pub struct TemporalTokens<'t> {
    pub target: Var<'t>,
    pub neighbors: Var<'t>,
    pub neighbor_mask: Vec<bool>,
}

/// BEV tokens B^h: pyramid_grid² rows of D.
pub struct BevTokens<'t> {
    pub values: Var<'t>,
}

pub fn check_finite(value: &Tensor, what: &str) -> Result<()> {
    if value.all_finite() {
        Ok(())
    } else {
        Err(CoreError::numerical(alloc::format!(
            "{what}: non-finite values in forward pass"
        )))
    }
}

/// Graph attention across polyline tokens. Scores are tanh(sᵢ + dⱼ) — a
/// smooth stand-in for the usual kinked scoring, so finite-difference
/// gradient checks stay tight.
#[derive(Debug, Clone)]
pub struct GraphAttention {
    w: Linear,
    a_src: Linear,
    a_dst: Linear,
    w_out: Linear,
}

impl GraphAttention {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, rng: &mut Rng) -> Self {
        GraphAttention {
            w: Linear::new(params, &alloc::format!("{name}.w"), dim, dim, false, rng),
            a_src: Linear::new(params, &alloc::format!("{name}.a_src"), dim, 1, false, rng),
            a_dst: Linear::new(params, &alloc::format!("{name}.a_dst"), dim, 1, false, rng),
            w_out: Linear::new(params, &alloc::format!("{name}.w_out"), dim, dim, false, rng),
        }
    }

    pub fn forward<'t>(&self, f: &Forward<'t, '_>, h: Var<'t>) -> Var<'t> {
        let n = h.shape().0;
        let hw = self.w.forward(f, h);
        let s = self.a_src.forward(f, hw); // N×1
        let d = self.a_dst.forward(f, hw); // N×1
        let ones_row = f.tape.constant(Tensor::filled(1, n, 1.0));
        let ones_col = f.tape.constant(Tensor::filled(n, 1, 1.0));
        let scores = s.matmul(ones_row).add(ones_col.matmul(d.t())).tanh();
        let attn = scores.softmax_rows();
        h.add(self.w_out.forward(f, attn.matmul(hw)))
    }
}

#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    gru: GruCell,
    gat: GraphAttention,
}

impl SpatialEncoder {
    pub fn new(params: &mut ParamSet, name: &str, config: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = config.token_dim;
        SpatialEncoder {
            gru: GruCell::new(params, &alloc::format!("{name}.gru"), MAP_POINT_WIDTH, d, rng),
            gat: GraphAttention::new(params, &alloc::format!("{name}.gat"), d, rng),
        }
    }

    /// Encode from per-point step matrices (each N_m×W_m); exposed so tests
    /// can differentiate with respect to raw coordinates.
    pub fn encode_steps<'t>(&self, f: &Forward<'t, '_>, steps: &[Var<'t>]) -> Var<'t> {
        let h = self.gru.run(f, steps);
        self.gat.forward(f, h).tanh()
    }

    pub fn encode<'t>(
        &self,
        f: &Forward<'t, '_>,
        map: &[MapPolyline],
    ) -> Result<SpatialTokens<'t>> {
        if map.is_empty() {
            return Err(CoreError::Encoding(
                "spatial encoder needs at least one polyline (use a null placeholder)".into(),
            ));
        }
        let n_points = map[0].points.len();
        if map.iter().any(|p| p.points.len() != n_points) {
            return Err(CoreError::Encoding(
                "polylines must share one point count".into(),
            ));
        }
        let mut steps = Vec::with_capacity(n_points);
        for t in 0..n_points {
            let mut step = Tensor::zeros(map.len(), MAP_POINT_WIDTH);
            for (i, poly) in map.iter().enumerate() {
                for a in 0..MAP_POINT_WIDTH {
                    step.set(i, a, poly.points[t][a]);
                }
            }
            steps.push(f.tape.constant(step));
        }
        Ok(SpatialTokens {
            values: self.encode_steps(f, &steps),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    gru: GruCell,
    state_width: usize,
}

impl TemporalEncoder {
    pub fn new(params: &mut ParamSet, name: &str, config: &EncoderConfig, rng: &mut Rng) -> Self {
        // Input per frame: state attributes plus the validity bit.
        TemporalEncoder {
            gru: GruCell::new(
                params,
                &alloc::format!("{name}.gru"),
                config.agent_state_width + 1,
                config.token_dim,
                rng,
            ),
            state_width: config.agent_state_width,
        }
    }

    /// Final hidden state per row from step matrices (each rows×(W_a+1)).
    pub fn encode_steps<'t>(&self, f: &Forward<'t, '_>, steps: &[Var<'t>]) -> Var<'t> {
        self.gru.run(f, steps)
    }

    /// Per-frame input row: positions, extras, validity bit; masked frames
    /// contribute all-zero rows.
    fn step_row(&self, track: &AgentTrack, frame: usize, out: &mut [f64]) {
        let valid = track.trajectory.valid[frame];
        if !valid {
            for v in out.iter_mut() {
                *v = 0.0;
            }
            return;
        }
        out[0] = track.trajectory.points[frame][0];
        out[1] = track.trajectory.points[frame][1];
        let extras = track.extras.as_ref();
        for a in 2..self.state_width {
            out[a] = extras
                .and_then(|e| e[frame].get(a - 2).copied())
                .unwrap_or(0.0);
        }
        out[self.state_width] = 1.0;
    }

    /// Encode target and neighbor histories over the first `history_len`
    /// frames. `zero_target_history` severs the target input for the
    /// counterfactual branch.
    pub fn encode<'t>(
        &self,
        f: &Forward<'t, '_>,
        target: &AgentTrack,
        neighbors: &[AgentTrack],
        history_len: usize,
        zero_target_history: bool,
    ) -> Result<TemporalTokens<'t>> {
        if history_len == 0 {
            return Err(CoreError::Encoding("temporal encoder: empty history".into()));
        }
        if target.trajectory.len() < history_len
            || neighbors.iter().any(|n| n.trajectory.len() < history_len)
        {
            return Err(CoreError::Encoding(
                "temporal encoder: track shorter than history".into(),
            ));
        }
        let rows = 1 + neighbors.len();
        let width = self.state_width + 1;
        let mut steps = Vec::with_capacity(history_len);
        for frame in 0..history_len {
            let mut step = Tensor::zeros(rows, width);
            if !zero_target_history {
                self.step_row(target, frame, &mut step.data[0..width]);
            }
            for (i, n) in neighbors.iter().enumerate() {
                let s = (i + 1) * width;
                self.step_row(n, frame, &mut step.data[s..s + width]);
            }
            steps.push(f.tape.constant(step));
        }
        let h = self.encode_steps(f, &steps);
        let target_token = h.row(0);
        let neighbor_tokens = if neighbors.is_empty() {
            f.tape.constant(Tensor::zeros(0, self.gru.hidden_dim))
        } else {
            h.slice_rows(1, neighbors.len())
        };
        Ok(TemporalTokens {
            target: target_token,
            neighbors: neighbor_tokens,
            neighbor_mask: alloc::vec![true; neighbors.len()],
        })
    }
}

/// Average-pooling matrix from an h×w grid onto a p×p grid.
fn pool_matrix(h: usize, w: usize, p: usize) -> Tensor {
    let mut m = Tensor::zeros(p * p, h * w);
    for pr in 0..p {
        for pc in 0..p {
            let r0 = pr * h / p;
            let r1 = (((pr + 1) * h / p).max(r0 + 1)).min(h);
            let c0 = pc * w / p;
            let c1 = (((pc + 1) * w / p).max(c0 + 1)).min(w);
            let weight = 1.0 / ((r1 - r0) * (c1 - c0)) as f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    m.set(pr * p + pc, r * w + c, weight);
                }
            }
        }
    }
    m
}

/// im2col gather indices for a p×p grid, k×k kernel, same padding.
fn im2col_indices(p: usize, k: usize) -> Vec<i64> {
    let half = (k / 2) as isize;
    let mut idx = Vec::with_capacity(p * p * k * k);
    for r in 0..p as isize {
        for c in 0..p as isize {
            for dr in -half..=half {
                for dc in -half..=half {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= p as isize || cc >= p as isize {
                        idx.push(-1);
                    } else {
                        idx.push((rr * p as isize + cc) as i64);
                    }
                }
            }
        }
    }
    idx
}

#[derive(Debug, Clone)]
pub struct BevEncoder {
    /// One conv filter bank per (semantic layer, kernel size).
    convs: Vec<Linear>,
    proj: Linear,
    kernel_sizes: Vec<usize>,
    pool_side: usize,
    grid: usize,
    channels: usize,
}

impl BevEncoder {
    pub fn new(params: &mut ParamSet, name: &str, config: &EncoderConfig, rng: &mut Rng) -> Self {
        let mut convs = Vec::new();
        for layer in ["agent", "map", "raster"] {
            for &k in &config.kernel_sizes {
                convs.push(Linear::new(
                    params,
                    &alloc::format!("{name}.conv_{layer}_{k}"),
                    k * k,
                    config.bev_channels,
                    true,
                    rng,
                ));
            }
        }
        let fused = 3 * config.kernel_sizes.len() * config.bev_channels;
        BevEncoder {
            convs,
            proj: Linear::new(
                params,
                &alloc::format!("{name}.proj"),
                fused,
                config.token_dim,
                true,
                rng,
            ),
            kernel_sizes: config.kernel_sizes.clone(),
            pool_side: config.bev_pool,
            grid: config.pyramid_grid,
            channels: config.bev_channels,
        }
    }

    /// Tokens per raster. `layers` are flattened h*w×1 columns.
    pub fn encode_layers<'t>(
        &self,
        f: &Forward<'t, '_>,
        layers: [Var<'t>; 3],
        h: usize,
        w: usize,
    ) -> Var<'t> {
        let p = self.pool_side.min(h).min(w);
        let pool = f.tape.constant(pool_matrix(h, w, p));
        let mut features = Vec::new();
        for (li, layer) in layers.into_iter().enumerate() {
            let pooled = pool.matmul(layer); // p²×1
            for (ki, &k) in self.kernel_sizes.iter().enumerate() {
                let cols = im2col_indices(p, k);
                let patches = pooled.gather(cols, p * p, k * k);
                let conv = &self.convs[li * self.kernel_sizes.len() + ki];
                features.push(conv.forward(f, patches).tanh()); // p²×C
            }
        }
        let fused = Var::concat_cols(&features); // p²×(3·|k|·C)
        let g = self.grid.min(p);
        let pyramid = f.tape.constant(pool_matrix(p, p, g));
        let pooled = pyramid.matmul(fused); // g²×fused
        self.proj.forward(f, pooled).tanh()
    }

    pub fn encode<'t>(&self, f: &Forward<'t, '_>, bev: &BevRaster) -> Result<BevTokens<'t>> {
        bev.validate("bev encoder input")
            .map_err(|e| CoreError::validation(alloc::format!("{e}")))?;
        let (h, w) = (bev.height(), bev.width());
        let flat = |grid: &Vec<Vec<f64>>| -> Tensor {
            let mut t = Tensor::zeros(h * w, 1);
            for (r, row) in grid.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    t.data[r * w + c] = v;
                }
            }
            t
        };
        let layers = [
            f.tape.constant(flat(&bev.agent)),
            f.tape.constant(flat(&bev.map)),
            f.tape.constant(flat(&bev.raster)),
        ];
        Ok(BevTokens {
            values: self.encode_layers(f, layers, h, w),
        })
    }

    pub fn token_count(&self) -> usize {
        self.grid * self.grid
    }

    pub fn fused_width(&self) -> usize {
        3 * self.kernel_sizes.len() * self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::config::GeneratorConfig;
    use crate::scene::Scene;

    fn encoder_config(d: usize) -> EncoderConfig {
        EncoderConfig {
            token_dim: d,
            ..EncoderConfig::default()
        }
    }

    fn polyline(id: i64, pts: &[(f64, f64)]) -> MapPolyline {
        MapPolyline {
            polyline_id: id,
            points: pts.iter().map(|&(x, y)| [x, y, 1.0, id as f64]).collect(),
        }
    }

    fn sample_map(n: usize) -> Vec<MapPolyline> {
        (0..n)
            .map(|i| {
                polyline(
                    i as i64,
                    &[
                        (0.0 + i as f64, 0.0),
                        (1.0 + i as f64, 0.5),
                        (2.0 + i as f64, 1.5),
                    ],
                )
            })
            .collect()
    }

    #[test]
    fn spatial_shape_contract() {
        let mut rng = Rng::from_seed(1);
        let mut params = ParamSet::new();
        let enc = SpatialEncoder::new(&mut params, "spatial", &encoder_config(32), &mut rng);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let tokens = enc.encode(&f, &sample_map(3)).unwrap();
        assert_eq!(tokens.values.shape(), (3, 32));
        assert!(tokens.values.value().all_finite());
    }

    #[test]
    fn spatial_rejects_empty_map() {
        let mut rng = Rng::from_seed(1);
        let mut params = ParamSet::new();
        let enc = SpatialEncoder::new(&mut params, "spatial", &encoder_config(8), &mut rng);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        assert!(matches!(enc.encode(&f, &[]), Err(CoreError::Encoding(_))));
    }

    #[test]
    fn spatial_permutation_equivariance() {
        let mut rng = Rng::from_seed(2);
        let mut params = ParamSet::new();
        let enc = SpatialEncoder::new(&mut params, "spatial", &encoder_config(16), &mut rng);
        let map = sample_map(4);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let base = enc.encode(&f, &map).unwrap().values.value();
        let permuted: Vec<MapPolyline> =
            [2usize, 0, 3, 1].iter().map(|&i| map[i].clone()).collect();
        let tape2 = Tape::new();
        let f2 = Forward::new(&tape2, &params);
        let perm = enc.encode(&f2, &permuted).unwrap().values.value();
        for (out_row, &src_row) in [2usize, 0, 3, 1].iter().enumerate() {
            for c in 0..16 {
                assert!(
                    (perm.at(out_row, c) - base.at(src_row, c)).abs() < 1e-6,
                    "row {out_row} col {c}"
                );
            }
        }
    }

    #[test]
    fn spatial_duplicate_polyline_rows_match() {
        let mut rng = Rng::from_seed(3);
        let mut params = ParamSet::new();
        let enc = SpatialEncoder::new(&mut params, "spatial", &encoder_config(16), &mut rng);
        let mut map = sample_map(3);
        map.push(map[1].clone());
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let out = enc.encode(&f, &map).unwrap().values.value();
        for c in 0..16 {
            assert!((out.at(1, c) - out.at(3, c)).abs() < 1e-12);
        }
    }

    fn track(xs: &[f64]) -> AgentTrack {
        AgentTrack::vehicle(xs.iter().map(|&x| [x, 0.5 * x]).collect())
    }

    #[test]
    fn temporal_no_neighbors() {
        let mut rng = Rng::from_seed(4);
        let mut params = ParamSet::new();
        let enc = TemporalEncoder::new(&mut params, "temporal", &encoder_config(16), &mut rng);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let tokens = enc
            .encode(&f, &track(&[0.0, 1.0, 2.0, 3.0]), &[], 4, false)
            .unwrap();
        assert_eq!(tokens.target.shape(), (1, 16));
        assert_eq!(tokens.neighbors.shape(), (0, 16));
        assert!(tokens.neighbor_mask.is_empty());
    }

    #[test]
    fn temporal_rows_permute_with_neighbors() {
        let mut rng = Rng::from_seed(5);
        let mut params = ParamSet::new();
        let enc = TemporalEncoder::new(&mut params, "temporal", &encoder_config(16), &mut rng);
        let target = track(&[0.0, 1.0, 2.0, 3.0]);
        let n1 = track(&[5.0, 6.0, 7.0, 8.0]);
        let n2 = track(&[-1.0, -2.0, -3.0, -4.0]);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let a = enc
            .encode(&f, &target, &[n1.clone(), n2.clone()], 4, false)
            .unwrap()
            .neighbors
            .value();
        let tape2 = Tape::new();
        let f2 = Forward::new(&tape2, &params);
        let b = enc
            .encode(&f2, &target, &[n2, n1], 4, false)
            .unwrap()
            .neighbors
            .value();
        for c in 0..16 {
            assert_eq!(a.at(0, c).to_bits(), b.at(1, c).to_bits());
            assert_eq!(a.at(1, c).to_bits(), b.at(0, c).to_bits());
        }
    }

    #[test]
    fn temporal_zero_history_is_track_independent() {
        let mut rng = Rng::from_seed(6);
        let mut params = ParamSet::new();
        let enc = TemporalEncoder::new(&mut params, "temporal", &encoder_config(16), &mut rng);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let a = enc
            .encode(&f, &track(&[1.0, 4.0, 9.0]), &[], 3, true)
            .unwrap()
            .target
            .value();
        let tape2 = Tape::new();
        let f2 = Forward::new(&tape2, &params);
        let b = enc
            .encode(&f2, &track(&[-7.0, 0.5, 2.0]), &[], 3, true)
            .unwrap()
            .target
            .value();
        assert!(a.bit_eq(&b));
    }

    fn tiny_bev(h: usize, w: usize) -> BevRaster {
        let mut bev = BevRaster::zeros(h, w, 0.5);
        bev.agent[h / 2][w / 2] = 1.0;
        bev.map[h / 3][w / 3] = 0.7;
        bev.raster[1][1] = 0.5;
        bev
    }

    #[test]
    fn bev_shape_contract() {
        let mut rng = Rng::from_seed(7);
        let mut params = ParamSet::new();
        let config = encoder_config(32);
        let enc = BevEncoder::new(&mut params, "bev", &config, &mut rng);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let tokens = enc.encode(&f, &tiny_bev(64, 64)).unwrap();
        assert_eq!(tokens.values.shape(), (16, 32));
    }

    #[test]
    fn bev_zero_raster_gives_bias_only_response() {
        let mut rng = Rng::from_seed(8);
        let mut params = ParamSet::new();
        let config = encoder_config(16);
        let enc = BevEncoder::new(&mut params, "bev", &config, &mut rng);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let a = enc.encode(&f, &BevRaster::zeros(32, 32, 0.5)).unwrap().values.value();
        // A second all-zero raster at different resolution metadata.
        let tape2 = Tape::new();
        let f2 = Forward::new(&tape2, &params);
        let b = enc.encode(&f2, &BevRaster::zeros(32, 32, 1.0)).unwrap().values.value();
        assert!(a.bit_eq(&b));
        // Scaling intensities by 1.0 is the identity.
        let bev = tiny_bev(32, 32);
        let tape3 = Tape::new();
        let f3 = Forward::new(&tape3, &params);
        let c = enc.encode(&f3, &bev).unwrap().values.value();
        let tape4 = Tape::new();
        let f4 = Forward::new(&tape4, &params);
        let d = enc.encode(&f4, &bev.clone()).unwrap().values.value();
        assert!(c.bit_eq(&d));
    }

    #[test]
    fn bev_rejects_mismatched_layers() {
        let mut rng = Rng::from_seed(9);
        let mut params = ParamSet::new();
        let enc = BevEncoder::new(&mut params, "bev", &encoder_config(8), &mut rng);
        let tape = Tape::new();
        let f = Forward::new(&tape, &params);
        let mut bev = tiny_bev(16, 16);
        bev.map.pop();
        assert!(matches!(
            enc.encode(&f, &bev),
            Err(CoreError::Validation(_))
        ));
    }

    #[test]
    fn encoders_finite_on_many_random_scenes() {
        // Spec invariant: no NaN/Inf after forward on 1000 random scenes.
        let mut rng = Rng::from_seed(10);
        let mut params = ParamSet::new();
        let config = encoder_config(16);
        let spatial = SpatialEncoder::new(&mut params, "spatial", &config, &mut rng);
        let temporal = TemporalEncoder::new(&mut params, "temporal", &config, &mut rng);
        let bev = BevEncoder::new(&mut params, "bev", &config, &mut rng);
        let gen = GeneratorConfig {
            train_scenes: 1000,
            bev_size: 16,
            ..GeneratorConfig::default()
        };
        let scenes: Vec<Scene> =
            crate::synthetic::generate_split(&gen, 77, "train", 1000, 0.5).unwrap();
        for scene in &scenes {
            let tape = Tape::new();
            let f = Forward::new(&tape, &params);
            let s = spatial.encode(&f, &scene.map).unwrap();
            let t = temporal
                .encode(&f, &scene.target, &scene.neighbors, scene.history_len(), false)
                .unwrap();
            let b = bev.encode(&f, &scene.bev).unwrap();
            check_finite(&s.values.value(), "spatial").unwrap();
            check_finite(&t.target.value(), "temporal target").unwrap();
            check_finite(&t.neighbors.value(), "temporal neighbors").unwrap();
            check_finite(&b.values.value(), "bev").unwrap();
        }
    }

    /// Input-gradient check for one encoder output against central finite
    /// differences (double precision, small D).
    #[test]
    fn spatial_input_gradients_match_fd() {
        let mut rng = Rng::from_seed(11);
        let mut params = ParamSet::new();
        let enc = SpatialEncoder::new(&mut params, "spatial", &encoder_config(8), &mut rng);
        let n_m = 2;
        let n_pts = 3;
        let mut flat = Tensor::randn(n_m * n_pts, MAP_POINT_WIDTH, 0.8, &mut rng);
        // Integer-ish attribute columns.
        for r in 0..n_m * n_pts {
            flat.set(r, 2, 1.0);
            flat.set(r, 3, (r % n_m) as f64);
        }
        let eval = |input: &Tensor, want_grad: bool| -> (f64, Option<Tensor>) {
            let tape = Tape::new();
            let f = Forward::new(&tape, &params);
            let leaf = tape.leaf(input.clone());
            let steps: Vec<Var> = (0..n_pts)
                .map(|t| leaf.slice_rows(t * n_m, n_m))
                .collect();
            let loss = enc.encode_steps(&f, &steps).squared_norm();
            if want_grad {
                let grads = tape.backward(loss);
                (loss.item(), Some(grads.of(leaf)))
            } else {
                (loss.item(), None)
            }
        };
        let (_, grad) = eval(&flat, true);
        let grad = grad.unwrap();
        let step = 1e-3;
        for i in (0..flat.len()).step_by(3) {
            let mut plus = flat.clone();
            plus.data[i] += step;
            let mut minus = flat.clone();
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

    #[test]
    fn bev_input_gradients_match_fd() {
        let mut rng = Rng::from_seed(12);
        let mut params = ParamSet::new();
        let config = EncoderConfig {
            token_dim: 8,
            bev_pool: 6,
            pyramid_grid: 2,
            bev_channels: 2,
            kernel_sizes: alloc::vec![3],
            ..EncoderConfig::default()
        };
        let enc = BevEncoder::new(&mut params, "bev", &config, &mut rng);
        let (h, w) = (6, 6);
        let input = Tensor::randn(h * w, 1, 0.3, &mut rng).map(|v| 0.5 + 0.4 * crate::mathx::tanh(v));
        let eval = |x: &Tensor, want_grad: bool| -> (f64, Option<Tensor>) {
            let tape = Tape::new();
            let f = Forward::new(&tape, &params);
            let leaf = tape.leaf(x.clone());
            let zero = tape.constant(Tensor::zeros(h * w, 1));
            let loss = enc.encode_layers(&f, [leaf, zero, leaf], h, w).squared_norm();
            if want_grad {
                let grads = tape.backward(loss);
                (loss.item(), Some(grads.of(leaf)))
            } else {
                (loss.item(), None)
            }
        };
        let (_, grad) = eval(&input, true);
        let grad = grad.unwrap();
        let step = 1e-3;
        for i in (0..input.len()).step_by(5) {
            let mut plus = input.clone();
            plus.data[i] += step;
            let mut minus = input.clone();
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

    #[test]
    fn temporal_input_gradients_match_fd() {
        let mut rng = Rng::from_seed(13);
        let mut params = ParamSet::new();
        let enc = TemporalEncoder::new(&mut params, "temporal", &encoder_config(8), &mut rng);
        let rows = 2;
        let frames = 3;
        let width = 3; // W_a + valid bit
        let input = Tensor::randn(frames * rows, width, 0.8, &mut rng);
        let eval = |x: &Tensor, want_grad: bool| -> (f64, Option<Tensor>) {
            let tape = Tape::new();
            let f = Forward::new(&tape, &params);
            let leaf = tape.leaf(x.clone());
            let steps: Vec<Var> = (0..frames)
                .map(|t| leaf.slice_rows(t * rows, rows))
                .collect();
            let loss = enc.encode_steps(&f, &steps).squared_norm();
            if want_grad {
                let grads = tape.backward(loss);
                (loss.item(), Some(grads.of(leaf)))
            } else {
                (loss.item(), None)
            }
        };
        let (_, grad) = eval(&input, true);
        let grad = grad.unwrap();
        let step = 1e-3;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data[i] += step;
            let mut minus = input.clone();
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
