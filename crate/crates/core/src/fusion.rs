//! Cross-modal progressive fusion and dual-scale information fusion.
//!
//! Progressive fusion starts from a learned anchor-free query Q_0 (one row
//! per maneuver mode) and refines it T_rec times against the contextual
//! token: each iteration attends the queries over the context and applies a
//! residual update MLP on [query ‖ attended]. With the update MLP zeroed the
//! refinement is exactly the identity, which tests rely on.
//!
//! Dual-scale fusion merges a fine branch (GRU over the target's history
//! displacements) with a coarse branch (a heading-aligned social occupancy
//! grid of the neighborhood). The coarse branch is built bias-free from odd
//! activations so an empty neighborhood contributes exactly zero and the
//! output collapses to the target-only pathway.

use alloc::vec::Vec;

use crate::autodiff::Var;
use crate::config::FusionConfig;
use crate::nn::{Attention, Forward, GruCell, Linear, Mlp, ParamId, ParamSet};
use crate::rng::Rng;
use crate::scene::AgentTrack;
use crate::tensor::Tensor;

/// Progressive anchor query: K×D values plus the refinement stage reached.
pub struct AnchorQuery<'t> {
    pub values: Var<'t>,
    pub stage: usize,
}

/// Dual-scale fusion feature G (1×D).
pub struct FusionFeature<'t> {
    pub values: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct ProgressiveFusion {
    q0: ParamId,
    attn: Attention,
    update: Mlp,
    pub modes: usize,
}

impl ProgressiveFusion {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, modes: usize, rng: &mut Rng) -> Self {
        let q0 = params.register(
            alloc::format!("{name}.q0"),
            Tensor::randn(modes, dim, 0.5, rng),
        );
        ProgressiveFusion {
            q0,
            attn: Attention::new(params, &alloc::format!("{name}.attn"), dim, 1, rng),
            update: Mlp::new(
                params,
                &alloc::format!("{name}.update"),
                2 * dim,
                2 * dim,
                dim,
                rng,
            ),
            modes,
        }
    }

    /// The learned anchor-free query Q_0 at stage 0.
    pub fn anchor_query<'t>(&self, f: &Forward<'t, '_>) -> AnchorQuery<'t> {
        AnchorQuery {
            values: f.p(self.q0),
            stage: 0,
        }
    }

    /// Zero the residual update so refinement becomes the identity map.
    pub fn make_identity(&self, params: &mut ParamSet) {
        self.update.zero_output(params);
    }

    /// Refine `query` against `context` for `iters` iterations.
    ///
    /// Returns the query at stage `query.stage + iters`; with `iters == 0`
    /// the input query is returned unchanged and the flag is set.
    pub fn refine<'t>(
        &self,
        f: &Forward<'t, '_>,
        query: AnchorQuery<'t>,
        context: Var<'t>,
        iters: usize,
    ) -> (AnchorQuery<'t>, bool) {
        if iters == 0 {
            return (query, true);
        }
        let mut q = query.values;
        for _ in 0..iters {
            let (attended, _) = self.attn.attend(f, q, context);
            let step = self.update.forward(f, Var::concat_cols(&[q, attended]));
            q = q.add(step);
        }
        (
            AnchorQuery {
                values: q,
                stage: query.stage + iters,
            },
            false,
        )
    }
}

/// Social-grid occupancy geometry shared by the coarse branch.
struct GridFrame {
    center: [f64; 2],
    cos_h: f64,
    sin_h: f64,
}

impl GridFrame {
    /// Heading from the last valid displacement of the history; +x when the
    /// track gives none (e.g. the zeroed counterfactual input).
    fn from_history(points: &[[f64; 2]], valid: &[bool]) -> Self {
        let mut center = [0.0, 0.0];
        for i in (0..points.len()).rev() {
            if valid[i] {
                center = points[i];
                break;
            }
        }
        let mut heading = None;
        for i in (1..points.len()).rev() {
            if valid[i] && valid[i - 1] {
                let dx = points[i][0] - points[i - 1][0];
                let dy = points[i][1] - points[i - 1][1];
                if dx * dx + dy * dy > 1e-12 {
                    let norm = crate::mathx::sqrt(dx * dx + dy * dy);
                    heading = Some((dx / norm, dy / norm));
                    break;
                }
            }
        }
        let (cos_h, sin_h) = heading.unwrap_or((1.0, 0.0));
        GridFrame { center, cos_h, sin_h }
    }

    fn to_local(&self, p: [f64; 2]) -> (f64, f64) {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        (
            self.cos_h * dx + self.sin_h * dy,
            -self.sin_h * dx + self.cos_h * dy,
        )
    }

    fn rotate(&self, v: [f64; 2]) -> (f64, f64) {
        (
            self.cos_h * v[0] + self.sin_h * v[1],
            -self.sin_h * v[0] + self.cos_h * v[1],
        )
    }
}

#[derive(Debug, Clone)]
pub struct DualScaleFusion {
    fine_gru: GruCell,
    /// Neighbor feature embedding; bias-free so empty cells stay zero.
    coarse_embed: Linear,
    /// 3×3 convolution over the social grid; bias-free.
    coarse_conv: Linear,
    /// Projection of the flattened grid features; bias-free.
    coarse_proj: Linear,
    merge_fine: Linear,
    merge_coarse: Linear,
    grid_rows: usize,
    grid_cols: usize,
    cell_m: f64,
    embed_dim: usize,
    conv_channels: usize,
    dim: usize,
}

impl DualScaleFusion {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        config: &FusionConfig,
        rng: &mut Rng,
    ) -> Self {
        let embed_dim = 6;
        let conv_channels = 6;
        let cells = config.grid_rows * config.grid_cols;
        DualScaleFusion {
            fine_gru: GruCell::new(params, &alloc::format!("{name}.fine_gru"), 3, dim, rng),
            coarse_embed: Linear::new(
                params,
                &alloc::format!("{name}.coarse_embed"),
                4,
                embed_dim,
                false,
                rng,
            ),
            coarse_conv: Linear::new(
                params,
                &alloc::format!("{name}.coarse_conv"),
                9 * embed_dim,
                conv_channels,
                false,
                rng,
            ),
            coarse_proj: Linear::new(
                params,
                &alloc::format!("{name}.coarse_proj"),
                cells * conv_channels,
                dim,
                false,
                rng,
            ),
            merge_fine: Linear::new(params, &alloc::format!("{name}.merge_fine"), dim, dim, true, rng),
            merge_coarse: Linear::new(
                params,
                &alloc::format!("{name}.merge_coarse"),
                dim,
                dim,
                false,
                rng,
            ),
            grid_rows: config.grid_rows,
            grid_cols: config.grid_cols,
            cell_m: config.cell_size_m,
            embed_dim,
            conv_channels,
            dim,
        }
    }

    fn fine_branch<'t>(
        &self,
        f: &Forward<'t, '_>,
        target: &AgentTrack,
        history_len: usize,
        zero_target: bool,
    ) -> Var<'t> {
        let hist = history_len.min(target.trajectory.len());
        let mut steps = Vec::new();
        for t in 1..hist.max(2) {
            let mut row = Tensor::zeros(1, 3);
            if !zero_target && t < hist {
                let ok = target.trajectory.valid[t] && target.trajectory.valid[t - 1];
                if ok {
                    row.data[0] = target.trajectory.points[t][0] - target.trajectory.points[t - 1][0];
                    row.data[1] = target.trajectory.points[t][1] - target.trajectory.points[t - 1][1];
                    row.data[2] = 1.0;
                }
            }
            steps.push(f.tape.constant(row));
        }
        self.fine_gru.run(f, &steps)
    }

    /// Neighbor occupancy grid in the target's frame at the current moment.
    /// Cell features are sums of bias-free tanh embeddings of
    /// (rel. position, rel. velocity), so empty cells are exactly zero.
    fn coarse_grid(
        &self,
        target: &AgentTrack,
        neighbors: &[AgentTrack],
        history_len: usize,
        zero_target: bool,
    ) -> Tensor {
        let cells = self.grid_rows * self.grid_cols;
        let mut grid = Tensor::zeros(cells, 4);
        if neighbors.is_empty() {
            return grid;
        }
        let hist = history_len.min(target.trajectory.len());
        let frame = if zero_target {
            GridFrame {
                center: [0.0, 0.0],
                cos_h: 1.0,
                sin_h: 0.0,
            }
        } else {
            GridFrame::from_history(&target.trajectory.points[..hist], &target.trajectory.valid[..hist])
        };
        let current = hist - 1;
        for n in neighbors {
            if !n.trajectory.valid.get(current).copied().unwrap_or(false) {
                continue;
            }
            let p = n.trajectory.points[current];
            let (long, lat) = frame.to_local(p);
            let row = crate::mathx::floor(long / self.cell_m + self.grid_rows as f64 / 2.0);
            let col = crate::mathx::floor(lat / self.cell_m + self.grid_cols as f64 / 2.0);
            if row < 0.0 || col < 0.0 || row >= self.grid_rows as f64 || col >= self.grid_cols as f64
            {
                continue;
            }
            let vel = if current >= 1 && n.trajectory.valid[current - 1] {
                [
                    p[0] - n.trajectory.points[current - 1][0],
                    p[1] - n.trajectory.points[current - 1][1],
                ]
            } else {
                [0.0, 0.0]
            };
            let (vlong, vlat) = frame.rotate(vel);
            let cell = row as usize * self.grid_cols + col as usize;
            grid.data[cell * 4] += long;
            grid.data[cell * 4 + 1] += lat;
            grid.data[cell * 4 + 2] += vlong;
            grid.data[cell * 4 + 3] += vlat;
        }
        grid
    }

    fn coarse_branch<'t>(&self, f: &Forward<'t, '_>, grid: Tensor) -> Var<'t> {
        let cells = self.grid_rows * self.grid_cols;
        let grid_var = f.tape.constant(grid);
        let embedded = self.coarse_embed.forward(f, grid_var).tanh(); // cells×E
        // 3×3 im2col over the grid; out-of-range taps read zero.
        let mut idx = Vec::with_capacity(cells * 9 * self.embed_dim);
        for r in 0..self.grid_rows as isize {
            for c in 0..self.grid_cols as isize {
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        for e in 0..self.embed_dim as isize {
                            if rr < 0
                                || cc < 0
                                || rr >= self.grid_rows as isize
                                || cc >= self.grid_cols as isize
                            {
                                idx.push(-1);
                            } else {
                                idx.push(
                                    ((rr * self.grid_cols as isize + cc)
                                        * self.embed_dim as isize
                                        + e) as i64,
                                );
                            }
                        }
                    }
                }
            }
        }
        let patches = embedded.gather(idx, cells, 9 * self.embed_dim);
        let conv = self.coarse_conv.forward(f, patches).tanh(); // cells×C
        let flat: Vec<i64> = (0..cells * self.conv_channels).map(|i| i as i64).collect();
        let flattened = conv.gather(flat, 1, cells * self.conv_channels);
        self.coarse_proj.forward(f, flattened) // 1×D
    }

    /// Fine + coarse merge. With no neighbors the coarse term is exactly
    /// zero and this equals [`Self::target_only`].
    pub fn fuse<'t>(
        &self,
        f: &Forward<'t, '_>,
        target: &AgentTrack,
        neighbors: &[AgentTrack],
        history_len: usize,
        zero_target: bool,
    ) -> FusionFeature<'t> {
        let fine = self.fine_branch(f, target, history_len, zero_target);
        let fine_part = self.merge_fine.forward(f, fine);
        let grid = self.coarse_grid(target, neighbors, history_len, zero_target);
        let coarse = self.coarse_branch(f, grid);
        let coarse_part = self.merge_coarse.forward(f, coarse);
        FusionFeature {
            values: fine_part.add(coarse_part).tanh(),
        }
    }

    /// The fine-scale pathway alone.
    pub fn target_only<'t>(
        &self,
        f: &Forward<'t, '_>,
        target: &AgentTrack,
        history_len: usize,
        zero_target: bool,
    ) -> FusionFeature<'t> {
        let fine = self.fine_branch(f, target, history_len, zero_target);
        let fine_part = self.merge_fine.forward(f, fine);
        let zero = f.tape.constant(Tensor::zeros(1, self.dim));
        FusionFeature {
            values: fine_part.add(zero).tanh(),
        }
    }
}
