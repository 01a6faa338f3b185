//! Synthetic confounded crosswalk benchmark.
//!
//! Each scene is a target vehicle approaching with one of three maneuvers —
//! keep-speed, accelerate, stop — whose onset is already visible in the last
//! history frames (the genuine causal signal, blurred by observation noise).
//! A crosswalk polyline is planted so that it co-occurs with the accelerate
//! maneuver at rate ρ in the train split and 1−ρ in the shifted test split:
//! a model that leans on the crosswalk as a shortcut wins in training and
//! loses after the shift, which is exactly what the causal machinery is
//! supposed to prevent.
//!
//! All draws come from per-scene substreams keyed by (seed, split, index),
//! so output is byte-identical for a given (config, seed) regardless of
//! generation order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::GeneratorConfig;
use crate::error::CoreError;
use crate::rng::Rng;
use crate::scene::{
    AgentTrack, BevRaster, MapPolyline, Scene, ROAD_TYPE_CROSSWALK, ROAD_TYPE_LANE,
};
use crate::Result;

/// Maneuver indices used by the generator and the intention loss.
pub const MANEUVER_KEEP: usize = 0;
pub const MANEUVER_ACCELERATE: usize = 1;
pub const MANEUVER_STOP: usize = 2;
pub const MANEUVER_COUNT: usize = 3;

pub fn maneuver_name(m: usize) -> &'static str {
    match m {
        MANEUVER_KEEP => "keep",
        MANEUVER_ACCELERATE => "accelerate",
        MANEUVER_STOP => "stop",
        _ => "unknown",
    }
}

#[derive(Debug, Clone)]
pub struct ConfoundedDataset {
    pub train: Vec<Scene>,
    pub test_iid: Vec<Scene>,
    pub test_shifted: Vec<Scene>,
}

/// Fraction of accelerate-labelled scenes that contain a crosswalk.
pub fn crosswalk_cooccurrence(scenes: &[Scene]) -> f64 {
    let accel: Vec<&Scene> = scenes
        .iter()
        .filter(|s| s.maneuver_label == Some(MANEUVER_ACCELERATE))
        .collect();
    if accel.is_empty() {
        return 0.0;
    }
    accel.iter().filter(|s| s.has_crosswalk()).count() as f64 / accel.len() as f64
}

/// Generate the three splits of the confounded benchmark.
pub fn generate_confounded_dataset(
    config: &GeneratorConfig,
    seed: u64,
) -> Result<ConfoundedDataset> {
    config.validate()?;
    Ok(ConfoundedDataset {
        train: generate_split(config, seed, "train", config.train_scenes, config.rho)?,
        test_iid: generate_split(config, seed, "test_iid", config.test_scenes, config.rho)?,
        test_shifted: generate_split(
            config,
            seed,
            "test_shifted",
            config.test_scenes,
            1.0 - config.rho,
        )?,
    })
}

/// One split at the given crosswalk/accelerate co-occurrence rate.
///
/// Maneuvers are assigned in near-equal thirds and crosswalks by exact
/// counting per maneuver group (accelerate at `rate`, others at 1−rate), so
/// the realized rate is within rounding of the requested one rather than a
/// Bernoulli draw.
pub fn generate_split(
    config: &GeneratorConfig,
    seed: u64,
    split: &str,
    count: usize,
    rate: f64,
) -> Result<Vec<Scene>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CoreError::config("co-occurrence rate must be in [0, 1]"));
    }
    let mut assign_rng = Rng::substream(seed, format!("{split}/assign").as_bytes());
    let mut maneuvers: Vec<usize> = (0..count).map(|i| i % MANEUVER_COUNT).collect();
    assign_rng.shuffle(&mut maneuvers);

    // Exact crosswalk counts per maneuver group.
    let mut crosswalk = alloc::vec![false; count];
    for m in 0..MANEUVER_COUNT {
        let group: Vec<usize> = (0..count).filter(|&i| maneuvers[i] == m).collect();
        let group_rate = if m == MANEUVER_ACCELERATE { rate } else { 1.0 - rate };
        let k = crate::mathx::round(group_rate * group.len() as f64) as usize;
        let mut order = group.clone();
        assign_rng.shuffle(&mut order);
        for &i in order.iter().take(k.min(order.len())) {
            crosswalk[i] = true;
        }
    }

    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = Rng::substream(seed, format!("{split}/{i}").as_bytes());
        let scene = build_scene(
            config,
            format!("{split}-{i:06}"),
            maneuvers[i],
            crosswalk[i],
            &mut rng,
        );
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

fn build_scene(
    config: &GeneratorConfig,
    id: String,
    maneuver: usize,
    with_crosswalk: bool,
    rng: &mut Rng,
) -> Scene {
    let dt = config.dt;
    let t_h = config.t_h;
    let t_f = config.t_f;
    let frames = t_h + 1 + t_f;

    let heading = rng.uniform_in(0.0, 2.0 * core::f64::consts::PI);
    let (cos_h, sin_h) = (crate::mathx::cos(heading), crate::mathx::sin(heading));
    let v0 = rng.uniform_in(config.speed_min, config.speed_max);

    // Maneuver onset inside the last history frames: the history carries the
    // causal signal for the future.
    let onset = 2usize.min(t_h);
    let accel = match maneuver {
        MANEUVER_ACCELERATE => rng.uniform_in(0.9, 1.6),
        MANEUVER_STOP => {
            // Reach rest strictly before the end of the future so the final
            // future speed is ~0.
            let brake_time = (t_f.saturating_sub(2).max(1) as f64) * dt;
            -(v0 + 0.0) / brake_time
        }
        _ => 0.0,
    };

    // Longitudinal profile. Current frame is index t_h at s = 0.
    let mut speed = alloc::vec![v0; frames];
    let onset_frame = t_h - onset;
    for f in onset_frame + 1..frames {
        let v = speed[f - 1] + accel * dt;
        speed[f] = v.max(0.0);
    }
    let mut arc = alloc::vec![0.0; frames];
    for f in 1..frames {
        arc[f] = arc[f - 1] + 0.5 * (speed[f - 1] + speed[f]) * dt;
    }
    let s_now = arc[t_h];

    let mut points: Vec<[f64; 2]> = Vec::with_capacity(frames);
    for f in 0..frames {
        let s = arc[f] - s_now;
        points.push([s * cos_h, s * sin_h]);
    }
    // Observation noise on history only; futures stay exact.
    for p in points.iter_mut().take(t_h + 1) {
        p[0] += rng.normal() * config.history_noise_sd;
        p[1] += rng.normal() * config.history_noise_sd;
    }
    let target = AgentTrack::vehicle(points);

    // Neighbors: constant-velocity vehicles in adjacent lanes.
    let n_neighbors = rng.below(config.max_neighbors + 1);
    let mut neighbors = Vec::with_capacity(n_neighbors);
    for _ in 0..n_neighbors {
        let lane_off = if rng.below(2) == 0 { 3.5 } else { -3.5 };
        let ahead = rng.uniform_in(-12.0, 18.0);
        let nv = v0 * rng.uniform_in(0.8, 1.1);
        let mut pts = Vec::with_capacity(frames);
        for f in 0..frames {
            let s = ahead + nv * (f as f64 - t_h as f64) * dt;
            pts.push([
                s * cos_h - lane_off * sin_h,
                s * sin_h + lane_off * cos_h,
            ]);
        }
        neighbors.push(AgentTrack::vehicle(pts));
    }

    // Map: own lane plus two parallel lanes, optionally a crosswalk ahead.
    let n_pts = config.map_points;
    let lane_len = 60.0;
    let mut map = Vec::new();
    for (li, lane_off) in [0.0, 3.5, -3.5].iter().enumerate() {
        let mut pts = Vec::with_capacity(n_pts);
        for p in 0..n_pts {
            let s = -lane_len / 2.0 + lane_len * p as f64 / (n_pts - 1) as f64;
            pts.push([
                s * cos_h - lane_off * sin_h,
                s * sin_h + lane_off * cos_h,
                ROAD_TYPE_LANE,
                li as f64,
            ]);
        }
        map.push(MapPolyline {
            polyline_id: li as i64,
            points: pts,
        });
    }
    if with_crosswalk {
        let d_cross = rng.uniform_in(6.0, 14.0);
        let half_width = 6.0;
        let mut pts = Vec::with_capacity(n_pts);
        for p in 0..n_pts {
            let w = -half_width + 2.0 * half_width * p as f64 / (n_pts - 1) as f64;
            pts.push([
                d_cross * cos_h - w * sin_h,
                d_cross * sin_h + w * cos_h,
                ROAD_TYPE_CROSSWALK,
                100.0,
            ]);
        }
        map.push(MapPolyline {
            polyline_id: 100,
            points: pts,
        });
    }

    let bev = render_bev(config, &target, &neighbors, &map);

    Scene {
        id,
        dt,
        t_h,
        t_f,
        target,
        neighbors,
        map,
        bev,
        maneuver_label: Some(maneuver),
    }
}

/// Rasterize Agent / Map / Raster layers on a grid centered at the target's
/// current position.
pub fn render_bev(
    config: &GeneratorConfig,
    target: &AgentTrack,
    neighbors: &[AgentTrack],
    map: &[MapPolyline],
) -> BevRaster {
    let size = config.bev_size;
    let res = config.bev_resolution;
    let mut bev = BevRaster::zeros(size, size, res);
    let t_h = config.t_h;
    let center = target.trajectory.points[t_h.min(target.trajectory.len() - 1)];
    let half = size as f64 / 2.0;

    let to_cell = |x: f64, y: f64| -> Option<(usize, usize)> {
        let col = crate::mathx::floor((x - center[0]) / res + half);
        let row = crate::mathx::floor((y - center[1]) / res + half);
        if col < 0.0 || row < 0.0 || col >= size as f64 || row >= size as f64 {
            None
        } else {
            Some((row as usize, col as usize))
        }
    };

    // Agent layer: splat every agent's current position.
    let splat = |layer: &mut Vec<Vec<f64>>, x: f64, y: f64, v: f64| {
        if let Some((r, c)) = to_cell(x, y) {
            layer[r][c] = layer[r][c].max(v);
        }
    };
    let cur = target.trajectory.points[t_h.min(target.trajectory.len() - 1)];
    splat(&mut bev.agent, cur[0], cur[1], 1.0);
    for n in neighbors {
        let p = n.trajectory.points[t_h.min(n.trajectory.len() - 1)];
        splat(&mut bev.agent, p[0], p[1], 0.8);
    }

    // Map layer: dense samples along each polyline.
    for poly in map {
        let v = if poly.is_crosswalk() { 1.0 } else { 0.6 };
        for seg in poly.points.windows(2) {
            let steps = 24;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let x = seg[0][0] + (seg[1][0] - seg[0][0]) * t;
                let y = seg[0][1] + (seg[1][1] - seg[0][1]) * t;
                splat(&mut bev.map, x, y, v);
            }
        }
    }

    // Raster layer: drivable corridor around lane centerlines.
    let lanes: Vec<&MapPolyline> = map.iter().filter(|p| !p.is_crosswalk()).collect();
    for r in 0..size {
        for c in 0..size {
            let x = center[0] + (c as f64 + 0.5 - half) * res;
            let y = center[1] + (r as f64 + 0.5 - half) * res;
            let mut near = false;
            'outer: for poly in &lanes {
                for seg in poly.points.windows(2) {
                    if point_segment_dist2(x, y, seg[0], seg[1]) < 2.0 * 2.0 {
                        near = true;
                        break 'outer;
                    }
                }
            }
            if near {
                bev.raster[r][c] = 0.5;
            }
        }
    }
    bev
}

fn point_segment_dist2(x: f64, y: f64, a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax, ay) = (a[0], a[1]);
    let (bx, by) = (b[0], b[1]);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (px, py) = (ax + t * dx, ay + t * dy);
    (x - px) * (x - px) + (y - py) * (y - py)
}
