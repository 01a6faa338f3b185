//! Scene data model: tracks, map polylines, BEV rasters, perturbation specs.
//!
//! The serde shapes here are the wire format: one scene per JSON line with
//! explicit field names (see the workspace README for the schema). Field
//! renames below keep the Rust names descriptive while matching that schema.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

/// Agent class, closed set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Bicycle,
}

impl AgentClass {
    pub const ALL: [AgentClass; 3] = [
        AgentClass::Vehicle,
        AgentClass::Pedestrian,
        AgentClass::Bicycle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AgentClass::Vehicle => "vehicle",
            AgentClass::Pedestrian => "pedestrian",
            AgentClass::Bicycle => "bicycle",
        }
    }
}

/// A 2-D position sequence at fixed frame interval with a validity mask.
/// Masked-out frames hold the zero sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl Trajectory {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let valid = alloc::vec![true; points.len()];
        Trajectory { points, valid }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.points.is_empty() {
            return Err(CoreError::validation(format!("{what}: empty trajectory")));
        }
        if self.points.len() != self.valid.len() {
            return Err(CoreError::validation(format!(
                "{what}: valid mask length {} != point count {}",
                self.valid.len(),
                self.points.len()
            )));
        }
        for (i, (p, &v)) in self.points.iter().zip(self.valid.iter()).enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(CoreError::validation(format!(
                    "{what}: non-finite point at frame {i}"
                )));
            }
            if !v && (p[0] != 0.0 || p[1] != 0.0) {
                return Err(CoreError::validation(format!(
                    "{what}: masked frame {i} must hold the zero sentinel"
                )));
            }
        }
        Ok(())
    }
}

/// One agent: a full track over `t_h + t_f + 1` frames plus class metadata.
///
/// `state_width` counts per-frame attributes: position (2) plus any extra
/// columns in `extras` (velocity, heading, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    #[serde(flatten)]
    pub trajectory: Trajectory,
    #[serde(rename = "class")]
    pub class_label: AgentClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extras: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_state_width", rename = "w_a")]
    pub state_width: usize,
}

fn default_state_width() -> usize {
    2
}

impl AgentTrack {
    pub fn vehicle(points: Vec<[f64; 2]>) -> Self {
        AgentTrack {
            trajectory: Trajectory::new(points),
            class_label: AgentClass::Vehicle,
            extras: None,
            state_width: 2,
        }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        self.trajectory.validate(what)?;
        if self.state_width < 2 {
            return Err(CoreError::validation(format!(
                "{what}: state_width {} < 2",
                self.state_width
            )));
        }
        let extra_cols = self
            .extras
            .as_ref()
            .and_then(|e| e.first().map(|r| r.len()))
            .unwrap_or(0);
        if self.state_width != 2 + extra_cols {
            return Err(CoreError::validation(format!(
                "{what}: state_width {} != 2 + {} extra columns",
                self.state_width, extra_cols
            )));
        }
        if let Some(extras) = &self.extras {
            if extras.len() != self.trajectory.len() {
                return Err(CoreError::validation(format!(
                    "{what}: extras rows {} != frame count {}",
                    extras.len(),
                    self.trajectory.len()
                )));
            }
            if extras.iter().any(|r| r.len() != extra_cols) {
                return Err(CoreError::validation(format!("{what}: ragged extras")));
            }
        }
        Ok(())
    }
}

/// A map polyline: n waypoints of (x, y, road-type code, lane id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    #[serde(rename = "id")]
    pub polyline_id: i64,
    pub points: Vec<[f64; 4]>,
}

/// Width of one polyline waypoint: x, y, road-type code, lane id.
pub const MAP_POINT_WIDTH: usize = 4;

/// Road-type codes used by the synthetic generator.
pub const ROAD_TYPE_LANE: f64 = 1.0;
pub const ROAD_TYPE_CROSSWALK: f64 = 2.0;

impl MapPolyline {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.points.len() < 2 {
            return Err(CoreError::validation(format!(
                "{what}: polyline {} has {} points, need >= 2",
                self.polyline_id,
                self.points.len()
            )));
        }
        if self
            .points
            .iter()
            .any(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(CoreError::validation(format!(
                "{what}: polyline {} has non-finite attributes",
                self.polyline_id
            )));
        }
        Ok(())
    }

    pub fn is_crosswalk(&self) -> bool {
        self.points
            .first()
            .map(|p| p[2] == ROAD_TYPE_CROSSWALK)
            .unwrap_or(false)
    }
}

/// Bird's-eye-view raster: Agent, Map and Raster semantic layers over one
/// H×W grid, intensities in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevRaster {
    pub agent: Vec<Vec<f64>>,
    pub map: Vec<Vec<f64>>,
    pub raster: Vec<Vec<f64>>,
    #[serde(rename = "res")]
    pub resolution: f64,
}

impl BevRaster {
    pub fn zeros(h: usize, w: usize, resolution: f64) -> Self {
        let grid = alloc::vec![alloc::vec![0.0; w]; h];
        BevRaster {
            agent: grid.clone(),
            map: grid.clone(),
            raster: grid,
            resolution,
        }
    }

    pub fn height(&self) -> usize {
        self.agent.len()
    }

    pub fn width(&self) -> usize {
        self.agent.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn layers(&self) -> [&Vec<Vec<f64>>; 3] {
        [&self.agent, &self.map, &self.raster]
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if h == 0 || w == 0 {
            return Err(CoreError::validation(format!("{what}: empty BEV raster")));
        }
        if self.resolution <= 0.0 {
            return Err(CoreError::validation(format!(
                "{what}: BEV resolution must be positive"
            )));
        }
        for (name, layer) in [("agent", &self.agent), ("map", &self.map), ("raster", &self.raster)]
        {
            if layer.len() != h || layer.iter().any(|r| r.len() != w) {
                return Err(CoreError::validation(format!(
                    "{what}: BEV layer '{name}' shape differs from {h}x{w}"
                )));
            }
            for row in layer {
                for &v in row {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(CoreError::validation(format!(
                            "{what}: BEV layer '{name}' intensity {v} outside [0, 1]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One prediction instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub dt: f64,
    pub t_h: usize,
    pub t_f: usize,
    pub target: AgentTrack,
    pub neighbors: Vec<AgentTrack>,
    pub map: Vec<MapPolyline>,
    pub bev: BevRaster,
    #[serde(rename = "maneuver", skip_serializing_if = "Option::is_none", default)]
    pub maneuver_label: Option<usize>,
}

impl Scene {
    /// Total frames per track: history (incl. current) plus future.
    pub fn frames(&self) -> usize {
        self.t_h + 1 + self.t_f
    }

    pub fn history_len(&self) -> usize {
        self.t_h + 1
    }

    pub fn target_history(&self) -> &[[f64; 2]] {
        &self.target.trajectory.points[..self.history_len()]
    }

    pub fn target_future(&self) -> &[[f64; 2]] {
        &self.target.trajectory.points[self.history_len()..]
    }

    /// Last observed valid target position; scene origin for decoding.
    pub fn reference_point(&self) -> [f64; 2] {
        let hist = self.history_len();
        for i in (0..hist).rev() {
            if self.target.trajectory.valid[i] {
                return self.target.trajectory.points[i];
            }
        }
        [0.0, 0.0]
    }

    /// Mean target speed over valid consecutive history frames, m/s.
    pub fn observed_speed(&self) -> f64 {
        let pts = self.target_history();
        let valid = &self.target.trajectory.valid;
        let mut total = 0.0;
        let mut count = 0;
        for i in 1..pts.len() {
            if valid[i] && valid[i - 1] {
                let dx = pts[i][0] - pts[i - 1][0];
                let dy = pts[i][1] - pts[i - 1][1];
                total += crate::mathx::sqrt(dx * dx + dy * dy) / self.dt;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    pub fn has_crosswalk(&self) -> bool {
        self.map.iter().any(|p| p.is_crosswalk())
    }

    pub fn validate(&self) -> Result<()> {
        let what = format!("scene {}", self.id);
        if self.dt <= 0.0 {
            return Err(CoreError::validation(format!("{what}: dt must be > 0")));
        }
        self.target.validate(&format!("{what} target"))?;
        if self.target.trajectory.len() != self.frames() {
            return Err(CoreError::validation(format!(
                "{what}: target has {} frames, expected t_h + 1 + t_f = {}",
                self.target.trajectory.len(),
                self.frames()
            )));
        }
        for (i, n) in self.neighbors.iter().enumerate() {
            n.validate(&format!("{what} neighbor {i}"))?;
            if n.trajectory.len() != self.frames() {
                return Err(CoreError::validation(format!(
                    "{what}: neighbor {i} has {} frames, expected {}",
                    n.trajectory.len(),
                    self.frames()
                )));
            }
        }
        let mut point_count = None;
        for p in &self.map {
            p.validate(&what)?;
            match point_count {
                None => point_count = Some(p.points.len()),
                Some(n) if n != p.points.len() => {
                    return Err(CoreError::validation(format!(
                        "{what}: polylines disagree on point count ({} vs {})",
                        n,
                        p.points.len()
                    )));
                }
                _ => {}
            }
        }
        self.bev.validate(&what)?;
        Ok(())
    }
}

/// Robustness perturbation selector. Exactly one kind is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    None,
    Noise,
    FrameDrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub alpha: f64,
    pub drop_fraction: f64,
    /// Frame offset used by the curvature term.
    pub delta_t: usize,
    pub rng_seed: u64,
}

impl PerturbationSpec {
    pub fn none() -> Self {
        PerturbationSpec {
            kind: PerturbationKind::None,
            alpha: 0.0,
            drop_fraction: 0.0,
            delta_t: 1,
            rng_seed: 0,
        }
    }

    pub fn noise(alpha: f64, seed: u64) -> Self {
        PerturbationSpec {
            kind: PerturbationKind::Noise,
            alpha,
            drop_fraction: 0.0,
            delta_t: 1,
            rng_seed: seed,
        }
    }

    pub fn frame_drop(fraction: f64, seed: u64) -> Self {
        PerturbationSpec {
            kind: PerturbationKind::FrameDrop,
            alpha: 0.0,
            drop_fraction: fraction,
            delta_t: 1,
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(CoreError::domain("perturbation alpha must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(CoreError::domain(
                "perturbation drop_fraction must be in [0, 1)",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny_scene() -> Scene {
        let pts = |n: usize| (0..n).map(|i| [i as f64, 0.0]).collect::<Vec<_>>();
        Scene {
            id: "s0".into(),
            dt: 0.5,
            t_h: 2,
            t_f: 3,
            target: AgentTrack::vehicle(pts(6)),
            neighbors: vec![AgentTrack::vehicle(pts(6))],
            map: vec![MapPolyline {
                polyline_id: 0,
                points: vec![[0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 1.0, 0.0]],
            }],
            bev: BevRaster::zeros(4, 4, 0.5),
            maneuver_label: Some(0),
        }
    }

    #[test]
    fn valid_scene_passes() {
        tiny_scene().validate().unwrap();
    }

    #[test]
    fn history_off_by_one_is_rejected() {
        let mut s = tiny_scene();
        s.target.trajectory.points.pop();
        s.target.trajectory.valid.pop();
        let err = s.validate().unwrap_err();
        assert!(matches!(err, CoreError::Validation(_)));
        assert!(format!("{err}").contains("frames"));
    }

    #[test]
    fn masked_frames_must_be_zero() {
        let mut s = tiny_scene();
        s.target.trajectory.valid[1] = false; // point stays (1, 0)
        assert!(s.validate().is_err());
        s.target.trajectory.points[1] = [0.0, 0.0];
        assert!(s.validate().is_ok());
    }

    #[test]
    fn ragged_polylines_are_rejected() {
        let mut s = tiny_scene();
        s.map.push(MapPolyline {
            polyline_id: 1,
            points: vec![
                [0.0, 1.0, 1.0, 1.0],
                [1.0, 1.0, 1.0, 1.0],
                [2.0, 1.0, 1.0, 1.0],
            ],
        });
        assert!(s.validate().is_err());
    }

    #[test]
    fn bev_intensity_range_checked() {
        let mut s = tiny_scene();
        s.bev.map[0][0] = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn reference_point_skips_masked_frames() {
        let mut s = tiny_scene();
        assert_eq!(s.reference_point(), [2.0, 0.0]);
        s.target.trajectory.points[2] = [0.0, 0.0];
        s.target.trajectory.valid[2] = false;
        assert_eq!(s.reference_point(), [1.0, 0.0]);
    }

    #[test]
    fn perturbation_spec_domains() {
        assert!(PerturbationSpec::noise(-1.0, 0).validate().is_err());
        assert!(PerturbationSpec::frame_drop(1.0, 0).validate().is_err());
        assert!(PerturbationSpec::frame_drop(0.99, 0).validate().is_ok());
    }
}
