//! JSON configuration schema and conversion into core scenario types.

use std::path::Path;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use rbl_core::geometry::{AnchorSet, Pose, TagLayout};
use rbl_core::simulation::{
    scenario_by_name, scheduled_circuit_trajectory, Aabb, Scenario, Scene, SceneMotion, Trajectory,
};

use crate::{CliError, CliResult};

/// Axis-aligned box: center and full edge lengths, meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxConfig {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

/// Closed-polyline ride with a piecewise (speed, duration) schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitConfig {
    pub waypoints: Vec<[f64; 2]>,
    /// (speed m/s, duration s) legs; a single leg means constant speed.
    pub schedule: Vec<[f64; 2]>,
    pub epochs: usize,
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
}

fn default_rate() -> f64 {
    1.0
}

/// Explicitly sampled trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseSampleConfig {
    pub t: f64,
    pub position: Vec<f64>,
    pub attitude: Vec<f64>,
}

/// Ground-truth motion: exactly one variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionConfig {
    Pose {
        position: Vec<f64>,
        attitude: Vec<f64>,
    },
    Circuit(CircuitConfig),
    Samples(Vec<PoseSampleConfig>),
}

/// Inline scene description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub name: Option<String>,
    pub anchors: Vec<Vec<f64>>,
    pub tags: Vec<Vec<f64>>,
    #[serde(default)]
    pub obstacles: Vec<BoxConfig>,
    pub cargo: Option<BoxConfig>,
    pub range_limit: Option<f64>,
    /// Body-origin height for planar-pose scenes over 3D geometry.
    pub planar_base_height: Option<f64>,
    pub motion: MotionConfig,
}

/// Scene reference: a builtin name or an inline object.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneRef {
    Builtin(String),
    Inline(Box<SceneConfig>),
}

/// Noise model settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    1
}

/// Top-level experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scene: SceneRef,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    pub noise: Option<NoiseConfig>,
    /// Noise grid for Monte Carlo and static CRLB runs.
    pub sigmas: Option<Vec<f64>>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub threads: Option<usize>,
}

fn default_methods() -> Vec<String> {
    vec!["erbl".into(), "dac".into()]
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_scene_name(name: &str) -> Self {
        Self {
            scene: SceneRef::Builtin(name.to_string()),
            methods: default_methods(),
            noise: None,
            sigmas: None,
            runs: None,
            seed: None,
            out: None,
            threads: None,
        }
    }

    /// Builds the scenario this config refers to.
    pub fn scenario(&self) -> CliResult<Scenario> {
        match &self.scene {
            SceneRef::Builtin(name) => scenario_by_name(name).ok_or_else(|| {
                CliError::Config(format!(
                    "unknown builtin scene '{name}' (expected paper-2d, paper-3d or paper-warehouse)"
                ))
            }),
            SceneRef::Inline(cfg) => cfg.build(),
        }
    }

    pub fn method_list(&self) -> CliResult<Vec<rbl_core::baselines::Method>> {
        if self.methods.is_empty() {
            return Err(CliError::Config("method list is empty".into()));
        }
        self.methods
            .iter()
            .map(|m| {
                rbl_core::baselines::Method::parse(m)
                    .ok_or_else(|| CliError::Config(format!("unknown method '{m}'")))
            })
            .collect()
    }

    pub fn sigma_grid(&self) -> Vec<f64> {
        if let Some(grid) = &self.sigmas {
            grid.clone()
        } else if let Some(noise) = &self.noise {
            vec![noise.sigma]
        } else {
            (1..=10).map(|k| k as f64 / 10.0).collect()
        }
    }

    pub fn base_seed(&self) -> u64 {
        self.seed
            .or_else(|| self.noise.as_ref().map(|n| n.seed))
            .unwrap_or(1)
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise.as_ref().map(|n| n.sigma).unwrap_or(0.1)
    }
}

impl BoxConfig {
    fn build(&self) -> CliResult<Aabb> {
        Aabb::new(
            Vector3::from_column_slice(&self.center),
            Vector3::from_column_slice(&self.size),
        )
        .map_err(CliError::Core)
    }
}

impl SceneConfig {
    pub fn build(&self) -> CliResult<Scenario> {
        let anchors = AnchorSet::from_rows(&self.anchors).map_err(CliError::Core)?;
        let layout = TagLayout::from_rows(&self.tags).map_err(CliError::Core)?;
        let obstacles: Vec<Aabb> = self
            .obstacles
            .iter()
            .map(|b| b.build())
            .collect::<CliResult<_>>()?;
        let cargo = self.cargo.as_ref().map(|b| b.build()).transpose()?;
        let scene = Scene::new(
            self.name.clone().unwrap_or_else(|| "custom".into()),
            anchors,
            layout,
            obstacles,
            cargo,
            self.range_limit,
            self.planar_base_height,
        )
        .map_err(CliError::Core)?;
        let motion = match &self.motion {
            MotionConfig::Pose { position, attitude } => SceneMotion::Static(
                Pose::new(DVector::from_vec(position.clone()), attitude.clone())
                    .map_err(CliError::Core)?,
            ),
            MotionConfig::Circuit(c) => {
                let waypoints: Vec<(f64, f64)> = c.waypoints.iter().map(|w| (w[0], w[1])).collect();
                let schedule: Vec<(f64, f64)> = c.schedule.iter().map(|s| (s[0], s[1])).collect();
                SceneMotion::Trajectory(
                    scheduled_circuit_trajectory(&waypoints, &schedule, c.epochs, c.rate_hz)
                        .map_err(CliError::Core)?,
                )
            }
            MotionConfig::Samples(samples) => {
                let poses: Vec<(f64, Pose)> = samples
                    .iter()
                    .map(|s| {
                        Pose::new(DVector::from_vec(s.position.clone()), s.attitude.clone())
                            .map(|p| (s.t, p))
                            .map_err(CliError::Core)
                    })
                    .collect::<CliResult<_>>()?;
                SceneMotion::Trajectory(Trajectory::new(poses).map_err(CliError::Core)?)
            }
        };
        Ok(Scenario { scene, motion })
    }
}
