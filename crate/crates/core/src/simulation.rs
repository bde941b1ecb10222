//! Scene construction, line-of-sight computation with box obstacles, noise
//! injection, trajectory generation and the Monte Carlo / trajectory
//! experiment runners.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::analysis::{check_availability, crlb, epoch_error};
use crate::baselines::{dac_estimate, DacOutcome, Method};
use crate::edm::{
    build_measured_edm, complete_edm, edm_frobenius_error, estimate_bounds, exact_edm,
    shortest_path_bounds, CompletedEdm,
};
use crate::error::{Error, Result};
use crate::geometry::{
    rotation_from_angles, AnchorSet, Pose, ProblemGeometry, TagLayout, TofMeasurementSet,
    VerticalGeometry, VisibilityMask,
};
use crate::pose_estimation::{run_pipeline, BoundStrategy, PipelineConfig};

/// Axis-aligned box given by its center and full edge lengths.
#[derive(Debug, Clone)]
pub struct Aabb {
    pub center: Vector3<f64>,
    pub size: Vector3<f64>,
}

impl Aabb {
    pub fn new(center: Vector3<f64>, size: Vector3<f64>) -> Result<Self> {
        if size.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidInput("box extents must be positive".into()));
        }
        Ok(Self { center, size })
    }

    pub fn min(&self) -> Vector3<f64> {
        self.center - self.size * 0.5
    }

    pub fn max(&self) -> Vector3<f64> {
        self.center + self.size * 0.5
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let lo = self.min();
        let hi = self.max();
        (0..3).all(|a| p[a] > lo[a] && p[a] < hi[a])
    }

    /// Exact slab test: true when the segment passes through the open
    /// interior. Touching a face, edge or corner does not block.
    pub fn blocks_segment(&self, p0: &Vector3<f64>, p1: &Vector3<f64>) -> bool {
        let lo = self.min();
        let hi = self.max();
        let dir = p1 - p0;
        let mut t_enter = 0.0f64;
        let mut t_exit = 1.0f64;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                // Parallel to the slab: boundary counts as outside.
                if p0[a] <= lo[a] || p0[a] >= hi[a] {
                    return false;
                }
            } else {
                let inv = 1.0 / dir[a];
                let (t1, t2) = {
                    let t1 = (lo[a] - p0[a]) * inv;
                    let t2 = (hi[a] - p0[a]) * inv;
                    if t1 <= t2 {
                        (t1, t2)
                    } else {
                        (t2, t1)
                    }
                };
                t_enter = t_enter.max(t1);
                t_exit = t_exit.min(t2);
                if t_enter >= t_exit {
                    return false;
                }
            }
        }
        true
    }
}

/// A static measurement environment: anchors, the vehicle's tag layout and
/// whatever blocks the signals.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    anchors: AnchorSet,
    layout: TagLayout,
    /// Obstacles in the global frame (only meaningful for 3D geometry).
    pub obstacles: Vec<Aabb>,
    /// Box rigidly attached to the vehicle, in the body frame.
    pub cargo: Option<Aabb>,
    pub range_limit: Option<f64>,
    /// Height of the body origin above the ground for planar-pose scenes;
    /// `Some` marks a 2D estimation problem over 3D geometry.
    planar_base_height: Option<f64>,
}

impl Scene {
    pub fn new(
        name: impl Into<String>,
        anchors: AnchorSet,
        layout: TagLayout,
        obstacles: Vec<Aabb>,
        cargo: Option<Aabb>,
        range_limit: Option<f64>,
        planar_base_height: Option<f64>,
    ) -> Result<Self> {
        if anchors.dim() != layout.dim() {
            return Err(Error::DimensionMismatch(
                "anchors and layout must share one dimension".into(),
            ));
        }
        if anchors.dim() == 2 && (!obstacles.is_empty() || cargo.is_some()) {
            return Err(Error::InvalidInput(
                "box obstacles require 3D geometry".into(),
            ));
        }
        if planar_base_height.is_some() && anchors.dim() != 3 {
            return Err(Error::InvalidInput(
                "planar estimation over 3D geometry needs 3D anchors".into(),
            ));
        }
        if let Some(c) = &cargo {
            for (i, l) in layout.iter().enumerate() {
                let p = Vector3::new(l[0], l[1], l[2]);
                if c.contains(&p) {
                    return Err(Error::InvalidInput(format!(
                        "tag {i} lies inside the cargo box"
                    )));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            anchors,
            layout,
            obstacles,
            cargo,
            range_limit,
            planar_base_height,
        })
    }

    pub fn geometry_dim(&self) -> usize {
        self.anchors.dim()
    }

    /// Dimension of the estimated pose (2 for planar scenes).
    pub fn pose_dim(&self) -> usize {
        if self.planar_base_height.is_some() {
            2
        } else {
            self.anchors.dim()
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn num_tags(&self) -> usize {
        self.layout.len()
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn layout(&self) -> &TagLayout {
        &self.layout
    }

    pub fn planar_base_height(&self) -> Option<f64> {
        self.planar_base_height
    }

    /// Estimation-side geometry for the solvers.
    pub fn problem(&self) -> ProblemGeometry {
        match self.planar_base_height {
            None => ProblemGeometry::new(self.anchors.clone(), self.layout.clone(), None)
                .expect("scene geometry is validated"),
            Some(base) => {
                let anchors_2d = AnchorSet::new(
                    self.anchors
                        .iter()
                        .map(|q| DVector::from_vec(vec![q[0], q[1]]))
                        .collect(),
                )
                .expect("scene geometry is validated");
                let layout_2d = TagLayout::new(
                    self.layout
                        .iter()
                        .map(|l| DVector::from_vec(vec![l[0], l[1]]))
                        .collect(),
                )
                .expect("scene geometry is validated");
                let vertical = VerticalGeometry {
                    anchor_heights: self.anchors.iter().map(|q| q[2]).collect(),
                    tag_heights: self.layout.iter().map(|l| base + l[2]).collect(),
                };
                ProblemGeometry::new(anchors_2d, layout_2d, Some(vertical))
                    .expect("scene geometry is validated")
            }
        }
    }

    /// Tag position in the geometry space at the given pose.
    pub fn tag_point(&self, pose: &Pose, i: usize) -> Result<Vector3<f64>> {
        match self.planar_base_height {
            None => {
                let p = pose.transform_tag(self.layout.local(i))?;
                Ok(if p.len() == 2 {
                    Vector3::new(p[0], p[1], 0.0)
                } else {
                    Vector3::new(p[0], p[1], p[2])
                })
            }
            Some(base) => {
                if pose.dim() != 2 {
                    return Err(Error::DimensionMismatch(
                        "planar scene expects a 2D pose".into(),
                    ));
                }
                let l = self.layout.local(i);
                let xy = pose.transform_tag(&DVector::from_vec(vec![l[0], l[1]]))?;
                Ok(Vector3::new(xy[0], xy[1], base + l[2]))
            }
        }
    }

    fn anchor_point(&self, j: usize) -> Vector3<f64> {
        let q = self.anchors.position(j);
        if q.len() == 2 {
            Vector3::new(q[0], q[1], 0.0)
        } else {
            Vector3::new(q[0], q[1], q[2])
        }
    }

    /// Vehicle origin and rotation in the geometry space.
    fn body_frame(&self, pose: &Pose) -> Result<(Vector3<f64>, DMatrix<f64>)> {
        match self.planar_base_height {
            None => {
                let p = pose.position();
                let origin = if p.len() == 2 {
                    Vector3::new(p[0], p[1], 0.0)
                } else {
                    Vector3::new(p[0], p[1], p[2])
                };
                let r = if pose.dim() == 2 {
                    let r2 = pose.rotation();
                    let mut r3 = DMatrix::identity(3, 3);
                    r3.view_mut((0, 0), (2, 2)).copy_from(&r2);
                    r3
                } else {
                    pose.rotation()
                };
                Ok((origin, r))
            }
            Some(base) => {
                let p = pose.position();
                let origin = Vector3::new(p[0], p[1], base);
                let r2 = rotation_from_angles(&[pose.yaw()], 2)?;
                let mut r3 = DMatrix::identity(3, 3);
                r3.view_mut((0, 0), (2, 2)).copy_from(&r2);
                Ok((origin, r3))
            }
        }
    }

    /// True range in the geometry space between tag `i` and anchor `j`.
    pub fn true_range(&self, pose: &Pose, i: usize, j: usize) -> Result<f64> {
        Ok((self.tag_point(pose, i)? - self.anchor_point(j)).norm())
    }

    /// Exact squared-distance matrix of all nodes at the given pose.
    pub fn true_edm(&self, pose: &Pose) -> Result<DMatrix<f64>> {
        let mut pts: Vec<DVector<f64>> = Vec::with_capacity(self.num_anchors() + self.num_tags());
        for j in 0..self.num_anchors() {
            let q = self.anchor_point(j);
            pts.push(DVector::from_vec(vec![q[0], q[1], q[2]]));
        }
        for i in 0..self.num_tags() {
            let p = self.tag_point(pose, i)?;
            pts.push(DVector::from_vec(vec![p[0], p[1], p[2]]));
        }
        Ok(exact_edm(&pts))
    }

    /// Bounding box of the anchors and obstacles, for sanity checks.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for j in 0..self.num_anchors() {
            let q = self.anchor_point(j);
            for a in 0..3 {
                lo[a] = lo[a].min(q[a]);
                hi[a] = hi[a].max(q[a]);
            }
        }
        for b in &self.obstacles {
            let (bl, bh) = (b.min(), b.max());
            for a in 0..3 {
                lo[a] = lo[a].min(bl[a]);
                hi[a] = hi[a].max(bh[a]);
            }
        }
        (lo, hi)
    }
}

/// Timed pose sequence, strictly increasing in time.
#[derive(Debug, Clone)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("trajectory must not be empty".into()));
        }
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidInput(
                "trajectory timestamps must strictly increase".into(),
            ));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, k: usize) -> &(f64, Pose) {
        &self.samples[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, Pose)> {
        self.samples.iter()
    }
}

/// Constant-speed planar ride around a closed polyline, sampled at a fixed
/// rate; the heading follows the direction of travel.
pub fn circuit_trajectory(
    waypoints: &[(f64, f64)],
    speed: f64,
    epochs: usize,
    rate_hz: f64,
) -> Result<Trajectory> {
    if speed <= 0.0 {
        return Err(Error::InvalidInput("speed must be positive".into()));
    }
    let duration = epochs as f64 / rate_hz;
    scheduled_circuit_trajectory(waypoints, &[(speed, duration)], epochs, rate_hz)
}

/// Ride around a closed polyline following a piecewise speed schedule of
/// (speed m/s, duration s) legs; zero-speed legs are dwell phases. The
/// heading follows the direction of travel and holds during dwells.
pub fn scheduled_circuit_trajectory(
    waypoints: &[(f64, f64)],
    schedule: &[(f64, f64)],
    epochs: usize,
    rate_hz: f64,
) -> Result<Trajectory> {
    if waypoints.len() < 2 {
        return Err(Error::InvalidInput("need at least two waypoints".into()));
    }
    if rate_hz <= 0.0 {
        return Err(Error::InvalidInput("rate must be positive".into()));
    }
    if schedule.is_empty()
        || schedule
            .iter()
            .any(|&(v, d)| v < 0.0 || d <= 0.0 || !v.is_finite())
    {
        return Err(Error::InvalidInput(
            "schedule legs need nonnegative speed and positive duration".into(),
        ));
    }
    let n = waypoints.len();
    let mut seg_len = Vec::with_capacity(n);
    for k in 0..n {
        let (x0, y0) = waypoints[k];
        let (x1, y1) = waypoints[(k + 1) % n];
        seg_len.push(((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt());
    }
    let total: f64 = seg_len.iter().sum();
    let mut samples = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let t = e as f64 / rate_hz;
        // Arc length travelled by time t under the schedule (last leg
        // extends indefinitely).
        let mut remaining = t;
        let mut travelled = 0.0;
        for (idx, &(v, d)) in schedule.iter().enumerate() {
            let span = if idx + 1 == schedule.len() {
                remaining
            } else {
                remaining.min(d)
            };
            travelled += v * span;
            remaining -= span;
            if remaining <= 0.0 {
                break;
            }
        }
        let mut s = travelled % total;
        let mut k = 0;
        while s > seg_len[k] {
            s -= seg_len[k];
            k = (k + 1) % n;
        }
        let (x0, y0) = waypoints[k];
        let (x1, y1) = waypoints[(k + 1) % n];
        let f = if seg_len[k] > 0.0 {
            s / seg_len[k]
        } else {
            0.0
        };
        let yaw = (y1 - y0).atan2(x1 - x0);
        samples.push((t, Pose::planar(x0 + f * (x1 - x0), y0 + f * (y1 - y0), yaw)));
    }
    Trajectory::new(samples)
}

/// Gaussian range-noise model with its base RNG seed.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidInput("sigma must be nonnegative".into()));
        }
        Ok(Self { sigma, seed })
    }
}

/// Ground-truth motion attached to a scene.
#[derive(Debug, Clone)]
pub enum SceneMotion {
    Static(Pose),
    Trajectory(Trajectory),
}

/// A scene together with its ground-truth motion.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub scene: Scene,
    pub motion: SceneMotion,
}

impl Scenario {
    pub fn static_pose(&self) -> Result<&Pose> {
        match &self.motion {
            SceneMotion::Static(p) => Ok(p),
            SceneMotion::Trajectory(_) => Err(Error::InvalidInput(
                "scenario has a trajectory, not a static pose".into(),
            )),
        }
    }

    pub fn trajectory(&self) -> Result<&Trajectory> {
        match &self.motion {
            SceneMotion::Trajectory(t) => Ok(t),
            SceneMotion::Static(_) => Err(Error::InvalidInput(
                "scenario has a static pose, not a trajectory".into(),
            )),
        }
    }
}

/// Line-of-sight visibility of every tag–anchor pair at a pose: a pair is
/// visible when the connecting segment stays clear of every environment
/// obstacle and of the vehicle cargo, and respects the range limit.
pub fn compute_visibility(scene: &Scene, pose: &Pose) -> Result<VisibilityMask> {
    let mut mask = VisibilityMask::all_visible(scene.num_anchors(), scene.num_tags());
    let needs_geometry =
        !scene.obstacles.is_empty() || scene.cargo.is_some() || scene.range_limit.is_some();
    if !needs_geometry {
        return Ok(mask);
    }
    let (origin, r3) = scene.body_frame(pose)?;
    for i in 0..scene.num_tags() {
        let p = scene.tag_point(pose, i)?;
        for j in 0..scene.num_anchors() {
            let q = scene.anchor_point(j);
            let mut visible = true;
            if let Some(limit) = scene.range_limit {
                visible &= (q - p).norm() <= limit;
            }
            if visible {
                for b in &scene.obstacles {
                    if b.blocks_segment(&p, &q) {
                        visible = false;
                        break;
                    }
                }
            }
            if visible {
                if let Some(cargo) = &scene.cargo {
                    // Test in the body frame, where the cargo box is axis
                    // aligned.
                    let to_body = |w: &Vector3<f64>| {
                        let d = w - origin;
                        let mut out = Vector3::zeros();
                        for row in 0..3 {
                            out[row] =
                                r3[(0, row)] * d[0] + r3[(1, row)] * d[1] + r3[(2, row)] * d[2];
                        }
                        out
                    };
                    if cargo.blocks_segment(&to_body(&p), &to_body(&q)) {
                        visible = false;
                    }
                }
            }
            mask.set(j, i, visible);
        }
    }
    Ok(mask)
}

/// Draws one epoch of TOF measurements: true range plus Gaussian noise for
/// every visible pair. Deterministic in (noise.seed, stream); draws follow
/// tag-major, anchor-ascending order.
pub fn simulate_epoch(
    scene: &Scene,
    pose: &Pose,
    noise: &NoiseModel,
    stream: u64,
) -> Result<TofMeasurementSet> {
    let mask = compute_visibility(scene, pose)?;
    let mut rng = ChaCha12Rng::seed_from_u64(noise.seed);
    rng.set_stream(stream);
    let mut tofs = TofMeasurementSet::new(scene.num_tags(), noise.sigma);
    for i in 0..scene.num_tags() {
        for j in 0..scene.num_anchors() {
            if !mask.is_visible(j, i) {
                continue;
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            let r = scene.true_range(pose, i, j)?;
            tofs.add(i, j, (r + noise.sigma * z).max(0.0))?;
        }
    }
    Ok(tofs)
}

/// The three builtin benchmark scenes.
#[derive(Debug, Clone)]
pub struct BuiltinScenes {
    pub planar: Scenario,
    pub spatial: Scenario,
    pub warehouse: Scenario,
}

/// Builds the builtin scenes: a 2D five-anchor scene, a 3D six-anchor
/// scene (both obstacle free) and the occluded warehouse with 17 ceiling
/// anchors, three vehicle tags, shelf blocks and a cargo box.
pub fn builtin_scenes() -> BuiltinScenes {
    let planar_scene = Scene::new(
        "paper-2d",
        AnchorSet::from_rows(&[
            vec![40.0, 50.0],
            vec![30.0, 20.0],
            vec![0.0, 10.0],
            vec![-50.0, -50.0],
            vec![-20.0, -30.0],
        ])
        .unwrap(),
        TagLayout::from_rows(&[
            vec![0.0, 0.0],
            vec![5.0, 0.0],
            vec![5.0, 5.0],
            vec![0.0, 5.0],
        ])
        .unwrap(),
        Vec::new(),
        None,
        None,
        None,
    )
    .unwrap();
    let planar = Scenario {
        scene: planar_scene,
        motion: SceneMotion::Static(Pose::planar(2.0, 10.0, 1.047)),
    };

    let spatial_scene = Scene::new(
        "paper-3d",
        AnchorSet::from_rows(&[
            vec![-50.0, -65.0, -70.0],
            vec![50.0, -35.0, -25.0],
            vec![-50.0, 5.0, -5.0],
            vec![15.0, -45.0, -15.0],
            vec![-15.0, 30.0, 30.0],
            vec![50.0, 45.0, 55.0],
        ])
        .unwrap(),
        TagLayout::from_rows(&[
            vec![1.5, 0.0, 0.0],
            vec![4.5, 0.0, 0.0],
            vec![4.5, 4.5, 0.0],
            vec![4.5, 4.5, 0.0],
            vec![3.0, 3.0, 3.0],
        ])
        .unwrap(),
        Vec::new(),
        None,
        None,
        None,
    )
    .unwrap();
    let spatial = Scenario {
        scene: spatial_scene,
        motion: SceneMotion::Static(Pose::spatial(5.0, 5.0, 2.0, -0.436, 0.349, 0.175)),
    };

    BuiltinScenes {
        planar,
        spatial,
        warehouse: warehouse_scenario(),
    }
}

/// Warehouse floor plan: a 47 m × 35 m hall with eight 6 m wide, 5 m tall
/// shelf blocks in a 2×4 grid. The vehicle (4×2×0.3 m, body origin at deck
/// height 0.3 m) carries a 3.6×1.6×2.8 m cargo box and three tags at the
/// front deck corners and rear center, 0.15 m above ground. Seventeen
/// anchors hang at 6 m. The truth trajectory rides the aisle ring at
/// 0.804 m/s, three laps in 300 s at 1 Hz.
fn warehouse_scenario() -> Scenario {
    let anchor_en: [(f64, f64); 17] = [
        (0.5, 5.0),
        (4.8, 23.2),
        (0.5, 35.0),
        (47.0, 5.0),
        (41.2, 23.2),
        (47.0, 35.0),
        (10.0, 0.5),
        (31.0, 0.5),
        (20.8, 5.8),
        (20.8, 34.2),
        (10.0, 27.8),
        (31.0, 27.8),
        (10.0, 12.2),
        (31.0, 12.2),
        (15.2, 16.8),
        (4.8, 16.8),
        (41.2, 16.8),
    ];
    let anchors = AnchorSet::new(
        anchor_en
            .iter()
            .map(|&(e, n)| DVector::from_vec(vec![e, n, 6.0]))
            .collect(),
    )
    .unwrap();
    let layout = TagLayout::from_rows(&[
        vec![2.0, 1.0, -0.15],
        vec![2.0, -1.0, -0.15],
        vec![-2.0, 0.0, -0.15],
    ])
    .unwrap();

    // Shelf racks, 6 m wide and 5 m tall: two center columns of four rows
    // framing the ring, plus outer columns along the west and east walls
    // with gaps the wall anchors peek through. The ring aisles run under
    // the ceiling anchors.
    let mut obstacles = Vec::new();
    for &cx in &[15.75, 25.85] {
        for &cy in &[2.8, 8.8, 26.2, 31.0] {
            obstacles
                .push(Aabb::new(Vector3::new(cx, cy, 2.5), Vector3::new(6.5, 2.4, 5.0)).unwrap());
        }
    }
    // Pallet stacks: several in front of the wall rack lines and one on the
    // floor of the central area.
    for &(cx, cy) in &[(7.4, 8.8), (7.4, 14.5), (36.1, 20.5)] {
        obstacles.push(Aabb::new(Vector3::new(cx, cy, 2.5), Vector3::new(2.4, 2.4, 5.0)).unwrap());
    }

    let cargo = Aabb::new(Vector3::new(0.0, 0.0, 1.4), Vector3::new(3.6, 1.6, 2.8)).unwrap();

    let scene = Scene::new(
        "paper-warehouse",
        anchors,
        layout,
        obstacles,
        Some(cargo),
        Some(21.0),
        Some(0.3),
    )
    .unwrap();

    // Three laps of the aisle ring at 0.78 m/s with a 20 s pick-and-place
    // stop in the south aisle on every lap.
    let trajectory = scheduled_circuit_trajectory(
        &[(10.0, 12.2), (31.0, 12.2), (31.0, 23.2), (10.0, 23.2)],
        &[
            (0.78, 2.56),
            (0.0, 25.0),
            (0.78, 82.05),
            (0.0, 25.0),
            (0.78, 82.05),
            (0.0, 25.0),
            (0.78, 58.34),
        ],
        300,
        1.0,
    )
    .unwrap();

    Scenario {
        scene,
        motion: SceneMotion::Trajectory(trajectory),
    }
}

/// Looks up a builtin scenario by its CLI name.
pub fn scenario_by_name(name: &str) -> Option<Scenario> {
    let scenes = builtin_scenes();
    match name {
        "paper-2d" => Some(scenes.planar),
        "paper-3d" => Some(scenes.spatial),
        "paper-warehouse" => Some(scenes.warehouse),
        _ => None,
    }
}

/// One method's outcome at one epoch or run.
#[derive(Debug, Clone)]
pub struct MethodEpoch {
    pub method: Method,
    pub feasible: bool,
    pub pose: Option<Pose>,
    pub position_error: Option<f64>,
    pub attitude_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wallclock_us: u128,
}

/// Per-epoch record of a trajectory run.
#[derive(Debug, Clone)]
pub struct EpochResult {
    pub epoch: usize,
    pub time: f64,
    pub truth: Pose,
    pub counts: Vec<usize>,
    pub available: bool,
    pub methods: Vec<MethodEpoch>,
    pub edm_error_triangle: Option<f64>,
    pub edm_error_shortest_path: Option<f64>,
}

fn run_method(
    method: Method,
    tofs: &TofMeasurementSet,
    problem: &ProblemGeometry,
    config: &PipelineConfig,
    truth: &Pose,
) -> MethodEpoch {
    let start = Instant::now();
    let (pose, iterations, converged) = match method {
        Method::ErblEdmc => match run_pipeline(tofs, problem, config, BoundStrategy::Triangle) {
            Ok(r) => (
                Some(r.estimate.pose),
                r.estimate.iterations_used,
                r.estimate.converged,
            ),
            Err(_) => (None, 0, false),
        },
        Method::ErblShortestPath => {
            match run_pipeline(tofs, problem, config, BoundStrategy::ShortestPath) {
                Ok(r) => (
                    Some(r.estimate.pose),
                    r.estimate.iterations_used,
                    r.estimate.converged,
                ),
                Err(_) => (None, 0, false),
            }
        }
        Method::Dac => match dac_estimate(tofs, problem) {
            DacOutcome::Feasible { pose, .. } => (Some(pose), 0, true),
            DacOutcome::Infeasible { .. } => (None, 0, false),
        },
    };
    let wallclock_us = start.elapsed().as_micros();
    let (position_error, attitude_error) = match &pose {
        Some(p) => match epoch_error(p, truth) {
            Ok((dp, da)) => (Some(dp), Some(da)),
            Err(_) => (None, None),
        },
        None => (None, None),
    };
    MethodEpoch {
        method,
        feasible: pose.is_some(),
        pose,
        position_error,
        attitude_error,
        iterations,
        converged,
        wallclock_us,
    }
}

/// Completion error of one bound strategy against the true EDM.
fn completion_error(
    scene: &Scene,
    problem: &ProblemGeometry,
    tofs: &TofMeasurementSet,
    pose: &Pose,
    config: &PipelineConfig,
    strategy: BoundStrategy,
) -> Option<f64> {
    let anchors = problem.embedding_anchors();
    let layout = problem.embedding_layout();
    let measured = build_measured_edm(&anchors, &layout, tofs).ok()?;
    let bounds = match strategy {
        BoundStrategy::Triangle => estimate_bounds(&measured, &layout, tofs.sigma()).ok()?,
        BoundStrategy::ShortestPath => shortest_path_bounds(&measured).ok()?,
    };
    let completed: CompletedEdm = complete_edm(&measured, &bounds, &config.completion);
    let truth = scene.true_edm(pose).ok()?;
    edm_frobenius_error(&completed.d_hat, &truth).ok()
}

/// Runs every requested method over the scenario trajectory, one epoch at a
/// time. Epochs are independent and processed in parallel; per-epoch RNG
/// streams make the output independent of the thread count.
pub fn run_trajectory(
    scenario: &Scenario,
    methods: &[Method],
    noise: &NoiseModel,
) -> Result<Vec<EpochResult>> {
    let trajectory = scenario.trajectory()?;
    let scene = &scenario.scene;
    let problem = scene.problem();
    let config = PipelineConfig::for_problem(&problem, noise.sigma);

    let epochs: Vec<usize> = (0..trajectory.len()).collect();
    let results: Vec<Result<EpochResult>> = epochs
        .par_iter()
        .map(|&e| {
            let (time, pose) = trajectory.sample(e).clone();
            let tofs = simulate_epoch(scene, &pose, noise, e as u64)?;
            let mask = tofs.visibility(scene.num_anchors());
            let available = check_availability(&mask, problem.dim()).available;
            let methods_out: Vec<MethodEpoch> = methods
                .iter()
                .map(|&m| run_method(m, &tofs, &problem, &config, &pose))
                .collect();
            let edm_error_triangle = completion_error(
                scene,
                &problem,
                &tofs,
                &pose,
                &config,
                BoundStrategy::Triangle,
            );
            let edm_error_shortest_path = completion_error(
                scene,
                &problem,
                &tofs,
                &pose,
                &config,
                BoundStrategy::ShortestPath,
            );
            Ok(EpochResult {
                epoch: e,
                time,
                truth: pose,
                counts: mask.counts_per_tag(),
                available,
                methods: methods_out,
                edm_error_triangle,
                edm_error_shortest_path,
            })
        })
        .collect();
    results.into_iter().collect()
}

/// One method's row in the Monte Carlo table at one noise level.
#[derive(Debug, Clone)]
pub struct MonteCarloCell {
    pub sigma: f64,
    pub method: Method,
    pub rmse_attitude: f64,
    pub rmse_position: f64,
    pub feasible_runs: usize,
    pub mean_iterations: f64,
    pub mean_wallclock_us: f64,
}

/// CRLB row per noise level.
#[derive(Debug, Clone)]
pub struct CrlbRow {
    pub sigma: f64,
    pub attitude_bound: f64,
    pub position_bound: f64,
}

#[derive(Debug, Clone)]
pub struct MonteCarloTable {
    pub cells: Vec<MonteCarloCell>,
    pub crlb: Vec<CrlbRow>,
}

/// Repeated-draw experiment at a static pose over a noise grid. Run υ uses
/// RNG stream υ regardless of σ, so methods and noise levels see paired
/// noise and the comparison is seed-matched.
pub fn run_monte_carlo(
    scenario: &Scenario,
    noise_grid: &[f64],
    runs: usize,
    methods: &[Method],
    seed: u64,
) -> Result<MonteCarloTable> {
    let pose = scenario.static_pose()?.clone();
    let scene = &scenario.scene;
    let problem = scene.problem();
    let mask = compute_visibility(scene, &pose)?;

    let mut cells = Vec::new();
    let mut crlb_rows = Vec::new();
    for &sigma in noise_grid {
        if sigma > 0.0 {
            let bound = crlb(&pose, &problem, &mask, sigma)?;
            crlb_rows.push(CrlbRow {
                sigma,
                attitude_bound: bound.attitude_bound,
                position_bound: bound.position_bound,
            });
        } else {
            crlb_rows.push(CrlbRow {
                sigma,
                attitude_bound: 0.0,
                position_bound: 0.0,
            });
        }
        let noise = NoiseModel::new(sigma, seed)?;
        let config = PipelineConfig::for_problem(&problem, sigma);
        let per_run: Vec<Vec<MethodEpoch>> = (0..runs)
            .into_par_iter()
            .map(|run| {
                let tofs = simulate_epoch(scene, &pose, &noise, run as u64)
                    .expect("scene geometry is validated");
                methods
                    .iter()
                    .map(|&m| run_method(m, &tofs, &problem, &config, &pose))
                    .collect()
            })
            .collect();
        for (mi, &method) in methods.iter().enumerate() {
            let outcomes: Vec<&MethodEpoch> = per_run.iter().map(|r| &r[mi]).collect();
            let feasible: Vec<&&MethodEpoch> = outcomes.iter().filter(|o| o.feasible).collect();
            let att: Vec<f64> = feasible.iter().filter_map(|o| o.attitude_error).collect();
            let pos: Vec<f64> = feasible.iter().filter_map(|o| o.position_error).collect();
            let rmse = |v: &[f64]| {
                if v.is_empty() {
                    f64::NAN
                } else {
                    (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt()
                }
            };
            let mean_iterations = if feasible.is_empty() {
                0.0
            } else {
                feasible.iter().map(|o| o.iterations as f64).sum::<f64>() / feasible.len() as f64
            };
            let mean_wallclock_us = if outcomes.is_empty() {
                0.0
            } else {
                outcomes.iter().map(|o| o.wallclock_us as f64).sum::<f64>() / outcomes.len() as f64
            };
            cells.push(MonteCarloCell {
                sigma,
                method,
                rmse_attitude: rmse(&att),
                rmse_position: rmse(&pos),
                feasible_runs: feasible.len(),
                mean_iterations,
                mean_wallclock_us,
            });
        }
    }
    Ok(MonteCarloTable {
        cells,
        crlb: crlb_rows,
    })
}
