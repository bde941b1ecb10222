//! Geometry primitives shared by the whole toolkit: anchors, tag layouts,
//! rotations, vehicle poses and time-of-flight measurement sets.
//!
//! Conventions:
//! - 2D attitude is a single yaw angle ψ with R = [[cos ψ, −sin ψ], [sin ψ, cos ψ]].
//! - 3D attitude is (roll φ, pitch γ, yaw ψ) with R = Rz(ψ)·Ry(γ)·Rx(φ).
//! - Angles are reported wrapped to (−π, π].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a % two_pi;
    if w <= -std::f64::consts::PI {
        w += two_pi;
    } else if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// Fixed anchor positions in the global frame.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    positions: Vec<DVector<f64>>,
    dim: usize,
}

impl AnchorSet {
    pub fn new(positions: Vec<DVector<f64>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInput("anchor set must not be empty".into()));
        }
        let dim = positions[0].len();
        if dim != 2 && dim != 3 {
            return Err(Error::DimensionMismatch(format!(
                "anchors must be 2- or 3-dimensional, got {dim}"
            )));
        }
        if positions.iter().any(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch(
                "all anchors must share one dimension".into(),
            ));
        }
        Ok(Self { positions, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.iter().map(|r| DVector::from_vec(r.clone())).collect())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn position(&self, j: usize) -> &DVector<f64> {
        &self.positions[j]
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.positions.iter()
    }

    /// Pairwise anchor distance r_ij.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        (&self.positions[i] - &self.positions[j]).norm()
    }
}

/// Known tag positions in the body frame.
#[derive(Debug, Clone)]
pub struct TagLayout {
    locals: Vec<DVector<f64>>,
    dim: usize,
}

impl TagLayout {
    pub fn new(locals: Vec<DVector<f64>>) -> Result<Self> {
        if locals.len() < 2 {
            return Err(Error::InvalidInput("a layout needs at least 2 tags".into()));
        }
        let dim = locals[0].len();
        if dim != 2 && dim != 3 {
            return Err(Error::DimensionMismatch(format!(
                "tags must be 2- or 3-dimensional, got {dim}"
            )));
        }
        if locals.iter().any(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch(
                "all tags must share one dimension".into(),
            ));
        }
        Ok(Self { locals, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.iter().map(|r| DVector::from_vec(r.clone())).collect())
    }

    /// Builds a layout from a matrix whose columns are the tag positions.
    pub fn from_columns(columns: &DMatrix<f64>) -> Result<Self> {
        Self::new(
            (0..columns.ncols())
                .map(|i| DVector::from_column_slice(columns.column(i).as_slice()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locals.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn local(&self, i: usize) -> &DVector<f64> {
        &self.locals[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.locals.iter()
    }

    /// Inter-tag distance d_ij, invariant under rigid transformation.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        (&self.locals[i] - &self.locals[j]).norm()
    }

    /// Hollow symmetric matrix of inter-tag distances.
    pub fn inter_tag_distances(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = self.distance(i, j);
                d[(i, j)] = v;
                d[(j, i)] = v;
            }
        }
        d
    }

    /// True when all tags lie on one line (within `tol` relative spread).
    pub fn is_collinear(&self, tol: f64) -> bool {
        let n = self.len();
        if n < 3 {
            return true;
        }
        let mean = self.locals.iter().sum::<DVector<f64>>() / n as f64;
        let mut scatter = DMatrix::<f64>::zeros(self.dim, self.dim);
        for l in &self.locals {
            let c = l - &mean;
            scatter += &c * c.transpose();
        }
        let eig = scatter.symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ev[1] <= tol * ev[0].max(f64::MIN_POSITIVE)
    }
}

/// Rotation matrix from body-frame attitude angles.
///
/// `attitude` holds ψ for 2D and (φ, γ, ψ) for 3D.
pub fn rotation_from_angles(attitude: &[f64], dim: usize) -> Result<DMatrix<f64>> {
    match (dim, attitude.len()) {
        (2, 1) => {
            let (s, c) = attitude[0].sin_cos();
            Ok(DMatrix::from_row_slice(2, 2, &[c, -s, s, c]))
        }
        (3, 3) => {
            let (sr, cr) = attitude[0].sin_cos();
            let (sp, cp) = attitude[1].sin_cos();
            let (sy, cy) = attitude[2].sin_cos();
            let rx = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr]);
            let ry = DMatrix::from_row_slice(3, 3, &[cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp]);
            let rz = DMatrix::from_row_slice(3, 3, &[cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0]);
            Ok(rz * ry * rx)
        }
        _ => Err(Error::DimensionMismatch(format!(
            "dimension {dim} expects {} attitude angle(s), got {}",
            if dim == 2 { 1 } else { 3 },
            attitude.len()
        ))),
    }
}

/// Inverse of [`rotation_from_angles`]; angles wrapped to (−π, π].
///
/// Fails with [`Error::GimbalLock`] when 3D pitch is within 1e-8 of ±π/2.
pub fn angles_from_rotation(r: &DMatrix<f64>) -> Result<Vec<f64>> {
    match r.nrows() {
        2 => Ok(vec![wrap_angle(r[(1, 0)].atan2(r[(0, 0)]))]),
        3 => {
            let sp = -r[(2, 0)];
            let cp = (1.0 - sp * sp).max(0.0).sqrt();
            if cp < 1e-8 {
                return Err(Error::GimbalLock);
            }
            let pitch = sp.asin();
            let roll = r[(2, 1)].atan2(r[(2, 2)]);
            let yaw = r[(1, 0)].atan2(r[(0, 0)]);
            Ok(vec![wrap_angle(roll), wrap_angle(pitch), wrap_angle(yaw)])
        }
        n => Err(Error::DimensionMismatch(format!(
            "rotation must be 2x2 or 3x3, got {n}x{n}"
        ))),
    }
}

/// Partial derivatives ∂R/∂θ_a for each attitude angle, in angle order.
pub fn rotation_derivatives(attitude: &[f64], dim: usize) -> Result<Vec<DMatrix<f64>>> {
    match (dim, attitude.len()) {
        (2, 1) => {
            let (s, c) = attitude[0].sin_cos();
            Ok(vec![DMatrix::from_row_slice(2, 2, &[-s, -c, c, -s])])
        }
        (3, 3) => {
            let (sr, cr) = attitude[0].sin_cos();
            let (sp, cp) = attitude[1].sin_cos();
            let (sy, cy) = attitude[2].sin_cos();
            let rx = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr]);
            let ry = DMatrix::from_row_slice(3, 3, &[cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp]);
            let rz = DMatrix::from_row_slice(3, 3, &[cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0]);
            let drx = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, -sr, -cr, 0.0, cr, -sr]);
            let dry = DMatrix::from_row_slice(3, 3, &[-sp, 0.0, cp, 0.0, 0.0, 0.0, -cp, 0.0, -sp]);
            let drz = DMatrix::from_row_slice(3, 3, &[-sy, -cy, 0.0, cy, -sy, 0.0, 0.0, 0.0, 0.0]);
            Ok(vec![&rz * &ry * drx, &rz * dry * &rx, drz * ry * rx])
        }
        _ => Err(Error::DimensionMismatch(
            "angle count does not match dimension".into(),
        )),
    }
}

/// Vehicle pose: body-origin position p_c in the global frame plus attitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    position: DVector<f64>,
    attitude: Vec<f64>,
}

impl Pose {
    pub fn new(position: DVector<f64>, attitude: Vec<f64>) -> Result<Self> {
        let dim = position.len();
        rotation_from_angles(&attitude, dim)?;
        Ok(Self { position, attitude })
    }

    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            position: DVector::from_vec(vec![x, y]),
            attitude: vec![yaw],
        }
    }

    pub fn spatial(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            position: DVector::from_vec(vec![x, y, z]),
            attitude: vec![roll, pitch, yaw],
        }
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    pub fn position(&self) -> &DVector<f64> {
        &self.position
    }

    pub fn attitude(&self) -> &[f64] {
        &self.attitude
    }

    pub fn yaw(&self) -> f64 {
        *self.attitude.last().unwrap()
    }

    pub fn rotation(&self) -> DMatrix<f64> {
        rotation_from_angles(&self.attitude, self.dim()).expect("validated on construction")
    }

    /// Maps a body-frame point into the global frame: p_c + R·l.
    pub fn transform_tag(&self, local: &DVector<f64>) -> Result<DVector<f64>> {
        if local.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "pose is {}-dimensional, tag is {}-dimensional",
                self.dim(),
                local.len()
            )));
        }
        Ok(&self.position + self.rotation() * local)
    }
}

/// Per-tag TOF measurements: visible anchor indices and noisy ranges.
#[derive(Debug, Clone)]
pub struct TofMeasurementSet {
    per_tag: Vec<Vec<(usize, f64)>>,
    sigma: f64,
}

impl TofMeasurementSet {
    pub fn new(num_tags: usize, sigma: f64) -> Self {
        Self {
            per_tag: vec![Vec::new(); num_tags],
            sigma,
        }
    }

    /// Records a range for (tag, anchor). Duplicate anchors and negative
    /// ranges are rejected.
    pub fn add(&mut self, tag: usize, anchor: usize, range: f64) -> Result<()> {
        if tag >= self.per_tag.len() {
            return Err(Error::InvalidInput(format!("tag index {tag} out of range")));
        }
        if range < 0.0 || !range.is_finite() {
            return Err(Error::InvalidInput(format!(
                "range for tag {tag}, anchor {anchor} must be finite and nonnegative"
            )));
        }
        let list = &mut self.per_tag[tag];
        if list.iter().any(|&(a, _)| a == anchor) {
            return Err(Error::InvalidInput(format!(
                "duplicate measurement for tag {tag}, anchor {anchor}"
            )));
        }
        list.push((anchor, range));
        list.sort_by_key(|&(a, _)| a);
        Ok(())
    }

    pub fn num_tags(&self) -> usize {
        self.per_tag.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Visible (anchor, range) pairs of one tag, sorted by anchor index.
    pub fn visible(&self, tag: usize) -> &[(usize, f64)] {
        &self.per_tag[tag]
    }

    pub fn range(&self, tag: usize, anchor: usize) -> Option<f64> {
        self.per_tag[tag]
            .iter()
            .find(|&&(a, _)| a == anchor)
            .map(|&(_, r)| r)
    }

    /// Measurement counts M_i per tag.
    pub fn counts(&self) -> Vec<usize> {
        self.per_tag.iter().map(|v| v.len()).collect()
    }

    pub fn total(&self) -> usize {
        self.per_tag.iter().map(|v| v.len()).sum()
    }

    pub fn visibility(&self, num_anchors: usize) -> VisibilityMask {
        let mut mask = VisibilityMask::all_hidden(num_anchors, self.num_tags());
        for (tag, list) in self.per_tag.iter().enumerate() {
            for &(anchor, _) in list {
                mask.set(anchor, tag, true);
            }
        }
        mask
    }
}

/// Boolean availability grid; rows are anchors, columns are tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask {
    grid: Vec<bool>,
    anchors: usize,
    tags: usize,
}

impl VisibilityMask {
    pub fn all_visible(anchors: usize, tags: usize) -> Self {
        Self {
            grid: vec![true; anchors * tags],
            anchors,
            tags,
        }
    }

    pub fn all_hidden(anchors: usize, tags: usize) -> Self {
        Self {
            grid: vec![false; anchors * tags],
            anchors,
            tags,
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors
    }

    pub fn num_tags(&self) -> usize {
        self.tags
    }

    pub fn set(&mut self, anchor: usize, tag: usize, visible: bool) {
        self.grid[anchor * self.tags + tag] = visible;
    }

    pub fn is_visible(&self, anchor: usize, tag: usize) -> bool {
        self.grid[anchor * self.tags + tag]
    }

    /// Measurement counts M_i per tag.
    pub fn counts_per_tag(&self) -> Vec<usize> {
        (0..self.tags)
            .map(|t| (0..self.anchors).filter(|&a| self.is_visible(a, t)).count())
            .collect()
    }

    pub fn total(&self) -> usize {
        self.grid.iter().filter(|&&v| v).count()
    }

    /// Number of tags that observe at least one anchor.
    pub fn observing_tags(&self) -> usize {
        self.counts_per_tag().iter().filter(|&&m| m > 0).count()
    }

    /// True when every pair visible in `other` is also visible here.
    pub fn dominates(&self, other: &VisibilityMask) -> bool {
        self.anchors == other.anchors
            && self.tags == other.tags
            && self
                .grid
                .iter()
                .zip(other.grid.iter())
                .all(|(a, b)| *a || !*b)
    }
}

/// Known vertical geometry for planar estimation over 3D ranges.
///
/// When a 2D pose is estimated from ranges measured in 3D (anchors overhead,
/// tags at fixed mounting heights), the out-of-plane components are known
/// constants and enter every range as a fixed vertical offset.
#[derive(Debug, Clone)]
pub struct VerticalGeometry {
    pub anchor_heights: Vec<f64>,
    pub tag_heights: Vec<f64>,
}

/// Estimation-side geometry: anchors and tag layout in the estimation
/// dimension, plus optional vertical offsets for planar-over-3D problems.
#[derive(Debug, Clone)]
pub struct ProblemGeometry {
    anchors: AnchorSet,
    layout: TagLayout,
    vertical: Option<VerticalGeometry>,
}

impl ProblemGeometry {
    pub fn new(
        anchors: AnchorSet,
        layout: TagLayout,
        vertical: Option<VerticalGeometry>,
    ) -> Result<Self> {
        if anchors.dim() != layout.dim() {
            return Err(Error::DimensionMismatch(
                "anchors and layout must share one dimension".into(),
            ));
        }
        if let Some(v) = &vertical {
            if anchors.dim() != 2 {
                return Err(Error::DimensionMismatch(
                    "vertical offsets only apply to planar estimation".into(),
                ));
            }
            if v.anchor_heights.len() != anchors.len() || v.tag_heights.len() != layout.len() {
                return Err(Error::DimensionMismatch(
                    "height lists must match anchor and tag counts".into(),
                ));
            }
        }
        Ok(Self {
            anchors,
            layout,
            vertical,
        })
    }

    pub fn dim(&self) -> usize {
        self.anchors.dim()
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

    pub fn vertical(&self) -> Option<&VerticalGeometry> {
        self.vertical.as_ref()
    }

    /// Attitude angle count ν of the pose being estimated.
    pub fn attitude_dim(&self) -> usize {
        if self.dim() == 2 {
            1
        } else {
            3
        }
    }

    /// Known vertical offset between tag `i` and anchor `j` (0 when the
    /// problem has no vertical component).
    pub fn dz_tag_anchor(&self, i: usize, j: usize) -> f64 {
        match &self.vertical {
            Some(v) => v.tag_heights[i] - v.anchor_heights[j],
            None => 0.0,
        }
    }

    /// Known vertical offset between tags `i` and `k`.
    pub fn dz_tag_tag(&self, i: usize, k: usize) -> f64 {
        match &self.vertical {
            Some(v) => v.tag_heights[i] - v.tag_heights[k],
            None => 0.0,
        }
    }

    /// Full range from an estimated tag position to anchor `j`, including
    /// any vertical offset.
    pub fn range_to_anchor(&self, tag_pos: &DVector<f64>, i: usize, j: usize) -> f64 {
        let planar = (tag_pos - self.anchors.position(j)).norm_squared();
        let dz = self.dz_tag_anchor(i, j);
        (planar + dz * dz).sqrt()
    }

    /// Full range between two estimated tag positions.
    pub fn range_between_tags(
        &self,
        pi: &DVector<f64>,
        pk: &DVector<f64>,
        i: usize,
        k: usize,
    ) -> f64 {
        let planar = (pi - pk).norm_squared();
        let dz = self.dz_tag_tag(i, k);
        (planar + dz * dz).sqrt()
    }

    /// Inter-tag distance including the vertical component; this is the value
    /// preserved by the rigid transformation.
    pub fn inter_tag_distance(&self, i: usize, k: usize) -> f64 {
        let planar = (self.layout.local(i) - self.layout.local(k)).norm_squared();
        let dz = self.dz_tag_tag(i, k);
        (planar + dz * dz).sqrt()
    }

    /// Embedding dimension of the node set (3 when vertical offsets exist).
    pub fn embedding_dim(&self) -> usize {
        if self.vertical.is_some() {
            3
        } else {
            self.dim()
        }
    }

    /// Anchor set in the embedding space (heights appended when present).
    pub fn embedding_anchors(&self) -> AnchorSet {
        match &self.vertical {
            None => self.anchors.clone(),
            Some(v) => AnchorSet::new(
                self.anchors
                    .iter()
                    .zip(v.anchor_heights.iter())
                    .map(|(p, &h)| DVector::from_vec(vec![p[0], p[1], h]))
                    .collect(),
            )
            .expect("lifted anchors are valid"),
        }
    }

    /// Tag layout in the embedding space. Heights are global constants under
    /// planar motion, so using them as the third local coordinate preserves
    /// all inter-tag distances.
    pub fn embedding_layout(&self) -> TagLayout {
        match &self.vertical {
            None => self.layout.clone(),
            Some(v) => TagLayout::new(
                self.layout
                    .iter()
                    .zip(v.tag_heights.iter())
                    .map(|(l, &h)| DVector::from_vec(vec![l[0], l[1], h]))
                    .collect(),
            )
            .expect("lifted layout is valid"),
        }
    }

    /// Estimation-frame tag positions implied by a pose.
    pub fn tag_positions(&self, pose: &Pose) -> Result<Vec<DVector<f64>>> {
        self.layout.iter().map(|l| pose.transform_tag(l)).collect()
    }

    /// True range between tag `i` at `pose` and anchor `j`.
    pub fn true_range(&self, pose: &Pose, i: usize, j: usize) -> Result<f64> {
        let p = pose.transform_tag(self.layout.local(i))?;
        Ok(self.range_to_anchor(&p, i, j))
    }
}
