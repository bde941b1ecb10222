//! Position and attitude estimation: a closed-form alignment of the
//! estimated tag positions to the known layout, then Gauss-Newton on the
//! original range problem, plus the three-step pipeline that chains EDM
//! completion, tag localization and pose refinement.

use nalgebra::{DMatrix, DVector};

use crate::analysis::check_availability;
use crate::edm::{
    build_measured_edm, complete_edm, estimate_bounds, shortest_path_bounds, CompletedEdm,
    CompletionConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{
    angles_from_rotation, rotation_derivatives, rotation_from_angles, wrap_angle, Pose,
    ProblemGeometry, TagLayout, TofMeasurementSet,
};
use crate::tag_localization::{coarse_tag_positions, refine_tag_positions, TagLocalizationConfig};

/// Settings for [`refine_pose`].
#[derive(Debug, Clone)]
pub struct PoseRefineConfig {
    /// Stop when ‖Δx̂‖ falls below this threshold ξ.
    pub step_tol: f64,
    /// Iteration cap q_max; exceeding it flags a convergence failure.
    pub max_iters: usize,
    /// TOF noise standard deviation σ (meters).
    pub sigma: f64,
    /// Per-measurement weights v_ij in stacking order; `None` applies the
    /// uniform σ⁻² weighting.
    pub weights: Option<Vec<f64>>,
}

impl PoseRefineConfig {
    pub fn new(sigma: f64) -> Self {
        Self {
            step_tol: 1e-8,
            max_iters: 20,
            sigma,
            weights: None,
        }
    }
}

/// A pose with the quantities produced alongside it by the solver.
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// (η+ν)² covariance (GᵀPG)⁻¹ at the solution.
    pub covariance: DMatrix<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Weighted range cost at the solution.
    pub objective_value: f64,
}

/// Closed-form pose from estimated tag positions: the rotation comes from
/// the SVD of the local-to-global cross-covariance with a determinant
/// correction, the position from the centroid residue p̄ − R̂·l̄.
pub fn closed_form_pose(tag_positions: &[DVector<f64>], layout: &TagLayout) -> Result<Pose> {
    let dim = layout.dim();
    let k = layout.len();
    if tag_positions.len() != k {
        return Err(Error::DimensionMismatch(
            "one estimated position per tag is required".into(),
        ));
    }
    if tag_positions.iter().any(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch(
            "tag positions must match the layout dimension".into(),
        ));
    }
    if dim == 3 {
        if k < 3 {
            return Err(Error::DegenerateLayout(
                "3D pose needs at least 3 tags".into(),
            ));
        }
        if layout.is_collinear(1e-12) {
            return Err(Error::DegenerateLayout(
                "collinear 3D tags leave the rotation about their line unobservable".into(),
            ));
        }
    }

    let l_bar = layout.iter().sum::<DVector<f64>>() / k as f64;
    let p_bar = tag_positions.iter().sum::<DVector<f64>>() / k as f64;
    let mut cross = DMatrix::<f64>::zeros(dim, dim);
    for (l, p) in layout.iter().zip(tag_positions.iter()) {
        cross += (l - &l_bar) * (p - &p_bar).transpose();
    }

    let svd = cross.svd(true, true);
    let u = svd.u.as_ref().expect("svd requested");
    let v = svd.v_t.as_ref().expect("svd requested").transpose();
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    // The rotation is determined when at most one singular value vanishes.
    if sv[dim - 2] <= 1e-12 * sv[0].max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateLayout(
            "cross-covariance is rank deficient; rotation is ambiguous".into(),
        ));
    }
    let mut correction = DMatrix::<f64>::identity(dim, dim);
    correction[(dim - 1, dim - 1)] = (&v * u.transpose()).determinant().signum();
    let rotation = v * correction * u.transpose();

    let position = &p_bar - &rotation * &l_bar;
    let attitude = angles_from_rotation(&rotation)?;
    Pose::new(position, attitude)
}

/// Stacked Gauss-Newton system at the pose (p_c, θ): design matrix rows
/// [∂r/∂p_c, ∂r/∂θ] and residuals δ − r.
fn pose_system(
    position: &DVector<f64>,
    attitude: &[f64],
    tofs: &TofMeasurementSet,
    problem: &ProblemGeometry,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let dim = problem.dim();
    let nu = problem.attitude_dim();
    let rotation = rotation_from_angles(attitude, dim)?;
    let derivs = rotation_derivatives(attitude, dim)?;
    let rows = tofs.total();
    let mut g = DMatrix::zeros(rows, dim + nu);
    let mut z = DVector::zeros(rows);
    let mut row = 0;
    for i in 0..problem.num_tags() {
        let l = problem.layout().local(i);
        let p = position + &rotation * l;
        for &(j, delta) in tofs.visible(i) {
            let range = problem.range_to_anchor(&p, i, j).max(1e-12);
            let diff = &p - problem.anchors().position(j);
            for c in 0..dim {
                g[(row, c)] = diff[c] / range;
            }
            for (a, dr) in derivs.iter().enumerate() {
                g[(row, dim + a)] = (diff.transpose() * dr * l)[(0, 0)] / range;
            }
            z[row] = delta - range;
            row += 1;
        }
    }
    Ok((g, z))
}

#[doc(hidden)]
pub fn pose_residual_system(
    position: &DVector<f64>,
    attitude: &[f64],
    tofs: &TofMeasurementSet,
    problem: &ProblemGeometry,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    pose_system(position, attitude, tofs, problem)
}

/// Gauss-Newton refinement of the pose from the raw TOF measurements.
///
/// Iterates Δx̂ = (GᵀPG)⁻¹GᵀPΔζ over x = [p_cᵀ, θᵀ]ᵀ until ‖Δx̂‖ < ξ;
/// exceeding q_max reports `converged = false` rather than an error.
pub fn refine_pose(
    initial: &Pose,
    tofs: &TofMeasurementSet,
    problem: &ProblemGeometry,
    config: &PoseRefineConfig,
) -> Result<PoseEstimate> {
    let dim = problem.dim();
    let nu = problem.attitude_dim();
    if initial.dim() != dim {
        return Err(Error::DimensionMismatch(
            "initial pose does not match the problem dimension".into(),
        ));
    }
    let weights = match &config.weights {
        Some(w) => {
            if w.len() != tofs.total() {
                return Err(Error::DimensionMismatch(
                    "one weight per measurement is required".into(),
                ));
            }
            w.clone()
        }
        None => {
            let v = if config.sigma > 0.0 {
                config.sigma.powi(-2)
            } else {
                1.0
            };
            vec![v; tofs.total()]
        }
    };

    let mut position = initial.position().clone();
    let mut attitude: Vec<f64> = initial.attitude().to_vec();
    let mut converged = false;
    let mut iterations_used = 0;

    let cost = |position: &DVector<f64>, attitude: &[f64]| -> Result<f64> {
        let (_, z) = pose_system(position, attitude, tofs, problem)?;
        Ok(z.iter()
            .zip(weights.iter())
            .map(|(r, w)| w * r * r)
            .sum::<f64>())
    };
    let mut current_cost = cost(&position, &attitude)?;
    for _ in 0..config.max_iters {
        iterations_used += 1;
        let (g, z) = pose_system(&position, &attitude, tofs, problem)?;
        let mut gw = g.clone();
        for (r, &w) in weights.iter().enumerate() {
            for c in 0..dim + nu {
                gw[(r, c)] *= w;
            }
        }
        let normal = gw.transpose() * &g;
        let rhs = gw.transpose() * &z;
        let step = normal
            .cholesky()
            .ok_or(Error::SingularNormalMatrix("pose refinement"))?
            .solve(&rhs);
        // Backtrack when the full step would increase the weighted cost.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let mut cand_position = position.clone();
            let mut cand_attitude = attitude.clone();
            for c in 0..dim {
                cand_position[c] += scale * step[c];
            }
            for a in 0..nu {
                cand_attitude[a] += scale * step[dim + a];
            }
            let cand_cost = cost(&cand_position, &cand_attitude)?;
            if cand_cost <= current_cost {
                position = cand_position;
                attitude = cand_attitude;
                current_cost = cand_cost;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            converged = true;
            break;
        }
        if scale * step.norm() < config.step_tol {
            converged = true;
            break;
        }
    }

    let attitude: Vec<f64> = attitude.into_iter().map(wrap_angle).collect();
    let (g, z) = pose_system(&position, &attitude, tofs, problem)?;
    let mut gw = g.clone();
    for (r, &w) in weights.iter().enumerate() {
        for c in 0..dim + nu {
            gw[(r, c)] *= w;
        }
    }
    let covariance = (gw.transpose() * &g)
        .cholesky()
        .ok_or(Error::SingularNormalMatrix("pose covariance"))?
        .inverse();
    let objective_value = z
        .iter()
        .zip(weights.iter())
        .map(|(r, w)| w * r * r)
        .sum::<f64>();

    Ok(PoseEstimate {
        pose: Pose::new(position, attitude)?,
        covariance,
        iterations_used,
        converged,
        objective_value,
    })
}

/// Bound estimation strategy for Step 1 of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundStrategy {
    /// Triangle-inequality bounds through co-visible tags.
    Triangle,
    /// Conventional graph shortest-path bounds.
    ShortestPath,
}

/// Settings for the full three-step pipeline.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub completion: CompletionConfig,
    pub tags: TagLocalizationConfig,
    pub pose: PoseRefineConfig,
}

impl PipelineConfig {
    pub fn for_problem(problem: &ProblemGeometry, sigma: f64) -> Self {
        let mut completion = CompletionConfig::new(problem.embedding_dim());
        // Planar problems know each tag's height; hand the completion the
        // offsets from the (level) anchor plane so it does not explore
        // out-of-plane configurations the ranges cannot distinguish.
        if let Some(v) = problem.vertical() {
            let mean_anchor: f64 =
                v.anchor_heights.iter().sum::<f64>() / v.anchor_heights.len() as f64;
            let level = v
                .anchor_heights
                .iter()
                .all(|&h| (h - mean_anchor).abs() < 1e-9);
            if level {
                completion.tag_plane_offsets =
                    Some(v.tag_heights.iter().map(|&h| h - mean_anchor).collect());
            }
        }
        Self {
            completion,
            tags: TagLocalizationConfig::new(sigma),
            pose: PoseRefineConfig::new(sigma),
        }
    }
}

/// Per-step diagnostics of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineDiagnostics {
    /// Missing pairs that had no co-visible tag and used the fallback box.
    pub fallback_bound_pairs: usize,
    pub completion_iterations: usize,
    pub completion_converged: bool,
    /// Final weighted fidelity of the completed EDM to the measurements.
    pub completion_fidelity: f64,
    pub tag_iterations: usize,
    pub tag_converged: bool,
    pub max_inter_tag_residual: f64,
    pub suspicious_epoch: bool,
    pub pose_iterations: usize,
}

/// Everything produced by one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub estimate: PoseEstimate,
    pub completed: CompletedEdm,
    pub diagnostics: PipelineDiagnostics,
}

/// Runs the three-step pipeline with a selectable bound strategy.
pub fn run_pipeline(
    tofs: &TofMeasurementSet,
    problem: &ProblemGeometry,
    config: &PipelineConfig,
    strategy: BoundStrategy,
) -> Result<PipelineResult> {
    let mask = tofs.visibility(problem.num_anchors());
    let availability = check_availability(&mask, problem.dim());
    if !availability.available {
        return Err(Error::Unavailable(availability.reason));
    }

    // Step 1: EDM completion in the embedding space.
    let anchors = problem.embedding_anchors();
    let layout = problem.embedding_layout();
    let measured = build_measured_edm(&anchors, &layout, tofs)?;
    let bounds = match strategy {
        BoundStrategy::Triangle => estimate_bounds(&measured, &layout, tofs.sigma())?,
        BoundStrategy::ShortestPath => shortest_path_bounds(&measured)?,
    };
    let completed = complete_edm(&measured, &bounds, &config.completion);

    // Step 2: coarse then joint tag localization.
    let coarse = coarse_tag_positions(&completed, problem)?;
    let tags = refine_tag_positions(&coarse, tofs, problem, &config.tags)?;

    // Step 3: closed-form pose and Gauss-Newton refinement.
    let initial = closed_form_pose(&tags.positions, problem.layout())?;
    let mut estimate = refine_pose(&initial, tofs, problem, &config.pose)?;

    // With heavy noise the range cost is multi-modal and the closed-form
    // start can sit in a secondary mode. When the weighted cost is not
    // chi-square plausible, retry from rotated starts and keep the best.
    if config.pose.sigma > 0.0 && config.pose.weights.is_none() {
        let n = tofs.total() as f64;
        let plausible = n + 2.0 * (2.0 * n).sqrt();
        if !estimate.converged || estimate.objective_value > plausible {
            let dim = problem.dim();
            let k = problem.num_tags() as f64;
            let l_bar = problem.layout().iter().sum::<DVector<f64>>() / k;
            let p_bar = tags.positions.iter().sum::<DVector<f64>>() / k;
            let spins: Vec<Vec<f64>> = if dim == 2 {
                [0.5, 1.0, 1.5]
                    .iter()
                    .map(|f| vec![initial.yaw() + f * std::f64::consts::PI])
                    .collect()
            } else {
                // The 24 proper signed axis permutations cover orientation
                // space to within the refinement's capture range.
                let base = initial.rotation();
                let mut out = Vec::new();
                let perms = [
                    [0, 1, 2],
                    [0, 2, 1],
                    [1, 0, 2],
                    [1, 2, 0],
                    [2, 0, 1],
                    [2, 1, 0],
                ];
                for perm in perms {
                    for signs in 0..8u8 {
                        let mut spin = DMatrix::<f64>::zeros(3, 3);
                        for (row, &col) in perm.iter().enumerate() {
                            let sign = if signs & (1 << row) != 0 { -1.0 } else { 1.0 };
                            spin[(row, col)] = sign;
                        }
                        if (spin.determinant() - 1.0).abs() > 1e-9 {
                            continue;
                        }
                        if let Ok(angles) = angles_from_rotation(&(&spin * &base)) {
                            out.push(angles);
                        }
                    }
                }
                out
            };
            let mut retry_config = config.pose.clone();
            retry_config.max_iters = config.pose.max_iters * 4;
            for attitude in spins {
                let rotation = rotation_from_angles(&attitude, dim)?;
                let position = &p_bar - rotation * &l_bar;
                let start = Pose::new(position, attitude)?;
                if let Ok(candidate) = refine_pose(&start, tofs, problem, &retry_config) {
                    if candidate.converged && candidate.objective_value < estimate.objective_value {
                        estimate = candidate;
                    }
                }
            }
        }
    }

    if !estimate.converged {
        // A failed refinement reports the closed-form pose instead of the
        // wandering iterate.
        estimate.pose = initial;
    }

    let diagnostics = PipelineDiagnostics {
        fallback_bound_pairs: bounds.fallback_pairs.len(),
        completion_iterations: completed.iterations_used,
        completion_converged: completed.converged,
        completion_fidelity: completed.fidelity_history.last().copied().unwrap_or(0.0),
        tag_iterations: tags.iterations_used,
        tag_converged: tags.converged,
        max_inter_tag_residual: tags.max_inter_tag_residual,
        suspicious_epoch: tags.suspicious,
        pose_iterations: estimate.iterations_used,
    };

    Ok(PipelineResult {
        estimate,
        completed,
        diagnostics,
    })
}

/// The full method: triangle-bound EDM completion, inter-tag assisted
/// localization, closed-form pose and Gauss-Newton refinement.
pub fn erbl_edmc_estimate(
    tofs: &TofMeasurementSet,
    problem: &ProblemGeometry,
    config: &PipelineConfig,
) -> Result<PipelineResult> {
    run_pipeline(tofs, problem, config, BoundStrategy::Triangle)
}
