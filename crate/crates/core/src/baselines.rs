//! Comparison methods: the divide-and-conquer baseline (per-tag positioning
//! followed by the closed-form alignment) and the pipeline variant that uses
//! the conventional shortest-path bounds in Step 1.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Pose, ProblemGeometry, TofMeasurementSet};
use crate::pose_estimation::{
    closed_form_pose, run_pipeline, BoundStrategy, PipelineConfig, PipelineResult,
};

/// Estimation method identifiers used by the simulator and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    ErblEdmc,
    Dac,
    ErblShortestPath,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::ErblEdmc => "erbl",
            Method::Dac => "dac",
            Method::ErblShortestPath => "erbl-sp",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "erbl" | "erbl-edmc" => Some(Method::ErblEdmc),
            "dac" => Some(Method::Dac),
            "erbl-sp" | "shortest-path" => Some(Method::ErblShortestPath),
            _ => None,
        }
    }
}

/// Per-epoch poses of one method; infeasible epochs carry no pose.
#[derive(Debug, Clone)]
pub struct BaselineReport {
    pub method: Method,
    pub poses: Vec<Option<Pose>>,
}

impl BaselineReport {
    pub fn feasible_count(&self) -> usize {
        self.poses.iter().filter(|p| p.is_some()).count()
    }
}

/// Result of the divide-and-conquer estimator.
#[derive(Debug, Clone)]
pub enum DacOutcome {
    Feasible {
        pose: Pose,
        /// Tags that passed the per-tag measurement threshold and solved.
        used_tags: Vec<usize>,
    },
    Infeasible {
        reason: String,
    },
}

impl DacOutcome {
    pub fn pose(&self) -> Option<&Pose> {
        match self {
            DacOutcome::Feasible { pose, .. } => Some(pose),
            DacOutcome::Infeasible { .. } => None,
        }
    }
}

/// Per-tag linear fix from the tag's own measurements, by differencing the
/// squared-range equations against its first visible anchor. Degenerate
/// anchor geometry is not rejected: the minimum-norm solution is returned
/// and whatever error it carries flows into the pose.
fn linear_fix(
    problem: &ProblemGeometry,
    tag: usize,
    pairs: &[(usize, f64)],
) -> Result<DVector<f64>> {
    let dim = problem.dim();
    let anchors = problem.anchors();
    let (j0, d0) = pairs[0];
    let q0 = anchors.position(j0);
    let dz0 = problem.dz_tag_anchor(tag, j0);
    let mut a = DMatrix::zeros(pairs.len() - 1, dim);
    let mut b = DVector::zeros(pairs.len() - 1);
    for (row, &(j, d)) in pairs.iter().skip(1).enumerate() {
        let qj = anchors.position(j);
        let dzj = problem.dz_tag_anchor(tag, j);
        for c in 0..dim {
            a[(row, c)] = 2.0 * (qj[c] - q0[c]);
        }
        b[row] =
            (d0 * d0 - d * d) + (qj.norm_squared() - q0.norm_squared()) + (dzj * dzj - dz0 * dz0);
    }
    let scale = b.norm().max(1.0);
    a.svd(true, true)
        .solve(&b, 1e-9 * scale)
        .map_err(|_| Error::SingularNormalMatrix("per-tag linear fix"))
}

/// Per-tag Gauss-Newton on the tag's own measurements. The final iterate is
/// accepted even without formal convergence; there is no residual gating.
fn solve_single_tag(
    problem: &ProblemGeometry,
    tag: usize,
    pairs: &[(usize, f64)],
) -> Result<DVector<f64>> {
    let dim = problem.dim();
    let mut p = linear_fix(problem, tag, pairs)?;
    for _ in 0..20 {
        let mut h = DMatrix::zeros(pairs.len(), dim);
        let mut z = DVector::zeros(pairs.len());
        for (row, &(j, delta)) in pairs.iter().enumerate() {
            let range = problem.range_to_anchor(&p, tag, j).max(1e-12);
            let diff = &p - problem.anchors().position(j);
            for c in 0..dim {
                h[(row, c)] = diff[c] / range;
            }
            z[row] = delta - range;
        }
        let mut normal = h.transpose() * &h;
        // Keep stepping through rank-deficient geometry.
        let ridge = 1e-9 * (1.0 + normal.trace());
        for c in 0..dim {
            normal[(c, c)] += ridge;
        }
        let step = normal
            .cholesky()
            .ok_or(Error::SingularNormalMatrix("per-tag refinement"))?
            .solve(&(h.transpose() * z));
        p += &step;
        if step.norm() < 1e-8 {
            break;
        }
    }
    Ok(p)
}

/// Divide-and-conquer estimate: each tag with at least η+1 measurements is
/// localized independently; the pose comes from the closed-form alignment
/// over the surviving tags. Too few survivors make the epoch infeasible.
pub fn dac_estimate(tofs: &TofMeasurementSet, problem: &ProblemGeometry) -> DacOutcome {
    let dim = problem.dim();
    let needed = dim + 1;
    let mut used_tags = Vec::new();
    let mut positions = Vec::new();
    for t in 0..problem.num_tags() {
        let pairs = tofs.visible(t);
        if pairs.len() < needed {
            continue;
        }
        match solve_single_tag(problem, t, pairs) {
            Ok(p) => {
                used_tags.push(t);
                positions.push(p);
            }
            Err(_) => continue,
        }
    }
    let min_tags = if dim == 2 { 2 } else { 3 };
    if used_tags.len() < min_tags {
        return DacOutcome::Infeasible {
            reason: format!(
                "{} tag(s) with at least {needed} measurements, need {min_tags}",
                used_tags.len()
            ),
        };
    }
    let sub_layout = match crate::geometry::TagLayout::new(
        used_tags
            .iter()
            .map(|&t| problem.layout().local(t).clone())
            .collect(),
    ) {
        Ok(l) => l,
        Err(e) => {
            return DacOutcome::Infeasible {
                reason: e.to_string(),
            }
        }
    };
    match closed_form_pose(&positions, &sub_layout) {
        Ok(pose) => DacOutcome::Feasible { pose, used_tags },
        Err(e) => DacOutcome::Infeasible {
            reason: e.to_string(),
        },
    }
}

/// The full pipeline with Step 1 bounds from the conventional shortest-path
/// method, for side-by-side comparison with the triangle bounds.
pub fn pipeline_with_shortest_path_bounds(
    tofs: &TofMeasurementSet,
    problem: &ProblemGeometry,
    config: &PipelineConfig,
) -> Result<PipelineResult> {
    run_pipeline(tofs, problem, config, BoundStrategy::ShortestPath)
}
