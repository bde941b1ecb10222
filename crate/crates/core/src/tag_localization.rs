//! Joint tag localization: coarse per-tag positions from the completed EDM,
//! refined by weighted Gauss-Newton over the measured TOFs together with the
//! exact inter-tag distances.
//!
//! The refinement stacks all tag positions into y = [p₁ᵀ … p_kᵀ]ᵀ and
//! iterates Δŷ = (HᵀQH)⁻¹HᵀQΔz, where H holds per-tag TOF unit-vector
//! blocks and inter-tag difference rows, and Q = blkdiag(σ⁻²I, λσ⁻²I) puts
//! the weight factor λ on the inter-tag rows. A tag with too few
//! measurements of its own is still recoverable through the rows that tie
//! it to its neighbors.

use nalgebra::{DMatrix, DVector};

use crate::edm::CompletedEdm;
use crate::error::{Error, Result};
use crate::geometry::{ProblemGeometry, TofMeasurementSet};

/// Settings for [`refine_tag_positions`].
#[derive(Debug, Clone)]
pub struct TagLocalizationConfig {
    /// Inter-tag weight factor λ (> 1: exact distances trusted more).
    pub lambda: f64,
    /// Iteration cap K₂.
    pub max_iters: usize,
    /// Stop when the increment norm falls below this (meters).
    pub step_tol: f64,
    /// TOF noise standard deviation σ (meters).
    pub sigma: f64,
}

impl TagLocalizationConfig {
    pub fn new(sigma: f64) -> Self {
        Self {
            lambda: 10.0,
            max_iters: 20,
            step_tol: 1e-8,
            sigma,
        }
    }
}

/// Jointly refined tag positions with their error covariance.
#[derive(Debug, Clone)]
pub struct TagPositionEstimate {
    pub positions: Vec<DVector<f64>>,
    /// Covariance of the stacked position vector, σ²(HδᵀHδ + (1/λ)HdᵀHd)⁻¹.
    pub covariance: DMatrix<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Largest |d_ik − ‖p̂_i − p̂_k‖| at the solution.
    pub max_inter_tag_residual: f64,
    /// Set when the worst inter-tag residual exceeds 3σ·√λ.
    pub suspicious: bool,
}

impl TagPositionEstimate {
    pub fn stacked(&self) -> DVector<f64> {
        let dim = self.positions[0].len();
        let mut y = DVector::zeros(dim * self.positions.len());
        for (i, p) in self.positions.iter().enumerate() {
            y.rows_mut(i * dim, dim).copy_from(p);
        }
        y
    }
}

/// Condition-number cutoff for the anchor-differenced design matrix.
const DEGENERACY_CONDITION: f64 = 1e10;

/// Coarse positions, one linear solve per tag, using the completed distances
/// to every anchor.
///
/// Differencing the squared-range equations against the first anchor removes
/// the ‖p‖² term and leaves an (M−1)×η linear system per tag.
pub fn coarse_tag_positions(
    completed: &CompletedEdm,
    problem: &ProblemGeometry,
) -> Result<Vec<DVector<f64>>> {
    let m = problem.num_anchors();
    let dim = problem.dim();
    if m < dim + 1 {
        return Err(Error::DegenerateAnchorGeometry(format!(
            "need at least {} anchors for {dim}D, have {m}",
            dim + 1
        )));
    }
    let anchors = problem.anchors();
    let mut positions = Vec::with_capacity(problem.num_tags());
    for t in 0..problem.num_tags() {
        let node = m + t;
        let q0 = anchors.position(0);
        let dz0 = problem.dz_tag_anchor(t, 0);
        let d0 = completed.d_hat[(0, node)];
        let mut a = DMatrix::zeros(m - 1, dim);
        let mut b = DVector::zeros(m - 1);
        for j in 1..m {
            let qj = anchors.position(j);
            let dzj = problem.dz_tag_anchor(t, j);
            let dj = completed.d_hat[(j, node)];
            for c in 0..dim {
                a[(j - 1, c)] = 2.0 * (qj[c] - q0[c]);
            }
            b[j - 1] =
                (d0 - dj) + (qj.norm_squared() - q0.norm_squared()) + (dzj * dzj - dz0 * dz0);
        }
        let svd = a.clone().svd(true, true);
        let s_max = svd.singular_values.max();
        let s_min = svd.singular_values.min();
        if s_min <= 0.0 || s_max / s_min > DEGENERACY_CONDITION {
            return Err(Error::DegenerateAnchorGeometry(format!(
                "differenced design matrix for tag {t} is rank-deficient"
            )));
        }
        let p = svd
            .solve(&b, 0.0)
            .map_err(|_| Error::SingularNormalMatrix("coarse tag solve"))?;
        positions.push(p);
    }
    Ok(positions)
}

struct Stacked {
    h_tof: DMatrix<f64>,
    h_tag: DMatrix<f64>,
    residual_tof: DVector<f64>,
    residual_tag: DVector<f64>,
}

fn stack_system(
    positions: &[DVector<f64>],
    tofs: &TofMeasurementSet,
    problem: &ProblemGeometry,
) -> Stacked {
    let dim = problem.dim();
    let k = positions.len();
    let unknowns = dim * k;
    let n_tof = tofs.total();
    let n_tag = k * (k - 1) / 2;

    let mut h_tof = DMatrix::zeros(n_tof, unknowns);
    let mut residual_tof = DVector::zeros(n_tof);
    let mut row = 0;
    for (i, p) in positions.iter().enumerate() {
        for &(j, delta) in tofs.visible(i) {
            let range = problem.range_to_anchor(p, i, j).max(1e-12);
            let diff = p - problem.anchors().position(j);
            for c in 0..dim {
                h_tof[(row, i * dim + c)] = diff[c] / range;
            }
            residual_tof[row] = delta - range;
            row += 1;
        }
    }

    let mut h_tag = DMatrix::zeros(n_tag, unknowns);
    let mut residual_tag = DVector::zeros(n_tag);
    let mut row = 0;
    for i in 0..k {
        for j in (i + 1)..k {
            let d_ij = problem.inter_tag_distance(i, j);
            let range = problem
                .range_between_tags(&positions[i], &positions[j], i, j)
                .max(1e-12);
            let diff = &positions[i] - &positions[j];
            for c in 0..dim {
                h_tag[(row, i * dim + c)] = diff[c] / range;
                h_tag[(row, j * dim + c)] = -diff[c] / range;
            }
            residual_tag[row] = d_ij - range;
            row += 1;
        }
    }

    Stacked {
        h_tof,
        h_tag,
        residual_tof,
        residual_tag,
    }
}

#[doc(hidden)]
pub fn tag_residual_system(
    positions: &[DVector<f64>],
    tofs: &TofMeasurementSet,
    problem: &ProblemGeometry,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let sys = stack_system(positions, tofs, problem);
    (sys.h_tof, sys.h_tag, sys.residual_tof, sys.residual_tag)
}

/// Refines all tag positions jointly from the measured TOFs and the exact
/// inter-tag distances, starting from the coarse estimate.
pub fn refine_tag_positions(
    coarse: &[DVector<f64>],
    tofs: &TofMeasurementSet,
    problem: &ProblemGeometry,
    config: &TagLocalizationConfig,
) -> Result<TagPositionEstimate> {
    if coarse.len() != problem.num_tags() {
        return Err(Error::DimensionMismatch(
            "coarse positions must cover every tag".into(),
        ));
    }
    if config.lambda <= 1.0 {
        return Err(Error::InvalidInput(
            "inter-tag weight factor must exceed 1".into(),
        ));
    }
    let dim = problem.dim();
    let mut positions: Vec<DVector<f64>> = coarse.to_vec();
    let mut converged = false;
    let mut iterations_used = 0;

    let cost = |positions: &[DVector<f64>]| {
        let sys = stack_system(positions, tofs, problem);
        sys.residual_tof.norm_squared() + config.lambda * sys.residual_tag.norm_squared()
    };
    let mut current_cost = cost(&positions);
    for _ in 0..config.max_iters {
        iterations_used += 1;
        let sys = stack_system(&positions, tofs, problem);
        // Q = blkdiag(σ⁻²I, λσ⁻²I); the common σ⁻² cancels in the update.
        let normal =
            sys.h_tof.transpose() * &sys.h_tof + config.lambda * sys.h_tag.transpose() * &sys.h_tag;
        let rhs = sys.h_tof.transpose() * &sys.residual_tof
            + config.lambda * sys.h_tag.transpose() * &sys.residual_tag;
        let chol = normal
            .cholesky()
            .ok_or(Error::SingularNormalMatrix("tag refinement"))?;
        let step = chol.solve(&rhs);
        // Backtrack when the full step would increase the weighted cost;
        // coarse starts far outside the basin need this at high noise.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let candidate: Vec<DVector<f64>> = positions
                .iter()
                .enumerate()
                .map(|(i, p)| p + scale * step.rows(i * dim, dim))
                .collect();
            let candidate_cost = cost(&candidate);
            if candidate_cost <= current_cost {
                positions = candidate;
                current_cost = candidate_cost;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // No damped step improves the cost: stationary within
            // resolution.
            converged = true;
            break;
        }
        if scale * step.norm() < config.step_tol {
            converged = true;
            break;
        }
    }

    let sys = stack_system(&positions, tofs, problem);
    let info = sys.h_tof.transpose() * &sys.h_tof
        + (1.0 / config.lambda) * sys.h_tag.transpose() * &sys.h_tag;
    let covariance = info
        .cholesky()
        .ok_or(Error::SingularNormalMatrix("tag covariance"))?
        .inverse()
        * config.sigma.powi(2);

    let max_inter_tag_residual = sys
        .residual_tag
        .iter()
        .fold(0.0f64, |acc, r| acc.max(r.abs()));
    let suspicious =
        config.sigma > 0.0 && max_inter_tag_residual > 3.0 * config.sigma * config.lambda.sqrt();

    Ok(TagPositionEstimate {
        positions,
        covariance,
        iterations_used,
        converged,
        max_inter_tag_residual,
        suspicious,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edm::{build_measured_edm, complete_edm, estimate_bounds, CompletionConfig};
    use crate::geometry::{AnchorSet, Pose, TagLayout};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal};

    fn scene_2d() -> (ProblemGeometry, Pose) {
        let anchors = AnchorSet::from_rows(&[
            vec![40.0, 50.0],
            vec![30.0, 20.0],
            vec![0.0, 10.0],
            vec![-50.0, -50.0],
            vec![-20.0, -30.0],
        ])
        .unwrap();
        let layout = TagLayout::from_rows(&[
            vec![0.0, 0.0],
            vec![5.0, 0.0],
            vec![5.0, 5.0],
            vec![0.0, 5.0],
        ])
        .unwrap();
        let problem = ProblemGeometry::new(anchors, layout, None).unwrap();
        (problem, Pose::planar(2.0, 10.0, 1.047))
    }

    fn simulate(
        problem: &ProblemGeometry,
        pose: &Pose,
        sigma: f64,
        rng: &mut ChaCha12Rng,
        skip: &[(usize, usize)],
    ) -> TofMeasurementSet {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut tofs = TofMeasurementSet::new(problem.num_tags(), sigma);
        for t in 0..problem.num_tags() {
            for j in 0..problem.num_anchors() {
                if skip.contains(&(t, j)) {
                    continue;
                }
                let r = problem.true_range(pose, t, j).unwrap();
                let noisy = (r + sigma * normal.sample(rng)).max(0.0);
                tofs.add(t, j, noisy).unwrap();
            }
        }
        tofs
    }

    fn complete(problem: &ProblemGeometry, tofs: &TofMeasurementSet, sigma: f64) -> CompletedEdm {
        let anchors = problem.embedding_anchors();
        let layout = problem.embedding_layout();
        let measured = build_measured_edm(&anchors, &layout, tofs).unwrap();
        let bounds = estimate_bounds(&measured, &layout, sigma).unwrap();
        complete_edm(
            &measured,
            &bounds,
            &CompletionConfig::new(problem.embedding_dim()),
        )
    }

    #[test]
    fn coarse_positions_exact_from_noiseless_edm() {
        let (problem, pose) = scene_2d();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let tofs = simulate(&problem, &pose, 0.0, &mut rng, &[]);
        let completed = complete(&problem, &tofs, 0.0);
        let coarse = coarse_tag_positions(&completed, &problem).unwrap();
        let truth = problem.tag_positions(&pose).unwrap();
        for (c, t) in coarse.iter().zip(truth.iter()) {
            assert!((c - t).norm() < 1e-6, "coarse {c:?} vs truth {t:?}");
        }
    }

    #[test]
    fn coarse_positions_monte_carlo_error() {
        // Oracle: the coarse linear estimate must stay within 1 m of truth
        // at σ = 0.1 on the 5-anchor scene, run over repeated noise draws.
        let (problem, pose) = scene_2d();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let truth = problem.tag_positions(&pose).unwrap();
        for _ in 0..50 {
            let tofs = simulate(&problem, &pose, 0.1, &mut rng, &[]);
            let completed = complete(&problem, &tofs, 0.1);
            let coarse = coarse_tag_positions(&completed, &problem).unwrap();
            for (t, (c, tr)) in coarse.iter().zip(truth.iter()).enumerate() {
                assert!(
                    (c - tr).norm() < 1.0,
                    "tag {t} coarse error {} too large",
                    (c - tr).norm()
                );
            }
        }
    }

    #[test]
    fn coarse_rejects_collinear_anchors() {
        let anchors =
            AnchorSet::from_rows(&[vec![0.0, 0.0], vec![10.0, 0.0], vec![20.0, 0.0]]).unwrap();
        let layout = TagLayout::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let problem = ProblemGeometry::new(anchors, layout, None).unwrap();
        let pose = Pose::planar(5.0, 5.0, 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let tofs = simulate(&problem, &pose, 0.0, &mut rng, &[]);
        let completed = complete(&problem, &tofs, 0.0);
        assert!(matches!(
            coarse_tag_positions(&completed, &problem),
            Err(Error::DegenerateAnchorGeometry(_))
        ));
    }

    #[test]
    fn refine_exact_with_zero_noise() {
        let (problem, pose) = scene_2d();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let tofs = simulate(&problem, &pose, 0.0, &mut rng, &[]);
        let truth = problem.tag_positions(&pose).unwrap();
        // Start slightly off the truth.
        let coarse: Vec<DVector<f64>> = truth
            .iter()
            .map(|p| p + DVector::from_vec(vec![0.05, -0.04]))
            .collect();
        let est = refine_tag_positions(&coarse, &tofs, &problem, &TagLocalizationConfig::new(0.0))
            .unwrap();
        assert!(est.converged);
        assert!(est.iterations_used <= 4);
        for (p, t) in est.positions.iter().zip(truth.iter()) {
            assert!((p - t).norm() < 1e-8);
        }
    }

    #[test]
    fn refine_handles_starved_tag_through_neighbors() {
        // Tag 2 keeps a single TOF; the joint solve must still be finite
        // and close to truth thanks to the inter-tag rows.
        let (problem, pose) = scene_2d();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let skip: Vec<(usize, usize)> = (0..4).map(|j| (2usize, j)).collect();
        let tofs = simulate(&problem, &pose, 0.1, &mut rng, &skip);
        assert_eq!(tofs.counts()[2], 1);
        let completed = complete(&problem, &tofs, 0.1);
        let coarse = coarse_tag_positions(&completed, &problem).unwrap();
        let est = refine_tag_positions(&coarse, &tofs, &problem, &TagLocalizationConfig::new(0.1))
            .unwrap();
        let truth = problem.tag_positions(&pose).unwrap();
        for (p, t) in est.positions.iter().zip(truth.iter()) {
            assert!(p.iter().all(|v| v.is_finite()));
            assert!((p - t).norm() < 1.0);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (problem, pose) = scene_2d();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let tofs = simulate(&problem, &pose, 0.1, &mut rng, &[(1, 0)]);
        let dim = problem.dim();
        for _ in 0..10 {
            let positions: Vec<DVector<f64>> = problem
                .tag_positions(&pose)
                .unwrap()
                .iter()
                .map(|p| {
                    p + DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                })
                .collect();
            let sys = stack_system(&positions, &tofs, &problem);
            let h = 1e-6;
            for col in 0..dim * positions.len() {
                let mut plus = positions.clone();
                let mut minus = positions.clone();
                plus[col / dim][col % dim] += h;
                minus[col / dim][col % dim] -= h;
                let sp = stack_system(&plus, &tofs, &problem);
                let sm = stack_system(&minus, &tofs, &problem);
                // H is the Jacobian of the predicted measurements, i.e. the
                // negative Jacobian of the residuals.
                for r in 0..sys.residual_tof.len() {
                    let fd = -(sp.residual_tof[r] - sm.residual_tof[r]) / (2.0 * h);
                    let an = sys.h_tof[(r, col)];
                    assert!(
                        (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                        "TOF row {r} col {col}: {an} vs {fd}"
                    );
                }
                for r in 0..sys.residual_tag.len() {
                    let fd = -(sp.residual_tag[r] - sm.residual_tag[r]) / (2.0 * h);
                    let an = sys.h_tag[(r, col)];
                    assert!(
                        (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                        "tag row {r} col {col}: {an} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn inter_tag_rows_reduce_rmse() {
        // Oracle: rerun with the inter-tag rows removed (single-tag WLS);
        // the joint estimate must win on average.
        let (problem, pose) = scene_2d();
        let truth = problem.tag_positions(&pose).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let runs = 300;
        let mut with = 0.0;
        let mut without = 0.0;
        for _ in 0..runs {
            let tofs = simulate(&problem, &pose, 0.5, &mut rng, &[]);
            let completed = complete(&problem, &tofs, 0.5);
            let coarse = coarse_tag_positions(&completed, &problem).unwrap();
            let est =
                refine_tag_positions(&coarse, &tofs, &problem, &TagLocalizationConfig::new(0.5))
                    .unwrap();
            for (p, t) in est.positions.iter().zip(truth.iter()) {
                with += (p - t).norm_squared();
            }
            // Single-tag refinement: per-tag Gauss-Newton on own TOFs only.
            for (t, tr) in truth.iter().enumerate() {
                let mut p = coarse[t].clone();
                for _ in 0..20 {
                    let mut h = DMatrix::zeros(tofs.visible(t).len(), 2);
                    let mut z = DVector::zeros(tofs.visible(t).len());
                    for (r, &(j, delta)) in tofs.visible(t).iter().enumerate() {
                        let range = problem.range_to_anchor(&p, t, j).max(1e-12);
                        let diff = &p - problem.anchors().position(j);
                        h[(r, 0)] = diff[0] / range;
                        h[(r, 1)] = diff[1] / range;
                        z[r] = delta - range;
                    }
                    let step = (h.transpose() * &h)
                        .cholesky()
                        .unwrap()
                        .solve(&(h.transpose() * z));
                    p += &step;
                    if step.norm() < 1e-10 {
                        break;
                    }
                }
                without += (&p - tr).norm_squared();
            }
        }
        let rmse_with = (with / (runs as f64 * 4.0)).sqrt();
        let rmse_without = (without / (runs as f64 * 4.0)).sqrt();
        assert!(
            rmse_with < rmse_without,
            "joint {rmse_with} should beat single-tag {rmse_without}"
        );
    }

    #[test]
    fn covariance_dominated_by_single_tag_covariance() {
        // σ²(HδᵀHδ + (1/λ)HdᵀHd)⁻¹ ⪯ σ²(HδᵀHδ)⁻¹ in the PSD order.
        let (problem, pose) = scene_2d();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let tofs = simulate(&problem, &pose, 0.3, &mut rng, &[]);
        let completed = complete(&problem, &tofs, 0.3);
        let coarse = coarse_tag_positions(&completed, &problem).unwrap();
        let config = TagLocalizationConfig::new(0.3);
        let est = refine_tag_positions(&coarse, &tofs, &problem, &config).unwrap();
        let sys = stack_system(&est.positions, &tofs, &problem);
        let single = (sys.h_tof.transpose() * &sys.h_tof)
            .cholesky()
            .unwrap()
            .inverse()
            * config.sigma.powi(2);
        let diff = single - &est.covariance;
        let eig = diff.symmetric_eigen();
        assert!(
            eig.eigenvalues.iter().all(|&v| v > -1e-10),
            "joint covariance must not exceed single-tag covariance"
        );
    }

    #[test]
    fn permutation_equivariance() {
        let (problem, pose) = scene_2d();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let tofs = simulate(&problem, &pose, 0.2, &mut rng, &[]);
        let completed = complete(&problem, &tofs, 0.2);
        let coarse = coarse_tag_positions(&completed, &problem).unwrap();
        let config = TagLocalizationConfig::new(0.2);
        let est = refine_tag_positions(&coarse, &tofs, &problem, &config).unwrap();

        // Relabel tags by the permutation (3,0,2,1).
        let perm = [3usize, 0, 2, 1];
        let layout_p = TagLayout::new(
            perm.iter()
                .map(|&i| problem.layout().local(i).clone())
                .collect(),
        )
        .unwrap();
        let problem_p = ProblemGeometry::new(problem.anchors().clone(), layout_p, None).unwrap();
        let mut tofs_p = TofMeasurementSet::new(4, 0.2);
        for (new_i, &old_i) in perm.iter().enumerate() {
            for &(j, r) in tofs.visible(old_i) {
                tofs_p.add(new_i, j, r).unwrap();
            }
        }
        let coarse_p: Vec<DVector<f64>> = perm.iter().map(|&i| coarse[i].clone()).collect();
        let est_p = refine_tag_positions(&coarse_p, &tofs_p, &problem_p, &config).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            assert!(
                (&est_p.positions[new_i] - &est.positions[old_i]).norm() < 1e-6,
                "permuted solution must match block-for-block"
            );
        }
    }

    #[test]
    fn estimated_inter_tag_distances_approach_layout() {
        let (problem, pose) = scene_2d();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for &(sigma, tol) in &[(0.1, 0.12), (0.01, 0.012)] {
            let tofs = simulate(&problem, &pose, sigma, &mut rng, &[]);
            let completed = complete(&problem, &tofs, sigma);
            let coarse = coarse_tag_positions(&completed, &problem).unwrap();
            let est =
                refine_tag_positions(&coarse, &tofs, &problem, &TagLocalizationConfig::new(sigma))
                    .unwrap();
            for i in 0..4 {
                for j in (i + 1)..4 {
                    let estd = (&est.positions[i] - &est.positions[j]).norm();
                    let d = problem.inter_tag_distance(i, j);
                    assert_relative_eq!(estd, d, epsilon = tol);
                }
            }
        }
    }

    #[test]
    fn lambda_must_exceed_one() {
        let (problem, pose) = scene_2d();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let tofs = simulate(&problem, &pose, 0.1, &mut rng, &[]);
        let coarse = problem.tag_positions(&pose).unwrap();
        let mut config = TagLocalizationConfig::new(0.1);
        config.lambda = 1.0;
        assert!(refine_tag_positions(&coarse, &tofs, &problem, &config).is_err());
    }
}
