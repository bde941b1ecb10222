//! Availability test, Fisher information and Cramér–Rao bounds, and the
//! error metrics used to score estimates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{rotation_derivatives, wrap_angle, Pose, ProblemGeometry, VisibilityMask};

/// Outcome of the pose-solvability test.
#[derive(Debug, Clone)]
pub struct AvailabilityReport {
    pub available: bool,
    pub reason: String,
}

/// Feasibility of a unique pose solution from the visible pairs alone.
///
/// 2D needs at least 3 measurements in total and at least 2 observing tags;
/// 3D needs at least 6 and 3. The per-tag counts are unconstrained — that is
/// what distinguishes joint estimation from per-tag positioning.
pub fn check_availability(mask: &VisibilityMask, dim: usize) -> AvailabilityReport {
    let total = mask.total();
    let observing = mask.observing_tags();
    let (need_total, need_tags) = if dim == 2 { (3, 2) } else { (6, 3) };
    if total < need_total {
        return AvailabilityReport {
            available: false,
            reason: format!("{total} measurements in total, need {need_total}"),
        };
    }
    if observing < need_tags {
        return AvailabilityReport {
            available: false,
            reason: format!("{observing} observing tag(s), need {need_tags}"),
        };
    }
    AvailabilityReport {
        available: true,
        reason: format!("{total} measurements across {observing} tags"),
    }
}

/// Which parameter vector a Fisher information matrix refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FimParameterization {
    /// (p_c, ψ) for planar problems; (η+ν)² = 3×3.
    Planar,
    /// χ = [μ₁ᵀ μ₂ᵀ μ₃ᵀ p_cᵀ]ᵀ with μ_a the rotation columns; 12×12.
    RotationColumns,
}

#[derive(Debug, Clone)]
pub struct FisherInformation {
    pub matrix: DMatrix<f64>,
    pub parameterization: FimParameterization,
}

/// Fisher information of the pose parameters at `pose`, summed over the
/// visible tag–anchor pairs only.
pub fn fisher_information(
    pose: &Pose,
    problem: &ProblemGeometry,
    mask: &VisibilityMask,
    sigma: f64,
) -> Result<FisherInformation> {
    if sigma <= 0.0 {
        return Err(Error::InvalidInput("sigma must be positive".into()));
    }
    let dim = problem.dim();
    let inv_var = 1.0 / (sigma * sigma);
    let tag_positions = problem.tag_positions(pose)?;

    if dim == 2 {
        let derivs = rotation_derivatives(pose.attitude(), 2)?;
        let mut f = DMatrix::zeros(3, 3);
        for (i, p) in tag_positions.iter().enumerate() {
            for j in 0..problem.num_anchors() {
                if !mask.is_visible(j, i) {
                    continue;
                }
                let r = problem.range_to_anchor(p, i, j);
                let diff = p - problem.anchors().position(j);
                let mut u = DVector::zeros(3);
                u[0] = diff[0] / r;
                u[1] = diff[1] / r;
                u[2] = (diff.transpose() * &derivs[0] * problem.layout().local(i))[(0, 0)] / r;
                f += inv_var * &u * u.transpose();
            }
        }
        return Ok(FisherInformation {
            matrix: f,
            parameterization: FimParameterization::Planar,
        });
    }

    // 3D: information in the stacked rotation columns plus position.
    let mut f = DMatrix::zeros(12, 12);
    for (i, p) in tag_positions.iter().enumerate() {
        let l = problem.layout().local(i);
        for j in 0..problem.num_anchors() {
            if !mask.is_visible(j, i) {
                continue;
            }
            let diff = p - problem.anchors().position(j);
            let r2 = diff.norm_squared();
            let mut g = DVector::zeros(12);
            for a in 0..3 {
                for c in 0..3 {
                    g[3 * a + c] = l[a] * diff[c];
                }
            }
            for c in 0..3 {
                g[9 + c] = diff[c];
            }
            f += inv_var / r2 * &g * g.transpose();
        }
    }
    Ok(FisherInformation {
        matrix: f,
        parameterization: FimParameterization::RotationColumns,
    })
}

/// Cramér–Rao lower bound on the pose error covariance.
#[derive(Debug, Clone)]
pub struct CrlbResult {
    pub covariance: DMatrix<f64>,
    /// √(trace of the position block): bound on the position RMSE (m).
    pub position_bound: f64,
    /// 2D: bound on the yaw RMSE (rad); 3D: bound on ‖R̂−R‖ RMSE.
    pub attitude_bound: f64,
}

/// Jacobian of the special-orthogonality constraints with respect to
/// χ = [μ₁ᵀ μ₂ᵀ μ₃ᵀ p_cᵀ]ᵀ: six orthonormality rows and one determinant
/// row, followed by zero columns for p_c.
fn so_constraint_jacobian(r: &DMatrix<f64>) -> DMatrix<f64> {
    let mu: Vec<DVector<f64>> = (0..3)
        .map(|a| DVector::from_column_slice(r.column(a).as_slice()))
        .collect();
    let cross = |a: &DVector<f64>, b: &DVector<f64>| {
        DVector::from_vec(vec![
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ])
    };
    let mut jac = DMatrix::zeros(7, 12);
    let mut set = |row: usize, block: usize, v: DVector<f64>| {
        for c in 0..3 {
            jac[(row, 3 * block + c)] = v[c];
        }
    };
    set(0, 0, 2.0 * &mu[0]);
    set(1, 0, mu[1].clone());
    set(1, 1, mu[0].clone());
    set(2, 0, mu[2].clone());
    set(2, 2, mu[0].clone());
    set(3, 1, 2.0 * &mu[1]);
    set(4, 1, mu[2].clone());
    set(4, 2, mu[1].clone());
    set(5, 2, 2.0 * &mu[2]);
    set(6, 0, cross(&mu[1], &mu[2]));
    set(6, 1, cross(&mu[2], &mu[0]));
    set(6, 2, cross(&mu[0], &mu[1]));
    jac
}

/// Orthonormal basis of the null space of `m`, from the eigendecomposition
/// of mᵀm with a relative singular-value cutoff.
fn null_space_basis(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let gram = m.transpose() * m;
    let eig = gram.symmetric_eigen();
    let s: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).collect();
    let s_max = s.iter().fold(0.0f64, |a, &b| a.max(b));
    let cutoff = rel_tol * s_max.max(f64::MIN_POSITIVE);
    let null_cols: Vec<usize> = (0..s.len()).filter(|&k| s[k] <= cutoff).collect();
    let mut basis = DMatrix::zeros(m.ncols(), null_cols.len());
    for (out_c, &k) in null_cols.iter().enumerate() {
        basis
            .column_mut(out_c)
            .copy_from(&eig.eigenvectors.column(k));
    }
    basis
}

/// Constrained CRLB: C(CᵀFC)⁻¹Cᵀ where C spans the tangent space of the
/// constraint manifold (C = I for 2D).
pub fn crlb(
    pose: &Pose,
    problem: &ProblemGeometry,
    mask: &VisibilityMask,
    sigma: f64,
) -> Result<CrlbResult> {
    let fim = fisher_information(pose, problem, mask, sigma)?;
    match fim.parameterization {
        FimParameterization::Planar => {
            let cov = fim
                .matrix
                .clone()
                .cholesky()
                .ok_or_else(|| {
                    Error::SingularInformation("planar information matrix is not invertible".into())
                })?
                .inverse();
            Ok(CrlbResult {
                position_bound: (cov[(0, 0)] + cov[(1, 1)]).sqrt(),
                attitude_bound: cov[(2, 2)].sqrt(),
                covariance: cov,
            })
        }
        FimParameterization::RotationColumns => {
            let r = pose.rotation();
            let jac = so_constraint_jacobian(&r);
            let c = null_space_basis(&jac, 1e-6);
            let reduced = c.transpose() * &fim.matrix * &c;
            let inv = reduced
                .cholesky()
                .ok_or_else(|| {
                    Error::SingularInformation(
                        "information restricted to the constraint tangent space is singular".into(),
                    )
                })?
                .inverse();
            let cov = &c * inv * c.transpose();
            let rot_trace: f64 = (0..9).map(|k| cov[(k, k)]).sum();
            let pos_trace: f64 = (9..12).map(|k| cov[(k, k)]).sum();
            Ok(CrlbResult {
                position_bound: pos_trace.sqrt(),
                attitude_bound: rot_trace.sqrt(),
                covariance: cov,
            })
        }
    }
}

/// √(mean of squared errors); `errors` are per-run error norms.
pub fn rmse(errors: &[f64]) -> f64 {
    assert!(!errors.is_empty(), "rmse of an empty sample");
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// RMSE of position estimates against the true vector.
pub fn position_rmse(estimates: &[DVector<f64>], truth: &DVector<f64>) -> f64 {
    let errors: Vec<f64> = estimates.iter().map(|e| (e - truth).norm()).collect();
    rmse(&errors)
}

/// RMSE of yaw estimates, with differences wrapped to (−π, π].
pub fn yaw_rmse(estimates: &[f64], truth: f64) -> f64 {
    let errors: Vec<f64> = estimates
        .iter()
        .map(|&e| wrap_angle(e - truth).abs())
        .collect();
    rmse(&errors)
}

/// RMSE of rotation estimates in the Frobenius norm ‖R̂ − R‖.
pub fn rotation_rmse(estimates: &[DMatrix<f64>], truth: &DMatrix<f64>) -> f64 {
    let errors: Vec<f64> = estimates.iter().map(|e| (e - truth).norm()).collect();
    rmse(&errors)
}

/// Per-epoch error: (‖p̂_c − p_c‖, attitude error). The attitude error is
/// the wrapped |Δψ| for planar poses and ‖R̂ − R‖ for spatial ones.
pub fn epoch_error(estimate: &Pose, truth: &Pose) -> Result<(f64, f64)> {
    if estimate.dim() != truth.dim() {
        return Err(Error::DimensionMismatch(
            "poses must share one dimension".into(),
        ));
    }
    let position = (estimate.position() - truth.position()).norm();
    let attitude = if estimate.dim() == 2 {
        wrap_angle(estimate.yaw() - truth.yaw()).abs()
    } else {
        (estimate.rotation() - truth.rotation()).norm()
    };
    Ok((position, attitude))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AnchorSet, TagLayout};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn mask_with(counts: &[usize], anchors: usize) -> VisibilityMask {
        let mut mask = VisibilityMask::all_hidden(anchors, counts.len());
        for (t, &m) in counts.iter().enumerate() {
            for a in 0..m {
                mask.set(a, t, true);
            }
        }
        mask
    }

    #[test]
    fn availability_examples() {
        // Total 3 spread over two tags: available.
        assert!(check_availability(&mask_with(&[2, 1, 0], 5), 2).available);
        // One tag holding everything: yaw unobservable.
        assert!(!check_availability(&mask_with(&[3, 0, 0], 5), 2).available);
        // Total below 3.
        assert!(!check_availability(&mask_with(&[1, 1], 5), 2).available);
        // 3D rule.
        assert!(check_availability(&mask_with(&[2, 2, 2], 6), 3).available);
        assert!(!check_availability(&mask_with(&[3, 3, 0], 6), 3).available);
    }

    #[test]
    fn availability_monotone_in_visibility() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut mask = VisibilityMask::all_hidden(5, 3);
            for a in 0..5 {
                for t in 0..3 {
                    if rng.gen_bool(0.3) {
                        mask.set(a, t, true);
                    }
                }
            }
            let before = check_availability(&mask, 2).available;
            let (a, t) = (rng.gen_range(0..5), rng.gen_range(0..3));
            mask.set(a, t, true);
            let after = check_availability(&mask, 2).available;
            assert!(!before || after, "adding a measurement flipped true→false");
        }
    }

    fn planar_problem() -> (ProblemGeometry, Pose) {
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
        (
            ProblemGeometry::new(anchors, layout, None).unwrap(),
            Pose::planar(2.0, 10.0, 1.047),
        )
    }

    fn spatial_problem() -> (ProblemGeometry, Pose) {
        let anchors = AnchorSet::from_rows(&[
            vec![-50.0, -65.0, -70.0],
            vec![50.0, -35.0, -25.0],
            vec![-50.0, 5.0, -5.0],
            vec![15.0, -45.0, -15.0],
            vec![-15.0, 30.0, 30.0],
            vec![50.0, 45.0, 55.0],
        ])
        .unwrap();
        let layout = TagLayout::from_rows(&[
            vec![1.5, 0.0, 0.0],
            vec![4.5, 0.0, 0.0],
            vec![4.5, 4.5, 0.0],
            vec![4.5, 4.5, 0.0],
            vec![3.0, 3.0, 3.0],
        ])
        .unwrap();
        (
            ProblemGeometry::new(anchors, layout, None).unwrap(),
            Pose::spatial(5.0, 5.0, 2.0, -0.436, 0.349, 0.175),
        )
    }

    #[test]
    fn fim_zero_without_visibility() {
        let (problem, pose) = planar_problem();
        let mask = VisibilityMask::all_hidden(5, 4);
        let fim = fisher_information(&pose, &problem, &mask, 0.1).unwrap();
        assert_eq!(fim.matrix.norm(), 0.0);
    }

    #[test]
    fn fim_scales_with_inverse_variance() {
        let (problem, pose) = planar_problem();
        let mask = VisibilityMask::all_visible(5, 4);
        let f1 = fisher_information(&pose, &problem, &mask, 0.2).unwrap();
        let f2 = fisher_information(&pose, &problem, &mask, 0.1).unwrap();
        assert!((f2.matrix - 4.0 * f1.matrix).norm() < 1e-9);
    }

    /// Log-likelihood of zero-noise measurements as a function of the planar
    /// pose parameters (up to the constant), for the curvature oracle.
    fn planar_loglik(problem: &ProblemGeometry, truth: &Pose, x: &[f64], sigma: f64) -> f64 {
        let pose = Pose::planar(x[0], x[1], x[2]);
        let mut ll = 0.0;
        for i in 0..problem.num_tags() {
            for j in 0..problem.num_anchors() {
                let delta = problem.true_range(truth, i, j).unwrap();
                let r = problem.true_range(&pose, i, j).unwrap();
                ll -= (delta - r).powi(2) / (2.0 * sigma * sigma);
            }
        }
        ll
    }

    #[test]
    fn planar_fim_matches_likelihood_curvature() {
        // Oracle: central finite differences of the log-likelihood at truth.
        let (problem, pose) = planar_problem();
        let mask = VisibilityMask::all_visible(5, 4);
        let sigma = 0.3;
        let fim = fisher_information(&pose, &problem, &mask, sigma).unwrap();
        let x0 = [pose.position()[0], pose.position()[1], pose.yaw()];
        let h = 1e-4;
        let mut hessian = DMatrix::zeros(3, 3);
        for a in 0..3 {
            for b in 0..3 {
                let mut xpp = x0;
                let mut xpm = x0;
                let mut xmp = x0;
                let mut xmm = x0;
                xpp[a] += h;
                xpp[b] += h;
                xpm[a] += h;
                xpm[b] -= h;
                xmp[a] -= h;
                xmp[b] += h;
                xmm[a] -= h;
                xmm[b] -= h;
                hessian[(a, b)] = (planar_loglik(&problem, &pose, &xpp, sigma)
                    - planar_loglik(&problem, &pose, &xpm, sigma)
                    - planar_loglik(&problem, &pose, &xmp, sigma)
                    + planar_loglik(&problem, &pose, &xmm, sigma))
                    / (4.0 * h * h);
            }
        }
        let rel = (&fim.matrix + &hessian).norm() / fim.matrix.norm();
        assert!(rel < 1e-4, "relative curvature mismatch {rel}");
    }

    fn spatial_loglik(
        problem: &ProblemGeometry,
        truth: &Pose,
        chi: &DVector<f64>,
        sigma: f64,
    ) -> f64 {
        let mut ll = 0.0;
        for i in 0..problem.num_tags() {
            let l = problem.layout().local(i);
            let mut p = DVector::zeros(3);
            for c in 0..3 {
                p[c] = chi[9 + c] + l[0] * chi[c] + l[1] * chi[3 + c] + l[2] * chi[6 + c];
            }
            for j in 0..problem.num_anchors() {
                let delta = problem.true_range(truth, i, j).unwrap();
                let r = (&p - problem.anchors().position(j)).norm();
                ll -= (delta - r).powi(2) / (2.0 * sigma * sigma);
            }
        }
        ll
    }

    #[test]
    fn spatial_fim_matches_likelihood_curvature() {
        let (problem, pose) = spatial_problem();
        let mask = VisibilityMask::all_visible(6, 5);
        let sigma = 0.3;
        let fim = fisher_information(&pose, &problem, &mask, sigma).unwrap();
        let r = pose.rotation();
        let mut chi0 = DVector::zeros(12);
        for a in 0..3 {
            for c in 0..3 {
                chi0[3 * a + c] = r[(c, a)];
            }
        }
        for c in 0..3 {
            chi0[9 + c] = pose.position()[c];
        }
        let h = 1e-4;
        let mut hessian = DMatrix::zeros(12, 12);
        for a in 0..12 {
            for b in 0..12 {
                let mut xpp = chi0.clone();
                let mut xpm = chi0.clone();
                let mut xmp = chi0.clone();
                let mut xmm = chi0.clone();
                xpp[a] += h;
                xpp[b] += h;
                xpm[a] += h;
                xpm[b] -= h;
                xmp[a] -= h;
                xmp[b] += h;
                xmm[a] -= h;
                xmm[b] -= h;
                hessian[(a, b)] = (spatial_loglik(&problem, &pose, &xpp, sigma)
                    - spatial_loglik(&problem, &pose, &xpm, sigma)
                    - spatial_loglik(&problem, &pose, &xmp, sigma)
                    + spatial_loglik(&problem, &pose, &xmm, sigma))
                    / (4.0 * h * h);
            }
        }
        let rel = (&fim.matrix + &hessian).norm() / fim.matrix.norm();
        assert!(rel < 1e-4, "relative curvature mismatch {rel}");
    }

    #[test]
    fn crlb_scales_with_sigma_squared() {
        let (problem, pose) = planar_problem();
        let mask = VisibilityMask::all_visible(5, 4);
        let c1 = crlb(&pose, &problem, &mask, 0.1).unwrap();
        let c2 = crlb(&pose, &problem, &mask, 0.2).unwrap();
        assert!((2.0 * c1.position_bound - c2.position_bound).abs() < 1e-9);
        assert!((2.0 * c1.attitude_bound - c2.attitude_bound).abs() < 1e-9);

        let (problem3, pose3) = spatial_problem();
        let mask3 = VisibilityMask::all_visible(6, 5);
        let d1 = crlb(&pose3, &problem3, &mask3, 0.1).unwrap();
        let d2 = crlb(&pose3, &problem3, &mask3, 0.2).unwrap();
        assert!((2.0 * d1.position_bound - d2.position_bound).abs() < 1e-8);
        assert!((2.0 * d1.attitude_bound - d2.attitude_bound).abs() < 1e-8);
    }

    #[test]
    fn crlb_singular_when_unavailable() {
        let (problem, pose) = planar_problem();
        let mut mask = VisibilityMask::all_hidden(5, 4);
        mask.set(0, 0, true);
        mask.set(1, 0, true);
        assert!(matches!(
            crlb(&pose, &problem, &mask, 0.1),
            Err(Error::SingularInformation(_))
        ));
    }

    #[test]
    fn constraint_tangent_space_has_pose_dimension() {
        // Six orthonormality constraints are independent and the determinant
        // row is tangentially redundant on SO(3), so the tangent space of
        // the constrained parameterization has dimension 3 + 3.
        let pose = Pose::spatial(1.0, -2.0, 0.5, 0.3, -0.2, 1.1);
        let jac = so_constraint_jacobian(&pose.rotation());
        let c = null_space_basis(&jac, 1e-6);
        assert_eq!(c.ncols(), 6);
        // Orthonormal columns.
        let gram = c.transpose() * &c;
        assert!((gram - DMatrix::identity(6, 6)).norm() < 1e-10);
    }

    #[test]
    fn crlb_monotone_in_visibility() {
        let (problem, pose) = planar_problem();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut mask = VisibilityMask::all_visible(5, 4);
            // Remove a few random pairs while keeping the problem solvable.
            for _ in 0..rng.gen_range(0..6) {
                mask.set(rng.gen_range(0..5), rng.gen_range(0..4), false);
            }
            let full = crlb(&pose, &problem, &VisibilityMask::all_visible(5, 4), 0.2).unwrap();
            if let Ok(reduced) = crlb(&pose, &problem, &mask, 0.2) {
                for k in 0..3 {
                    assert!(
                        reduced.covariance[(k, k)] >= full.covariance[(k, k)] - 1e-12,
                        "dropping measurements must not shrink the bound"
                    );
                }
            }
        }
    }

    #[test]
    fn rmse_arithmetic() {
        assert_eq!(rmse(&[0.0, 0.0]), 0.0);
        assert_relative_eq!(rmse(&[3.0, 4.0]), 12.5f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn epoch_error_cases() {
        let truth = Pose::planar(1.0, 2.0, 0.5);
        let same = epoch_error(&truth, &truth).unwrap();
        assert_eq!(same, (0.0, 0.0));

        let wrapped = Pose::planar(1.0, 2.0, 0.5 + 2.0 * std::f64::consts::PI);
        let (dp, dpsi) = epoch_error(&wrapped, &truth).unwrap();
        assert_eq!(dp, 0.0);
        assert!(dpsi < 1e-12);

        let spatial = Pose::spatial(0.0, 0.0, 0.0, 0.1, 0.2, 0.3);
        let spatial_err = epoch_error(&spatial, &spatial).unwrap();
        assert_eq!(spatial_err, (0.0, 0.0));
        assert!(epoch_error(&truth, &spatial).is_err());
    }
}
