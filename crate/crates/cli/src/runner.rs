//! Subcommand implementations; each returns a short human-readable summary
//! and writes CSV reports into the output directory.

use std::path::Path;

use rbl_core::analysis::{check_availability, crlb};
use rbl_core::simulation::{
    compute_visibility, run_monte_carlo, run_trajectory, NoiseModel, SceneMotion,
};

use crate::config::ExperimentConfig;
use crate::report;
use crate::{CliError, CliResult};

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Repeated-draw RMSE experiment on a static scene; writes `rmse.csv`.
pub fn cmd_montecarlo(config: &ExperimentConfig, out: &Path) -> CliResult<String> {
    let scenario = config.scenario()?;
    let methods = config.method_list()?;
    let sigmas = config.sigma_grid();
    let runs = config.runs.unwrap_or(1000);
    let seed = config.base_seed();
    let table = in_pool(config.threads, || {
        run_monte_carlo(&scenario, &sigmas, runs, &methods, seed)
    })??;
    report::write_rmse_csv(out, &table)?;
    report::write_schema(out)?;
    Ok(format!(
        "{}: {} runs x {} noise levels x {} methods -> {}",
        scenario.scene.name,
        runs,
        sigmas.len(),
        methods.len(),
        out.join("rmse.csv").display()
    ))
}

/// Per-epoch trajectory experiment; writes `epochs.csv` and `summary.csv`.
pub fn cmd_trajectory(config: &ExperimentConfig, out: &Path) -> CliResult<String> {
    let scenario = config.scenario()?;
    let methods = config.method_list()?;
    let noise = NoiseModel::new(config.noise_sigma(), config.base_seed())?;
    let results = in_pool(config.threads, || {
        run_trajectory(&scenario, &methods, &noise)
    })??;
    report::write_epochs_csv(out, &results, &methods)?;
    report::write_summary_csv(out, &results, &methods)?;
    report::write_schema(out)?;
    Ok(format!(
        "{}: {} epochs x {} methods -> {}",
        scenario.scene.name,
        results.len(),
        methods.len(),
        out.join("epochs.csv").display()
    ))
}

/// CRLB evaluation; per σ for static scenes, per epoch along trajectories.
pub fn cmd_crlb(config: &ExperimentConfig, out: &Path) -> CliResult<String> {
    let scenario = config.scenario()?;
    let problem = scenario.scene.problem();
    match &scenario.motion {
        SceneMotion::Static(pose) => {
            let mask = compute_visibility(&scenario.scene, pose)?;
            let mut rows = Vec::new();
            for sigma in config.sigma_grid() {
                let bound = crlb(pose, &problem, &mask, sigma)?;
                rows.push((sigma, bound.attitude_bound, bound.position_bound));
            }
            report::write_crlb_sigma_csv(out, &rows)?;
            report::write_schema(out)?;
            Ok(format!(
                "{}: CRLB over {} noise levels -> {}",
                scenario.scene.name,
                rows.len(),
                out.join("crlb.csv").display()
            ))
        }
        SceneMotion::Trajectory(trajectory) => {
            let sigma = config.noise_sigma();
            let mut rows = Vec::new();
            for (e, (_, pose)) in trajectory.iter().enumerate() {
                let mask = compute_visibility(&scenario.scene, pose)?;
                let available = check_availability(&mask, problem.dim()).available;
                match crlb(pose, &problem, &mask, sigma) {
                    Ok(bound) => rows.push((
                        e,
                        available,
                        Some(bound.attitude_bound),
                        Some(bound.position_bound),
                    )),
                    Err(_) => rows.push((e, available, None, None)),
                }
            }
            report::write_crlb_epoch_csv(out, &rows)?;
            report::write_schema(out)?;
            Ok(format!(
                "{}: CRLB over {} epochs at sigma {} -> {}",
                scenario.scene.name,
                rows.len(),
                sigma,
                out.join("crlb.csv").display()
            ))
        }
    }
}

/// Config and scene diagnostics without running any estimator.
pub fn cmd_validate(config: &ExperimentConfig) -> CliResult<String> {
    let mut lines = Vec::new();
    let scenario = config.scenario()?;
    let scene = &scenario.scene;
    lines.push(format!(
        "scene '{}': {} anchors, {} tags, {} obstacles, pose dim {}",
        scene.name,
        scene.num_anchors(),
        scene.num_tags(),
        scene.obstacles.len(),
        scene.pose_dim()
    ));
    config.method_list()?;

    let (lo, hi) = scene.bounds();
    let margin = 0.1 * (hi - lo).norm().max(1.0);
    let problem = scene.problem();

    match &scenario.motion {
        SceneMotion::Static(pose) => {
            let mask = compute_visibility(scene, pose)?;
            let report = check_availability(&mask, problem.dim());
            lines.push(format!(
                "static pose: {} of {} pairs visible; available: {} ({})",
                mask.total(),
                scene.num_anchors() * scene.num_tags(),
                report.available,
                report.reason
            ));
        }
        SceneMotion::Trajectory(trajectory) => {
            let mut unavailable = Vec::new();
            let mut out_of_bounds = Vec::new();
            let mut min_total = usize::MAX;
            for (e, (_, pose)) in trajectory.iter().enumerate() {
                let mask = compute_visibility(scene, pose)?;
                if !check_availability(&mask, problem.dim()).available {
                    unavailable.push(e);
                }
                min_total = min_total.min(mask.total());
                let p = pose.position();
                let inside = (0..2).all(|a| p[a] >= lo[a] - margin && p[a] <= hi[a] + margin);
                if !inside {
                    out_of_bounds.push(e);
                }
            }
            lines.push(format!(
                "trajectory: {} epochs, min total measurements {}",
                trajectory.len(),
                min_total
            ));
            if unavailable.is_empty() {
                lines.push("availability preview: all epochs solvable".into());
            } else {
                lines.push(format!(
                    "warning: {} epoch(s) unavailable, first at epoch {}",
                    unavailable.len(),
                    unavailable[0]
                ));
            }
            if !out_of_bounds.is_empty() {
                lines.push(format!(
                    "warning: trajectory leaves the scene bounds at epoch {}",
                    out_of_bounds[0]
                ));
            }
        }
    }
    lines.push("valid".into());
    Ok(lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        BoxConfig, CircuitConfig, MotionConfig, NoiseConfig, SceneConfig, SceneRef,
    };

    fn warehouse_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_scene_name("paper-warehouse");
        cfg.noise = Some(NoiseConfig {
            sigma: 0.1,
            seed: 1,
        });
        cfg.methods = vec!["erbl".into(), "dac".into(), "erbl-sp".into()];
        cfg
    }

    #[test]
    fn validate_builtin_scenes() {
        for name in ["paper-2d", "paper-3d", "paper-warehouse"] {
            let cfg = ExperimentConfig::from_scene_name(name);
            let report = cmd_validate(&cfg).unwrap();
            assert!(report.ends_with("valid"), "{name}: {report}");
        }
        let report = cmd_validate(&warehouse_config()).unwrap();
        assert!(report.contains("all epochs solvable"));
    }

    #[test]
    fn validate_rejects_tag_inside_cargo() {
        let cfg = ExperimentConfig {
            scene: SceneRef::Inline(Box::new(SceneConfig {
                name: None,
                anchors: vec![vec![0.0, 0.0, 6.0], vec![10.0, 0.0, 6.0]],
                tags: vec![vec![0.0, 0.0, 0.5], vec![2.0, 0.0, -0.15]],
                obstacles: vec![],
                cargo: Some(BoxConfig {
                    center: [0.0, 0.0, 1.4],
                    size: [3.6, 1.6, 2.8],
                }),
                range_limit: None,
                planar_base_height: Some(0.3),
                motion: MotionConfig::Pose {
                    position: vec![0.0, 0.0],
                    attitude: vec![0.0],
                },
            })),
            methods: vec!["erbl".into()],
            noise: None,
            sigmas: None,
            runs: None,
            seed: None,
            out: None,
            threads: None,
        };
        let err = cmd_validate(&cfg).unwrap_err();
        assert!(err.to_string().contains("cargo"), "{err}");
    }

    #[test]
    fn validate_warns_when_trajectory_leaves_bounds() {
        let cfg = ExperimentConfig {
            scene: SceneRef::Inline(Box::new(SceneConfig {
                name: None,
                anchors: vec![
                    vec![0.0, 0.0],
                    vec![10.0, 0.0],
                    vec![10.0, 10.0],
                    vec![0.0, 10.0],
                ],
                tags: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
                obstacles: vec![],
                cargo: None,
                range_limit: None,
                planar_base_height: None,
                motion: MotionConfig::Circuit(CircuitConfig {
                    waypoints: vec![[0.0, 5.0], [100.0, 5.0]],
                    schedule: vec![[1.0, 60.0]],
                    epochs: 60,
                    rate_hz: 1.0,
                }),
            })),
            methods: vec!["erbl".into()],
            noise: None,
            sigmas: None,
            runs: None,
            seed: None,
            out: None,
            threads: None,
        };
        let report = cmd_validate(&cfg).unwrap();
        assert!(report.contains("leaves the scene bounds"), "{report}");
    }

    #[test]
    fn crlb_static_scales_with_sigma() {
        let mut cfg = ExperimentConfig::from_scene_name("paper-2d");
        cfg.sigmas = Some(vec![0.1, 0.2]);
        let dir = std::env::temp_dir().join("rbl_cli_crlb_test");
        let _ = std::fs::remove_dir_all(&dir);
        cmd_crlb(&cfg, &dir).unwrap();
        let text = std::fs::read_to_string(dir.join("crlb.csv")).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 2);
        assert!((rows[1][1] / rows[0][1] - 2.0).abs() < 1e-9);
        assert!((rows[1][2] / rows[0][2] - 2.0).abs() < 1e-9);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn montecarlo_writes_expected_shape() {
        let mut cfg = ExperimentConfig::from_scene_name("paper-2d");
        cfg.sigmas = Some(vec![0.0, 0.5]);
        cfg.runs = Some(8);
        let dir = std::env::temp_dir().join("rbl_cli_mc_test");
        let _ = std::fs::remove_dir_all(&dir);
        cmd_montecarlo(&cfg, &dir).unwrap();
        let text = std::fs::read_to_string(dir.join("rmse.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sigma,method,rmse_attitude,rmse_position,crlb_attitude,crlb_position"
        );
        // 2 sigmas x 2 default methods.
        assert_eq!(lines.count(), 4);
        // Zero-noise rows must report (numerically) zero RMSE.
        let zero_rows: Vec<&str> = text
            .lines()
            .skip(1)
            .filter(|l| l.starts_with("0,"))
            .collect();
        assert_eq!(zero_rows.len(), 2);
        for row in zero_rows {
            let cols: Vec<&str> = row.split(',').collect();
            assert!(cols[2].parse::<f64>().unwrap().abs() < 1e-9);
            assert!(cols[3].parse::<f64>().unwrap().abs() < 1e-9);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
