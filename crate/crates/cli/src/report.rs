//! CSV writers. All files are UTF-8, comma-separated, `.` decimal, LF line
//! endings, one header row; units are documented in `schema.txt`.

use std::fmt::Write as _;
use std::path::Path;

use rbl_core::baselines::Method;
use rbl_core::simulation::{EpochResult, MonteCarloTable};

use crate::CliResult;

fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), contents)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// `rmse.csv`: one row per (σ, method) with the CRLB columns repeated.
pub fn write_rmse_csv(dir: &Path, table: &MonteCarloTable) -> CliResult<()> {
    let mut out = String::new();
    out.push_str("sigma,method,rmse_attitude,rmse_position,crlb_attitude,crlb_position\n");
    for cell in &table.cells {
        let crlb = table
            .crlb
            .iter()
            .find(|r| r.sigma == cell.sigma)
            .expect("crlb row per sigma");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            cell.sigma,
            cell.method.name(),
            cell.rmse_attitude,
            cell.rmse_position,
            crlb.attitude_bound,
            crlb.position_bound
        );
    }
    write_file(dir, "rmse.csv", &out)
}

/// `epochs.csv`: one row per epoch with per-tag counts and per-method
/// results. Wall-clock columns are timing diagnostics and are the only
/// non-deterministic fields.
pub fn write_epochs_csv(dir: &Path, results: &[EpochResult], methods: &[Method]) -> CliResult<()> {
    let num_tags = results.first().map(|r| r.counts.len()).unwrap_or(0);
    let mut out = String::new();
    out.push_str("epoch,time");
    for t in 0..num_tags {
        let _ = write!(out, ",m_{}", t + 1);
    }
    out.push_str(",available");
    for m in methods {
        let n = m.name().replace('-', "_");
        let _ = write!(
            out,
            ",{n}_feasible,{n}_pos_error,{n}_att_error,{n}_iterations,{n}_wallclock_us"
        );
    }
    out.push_str(",edm_error_triangle,edm_error_shortestpath\n");
    for r in results {
        let _ = write!(out, "{},{}", r.epoch, r.time);
        for c in &r.counts {
            let _ = write!(out, ",{c}");
        }
        let _ = write!(out, ",{}", r.available as u8);
        for m in &r.methods {
            let _ = write!(
                out,
                ",{},{},{},{},{}",
                m.feasible as u8,
                fmt_opt(m.position_error),
                fmt_opt(m.attitude_error),
                m.iterations,
                m.wallclock_us
            );
        }
        let _ = writeln!(
            out,
            ",{},{}",
            fmt_opt(r.edm_error_triangle),
            fmt_opt(r.edm_error_shortest_path)
        );
    }
    write_file(dir, "epochs.csv", &out)
}

/// `summary.csv`: min/max/mean attitude and position errors per method over
/// its feasible epochs, plus availability and mean iteration/time columns.
pub fn write_summary_csv(dir: &Path, results: &[EpochResult], methods: &[Method]) -> CliResult<()> {
    let mut out = String::new();
    out.push_str(
        "method,att_min,att_max,att_mean,pos_min,pos_max,pos_mean,feasible_epochs,availability_pct,mean_iterations,mean_wallclock_us\n",
    );
    for (mi, m) in methods.iter().enumerate() {
        let feasible: Vec<_> = results
            .iter()
            .map(|r| &r.methods[mi])
            .filter(|e| e.feasible)
            .collect();
        let att: Vec<f64> = feasible.iter().filter_map(|e| e.attitude_error).collect();
        let pos: Vec<f64> = feasible.iter().filter_map(|e| e.position_error).collect();
        let stats = |v: &[f64]| {
            if v.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                (
                    v.iter().copied().fold(f64::INFINITY, f64::min),
                    v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    v.iter().sum::<f64>() / v.len() as f64,
                )
            }
        };
        let (att_min, att_max, att_mean) = stats(&att);
        let (pos_min, pos_max, pos_mean) = stats(&pos);
        let availability = 100.0 * feasible.len() as f64 / results.len().max(1) as f64;
        let mean_iters = if feasible.is_empty() {
            0.0
        } else {
            feasible.iter().map(|e| e.iterations as f64).sum::<f64>() / feasible.len() as f64
        };
        let mean_clock = if feasible.is_empty() {
            0.0
        } else {
            feasible.iter().map(|e| e.wallclock_us as f64).sum::<f64>() / feasible.len() as f64
        };
        let _ = writeln!(
            out,
            "{},{att_min},{att_max},{att_mean},{pos_min},{pos_max},{pos_mean},{},{availability},{mean_iters},{mean_clock}",
            m.name(),
            feasible.len()
        );
    }
    write_file(dir, "summary.csv", &out)
}

/// `crlb.csv` for static scenes: one row per σ.
pub fn write_crlb_sigma_csv(dir: &Path, rows: &[(f64, f64, f64)]) -> CliResult<()> {
    let mut out = String::new();
    out.push_str("sigma,crlb_attitude,crlb_position\n");
    for (sigma, att, pos) in rows {
        let _ = writeln!(out, "{sigma},{att},{pos}");
    }
    write_file(dir, "crlb.csv", &out)
}

/// `crlb.csv` for trajectories: one row per epoch; unavailable epochs carry
/// empty bounds.
pub fn write_crlb_epoch_csv(
    dir: &Path,
    rows: &[(usize, bool, Option<f64>, Option<f64>)],
) -> CliResult<()> {
    let mut out = String::new();
    out.push_str("epoch,available,crlb_attitude,crlb_position\n");
    for (epoch, available, att, pos) in rows {
        let _ = writeln!(
            out,
            "{epoch},{},{},{}",
            *available as u8,
            fmt_opt(*att),
            fmt_opt(*pos)
        );
    }
    write_file(dir, "crlb.csv", &out)
}

/// Column and unit documentation placed next to every CSV output.
pub fn write_schema(dir: &Path) -> CliResult<()> {
    let text = "\
rmse.csv
  sigma            TOF noise standard deviation (m)
  method           erbl | dac | erbl-sp
  rmse_attitude    RMSE of yaw (rad, planar) or of the rotation matrix in
                   the Frobenius norm (dimensionless, spatial)
  rmse_position    RMSE of the body-origin position (m)
  crlb_attitude    CRLB on rmse_attitude (same unit)
  crlb_position    CRLB on rmse_position (m)

epochs.csv
  epoch            epoch index (0-based)
  time             epoch time (s)
  m_i              measurements available to tag i
  available        1 when the joint pose is solvable from the epoch's
                   measurement counts
  <m>_feasible     1 when method <m> produced a pose
  <m>_pos_error    position error (m); empty when infeasible
  <m>_att_error    yaw error (rad, planar) or rotation Frobenius error;
                   empty when infeasible
  <m>_iterations   pose refinement iterations (0 for dac)
  <m>_wallclock_us wall-clock time of the method run (microseconds);
                   timing diagnostic, not reproducible across runs
  edm_error_triangle       Frobenius error of the completed distance matrix
                           with triangle-inequality bounds (m)
  edm_error_shortestpath   same with graph shortest-path bounds (m)

summary.csv
  method           erbl | dac | erbl-sp
  att_min/max/mean attitude error stats over feasible epochs (rad)
  pos_min/max/mean position error stats over feasible epochs (m)
  feasible_epochs  epochs with a pose
  availability_pct 100 * feasible_epochs / epochs
  mean_iterations  mean pose refinement iterations
  mean_wallclock_us mean method wall-clock (microseconds, diagnostic)

crlb.csv (static scene)
  sigma, crlb_attitude, crlb_position as in rmse.csv
crlb.csv (trajectory)
  epoch, available, crlb_attitude, crlb_position; bounds are empty at
  epochs whose information matrix is singular
";
    write_file(dir, "schema.txt", text)
}
