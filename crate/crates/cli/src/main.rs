use std::path::PathBuf;
use std::process::ExitCode;

use rbl_cli::{cmd_crlb, cmd_montecarlo, cmd_trajectory, cmd_validate, ExperimentConfig};

const USAGE: &str = "\
rbl - rigid body localization experiment runner

USAGE:
  rbl <SUBCOMMAND> [FLAGS]

SUBCOMMANDS:
  montecarlo   RMSE vs noise on a static scene; writes rmse.csv
  trajectory   per-epoch run along a trajectory; writes epochs.csv, summary.csv
  crlb         CRLB per noise level (static) or per epoch (trajectory)
  validate     check a config or builtin scene without running estimators

FLAGS:
  --scene NAME      builtin scene: paper-2d | paper-3d | paper-warehouse
  --config PATH     JSON experiment config (see README for the schema)
  --seed U64        base RNG seed (default 1)
  --runs N          Monte Carlo runs per noise level (default 1000)
  --sigma S         single noise level (m)
  --sigmas A,B,..   noise grid (m)
  --methods LIST    comma list of erbl,dac,erbl-sp (default erbl,dac)
  --out DIR         output directory (default results/<scene>)
  --threads N       worker threads (default: all cores)
  --help            this text

Either --scene or --config is required. Flags override config values.
";

fn parse_args() -> Result<(String, ExperimentConfig, PathBuf), String> {
    let mut args = std::env::args().skip(1);
    let sub = match args.next() {
        Some(s) if s == "--help" || s == "-h" => {
            print!("{USAGE}");
            std::process::exit(0);
        }
        Some(s) => s,
        None => return Err("missing subcommand".into()),
    };
    if !["montecarlo", "trajectory", "crlb", "validate"].contains(&sub.as_str()) {
        return Err(format!("unknown subcommand '{sub}'"));
    }

    let mut scene: Option<String> = None;
    let mut config_path: Option<PathBuf> = None;
    let mut seed: Option<u64> = None;
    let mut runs: Option<usize> = None;
    let mut sigmas: Option<Vec<f64>> = None;
    let mut methods: Option<Vec<String>> = None;
    let mut out: Option<PathBuf> = None;
    let mut threads: Option<usize> = None;

    fn next_value(args: &mut impl Iterator<Item = String>, flag: &str) -> Result<String, String> {
        args.next().ok_or(format!("missing value for {flag}"))
    }
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--help" | "-h" => {
                print!("{USAGE}");
                std::process::exit(0);
            }
            "--scene" => scene = Some(next_value(&mut args, "--scene")?),
            "--config" => config_path = Some(PathBuf::from(next_value(&mut args, "--config")?)),
            "--seed" => {
                seed = Some(
                    next_value(&mut args, "--seed")?
                        .parse()
                        .map_err(|_| "invalid --seed (expected u64)".to_string())?,
                )
            }
            "--runs" => {
                runs = Some(
                    next_value(&mut args, "--runs")?
                        .parse()
                        .map_err(|_| "invalid --runs (expected integer)".to_string())?,
                )
            }
            "--sigma" => {
                sigmas = Some(vec![next_value(&mut args, "--sigma")?
                    .parse()
                    .map_err(|_| "invalid --sigma (expected number)".to_string())?])
            }
            "--sigmas" => {
                let list = next_value(&mut args, "--sigmas")?;
                let parsed: Result<Vec<f64>, _> =
                    list.split(',').map(|v| v.trim().parse()).collect();
                sigmas = Some(parsed.map_err(|_| "invalid --sigmas list".to_string())?);
            }
            "--methods" => {
                methods = Some(
                    next_value(&mut args, "--methods")?
                        .split(',')
                        .map(|m| m.trim().to_string())
                        .collect(),
                )
            }
            "--out" => out = Some(PathBuf::from(next_value(&mut args, "--out")?)),
            "--threads" => {
                threads = Some(
                    next_value(&mut args, "--threads")?
                        .parse()
                        .map_err(|_| "invalid --threads (expected integer)".to_string())?,
                )
            }
            other => return Err(format!("unknown flag '{other}'")),
        }
    }

    let mut config = match (config_path, scene) {
        (Some(path), None) => ExperimentConfig::from_path(&path).map_err(|e| e.to_string())?,
        (None, Some(name)) => ExperimentConfig::from_scene_name(&name),
        (Some(path), Some(name)) => {
            let mut cfg = ExperimentConfig::from_path(&path).map_err(|e| e.to_string())?;
            cfg.scene = rbl_cli::config::SceneRef::Builtin(name);
            cfg
        }
        (None, None) => return Err("either --scene or --config is required".into()),
    };
    if let Some(seed) = seed {
        config.seed = Some(seed);
    }
    if let Some(runs) = runs {
        config.runs = Some(runs);
    }
    if let Some(sigmas) = sigmas {
        if sigmas.len() == 1 {
            config.noise = Some(rbl_cli::config::NoiseConfig {
                sigma: sigmas[0],
                seed: config.base_seed(),
            });
        }
        config.sigmas = Some(sigmas);
    }
    if let Some(methods) = methods {
        config.methods = methods;
    }
    if let Some(threads) = threads {
        config.threads = Some(threads);
    }
    let out_dir = out
        .or_else(|| config.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| {
            let scene_name = match &config.scene {
                rbl_cli::config::SceneRef::Builtin(n) => n.clone(),
                rbl_cli::config::SceneRef::Inline(_) => "custom".into(),
            };
            PathBuf::from("results").join(scene_name)
        });
    Ok((sub, config, out_dir))
}

fn main() -> ExitCode {
    let (sub, config, out) = match parse_args() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}\n\n{USAGE}");
            return ExitCode::from(2);
        }
    };
    let result = match sub.as_str() {
        "montecarlo" => cmd_montecarlo(&config, &out),
        "trajectory" => cmd_trajectory(&config, &out),
        "crlb" => cmd_crlb(&config, &out),
        "validate" => cmd_validate(&config),
        _ => unreachable!(),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
