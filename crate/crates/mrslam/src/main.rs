use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mrslam::config::{MissionConfig, Scenario};
use mrslam::io;
use mrslam::mission::{run_mission, MissionResult};
use mrslam_core::comms::utilization;

#[derive(Parser)]
#[command(name = "mrslam", version, about = "Multi-robot sonar SLAM simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one mission and write its result files.
    Run {
        #[command(flatten)]
        mission: MissionArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run every case over a range of seeds and print an aggregate table.
    Sweep {
        #[command(flatten)]
        mission: MissionArgs,
        /// Number of seeds, starting at --seed (or 0).
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Cases to run; defaults to all five.
        #[arg(long, value_delimiter = ',')]
        cases: Vec<u8>,
        /// Optional CSV with one row per case.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the sliding-window utilization series of one mission.
    PlotData {
        #[command(flatten)]
        mission: MissionArgs,
        /// Events per window; defaults to the configured window.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, default_value = "utilization.csv")]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    DefaultConfig {
        #[arg(long, value_enum)]
        scenario: Option<Scenario>,
    },
}

#[derive(Args)]
struct MissionArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    case: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    robots: Option<usize>,
    #[arg(long, value_enum)]
    scenario: Option<Scenario>,
}

impl MissionArgs {
    fn resolve(&self) -> anyhow::Result<MissionConfig> {
        let mut cfg = match (&self.config, self.scenario) {
            (Some(p), _) => MissionConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            (None, Some(s)) => MissionConfig::for_scenario(s),
            (None, None) => MissionConfig::default(),
        };
        if let (Some(_), Some(s)) = (&self.config, self.scenario) {
            cfg.scenario = s;
        }
        if let Some(c) = self.case {
            cfg.case = c;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.robots {
            cfg.robots = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_outputs(res: &MissionResult, out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_metrics(&out.join("metrics.csv"), &res.metrics)?;
    io::write_channel_log(&out.join("channel_log.csv"), &res.log)?;
    io::write_utilization(&out.join("utilization.csv"), &res.utilization)?;
    io::save_g2o(&out.join("graph.g2o"), &res.nodes[0].graph)?;
    for n in &res.nodes[1..] {
        io::save_g2o(&out.join(format!("graph_robot{}.g2o", n.id)), &n.graph)?;
    }
    io::write_map(&out.join("merged_map.csv"), &res.merged_map(0))?;
    fs::write(out.join("config.toml"), res.config.to_toml())?;
    Ok(())
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        "-".into()
    } else {
        format!("{x:.3}")
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        // a closed pipe (e.g. `| head`) is not a failure
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe) => Ok(()),
        r => r,
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    let mut stdout = std::io::stdout().lock();
    match command {
        Command::Run { mission, out } => {
            let cfg = mission.resolve()?;
            let res = run_mission(&cfg)?;
            write_outputs(&res, &out)?;
            let m = &res.metrics;
            writeln!(
                stdout,
                "case {} seed {}: ir_loops={} full MAE {} m / {} deg, RMSE {} m / {} deg; avg {} bit/s, total {} bits",
                cfg.case,
                cfg.seed,
                m.ir_loops,
                fmt(m.full.mae_dist),
                fmt(m.full.mae_theta_deg),
                fmt(m.full.rmse_dist),
                fmt(m.full.rmse_theta_deg),
                fmt(m.network_avg),
                m.total_bits
            )?;
            for n in &res.nodes {
                writeln!(stdout, "robot {}: {:?}", n.id, n.stats)?;
            }
        }
        Command::Sweep {
            mission,
            seeds,
            cases,
            csv,
        } => {
            let base = mission.resolve()?;
            let cases = if cases.is_empty() { vec![1, 2, 3, 4, 5] } else { cases };
            let mut rows = Vec::new();
            for &case in &cases {
                let mut acc = [0.0f64; 9];
                let mut counts = [0usize; 2];
                let mut success = 0;
                for s in 0..seeds {
                    let cfg = MissionConfig {
                        case,
                        seed: base.seed + s,
                        ..base.clone()
                    };
                    let m = run_mission(&cfg)?.metrics;
                    success += m.success as usize;
                    acc[8] += m.network_avg;
                    for (i, b) in [m.full, m.ir].iter().enumerate() {
                        if b.count > 0 {
                            counts[i] += 1;
                            acc[4 * i] += b.mae_dist;
                            acc[4 * i + 1] += b.mae_theta_deg;
                            acc[4 * i + 2] += b.rmse_dist;
                            acc[4 * i + 3] += b.rmse_theta_deg;
                        }
                    }
                }
                let mut row = vec![case as f64];
                for i in 0..8 {
                    row.push(if counts[i / 4] > 0 { acc[i] / counts[i / 4] as f64 } else { f64::NAN });
                }
                row.push(acc[8] / seeds as f64);
                row.push(success as f64 / seeds as f64);
                rows.push(row);
            }
            let header = [
                "case",
                "full_mae_m",
                "full_mae_deg",
                "full_rmse_m",
                "full_rmse_deg",
                "ir_mae_m",
                "ir_mae_deg",
                "ir_rmse_m",
                "ir_rmse_deg",
                "avg_bps",
                "success_rate",
            ];
            writeln!(stdout, "{}", header.join("\t"))?;
            for r in &rows {
                let cells: Vec<String> = r.iter().enumerate().map(|(i, v)| if i == 0 { format!("{v}") } else { fmt(*v) }).collect();
                writeln!(stdout, "{}", cells.join("\t"))?;
            }
            if let Some(path) = csv {
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(header)?;
                for r in &rows {
                    w.write_record(r.iter().map(|v| v.to_string()))?;
                }
                w.flush()?;
            }
        }
        Command::PlotData { mission, window, out } => {
            let cfg = mission.resolve()?;
            let res = run_mission(&cfg)?;
            let u = utilization(&res.log, window.unwrap_or(cfg.comms.utilization_window), res.duration);
            io::write_utilization(&out, &u)?;
            writeln!(stdout, "{} points, average {} bit/s", u.series.len(), fmt(u.average))?;
        }
        Command::DefaultConfig { scenario } => {
            write!(stdout, "{}", MissionConfig::for_scenario(scenario.unwrap_or_default()).to_toml())?;
        }
    }
    Ok(())
}
