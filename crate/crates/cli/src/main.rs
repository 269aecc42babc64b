use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxreloc::config::Config;
use voxreloc::dataset::{read_dataset, write_dataset, write_poses, Dataset};
use voxreloc::harness::{
    build_map, gen_scene, run_eval, thread_pool, track_views, triangulate_tracks, view_sweep, write_inlier_trend,
    write_report, write_sweep,
};
use voxreloc::mapstore::{encoded_size, header_size, load_map, save_map, voxel_record_size};
use voxreloc::relocalizer::iterative_localize;
use voxreloc::renderer::activate;
use voxreloc::seed::mix;
use voxreloc::tracking::write_track_dump;
use voxreloc::trainer::write_loss_history;
use voxreloc::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_LOCALIZATION: u8 = 4;

#[derive(Parser)]
#[command(name = "voxreloc", version, about = "Voxel descriptor maps for camera relocalization")]
struct Cli {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for scene, training and RANSAC.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Track keypoints through the training frames and dump the tracks.
    Track {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Triangulate tracks and dump landmarks.
    Triangulate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build and train a voxel map.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory for per-voxel loss histories.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Localize every query from its prior and write the estimated poses.
    Localize {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localize queries, compare against their true poses and write reports.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        map: PathBuf,
        /// Output directory for report.txt, inliers.txt and sweep.txt.
        #[arg(long)]
        out: PathBuf,
        /// Also write the view-angle sweep, regenerating the configured scene.
        #[arg(long)]
        sweep: bool,
    },
    /// Print map statistics.
    Inspect {
        #[arg(long)]
        map: PathBuf,
    },
}

enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Localization(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

fn data_err<E: Into<anyhow::Error>>(context: String) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Data(e.into().context(context))
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| Failure::Config(anyhow::Error::from(e)))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_master_seed(s);
    }
    if let Some(w) = cli.workers {
        cfg.pipeline.workers = w;
    }
    if let Command::Train { epochs: Some(e), .. } = &cli.command {
        cfg.pipeline.train.epochs = *e;
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg)
}

fn dataset(path: &Path) -> Result<Dataset, Failure> {
    read_dataset(path).map_err(data_err(format!("reading dataset {}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let f = fs::File::create(path).map_err(data_err(format!("creating {}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { out } => {
            let g = gen_scene(&cfg.scene)?;
            let truths: Vec<_> = g.queries.iter().map(|q| q.pose).collect();
            let ds = Dataset {
                intrinsics: g.intrinsics,
                priors: cfg.priors(&truths),
                training: g.training,
                queries: g.queries,
            };
            write_dataset(out, &ds).map_err(data_err(format!("writing {}", out.display())))?;
            println!(
                "wrote {} training and {} query frames to {}",
                ds.training.len(),
                ds.queries.len(),
                out.display()
            );
        }
        Command::Track { data, out } => {
            let ds = dataset(&data.data)?;
            let tracks = thread_pool(cfg.pipeline.workers)?.install(|| track_views(&ds.training, &cfg.pipeline))?;
            let mut w = create(out)?;
            write_track_dump(&tracks, &mut w)?;
            w.flush()?;
            println!("{} tracks", tracks.len());
        }
        Command::Triangulate { data, out } => {
            let ds = dataset(&data.data)?;
            let (tracks, landmarks) = thread_pool(cfg.pipeline.workers)?.install(|| {
                let tracks = track_views(&ds.training, &cfg.pipeline)?;
                let lms = triangulate_tracks(&tracks, &ds.intrinsics, &cfg.pipeline.triangulation);
                Ok::<_, Error>((tracks, lms))
            })?;
            let mut w = create(out)?;
            writeln!(w, "# track_id x y z mean_reprojection_px iterations")?;
            for (_, lm) in &landmarks {
                let p = lm.position;
                writeln!(
                    w,
                    "{} {} {} {} {} {}",
                    lm.track_id, p.x, p.y, p.z, lm.mean_reprojection_error, lm.iterations
                )?;
            }
            w.flush()?;
            println!("{} of {} tracks triangulated", landmarks.len(), tracks.len());
        }
        Command::Train { data, out, history, .. } => {
            let ds = dataset(&data.data)?;
            let built = build_map(&ds.training, &ds.intrinsics, &cfg.pipeline)?;
            let bytes = save_map(&built.map, out).map_err(data_err(format!("writing {}", out.display())))?;
            if let Some(dir) = history {
                fs::create_dir_all(dir)?;
                for (v, h) in built.map.voxels.iter().zip(&built.histories) {
                    let mut w = create(&dir.join(format!("{:06}.txt", v.track_id)))?;
                    write_loss_history(h, &mut w)?;
                    w.flush()?;
                }
            }
            let s = &built.stats;
            println!(
                "tracks {} triangulated {} trained {} failed {}; wrote {} bytes to {}",
                s.tracks,
                s.triangulated,
                s.trained,
                s.training_failures,
                bytes,
                out.display()
            );
        }
        Command::Localize { data, map, out } => {
            let ds = dataset(&data.data)?;
            let m = load_map(map).map_err(data_err(format!("reading {}", map.display())))?;
            let mut poses = Vec::new();
            let mut failed = 0;
            for (i, (q, prior)) in ds.queries.iter().zip(&ds.priors).enumerate() {
                let lc = voxreloc::relocalizer::LocalizeConfig {
                    seed: mix(cfg.localize.seed, i as u64),
                    ..cfg.localize
                };
                match iterative_localize(&m, &q.keypoints, &q.map, prior, &lc) {
                    Ok(est) => {
                        let inl: Vec<String> = est.per_iteration.iter().map(|s| s.inliers.to_string()).collect();
                        println!("query {i}: inliers per iteration {}", inl.join(" "));
                        poses.push(est.pose);
                    }
                    Err(e) => {
                        println!("query {i}: {e}; keeping prior");
                        failed += 1;
                        poses.push(*prior);
                    }
                }
            }
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_poses(out, &poses)?;
            if failed > cfg.eval.failure_budget {
                return Err(Failure::Localization(format!(
                    "{failed} queries failed, budget {}",
                    cfg.eval.failure_budget
                )));
            }
        }
        Command::Eval { data, map, out, sweep } => {
            let ds = dataset(&data.data)?;
            let m = load_map(map).map_err(data_err(format!("reading {}", map.display())))?;
            let report = run_eval(&m, &ds.queries, &ds.priors, &cfg.localize, cfg.scene.extent, cfg.pipeline.workers)?;
            fs::create_dir_all(out)?;
            let mut w = create(&out.join("report.txt"))?;
            write_report(&report, &mut w)?;
            w.flush()?;
            let mut w = create(&out.join("inliers.txt"))?;
            write_inlier_trend(&report, &mut w)?;
            w.flush()?;
            if *sweep {
                let g = gen_scene(&cfg.scene)?;
                let e = &cfg.eval;
                let steps = (e.sweep_degrees / e.sweep_step).floor() as i64;
                let angles: Vec<f64> = (-steps..=steps).map(|k| k as f64 * e.sweep_step).collect();
                let rows = thread_pool(cfg.pipeline.workers)?
                    .install(|| view_sweep(&g, &m, &angles, cfg.localize.samples_per_ray));
                let mut w = create(&out.join("sweep.txt"))?;
                write_sweep(&rows, &mut w)?;
                w.flush()?;
            }
            write_report(&report, std::io::stdout().lock())?;
            if report.failures > cfg.eval.failure_budget {
                return Err(Failure::Localization(format!(
                    "{} queries failed, budget {}",
                    report.failures, cfg.eval.failure_budget
                )));
            }
        }
        Command::Inspect { map } => {
            let m = load_map(map).map_err(data_err(format!("reading {}", map.display())))?;
            let on_disk = fs::metadata(map)?.len();
            let nodes = m.resolution.pow(3);
            println!("voxels {}", m.voxels.len());
            println!("channels {}", m.channels);
            println!("resolution {}", m.resolution);
            println!("patch_size {}", m.patch_size);
            println!("extractor {}", m.extractor);
            let k = &m.intrinsics;
            println!("intrinsics {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
            if !m.voxels.is_empty() {
                let n = m.voxels.len() as f64;
                let mean_side = m.voxels.iter().map(|v| v.side).sum::<f64>() / n;
                let mean_density = m
                    .voxels
                    .iter()
                    .map(|v| v.density_nodes.iter().map(|&r| activate(r, v.side)).sum::<f64>() / nodes as f64)
                    .sum::<f64>()
                    / n;
                println!("mean_side_m {mean_side}");
                println!("mean_density_per_m {mean_density}");
            }
            println!("bytes_on_disk {on_disk}");
            println!(
                "bytes_expected {} (header {} + {} x {})",
                encoded_size(&m),
                header_size(&m.extractor),
                m.voxels.len(),
                voxel_record_size(nodes, m.channels)
            );
            println!("megabytes {:.3}", on_disk as f64 / 1e6);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Data(e)) => {
            eprintln!("data error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Localization(msg)) => {
            eprintln!("localization failed: {msg}");
            ExitCode::from(EXIT_LOCALIZATION)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn error_classes() {
        assert!(matches!(Failure::from(Error::Config("x".into())), Failure::Config(_)));
        assert!(matches!(Failure::from(Error::BadMagic), Failure::Data(_)));
    }
}
