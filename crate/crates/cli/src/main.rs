use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use locstyle::checkpoint::Checkpoint;
use locstyle::config::RunConfig;
use locstyle::dataset::{ingest_dataset, load_camera_path, Dataset, DatasetFormat};
use locstyle::features::FeatureExtractor;
use locstyle::imageio::RgbImage;
use locstyle::pipeline::{
    load_style_image, render_path, resolve_matching, run_reconstruction, run_stylization, style_regions, Progress,
    RunDir, SceneRegions, StyleAsset, TrainingViews,
};
use locstyle::segmentation::{segment_views, train_scene_segmenter};

#[derive(Parser)]
#[command(name = "locstyle", version, about = "Locally stylized radiance fields")]
struct Cli {
    /// Run configuration (TOML). Defaults to `<out>/config.toml` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a dataset's cameras into `<out>/cameras.json`.
    Ingest(DataArgs),
    /// Train the scene segmenter on the training views and write their
    /// region maps; `<out>/cameras.json` then points at them.
    SegmentScene(DataArgs),
    /// Extract and filter the regions of one style image.
    SegmentStyle {
        #[arg(long)]
        style: u32,
    },
    /// Solve (or load) one style's matching against the reconstructed scene
    /// and print it.
    Match {
        #[arg(long)]
        style: u32,
        /// Dataset directory; defaults to the run directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruction with the segmentation head, then the colour-transformed
    /// phase.
    Reconstruct(DataArgs),
    /// Stylize from a reconstructed checkpoint.
    Stylize {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Style indices, comma separated; all configured styles when omitted.
        #[arg(long, value_delimiter = ',')]
        styles: Vec<u32>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render a camera path to numbered frames and region maps.
    Render {
        /// Defaults to the stylized checkpoint, else the reconstructed one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Camera path in the canonical camera JSON format.
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, default_value_t = 0)]
        style: u32,
        /// Output directory; defaults to `<out>/renders`.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Serve the matching editor API over the run directory.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

#[derive(clap::Args)]
struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// `camera-json` or `llff-poses`.
    #[arg(long, default_value = "camera-json")]
    format: DatasetFormat,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let fallback = cli.out.clone().unwrap_or_else(|| RunConfig::default().out).join("config.toml");
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if fallback.exists() => RunConfig::load(&fallback)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out = o.clone();
    }
    Ok(config)
}

fn log_progress(p: &Progress) {
    let every = (p.total / 20).max(1);
    if p.iteration % every == 0 || p.iteration == p.total {
        log::info!("{} {}/{} loss {:.5}", p.stage, p.iteration, p.total, p.record.total);
    }
}

fn run_dataset(data: Option<&Path>, dir: &RunDir) -> Result<Dataset> {
    let root = data.unwrap_or(&dir.root);
    ingest_dataset(root, DatasetFormat::CameraJson).with_context(|| format!("loading dataset {}", root.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    let dir = RunDir::new(&config.out);
    match &cli.command {
        Command::Ingest(a) => {
            let ds = ingest_dataset(&a.data, a.format)?;
            for w in &ds.warnings {
                log::warn!("{w}");
            }
            let p = ds.write_canonical(&dir.root)?;
            println!("{} views ({}×{}) → {}", ds.views.len(), ds.width, ds.height, p.display());
        }
        Command::SegmentScene(a) => {
            let mut ds = ingest_dataset(&a.data, a.format)?;
            let train = ds.train_indices();
            let images: Vec<RgbImage> = train.iter().map(|&i| ds.load_image(i)).collect::<locstyle::Result<_>>()?;
            let (seg, c) = train_scene_segmenter(&images, &config.segmentation.segmenter, config.seed)?;
            let maps = segment_views(&seg, &images)?;
            let out = dir.root.join("segmentation");
            std::fs::create_dir_all(&out)?;
            let out = std::fs::canonicalize(&out)?;
            for (&i, map) in train.iter().zip(&maps) {
                let p = out.join(format!("view_{i:03}.png"));
                map.save(&p)?;
                ds.views[i].regions = Some(p);
            }
            ds.write_canonical(&dir.root)?;
            println!("{c} scene regions over {} training views → {}", maps.len(), out.display());
        }
        Command::SegmentStyle { style } => {
            let entry = config.style(*style)?;
            let image = load_style_image(entry, &config)?;
            let regions = style_regions(entry, &image, &config)?;
            std::fs::create_dir_all(dir.style_dir(*style))?;
            image.save_png(&dir.style_image(*style))?;
            regions.save(&dir.style_regions(*style))?;
            println!("{} style regions, areas {:?}", regions.count, regions.areas());
        }
        Command::Match { style, data } => {
            let entry = config.style(*style)?;
            let ck = Checkpoint::load(&dir.reconstruction_checkpoint())?;
            let ds = run_dataset(data.as_deref(), &dir)?;
            let views = TrainingViews::load(&ds, false)?;
            let extractor = FeatureExtractor::from_config(&config.extractor)?;
            let scene = SceneRegions::render(&ck.model, &views.cameras, &config)?;
            let features = views.images.iter().map(|im| extractor.extract(im)).collect::<locstyle::Result<Vec<_>>>()?;
            let asset = StyleAsset::load(entry, &config, &extractor)?;
            asset.save(&dir)?;
            let m = resolve_matching(entry, &asset, &features, &scene, &config, Some(&dir))?;
            println!("{}", m.to_json());
        }
        Command::Reconstruct(a) => {
            let ds = ingest_dataset(&a.data, a.format)?;
            let ck = run_reconstruction(&ds, &config, &mut log_progress)?;
            println!(
                "reconstructed: {} iterations, geometry {} → {}",
                ck.header.iteration,
                ck.header.geometry_digest,
                dir.reconstruction_checkpoint().display()
            );
        }
        Command::Stylize {
            data,
            styles,
            checkpoint,
        } => {
            let path = checkpoint.clone().unwrap_or_else(|| dir.reconstruction_checkpoint());
            let ck = Checkpoint::load(&path)?;
            let ds = run_dataset(data.as_deref(), &dir)?;
            let ck = run_stylization(ck, &ds, &config, styles, &mut log_progress)?;
            println!("stylized: geometry {} → {}", ck.header.geometry_digest, dir.stylized_checkpoint().display());
        }
        Command::Render {
            checkpoint,
            cameras,
            style,
            frames,
        } => {
            let path = checkpoint.clone().unwrap_or_else(|| {
                let s = dir.stylized_checkpoint();
                if s.exists() {
                    s
                } else {
                    dir.reconstruction_checkpoint()
                }
            });
            let ck = Checkpoint::load(&path)?;
            let cams = load_camera_path(cameras)?;
            let out = frames.clone().unwrap_or_else(|| dir.renders());
            let written = render_path(
                &ck,
                &cams,
                *style,
                &out,
                config.stylization.samples_per_ray,
                config.chunk_size,
            )?;
            println!("{} frames → {}", written.len(), out.display());
        }
        Command::Serve { bind } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(locstyle_server::serve(&dir.root, *bind))?;
        }
    }
    Ok(())
}
