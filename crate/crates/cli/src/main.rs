use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avatar_cli::config::RunConfig;
use avatar_cli::ops;
use avatar_cli::scene;
use avatar_cli::train::{load_model, train};
use avatar_cli::CliError;

#[derive(Parser)]
#[command(name = "avatar", about = "Feed-forward animatable avatar pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by config-driven subcommands; every flag overrides the JSON
/// config when given.
#[derive(Args, Clone)]
struct ConfigFlags {
    /// JSON run config; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// model size: S, M or L
    #[arg(long)]
    model_size: Option<String>,
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    min_frames: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    sigma_bias: Option<f64>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    pose_amplitude: Option<f64>,
    /// training view indices, comma separated
    #[arg(long, value_delimiter = ',')]
    train_views: Option<Vec<usize>>,
    #[arg(long)]
    weight_dis: Option<f64>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { cfg.$f = v.clone(); } )* };
        }
        set!(
            model_size, n_points, image_size, patch, min_frames, max_frames, iterations,
            warmup, peak_lr, checkpoint_every, sigma_bias, views, pose_amplitude, train_views
        );
        if let Some(v) = self.weight_dis {
            cfg.weights.dis = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic subject dataset
    GenData {
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset
    Train {
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a canonical avatar from input images and write a PLY
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        binary: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// input PPM images, 1 to 16
        images: Vec<PathBuf>,
    },
    /// Render a reconstructed avatar under a pose sequence
    Animate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// scene directory providing input views and the camera
        #[arg(long)]
        data: PathBuf,
        /// input view indices, comma separated
        #[arg(long, value_delimiter = ',', default_value = "0")]
        input_views: Vec<usize>,
        /// camera view index
        #[arg(long, default_value_t = 0)]
        camera_view: usize,
        /// JSON file: array of flat pose vectors
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// PSNR/SSIM of renders against ground truth over a view set
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        input_views: Vec<usize>,
        /// eval view indices; empty = all views
        #[arg(long, value_delimiter = ',')]
        eval_views: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export a reconstruction as a 3D Gaussian splat PLY
    ExportPly {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        input_views: Vec<usize>,
        /// optional pose view index; omitted = canonical pose
        #[arg(long)]
        pose_view: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        binary: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData { cfg, seed, out } => {
            let cfg = cfg.resolve()?;
            let meta = scene::gen_data(&cfg, seed, &out)?;
            println!("wrote {} views to {}", meta.views, out.display());
        }
        Cmd::Train { cfg, seed, data, out } => {
            let cfg = cfg.resolve()?;
            let sc = scene::load_scene(&data)?;
            let report = train(&cfg, &sc, seed, &out)?;
            println!(
                "trained {} steps: loss {:.6} -> {:.6}; checkpoint {}",
                cfg.iterations,
                report.first_loss,
                report.final_loss,
                report.checkpoint.display()
            );
        }
        Cmd::Infer { checkpoint, out, binary, seed, images } => {
            let (model, store) = load_model(&checkpoint)?;
            let dt = ops::infer(&model, &store, &images, &out, binary, seed)?;
            println!("reconstructed {} primitives in {dt:.3} s -> {}", model.cfg.pit.n_points, out.display());
        }
        Cmd::Animate { checkpoint, data, input_views, camera_view, poses, out, seed } => {
            let (model, store) = load_model(&checkpoint)?;
            let sc = scene::load_scene(&data)?;
            if camera_view >= sc.views.len() {
                return Err(CliError::Usage(format!("camera view {camera_view} out of range")));
            }
            if let Some(&bad) = input_views.iter().find(|&&v| v >= sc.views.len()) {
                return Err(CliError::Usage(format!("input view {bad} out of range")));
            }
            let images: Vec<Vec<f64>> =
                input_views.iter().map(|&v| sc.views[v].rgb.clone()).collect();
            let rec = ops::reconstruct(&model, &store, &images, seed)?;
            let text = std::fs::read_to_string(&poses)
                .map_err(|e| CliError::Data(format!("{}: {e}", poses.display())))?;
            let seq: Vec<Vec<f64>> =
                serde_json::from_str(&text).map_err(|e| CliError::Data(e.to_string()))?;
            let n = ops::animate(&model, &store, &rec, &seq, &sc.views[camera_view].camera, &out)?;
            println!("wrote {n} frames to {}", out.display());
        }
        Cmd::Eval { checkpoint, data, input_views, eval_views, seed } => {
            let (model, store) = load_model(&checkpoint)?;
            let sc = scene::load_scene(&data)?;
            let eval_views = eval_views.unwrap_or_else(|| (0..sc.views.len()).collect());
            let res = ops::evaluate(&model, &store, &sc, &input_views, &eval_views, seed)?;
            for (v, p, s) in &res.per_view {
                println!("view {v}: psnr {p:.3} ssim {s:.4}");
            }
            println!("mean: psnr {:.3} ssim {:.4}", res.mean_psnr, res.mean_ssim);
        }
        Cmd::ExportPly { checkpoint, data, input_views, pose_view, out, binary, seed } => {
            let (model, store) = load_model(&checkpoint)?;
            let sc = scene::load_scene(&data)?;
            if let Some(&bad) = input_views.iter().find(|&&v| v >= sc.views.len()) {
                return Err(CliError::Usage(format!("input view {bad} out of range")));
            }
            let images: Vec<Vec<f64>> =
                input_views.iter().map(|&v| sc.views[v].rgb.clone()).collect();
            let rec = ops::reconstruct(&model, &store, &images, seed)?;
            match pose_view {
                None => ops::write_ply(&rec.canonical, &out, binary)?,
                Some(v) => {
                    if v >= sc.views.len() {
                        return Err(CliError::Usage(format!("pose view {v} out of range")));
                    }
                    let mut tape = avatar_core::tensor::Tape::new();
                    let mut lv = avatar_core::optim::LeafCache::new(&store);
                    let posed = model.forward_posed(
                        &mut tape,
                        &mut lv,
                        &rec.canonical,
                        &rec.def_mean,
                        &rec.tokens,
                        &sc.views[v].pose,
                    );
                    ops::write_ply(&posed, &out, binary)?;
                }
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 by default; the CLI contract reserves 1 for usage
            let _ = e.print();
            return ExitCode::from(if e.exit_code() == 0 { 0 } else { 1 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
