use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bcn_fas::bilateral::{bilateral_base_direct, bilateral_decompose, BilateralParams};
use bcn_fas::checks;
use bcn_fas::metrics::evaluate_scores;
use bcn_fas::supervision::{material_prediction, score, PatchMode, MATERIAL_CLASSES};
use bcn_fas::train::{self, Control, RunConfig, RunDir};
use bcn_fas::{checkpoint, dataset, imageio, manifest, synth, Error};
use clap::{Parser, Subcommand};

/// Bilateral convolutional network for face anti-spoofing.
///
/// Log verbosity follows RUST_LOG (default `info`).
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config on a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a manifest and write an evaluation report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Development split used to choose the operating threshold.
        #[arg(long)]
        dev_manifest: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Score one image and save its predicted maps.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Directory for depth.png, reflection.png and patch.png.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Split an image into bilateral base and residual layers.
    Filter {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Spatial scale; defaults to min(H, W)/16.
        #[arg(long)]
        sigma_s: Option<f64>,
        /// Range scale; defaults to a tenth of the intensity range.
        #[arg(long)]
        sigma_r: Option<f64>,
        /// Use the exact windowed filter instead of the bilateral grid.
        #[arg(long)]
        exact: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Run a single check.
        #[arg(long)]
        op: Option<String>,
    },
    /// Generate a synthetic live/spoof dataset with a manifest.
    Synth {
        #[arg(long)]
        live: usize,
        #[arg(long)]
        spoof: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its process exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Checkpoint(c) => c.code() as u8,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn fail(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, manifest, out } => run_train(&config, &manifest, &out),
        Command::Eval {
            checkpoint,
            manifest,
            dev_manifest,
            report,
        } => run_eval(&checkpoint, &manifest, dev_manifest.as_deref(), &report),
        Command::Infer { checkpoint, image, out } => run_infer(&checkpoint, &image, &out),
        Command::Filter {
            image,
            out,
            sigma_s,
            sigma_r,
            exact,
        } => run_filter(&image, &out, sigma_s, sigma_r, exact),
        Command::Gradcheck { op } => run_gradcheck(op.as_deref()),
        Command::Synth { live, spoof, seed, out } => run_synth(live, spoof, seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run_train(config: &Path, manifest_path: &Path, out: &Path) -> CliResult {
    let cfg = RunConfig::load(config)?;
    let entries = manifest::read_manifest(manifest_path)?;
    log::info!("loading {} samples", entries.len());
    let samples = dataset::load_samples(&entries, &cfg.model)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let dir = RunDir { root: out.to_path_buf() };
    let t0 = Instant::now();
    let outcome = train::train(&samples, &cfg.model, &cfg.train, Some(&dir), |_, _| Control::Continue)?;
    let last = outcome.epochs.last().map_or(f64::NAN, |e| e.mean_loss.total);
    println!(
        "trained {} steps over {} epochs in {:.1}s, final epoch loss {last:.5}",
        outcome.steps.len(),
        outcome.epochs.len(),
        t0.elapsed().as_secs_f64()
    );
    println!("checkpoint: {}", dir.final_checkpoint().display());
    Ok(())
}

fn scored(ck: &checkpoint::Checkpoint, path: &Path) -> Result<Vec<bcn_fas::metrics::ScoredSample>, Failure> {
    let samples = dataset::load_samples(&manifest::read_manifest(path)?, &ck.model)?;
    Ok(train::score_samples(&ck.model, &ck.params, &samples)?)
}

fn run_eval(ck_path: &Path, manifest_path: &Path, dev: Option<&Path>, report_path: &Path) -> CliResult {
    let ck = checkpoint::load(ck_path)?;
    if ck.model.heads.patch_mode == PatchMode::Material {
        return Err(fail("eval reports liveness metrics; this checkpoint is in material mode"));
    }
    let test = scored(&ck, manifest_path)?;
    let dev = dev.map(|p| scored(&ck, p)).transpose()?;
    let report = evaluate_scores(&test, dev.as_deref(), None);
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(report_path, serde_json::to_string_pretty(&report)?)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "APCER {:.4}  BPCER {:.4}  ACER {:.4}  EER {}  AUC {}  HTER {}  (threshold {})",
        report.apcer,
        report.bpcer,
        report.acer,
        opt(report.eer),
        opt(report.auc),
        opt(report.hter),
        report.threshold_policy.threshold
    );
    Ok(())
}

fn run_infer(ck_path: &Path, image: &Path, out: &Path) -> CliResult {
    let ck = checkpoint::load(ck_path)?;
    let x = dataset::load_image(image, ck.model.bcn.input_size)?;
    let pred = ck.model.predict(&ck.params, &x)?;
    fs::create_dir_all(out)?;
    imageio::save_png(&out.join("depth.png"), &imageio::nchw_to_hwc(&pred.depth, 0)?)?;
    imageio::save_png(&out.join("reflection.png"), &imageio::nchw_to_hwc(&pred.reflection, 0)?)?;
    match pred.mode {
        PatchMode::Binary => {
            imageio::save_png(&out.join("patch.png"), &imageio::nchw_to_hwc(&pred.patch, 0)?)?;
            println!("score {:.6}", score(&pred)?[0]);
        }
        PatchMode::Material => {
            let class = material_prediction(&pred)?[0];
            let [_, c, h, w] = pred.patch.dims4()?;
            // probability of the predicted class per location
            let plane = h * w;
            let map = bcn_fas::Tensor::new(vec![h, w, 1], pred.patch.data()[class * plane..(class + 1) * plane].to_vec())?;
            debug_assert_eq!(c, MATERIAL_CLASSES.len());
            imageio::save_png(&out.join("patch.png"), &map)?;
            println!("material {}", MATERIAL_CLASSES[class]);
        }
    }
    Ok(())
}

fn run_filter(image: &Path, out: &Path, sigma_s: Option<f64>, sigma_r: Option<f64>, exact: bool) -> CliResult {
    let img = imageio::load_rgb(image)?;
    let d = BilateralParams::defaults_for(&img)?;
    let s = sigma_s.unwrap_or(d.sigma_s);
    let p = BilateralParams::new(s, sigma_r.unwrap_or(d.sigma_r), BilateralParams::window_for(s))?;
    let (base, residual) = if exact {
        let base = bilateral_base_direct(&img, &p)?;
        let data = img.data().iter().zip(base.data()).map(|(i, b)| i - b).collect();
        let residual = bcn_fas::Tensor::new(img.shape().to_vec(), data)?;
        (base, residual)
    } else {
        let d = bilateral_decompose(&img, &p)?;
        (d.base, d.residual)
    };
    fs::create_dir_all(out)?;
    imageio::save_png(&out.join("base.png"), &base)?;
    imageio::save_png(&out.join("residual.png"), &imageio::normalize_for_display(&residual))?;
    println!(
        "sigma_s {:.3}  sigma_r {:.4}  window {}  ({})",
        p.sigma_s,
        p.sigma_r,
        p.window,
        if exact { "exact" } else { "grid" }
    );
    Ok(())
}

fn run_gradcheck(op: Option<&str>) -> CliResult {
    let list = match op {
        Some(name) => vec![checks::find(name)
            .ok_or_else(|| fail(format!("unknown check `{name}`; available: {}", checks::names().join(", "))))?],
        None => checks::all(),
    };
    let mut failed = 0;
    for c in list {
        let t0 = Instant::now();
        let r = c.run()?;
        let ok = r.max_rel_error < checks::TOLERANCE;
        failed += usize::from(!ok);
        println!(
            "{:<10} {}  max rel error {:.3e} over {} coords ({:.2}s)",
            c.name,
            if ok { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.checked,
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        return Err(fail(format!("{failed} gradient check(s) above {:e}", checks::TOLERANCE)));
    }
    Ok(())
}

fn run_synth(live: usize, spoof: usize, seed: u64, out: &Path) -> CliResult {
    let manifest = synth::synth_dataset(live, spoof, seed, out)?;
    println!("wrote {} samples, manifest {}", live + spoof, manifest.display());
    Ok(())
}
