use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use iid_core::ccr::{log_ccr_map, DEFAULT_EPSILON};
use iid_core::edges::{canny, derive_gt_edges_with, CannyParams, EdgeSubtraction};
use iid_core::gradcheck::{network_directional_check, primitive_suite};
use iid_core::image::Image;
use iid_core::io::{self, MANIFEST_FILE};
use iid_core::network::NetworkConfig;
use iid_core::synth::SceneSpec;
use iid_core::trainer::{decompose, Checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "iid", version, about = "Synthetic intrinsic image decomposition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Write the log cross color ratio planes of an image.
    Ccr(CcrArgs),
    /// Canny edges of an image, or ground-truth edges of a dataset.
    Edges(EdgesArgs),
    /// Train from a TOML config.
    Train(TrainArgs),
    /// Decompose an image or every image of a dataset.
    Decompose(DecomposeArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    stride: u64,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    patches: usize,
    #[arg(long, default_value_t = 1.0)]
    shading_freq: f64,
    #[arg(long, default_value_t = 1)]
    shadows: usize,
    #[arg(long, default_value_t = 0.7)]
    shadow_strength: f64,
    #[arg(long, default_value_t = 2.0)]
    penumbra: f64,
}

#[derive(Args)]
struct CcrArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subtraction {
    ShadingMinusReflectance,
    ImageMinusReflectance,
}

#[derive(Args)]
struct EdgesArgs {
    /// An image file, or a dataset directory for ground-truth edges.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = CannyParams::default().sigma)]
    sigma: f64,
    #[arg(long, default_value_t = CannyParams::default().low)]
    low: f64,
    #[arg(long, default_value_t = CannyParams::default().high)]
    high: f64,
    #[arg(long, value_enum, default_value_t = Subtraction::ShadingMinusReflectance)]
    subtraction: Subtraction,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path; overrides `checkpoint_path` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss trace JSON; defaults to the checkpoint path with a `.trace.json` extension.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Continue from this checkpoint up to the configured step count.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a dataset directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also score WHDR on this many sampled judgments per image.
    #[arg(long)]
    whdr: Option<usize>,
    #[arg(long, default_value_t = 0)]
    whdr_seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of network seeds, starting at 0.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 11)]
    primitive_seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Ccr(a) => ccr(a),
        Command::Edges(a) => edges(a),
        Command::Train(a) => train(a),
        Command::Decompose(a) => decompose_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn gen(a: GenArgs) -> Result<ExitCode> {
    let spec = SceneSpec {
        seed: a.seed,
        size: a.size,
        n_patches: a.patches,
        shading_freq: a.shading_freq,
        n_shadows: a.shadows,
        shadow_strength: a.shadow_strength,
        penumbra_px: a.penumbra,
    };
    let manifest = io::write_dataset(&a.out, &spec, a.count, a.stride)?;
    println!("wrote {} scenes to {}", manifest.entries.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// `scene_0003_image.png` → `scene_0003`.
fn stem_of(path: &Path) -> Result<String> {
    let stem = path.file_stem().and_then(|s| s.to_str()).with_context(|| format!("bad file name {}", path.display()))?;
    Ok(stem.strip_suffix("_image").unwrap_or(stem).to_string())
}

fn read(path: &Path) -> Result<Image> {
    io::read_png(path).with_context(|| format!("reading {}", path.display()))
}

fn is_dataset(path: &Path) -> bool {
    path.join(MANIFEST_FILE).is_file()
}

fn ccr(a: CcrArgs) -> Result<ExitCode> {
    let img = read(&a.input)?;
    let map = log_ccr_map(&img, a.epsilon)?;
    let stem = stem_of(&a.input)?;
    std::fs::create_dir_all(&a.out)?;
    let (h, w) = (map.height(), map.width());
    let names = ["rg_right", "rb_right", "gb_right", "rg_down", "rb_down", "gb_down"];
    for (ch, name) in names.iter().enumerate() {
        let shown: Vec<f64> = map.plane(ch).iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        io::write_png16(&a.out.join(format!("{stem}_ccr_{name}.png")), &Image::new(h, w, 1, shown)?)?;
    }
    let raw = serde_json::json!({
        "height": h,
        "width": w,
        "epsilon": a.epsilon,
        "channels": names,
        "planes": map.to_planar(),
    });
    std::fs::write(a.out.join(format!("{stem}_ccr.json")), serde_json::to_string(&raw)? + "\n")?;
    Ok(ExitCode::SUCCESS)
}

fn edges(a: EdgesArgs) -> Result<ExitCode> {
    let params = CannyParams { sigma: a.sigma, low: a.low, high: a.high };
    std::fs::create_dir_all(&a.out)?;
    if is_dataset(&a.input) {
        let rule = match a.subtraction {
            Subtraction::ShadingMinusReflectance => EdgeSubtraction::ShadingMinusReflectance,
            Subtraction::ImageMinusReflectance => EdgeSubtraction::ImageMinusReflectance,
        };
        let (manifest, triples) = io::load_dataset(&a.input)?;
        for (entry, t) in manifest.entries.iter().zip(&triples) {
            let (r, s) = derive_gt_edges_with(t, params, rule)?;
            io::write_png16(&a.out.join(format!("{}_reflectance_edges.png", entry.stem())), &r)?;
            io::write_png16(&a.out.join(format!("{}_shading_edges.png", entry.stem())), &s)?;
        }
    } else {
        let img = read(&a.input)?;
        let e = canny(&img, params.sigma, params.low, params.high)?;
        io::write_png16(&a.out.join(format!("{}_edges.png", stem_of(&a.input)?)), &e)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg = TrainConfig::from_toml(&text)?;
    if a.out.is_some() {
        cfg.checkpoint_path = a.out;
    }
    let Some(ckpt_path) = cfg.checkpoint_path.clone() else {
        bail!("no checkpoint destination: pass --out or set checkpoint_path");
    };
    let trace_path = a.trace.unwrap_or_else(|| ckpt_path.with_extension("trace.json"));
    let mut trainer = match a.resume {
        Some(path) => Trainer::from_checkpoint(cfg, Checkpoint::load(&path)?)?,
        None => Trainer::new(cfg)?,
    };
    let trace = trainer.run(|step, loss| {
        if step % 10 == 0 {
            eprintln!("step {step}: loss {:.6}", loss.total);
        }
    })?;
    trainer.checkpoint.save(&ckpt_path)?;
    std::fs::write(&trace_path, serde_json::to_string_pretty(&trace)? + "\n")?;
    println!("checkpoint {} after step {}", ckpt_path.display(), trainer.checkpoint.step);
    Ok(ExitCode::SUCCESS)
}

fn decompose_cmd(a: DecomposeArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let cfg: &NetworkConfig = &ckpt.network;
    let inputs: Vec<(String, Image)> = if is_dataset(&a.input) {
        let manifest = io::read_manifest(&a.input)?;
        manifest
            .entries
            .iter()
            .map(|e| Ok((e.stem().to_string(), read(&a.input.join(&e.image))?)))
            .collect::<Result<_>>()?
    } else {
        vec![(stem_of(&a.input)?, read(&a.input)?)]
    };
    std::fs::create_dir_all(&a.out)?;
    for chunk in inputs.chunks(16) {
        let images: Vec<Image> = chunk.iter().map(|(_, im)| im.clone()).collect();
        for ((stem, _), d) in chunk.iter().zip(decompose(&ckpt.params, cfg, &images)?) {
            io::write_decomposition(&a.out, stem, &d)?;
        }
    }
    println!("decomposed {} images into {}", inputs.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let report = io::evaluate_dirs(&a.pred, &a.gt, a.whdr.map(|n| (n, a.whdr_seed)))?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match a.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut ok = true;
    for c in primitive_suite(a.primitive_seed)? {
        println!("{:<6} {:<28} {:.3e} < {:.0e}", verdict(c.passed()), c.name, c.rel_error, c.tolerance);
        ok &= c.passed();
    }
    let cfg = NetworkConfig::default();
    for seed in 0..a.seeds {
        let d = network_directional_check(&cfg, seed)?;
        let c = &d.result;
        println!(
            "{:<6} {:<28} {:.3e} < {:.0e}  (analytic {:.6e}, redrawn {})",
            verdict(c.passed()),
            c.name,
            c.rel_error,
            c.tolerance,
            d.analytic,
            d.rejected_directions
        );
        ok &= c.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "ok"
    } else {
        "FAILED"
    }
}
