mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lgefuse::fusion::{
    build_pseudo_labels, consistency_refine, ensemble_fuse, largest_component, majority_vote,
    read_probability_manifest, Atlas, PseudoLabelOptions, SamePatient,
};
use lgefuse::metrics::evaluate;
use lgefuse::phantom::{deform_phantom, generate_phantom, random_smooth_deformation, Modality, PhantomSpec};
use lgefuse::registration::{default_config, register_affine, register_ffd, RegistrationConfig, RegistrationKind};
use lgefuse::transform::container::TransformBundle;
use lgefuse::transform::warp_volume;
use lgefuse::volume::nifti::{read_labels, read_volume, write_labels, write_volume, LabelRemap};
use lgefuse::{Error, LabelVolume, Result};
use serde_json::json;

use manifest::{RunManifest, TraceRecord};

#[derive(Parser, Debug)]
#[command(name = "lgefuse", version, about = "Multi-atlas pseudo-labels for cardiac MR")]
struct Cli {
    /// Worker threads (default: available parallelism). 1 gives bitwise
    /// reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Raw-to-class mapping for label files, e.g. `500:1,200:2,600:3`
    /// (default: values 0-3 are class ids).
    #[arg(long, global = true, value_name = "RAW:CLASS,...")]
    label_map: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Affine then symmetric B-spline registration of --float onto --ref.
    Register(RegisterArgs),
    /// Label fusion.
    #[command(subcommand)]
    Fuse(FuseCommand),
    /// Overlap and surface-distance metrics of --pred against --gt.
    Evaluate(EvaluateArgs),
    /// Pseudo labels for --target from LGE atlases and optional same-patient sequences.
    Pipeline(PipelineArgs),
    /// Synthetic cardiac phantom with ground-truth labels.
    Phantom(PhantomArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    Type1,
    Type2,
}

impl From<Preset> for RegistrationKind {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Type1 => RegistrationKind::Type1,
            Preset::Type2 => RegistrationKind::Type2,
        }
    }
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "float")]
    floating: PathBuf,
    #[arg(long)]
    out_transform: PathBuf,
    #[arg(long, value_enum, default_value = "type1")]
    preset: Preset,
    /// Bending energy weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Inverse-consistency weight.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    levels: Option<usize>,
    /// Iteration cap per level.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Final control point spacing in voxels.
    #[arg(long)]
    final_spacing: Option<f64>,
    #[arg(long)]
    affine_only: bool,
    /// Also write the floating image resampled onto the reference grid.
    #[arg(long)]
    out_warped: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum FuseCommand {
    /// Per-voxel majority vote.
    Vote {
        #[arg(long, num_args = 1.., required = true)]
        labels: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep voxels where the bSSFP and T2 propagations agree, --type1 elsewhere.
    Consistency {
        #[arg(long)]
        type1: PathBuf,
        #[arg(long)]
        bssfp: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Median of model probabilities, then argmax.
    Ensemble {
        /// One line per model with comma-separated per-class NIfTI paths.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        keep_largest: bool,
    },
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    target: PathBuf,
    /// LGE atlas as IMAGE:LABELS; repeat for each atlas.
    #[arg(long = "atlas", value_name = "IMG:LBL", required = true)]
    atlases: Vec<String>,
    #[arg(long, value_name = "IMG:LBL", requires = "t2")]
    bssfp: Option<String>,
    #[arg(long, value_name = "IMG:LBL", requires = "bssfp")]
    t2: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Override the level count of both presets.
    #[arg(long)]
    levels: Option<usize>,
    /// Override the per-level iteration cap of both presets.
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModalityArg {
    Lge,
    T2,
    Bssfp,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Lge => Modality::Lge,
            ModalityArg::T2 => Modality::T2,
            ModalityArg::Bssfp => Modality::Bssfp,
        }
    }
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Cubic volume size in voxels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, value_enum, default_value = "lge")]
    modality: ModalityArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Apply a random smooth deformation with this maximum displacement (mm).
    #[arg(long)]
    deform_mm: Option<f64>,
    /// Control point spacing of the deformation in voxels.
    #[arg(long, default_value_t = 16.0)]
    deform_spacing: f64,
    #[arg(long)]
    out_image: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) => 2,
        Error::NumericalFailure { .. } => 4,
        Error::Atlas { source, .. } => exit_code(source),
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(3);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let remap = match &cli.label_map {
        Some(spec) => LabelRemap::parse(spec)?,
        None => LabelRemap::default(),
    };
    match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Fuse(f) => cmd_fuse(f, &remap),
        Command::Evaluate(a) => cmd_evaluate(a, &remap),
        Command::Pipeline(a) => cmd_pipeline(a, &remap),
        Command::Phantom(a) => cmd_phantom(a),
    }
}

fn resolve_config(a: &RegisterArgs) -> Result<RegistrationConfig> {
    let mut cfg = default_config(a.preset.into());
    if let Some(v) = a.alpha {
        cfg.weights.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.weights.beta = v;
    }
    if let Some(v) = a.levels {
        cfg.levels = v;
    }
    if let Some(v) = a.max_iter {
        cfg.max_iter_per_level = v;
    }
    if let Some(v) = a.final_spacing {
        cfg.final_grid_spacing = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_register(a: &RegisterArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    let mut m = RunManifest::new("register");
    m.config = json!({ "preset": format!("{:?}", a.preset).to_lowercase(), "registration": cfg, "affine_only": a.affine_only });
    m.input("ref", &a.reference);
    m.input("float", &a.floating);
    let (reference, floating) = m.timed("read", || Ok::<_, Error>((read_volume(&a.reference)?, read_volume(&a.floating)?)))?;
    let affine = m.timed("affine", || register_affine(&reference, &floating))?;
    let bundle = if a.affine_only {
        TransformBundle {
            affine,
            fwd: None,
            bwd: None,
        }
    } else {
        let r = m.timed("ffd", || register_ffd(&reference, &floating, &affine, &cfg))?;
        m.objective_traces.push(TraceRecord {
            name: "registration".into(),
            levels: r.objective_trace.clone(),
            converged: r.converged.clone(),
        });
        m.result("levels", &r.levels);
        m.result("max_displacement_fwd_mm", r.fwd.max_displacement());
        m.result("max_displacement_bwd_mm", r.bwd.max_displacement());
        TransformBundle {
            affine: r.affine,
            fwd: Some(r.fwd),
            bwd: Some(r.bwd),
        }
    };
    m.result("affine", bundle.affine.matrix().transpose().as_slice().chunks(4).map(|r| r.to_vec()).collect::<Vec<_>>());
    bundle.save(&a.out_transform)?;
    m.output("transform", &a.out_transform);
    if let Some(path) = &a.out_warped {
        let warped = warp_volume(&floating, reference.geometry(), &bundle.affine, bundle.fwd.as_ref())?;
        write_volume(&warped, path)?;
        m.output("warped", path);
    }
    m.write(&a.out_transform)?;
    Ok(())
}

fn read_all_labels(paths: &[PathBuf], remap: &LabelRemap) -> Result<Vec<LabelVolume>> {
    paths.iter().map(|p| read_labels(p, remap)).collect()
}

fn cmd_fuse(f: &FuseCommand, remap: &LabelRemap) -> Result<()> {
    match f {
        FuseCommand::Vote { labels, out } => {
            let mut m = RunManifest::new("fuse vote");
            m.input("labels", labels);
            let inputs = m.timed("read", || read_all_labels(labels, remap))?;
            let fused = m.timed("vote", || majority_vote(&inputs))?;
            write_labels(&fused, out)?;
            m.output("labels", out);
            m.write(out)?;
        }
        FuseCommand::Consistency { type1, bssfp, t2, out } => {
            let mut m = RunManifest::new("fuse consistency");
            m.input("type1", type1);
            m.input("bssfp", bssfp);
            m.input("t2", t2);
            let inputs = m.timed("read", || read_all_labels(&[type1.clone(), bssfp.clone(), t2.clone()], remap))?;
            let fused = m.timed("consistency", || consistency_refine(&inputs[0], &inputs[1], &inputs[2]))?;
            write_labels(&fused, out)?;
            m.output("labels", out);
            m.write(out)?;
        }
        FuseCommand::Ensemble {
            manifest,
            out,
            keep_largest,
        } => {
            let mut m = RunManifest::new("fuse ensemble");
            m.config = json!({ "keep_largest": keep_largest });
            m.input("manifest", manifest);
            let probs = m.timed("read", || read_probability_manifest(manifest))?;
            m.result("models", probs.len());
            let mut fused = m.timed("ensemble", || ensemble_fuse(&probs))?;
            if *keep_largest {
                fused = m.timed("largest_component", || largest_component(&fused));
            }
            write_labels(&fused, out)?;
            m.output("labels", out);
            m.write(out)?;
        }
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, remap: &LabelRemap) -> Result<()> {
    let mut m = RunManifest::new("evaluate");
    m.input("pred", &a.pred);
    m.input("gt", &a.gt);
    let pred = read_labels(&a.pred, remap)?;
    let gt = read_labels(&a.gt, remap)?;
    let report = m.timed("metrics", || evaluate(&pred, &gt))?;
    std::fs::write(&a.out_csv, report.to_csv()).map_err(|e| Error::Io {
        path: a.out_csv.clone(),
        source: e,
    })?;
    print!("{}", report.to_table());
    m.output("csv", &a.out_csv);
    m.result("report", &report);
    m.write(&a.out_csv)?;
    Ok(())
}

fn parse_pair(spec: &str, remap: &LabelRemap) -> Result<Atlas> {
    let (img, lbl) = spec
        .split_once(':')
        .ok_or_else(|| Error::InvalidInput(format!("expected IMAGE:LABELS, got {spec:?}")))?;
    Atlas::new(read_volume(Path::new(img))?, read_labels(Path::new(lbl), remap)?)
}

fn cmd_pipeline(a: &PipelineArgs, remap: &LabelRemap) -> Result<()> {
    let mut options = PseudoLabelOptions::default();
    for cfg in [&mut options.type1, &mut options.type2] {
        if let Some(v) = a.levels {
            cfg.levels = v;
        }
        if let Some(v) = a.max_iter {
            cfg.max_iter_per_level = v;
        }
        cfg.validate()?;
    }
    let mut m = RunManifest::new("pipeline");
    m.config = serde_json::to_value(&options).unwrap_or_default();
    m.input("target", &a.target);
    m.input("atlases", &a.atlases);
    m.input("bssfp", &a.bssfp);
    m.input("t2", &a.t2);

    let (target, atlases, same) = m.timed("read", || -> Result<_> {
        let target = read_volume(&a.target)?;
        let atlases = a.atlases.iter().map(|s| parse_pair(s, remap)).collect::<Result<Vec<_>>>()?;
        let same = match (&a.bssfp, &a.t2) {
            (Some(b), Some(t)) => Some(SamePatient {
                bssfp: parse_pair(b, remap)?,
                t2: parse_pair(t, remap)?,
            }),
            _ => None,
        };
        Ok((target, atlases, same))
    })?;
    let result = m.timed("pseudo_labels", || build_pseudo_labels(&target, &atlases, same.as_ref(), &options))?;

    for (i, p) in result.atlases.iter().enumerate() {
        m.objective_traces.push(TraceRecord {
            name: format!("atlas {i}"),
            levels: p.registration.objective_trace.clone(),
            converged: p.registration.converged.clone(),
        });
    }
    if let Some((b, t)) = &result.same_patient {
        for (name, p) in [("bssfp", b), ("t2", t)] {
            m.objective_traces.push(TraceRecord {
                name: name.into(),
                levels: p.registration.objective_trace.clone(),
                converged: p.registration.converged.clone(),
            });
        }
    }
    write_labels(&result.labels, &a.out)?;
    m.output("labels", &a.out);
    m.write(&a.out)?;
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let spec = PhantomSpec::cardiac([a.size; 3], a.modality.into(), a.seed).with_noise(a.noise);
    let mut m = RunManifest::new("phantom");
    m.seed = Some(a.seed);
    m.config = json!({
        "size": a.size,
        "modality": format!("{:?}", a.modality).to_lowercase(),
        "noise": a.noise,
        "deform_mm": a.deform_mm,
        "deform_spacing": a.deform_spacing,
    });
    let (mut image, mut labels) = m.timed("generate", || generate_phantom(&spec))?;
    if let Some(mm) = a.deform_mm {
        let t = random_smooth_deformation(image.geometry(), mm, [a.deform_spacing; 3], a.seed)?;
        (image, labels) = m.timed("deform", || deform_phantom(&image, &labels, &t))?;
        m.result("max_displacement_mm", t.max_displacement());
    }
    write_volume(&image, &a.out_image)?;
    write_labels(&labels, &a.out_labels)?;
    m.output("image", &a.out_image);
    m.output("labels", &a.out_labels);
    m.write(&a.out_image)?;
    Ok(())
}
