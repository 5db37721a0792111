//! Command-line surface.
//!
//! Exit codes: 0 success, 1 contract/format/usage errors, 2 internal invariant
//! violations (including a failed gradient check and panics). Progress and
//! results go to stdout as `key=value` lines; diagnostics go to stderr as one line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, REFERENCE_DIMS};
use crate::error::{contract_err, Error, Result};
use crate::gradcheck::{self, Suite, GRAD_TOL};
use crate::io::{self, RunConfig};
use crate::losses::TaskKind;
use crate::metrics::metric_report;
use crate::model::{checkpoint, Model, ScanMode};
use crate::scan::{scan_order, ScanKind, ScanPath};
use crate::tensor::Tensor;
use crate::train::{self, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONTRACT: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mambavf", version, about = "Video fusion with spatio-temporal state-space scans")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse two aligned frame directories with a trained checkpoint.
    Fuse(FuseArgs),
    /// Train on synthetic clips and report held-out scores.
    TrainToy(TrainArgs),
    /// Score a fused video against its two sources.
    Metrics(MetricsArgs),
    /// Parameter, FLOPs, latency and scaling reports.
    Bench(BenchArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Print the token order of a scan path.
    ScanDump(ScanDumpArgs),
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// First source: frame directory or `.vtf` file `[T, C, H, W]`.
    #[arg(long)]
    pub src1: PathBuf,
    #[arg(long)]
    pub src2: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output frame directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key=value` run config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub scan_mode: Option<ScanMode>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub eval_clips: usize,
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// Also write the evaluation as `key=value` lines here.
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long)]
    pub src1: PathBuf,
    #[arg(long)]
    pub src2: PathBuf,
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchMode {
    Params,
    Flops,
    Latency,
    Scaling,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub mode: BenchMode,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Machine-readable output, one `key=value` block per row.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long, default_value_t = bench::MIN_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Latency input and FLOPs extent; FLOPs default to the reference resolution.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![4096usize, 8192, 16384])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// primitives, ssm, vss, losses or all
    #[arg(long)]
    pub module: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ScanDumpArgs {
    /// Scan path name, e.g. `temporal-row-fwd`.
    #[arg(long, alias = "kind")]
    pub path: ScanKind,
    /// `T,H,W`
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
}

fn line(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

/// Frame directory or `.vtf` file to `[T, C, H, W]`.
pub fn load_video(path: &Path) -> Result<Tensor<f32>> {
    let v: Tensor<f32> = if path.is_dir() { io::read_frame_dir(path)? } else { io::read_vtf(path)? };
    if v.ndim() != 4 {
        return Err(contract_err!("{}: expected a [T, C, H, W] video, got {:?}", path.display(), v.shape()));
    }
    Ok(v)
}

/// `[T, C, H, W]` to luma `[T, H, W]` (identity for one channel).
fn luma(v: &Tensor<f32>) -> Result<Tensor<f64>> {
    let s = v.shape();
    let (t, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = v.data();
    let weights: &[f64] = match c {
        1 => &[1.0],
        3 => &[0.299, 0.587, 0.114],
        _ => return Err(contract_err!("metrics need 1 or 3 channels, got {}", c)),
    };
    let out = (0..t * hw)
        .map(|i| {
            let (ti, p) = (i / hw, i % hw);
            weights.iter().enumerate().map(|(ch, w)| w * d[(ti * c + ch) * hw + p] as f64).sum()
        })
        .collect();
    Tensor::new(&[t, s[2], s[3]], out)
}

fn write_record(path: &Option<PathBuf>, text: &str) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, text)?;
    }
    Ok(())
}

fn cmd_fuse(a: &FuseArgs) -> Result<()> {
    let model: Model<f32> = checkpoint::load(&a.model)?;
    let (v1, v2) = (load_video(&a.src1)?, load_video(&a.src2)?);
    if v1.shape() != v2.shape() {
        return Err(contract_err!("sources differ in shape: {:?} vs {:?}", v1.shape(), v2.shape()));
    }
    if v1.shape()[1] != model.cfg.in_channels {
        return Err(contract_err!("model expects {} input channels, sources have {}", model.cfg.in_channels, v1.shape()[1]));
    }
    let fused = model.fuse_clip(&v1, &v2)?;
    if !fused.all_finite() {
        return Err(Error::Internal("fused output is not finite".into()));
    }
    let paths = io::write_frame_dir(&a.out, &fused)?;
    println!("{}", line(&[("frames", paths.len().to_string()), ("out", a.out.display().to_string())]));
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = a.task {
        rc.task = t;
    }
    if let Some(s) = a.steps {
        rc.steps = s;
    }
    if let Some(s) = a.seed {
        rc.seed = s;
    }
    if let Some(lr) = a.lr {
        rc.lr = lr;
    }
    if let Some(m) = a.scan_mode {
        rc.model.scan_mode = m;
    }
    if let Some(o) = &a.out {
        rc.checkpoint = Some(o.clone());
    }
    for l in rc.to_text().lines() {
        println!("config.{l}");
    }
    let opts = TrainOptions { lr: rc.lr, weights: Some(rc.weights()), ..TrainOptions::default() };
    let every = a.log_every.max(1);
    let out = train::train_toy_with::<f32>(rc.model.clone(), rc.task, rc.steps, rc.seed, &opts, |r| {
        if r.step % every == 0 || r.step + 1 == rc.steps {
            println!(
                "{}",
                line(&[
                    ("step", r.step.to_string()),
                    ("lr", format!("{:.3e}", r.lr)),
                    ("loss", format!("{:.6}", r.loss.total)),
                    ("spatial", format!("{:.6}", r.loss.spatial)),
                    ("grad", format!("{:.6}", r.loss.grad)),
                    ("temp", format!("{:.6}", r.loss.temp)),
                    ("grad_max", format!("{:.3e}", r.grad_max)),
                ])
            );
        }
    })?;
    if let Some(p) = &rc.checkpoint {
        checkpoint::save(p, &out.model)?;
        println!("checkpoint={}", p.display());
    }
    if a.eval_clips > 0 && matches!(rc.task, TaskKind::Mff | TaskKind::Mef) {
        let r = train::evaluate(&out.model, rc.task, a.eval_clips, rc.seed)?;
        let text = format!(
            "eval_clips={}\nfused_gt_ssim={:.6}\ns1_gt_ssim={:.6}\ns2_gt_ssim={:.6}\ntemporal={:.6}\nflicker={:.6}\nmi={:.6}\nqabf={:.6}\n",
            r.n_clips, r.fused_gt_ssim, r.s1_gt_ssim, r.s2_gt_ssim, r.temporal, r.flicker, r.metrics.mi, r.metrics.qabf
        );
        print!("{text}");
        write_record(&a.record, &text)?;
    }
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let f = luma(&load_video(&a.fused)?)?;
    let s1 = luma(&load_video(&a.src1)?)?;
    let s2 = luma(&load_video(&a.src2)?)?;
    let text = metric_report(&f, &s1, &s2)?.to_record();
    print!("{text}");
    write_record(&a.record, &text)
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = rc.model.clone();
    let text = match a.mode {
        BenchMode::Params => {
            let m = Model::<f32>::new(cfg, rc.seed)?;
            format!("params={}\n", bench::count_params(&m))
        }
        BenchMode::Flops => {
            let (t, h, w) = (
                a.frames.unwrap_or(REFERENCE_DIMS.0),
                a.height.unwrap_or(REFERENCE_DIMS.1),
                a.width.unwrap_or(REFERENCE_DIMS.2),
            );
            let e = bench::estimate_flops(&cfg, t, h, w)?;
            format!(
                "frames={}\nH={}\nW={}\nwindow={}\nc_scan={}\nconv_flops={}\nprojection_flops={}\nscan_flops={}\nper_frame_flops={}\ntotal_flops={}\ntotal_gflops={:.3}\n",
                t,
                h,
                w,
                cfg.window,
                bench::C_SCAN,
                e.conv,
                e.projection,
                e.scan,
                e.per_frame,
                e.total,
                e.total as f64 / 1e9
            )
        }
        BenchMode::Latency => {
            let m = Model::<f32>::new(cfg.clone(), rc.seed)?;
            let (t, h, w) = (a.frames.unwrap_or(cfg.window), a.height.unwrap_or(64), a.width.unwrap_or(64));
            let shape = [t, cfg.in_channels, h, w];
            let s1 = Tensor::from_fn(&shape, |i| ((i * 37 % 101) as f32) / 100.0);
            let s2 = Tensor::from_fn(&shape, |i| ((i * 53 % 97) as f32) / 96.0);
            bench::measure_latency(&m, &s1, &s2, a.reps, a.warmup)?.to_record()
        }
        BenchMode::Scaling => {
            let r = bench::scaling_report::<f32>(&a.lengths, a.dim, cfg.scan_mode, a.reps.max(1))?;
            print!("{}", r.to_table());
            let fmt = |v: Vec<f64>| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
            println!(
                "{}",
                line(&[
                    ("ssm_time_ratios", fmt(r.ssm_time_ratios())),
                    ("attn_time_ratios", fmt(r.attn_time_ratios())),
                    ("ssm_flop_ratios", fmt(r.ssm_flop_ratios())),
                    ("attn_score_flop_ratios", fmt(r.attn_score_flop_ratios())),
                ])
            );
            write_record(&a.record, &r.to_record())?;
            return Ok(());
        }
    };
    print!("{text}");
    write_record(&a.record, &text)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let results = gradcheck::run(a.module, a.seed)?;
    let mut worst = 0.0f64;
    for r in &results {
        println!(
            "{}",
            line(&[("check", r.name.clone()), ("max_rel_err", format!("{:.3e}", r.max_rel_err)), ("coords", r.coords.to_string())])
        );
        worst = worst.max(r.max_rel_err);
    }
    println!("{}", line(&[("module", a.module.to_string()), ("max_rel_err", format!("{worst:.3e}"))]));
    if worst < GRAD_TOL {
        Ok(())
    } else {
        Err(Error::Internal(format!("max relative gradient error {worst:.3e} >= {GRAD_TOL:e}")))
    }
}

fn cmd_scan_dump(a: &ScanDumpArgs) -> Result<()> {
    let [t, h, w] = a.dims[..] else {
        return Err(contract_err!("--dims expects T,H,W, got {:?}", a.dims));
    };
    let path = ScanPath::new(a.path, t, h, w);
    let o = scan_order(&path)?;
    let mut out = String::new();
    for &i in &o.perm {
        out += &format!("({},{},{})\n", i / (h * w), (i / w) % h, i % w);
    }
    print!("{out}");
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fuse(a) => cmd_fuse(a),
        Command::TrainToy(a) => cmd_train(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ScanDump(a) => cmd_scan_dump(a),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Internal(_) => EXIT_INTERNAL,
        _ => EXIT_CONTRACT,
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONTRACT,
            };
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
        Err(_) => {
            eprintln!("error: internal invariant violated (panic)");
            EXIT_INTERNAL
        }
    }
}
