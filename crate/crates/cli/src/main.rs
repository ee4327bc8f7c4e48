use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use convbound::bounds::Variant;
use convbound::convnet::Architecture;
use convbound::covers::{cover_verify, l1_ball_cover};
use convbound::data::{
    augment_mnist, export_dataset, gen_signature_dataset, import_dataset, read_idx_images, read_idx_labels, LabeledDataset,
    Snapshot,
};
use convbound::experiment::{compare, downsample_check, header_block, CompareOptions, CompareReport, Header, MarginRule, Preset};
use convbound::measures::norm_concentration_check;
use convbound::train::{log_csv, train_network, TrainConfig};
use convbound::Error;

#[derive(Parser, Debug)]
#[command(name = "convbound", version, about = "Norm-based capacity measurements for convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the signature dataset, or augmented MNIST when --mnist-images is given.
    GenData(GenData),
    /// Train a preset network and write a snapshot with its initialization.
    Train(TrainArgs),
    /// Per-layer norm table of a snapshot on a dataset.
    Measure(MeasureArgs),
    /// Bound comparison table.
    Bounds(MeasureArgs),
    /// Norm, bound, histogram and margin tables in one directory.
    Compare(MeasureArgs),
    /// Build an L1-ball cover and test it against random points.
    CoverCheck(CoverArgs),
    /// Sample the L2/L1 norm-ratio concentration.
    ConcentrationCheck(ConcentrationArgs),
    /// Compare data-dependent terms before and after block downsampling.
    DownsampleCheck(DownsampleArgs),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples.
    #[arg(long, default_value_t = 350)]
    n: usize,
    /// Sequence length of the signature data.
    #[arg(long, default_value_t = 1000)]
    len: usize,
    /// Copies of each drawn signature; defaults to max(1, len/1000).
    #[arg(long)]
    iter: Option<usize>,
    /// Canvas scale of augmented MNIST.
    #[arg(long, default_value_t = 2)]
    scale_s: usize,
    #[arg(long, requires = "mnist_labels")]
    mnist_images: Option<PathBuf>,
    #[arg(long, requires = "mnist_images")]
    mnist_labels: Option<PathBuf>,
    /// Dataset manifest to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Architecture preset; inferred from the dataset when omitted.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    min_epochs: usize,
    #[arg(long, default_value_t = 0.99)]
    target: f64,
    /// Snapshot manifest to write.
    #[arg(long)]
    snapshot: PathBuf,
    /// Per-epoch log CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MeasureArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    /// Restrict the multilayer variants; baselines are always reported.
    #[arg(long)]
    variant: Vec<String>,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    /// Fixed margin.
    #[arg(long, conflicts_with = "auto_margin")]
    gamma: Option<f64>,
    /// Pick the largest margin reaching this training accuracy.
    #[arg(long, default_value_t = 0.96)]
    auto_margin: f64,
    /// Largest number of row selections enumerated for the exact σ′.
    #[arg(long, default_value_t = 4096)]
    exact_sigma_budget: usize,
    /// Skip the Jacobian pass; the lipschitz and augmented variants then fail.
    #[arg(long)]
    no_lipschitz: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file, or a directory for `compare`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CoverArgs {
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    eps: f64,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConcentrationArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DownsampleArgs {
    /// Number of random instances.
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// A library error tagged with the pipeline stage it came from.
#[derive(Debug)]
struct Failure {
    stage: &'static str,
    error: Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}`: {}", self.stage, self.error)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self.error {
            Error::NonFinite { .. }
            | Error::Degenerate(_)
            | Error::ZeroDivisor(_)
            | Error::Diverged { .. }
            | Error::Quadrature(_) => 3,
            _ => 2,
        }
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T> Stage<T> for convbound::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

impl<T> Stage<T> for std::io::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure { stage, error: e.into() })
    }
}

/// Names the file in I/O failures.
fn at_path<T>(r: convbound::Result<T>, stage: &'static str, path: &Path) -> Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Io(io) => invalid(stage, "path", format!("{}: {io}", path.display())),
        error => Failure { stage, error },
    })
}

fn invalid(stage: &'static str, name: &'static str, reason: impl Into<String>) -> Failure {
    Failure {
        stage,
        error: Error::InvalidArgument { name, reason: reason.into() },
    }
}

/// The reproducibility header: version, the exact invocation, and the
/// resolved parameters of the command.
fn run_spec(command: &str, params: Header) -> Header {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let mut h: Header = vec![
        ("tool".into(), "convbound".into()),
        ("version".into(), env!("CARGO_PKG_VERSION").into()),
        ("command".into(), command.into()),
        ("argv".into(), argv.join(" ")),
    ];
    h.extend(params);
    h
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).stage("write")?;
    }
    at_path(std::fs::write(path, text).map_err(Error::from), "write", path)
}

fn gen_data(a: &GenData) -> Result<(), Failure> {
    let (ds, params) = match (&a.mnist_images, &a.mnist_labels) {
        (Some(img), Some(lab)) => {
            let images = read_idx_images(&at_path(std::fs::read(img).map_err(Error::from), "read-mnist", img)?).stage("read-mnist")?;
            let labels = read_idx_labels(&at_path(std::fs::read(lab).map_err(Error::from), "read-mnist", lab)?).stage("read-mnist")?;
            let (ds, _) = augment_mnist(&images, &labels, a.scale_s, a.n, a.seed).stage("gen-data")?;
            (ds, vec![kv("scale_s", a.scale_s), kv("mnist_images", img.display())])
        }
        _ => {
            let iter = a.iter.unwrap_or((a.len / 1000).max(1));
            let (ds, _) = gen_signature_dataset(a.seed, a.n, a.len, iter).stage("gen-data")?;
            (ds, vec![kv("len", a.len), kv("iter", iter)])
        }
    };
    export_dataset(&ds, &a.out).stage("gen-data")?;
    let mut spec = vec![kv("seed", a.seed), kv("n", a.n)];
    spec.extend(params);
    eprintln!("{}", header_block(&run_spec("gen-data", spec), &vec![]).trim_end());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<LabeledDataset, Failure> {
    at_path(import_dataset(path), "load-data", path)
}

fn preset_for(name: &Option<String>, ds: &LabeledDataset) -> Result<(Preset, Architecture), Failure> {
    let p = match name {
        Some(n) => Preset::parse(n).stage("architecture")?,
        None => Preset::for_dataset(ds).stage("architecture")?,
    };
    Ok((p, p.build(ds).stage("architecture")?))
}

fn train(a: &TrainArgs) -> Result<(), Failure> {
    let ds = load_dataset(&a.data)?;
    let (preset, arch) = preset_for(&a.preset, &ds)?;
    let cfg = TrainConfig {
        lr: a.lr,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        min_epochs: a.min_epochs,
        target_accuracy: a.target,
        seed: a.seed,
        ..Default::default()
    };
    let r = train_network::<f32>(&arch, &ds, &cfg).stage("train")?;
    let mut params = vec![kv("data", a.data.display()), kv("preset", preset.name())];
    params.extend(cfg.describe());
    params.push(kv("train_accuracy", r.train_accuracy));
    params.push(kv("reached_target", r.reached_target));
    params.push(kv("epochs", r.log.len()));
    let header = run_spec("train", params);
    let snap = Snapshot {
        weights: r.weights,
        reference: r.reference,
        meta: header.clone(),
    };
    snap.write(&a.snapshot).stage("write")?;
    let mut text = header_block(&header, &vec![]);
    text.push_str(&log_csv(&r.log));
    write(&a.out, &text)?;
    if !r.reached_target {
        eprintln!("warning: target accuracy {} not reached (final {})", a.target, r.train_accuracy);
    }
    Ok(())
}

fn run_compare(a: &MeasureArgs, command: &'static str) -> Result<(CompareReport, Header), Failure> {
    let variants = a
        .variant
        .iter()
        .map(|v| Variant::parse(v).stage("arguments"))
        .collect::<Result<Vec<_>, _>>()?;
    if !(a.delta > 0.0 && a.delta < 1.0) {
        return Err(invalid("arguments", "delta", "must lie in (0, 1)"));
    }
    let ds = load_dataset(&a.data)?;
    let (preset, arch) = preset_for(&a.preset, &ds)?;
    let snap = at_path(Snapshot::read(&a.snapshot), "load-snapshot", &a.snapshot)?;
    snap.check(&arch).stage("load-snapshot")?;
    let mut opts = CompareOptions {
        delta: a.delta,
        margin: match a.gamma {
            Some(g) => MarginRule::Fixed(g),
            None => MarginRule::Auto(a.auto_margin),
        },
        lipschitz: !a.no_lipschitz,
        seed: a.seed,
        ..Default::default()
    };
    opts.norms.sigma_budget = a.exact_sigma_budget;
    let mut rep = compare(&arch, &snap.weights.convert(), &snap.reference.convert(), &ds, &opts).stage(command)?;
    if !variants.is_empty() {
        rep.rows
            .retain(|r| r.family != "ours" || variants.iter().any(|v| v.name() == r.name) || Variant::parse(&r.name).is_err());
    }
    let mut params = vec![
        kv("data", a.data.display()),
        kv("data_generator", &ds.provenance.generator),
        kv("data_seed", ds.provenance.seed),
        kv("snapshot", a.snapshot.display()),
        kv("preset", preset.name()),
        kv(
            "variants",
            if variants.is_empty() { "all".to_string() } else { a.variant.join(" ") },
        ),
        kv("delta", a.delta),
        kv(
            "margin_rule",
            match a.gamma {
                Some(g) => format!("fixed:{g}"),
                None => format!("auto:{}", a.auto_margin),
            },
        ),
        kv("exact_sigma_budget", a.exact_sigma_budget),
        kv("lipschitz", !a.no_lipschitz),
        kv("seed", a.seed),
    ];
    params.extend(ds.provenance.params.iter().map(|(k, v)| (format!("data.{k}"), v.clone())));
    params.extend(snap.meta.iter().map(|(k, v)| (format!("snapshot.{k}"), v.clone())));
    Ok((rep, run_spec(command, params)))
}

fn measure(a: &MeasureArgs) -> Result<(), Failure> {
    let (rep, h) = run_compare(a, "measure")?;
    write(&a.out, &rep.norm_table(&h))
}

fn bounds(a: &MeasureArgs) -> Result<(), Failure> {
    let (rep, h) = run_compare(a, "bounds")?;
    write(&a.out, &rep.bound_table(&h))
}

fn compare_cmd(a: &MeasureArgs) -> Result<(), Failure> {
    let (rep, h) = run_compare(a, "compare")?;
    std::fs::create_dir_all(&a.out).stage("write")?;
    write(&a.out.join("norms.csv"), &rep.norm_table(&h))?;
    write(&a.out.join("bounds.csv"), &rep.bound_table(&h))?;
    write(&a.out.join("histograms.csv"), &rep.histogram_table(&h))?;
    write(&a.out.join("margins.csv"), &rep.margin_table(&h))?;
    eprintln!(
        "gamma={} dip={} p={} modes={}",
        rep.gamma, rep.dip.dip, rep.dip.p_value, rep.modes
    );
    Ok(())
}

fn cover_check(a: &CoverArgs) -> Result<(), Failure> {
    let cert = l1_ball_cover(a.d, a.beta, a.eps).stage("cover")?;
    let v = cover_verify(&cert, a.trials, a.seed).stage("cover-verify")?;
    let h = run_spec(
        "cover-check",
        vec![kv("d", a.d), kv("beta", a.beta), kv("eps", a.eps), kv("trials", a.trials), kv("seed", a.seed)],
    );
    let mut text = header_block(&h, &vec![kv("log", "natural")]);
    text.push_str("d,beta,eps,k,points,claimed_log_size,log_points,trials,worst_distance,pass\n");
    text.push_str(&format!(
        "{},{},{},{},{},{:e},{:e},{},{:e},{}\n",
        cert.d,
        cert.beta,
        cert.eps,
        cert.k,
        cert.points.len(),
        cert.claimed_size_bound,
        (cert.points.len() as f64).ln(),
        v.trials,
        v.worst_distance,
        v.pass
    ));
    write(&a.out, &text)?;
    if !v.pass {
        return Err(Failure {
            stage: "cover-verify",
            error: Error::Degenerate(format!("a sampled point lies {} from the cover", v.worst_distance)),
        });
    }
    Ok(())
}

fn concentration_check(a: &ConcentrationArgs) -> Result<(), Failure> {
    let r = norm_concentration_check(a.n, a.trials, a.eps, a.seed).stage("concentration")?;
    let h = run_spec(
        "concentration-check",
        vec![kv("n", a.n), kv("eps", a.eps), kv("trials", a.trials), kv("seed", a.seed)],
    );
    let mut text = header_block(&h, &vec![]);
    text.push_str("n,eps,c,u,trials,failures,failure_rate,bound\n");
    text.push_str(&format!(
        "{},{},{:e},{:e},{},{},{:e},{:e}\n",
        a.n, a.eps, r.c, r.u, r.trials, r.failures, r.failure_rate, r.bound
    ));
    write(&a.out, &text)
}

fn downsample_cmd(a: &DownsampleArgs) -> Result<(), Failure> {
    let h = run_spec("downsample-check", vec![kv("n", a.n), kv("seed", a.seed)]);
    let mut text = header_block(&h, &vec![kv("a1_reference", "zero")]);
    text.push_str("instance,channels,side,kernel,filters,b0,b0_down,a1,a1_down,params,params_down,param_count,param_count_down,drift\n");
    for i in 0..a.n {
        let d = downsample_check(a.seed.wrapping_add(i as u64)).stage("downsample")?;
        text.push_str(&format!(
            "{i},{},{},{},{},{:e},{:e},{:e},{:e},{},{},{:e},{:e},{:e}\n",
            d.channels,
            d.side,
            d.kernel,
            d.filters,
            d.b0[0],
            d.b0[1],
            d.a1[0],
            d.a1[1],
            d.params[0],
            d.params[1],
            d.param_count[0],
            d.param_count[1],
            d.drift()
        ));
    }
    write(&a.out, &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Measure(a) => measure(a),
        Command::Bounds(a) => bounds(a),
        Command::Compare(a) => compare_cmd(a),
        Command::CoverCheck(a) => cover_check(a),
        Command::ConcentrationCheck(a) => concentration_check(a),
        Command::DownsampleCheck(a) => downsample_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
