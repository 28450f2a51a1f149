mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ognet::data::{generate_synthetic, load_split, LoadedSample, Manifest, Split, SyntheticSpec};
use ognet::eval::{density_sweep, embed, evaluate, sweep_to_tsv, EmbeddingSet, LabeledClouds, SWEEP_FRACTIONS};
use ognet::geometry::{farthest_point_sample, knn_graph, position_keys, PointCloud};
use ognet::model::{batch_input, OgNet, OgNetConfig, Variant};
use ognet::training::{train, BATCH_SIZE, TRAIN_FRACTION};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use config::Settings;

pub const LABEL_MAP_FILE: &str = "label_map.tsv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(name = "ognet", version, about = "OG-Net point-cloud re-identification runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pedestrian dataset and its manifest.
    Generate(GenerateArgs),
    /// Train on the train split of a manifest.
    Train(TrainArgs),
    /// Write embeddings of one manifest split to an OGEB file.
    Extract(ExtractArgs),
    /// Score query embeddings against gallery embeddings.
    Eval(EvalArgs),
    /// Retrieval quality across point densities.
    Sweep(SweepArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Time the KNN, FPS and forward kernels.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    identities: usize,
    #[arg(long, default_value_t = 12)]
    samples: usize,
    #[arg(long, default_value_t = 8192)]
    points: usize,
    #[arg(long, default_value_t = 3)]
    color_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pose_noise: f64,
    #[arg(long, default_value_t = 0.5)]
    clutter: f64,
    #[arg(long, default_value_t = 16)]
    test_identities: usize,
    #[arg(long, default_value_t = 2)]
    queries: usize,
    #[arg(long, default_value_t = 4)]
    gallery: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest to train on; may also come from the config file.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    no_rgb: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TRAIN_FRACTION)]
    fraction: f64,
    #[arg(long, default_value_t = BATCH_SIZE)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    query: PathBuf,
    gallery: PathBuf,
    /// Report path; defaults to `report.tsv` beside the query file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_FRACTIONS)]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = BATCH_SIZE)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// `all`, `ops`, `layers`, `model` or a single case name.
    #[arg(default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// `knn`, `fps`, `forward` or `all`.
    #[arg(long, default_value = "all")]
    kernel: String,
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<ognet::Error>().map_or("error", |o| o.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Computation is single-threaded; any cap of one or more is honored
/// trivially.
fn check_threads(threads: Option<usize>) -> Result<()> {
    if threads == Some(0) {
        bail!("--threads must be at least 1");
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_identities: a.identities,
        samples_per_identity: a.samples,
        points_per_cloud: a.points,
        color_signature_dim: a.color_dim,
        pose_noise: a.pose_noise,
        clutter: a.clutter,
        seed: a.seed,
        num_test_identities: a.test_identities,
        queries_per_identity: a.queries,
        gallery_per_identity: a.gallery,
    };
    let path = generate_synthetic(&spec, &a.out)?;
    println!("{}", path.display());
    Ok(())
}

fn clouds_of(samples: &[LoadedSample]) -> Vec<PointCloud> {
    samples.iter().map(|s| s.cloud.clone()).collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut settings = match &a.config {
        Some(p) => Settings::read(p)?,
        None => Settings::default(),
    };
    let flags: [(&str, Option<String>); 11] = [
        ("manifest", a.manifest.as_ref().map(|p| p.display().to_string())),
        ("variant", a.variant.map(|v| v.to_string())),
        ("loss", a.loss.clone()),
        ("k", a.k.map(|v| v.to_string())),
        ("batch", a.batch.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("fraction", a.fraction.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("threads", a.threads.map(|v| v.to_string())),
        ("out", a.out.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            settings.set(k, v);
        }
    }
    if a.no_rgb {
        settings.set("no_rgb", "true");
    }
    let threads = settings.get("threads").map(str::parse::<usize>).transpose().context("bad threads value")?;
    check_threads(threads)?;
    let manifest_path = PathBuf::from(settings.get("manifest").context("no manifest given")?);
    let out = PathBuf::from(settings.get("out").unwrap_or("run"));

    let manifest = Manifest::read(&manifest_path)?;
    let (samples, labels) = load_split(&manifest, Split::Train, None)?;
    let fraction: f64 = settings.get("fraction").map_or(Ok(TRAIN_FRACTION), str::parse).context("bad fraction")?;
    let input_points = ((samples[0].cloud.len() as f64) * fraction).round() as usize;
    let (model_cfg, train_cfg) = settings.build(labels.len(), input_points)?;

    fs::create_dir_all(&out)?;
    labels.write(&out.join(LABEL_MAP_FILE))?;
    let echo = format!(
        "manifest={}\nvariant={}\n{}{}",
        manifest_path.display(),
        model_cfg.variant,
        train_cfg.to_text(),
        model_cfg.to_text()
    );
    fs::write(out.join(CONFIG_FILE), echo)?;

    let clouds = clouds_of(&samples);
    let y: Vec<usize> = samples.iter().map(|s| s.label.expect("train labels")).collect();
    let mut net = OgNet::from_config(model_cfg, train_cfg.seed)?;
    let report = train(&mut net, &clouds, &y, &train_cfg, Some(&out))?;
    let last = report.epochs.last().context("no epochs ran")?;
    println!(
        "epochs\t{}\nfinal_loss\t{}\nfinal_acc\t{}\nbest_epoch\t{}",
        report.epochs.len(),
        last.loss,
        last.acc,
        report.best_epoch
    );
    Ok(())
}

fn load_net(path: &Path) -> Result<OgNet> {
    OgNet::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    check_threads(a.threads)?;
    let net = load_net(&a.checkpoint)?;
    let manifest = Manifest::read(&a.manifest)?;
    let (samples, _) = load_split(&manifest, a.split, None)?;
    let feats = embed(&net, &clouds_of(&samples), a.fraction, a.seed, a.batch)?;
    let set = EmbeddingSet::new(
        feats,
        samples.iter().map(|s| s.identity).collect(),
        samples.iter().map(|s| s.camera).collect(),
    )?;
    set.write(&a.out)?;
    println!("{}\t{}", a.out.display(), set.len());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let q = EmbeddingSet::read(&a.query).with_context(|| format!("reading {}", a.query.display()))?;
    let g = EmbeddingSet::read(&a.gallery).with_context(|| format!("reading {}", a.gallery.display()))?;
    let report = evaluate(&q, &g)?;
    let tsv = report.to_tsv();
    let out = a
        .out
        .unwrap_or_else(|| a.query.parent().unwrap_or(Path::new(".")).join("report.tsv"));
    fs::write(&out, &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    check_threads(a.threads)?;
    let net = load_net(&a.checkpoint)?;
    let manifest = Manifest::read(&a.manifest)?;
    let (q, _) = load_split(&manifest, Split::Query, None)?;
    let (g, _) = load_split(&manifest, Split::Gallery, None)?;
    let (qc, gc) = (clouds_of(&q), clouds_of(&g));
    let meta = |s: &[LoadedSample]| -> (Vec<i64>, Vec<i64>) {
        (s.iter().map(|x| x.identity).collect(), s.iter().map(|x| x.camera).collect())
    };
    let ((qi, qcam), (gi, gcam)) = (meta(&q), meta(&g));
    let rows = density_sweep(
        &net,
        LabeledClouds { clouds: &qc, identities: &qi, cameras: &qcam },
        LabeledClouds { clouds: &gc, identities: &gi, cameras: &gcam },
        &a.fractions,
        a.seed,
        a.batch,
    )?;
    let tsv = sweep_to_tsv(&rows);
    if let Some(out) = &a.out {
        fs::write(out, &tsv)?;
    }
    print!("{tsv}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let cases = ognet::gradsuite::run(&a.scope, a.seed)?;
    let mut failed = Vec::new();
    println!("case\tmax_rel_error\ttolerance\tresult");
    for c in &cases {
        let verdict = if c.passed() { "pass" } else { "fail" };
        println!("{}\t{:.3e}\t{:.0e}\t{verdict}", c.name, c.max_error, c.tolerance);
        if !c.passed() {
            failed.push(c.name.as_str());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(","));
    }
    Ok(())
}

fn random_cloud(rng: &mut ChaCha8Rng, m: usize) -> Result<PointCloud> {
    let pos = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let col = (0..m).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
    Ok(PointCloud::new(pos, col)?)
}

fn time_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let start = Instant::now();
    for _ in 0..repeats {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / repeats as f64)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    check_threads(a.threads)?;
    let kernels: Vec<&str> = match a.kernel.as_str() {
        "all" => vec!["knn", "fps", "forward"],
        k @ ("knn" | "fps" | "forward") => vec![k],
        other => bail!("unknown kernel {other:?}"),
    };
    if a.repeats == 0 {
        bail!("--repeats must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    println!("kernel\tpoints\tms");
    for &m in &a.sizes {
        let cloud = random_cloud(&mut rng, m)?;
        let keys = position_keys(&cloud.positions_f64());
        for &kernel in &kernels {
            let ms = match kernel {
                "knn" => time_ms(a.repeats, || Ok(knn_graph(&keys, 3, 20.min(m - 1)).map(drop)?))?,
                "fps" => time_ms(a.repeats, || Ok(farthest_point_sample(&cloud.positions_f64(), m * 3 / 16).map(drop)?))?,
                _ => {
                    let mut cfg = OgNetConfig::new(Variant::Ogn, 10);
                    if m < 4096 {
                        cfg = cfg.scaled_points(m);
                    }
                    let net = OgNet::from_config(cfg, a.seed)?;
                    let input = batch_input(&[&cloud])?;
                    time_ms(a.repeats, || Ok(net.predict(&input).map(drop)?))?
                }
            };
            println!("{kernel}\t{m}\t{ms:.3}");
        }
    }
    Ok(())
}
