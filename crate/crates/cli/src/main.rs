//! `effdim`: command-line driver for data generation, training, spectrum
//! estimation, attacks and the three sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use effdim_core::attacks::evaluate_grid;
use effdim_core::data::DATA_DIR_ENV;
use effdim_core::harness::{
    attack_grid, cell_seed, cell_train_config, model_id, report, run_sweep, DataConfig, DataKind,
    Experiment, SweepConfig, SweepOptions, TrackConfig,
};
use effdim_core::model::{load_checkpoint, save_checkpoint};
use effdim_core::spectral::{hessian_spectrum, write_spectrum, SpectrumSidecar};
use effdim_core::training::{accuracy, train_with, TrainExtras};
use effdim_core::{build_model, AttackKind, Error, Family, LossFunction, Method, Result};
use serde::Serialize;

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "effdim",
    version,
    about = "Hessian effective dimensionality and adversarial robustness sweeps"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Sweep configuration (JSON). Single-model commands use its first track.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Base seed; replaces the seed list of a sweep.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Single-threaded execution with byte-identical outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Directory with MNIST IDX files.
    #[arg(long, global = true, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the train and test splits as CSV.
    GenData(DataArgs),
    /// Train one model and save a checkpoint.
    Train(TrainArgs),
    /// Estimate the Hessian spectrum and N_eff of a checkpoint.
    Effdim(EffdimArgs),
    /// Evaluate a checkpoint under one attack over a budget grid.
    Attack(AttackArgs),
    /// Run a sweep; requires --config.
    Sweep {
        #[arg(value_parser = ["scale", "robustness", "methods"])]
        experiment: String,
    },
    /// Build plot data and a summary from sweep CSVs.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    data: Option<DataKind>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    attack_scale: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    #[arg(long, default_value = "standard")]
    method: Method,
    #[arg(long)]
    awp: bool,
    #[arg(long)]
    extra_data: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Inner attack radius in units of 1/255, before the attack scale.
    #[arg(long)]
    inner_epsilon: Option<f64>,
}

#[derive(Args, Debug)]
struct EffdimArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    z: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "pgd-strong")]
    attack: AttackKind,
    /// ε in units of 1/255, or σ for gaussian; comma separated.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
}

/// The configuration, track and seed a single-model command works on.
struct Context {
    config: SweepConfig,
    track: TrackConfig,
    seed: u64,
}

impl Context {
    fn new(global: &Global, args: &DataArgs) -> Result<Self> {
        let mut config = match &global.config {
            Some(path) => SweepConfig::load(path)?,
            None => {
                let kind = args.data.unwrap_or(DataKind::TwoMoons);
                let family = args.family.unwrap_or(if kind.is_image() {
                    Family::SmallCnn
                } else {
                    Family::Mlp
                });
                SweepConfig {
                    tracks: vec![TrackConfig::new(family, DataConfig::new(kind))],
                    ..serde_json::from_str::<SweepConfig>(r#"{"tracks":[]}"#)?
                }
            }
        };
        let mut track = config.tracks[0].clone();
        if let Some(f) = args.family {
            track.family = f;
        }
        let d = &mut track.data;
        if let Some(k) = args.data {
            d.kind = k;
        }
        d.n_train = args.n_train.or(d.n_train);
        d.n_test = args.n_test.unwrap_or(d.n_test);
        d.noise = args.noise.unwrap_or(d.noise);
        d.classes = args.classes.unwrap_or(d.classes);
        d.spread = args.spread.unwrap_or(d.spread);
        d.side = args.side.unwrap_or(d.side);
        d.attack_scale = args.attack_scale.or(d.attack_scale);
        if d.dir.is_none() {
            d.dir = global.data_dir.clone();
        }
        let seed = global.seed.unwrap_or(config.seeds[0]);
        config.tracks = vec![track.clone()];
        config.seeds = vec![seed];
        config.validate()?;
        Ok(Self {
            config,
            track,
            seed,
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = effdim_core::harness::to_canonical_json(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(global: &Global, args: &DataArgs) -> Result<u8> {
    let ctx = Context::new(global, args)?;
    let data = ctx.track.data.load(ctx.seed)?;
    create_dir(&global.out)?;
    for (name, set) in [("train", &data.train), ("test", &data.test)] {
        let path = global.out.join(format!("{name}.csv"));
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        set.write_csv(std::io::BufWriter::new(f))?;
        println!("{} ({} samples)", path.display(), set.len());
    }
    Ok(0)
}

fn train(global: &Global, args: &TrainArgs) -> Result<u8> {
    let mut ctx = Context::new(global, &args.data)?;
    let mut t = ctx.track.train_settings(&ctx.config).clone();
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    t.learning_rate = args.lr.unwrap_or(t.learning_rate);
    t.inner_epsilon_255 = args.inner_epsilon.unwrap_or(t.inner_epsilon_255);
    t.validate()?;
    ctx.track.train = Some(t);

    let family = ctx.track.family.as_str();
    let data = ctx.track.data.load(ctx.seed)?;
    let spec = ctx.track.model_spec(
        &data.train,
        args.width,
        cell_seed(ctx.seed, "init", family, args.width),
    )?;
    let cfg = cell_train_config(
        &ctx.config,
        &ctx.track,
        args.width,
        ctx.seed,
        args.method,
        args.awp,
        args.extra_data,
    );
    let extras = TrainExtras {
        monitor: Some(&data.test),
        pool: data.pool.as_ref(),
    };
    let (net, history) = train_with(&build_model(&spec)?, &data.train, &cfg, extras)?;

    let id = model_id(
        family,
        ctx.track.data.kind.as_str(),
        args.width,
        &cfg.tag(),
        ctx.seed,
    );
    let dir = global.out.join("models");
    create_dir(&dir)?;
    let ckpt = dir.join(format!("{id}.ckpt"));
    save_checkpoint(&net, &ckpt)?;
    let hist = global.out.join(format!("{id}_history.csv"));
    std::fs::write(&hist, history.to_csv()).map_err(|e| Error::io(&hist, e))?;
    println!("{}", ckpt.display());
    println!(
        "params {}  train accuracy {:.4}  test accuracy {:.4}",
        net.param_count(),
        accuracy(&net, &data.train),
        accuracy(&net, &data.test)
    );
    Ok(0)
}

fn checkpoint_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn effdim(global: &Global, args: &EffdimArgs) -> Result<u8> {
    let ctx = Context::new(global, &args.data)?;
    let net = load_checkpoint(&args.model)?;
    let mut s = ctx.track.effdim_settings(&ctx.config).clone();
    s.z = args.z.unwrap_or(s.z);
    s.k = args.k.unwrap_or(s.k);
    s.subset_size = args.subset.unwrap_or(s.subset_size);
    let spec = net.spec();
    let cfg = s.to_config(cell_seed(
        ctx.seed,
        "effdim",
        spec.family.as_str(),
        spec.width_multiplier,
    ));
    cfg.validate()?;
    let data = ctx.track.data.load(ctx.seed)?;
    let spectrum = hessian_spectrum(&net, &data.test, &LossFunction::CrossEntropy, &cfg)?;
    let sidecar = SpectrumSidecar::new(&spectrum, s.z, net.param_count());
    create_dir(&global.out)?;
    let stem = format!("{}_spectrum", checkpoint_stem(&args.model));
    write_spectrum(&global.out, &stem, &spectrum, &sidecar)?;
    println!("{}", global.out.join(format!("{stem}.csv")).display());
    println!(
        "N_eff(z={}) = {:.6}  k = {}  tail bound {:.3e}  negative mass {:.4}",
        s.z, sidecar.eff_dim, sidecar.k, sidecar.tail_bound, sidecar.neg_mass_fraction
    );
    Ok(0)
}

#[derive(Serialize)]
struct AttackLine {
    attack: &'static str,
    budget: f64,
    attack_scale: f64,
    effective_budget: f64,
    clean_accuracy: f64,
    attacked_accuracy: f64,
    relative_performance: Option<f64>,
    n_evaluated: usize,
}

fn attack(global: &Global, args: &AttackArgs) -> Result<u8> {
    let ctx = Context::new(global, &args.data)?;
    let net = load_checkpoint(&args.model)?;
    let mut a = ctx.track.attack_settings(&ctx.config).clone();
    if let Some(b) = &args.budgets {
        if args.attack.is_budgeted() {
            a.epsilons_255 = b.clone();
        } else {
            a.sigmas = b.clone();
        }
    }
    a.pgd_steps = args.steps.unwrap_or(a.pgd_steps);
    a.pgd_restarts = args.restarts.unwrap_or(a.pgd_restarts);
    a.test_limit = args.test_limit.or(a.test_limit);
    a.validate()?;

    let spec = net.spec();
    let (family, width) = (spec.family.as_str(), spec.width_multiplier);
    let data = ctx.track.data.load(ctx.seed)?;
    let test = match a.test_limit {
        Some(n) => data
            .test
            .subset(n, cell_seed(ctx.seed, "attack-subset", family, width)),
        None => data.test,
    };
    let scale = if args.attack.is_budgeted() {
        ctx.track.data.attack_scale()
    } else {
        1.0
    };
    let (budgets, configs) = attack_grid(
        args.attack,
        &a,
        scale,
        cell_seed(ctx.seed, "attack", family, width),
    );
    let records = evaluate_grid(&net, &test, &configs)?;

    let lines: Vec<AttackLine> = records
        .iter()
        .zip(&budgets)
        .map(|(r, &budget)| AttackLine {
            attack: args.attack.as_str(),
            budget,
            attack_scale: scale,
            effective_budget: r.attack.budget(),
            clean_accuracy: r.clean_accuracy,
            attacked_accuracy: r.attacked_accuracy,
            relative_performance: r.relative_performance,
            n_evaluated: r.n_evaluated,
        })
        .collect();
    create_dir(&global.out)?;
    let stem = format!("{}_{}", checkpoint_stem(&args.model), args.attack.as_str());
    let path = global.out.join(format!("{stem}.csv"));
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(f);
    for l in &lines {
        w.serialize(l)?;
        println!(
            "budget {:<10.6} p* {:.4}  p_r {}",
            l.budget,
            l.attacked_accuracy,
            l.relative_performance
                .map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&global.out.join(format!("{stem}.json")), &records)?;
    println!("{}", path.display());
    Ok(0)
}

fn sweep(global: &Global, experiment: &str) -> Result<u8> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| Error::invalid("sweep needs --config"))?;
    let mut config = SweepConfig::load(path)?;
    if let Some(s) = global.seed {
        config.seeds = vec![s];
    }
    for t in &mut config.tracks {
        if t.data.dir.is_none() {
            t.data.dir = global.data_dir.clone();
        }
    }
    let experiment: Experiment = experiment.parse()?;
    // The global pool is sized in `main`.
    let options = SweepOptions {
        jobs: 0,
        models_dir: Some(global.out.join("models").join(config.hash())),
        progress: true,
    };
    let result = run_sweep(experiment, &config, &options)?;
    for p in result.write(&global.out)? {
        println!("{}", p.display());
    }
    let failed = result.failed_cells();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", result.cells.len());
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData(a) => gen_data(g, a),
        Command::Train(a) => train(g, a),
        Command::Effdim(a) => effdim(g, a),
        Command::Attack(a) => attack(g, a),
        Command::Sweep { experiment } => sweep(g, experiment),
        Command::Report { inputs } => {
            for p in report(inputs, &g.out)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Csv(c) if c.is_io_error() => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    let mut jobs = cli.global.jobs;
    if cli.global.deterministic {
        jobs = 1;
    }
    if jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
