use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use molguide::dataset::{compute_marginals, generate_synthetic_dataset, load_dataset, GraphDataset};
use molguide::denoiser::{train_softmax_denoiser, Denoiser, SoftmaxDenoiserParams, TrainConfig};
use molguide::guidance::{GradientProjection, GuidanceSpec, PropertyFunction};
use molguide::harness::{
    self, molecule_summary_csv, parse_sweep_csv, run_sweep_cells, summarize, Generator, NodeCount, SweepConfig,
};
use molguide::noise::{NoiseModel, NoiseSchedule, DEFAULT_COSINE_S, DEFAULT_STEPS};
use molguide::sampler::{Guide, GuidePlacement};
use molguide::validity::write_sdf;
use molguide::vocab::{qm9_heavy_vocab, Vocabulary};

#[derive(Parser, Debug)]
#[command(name = "molguide", version, about = "Guided discrete diffusion for heavy-atom molecular graphs")]
struct Cli {
    /// Master seed for datasets, training and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Diffusion steps T (default 500, or 100 with --quick).
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Cosine schedule offset s.
    #[arg(long, global = true, default_value_t = DEFAULT_COSINE_S)]
    cosine_s: f64,

    /// Reduced settings: 256 samples per cell and T = 100.
    #[arg(long, global = true)]
    quick: bool,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic valence-valid dataset.
    GenDataset {
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 6)]
        max_nodes: usize,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train the softmax denoiser and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 5.0)]
        gamma: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        learn_rate: f64,
        /// Mini-batch size in examples (0 = full batch).
        #[arg(long, default_value_t = 0)]
        batch: usize,
        /// Noisy draws per dataset graph.
        #[arg(long, default_value_t = 8)]
        draws: usize,
    },
    /// Generate molecules, optionally guided.
    Sample {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        guide: GuideArgs,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long)]
        target: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
    },
    /// Sweep guidance targets and scales and tabulate the outcomes.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        guide: GuideArgs,
        /// Comma-separated targets.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<f64>,
        /// Comma-separated guidance scales (default grid depends on --guide).
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Samples per cell (default 1024, or 256 with --quick).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Print a sweep CSV as a console table.
    Report {
        /// Sweep CSV (default <out>/sweep.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset file; a 500-graph synthetic set is generated when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Vocabulary file (default: C, N, O, F with none/single/double/triple).
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DenoiserKind {
    Bayes,
    Softmax,
    Marginal,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = DenoiserKind::Bayes)]
    denoiser: DenoiserKind,
    /// Softmax checkpoint (required with --denoiser softmax).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Random relabelings per dataset graph for the Bayes denoiser.
    #[arg(long, default_value_t = 1)]
    bayes_perms: usize,
    /// Fixed node count (default: drawn from the dataset size histogram).
    #[arg(long)]
    nodes: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum GuideKind {
    None,
    Proportion,
    Weight,
    Bonds,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Placement {
    X0,
    Xtm1,
}

#[derive(Args, Debug)]
struct GuideArgs {
    #[arg(long, value_enum, default_value_t = GuideKind::None)]
    guide: GuideKind,
    /// Atom symbol for proportion guidance.
    #[arg(long, default_value = "C")]
    guide_atom: String,
    /// Clean-graph samples per gradient estimate.
    #[arg(long, default_value_t = 1)]
    guide_samples: usize,
    #[arg(long, value_enum, default_value_t = Placement::X0)]
    guide_at: Placement,
    /// Use the full gradient, or only its within-row component.
    #[arg(long, value_enum, default_value_t = Projection::Tangent)]
    guide_gradient: Projection,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Projection {
    Tangent,
    Raw,
}

impl GuideArgs {
    fn function(&self, vocab: &Vocabulary) -> Result<Option<PropertyFunction>> {
        Ok(match self.guide {
            GuideKind::None => None,
            GuideKind::Proportion => {
                let atom = vocab
                    .atoms
                    .index_of(&self.guide_atom)
                    .with_context(|| format!("atom `{}` is not in the vocabulary", self.guide_atom))?;
                Some(PropertyFunction::AtomProportion { atom })
            }
            GuideKind::Weight => Some(PropertyFunction::MolecularWeight),
            GuideKind::Bonds => Some(PropertyFunction::BondCount),
        })
    }

    fn placement(&self) -> GuidePlacement {
        match self.guide_at {
            Placement::X0 => GuidePlacement::X0,
            Placement::Xtm1 => GuidePlacement::Xtm1,
        }
    }

    fn projection(&self) -> GradientProjection {
        match self.guide_gradient {
            Projection::Tangent => GradientProjection::Tangent,
            Projection::Raw => GradientProjection::Raw,
        }
    }
}

/// Resolved settings, written to `run-config.txt`.
struct RunLog(String);

impl RunLog {
    fn new(cli: &Cli, steps: usize) -> Self {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", command_name(&cli.command));
        let _ = writeln!(s, "seed = {}", cli.seed);
        let _ = writeln!(s, "steps = {steps}");
        let _ = writeln!(s, "cosine_s = {}", cli.cosine_s);
        let _ = writeln!(s, "quick = {}", cli.quick);
        Self(s)
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.0, "{key} = {value}");
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenDataset { .. } => "gen-dataset",
        Command::Train { .. } => "train",
        Command::Sample { .. } => "sample",
        Command::Sweep { .. } => "sweep",
        Command::Report { .. } => "report",
    }
}

fn load_vocab(path: Option<&Path>) -> Result<Vocabulary> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Vocabulary::parse(&text)?)
        }
        None => Ok(qm9_heavy_vocab()),
    }
}

fn load_data(args: &DataArgs, seed: u64, log: &mut RunLog) -> Result<GraphDataset> {
    let vocab = load_vocab(args.vocab.as_deref())?;
    log.set("vocab", args.vocab.as_ref().map_or("qm9-heavy".into(), |p| p.display().to_string()));
    match &args.dataset {
        Some(path) => {
            log.set("dataset", path.display());
            load_dataset(path, &vocab).with_context(|| format!("loading {}", path.display()))
        }
        None => {
            log.set("dataset", format!("synthetic count=500 max_nodes=6 seed={seed}"));
            Ok(generate_synthetic_dataset(&vocab, 500, 6, seed)?)
        }
    }
}

fn noise_model(ds: &GraphDataset, steps: usize, s: f64) -> Result<NoiseModel> {
    let (m_x, m_e) = compute_marginals(ds)?;
    Ok(NoiseModel::new(NoiseSchedule::cosine(steps, s)?, &m_x, &m_e)?)
}

fn build_denoiser(args: &ModelArgs, ds: &GraphDataset, steps: usize, seed: u64, log: &mut RunLog) -> Result<Denoiser> {
    log.set("denoiser", format!("{:?}", args.denoiser).to_lowercase());
    Ok(match args.denoiser {
        DenoiserKind::Bayes => {
            log.set("bayes_perms", args.bayes_perms);
            Denoiser::bayes(ds, args.bayes_perms, seed)?
        }
        DenoiserKind::Marginal => Denoiser::marginal(ds)?,
        DenoiserKind::Softmax => {
            let path = args.checkpoint.as_ref().context("--denoiser softmax needs --checkpoint")?;
            log.set("checkpoint", path.display());
            let params = SoftmaxDenoiserParams::load(path)?;
            if params.steps != steps {
                log::warn!("checkpoint trained with T={}, sampling with T={steps}", params.steps);
            }
            if params.atoms != ds.vocab().atom_count() || params.bonds != ds.vocab().bond_count() {
                bail!("checkpoint dimensions do not match the vocabulary");
            }
            Denoiser::Softmax(params)
        }
    })
}

fn node_count(args: &ModelArgs, log: &mut RunLog) -> NodeCount {
    match args.nodes {
        Some(n) => {
            log.set("nodes", n);
            NodeCount::Fixed(n)
        }
        None => {
            log.set("nodes", "dataset-histogram");
            NodeCount::FromDataset
        }
    }
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let steps = cli.steps.unwrap_or(if cli.quick { harness::QUICK_STEPS } else { DEFAULT_STEPS });
    let mut log = RunLog::new(&cli, steps);
    if !matches!(cli.command, Command::Report { .. }) {
        fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    }

    match &cli.command {
        Command::GenDataset { count, max_nodes, vocab } => {
            let vocab = load_vocab(vocab.as_deref())?;
            let ds = generate_synthetic_dataset(&vocab, *count, *max_nodes, cli.seed)?;
            log.set("count", count);
            log.set("max_nodes", max_nodes);
            write_out(&cli.out, "dataset.txt", &ds.to_text())?;
            write_out(&cli.out, "vocab.txt", &vocab.to_text())?;
        }
        Command::Train { data, gamma, epochs, learn_rate, batch, draws } => {
            let ds = load_data(data, cli.seed, &mut log)?;
            let nm = noise_model(&ds, steps, cli.cosine_s)?;
            let cfg = TrainConfig {
                gamma: *gamma,
                epochs: *epochs,
                learn_rate: *learn_rate,
                batch: *batch,
                draws_per_graph: *draws,
                seed: cli.seed,
            };
            log.set("train", format!("{cfg:?}"));
            let trained = train_softmax_denoiser(&ds, &nm, &cfg)?;
            let first = trained.history[0];
            let last = *trained.history.last().unwrap();
            println!("cross-entropy {first:.6} -> {last:.6} over {epochs} epochs");
            write_out(&cli.out, "denoiser.ckpt", &trained.params.to_text())?;
        }
        Command::Sample { data, model, guide, count, target, lambda } => {
            let ds = load_data(data, cli.seed, &mut log)?;
            let nm = noise_model(&ds, steps, cli.cosine_s)?;
            let dn = build_denoiser(model, &ds, steps, cli.seed, &mut log)?;
            let gen = Generator { dataset: &ds, noise: &nm, denoiser: &dn, nodes: node_count(model, &mut log) };
            let function = guide.function(ds.vocab())?;
            let guide = match function {
                None => None,
                Some(f) => {
                    let target = target.context("guided sampling needs --target")?;
                    log.set("guide", format!("{f:?} target={target} lambda={lambda} samples={}", guide.guide_samples));
                    log.set("guide_at", format!("{:?}", guide.placement()));
                    log.set("guide_gradient", format!("{:?}", guide.projection()));
                    let mut spec = GuidanceSpec::new(f, target, *lambda, guide.guide_samples)?;
                    spec.projection = guide.projection();
                    Some(Guide { spec, placement: guide.placement() })
                }
            };
            log.set("count", count);
            let graphs = gen.batch(cli.seed, *count, guide.as_ref())?;
            let summary_fn = function.unwrap_or(PropertyFunction::MolecularWeight);
            let sdf = write_sdf(graphs.iter().enumerate().map(|(i, g)| (g, format!("sample-{i}"))), ds.vocab())?;
            write_out(&cli.out, "molecules.sdf", &sdf)?;
            write_out(&cli.out, "samples.csv", &molecule_summary_csv(&graphs, summary_fn, &ds)?)?;
            write_out(&cli.out, "run-config.txt", &log.0)?;
        }
        Command::Sweep { data, model, guide, targets, lambdas, samples } => {
            let ds = load_data(data, cli.seed, &mut log)?;
            let nm = noise_model(&ds, steps, cli.cosine_s)?;
            let dn = build_denoiser(model, &ds, steps, cli.seed, &mut log)?;
            let gen = Generator { dataset: &ds, noise: &nm, denoiser: &dn, nodes: node_count(model, &mut log) };
            let function = guide.function(ds.vocab())?.context("sweep needs --guide")?;
            let lambdas = lambdas.clone().unwrap_or_else(|| match function {
                PropertyFunction::MolecularWeight => harness::WEIGHT_LAMBDAS.to_vec(),
                _ => harness::PROPORTION_LAMBDAS.to_vec(),
            });
            let samples = samples.unwrap_or(if cli.quick { harness::QUICK_SAMPLES } else { harness::DEFAULT_SAMPLES });
            let cfg = SweepConfig {
                function,
                targets: targets.clone(),
                lambdas,
                samples,
                guide_samples: guide.guide_samples,
                placement: guide.placement(),
                projection: guide.projection(),
                seed: cli.seed,
            };
            log.set("sweep", format!("{cfg:?}"));
            let cells = run_sweep_cells(&cfg, &gen)?;
            let rows: Vec<_> = cells.iter().map(|c| c.row.clone()).collect();
            let summary = summarize(&rows)?;
            print!("{}", summary.table);
            write_out(&cli.out, "sweep.csv", &summary.csv)?;
            let named = cells.iter().flat_map(|c| {
                c.graphs
                    .iter()
                    .enumerate()
                    .map(move |(i, g)| (g, format!("target={} lambda={} sample={i}", c.row.target, c.row.lambda)))
            });
            write_out(&cli.out, "molecules.sdf", &write_sdf(named, ds.vocab())?)?;
            write_out(&cli.out, "run-config.txt", &log.0)?;
        }
        Command::Report { csv } => {
            let path = csv.clone().unwrap_or_else(|| cli.out.join("sweep.csv"));
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let rows = parse_sweep_csv(&text)?;
            print!("{}", summarize(&rows)?.table);
        }
    }
    Ok(())
}
