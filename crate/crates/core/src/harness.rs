//! Batch generation, λ sweeps and their CSV / console reports.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::dataset::GraphDataset;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::graph::GraphState;
use crate::guidance::{GradientProjection, GuidanceSpec, PropertyFunction};
use crate::noise::NoiseModel;
use crate::sampler::{generate, Guide, GuidePlacement, SampleStreams};
use crate::validity::check_validity;

/// Default proportion-guidance grid.
pub const PROPORTION_LAMBDAS: [f64; 7] = [0.0, 1.0, 10.0, 1e2, 1e3, 1e4, 1e5];
/// Default molecular-weight grid.
pub const WEIGHT_LAMBDAS: [f64; 6] = [0.0, 1e-4, 1e-3, 1e-2, 0.1, 0.2];
pub const DEFAULT_SAMPLES: usize = 1024;
pub const QUICK_SAMPLES: usize = 256;
pub const QUICK_STEPS: usize = 100;

pub const CSV_HEADER: [&str; 7] =
    ["target", "lambda", "prop_mean", "prop_std", "pct_valid", "mean_fragments", "n_samples"];
const CSV_COMMENT: &str = "# prop_std is the population standard deviation over the cell's samples";

/// SplitMix64 finalizer, used to derive well-separated per-sample seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` within a batch seeded by `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    splitmix64(splitmix64(base) ^ index as u64)
}

/// Either a fixed node count or draws from the dataset's size histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeCount {
    Fixed(usize),
    FromDataset,
}

/// Everything a batch of samples shares.
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    pub dataset: &'a GraphDataset,
    pub noise: &'a NoiseModel,
    pub denoiser: &'a Denoiser,
    pub nodes: NodeCount,
}

impl Generator<'_> {
    /// Generates sample `index` of the batch seeded by `base`.
    pub fn sample(&self, base: u64, index: usize, guide: Option<&Guide>) -> Result<GraphState> {
        let mut streams = SampleStreams::from_seed(sample_seed(base, index));
        let n = match self.nodes {
            NodeCount::Fixed(n) => n,
            NodeCount::FromDataset => self.dataset.sample_node_count(&mut streams.chain),
        };
        generate(n, self.noise, self.denoiser, guide, self.dataset.vocab(), &mut streams)
    }

    /// `count` samples, returned in index order regardless of scheduling.
    pub fn batch(&self, base: u64, count: usize, guide: Option<&Guide>) -> Result<Vec<GraphState>> {
        #[cfg(feature = "parallel")]
        let out = (0..count).into_par_iter().map(|i| self.sample(base, i, guide)).collect();
        #[cfg(not(feature = "parallel"))]
        let out = (0..count).map(|i| self.sample(base, i, guide)).collect();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub function: PropertyFunction,
    pub targets: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub samples: usize,
    pub guide_samples: usize,
    pub placement: GuidePlacement,
    pub projection: GradientProjection,
    pub seed: u64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() || self.lambdas.is_empty() {
            return Err(Error::Config("sweep needs at least one target and one lambda".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("sweep needs at least one sample per cell".into()));
        }
        for &target in &self.targets {
            for &lambda in &self.lambdas {
                GuidanceSpec::new(self.function, target, lambda, self.guide_samples)?;
            }
        }
        Ok(())
    }

    /// `(target, λ)` cells in emission order.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.targets.iter().flat_map(|&t| self.lambdas.iter().map(move |&l| (t, l))).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub target: f64,
    pub lambda: f64,
    pub prop_mean: f64,
    pub prop_std: f64,
    pub pct_valid: f64,
    pub mean_fragments: f64,
    pub n_samples: usize,
}

/// Per-cell statistics over generated molecules.
pub fn summarize_cell(
    target: f64,
    lambda: f64,
    graphs: &[GraphState],
    function: PropertyFunction,
    dataset: &GraphDataset,
) -> SweepRow {
    let vocab = dataset.vocab();
    let values: Vec<f64> = graphs.iter().map(|g| function.eval(g, vocab)).collect();
    let count = graphs.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / count;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    let reports: Vec<_> = graphs.iter().map(|g| check_validity(g, vocab)).collect();
    let valid = reports.iter().filter(|r| r.valid).count() as f64;
    let fragments = reports.iter().map(|r| r.fragment_count as f64).sum::<f64>();
    SweepRow {
        target,
        lambda,
        prop_mean: mean,
        prop_std: var.sqrt(),
        pct_valid: 100.0 * valid / count,
        mean_fragments: fragments / count,
        n_samples: graphs.len(),
    }
}

/// Molecules and statistics of one sweep cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub row: SweepRow,
    pub graphs: Vec<GraphState>,
}

/// Runs every `(target, λ)` cell. Cell `c` uses batch seed `seed + c`, so a
/// λ = 0 cell reproduces an unguided batch with that seed exactly.
pub fn run_sweep_cells(cfg: &SweepConfig, gen: &Generator<'_>) -> Result<Vec<CellResult>> {
    cfg.validate()?;
    cfg.cells()
        .into_iter()
        .enumerate()
        .map(|(c, (target, lambda))| {
            let mut spec = GuidanceSpec::new(cfg.function, target, lambda, cfg.guide_samples)?;
            spec.projection = cfg.projection;
            let guide = Guide { spec, placement: cfg.placement };
            let graphs = gen
                .batch(cfg.seed.wrapping_add(c as u64), cfg.samples, Some(&guide))
                .map_err(|e| Error::Config(format!("cell target={target} lambda={lambda}: {e}")))?;
            let row = summarize_cell(target, lambda, &graphs, cfg.function, gen.dataset);
            log::info!(
                "target {target} lambda {lambda}: mean {:.4} ± {:.4}, {:.1}% valid",
                row.prop_mean,
                row.prop_std,
                row.pct_valid
            );
            Ok(CellResult { row, graphs })
        })
        .collect()
}

pub fn run_sweep(cfg: &SweepConfig, gen: &Generator<'_>) -> Result<Vec<SweepRow>> {
    Ok(run_sweep_cells(cfg, gen)?.into_iter().map(|c| c.row).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub csv: String,
    pub table: String,
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

pub fn summarize(rows: &[SweepRow]) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::Config("no sweep rows to summarize".into()));
    }
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(CSV_HEADER)?;
    for r in rows {
        wtr.write_record([
            fmt4(r.target),
            fmt4(r.lambda),
            fmt4(r.prop_mean),
            fmt4(r.prop_std),
            fmt4(r.pct_valid),
            fmt4(r.mean_fragments),
            r.n_samples.to_string(),
        ])?;
    }
    let body =
        String::from_utf8(wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is utf-8");
    let csv = format!("{CSV_COMMENT}\n{body}");
    Ok(Summary { csv, table: console_table(rows) })
}

pub fn console_table(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{:>10} {:>12} {:>22} {:>8} {:>10} {:>6}\n",
        "target", "lambda", "property", "% valid", "fragments", "n"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>10.2} {:>12} {:>22} {:>8.1} {:>10.2} {:>6}\n",
            r.target,
            format!("{}", r.lambda),
            format!("{:.2} +/- {:.2}", r.prop_mean, r.prop_std),
            r.pct_valid,
            r.mean_fragments,
            r.n_samples
        ));
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Parse { line: 1, message: "unexpected sweep CSV header".into() });
    }
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |field: &str| Error::Parse { line: idx + 2, message: format!("bad `{field}`") };
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| bad(CSV_HEADER[k]));
        rows.push(SweepRow {
            target: num(0)?,
            lambda: num(1)?,
            prop_mean: num(2)?,
            prop_std: num(3)?,
            pct_valid: num(4)?,
            mean_fragments: num(5)?,
            n_samples: rec[6].parse().map_err(|_| bad("n_samples"))?,
        });
    }
    Ok(rows)
}

/// Per-molecule CSV written next to the SDF by the `sample` command.
pub fn molecule_summary_csv(
    graphs: &[GraphState],
    function: PropertyFunction,
    dataset: &GraphDataset,
) -> Result<String> {
    let vocab = dataset.vocab();
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["index", "n_atoms", "n_bonds", function.name(), "valid", "fragments"])?;
    for (i, g) in graphs.iter().enumerate() {
        let report = check_validity(g, vocab);
        wtr.write_record([
            i.to_string(),
            g.n().to_string(),
            g.bonds().len().to_string(),
            fmt4(function.eval(g, vocab)),
            report.valid.to_string(),
            report.fragment_count.to_string(),
        ])?;
    }
    Ok(String::from_utf8(wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf-8"))
}
