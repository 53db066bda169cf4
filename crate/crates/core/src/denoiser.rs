//! Clean-graph predictors `p̂(G⁰ | G^t)`.
//!
//! * [`BayesDenoiser`]: the exact posterior under the empirical dataset
//!   distribution, i.e. the limit of a perfectly trained model.
//! * [`marginal_denoise`]: predicts the dataset marginals everywhere.
//! * [`softmax_denoise`]: a single linear-softmax layer over hand-built
//!   permutation-equivariant features, trained by [`train_softmax_denoiser`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{compute_marginals, GraphDataset};
use crate::error::{Error, Result};
use crate::graph::GraphState;
use crate::noise::NoiseModel;

/// Per-node and per-edge predicted clean-category distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub probs: GraphState,
}

impl DenoiserOutput {
    pub fn new(probs: GraphState) -> Self {
        Self { probs: probs.into_soft() }
    }

    pub fn node_row(&self, i: usize) -> &[f64] {
        self.probs.node_row(i)
    }

    pub fn edge_fiber(&self, i: usize, j: usize) -> &[f64] {
        self.probs.edge_fiber(i, j)
    }

    pub fn validate(&self) -> Result<()> {
        self.probs.validate()
    }
}

/// Every node row set to `m_x` and every off-diagonal fiber to `m_e`.
pub fn marginal_denoise(gt: &GraphState, m_x: &[f64], m_e: &[f64]) -> DenoiserOutput {
    DenoiserOutput::new(GraphState::filled(gt.n(), m_x, m_e))
}

#[derive(Debug, Clone)]
struct IndexedGraph {
    atoms: Vec<usize>,
    /// Upper-triangle edge categories in row-major order.
    edges: Vec<usize>,
    log_prior: f64,
}

/// Exact dataset posterior, conditioned on an exact node-count match.
#[derive(Debug)]
pub struct BayesDenoiser {
    by_size: BTreeMap<usize, Vec<IndexedGraph>>,
    a: usize,
    b: usize,
    warned: AtomicBool,
}

impl Clone for BayesDenoiser {
    fn clone(&self) -> Self {
        Self {
            by_size: self.by_size.clone(),
            a: self.a,
            b: self.b,
            warned: AtomicBool::new(self.warned.load(Ordering::Relaxed)),
        }
    }
}

fn index_graph(g: &GraphState, log_prior: f64) -> IndexedGraph {
    let n = g.n();
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push(g.edge_type(i, j));
        }
    }
    IndexedGraph { atoms: g.atom_types(), edges, log_prior }
}

impl BayesDenoiser {
    /// Uses dataset graphs in their stored node order.
    pub fn new(ds: &GraphDataset) -> Self {
        Self::with_permutations(ds, 1, 0)
    }

    /// Replaces each dataset graph by `perms` random relabelings (weight `1/perms` each).
    /// `perms = 1` keeps the stored order.
    pub fn with_permutations(ds: &GraphDataset, perms: usize, seed: u64) -> Self {
        let perms = perms.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_w = -(perms as f64).ln();
        let mut by_size: BTreeMap<usize, Vec<IndexedGraph>> = BTreeMap::new();
        for g in ds.graphs() {
            let bucket = by_size.entry(g.n()).or_default();
            if perms == 1 {
                bucket.push(index_graph(g, 0.0));
                continue;
            }
            for _ in 0..perms {
                let mut perm: Vec<usize> = (0..g.n()).collect();
                perm.shuffle(&mut rng);
                bucket.push(index_graph(&g.permuted(&perm), log_w));
            }
        }
        Self { by_size, a: ds.vocab().atom_count(), b: ds.vocab().bond_count(), warned: AtomicBool::new(false) }
    }

    /// Posterior over same-size dataset graphs, marginalized per node and edge.
    pub fn denoise(&self, gt: &GraphState, t: usize, nm: &NoiseModel) -> Result<DenoiserOutput> {
        let n = gt.n();
        let candidates = self.by_size.get(&n).ok_or(Error::NoSizeMatch(n))?;
        let log_qx = log_table(nm.qbar_x(t).row_iter());
        let log_qe = log_table(nm.qbar_e(t).row_iter());
        let xt = gt.atom_types();
        let mut et = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                et.push(gt.edge_type(i, j));
            }
        }
        let (a, b) = (self.a, self.b);
        let log_w: Vec<f64> = candidates
            .iter()
            .map(|c| {
                let mut ll = c.log_prior;
                for (&x0, &x) in c.atoms.iter().zip(&xt) {
                    ll += log_qx[x0 * a + x];
                }
                for (&e0, &e) in c.edges.iter().zip(&et) {
                    ll += log_qe[e0 * b + e];
                }
                ll
            })
            .collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::ZeroEvidence(t));
        }
        let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();

        let mut x = vec![0.0; n * a];
        let mut upper = vec![0.0; et.len() * b];
        for (c, &wc) in candidates.iter().zip(&w) {
            if wc == 0.0 {
                continue;
            }
            let wc = wc / z;
            for (i, &k) in c.atoms.iter().enumerate() {
                x[i * a + k] += wc;
            }
            for (p, &k) in c.edges.iter().enumerate() {
                upper[p * b + k] += wc;
            }
        }
        Ok(DenoiserOutput::new(assemble(n, a, b, x, &upper)))
    }
}

fn log_table<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    rows.flat_map(|r| r.iter().map(|v| v.ln())).collect()
}

/// Builds a soft state from node rows and upper-triangle fibers.
fn assemble(n: usize, a: usize, b: usize, x: Vec<f64>, upper: &[f64]) -> GraphState {
    let mut e = vec![0.0; n * n * b];
    let mut p = 0;
    for i in 0..n {
        e[(i * n + i) * b] = 1.0;
        for j in i + 1..n {
            let fiber = &upper[p * b..(p + 1) * b];
            e[(i * n + j) * b..(i * n + j + 1) * b].copy_from_slice(fiber);
            e[(j * n + i) * b..(j * n + i + 1) * b].copy_from_slice(fiber);
            p += 1;
        }
    }
    GraphState::from_raw(n, a, b, x, e)
}

/// One-shot convenience wrapper around [`BayesDenoiser::denoise`].
pub fn bayes_denoise(gt: &GraphState, t: usize, ds: &GraphDataset, nm: &NoiseModel) -> Result<DenoiserOutput> {
    BayesDenoiser::new(ds).denoise(gt, t, nm)
}

/// Node feature dimension `a + b + a + 1`.
pub fn node_feature_dim(a: usize, b: usize) -> usize {
    2 * a + b + 1
}

/// Edge feature dimension `b + a + 1`.
pub fn edge_feature_dim(a: usize, b: usize) -> usize {
    a + b + 1
}

/// `[x_i | incident edge-category counts / (n−1) | bond-order weighted neighbour mean | t/T]`.
pub fn node_features(gt: &GraphState, i: usize, t: usize, steps: usize, bond_orders: &[u32]) -> Vec<f64> {
    let (n, a, b) = (gt.n(), gt.atom_categories(), gt.edge_categories());
    let mut f = vec![0.0; node_feature_dim(a, b)];
    f[..a].copy_from_slice(gt.node_row(i));
    let mut order_sum = 0.0;
    for j in (0..n).filter(|&j| j != i) {
        let fiber = gt.edge_fiber(i, j);
        for (k, &v) in fiber.iter().enumerate() {
            f[a + k] += v;
        }
        // expected order keeps the feature defined on soft inputs as well
        let order: f64 = fiber.iter().zip(bond_orders).map(|(&v, &o)| o as f64 * v).sum();
        if order > 0.0 {
            for (k, &v) in gt.node_row(j).iter().enumerate() {
                f[a + b + k] += order * v;
            }
            order_sum += order;
        }
    }
    if n > 1 {
        f[a..a + b].iter_mut().for_each(|v| *v /= (n - 1) as f64);
    }
    if order_sum > 0.0 {
        f[a + b..a + b + a].iter_mut().for_each(|v| *v /= order_sum);
    }
    f[2 * a + b] = t as f64 / steps as f64;
    f
}

/// `[e_ij | x_i + x_j | t/T]`, symmetric in `i` and `j`.
pub fn edge_features(gt: &GraphState, i: usize, j: usize, t: usize, steps: usize) -> Vec<f64> {
    let (a, b) = (gt.atom_categories(), gt.edge_categories());
    let mut f = vec![0.0; edge_feature_dim(a, b)];
    f[..b].copy_from_slice(gt.edge_fiber(i, j));
    for (k, (&xi, &xj)) in gt.node_row(i).iter().zip(gt.node_row(j)).enumerate() {
        f[b + k] = xi + xj;
    }
    f[a + b] = t as f64 / steps as f64;
    f
}

/// Linear-softmax parameters. Weight matrices are row-major, one row per output category.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxDenoiserParams {
    pub atoms: usize,
    pub bonds: usize,
    pub steps: usize,
    /// Bond order per edge category, used by the neighbour feature.
    pub bond_orders: Vec<u32>,
    pub node_weights: Vec<f64>,
    pub node_bias: Vec<f64>,
    pub edge_weights: Vec<f64>,
    pub edge_bias: Vec<f64>,
}

impl SoftmaxDenoiserParams {
    pub fn zeros(atoms: usize, bond_orders: &[u32], steps: usize) -> Self {
        let bonds = bond_orders.len();
        Self {
            atoms,
            bonds,
            steps,
            bond_orders: bond_orders.to_vec(),
            node_weights: vec![0.0; atoms * node_feature_dim(atoms, bonds)],
            node_bias: vec![0.0; atoms],
            edge_weights: vec![0.0; bonds * edge_feature_dim(atoms, bonds)],
            edge_bias: vec![0.0; bonds],
        }
    }

    pub fn node_dim(&self) -> usize {
        node_feature_dim(self.atoms, self.bonds)
    }

    pub fn edge_dim(&self) -> usize {
        edge_feature_dim(self.atoms, self.bonds)
    }

    /// All parameters as one flat slice-ordered vector (node W, node b, edge W, edge b).
    pub fn flatten(&self) -> Vec<f64> {
        [&self.node_weights[..], &self.node_bias, &self.edge_weights, &self.edge_bias].concat()
    }

    pub fn unflatten(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut rest = flat;
        for dst in [&mut out.node_weights, &mut out.node_bias, &mut out.edge_weights, &mut out.edge_bias] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// Plain-text checkpoint with a dimensions header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("molguide-softmax-denoiser v1\n");
        let _ = writeln!(
            out,
            "dims atoms={} bonds={} node_features={} edge_features={} steps={}",
            self.atoms,
            self.bonds,
            self.node_dim(),
            self.edge_dim(),
            self.steps
        );
        let orders: Vec<String> = self.bond_orders.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "bond_orders {}", orders.join(" "));
        let mut block = |name: &str, data: &[f64], cols: usize| {
            let _ = writeln!(out, "{name} {} {cols}", data.len() / cols);
            for row in data.chunks(cols) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        };
        block("node_weights", &self.node_weights, self.node_dim());
        block("node_bias", &self.node_bias, self.atoms);
        block("edge_weights", &self.edge_weights, self.edge_dim());
        block("edge_bias", &self.edge_bias, self.bonds);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next =
            |what: &str| lines.next().ok_or_else(|| Error::Parse { line: 0, message: format!("missing {what}") });
        let (ln, magic) = next("header")?;
        if magic.trim() != "molguide-softmax-denoiser v1" {
            return Err(Error::Parse { line: ln + 1, message: "not a v1 denoiser checkpoint".into() });
        }
        let (ln, dims) = next("dims")?;
        let mut kv = BTreeMap::new();
        for tok in dims.split_whitespace().skip(1) {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: ln + 1, message: format!("bad dims entry `{tok}`") })?;
            let v: usize =
                v.parse().map_err(|_| Error::Parse { line: ln + 1, message: format!("bad dims value `{tok}`") })?;
            kv.insert(k.to_string(), v);
        }
        let get = |k: &str| {
            kv.get(k).copied().ok_or_else(|| Error::Parse { line: ln + 1, message: format!("missing `{k}`") })
        };
        let (ln, orders) = next("bond_orders")?;
        let orders = orders
            .strip_prefix("bond_orders")
            .ok_or_else(|| Error::Parse { line: ln + 1, message: "expected `bond_orders`".into() })?
            .split_whitespace()
            .map(str::parse::<u32>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: ln + 1, message: e.to_string() })?;
        if orders.len() != get("bonds")? {
            return Err(Error::Parse { line: ln + 1, message: "bond order count mismatch".into() });
        }
        let mut params = Self::zeros(get("atoms")?, &orders, get("steps")?);
        if get("node_features")? != params.node_dim() || get("edge_features")? != params.edge_dim() {
            return Err(Error::Parse { line: ln + 1, message: "feature dimensions do not match".into() });
        }
        let shapes = [
            ("node_weights", params.atoms, params.node_dim()),
            ("node_bias", 1, params.atoms),
            ("edge_weights", params.bonds, params.edge_dim()),
            ("edge_bias", 1, params.bonds),
        ];
        let mut blocks = Vec::new();
        for (name, rows, cols) in shapes {
            let (ln, head) = next(name)?;
            let want = format!("{name} {rows} {cols}");
            if head.trim() != want {
                return Err(Error::Parse { line: ln + 1, message: format!("expected `{want}`") });
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = next(name)?;
                let vals = row
                    .split_whitespace()
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse { line: ln + 1, message: e.to_string() })?;
                if vals.len() != cols {
                    return Err(Error::Parse { line: ln + 1, message: format!("expected {cols} values") });
                }
                data.extend(vals);
            }
            blocks.push(data);
        }
        let mut it = blocks.into_iter();
        params.node_weights = it.next().unwrap();
        params.node_bias = it.next().unwrap();
        params.edge_weights = it.next().unwrap();
        params.edge_bias = it.next().unwrap();
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn softmax_into(weights: &[f64], bias: &[f64], features: &[f64], out: &mut [f64]) {
    let d = features.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = bias[k] + weights[k * d..(k + 1) * d].iter().zip(features).map(|(w, f)| w * f).sum::<f64>();
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Independent softmax predictions for every node and upper-triangle edge.
pub fn softmax_denoise(gt: &GraphState, t: usize, params: &SoftmaxDenoiserParams) -> DenoiserOutput {
    let (n, a, b) = (gt.n(), params.atoms, params.bonds);
    let mut x = vec![0.0; n * a];
    for i in 0..n {
        let f = node_features(gt, i, t, params.steps, &params.bond_orders);
        softmax_into(&params.node_weights, &params.node_bias, &f, &mut x[i * a..(i + 1) * a]);
    }
    let mut upper = vec![0.0; n * n.saturating_sub(1) / 2 * b];
    let mut p = 0;
    for i in 0..n {
        for j in i + 1..n {
            let f = edge_features(gt, i, j, t, params.steps);
            softmax_into(&params.edge_weights, &params.edge_bias, &f, &mut upper[p * b..(p + 1) * b]);
            p += 1;
        }
    }
    DenoiserOutput::new(assemble(n, a, b, x, &upper))
}

/// A noisy training triple with its features precomputed.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    node_features: Vec<Vec<f64>>,
    node_targets: Vec<usize>,
    edge_features: Vec<Vec<f64>>,
    edge_targets: Vec<usize>,
}

impl TrainingExample {
    pub fn new(clean: &GraphState, noisy: &GraphState, t: usize, steps: usize, bond_orders: &[u32]) -> Self {
        let n = clean.n();
        let mut edge_features = Vec::new();
        let mut edge_targets = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edge_features.push(self::edge_features(noisy, i, j, t, steps));
                edge_targets.push(clean.edge_type(i, j));
            }
        }
        Self {
            node_features: (0..n).map(|i| node_features(noisy, i, t, steps, bond_orders)).collect(),
            node_targets: clean.atom_types(),
            edge_features,
            edge_targets,
        }
    }
}

/// Mean cross-entropy `Σ_i l(x_i, p̂_i) + γ Σ_{i<j} l(e_ij, p̂_ij)` over the
/// examples, with its exact gradient (softmax output minus one-hot target,
/// pushed through the linear map).
pub fn objective(
    params: &SoftmaxDenoiserParams,
    examples: &[TrainingExample],
    gamma: f64,
) -> (f64, SoftmaxDenoiserParams) {
    let mut grad = SoftmaxDenoiserParams::zeros(params.atoms, &params.bond_orders, params.steps);
    let mut loss = 0.0;
    let mut probs_x = vec![0.0; params.atoms];
    let mut probs_e = vec![0.0; params.bonds];
    let scale = 1.0 / examples.len().max(1) as f64;
    let dx = params.node_dim();
    let de = params.edge_dim();
    for ex in examples {
        for (f, &y) in ex.node_features.iter().zip(&ex.node_targets) {
            softmax_into(&params.node_weights, &params.node_bias, f, &mut probs_x);
            loss -= probs_x[y].ln() * scale;
            for (k, &pk) in probs_x.iter().enumerate() {
                let g = (pk - if k == y { 1.0 } else { 0.0 }) * scale;
                grad.node_bias[k] += g;
                for (w, fv) in grad.node_weights[k * dx..(k + 1) * dx].iter_mut().zip(f) {
                    *w += g * fv;
                }
            }
        }
        if gamma == 0.0 {
            continue;
        }
        for (f, &y) in ex.edge_features.iter().zip(&ex.edge_targets) {
            softmax_into(&params.edge_weights, &params.edge_bias, f, &mut probs_e);
            loss -= gamma * probs_e[y].ln() * scale;
            for (k, &pk) in probs_e.iter().enumerate() {
                let g = gamma * (pk - if k == y { 1.0 } else { 0.0 }) * scale;
                grad.edge_bias[k] += g;
                for (w, fv) in grad.edge_weights[k * de..(k + 1) * de].iter_mut().zip(f) {
                    *w += g * fv;
                }
            }
        }
    }
    (loss, grad)
}

/// Cross-entropy of the marginal baseline on the same examples.
pub fn marginal_objective(examples: &[TrainingExample], m_x: &[f64], m_e: &[f64], gamma: f64) -> f64 {
    let scale = 1.0 / examples.len().max(1) as f64;
    examples
        .iter()
        .map(|ex| {
            let nodes: f64 = ex.node_targets.iter().map(|&y| -m_x[y].ln()).sum();
            let edges: f64 = ex.edge_targets.iter().map(|&y| -m_e[y].ln()).sum();
            (nodes + gamma * edges) * scale
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Edge-loss weight γ.
    pub gamma: f64,
    pub epochs: usize,
    pub learn_rate: f64,
    /// Mini-batch size in examples; 0 means full batch.
    pub batch: usize,
    /// Noisy draws `(t, G^t)` per dataset graph, fixed for the whole run.
    pub draws_per_graph: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { gamma: 5.0, epochs: 200, learn_rate: 0.01, batch: 0, draws_per_graph: 8, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub params: SoftmaxDenoiserParams,
    /// Objective over the full example set: `history[0]` before training,
    /// `history[e]` after epoch `e`.
    pub history: Vec<f64>,
    pub examples: Vec<TrainingExample>,
}

/// Draws the fixed `(graph, t, G^t)` training triples.
pub fn training_examples(
    ds: &GraphDataset,
    nm: &NoiseModel,
    draws_per_graph: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingExample>> {
    let steps = nm.steps();
    let orders = ds.vocab().bonds.orders();
    let mut out = Vec::with_capacity(ds.len() * draws_per_graph);
    for g in ds.graphs() {
        for _ in 0..draws_per_graph {
            let t = rng.gen_range(1..=steps);
            let noisy = nm.forward_noise(g, t, rng)?;
            out.push(TrainingExample::new(g, &noisy, t, steps, orders));
        }
    }
    Ok(out)
}

/// Mini-batch gradient descent on the cross-entropy objective.
pub fn train_softmax_denoiser(ds: &GraphDataset, nm: &NoiseModel, cfg: &TrainConfig) -> Result<TrainedDenoiser> {
    if !(cfg.gamma >= 0.0) || cfg.epochs == 0 || cfg.draws_per_graph == 0 {
        return Err(Error::Config("need gamma ≥ 0, epochs ≥ 1 and draws_per_graph ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let examples = training_examples(ds, nm, cfg.draws_per_graph, &mut rng)?;
    let (m_x, m_e) = compute_marginals(ds)?;
    let mut params = SoftmaxDenoiserParams::zeros(ds.vocab().atom_count(), ds.vocab().bonds.orders(), nm.steps());
    // Start at the marginal baseline so epoch 0 already matches it.
    for (b, m) in params.node_bias.iter_mut().zip(&m_x) {
        *b = m.max(1e-6).ln();
    }
    for (b, m) in params.edge_bias.iter_mut().zip(&m_e) {
        *b = m.max(1e-6).ln();
    }
    let batch = if cfg.batch == 0 { examples.len() } else { cfg.batch.min(examples.len()) };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = vec![objective(&params, &examples, cfg.gamma).0];
    for epoch in 1..=cfg.epochs {
        if batch < examples.len() {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let mb: Vec<TrainingExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grad) = objective(&params, &mb, cfg.gamma);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let mut flat = params.flatten();
            for (p, g) in flat.iter_mut().zip(grad.flatten()) {
                *p -= cfg.learn_rate * g;
            }
            params = params.unflatten(&flat);
        }
        let loss = objective(&params, &examples, cfg.gamma).0;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        log::debug!("epoch {epoch}: cross-entropy {loss:.6}");
        history.push(loss);
    }
    Ok(TrainedDenoiser { params, history, examples })
}

/// Denoiser selection shared by the sampler and harness.
#[derive(Debug, Clone)]
pub enum Denoiser {
    /// Exact dataset posterior; falls back to the marginals when the dataset
    /// has no graph of the requested size or none explains the observation.
    Bayes {
        oracle: BayesDenoiser,
        m_x: Vec<f64>,
        m_e: Vec<f64>,
    },
    Softmax(SoftmaxDenoiserParams),
    Marginal {
        m_x: Vec<f64>,
        m_e: Vec<f64>,
    },
}

impl Denoiser {
    pub fn bayes(ds: &GraphDataset, perms: usize, seed: u64) -> Result<Self> {
        let (m_x, m_e) = compute_marginals(ds)?;
        Ok(Self::Bayes { oracle: BayesDenoiser::with_permutations(ds, perms, seed), m_x, m_e })
    }

    pub fn marginal(ds: &GraphDataset) -> Result<Self> {
        let (m_x, m_e) = compute_marginals(ds)?;
        Ok(Self::Marginal { m_x, m_e })
    }

    pub fn denoise(&self, gt: &GraphState, t: usize, nm: &NoiseModel) -> Result<DenoiserOutput> {
        match self {
            Denoiser::Bayes { oracle, m_x, m_e } => match oracle.denoise(gt, t, nm) {
                Ok(out) => Ok(out),
                Err(e @ (Error::NoSizeMatch(_) | Error::ZeroEvidence(_))) => {
                    if !oracle.warned.swap(true, Ordering::Relaxed) {
                        log::warn!("{e}; falling back to marginal predictions");
                    }
                    Ok(marginal_denoise(gt, m_x, m_e))
                }
                Err(e) => Err(e),
            },
            Denoiser::Softmax(params) => Ok(softmax_denoise(gt, t, params)),
            Denoiser::Marginal { m_x, m_e } => Ok(marginal_denoise(gt, m_x, m_e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseSchedule;
    use crate::vocab::qm9_heavy_vocab;

    fn half_noise_model(m_x: &[f64], m_e: &[f64]) -> NoiseModel {
        NoiseModel::new(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap(), m_x, m_e).unwrap()
    }

    #[test]
    fn bayes_single_atom_hand_computation() {
        let v = qm9_heavy_vocab();
        let ds = GraphDataset::parse("1;C;\n1;O;\n", &v).unwrap();
        let nm = half_noise_model(&[0.25, 0.25, 0.25, 0.25], &[1.0, 0.0, 0.0, 0.0]);
        let gt = GraphState::from_discrete(&[0], &[], 4, 4).unwrap();
        let out = bayes_denoise(&gt, 1, &ds, &nm).unwrap();
        // q(C|C) = 0.625, q(C|O) = 0.125 → [5/6, 1/6]
        let want = [5.0 / 6.0, 0.0, 1.0 / 6.0, 0.0];
        for (p, w) in out.node_row(0).iter().zip(want) {
            assert!((p - w).abs() < 1e-12);
        }
    }

    #[test]
    fn bayes_noise_free_is_indicator() {
        let v = qm9_heavy_vocab();
        let ds = GraphDataset::parse("2;C,O;0,1,1\n2;C,C;\n2;N,O;0,1,2\n", &v).unwrap();
        let nm = NoiseModel::new(
            NoiseSchedule::from_alpha_bar(vec![1.0, 1.0, 0.3]).unwrap(),
            &[0.4, 0.3, 0.2, 0.1],
            &[0.5, 0.3, 0.1, 0.1],
        )
        .unwrap();
        let gt = ds.graphs()[2].clone();
        let out = bayes_denoise(&gt, 1, &ds, &nm).unwrap();
        assert_eq!(out.probs.argmax_discrete(), gt);
        assert_eq!(out.node_row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(out.edge_fiber(1, 0), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn bayes_requires_size_match() {
        let v = qm9_heavy_vocab();
        let ds = GraphDataset::parse("1;C;\n", &v).unwrap();
        let nm = half_noise_model(&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]);
        let gt = GraphState::from_discrete(&[0, 0], &[], 4, 4).unwrap();
        assert!(matches!(bayes_denoise(&gt, 1, &ds, &nm), Err(Error::NoSizeMatch(2))));
        let dn = Denoiser::bayes(&ds, 1, 0).unwrap();
        let out = dn.denoise(&gt, 1, &nm).unwrap();
        assert_eq!(out.node_row(1), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn marginal_baseline_ignores_input() {
        let m_x = [0.7, 0.1, 0.15, 0.05];
        let m_e = [0.6, 0.3, 0.08, 0.02];
        let g1 = GraphState::from_discrete(&[0, 1, 2], &[(0, 1, 1)], 4, 4).unwrap();
        let g2 = GraphState::from_discrete(&[3, 3, 3], &[(1, 2, 2)], 4, 4).unwrap();
        let o1 = marginal_denoise(&g1, &m_x, &m_e);
        assert_eq!(o1, marginal_denoise(&g2, &m_x, &m_e));
        for i in 0..3 {
            assert_eq!(o1.node_row(i), &m_x);
        }
        o1.validate().unwrap();
    }

    #[test]
    fn node_features_for_isolated_atom() {
        let g = GraphState::from_discrete(&[2], &[], 4, 4).unwrap();
        let f = node_features(&g, 0, 50, 100, &[0, 1, 2, 3]);
        assert_eq!(f.len(), 13);
        let mut want = vec![0.0; 13];
        want[2] = 1.0;
        want[12] = 0.5;
        assert_eq!(f, want);
    }

    #[test]
    fn node_features_aggregate_neighbours() {
        // C(0) =O(1), C(0) -N(2)
        let g = GraphState::from_discrete(&[0, 2, 1], &[(0, 1, 2), (0, 2, 1)], 4, 4).unwrap();
        let f = node_features(&g, 0, 10, 10, &[0, 1, 2, 3]);
        assert_eq!(&f[4..8], &[0.0, 0.5, 0.5, 0.0]);
        let third = 1.0 / 3.0;
        assert!((f[8 + 2] - 2.0 * third).abs() < 1e-15);
        assert!((f[8 + 1] - third).abs() < 1e-15);
        assert_eq!(f[12], 1.0);
    }

    #[test]
    fn zero_params_give_uniform_rows() {
        let p = SoftmaxDenoiserParams::zeros(4, &[0, 1, 2, 3], 10);
        let g = GraphState::from_discrete(&[0, 1, 2], &[(0, 1, 1)], 4, 4).unwrap();
        let out = softmax_denoise(&g, 3, &p);
        out.validate().unwrap();
        assert_eq!(out.node_row(1), &[0.25; 4]);
        assert_eq!(out.edge_fiber(0, 2), &[0.25; 4]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = SoftmaxDenoiserParams::zeros(4, &[0, 1, 2, 3], 100);
        let flat: Vec<f64> = (0..p.flatten().len()).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        p = p.unflatten(&flat);
        let back = SoftmaxDenoiserParams::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        assert!(SoftmaxDenoiserParams::from_text("garbage\n").is_err());
    }

    #[test]
    fn gamma_zero_leaves_edge_gradient_empty() {
        let v = qm9_heavy_vocab();
        let ds = GraphDataset::parse("3;C,C,O;0,1,1 1,2,1\n2;N,C;0,1,3\n", &v).unwrap();
        let nm =
            NoiseModel::new(NoiseSchedule::cosine(20, 0.008).unwrap(), &[0.5, 0.2, 0.2, 0.1], &[0.4, 0.4, 0.1, 0.1])
                .unwrap();
        let ex = training_examples(&ds, &nm, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = SoftmaxDenoiserParams::zeros(4, &[0, 1, 2, 3], 20);
        let (_, g) = objective(&p, &ex, 0.0);
        assert!(g.edge_weights.iter().chain(&g.edge_bias).all(|&v| v == 0.0));
        assert!(g.node_bias.iter().any(|&v| v != 0.0));
    }
}
