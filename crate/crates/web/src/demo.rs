use molguide::dataset::{compute_marginals, generate_synthetic_dataset, GraphDataset};
use molguide::denoiser::{Denoiser, DenoiserOutput};
use molguide::graph::GraphState;
use molguide::guidance::{apply_guidance_with, loss_and_gradient, GradientProjection, GuidanceSpec, PropertyFunction};
use molguide::harness::{summarize_cell, Generator, NodeCount};
use molguide::noise::{NoiseModel, NoiseSchedule, DEFAULT_COSINE_S};
use molguide::sampler::{Guide, GuidePlacement};
use molguide::validity::{check_validity, write_sdf};
use molguide::vocab::qm9_heavy_vocab;
use molguide::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MAX_STEPS: usize = 200;
pub const MAX_SAMPLES: usize = 64;

#[derive(Debug, Serialize)]
pub struct SchedulePoint {
    pub t: usize,
    pub alpha_bar: f64,
    /// Probability that a clean carbon is still carbon at step `t`.
    pub carbon_kept: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SampleRequest {
    /// `none`, `proportion` (carbon fraction) or `weight`.
    pub guide: String,
    #[serde(default)]
    pub target: f64,
    #[serde(default)]
    pub lambda: f64,
    pub count: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub at_xtm1: bool,
}

#[derive(Debug, Serialize)]
pub struct Molecule {
    pub atoms: Vec<String>,
    /// `(i, j, bond order)` with `i < j`.
    pub bonds: Vec<(usize, usize, u32)>,
    pub property: f64,
    pub valid: bool,
}

#[derive(Debug, Serialize)]
pub struct SampleResponse {
    pub property: String,
    pub mean: f64,
    pub std: f64,
    pub pct_valid: f64,
    pub molecules: Vec<Molecule>,
    pub sdf: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RowRequest {
    /// Unnormalized atom-type weights for C, N, O, F.
    pub row: Vec<f64>,
    /// `proportion` (carbon fraction) or `weight`.
    pub guide: String,
    pub target: f64,
    pub lambda: f64,
}

#[derive(Debug, Serialize)]
pub struct RowResponse {
    pub symbols: Vec<String>,
    pub input: Vec<f64>,
    pub gradient: Vec<f64>,
    pub tangent: Vec<f64>,
    pub raw: Vec<f64>,
}

/// A synthetic dataset and its marginals, shared by every request.
pub struct DemoSession {
    dataset: GraphDataset,
    denoiser: Denoiser,
    m_x: Vec<f64>,
    m_e: Vec<f64>,
}

fn guide_function(name: &str) -> Result<Option<PropertyFunction>> {
    match name {
        "none" => Ok(None),
        "proportion" => Ok(Some(PropertyFunction::AtomProportion { atom: 0 })),
        "weight" => Ok(Some(PropertyFunction::MolecularWeight)),
        other => Err(Error::Config(format!("unknown guide `{other}`"))),
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 || steps > MAX_STEPS {
        return Err(Error::Config(format!("steps must be in 1..={MAX_STEPS}")));
    }
    Ok(())
}

impl DemoSession {
    pub fn new(seed: u64) -> Result<Self> {
        let dataset = generate_synthetic_dataset(&qm9_heavy_vocab(), 300, 6, seed)?;
        let (m_x, m_e) = compute_marginals(&dataset)?;
        let denoiser = Denoiser::bayes(&dataset, 1, seed)?;
        Ok(Self { dataset, denoiser, m_x, m_e })
    }

    fn noise_model(&self, steps: usize) -> Result<NoiseModel> {
        check_steps(steps)?;
        NoiseModel::new(NoiseSchedule::cosine(steps, DEFAULT_COSINE_S)?, &self.m_x, &self.m_e)
    }

    pub fn schedule_curve(&self, steps: usize) -> Result<Vec<SchedulePoint>> {
        let nm = self.noise_model(steps)?;
        Ok((0..=steps)
            .map(|t| SchedulePoint { t, alpha_bar: nm.schedule().alpha_bar(t), carbon_kept: nm.qbar_x(t).get(0, 0) })
            .collect())
    }

    pub fn sample(&self, req: &SampleRequest) -> Result<SampleResponse> {
        if req.count == 0 || req.count > MAX_SAMPLES {
            return Err(Error::Config(format!("count must be in 1..={MAX_SAMPLES}")));
        }
        let nm = self.noise_model(req.steps)?;
        let function = guide_function(&req.guide)?;
        let guide = match function {
            Some(f) => Some(Guide {
                spec: GuidanceSpec::new(f, req.target, req.lambda, 1)?,
                placement: if req.at_xtm1 { GuidePlacement::Xtm1 } else { GuidePlacement::X0 },
            }),
            None => None,
        };
        let shown = function.unwrap_or(PropertyFunction::MolecularWeight);
        let gen =
            Generator { dataset: &self.dataset, noise: &nm, denoiser: &self.denoiser, nodes: NodeCount::FromDataset };
        let graphs = gen.batch(req.seed, req.count, guide.as_ref())?;
        let vocab = self.dataset.vocab();
        let row = summarize_cell(req.target, req.lambda, &graphs, shown, &self.dataset);
        let molecules = graphs
            .iter()
            .map(|g| Molecule {
                atoms: g.atom_types().iter().map(|&k| vocab.atoms.symbol(k).to_string()).collect(),
                bonds: g.bonds().into_iter().map(|(i, j, k)| (i, j, vocab.bonds.bond_order(k))).collect(),
                property: shown.eval(g, vocab),
                valid: check_validity(g, vocab).valid,
            })
            .collect();
        let sdf = write_sdf(graphs.iter().enumerate().map(|(i, g)| (g, format!("sample-{i}"))), vocab)?;
        Ok(SampleResponse {
            property: shown.name().to_string(),
            mean: row.prop_mean,
            std: row.prop_std,
            pct_valid: row.pct_valid,
            molecules,
            sdf,
        })
    }

    /// One guided update of a single atom row, under both gradient projections.
    pub fn guide_row(&self, req: &RowRequest) -> Result<RowResponse> {
        let vocab = self.dataset.vocab();
        let a = vocab.atom_count();
        if req.row.len() != a || req.row.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!("row needs {a} non-negative entries")));
        }
        let total: f64 = req.row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("row has no mass".into()));
        }
        let input: Vec<f64> = req.row.iter().map(|v| v / total).collect();
        let function = guide_function(&req.guide)?.ok_or_else(|| Error::Config("pick a property to guide".into()))?;
        let spec = GuidanceSpec::new(function, req.target, req.lambda, 1)?;
        let mut state = GraphState::filled(1, &input, &self.m_e);
        state.set_node_row(0, &input);
        let (_, grad) = loss_and_gradient(&state, &spec, vocab);
        let p_hat = DenoiserOutput::new(state);
        let step = |projection| apply_guidance_with(&p_hat, &grad, req.lambda, projection).node_row(0).to_vec();
        Ok(RowResponse {
            symbols: vocab.atoms.symbols().to_vec(),
            input,
            gradient: grad.node(0).to_vec(),
            tangent: step(GradientProjection::Tangent),
            raw: step(GradientProjection::Raw),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_starts_clean_and_ends_at_marginals() {
        let demo = DemoSession::new(1).unwrap();
        let curve = demo.schedule_curve(50).unwrap();
        assert_eq!(curve.len(), 51);
        assert_eq!(curve[0].carbon_kept, 1.0);
        assert!((curve[50].carbon_kept - demo.m_x[0]).abs() < 1e-3);
        assert!(curve.windows(2).all(|w| w[1].alpha_bar <= w[0].alpha_bar));
    }

    #[test]
    fn carbon_guidance_raises_the_carbon_fraction() {
        let demo = DemoSession::new(1).unwrap();
        let base = SampleRequest {
            guide: "proportion".into(),
            target: 1.0,
            lambda: 0.0,
            count: 32,
            steps: 50,
            seed: 4,
            at_xtm1: false,
        };
        let plain = demo.sample(&base).unwrap();
        let guided = demo.sample(&SampleRequest { lambda: 100.0, ..base.clone() }).unwrap();
        assert!(guided.mean > plain.mean);
        assert_eq!(guided.molecules.len(), 32);
        assert!(guided.sdf.matches("$$$$").count() == 32);
        let json = serde_json::to_string(&guided).unwrap();
        assert!(json.contains("\"atoms\""));
    }

    #[test]
    fn rejects_oversized_requests() {
        let demo = DemoSession::new(1).unwrap();
        let req = SampleRequest {
            guide: "none".into(),
            target: 0.0,
            lambda: 0.0,
            count: MAX_SAMPLES + 1,
            steps: 10,
            seed: 0,
            at_xtm1: false,
        };
        assert!(demo.sample(&req).is_err());
        assert!(demo.schedule_curve(MAX_STEPS + 1).is_err());
    }

    #[test]
    fn row_update_projections_differ_for_weight() {
        let demo = DemoSession::new(1).unwrap();
        let req = RowRequest { row: vec![1.0, 1.0, 7.0, 1.0], guide: "weight".into(), target: 12.0, lambda: 0.001 };
        let out = demo.guide_row(&req).unwrap();
        assert!(out.tangent[0] > out.input[0]);
        assert!(out.raw[0] < out.input[0]);
        for row in [&out.tangent, &out.raw] {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
