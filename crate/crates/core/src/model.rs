use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Binder, Graph, Mat, ParamStore, Var};
use crate::ccr::{AggregatorKind, CounterfactualStrategy};
use crate::error::{CcrError, Result};
use crate::fusion::FusionConfig;
use crate::proposals::NegativeMining;
use crate::rng::{rng_for, stream};

pub const MU_PARAM: &str = "ccr.mu";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcrConfig {
    /// When false the model reconstructs from the aggregated logits only
    /// and no counterfactual subtraction takes place.
    pub enabled: bool,
    pub strategy: CounterfactualStrategy,
    pub aggregator: AggregatorKind,
}

impl Default for CcrConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            strategy: CounterfactualStrategy::Uniform,
            aggregator: AggregatorKind::SigmoidGate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub mining: NegativeMining,
    pub ccr: CcrConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        let m = &self.mining;
        if !(m.delta > 0.0 && m.eps > 0.0 && m.eps < 0.5 && m.min_width > 0.0) {
            return Err(CcrError::Config(format!("invalid negative mining {m:?}")));
        }
        Ok(())
    }
}

/// Parameters plus the configuration that gives them meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(&[seed, stream::INIT]);
        let mut params = ParamStore::new();
        crate::fusion::init_params(&config.fusion, &mut params, &mut rng);
        crate::ccr::init_params(&config.ccr, config.fusion.vocab_size, &mut params);
        Ok(Self { config, params })
    }

    pub fn mu(&self) -> f64 {
        self.params.get(MU_PARAM).expect("mu exists").item()
    }

    pub fn set_mu(&mut self, mu: f64) {
        *self.params.get_mut(MU_PARAM).expect("mu exists") = Mat::scalar(mu);
    }

    pub fn mu_slot(&self) -> usize {
        self.params.slot(MU_PARAM).expect("mu exists")
    }

    /// Slots trained by the main objective: everything except `mu`.
    pub fn main_slots(&self) -> Vec<usize> {
        let mu = self.mu_slot();
        (0..self.params.len()).filter(|&s| s != mu).collect()
    }
}

/// Xavier-uniform `rows x cols`.
pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Mat::from_vec(rows, cols, data).expect("shape")
}

pub(crate) fn uniform(rows: usize, cols: usize, a: f64, rng: &mut ChaCha8Rng) -> Mat {
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Mat::from_vec(rows, cols, data).expect("shape")
}

/// A graph under construction with its parameter bindings.
pub struct Ctx<'a> {
    pub g: Graph,
    pub params: Binder<'a>,
    /// Constant copies of the same parameters, for paths that must not
    /// propagate gradient into them.
    pub frozen: Binder<'a>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Ctx<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            params: Binder::new(store),
            frozen: Binder::frozen(store),
            dropout: None,
        }
    }

    pub fn train(store: &'a ParamStore, dropout: f64, rng: ChaCha8Rng) -> Self {
        Self {
            dropout: (dropout > 0.0).then_some((dropout, rng)),
            ..Self::eval(store)
        }
    }

    pub fn param(&mut self, name: &str) -> Var {
        self.params.bind(&mut self.g, name)
    }

    pub fn frozen_param(&mut self, name: &str) -> Var {
        self.frozen.bind(&mut self.g, name)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let (rows, cols) = self.g.value(x).shape();
        let keep = 1.0 - *p;
        let mask = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = self.g.constant(Mat::from_vec(rows, cols, mask).expect("shape"));
        self.g.mul(x, mask)
    }
}
