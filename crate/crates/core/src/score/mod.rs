//! Score models: closed-form Gaussian and mixture priors, and a trainable
//! MLP, behind one evaluation + vector-Jacobian-product interface.

mod analytic;
mod mlp;
mod persist;
mod train;

pub use analytic::{GaussianPrior, GmmComponent, GmmPrior};
pub use mlp::{Activation, GaussianSkip, Layer, MlpScore, TIME_FEATURES};
pub use persist::{load_mlp, read_mlp, save_mlp, write_mlp, MODEL_MAGIC, MODEL_VERSION};
pub use train::{dsm_train, dsm_train_monitored, init_model, Optimizer, TrainConfig, TrainReport};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SignalGrid;
use crate::schedule::NoiseSchedule;

/// Anything that approximates `grad log p_i(x)` and can pull a cotangent
/// back through that map.
pub trait Score: Send + Sync {
    fn domain(&self) -> &[usize];

    fn score_eval(&self, x: &SignalGrid, i: usize, sched: &NoiseSchedule) -> Result<SignalGrid>;

    /// `cotangent^T (d score / d x)` at `x`.
    fn score_vjp(&self, x: &SignalGrid, i: usize, sched: &NoiseSchedule, cotangent: &SignalGrid) -> Result<SignalGrid>;
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScoreModel {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
    Mlp(MlpScore),
}

/// JSON form of the closed-form models.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnalyticModel {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
}

impl ScoreModel {
    pub fn kind(&self) -> &'static str {
        match self {
            ScoreModel::Gaussian(_) => "gaussian",
            ScoreModel::Gmm(_) => "gmm",
            ScoreModel::Mlp(_) => "mlp",
        }
    }

    /// Loads either a binary network file or a JSON analytic prior.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(MODEL_MAGIC) {
            return Ok(ScoreModel::Mlp(read_mlp(&mut bytes.as_slice())?));
        }
        let analytic: AnalyticModel =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(match analytic {
            AnalyticModel::Gaussian(g) => ScoreModel::Gaussian(g),
            AnalyticModel::Gmm(g) => ScoreModel::Gmm(g),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            ScoreModel::Mlp(m) => save_mlp(m, path),
            ScoreModel::Gaussian(g) => {
                let json = serde_json::to_vec_pretty(&AnalyticModel::Gaussian(g.clone()))?;
                Ok(std::fs::write(path, json)?)
            }
            ScoreModel::Gmm(g) => {
                let json = serde_json::to_vec_pretty(&AnalyticModel::Gmm(g.clone()))?;
                Ok(std::fs::write(path, json)?)
            }
        }
    }
}

impl Score for ScoreModel {
    fn domain(&self) -> &[usize] {
        match self {
            ScoreModel::Gaussian(g) => &g.shape,
            ScoreModel::Gmm(g) => &g.shape,
            ScoreModel::Mlp(m) => &m.shape,
        }
    }

    fn score_eval(&self, x: &SignalGrid, i: usize, sched: &NoiseSchedule) -> Result<SignalGrid> {
        match self {
            ScoreModel::Gaussian(g) => g.score(x, i, sched),
            ScoreModel::Gmm(g) => g.score(x, i, sched),
            ScoreModel::Mlp(m) => m.score(x, i, sched),
        }
    }

    fn score_vjp(&self, x: &SignalGrid, i: usize, sched: &NoiseSchedule, cotangent: &SignalGrid) -> Result<SignalGrid> {
        match self {
            ScoreModel::Gaussian(g) => g.score_vjp(x, i, sched, cotangent),
            ScoreModel::Gmm(g) => g.score_vjp(x, i, sched, cotangent),
            ScoreModel::Mlp(m) => m.score_vjp(x, i, sched, cotangent),
        }
    }
}

impl From<GaussianPrior> for ScoreModel {
    fn from(g: GaussianPrior) -> Self {
        ScoreModel::Gaussian(g)
    }
}

impl From<GmmPrior> for ScoreModel {
    fn from(g: GmmPrior) -> Self {
        ScoreModel::Gmm(g)
    }
}

impl From<MlpScore> for ScoreModel {
    fn from(m: MlpScore) -> Self {
        ScoreModel::Mlp(m)
    }
}
