//! A trained model of any method, with prediction and persistence.

use rand::Rng;

use super::{HarnessError, Method};
use crate::autodiff::Tensor;
use crate::data::{Dataset, Task};
use crate::networks::{Link, Network};
use crate::variational::{
    predictive_classification, predictive_regression_closed_form, predictive_regression_mc,
    CategoricalPrediction, RegressionHead, VariationalOutput,
};
use crate::vi::{base_forward, base_predict_classification, vi_predict_classification, vi_predict_regression, GaussianWeights};

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Vifo(Network),
    Vi(GaussianWeights),
    Base(GaussianWeights),
}

impl Model {
    pub fn method(&self) -> Method {
        match self {
            Model::Vifo(_) => Method::Vifo,
            Model::Vi(_) => Method::Vi,
            Model::Base(_) => Method::Base,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Model::Vifo(n) => n.spec().output_dim,
            Model::Vi(w) | Model::Base(w) => w.spec().output_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Vifo(n) => n.spec().input_dim,
            Model::Vi(w) | Model::Base(w) => w.spec().input_dim,
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        match self {
            Model::Vifo(n) => n.param_count(),
            Model::Vi(w) => 2 * w.weight_count(),
            Model::Base(w) => w.weight_count(),
        }
    }

    /// Every trainable scalar in a fixed order, for exact comparisons.
    pub fn flat_params(&self) -> Vec<f64> {
        let tensors: Vec<&Tensor> = match self {
            Model::Vifo(n) => n.params().iter().collect(),
            Model::Vi(w) => w.params(),
            Model::Base(w) => w.mean().iter().collect(),
        };
        tensors.into_iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Model::Vifo(n) => n.is_finite(),
            Model::Vi(w) | Model::Base(w) => w.is_finite(),
        }
    }

    fn check(&self, data: &Dataset) -> Result<(), HarnessError> {
        if self.output_dim() != data.output_dim() {
            return Err(HarnessError::OutputMismatch { model: self.output_dim(), data: data.output_dim() });
        }
        if self.input_dim() != data.d() {
            return Err(HarnessError::Invalid(format!(
                "model expects {} features, dataset has {}",
                self.input_dim(),
                data.d()
            )));
        }
        Ok(())
    }

    /// Class predictions for the rows of `x`, with `m` Monte-Carlo draws where the method samples.
    pub fn predict_classification<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<CategoricalPrediction>, HarnessError> {
        Ok(match self {
            Model::Vifo(net) => {
                let (mu, s2) = net.forward_heads(x)?;
                (0..x.rows())
                    .map(|i| predictive_classification(&VariationalOutput::from_rows(&mu, &s2, i), m, rng))
                    .collect()
            }
            Model::Vi(w) => vi_predict_classification(w, x, m, rng),
            Model::Base(w) => base_predict_classification(w, x),
        })
    }

    /// Predictive `(mean, variance)` of `y` for the rows of `x`.
    pub fn predict_regression<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<(f64, f64)>, HarnessError> {
        Ok(match self {
            Model::Vifo(net) => {
                let link = net.spec().noise_link;
                let (mu, s2) = net.forward_heads(x)?;
                (0..x.rows())
                    .map(|i| {
                        let h = RegressionHead {
                            mu_m: mu.get2(i, 0),
                            sigma2_m: s2.get2(i, 0),
                            mu_l: mu.get2(i, 1),
                            sigma2_l: s2.get2(i, 1),
                        };
                        if link == Link::Exp {
                            predictive_regression_closed_form(&h, link).expect("exp link")
                        } else {
                            predictive_regression_mc(&h, link, m, rng)
                        }
                    })
                    .collect()
            }
            Model::Vi(w) => vi_predict_regression(w, x, m, rng),
            Model::Base(w) => {
                let out = base_forward(w, x);
                (0..x.rows())
                    .map(|i| (out.get2(i, 0), w.spec().noise_link.apply(out.get2(i, 1))))
                    .collect()
            }
        })
    }

    pub fn predict_dataset_classification<R: Rng + ?Sized>(
        &self,
        data: &Dataset,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<CategoricalPrediction>, HarnessError> {
        if !matches!(data.task(), Task::Classification { .. }) {
            return Err(HarnessError::Invalid("dataset is not a classification task".into()));
        }
        self.check(data)?;
        self.predict_classification(data.x(), m, rng)
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        let inner = match self {
            Model::Vifo(n) => n.to_json()?,
            Model::Vi(w) | Model::Base(w) => w.to_json()?,
        };
        let value = serde_json::json!({
            "method": self.method().as_str(),
            "model": serde_json::from_str::<serde_json::Value>(&inner)?,
        });
        Ok(serde_json::to_string(&value)?)
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let value: serde_json::Value = serde_json::from_str(s)?;
        let method: Method = serde_json::from_value(value.get("method").cloned().unwrap_or_default())?;
        let inner = value
            .get("model")
            .ok_or_else(|| HarnessError::Invalid("model file lacks a `model` member".into()))?
            .to_string();
        Ok(match method {
            Method::Vifo => Model::Vifo(Network::from_json(&inner)?),
            Method::Vi => Model::Vi(GaussianWeights::from_json(&inner)?),
            Method::Base => Model::Base(GaussianWeights::from_json(&inner)?),
        })
    }
}
