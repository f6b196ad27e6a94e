//! RMSprop with L2 regularization and an optional proximal pull toward the
//! round-start global weights.

use serde::{Deserialize, Serialize};

use super::network::ParameterSet;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default = "default_rms_decay")]
    pub rms_decay: f64,
    #[serde(default = "default_rms_epsilon")]
    pub rms_epsilon: f64,
    #[serde(default)]
    pub l2_coefficient: f64,
    /// Proximal penalty coefficient; 0 disables the term.
    #[serde(default)]
    pub prox_mu: f64,
}

fn default_rms_decay() -> f64 {
    0.9
}

fn default_rms_epsilon() -> f64 {
    1e-7
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            rms_decay: default_rms_decay(),
            rms_epsilon: default_rms_epsilon(),
            l2_coefficient: 1e-4,
            prox_mu: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("optimizer.learning_rate must be > 0".into()));
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return Err(Error::Config("optimizer.rms_decay must be in (0, 1)".into()));
        }
        if !(self.rms_epsilon > 0.0) {
            return Err(Error::Config("optimizer.rms_epsilon must be > 0".into()));
        }
        if self.l2_coefficient < 0.0 {
            return Err(Error::Config("optimizer.l2_coefficient must be >= 0".into()));
        }
        if self.prox_mu < 0.0 {
            return Err(Error::Config("optimizer.prox_mu must be >= 0".into()));
        }
        Ok(())
    }
}

/// One RMSprop update over all trainable tensors.
///
/// Effective gradient is `grad + l2 * w + mu * (w - anchor)`; the squared
/// running average is `rms <- decay * rms + (1 - decay) * g^2` and weights
/// move by `-lr * g / sqrt(rms + eps)`. Gradients are cleared afterwards.
/// `anchor` must be present exactly when `mu > 0` (it holds the round-start
/// global weights).
pub fn rmsprop_step<F: Real>(
    params: &mut ParameterSet<F>,
    opt: &OptimizerConfig,
    anchor: Option<&ParameterSet<F>>,
) -> Result<()> {
    if opt.prox_mu > 0.0 && anchor.is_none() {
        return Err(Error::Config(format!(
            "prox_mu={} requires the round-start anchor parameters",
            opt.prox_mu
        )));
    }
    if let Some(a) = anchor {
        if a.layers.len() != params.layers.len() {
            return Err(Error::shape(
                "rmsprop anchor",
                params.layers.len(),
                a.layers.len(),
            ));
        }
    }
    let lr = F::from_f64_c(opt.learning_rate);
    let decay = F::from_f64_c(opt.rms_decay);
    let one_minus = F::one() - decay;
    let eps = F::from_f64_c(opt.rms_epsilon);
    let l2 = F::from_f64_c(opt.l2_coefficient);
    let mu = F::from_f64_c(opt.prox_mu);

    for ti in 0..params.layers.len() {
        for vi in 0..params.layers[ti].numel() {
            let w = params.layers[ti].data()[vi];
            let mut g = params.grads[ti].data()[vi];
            if opt.l2_coefficient > 0.0 {
                g += l2 * w;
            }
            if opt.prox_mu > 0.0 {
                let a = anchor.unwrap().layers[ti].data()[vi];
                g += mu * (w - a);
            }
            let r = decay * params.rms[ti].data()[vi] + one_minus * g * g;
            params.rms[ti].data_mut()[vi] = r;
            params.layers[ti].data_mut()[vi] = w - lr * g / (r + eps).sqrt();
            params.grads[ti].data_mut()[vi] = F::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::network::{EmbeddingNet, NetworkConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_params() -> ParameterSet<f32> {
        let config = NetworkConfig {
            input_dim: 2,
            hidden_dims: vec![3],
            embedding_dim: 2,
            use_batch_norm: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        EmbeddingNet::<f32>::init(config, &mut rng).unwrap().into_params()
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = small_params();
        let before = params.clone();
        let opt = OptimizerConfig {
            learning_rate: 0.1,
            l2_coefficient: 0.0,
            ..OptimizerConfig::default()
        };
        rmsprop_step(&mut params, &opt, None).unwrap();
        assert_eq!(params.layers, before.layers);
    }

    #[test]
    fn single_scalar_matches_hand_expansion() {
        // w=1, g=2, fresh state, decay=0.9, lr=0.1, eps=1e-7:
        //   rms' = 0.1 * 4 = 0.4
        //   w'   = 1 - 0.1 * 2 / sqrt(0.4 + 1e-7)
        let mut params = small_params();
        for t in &mut params.layers {
            for v in t.data_mut() {
                *v = 1.0;
            }
        }
        for t in &mut params.grads {
            for v in t.data_mut() {
                *v = 2.0;
            }
        }
        let opt = OptimizerConfig {
            learning_rate: 0.1,
            rms_decay: 0.9,
            rms_epsilon: 1e-7,
            l2_coefficient: 0.0,
            prox_mu: 0.0,
        };
        rmsprop_step(&mut params, &opt, None).unwrap();
        let expected = (1.0f64 - 0.1 * 2.0 / (0.4f64 + 1e-7).sqrt()) as f32;
        for t in params.trainable() {
            for &v in t.data() {
                assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
            }
        }
        for t in params.rms_state() {
            for &v in t.data() {
                assert!((v - 0.4).abs() < 1e-7);
            }
        }
        for t in params.grads() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn proximal_term_vanishes_at_anchor() {
        let mut params = small_params();
        let anchor = params.clone();
        let opt = OptimizerConfig {
            learning_rate: 0.1,
            l2_coefficient: 0.0,
            prox_mu: 0.5,
            ..OptimizerConfig::default()
        };
        rmsprop_step(&mut params, &opt, Some(&anchor)).unwrap();
        assert_eq!(params.layers, anchor.layers);
    }

    #[test]
    fn missing_anchor_with_mu_is_config_error() {
        let mut params = small_params();
        let opt = OptimizerConfig {
            prox_mu: 0.5,
            ..OptimizerConfig::default()
        };
        let err = rmsprop_step(&mut params, &opt, None).unwrap_err();
        assert!(err.to_string().contains("anchor"));
    }

    #[test]
    fn rms_state_stays_non_negative() {
        let mut params = small_params();
        for t in &mut params.grads {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = if i % 2 == 0 { -3.0 } else { 0.5 };
            }
        }
        let opt = OptimizerConfig::default();
        rmsprop_step(&mut params, &opt, None).unwrap();
        for t in params.rms_state() {
            assert!(t.data().iter().all(|&v| v >= 0.0));
        }
    }
}
