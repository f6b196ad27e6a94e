//! Analytical per-client per-round computation (FLOP) and communication
//! (byte) costs for four federated semi-supervised methods, plus a
//! parameter/FLOP counter for conv-net architecture specs.
//!
//! FLOPs are counted as 2x multiply-accumulates of the forward pass;
//! skip-connection additions and pooling are excluded as negligible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs of the cost formulas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// FLOPs for a single-sample forward pass.
    pub flops_per_sample: u64,
    /// Serialized model size in bytes.
    pub model_bytes: u64,
    /// Serialized size of one prototype in bytes.
    pub prototype_bytes: u64,
    pub n_labeled: u64,
    pub n_unlabeled: u64,
    pub epochs: u64,
    /// Data augmentations per unlabeled sample (MixMatch only).
    pub augmentations: u64,
    pub helpers: u64,
    pub classes: u64,
    /// Rounds between helper refreshes (FedMatch communication only).
    pub helper_refresh_interval: u64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("cost epochs must be >= 1".into()));
        }
        if self.helper_refresh_interval == 0 {
            return Err(Error::Config("cost helper_refresh_interval must be >= 1".into()));
        }
        Ok(())
    }
}

/// The four client-side training schemes whose costs are modeled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MixmatchFedavg,
    /// FixMatch run directly on clients; FedRGD has the same cost shape.
    #[serde(alias = "fedrgd")]
    FixmatchFedavg,
    Fedmatch,
    Protofssl,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::MixmatchFedavg,
        Method::FixmatchFedavg,
        Method::Fedmatch,
        Method::Protofssl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::MixmatchFedavg => "mixmatch_fedavg",
            Method::FixmatchFedavg => "fixmatch_fedavg",
            Method::Fedmatch => "fedmatch",
            Method::Protofssl => "protofssl",
        }
    }
}

/// Per-client computation cost of one round, in FLOPs.
pub fn comp_cost(method: Method, p: &CostParams) -> Result<u128> {
    p.validate()?;
    let f = p.flops_per_sample as u128;
    let (dl, du, e) = (p.n_labeled as u128, p.n_unlabeled as u128, p.epochs as u128);
    Ok(match method {
        Method::MixmatchFedavg => f * (dl + p.augmentations as u128 * du) * e,
        Method::FixmatchFedavg => f * (dl + 2 * du) * e,
        Method::Fedmatch => f * (dl + (2 + p.helpers as u128) * du) * e,
        Method::Protofssl => {
            // Model passes over all data, prototype distance work on the
            // unlabeled set, and one extra labeled pass to build the shared
            // prototypes.
            f * (dl + du) * e
                + p.prototype_bytes as u128 * p.helpers as u128 * p.classes as u128 * du * e
                + f * dl
        }
    })
}

/// Per-client communication cost of one round, in bytes. FedMatch's
/// helper-weight exchange is amortized over the refresh interval, so the
/// result can be fractional.
pub fn comm_cost(method: Method, p: &CostParams) -> Result<f64> {
    p.validate()?;
    let theta = p.model_bytes as f64;
    Ok(match method {
        Method::MixmatchFedavg | Method::FixmatchFedavg => 2.0 * theta,
        Method::Fedmatch => {
            (4.0 + 2.0 * p.helpers as f64 / p.helper_refresh_interval as f64) * theta
        }
        Method::Protofssl => {
            2.0 * theta
                + p.prototype_bytes as f64 * (1.0 + p.helpers as f64) * p.classes as f64
        }
    })
}

/// One layer of a conv-net architecture description.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    /// Square-kernel convolution with "same" padding, no bias.
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    /// Max pooling; contributes no parameters or counted FLOPs.
    MaxPool { kernel: usize, stride: usize },
    /// Fully connected layer, no bias.
    Dense { inputs: usize, outputs: usize },
}

/// Ordered layer list of a reference architecture.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ArchSpec {
    pub layers: Vec<Layer>,
}

impl ArchSpec {
    /// The 8-convolution base network: 3x3 convolutions from 3 to 512
    /// channels with interleaved max pooling, no classification head.
    pub fn resnet8() -> Self {
        let conv = |cin, cout| Layer::Conv {
            kernel: 3,
            in_channels: cin,
            out_channels: cout,
            stride: 1,
        };
        let pool = |k| Layer::MaxPool { kernel: k, stride: k };
        ArchSpec {
            layers: vec![
                conv(3, 64),
                conv(64, 128),
                pool(2),
                conv(128, 128),
                conv(128, 128),
                conv(128, 256),
                pool(2),
                conv(256, 512),
                pool(2),
                conv(512, 512),
                conv(512, 512),
                pool(4),
            ],
        }
    }

    /// [`ArchSpec::resnet8`] plus the 512-to-10 classification layer.
    pub fn resnet9() -> Self {
        let mut arch = Self::resnet8();
        arch.layers.push(Layer::Dense {
            inputs: 512,
            outputs: 10,
        });
        arch
    }

    /// Dense-layer view of an embedding MLP, for FLOP accounting in the
    /// simulator.
    pub fn from_dims(dims: &[usize]) -> Self {
        ArchSpec {
            layers: dims
                .windows(2)
                .map(|w| Layer::Dense {
                    inputs: w[0],
                    outputs: w[1],
                })
                .collect(),
        }
    }
}

/// Total learnable parameters: k^2 * c_in * c_out per convolution and
/// in * out per dense layer, no biases.
pub fn param_count(arch: &ArchSpec) -> u64 {
    arch.layers
        .iter()
        .map(|l| match *l {
            Layer::Conv {
                kernel,
                in_channels,
                out_channels,
                ..
            } => (kernel * kernel * in_channels * out_channels) as u64,
            Layer::MaxPool { .. } => 0,
            Layer::Dense { inputs, outputs } => (inputs * outputs) as u64,
        })
        .sum()
}

/// Single-sample forward FLOPs at the given square input extent, counted as
/// 2x multiply-accumulates.
pub fn forward_flops(arch: &ArchSpec, input_hw: usize) -> u64 {
    let mut hw = input_hw;
    let mut macs: u64 = 0;
    for l in &arch.layers {
        match *l {
            Layer::Conv {
                kernel,
                in_channels,
                out_channels,
                stride,
            } => {
                hw = hw.div_ceil(stride);
                macs += (kernel * kernel * in_channels * out_channels * hw * hw) as u64;
            }
            Layer::MaxPool { stride, .. } => {
                hw /= stride;
            }
            Layer::Dense { inputs, outputs } => {
                macs += (inputs * outputs) as u64;
            }
        }
    }
    2 * macs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_params() -> CostParams {
        // ResNet9 at 32x32, 50 labeled + 490 unlabeled per client, 2 helpers,
        // 10 classes, 2 augmentations, refresh every 10 rounds.
        CostParams {
            flops_per_sample: forward_flops(&ArchSpec::resnet9(), 32),
            model_bytes: 4 * param_count(&ArchSpec::resnet9()),
            prototype_bytes: 4 * 512,
            n_labeled: 50,
            n_unlabeled: 490,
            epochs: 1,
            augmentations: 2,
            helpers: 2,
            classes: 10,
            helper_refresh_interval: 10,
        }
    }

    #[test]
    fn reference_parameter_counts() {
        assert_eq!(param_count(&ArchSpec::resnet8()), 6_563_520);
        assert_eq!(param_count(&ArchSpec::resnet9()), 6_568_640);
        let single = ArchSpec {
            layers: vec![Layer::Conv {
                kernel: 3,
                in_channels: 3,
                out_channels: 64,
                stride: 1,
            }],
        };
        assert_eq!(param_count(&single), 1_728);
    }

    #[test]
    fn forward_flops_layer_sum() {
        // Layer-by-layer MAC derivation frozen: 379,261,952 MACs at 32x32.
        assert_eq!(forward_flops(&ArchSpec::resnet9(), 32), 758_523_904);
    }

    #[test]
    fn dense_layer_flops() {
        let arch = ArchSpec {
            layers: vec![Layer::Dense {
                inputs: 512,
                outputs: 10,
            }],
        };
        assert_eq!(forward_flops(&arch, 1), 10_240);
    }

    #[test]
    fn empty_arch_is_free() {
        assert_eq!(forward_flops(&ArchSpec::default(), 32), 0);
        assert_eq!(param_count(&ArchSpec::default()), 0);
    }

    #[test]
    fn reference_cost_table() {
        let p = example_params();
        let within = |got: f64, want: f64, tol: f64| (got - want).abs() <= tol * want;
        let gflop = |m| comp_cost(m, &p).unwrap() as f64 / 1e9;
        assert!(within(gflop(Method::MixmatchFedavg), 782.0, 0.02));
        assert!(within(gflop(Method::FixmatchFedavg), 782.0, 0.02));
        assert!(within(gflop(Method::Fedmatch), 1526.0, 0.02));
        assert!(within(gflop(Method::Protofssl), 447.9, 0.02));
        let mb = |m| comm_cost(m, &p).unwrap() / 1e6;
        assert!(within(mb(Method::MixmatchFedavg), 52.6, 0.01));
        assert!(within(mb(Method::FixmatchFedavg), 52.6, 0.01));
        assert!(within(mb(Method::Fedmatch), 115.6, 0.01));
        assert!(within(mb(Method::Protofssl), 52.6, 0.01));
    }

    #[test]
    fn formula_collapse_without_unlabeled_data() {
        let mut p = example_params();
        p.n_unlabeled = 0;
        p.helpers = 0;
        p.epochs = 3;
        let f = p.flops_per_sample as u128;
        assert_eq!(
            comp_cost(Method::Protofssl, &p).unwrap(),
            f * p.n_labeled as u128 * (p.epochs as u128 + 1)
        );
        assert_eq!(
            comm_cost(Method::Protofssl, &p).unwrap(),
            2.0 * p.model_bytes as f64 + p.prototype_bytes as f64 * p.classes as f64
        );
    }

    #[test]
    fn prototype_comm_overhead_is_exactly_linear_in_helpers() {
        let mut p = example_params();
        for h in [0u64, 1, 2, 5, 20] {
            p.helpers = h;
            let over = comm_cost(Method::Protofssl, &p).unwrap() - 2.0 * p.model_bytes as f64;
            assert_eq!(
                over,
                p.prototype_bytes as f64 * (1.0 + h as f64) * p.classes as f64
            );
        }
    }

    #[test]
    fn computation_ordering_under_paper_conditions() {
        // protofssl < fixmatch < fedmatch whenever at least one helper is
        // used, prototype distance work is cheaper than a model pass
        // (C*h*k < F), and the unlabeled set is large enough that
        // |D^U|*E*(F - C*h*k) > F*|D^L| (the extra labeled pass for
        // prototype sharing must be amortized).
        let mut p = example_params();
        for (du, h, e) in [(490u64, 1u64, 1u64), (100, 2, 5), (1000, 5, 2), (200, 3, 1)] {
            p.n_unlabeled = du;
            p.helpers = h;
            p.epochs = e;
            let chk = (p.prototype_bytes * p.helpers * p.classes) as u128;
            let f = p.flops_per_sample as u128;
            assert!(chk < f, "precondition violated");
            assert!(
                du as u128 * e as u128 * (f - chk) > f * p.n_labeled as u128,
                "precondition violated"
            );
            let proto = comp_cost(Method::Protofssl, &p).unwrap();
            let fix = comp_cost(Method::FixmatchFedavg, &p).unwrap();
            let fed = comp_cost(Method::Fedmatch, &p).unwrap();
            assert!(proto < fix && fix < fed, "{proto} {fix} {fed}");
        }
    }

    #[test]
    fn costs_are_monotone_in_every_field() {
        let base = example_params();
        let bump = |f: fn(&mut CostParams)| {
            let mut p = base;
            f(&mut p);
            p
        };
        let bumps: Vec<CostParams> = vec![
            bump(|p| p.flops_per_sample += 1000),
            bump(|p| p.model_bytes += 1000),
            bump(|p| p.prototype_bytes += 8),
            bump(|p| p.n_labeled += 10),
            bump(|p| p.n_unlabeled += 10),
            bump(|p| p.epochs += 1),
            bump(|p| p.augmentations += 1),
            bump(|p| p.helpers += 1),
            bump(|p| p.classes += 1),
        ];
        for m in Method::ALL {
            for p in &bumps {
                assert!(comp_cost(m, p).unwrap() >= comp_cost(m, &base).unwrap());
                assert!(comm_cost(m, p).unwrap() >= comm_cost(m, &base).unwrap());
            }
            // A longer refresh interval can only reduce communication.
            let slower = bump(|p| p.helper_refresh_interval *= 2);
            assert!(comm_cost(m, &slower).unwrap() <= comm_cost(m, &base).unwrap());
        }
    }
}
