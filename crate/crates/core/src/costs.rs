//! Parameter and multiply-accumulate accounting.
//!
//! One MAC per scalar multiply-accumulate. Conv MACs are output elements
//! times kernel taps, matmuls are `m·k·n`, and the STFT is counted under the
//! filter-bank realization (`2F·n_fft` per frame per channel) and kept apart
//! from the network total.

use serde::{Deserialize, Serialize};

use crate::model::SpectraConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    /// MACs of the neural backbone (sum over `layers`).
    pub nn_macs: u64,
    /// MACs of the filter-bank STFT, not included in `nn_macs`.
    pub stft_macs: u64,
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.nn_macs + self.stft_macs
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }
}

impl std::fmt::Display for CostReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<20} {:>10} {:>12}", "layer", "params", "macs")?;
        for l in &self.layers {
            writeln!(f, "{:<20} {:>10} {:>12}", l.name, l.params, l.macs)?;
        }
        writeln!(f, "{:<20} {:>10} {:>12}", "total (nn)", self.total_params, self.nn_macs)?;
        writeln!(f, "{:<20} {:>10} {:>12}", "stft (filter bank)", 0, self.stft_macs)?;
        write!(f, "{:<20} {:>10} {:>12}", "total", self.total_params, self.total_macs())
    }
}

/// Per-layer costs for a configuration. Does not validate the config.
pub fn count_costs(config: &SpectraConfig) -> CostReport {
    let c = config.channels as u64;
    let k = config.kernel_size as u64;
    let d = config.conv_features as u64;
    let h = config.hidden as u64;
    let classes = config.classes as u64;
    let f = config.n_bins() as u64;
    let l = config.n_frames() as u64;
    let n = config.n_fft as u64;

    let mut layers = Vec::new();
    let mut push = |name: &str, params: u64, macs: u64| {
        layers.push(LayerCost {
            name: name.to_string(),
            params,
            macs,
        })
    };

    push("sepconv.depthwise", c * k * k, l * f * c * k * k);
    push("sepconv.pointwise", f * d, l * c * f * d);
    push("sepconv.bn", 2 * d, l * c * d);
    if config.use_channel_attention {
        push("attn", 3 * d * d + 1, l * (3 * c * d * d + 2 * c * c * d));
    }
    let head_in = if config.use_gru {
        let flat = c * d;
        push("gru.proj", flat * h, l * flat * h);
        for dir in ["gru.fwd", "gru.bwd"] {
            push(dir, 3 * (h * h + h * h + h), l * 3 * (h * h + h * h));
        }
        push("pool", 2 * h, 2 * l * 2 * h);
        2 * h
    } else {
        push("mean_pool", 0, l * c * d);
        c * d
    };
    push("clf", classes * head_in + classes, classes * head_in);

    let total_params = layers.iter().map(|x| x.params).sum();
    let nn_macs = layers.iter().map(|x| x.macs).sum();
    CostReport {
        layers,
        total_params,
        nn_macs,
        stft_macs: c * l * 2 * f * n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn default_config_hand_values() {
        let r = count_costs(&SpectraConfig::default());
        assert_eq!(r.layer("sepconv.depthwise").unwrap().params, 54);
        assert_eq!(r.layer("sepconv.pointwise").unwrap().params, 144);
        assert_eq!(r.layer("sepconv.bn").unwrap().params, 32);
        assert_eq!(r.total_params, 17005);
        // C·L·2F·n_fft = 6·11·18·16
        assert_eq!(r.stft_macs, 19008);
        assert_eq!(r.total_macs(), r.nn_macs + 19008);
    }

    #[test]
    fn params_agree_with_built_model() {
        for use_gru in [true, false] {
            for use_channel_attention in [true, false] {
                let cfg = SpectraConfig {
                    use_gru,
                    use_channel_attention,
                    ..Default::default()
                };
                let m = build_model(&cfg).unwrap();
                assert_eq!(count_costs(&cfg).total_params, m.param_count() as u64);
            }
        }
    }

    #[test]
    fn display_lists_every_layer() {
        let r = count_costs(&SpectraConfig::default());
        let s = r.to_string();
        for l in &r.layers {
            assert!(s.contains(&l.name));
        }
    }
}
