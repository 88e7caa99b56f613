//! Flat `key=value` run configuration covering model and training fields.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. `seed`
//! seeds both model initialization and training unless `train_seed` is given.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Result, SpectraError};
use crate::model::SpectraConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: SpectraConfig,
    pub train: TrainConfig,
    /// Keys given explicitly in the file.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: SpectraConfig::default(),
            train: TrainConfig::default(),
            explicit: BTreeSet::new(),
        }
    }
}

pub const KEYS: [&str; 20] = [
    "window_len",
    "channels",
    "classes",
    "n_fft",
    "hop",
    "kernel_size",
    "conv_features",
    "hidden",
    "dropout",
    "use_channel_attention",
    "use_gru",
    "seed",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "eps",
    "train_seed",
    "shuffle",
];

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| SpectraError::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        let mut train_seed = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| SpectraError::Config(format!("line {line}: expected key=value, got {body:?}")))?;
            if !rc.explicit.insert(key.to_string()) {
                return Err(SpectraError::Config(format!("line {line}: duplicate key {key}")));
            }
            let (m, t) = (&mut rc.model, &mut rc.train);
            match key {
                "window_len" => m.window_len = parse(key, value, line)?,
                "channels" => m.channels = parse(key, value, line)?,
                "classes" => m.classes = parse(key, value, line)?,
                "n_fft" => m.n_fft = parse(key, value, line)?,
                "hop" => m.hop = parse(key, value, line)?,
                "kernel_size" => m.kernel_size = parse(key, value, line)?,
                "conv_features" => m.conv_features = parse(key, value, line)?,
                "hidden" => m.hidden = parse(key, value, line)?,
                "dropout" => m.dropout = parse(key, value, line)?,
                "use_channel_attention" => m.use_channel_attention = parse(key, value, line)?,
                "use_gru" => m.use_gru = parse(key, value, line)?,
                "seed" => m.seed = parse(key, value, line)?,
                "epochs" => t.epochs = parse(key, value, line)?,
                "batch_size" => t.batch_size = parse(key, value, line)?,
                "learning_rate" => t.learning_rate = parse(key, value, line)?,
                "beta1" => t.beta1 = parse(key, value, line)?,
                "beta2" => t.beta2 = parse(key, value, line)?,
                "eps" => t.eps = parse(key, value, line)?,
                "train_seed" => train_seed = Some(parse(key, value, line)?),
                "shuffle" => t.shuffle = parse(key, value, line)?,
                _ => {
                    return Err(SpectraError::Config(format!(
                        "line {line}: unknown key {key:?} (known: {})",
                        KEYS.join(", ")
                    )))
                }
            }
        }
        rc.train.seed = train_seed.unwrap_or(rc.model.seed);
        Ok(rc)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Every key with its resolved value, parseable by [`RunConfig::parse`].
    pub fn render(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let pairs: [(&str, String); 20] = [
            ("window_len", m.window_len.to_string()),
            ("channels", m.channels.to_string()),
            ("classes", m.classes.to_string()),
            ("n_fft", m.n_fft.to_string()),
            ("hop", m.hop.to_string()),
            ("kernel_size", m.kernel_size.to_string()),
            ("conv_features", m.conv_features.to_string()),
            ("hidden", m.hidden.to_string()),
            ("dropout", m.dropout.to_string()),
            ("use_channel_attention", m.use_channel_attention.to_string()),
            ("use_gru", m.use_gru.to_string()),
            ("seed", m.seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps", t.eps.to_string()),
            ("train_seed", t.seed.to_string()),
            ("shuffle", t.shuffle.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let rc = RunConfig::parse("# run\nclasses = 4\nuse_gru=false # ablation\n\nseed=9\nlearning_rate=3e-3\n").unwrap();
        assert_eq!(rc.model.classes, 4);
        assert!(!rc.model.use_gru);
        assert_eq!((rc.model.seed, rc.train.seed), (9, 9));
        assert_eq!(rc.train.learning_rate, 3e-3);
        assert!(rc.is_explicit("classes") && !rc.is_explicit("hidden"));
        let rc = RunConfig::parse("seed=1\ntrain_seed=2\n").unwrap();
        assert_eq!((rc.model.seed, rc.train.seed), (1, 2));
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for bad in ["colour=red", "hidden=3\nhidden=4", "hidden", "hidden=abc", "use_gru=yes"] {
            assert!(matches!(RunConfig::parse(bad), Err(SpectraError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn render_round_trips() {
        let rc = RunConfig::parse("classes=3\ndropout=0.1\ntrain_seed=5\n").unwrap();
        let back = RunConfig::parse(&rc.render()).unwrap();
        assert_eq!(rc.render().lines().count(), KEYS.len());
        assert_eq!((back.model, back.train), (rc.model, rc.train));
    }
}
