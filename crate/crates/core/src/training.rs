//! Mini-batch training with Adam, plus accuracy and macro-F1 evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{Result, SpectraError};
use crate::model::{ForwardCache, Gradients, ModelParams};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut failed = Vec::new();
        if self.batch_size < 1 {
            failed.push("batch_size >= 1".to_string());
        }
        if !(self.learning_rate >= 0.0) {
            failed.push(format!("learning_rate >= 0 (got {})", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            failed.push("beta1, beta2 in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            failed.push("eps > 0".to_string());
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(SpectraError::Config(format!("failed constraints: {}", failed.join(", "))))
        }
    }
}

/// Mean of `-ln(max(ŷ[label], 1e-12))` over the batch.
pub fn cross_entropy(y_hat: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, k) = match y_hat.shape() {
        &[b, k] => (b, k),
        s => return Err(SpectraError::Dimension(format!("expected (B, K) probabilities, got {s:?}"))),
    };
    if labels.len() != b {
        return Err(SpectraError::Dimension(format!("{} labels for {b} rows", labels.len())));
    }
    let mut total = 0.0;
    for (row, &label) in y_hat.data().chunks(k).zip(labels) {
        if label >= k {
            return Err(SpectraError::Label { label, classes: k });
        }
        total -= row[label].max(1e-12).ln();
    }
    Ok(total / b as f64)
}

/// Adam moments, shaped like the parameters they track.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(model: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, Tensor::zeros(t.shape())))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, model: &mut ModelParams, grads: &Gradients, tc: &TrainConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - tc.beta1.powi(t), 1.0 - tc.beta2.powi(t));
        for (name, p) in model.named_params_mut() {
            let g = grads
                .get(&name)
                .ok_or_else(|| SpectraError::Usage(format!("no gradient for {name}")))?;
            let m = self.m.get_mut(&name).expect("moment for every parameter");
            let v = self.v.get_mut(&name).expect("moment for every parameter");
            if g.shape() != p.shape() {
                return Err(SpectraError::Shape(format!(
                    "gradient {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = tc.beta1 * *m + (1.0 - tc.beta1) * g;
                *v = tc.beta2 * *v + (1.0 - tc.beta2) * g * g;
                *p -= tc.learning_rate * (*m / c1) / ((*v / c2).sqrt() + tc.eps);
            }
        }
        Ok(())
    }
}

/// Training-mode forward on one batch: mean cross-entropy and the cache
/// needed by [`ModelParams::backward`].
pub fn batch_loss(model: &ModelParams, x: &Tensor, labels: &[usize], rng: &mut Rng) -> Result<(f64, ForwardCache)> {
    let (probs, cache) = model.forward_train(x, rng)?;
    Ok((cross_entropy(&probs, labels)?, cache))
}

/// One optimizer step; returns the pre-update batch loss.
pub fn train_step(
    model: &mut ModelParams,
    adam: &mut Adam,
    x: &Tensor,
    labels: &[usize],
    rng: &mut Rng,
    tc: &TrainConfig,
) -> Result<f64> {
    let (loss, cache) = batch_loss(model, x, labels, rng)?;
    if !loss.is_finite() {
        return Err(SpectraError::Numeric(format!("training loss became {loss}")));
    }
    let grads = model.backward(&cache, labels)?;
    adam.update(model, &grads, tc)?;
    model.sepconv.update_running_stats(cache.conv_cache());
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
    pub eval_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,eval_acc,eval_macro_f1\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, opt(e.eval_acc), opt(e.eval_macro_f1));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| SpectraError::io(path, e))
    }
}

/// Trains a copy of `model`; `eval` (if any) is scored after every epoch.
pub fn train_epochs(
    model: &ModelParams,
    data: &WindowBatch,
    eval: Option<&WindowBatch>,
    tc: &TrainConfig,
) -> Result<(ModelParams, History)> {
    tc.validate()?;
    if data.is_empty() {
        return Err(SpectraError::Data("training set is empty".into()));
    }
    let mut model = model.clone();
    let mut adam = Adam::new(&model);
    let mut rng = Rng::new(tc.seed);
    let mut history = History::default();
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=tc.epochs {
        if tc.shuffle {
            rng.shuffle(&mut order);
        }
        let mut total = 0.0;
        for idx in order.chunks(tc.batch_size) {
            let batch = data.select(idx)?;
            total += train_step(&mut model, &mut adam, &batch.windows, &batch.labels, &mut rng, tc)?
                * idx.len() as f64;
        }
        let metrics = eval.map(|e| evaluate(&model, e)).transpose()?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / n as f64,
            eval_acc: metrics.as_ref().map(|m| m.accuracy),
            eval_macro_f1: metrics.as_ref().map(|m| m.macro_f1),
        });
    }
    Ok((model, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// Mean cross-entropy, absent when computed from bare predictions.
    pub loss: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, per-class precision/recall/F1 and macro-F1 over `classes`.
/// Classes with no support and no predictions score 0.
pub fn metrics_from_predictions(pred: &[usize], truth: &[usize], classes: usize) -> Result<Metrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(SpectraError::Data(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        for label in [p, t] {
            if label >= classes {
                return Err(SpectraError::Label { label, classes });
            }
        }
        confusion[t][p] += 1;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut precision = Vec::with_capacity(classes);
    let mut recall = Vec::with_capacity(classes);
    let mut f1 = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c];
        let predicted: usize = (0..classes).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let (p, r) = (ratio(tp, predicted), ratio(tp, actual));
        precision.push(p);
        recall.push(r);
        f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(Metrics {
        accuracy: correct as f64 / pred.len() as f64,
        macro_f1: f1.iter().sum::<f64>() / classes as f64,
        precision,
        recall,
        f1,
        loss: None,
        confusion,
    })
}

/// Eval-mode metrics of `model` on `data`.
pub fn evaluate(model: &ModelParams, data: &WindowBatch) -> Result<Metrics> {
    if data.is_empty() {
        return Err(SpectraError::Data("evaluation set is empty".into()));
    }
    let probs = model.forward_eval(&data.windows)?;
    evaluate_probs(&probs, &data.labels)
}

/// Metrics from a `(B, K)` probability matrix.
pub fn evaluate_probs(probs: &Tensor, labels: &[usize]) -> Result<Metrics> {
    let k = probs.shape()[1];
    let pred: Vec<usize> = probs.data().chunks(k).map(argmax).collect();
    let mut m = metrics_from_predictions(&pred, labels, k)?;
    m.loss = Some(cross_entropy(probs, labels)?);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, SpectraConfig};
    use crate::tensor::rng_normal;

    #[test]
    fn cross_entropy_cases() {
        let perfect = Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(cross_entropy(&perfect, &[1]).unwrap(), 0.0);
        let uniform = Tensor::full(&[2, 4], 0.25);
        assert!((cross_entropy(&uniform, &[3, 0]).unwrap() - 4f64.ln()).abs() <= 1e-15);
        assert!((cross_entropy(&perfect, &[0]).unwrap() - 1e12f64.ln()).abs() <= 1e-9);
        assert!(matches!(cross_entropy(&perfect, &[3]), Err(SpectraError::Label { .. })));

        let mut rng = Rng::new(2);
        let p = rng_normal(&mut rng, &[3, 5], 0.0, 1.0).unwrap();
        let p = p.softmax_rows().unwrap();
        let labels = [4, 0, 2];
        let direct = -(p.at(&[0, 4]).ln() + p.at(&[1, 0]).ln() + p.at(&[2, 2]).ln()) / 3.0;
        assert!((cross_entropy(&p, &labels).unwrap() - direct).abs() <= 1e-12);
    }

    #[test]
    fn metrics_hand_cases() {
        let all = metrics_from_predictions(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!((all.accuracy, all.macro_f1), (1.0, 1.0));

        // confusion [[1,1],[1,1]]
        let m = metrics_from_predictions(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.confusion, vec![vec![1, 1], vec![1, 1]]);
        assert!((m.accuracy - 0.5).abs() <= 1e-15 && (m.macro_f1 - 0.5).abs() <= 1e-15);

        let one = metrics_from_predictions(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((one.macro_f1 - 1.0 / 3.0).abs() <= 1e-15);

        // a class absent from truth and predictions contributes 0
        let absent = metrics_from_predictions(&[0, 1], &[0, 1], 3).unwrap();
        assert!((absent.macro_f1 - 2.0 / 3.0).abs() <= 1e-15);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    fn small() -> (ModelParams, WindowBatch) {
        let cfg = SpectraConfig {
            window_len: 32,
            channels: 2,
            classes: 3,
            n_fft: 8,
            hop: 4,
            conv_features: 3,
            hidden: 4,
            ..Default::default()
        };
        let model = build_model(&cfg).unwrap();
        let mut rng = Rng::new(8);
        let windows = rng_normal(&mut rng, &[10, 32, 2], 0.0, 1.0).unwrap();
        let labels = (0..10).map(|i| i % 3).collect();
        (model, WindowBatch { windows, labels, norm_stats: None })
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let (model, data) = small();
        let tc = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 0.0, ..Default::default() };
        let (trained, _) = train_epochs(&model, &data, None, &tc).unwrap();
        assert_eq!(trained.named_params(), model.named_params());
    }

    #[test]
    fn same_seed_same_history_and_moment_shapes() {
        let (model, data) = small();
        let tc = TrainConfig { epochs: 3, batch_size: 4, ..Default::default() };
        let (a, ha) = train_epochs(&model, &data, Some(&data), &tc).unwrap();
        let (b, hb) = train_epochs(&model, &data, Some(&data), &tc).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        assert!(ha.to_csv().starts_with("epoch,train_loss,eval_acc,eval_macro_f1\n1,"));
        let adam = Adam::new(&model);
        for (n, p) in model.named_params() {
            assert_eq!(adam.m[&n].shape(), p.shape());
            assert_eq!(adam.v[&n].shape(), p.shape());
        }
    }

    #[test]
    fn empty_data_is_rejected() {
        let (model, _) = small();
        let empty = WindowBatch { windows: Tensor::zeros(&[1, 32, 2]), labels: vec![], norm_stats: None };
        assert!(matches!(
            train_epochs(&model, &empty, None, &TrainConfig::default()),
            Err(SpectraError::Data(_))
        ));
    }

    #[test]
    fn single_sample_overfits() {
        let (model, data) = small();
        let one = data.select(&[1]).unwrap();
        let mut m = model.clone();
        let mut adam = Adam::new(&m);
        let tc = TrainConfig { learning_rate: 1e-2, ..Default::default() };
        let mut rng = Rng::new(0);
        for _ in 0..200 {
            train_step(&mut m, &mut adam, &one.windows, &one.labels, &mut rng, &tc).unwrap();
        }
        let loss = evaluate(&m, &one).unwrap().loss.unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn small_step_against_gradient_lowers_loss() {
        let mut failures = 0;
        for trial in 0..20u64 {
            let (mut model, data) = small();
            model = build_model(&SpectraConfig { seed: trial, ..model.config.clone() }).unwrap();
            let batch = data.select(&[0, 3, 4, 8]).unwrap();
            let seed = 100 + trial;
            let (before, cache) = batch_loss(&model, &batch.windows, &batch.labels, &mut Rng::new(seed)).unwrap();
            let grads = model.backward(&cache, &batch.labels).unwrap();
            for (n, p) in model.named_params_mut() {
                p.data_mut().iter_mut().zip(grads[&n].data()).for_each(|(p, g)| *p -= 1e-6 * g);
            }
            let (after, _) = batch_loss(&model, &batch.windows, &batch.labels, &mut Rng::new(seed)).unwrap();
            if !(after < before) {
                failures += 1;
            }
        }
        assert!(failures <= 1, "{failures} trials did not descend");
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let pred = [0, 2, 1, 1, 0, 2, 2];
        let truth = [0, 1, 1, 2, 0, 2, 1];
        let a = metrics_from_predictions(&pred, &truth, 3).unwrap();
        let perm = [6, 3, 0, 5, 1, 4, 2];
        let b = metrics_from_predictions(&perm.map(|i| pred[i]), &perm.map(|i| truth[i]), 3).unwrap();
        assert_eq!(a, b);
    }
}
