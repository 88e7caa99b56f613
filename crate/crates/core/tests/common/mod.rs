#![allow(dead_code)]

use spectra::model::{build_model, ModelParams, SpectraConfig};
use spectra::tensor::{rng_normal, Rng, Tensor};
use spectra::training::batch_loss;

pub fn small_config(seed: u64) -> SpectraConfig {
    SpectraConfig {
        window_len: 32,
        channels: 2,
        classes: 3,
        n_fft: 8,
        hop: 4,
        kernel_size: 3,
        conv_features: 3,
        hidden: 4,
        seed,
        ..Default::default()
    }
}

pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<(String, usize, f64, f64)>,
    pub worst_rel: f64,
}

/// Central-difference check of every learnable element of a randomly
/// perturbed small network against the analytic backward pass.
pub fn gradient_check(seed: u64) -> GradReport {
    let mut model = build_model(&small_config(seed)).unwrap();
    let mut rng = Rng::new(seed ^ 0x9e37);
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for name in &names {
        let t = model.get_mut(name).unwrap();
        let noise = rng_normal(&mut rng, t.shape(), 0.0, 0.1).unwrap();
        t.add_assign(&noise).unwrap();
    }
    let x = rng_normal(&mut rng, &[3, 32, 2], 0.0, 1.0).unwrap();
    let labels = [0, 2, 1];
    let dropout_seed = seed + 17;
    let loss = |m: &ModelParams| batch_loss(m, &x, &labels, &mut Rng::new(dropout_seed)).unwrap().0;
    let (_, cache) = batch_loss(&model, &x, &labels, &mut Rng::new(dropout_seed)).unwrap();
    let grads = model.backward(&cache, &labels).unwrap();

    let h = 1e-5;
    let mut report = GradReport { checked: 0, failures: Vec::new(), worst_rel: 0.0 };
    for name in &names {
        let n = model.get(name).unwrap().len();
        for i in 0..n {
            let orig = model.get(name).unwrap().data()[i];
            model.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = loss(&model);
            model.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = loss(&model);
            model.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[name].data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            report.checked += 1;
            report.worst_rel = report.worst_rel.max(rel);
            if rel > 1e-4 {
                report.failures.push((name.clone(), i, an, fd));
            }
        }
    }
    report
}

pub fn windows(rng: &mut Rng, b: usize, t: usize, c: usize) -> Tensor {
    rng_normal(rng, &[b, t, c], 0.0, 1.0).unwrap()
}
