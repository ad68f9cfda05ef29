//! Desk-scale training: a procedural four-class dataset, cross-entropy, SGD
//! with momentum, a finite-difference gradient checker, and the demo loop
//! that proves the Micro variant learns.

use crate::error::{Error, Result};
use crate::model::{TFormerModel, Variant};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Classes of the synthetic set: horizontal stripes, vertical stripes,
/// checkerboard, uniform gradient.
pub const TOY_CLASSES: usize = 4;
/// Side length of the synthetic images.
pub const TOY_SIDE: usize = 32;
const STRIPE_HALF_PERIOD: usize = 4;

/// Seeded procedural image-classification set. Generation is a pure function
/// of `(seed, n)`; labels are assigned round-robin 0,1,2,3,...
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset<T: Scalar> {
    /// `[n, 3, 32, 32]`, values in `[0, 1]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl<T: Scalar> ToyDataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies samples `[start, start+count)` (indices taken modulo `len`)
    /// into a batch tensor plus label vector.
    pub fn batch(&self, start: usize, count: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.len();
        let sample = 3 * TOY_SIDE * TOY_SIDE;
        let mut data = Vec::with_capacity(count * sample);
        let mut labels = Vec::with_capacity(count);
        for k in 0..count {
            let i = (start + k) % n;
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::new(vec![count, 3, TOY_SIDE, TOY_SIDE], data)?,
            labels,
        ))
    }
}

/// Builds the dataset. Per sample, a phase, contrast, base brightness, and
/// per-channel scale are drawn from the seeded stream; pixel values are
/// clamped to `[0, 1]`.
pub fn synth_dataset<T: Scalar>(seed: u64, n: usize) -> Result<ToyDataset<T>> {
    if n < TOY_CLASSES || n % TOY_CLASSES != 0 {
        return Err(Error::Config(format!(
            "dataset size {n} must be a positive multiple of {TOY_CLASSES}"
        )));
    }
    let mut rng = Rng::new(seed);
    let side = TOY_SIDE;
    let mut data = Vec::with_capacity(n * 3 * side * side);
    let mut labels = Vec::with_capacity(n);

    for i in 0..n {
        let label = i % TOY_CLASSES;
        labels.push(label);
        let phase = rng.next_below(2 * STRIPE_HALF_PERIOD);
        let contrast = rng.uniform(0.5, 0.9);
        let base = rng.uniform(0.05, 0.1);
        let flip = rng.next_u64() & 1 == 1;
        let channel_scale = [
            rng.uniform(0.85, 1.0),
            rng.uniform(0.85, 1.0),
            rng.uniform(0.85, 1.0),
        ];

        for scale in channel_scale {
            for h in 0..side {
                for w in 0..side {
                    let pattern = match label {
                        0 => (((h + phase) / STRIPE_HALF_PERIOD) % 2) as f64,
                        1 => (((w + phase) / STRIPE_HALF_PERIOD) % 2) as f64,
                        2 => {
                            (((h + phase) / STRIPE_HALF_PERIOD
                                + (w + phase) / STRIPE_HALF_PERIOD)
                                % 2) as f64
                        }
                        _ => {
                            let ramp = (h + w) as f64 / (2 * (side - 1)) as f64;
                            if flip {
                                1.0 - ramp
                            } else {
                                ramp
                            }
                        }
                    };
                    let v = (base + contrast * scale * pattern).clamp(0.0, 1.0);
                    data.push(T::from_f64(v));
                }
            }
        }
    }

    Ok(ToyDataset {
        images: Tensor::new(vec![n, 3, side, side], data)?,
        labels,
        seed,
    })
}

// ---------------------------------------------------------------------------
// loss

/// Mean cross-entropy of `logits [N, C]` against integer labels, stabilized
/// by max subtraction. Returns the scalar loss and the logits cotangent
/// `(softmax - onehot) / N` in one pass.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (n, classes) = logits.shape2()?;
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    for &label in labels {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
    }

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![T::zero(); logits.len()];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut denom = 0.0f64;
        for v in row {
            denom += (v.as_f64() - max).exp();
        }
        let log_denom = denom.ln();
        loss += -(row[label].as_f64() - max - log_denom) * inv_n;
        for c in 0..classes {
            let p = (row[c].as_f64() - max).exp() / denom;
            let target = if c == label { 1.0 } else { 0.0 };
            grad[i * classes + c] = T::from_f64((p - target) * inv_n);
        }
    }
    Ok((loss, Tensor::new(vec![n, classes], grad)?))
}

// ---------------------------------------------------------------------------
// optimizer

/// Plain SGD with momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            steps: 500,
            batch_size: 32,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One momentum update on a single tensor: `v <- momentum*v + g`, then
/// `p <- p - lr*v`.
pub fn sgd_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
) {
    debug_assert_eq!(param.dims(), grad.dims());
    debug_assert_eq!(param.dims(), velocity.dims());
    let lr = T::from_f64(lr);
    let momentum = T::from_f64(momentum);
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + g;
        *p = *p - lr * *v;
    }
}

/// Momentum update over every parameter of a model. `grads` and `velocity`
/// are model-shaped containers (see [`TFormerModel::zeros_like`]).
pub fn sgd_step_model<T: Scalar>(
    model: &mut TFormerModel<T>,
    grads: &TFormerModel<T>,
    velocity: &mut TFormerModel<T>,
    lr: f64,
    momentum: f64,
) {
    let grad_tensors: Vec<&Tensor<T>> = grads.named_params().into_iter().map(|(_, _, t)| t).collect();
    let mut vel_tensors = velocity.params_mut();
    let params = model.params_mut();
    debug_assert_eq!(params.len(), grad_tensors.len());
    for ((p, g), v) in params.into_iter().zip(grad_tensors).zip(vel_tensors.iter_mut()) {
        sgd_step(p, g, v, lr, momentum);
    }
}

// ---------------------------------------------------------------------------
// gradient checking

/// Result of a finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Relative error with a small floor so near-zero pairs compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference check of a VJP.
///
/// `forward` maps the inputs to an output tensor; `vjp_all` maps
/// `(inputs, cotangent)` to one cotangent per input. The check projects the
/// output against a fixed random cotangent `c`, so the scalar landscape is
/// `L(x) = <f(x), c>` and its gradient must equal `vjp_all(x, c)`. Every
/// coordinate is probed when an input has at most `max_coords` elements,
/// otherwise a seeded sample of `max_coords` coordinates.
pub fn gradcheck<F, G>(
    inputs: &[Tensor<f64>],
    mut forward: F,
    mut vjp_all: G,
    eps: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheck>
where
    F: FnMut(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    G: FnMut(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    let y0 = forward(inputs)?;
    let cot = Tensor::<f64>::rand_uniform(y0.dims().to_vec(), -1.0, 1.0, rng)?;
    let analytic = vjp_all(inputs, &cot)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Dimension(format!(
            "vjp returned {} cotangents for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    for input_idx in 0..inputs.len() {
        let len = inputs[input_idx].len();
        let coords: Vec<usize> = if len <= max_coords {
            (0..len).collect()
        } else {
            (0..max_coords).map(|_| rng.next_below(len)).collect()
        };
        for &coord in &coords {
            let orig = work[input_idx].get(coord);
            work[input_idx].data_mut()[coord] = orig + eps;
            let plus = dot(&forward(&work)?, &cot);
            work[input_idx].data_mut()[coord] = orig - eps;
            let minus = dot(&forward(&work)?, &cot);
            work[input_idx].data_mut()[coord] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic[input_idx].get(coord);
            if !fd.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite("gradcheck".into()));
            }
            max_rel = max_rel.max(rel_err(a, fd));
            checked += 1;
        }
    }

    Ok(GradCheck {
        max_rel_err: max_rel,
        coords_checked: checked,
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// training loop

/// History of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Per-step minibatch loss.
    pub losses: Vec<f64>,
    /// Full-trainset accuracy, entry 0 before training and one entry per
    /// epoch after.
    pub accuracy_history: Vec<f64>,
    pub final_accuracy: f64,
    pub steps_run: usize,
}

/// Full-dataset accuracy under the current weights.
pub fn evaluate<T: Scalar>(model: &TFormerModel<T>, data: &ToyDataset<T>) -> Result<f64> {
    let n = data.len();
    let chunk = 32.min(n);
    let mut correct = 0usize;
    let mut done = 0usize;
    while done < n {
        let count = chunk.min(n - done);
        let (images, labels) = data.batch(done, count)?;
        let logits = model.forward(&images)?;
        let (_, classes) = logits.shape2()?;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mut best = 0usize;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        done += count;
    }
    Ok(correct as f64 / n as f64)
}

/// Minibatch SGD over the dataset in storage order with wrap-around.
/// Accuracy is evaluated before training and after every epoch; the loop
/// stops early once `target_accuracy` is reached (checked at epoch
/// boundaries). Fully deterministic given the model and data.
pub fn train<T: Scalar>(
    model: &mut TFormerModel<T>,
    data: &ToyDataset<T>,
    cfg: &SgdConfig,
    target_accuracy: Option<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut velocity = model.zeros_like()?;
    let steps_per_epoch = (data.len() / cfg.batch_size).max(1);

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut accuracy_history = vec![evaluate(model, data)?];

    let mut cursor = 0usize;
    let mut steps_run = 0usize;
    'outer: while steps_run < cfg.steps {
        for _ in 0..steps_per_epoch {
            if steps_run >= cfg.steps {
                break;
            }
            let (images, labels) = data.batch(cursor, cfg.batch_size)?;
            cursor = (cursor + cfg.batch_size) % data.len();

            let (logits, ctx) = model.forward_with_ctx(&images)?;
            let (loss, dlogits) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            let grads = model.backward(&ctx, &dlogits)?;
            sgd_step_model(model, &grads, &mut velocity, cfg.lr, cfg.momentum);

            losses.push(loss);
            steps_run += 1;
        }
        let acc = evaluate(model, data)?;
        accuracy_history.push(acc);
        if let Some(target) = target_accuracy {
            if acc >= target {
                break 'outer;
            }
        }
    }

    let final_accuracy = *accuracy_history.last().expect("at least initial entry");
    Ok(TrainOutcome {
        losses,
        accuracy_history,
        final_accuracy,
        steps_run,
    })
}

/// Demo target accuracy used by the CLI exit-code contract.
pub const DEMO_TARGET_ACCURACY: f64 = 0.95;
/// Demo dataset size.
pub const DEMO_SAMPLES: usize = 256;

/// Builds a Micro model and the 256-sample synthetic set from `seed`, then
/// trains. Weight init draws from a decorrelated stream so dataset and
/// weights do not share random numbers.
pub fn train_demo<T: Scalar>(seed: u64, cfg: &SgdConfig) -> Result<(TFormerModel<T>, TrainOutcome)> {
    let data = synth_dataset::<T>(seed, DEMO_SAMPLES)?;
    let mut init_rng = Rng::new(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut model = TFormerModel::build_variant(Variant::Micro, TOY_CLASSES, &mut init_rng)?;
    let outcome = train(&mut model, &data, cfg, Some(DEMO_TARGET_ACCURACY))?;
    Ok((model, outcome))
}

/// Fraction of sliding `window`-step windows in which the mean loss of the
/// second half is below the mean of the first half.
pub fn decreasing_window_fraction(losses: &[f64], window: usize) -> f64 {
    if losses.len() < window || window < 2 {
        return 1.0;
    }
    let half = window / 2;
    let mut decreasing = 0usize;
    let mut total = 0usize;
    for start in 0..=losses.len() - window {
        let first: f64 = losses[start..start + half].iter().sum::<f64>() / half as f64;
        let second: f64 =
            losses[start + window - half..start + window].iter().sum::<f64>() / half as f64;
        if second < first {
            decreasing += 1;
        }
        total += 1;
    }
    decreasing as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_labels_are_round_robin() {
        let data = synth_dataset::<f32>(1, 8).unwrap();
        assert_eq!(data.labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn dataset_pixels_in_unit_interval() {
        let data = synth_dataset::<f32>(2, 16).unwrap();
        assert!(data.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_is_bit_reproducible() {
        let a = synth_dataset::<f64>(42, 32).unwrap();
        let b = synth_dataset::<f64>(42, 32).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset::<f64>(43, 32).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn dataset_size_must_be_multiple_of_classes() {
        assert!(synth_dataset::<f32>(1, 6).is_err());
        assert!(synth_dataset::<f32>(1, 0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(vec![2, 4]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        // gradient rows sum to zero
        for row in grad.data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_saturated_correct_class() {
        let logits = Tensor::<f64>::new(vec![1, 4], vec![30.0, 0.0, 0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss >= 0.0 && loss <= 1e-9, "loss {loss}");
    }

    #[test]
    fn cross_entropy_two_class_hand_value() {
        // logits (1, 2), label 1: ln(1 + e^-1)
        let logits = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - 0.313_261_687_518_222_86).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let logits = Tensor::<f64>::rand_uniform(vec![3, 4], -2.0, 2.0, &mut rng).unwrap();
        let labels = [2usize, 0, 3];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let eps = 1e-6;
        for coord in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[coord] += eps;
            let mut minus = logits.clone();
            minus.data_mut()[coord] -= eps;
            let fd = (cross_entropy(&plus, &labels).unwrap().0
                - cross_entropy(&minus, &labels).unwrap().0)
                / (2.0 * eps);
            assert!((fd - grad.get(coord)).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor::<f64>::zeros(vec![1, 4]).unwrap();
        assert!(matches!(
            cross_entropy(&logits, &[4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn sgd_zero_lr_keeps_params() {
        let mut p = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let g = Tensor::<f64>::new(vec![1], vec![2.0]).unwrap();
        let mut v = Tensor::<f64>::zeros(vec![1]).unwrap();
        sgd_step(&mut p, &g, &mut v, 0.0, 0.9);
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let g = Tensor::<f64>::new(vec![1], vec![2.0]).unwrap();
        let mut v = Tensor::<f64>::zeros(vec![1]).unwrap();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0);
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_converges_on_quadratic() {
        // minimize p^2/2 (gradient p): the recurrence itself is the oracle
        let mut p = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        let mut v = Tensor::<f64>::zeros(vec![1]).unwrap();
        for _ in 0..100 {
            let g = p.clone();
            sgd_step(&mut p, &g, &mut v, 0.5, 0.9);
        }
        assert!(p.data()[0].abs() < 1e-3, "ended at {}", p.data()[0]);
    }

    #[test]
    fn sgd_config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        assert!(SgdConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn decreasing_window_fraction_on_known_series() {
        let down: Vec<f64> = (0..200).map(|i| 1.0 - i as f64 / 200.0).collect();
        assert_eq!(decreasing_window_fraction(&down, 100), 1.0);
        let up: Vec<f64> = (0..200).map(|i| i as f64).collect();
        assert_eq!(decreasing_window_fraction(&up, 100), 0.0);
    }
}
