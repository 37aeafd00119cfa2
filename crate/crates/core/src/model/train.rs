use rand::seq::SliceRandom;
use rand::Rng;

use super::{log_softmax, softmax, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

/// Training target: a class index or a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Hard(usize),
    Soft(Vec<f64>),
}

impl Label {
    fn validate(&self, classes: usize) -> Result<()> {
        match self {
            Label::Hard(y) if *y >= classes => Err(Error::InvalidArgument(format!(
                "class index {y} out of range for {classes} classes"
            ))),
            Label::Hard(_) => Ok(()),
            Label::Soft(q) => {
                if q.len() != classes {
                    return Err(Error::DimensionMismatch {
                        what: "soft label length",
                        expected: classes,
                        got: q.len(),
                    });
                }
                let total: f64 = q.iter().sum();
                if q.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "soft label is not a probability vector (sum {total})"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Image,
    pub label: Label,
}

/// Whether a mini-batch gradient is the mean or the sum of per-sample gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchReduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub reduction: BatchReduction,
    /// Epochs (counted from the start of this run) at which to emit a
    /// checkpoint; the final epoch is always emitted.
    pub checkpoint_epochs: Vec<usize>,
    pub augment: Option<CropAugment>,
}

/// Random crop-and-resize augmentation. With probability `prob` an input is
/// replaced by a crop whose sides are a uniform fraction in `[min_side, 1]`
/// of the input sides, at a uniform position, resized back bilinearly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropAugment {
    pub prob: f64,
    pub min_side: f64,
}

impl CropAugment {
    pub fn apply(&self, image: &Image, rng: &mut crate::seed::Rng) -> Result<Image> {
        if !rng.random_bool(self.prob.clamp(0.0, 1.0)) {
            return Ok(image.clone());
        }
        let frac = rng.random_range(self.min_side.clamp(0.0, 1.0)..=1.0);
        let (h, w) = (image.height(), image.width());
        let ch = ((frac * h as f64).round() as usize).clamp(1, h);
        let cw = ((frac * w as f64).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        image.crop(top, left, ch, cw)?.resize_bilinear(h, w)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            eta: 0.05,
            batch_size: 32,
            seed: 0,
            reduction: BatchReduction::Mean,
            checkpoint_epochs: vec![10],
            augment: None,
        }
    }
}

impl ModelCheckpoint {
    /// Cross-entropy against a hard or soft label and its gradient over all
    /// parameter blocks. For a soft label `q` the loss is `−Σ q_k log p_k`.
    pub fn loss_and_backward(&self, input: &Image, label: &Label) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_loss_gradient(input, label, 1.0, &mut grad)?;
        Ok((loss, grad))
    }

    pub fn loss(&self, input: &Image, label: &Label) -> Result<f64> {
        label.validate(self.classes())?;
        let logp = log_softmax(&self.logits(input)?);
        Ok(cross_entropy(&logp, label))
    }

    /// Adds `scale · ∇ℓ` into `grad` and returns `ℓ`.
    pub(crate) fn accumulate_loss_gradient(
        &self,
        input: &Image,
        label: &Label,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        label.validate(self.classes())?;
        let fwd = self.forward(input)?;
        let logp = log_softmax(&fwd.logits);
        let loss = cross_entropy(&logp, label);
        let mut dlogits: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        match label {
            Label::Hard(y) => dlogits[*y] -= 1.0,
            Label::Soft(q) => dlogits.iter_mut().zip(q).for_each(|(d, q)| *d -= q),
        }
        if scale != 1.0 {
            dlogits.iter_mut().for_each(|d| *d *= scale);
        }
        self.accumulate_backward(&fwd.cache, &dlogits, grad);
        Ok(loss)
    }

    /// Mean or sum of the per-sample gradients over `batch`.
    pub fn batch_gradient(&self, batch: &[&Example], reduction: BatchReduction) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let scale = match reduction {
            BatchReduction::Mean => 1.0 / batch.len() as f64,
            BatchReduction::Sum => 1.0,
        };
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for ex in batch {
            loss += scale * self.accumulate_loss_gradient(&ex.input, &ex.label, scale, &mut grad)?;
        }
        Ok((loss, grad))
    }

    /// One SGD update `θ ← θ − η·g_B`; returns the batch loss.
    pub fn sgd_step(&mut self, batch: &[&Example], eta: f64, reduction: BatchReduction) -> Result<f64> {
        let (loss, grad) = self.batch_gradient(batch, reduction)?;
        for (p, g) in self.params.iter_mut().zip(&grad) {
            *p -= eta * g;
        }
        Ok(loss)
    }
}

fn cross_entropy(logp: &[f64], label: &Label) -> f64 {
    match label {
        Label::Hard(y) => -logp[*y],
        Label::Soft(q) => -q
            .iter()
            .zip(logp)
            .map(|(q, l)| if *q == 0.0 { 0.0 } else { q * l })
            .sum::<f64>(),
    }
}

/// Plain mini-batch SGD with seeded per-epoch shuffling.
///
/// Returns one checkpoint per requested epoch plus the final one, in epoch
/// order. A non-finite batch loss aborts with its epoch and batch index.
pub fn train_sgd(
    model: &ModelCheckpoint,
    examples: &[Example],
    config: &TrainConfig,
) -> Result<Vec<ModelCheckpoint>> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if !(config.eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {} is invalid", config.eta)));
    }
    let mut emit: Vec<usize> = config
        .checkpoint_epochs
        .iter()
        .copied()
        .filter(|&e| e <= config.epochs)
        .chain([config.epochs])
        .collect();
    emit.sort_unstable();
    emit.dedup();

    let mut current = model.clone();
    let start_epoch = model.epoch;
    let mut out = Vec::with_capacity(emit.len());
    if emit.first() == Some(&0) {
        out.push(current.clone());
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = seed::stream(config.seed, "shuffle", epoch as u64);
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let augmented: Vec<Example>;
            let batch: Vec<&Example> = match &config.augment {
                None => chunk.iter().map(|&i| &examples[i]).collect(),
                Some(aug) => {
                    augmented = chunk
                        .iter()
                        .map(|&i| {
                            let mut rng = seed::stream(config.seed, "augment", (epoch * examples.len() + i) as u64);
                            Ok(Example {
                                input: aug.apply(&examples[i].input, &mut rng)?,
                                label: examples[i].label.clone(),
                            })
                        })
                        .collect::<Result<_>>()?;
                    augmented.iter().collect()
                }
            };
            let loss = match current.sgd_step(&batch, config.eta, config.reduction) {
                Err(Error::NonFinite { .. }) => f64::NAN,
                other => other?,
            };
            if !loss.is_finite() || current.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
        }
        current.epoch = start_epoch + epoch;
        if emit.contains(&epoch) {
            out.push(current.clone());
        }
    }
    Ok(out)
}

/// Teacher output distribution attached to one distilled patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
    pub source_epoch: usize,
    pub temperature: f64,
}

impl SoftLabel {
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

/// Bilinearly resizes `patch` to the model input, runs the model and
/// returns the softmax distribution at temperature 1.
pub fn soft_label(model: &ModelCheckpoint, patch: &Image) -> Result<SoftLabel> {
    soft_label_with_temperature(model, patch, 1.0)
}

pub fn soft_label_with_temperature(model: &ModelCheckpoint, patch: &Image, temperature: f64) -> Result<SoftLabel> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    if patch.height() > model.arch.height || patch.width() > model.arch.width {
        return Err(Error::InvalidArgument(format!(
            "patch {}x{} exceeds model input {}x{}",
            patch.height(),
            patch.width(),
            model.arch.height,
            model.arch.width
        )));
    }
    let input = model.fit_input(patch)?;
    let logits: Vec<f64> = model.logits(&input)?.iter().map(|z| z / temperature).collect();
    Ok(SoftLabel {
        probs: softmax(&logits),
        source_epoch: model.epoch,
        temperature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ArchSpec};

    fn toy_examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let v = (i as f64 * 0.71).sin();
                let input = Image::new(1, 3, 1, vec![v, -v, 0.5 * v]).unwrap();
                Example {
                    input,
                    label: Label::Hard(usize::from(v > 0.0)),
                }
            })
            .collect()
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_output_gradient() {
        let mut m = ModelCheckpoint::zeros(ArchSpec::mlp(1, 2, 1, &[], 3)).unwrap();
        m.block_mut("fc0.bias").unwrap().copy_from_slice(&[800.0, 0.0, 0.0]);
        let x = Image::new(1, 2, 1, vec![0.3, 0.4]).unwrap();
        let (loss, grad) = m.loss_and_backward(&x, &Label::Hard(0)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_soft_label_on_uniform_prediction() {
        let m = ModelCheckpoint::zeros(ArchSpec::mlp(1, 2, 1, &[], 4)).unwrap();
        let x = Image::new(1, 2, 1, vec![0.3, 0.4]).unwrap();
        let (loss, grad) = m.loss_and_backward(&x, &Label::Soft(vec![0.25; 4])).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!(grad.iter().all(|&g| g.abs() < 1e-16));
    }

    #[test]
    fn invalid_labels_are_rejected() {
        let m = ModelCheckpoint::zeros(ArchSpec::mlp(1, 2, 1, &[], 3)).unwrap();
        let x = Image::new(1, 2, 1, vec![0.3, 0.4]).unwrap();
        assert!(m.loss_and_backward(&x, &Label::Hard(3)).is_err());
        assert!(m.loss_and_backward(&x, &Label::Soft(vec![0.5, 0.4, 0.0])).is_err());
        assert!(m.loss_and_backward(&x, &Label::Soft(vec![0.5, 0.5])).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let m = ModelCheckpoint::init(ArchSpec::mlp(1, 3, 1, &[4], 2), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            eta: 0.0,
            batch_size: 4,
            checkpoint_epochs: vec![1, 2],
            ..TrainConfig::default()
        };
        let cks = train_sgd(&m, &toy_examples(10), &cfg).unwrap();
        assert_eq!(cks.iter().map(|c| c.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(cks.iter().all(|c| c.params == m.params));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let m = ModelCheckpoint::init(
            ArchSpec::mlp(1, 3, 1, &[8], 2).with_activation(Activation::Tanh),
            2,
        )
        .unwrap();
        let data = toy_examples(40);
        let cfg = TrainConfig {
            epochs: 40,
            eta: 0.2,
            batch_size: 8,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train_sgd(&m, &data, &cfg).unwrap();
        let b = train_sgd(&m, &data, &cfg).unwrap();
        assert_eq!(a, b);
        let last = a.last().unwrap();
        let correct = data
            .iter()
            .filter(|e| Label::Hard(last.predict(&e.input).unwrap()) == e.label)
            .count();
        assert!(correct >= 38, "{correct}/40");
    }

    #[test]
    fn divergence_is_reported() {
        let m = ModelCheckpoint::init(ArchSpec::mlp(1, 3, 1, &[8], 2), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            eta: 1e300,
            batch_size: 8,
            ..TrainConfig::default()
        };
        match train_sgd(&m, &toy_examples(16), &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn soft_label_at_native_size() {
        let m = ModelCheckpoint::init(ArchSpec::convnet(8, 8, 1, [2, 2], 3), 3).unwrap();
        let patch = Image::new(8, 8, 1, (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
        let label = soft_label(&m, &patch).unwrap();
        assert_eq!(label.probs, softmax(&m.logits(&patch).unwrap()));
        assert!((label.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let small = patch.crop(0, 0, 4, 4).unwrap();
        let up = soft_label(&m, &small).unwrap();
        assert!((up.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let big = Image::filled(9, 8, 1, 0.0);
        assert!(soft_label(&m, &big).is_err());
    }

    #[test]
    fn crop_augment_keeps_extents_and_respects_probability() {
        let img = Image::new(4, 4, 1, (0..16).map(f64::from).collect()).unwrap();
        let mut rng = seed::rng(5);
        let never = CropAugment { prob: 0.0, min_side: 0.5 };
        assert_eq!(never.apply(&img, &mut rng).unwrap(), img);
        let whole = CropAugment { prob: 1.0, min_side: 1.0 };
        assert_eq!(whole.apply(&img, &mut rng).unwrap(), img);
        let always = CropAugment { prob: 1.0, min_side: 0.25 };
        let mut changed = 0;
        for _ in 0..20 {
            let out = always.apply(&img, &mut rng).unwrap();
            assert_eq!((out.height(), out.width(), out.channels()), (4, 4, 1));
            // bilinear resampling of a crop stays inside the input range
            assert!(out.data().iter().all(|&v| (0.0..=15.0).contains(&v)));
            changed += usize::from(out != img);
        }
        assert!(changed > 0);
    }
}
