//! Student training on distilled data and held-out evaluation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageSample;
use crate::model::{train_sgd, ArchSpec, Example, Label, ModelCheckpoint, TrainConfig};
use crate::pipeline::{DistilledDataset, KeyValues};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentArch {
    ConvNet,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentConfig {
    pub arch: StudentArch,
    pub conv: [usize; 2],
    pub mlp_hidden: Vec<usize>,
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            arch: StudentArch::ConvNet,
            conv: [8, 16],
            mlp_hidden: vec![64],
            epochs: 60,
            eta: 0.05,
            batch_size: 16,
        }
    }
}

impl StudentConfig {
    /// Consumes the `student_*` keys.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        if let Some(v) = kv.take_str("student_arch") {
            self.arch = match v.as_str() {
                "convnet" => StudentArch::ConvNet,
                "mlp" => StudentArch::Mlp,
                _ => return Err(Error::Config(format!("unknown student arch `{v}`"))),
            };
        }
        kv.take("student_conv1", &mut self.conv[0])?;
        kv.take("student_conv2", &mut self.conv[1])?;
        if let Some(v) = kv.take_str("student_hidden") {
            self.mlp_hidden = v
                .split(',')
                .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad student_hidden `{v}`"))))
                .collect::<Result<_>>()?;
        }
        kv.take("student_epochs", &mut self.epochs)?;
        kv.take("student_eta", &mut self.eta)?;
        kv.take("student_batch", &mut self.batch_size)?;
        Ok(())
    }

    /// Student architecture for inputs of the given extents.
    pub fn arch_for(&self, h: usize, w: usize, c: usize, classes: usize, mean: Vec<f64>) -> ArchSpec {
        match self.arch {
            StudentArch::ConvNet => ArchSpec::convnet(h, w, c, self.conv, classes),
            StudentArch::Mlp => ArchSpec::mlp(h, w, c, &self.mlp_hidden, classes),
        }
        .with_input_mean(mean)
    }
}

/// Per-seed top-1 accuracies of one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Population standard deviation over seeds.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.accuracies.iter().map(|a| (a - m).powi(2)).sum::<f64>() / self.accuracies.len() as f64).sqrt()
    }
}

pub fn accuracy(model: &ModelCheckpoint, test: &[ImageSample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let correct: Vec<bool> = test
        .par_iter()
        .map(|s| model.predict(&s.pixels).map(|p| p == s.label))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / test.len() as f64)
}

/// Trains one fresh student per seed on `examples` (resized to the test
/// extents) and reports top-1 accuracy on `test`.
pub fn eval_examples(
    strategy: &str,
    examples: &[Example],
    test: &[ImageSample],
    classes: usize,
    student: &StudentConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    let first = test
        .first()
        .ok_or_else(|| Error::InvalidArgument("test set is empty".into()))?;
    if examples.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("need training examples and at least one seed".into()));
    }
    let (h, w, c) = (first.pixels.height(), first.pixels.width(), first.pixels.channels());
    let probe = ModelCheckpoint::zeros(student.arch_for(h, w, c, classes, vec![0.0; c]))?;
    let fitted: Vec<Example> = examples
        .iter()
        .map(|e| {
            if let Label::Soft(p) = &e.label {
                if p.len() != classes {
                    return Err(Error::DimensionMismatch {
                        what: "soft label length",
                        expected: classes,
                        got: p.len(),
                    });
                }
            }
            Ok(Example {
                input: probe.fit_input(&e.input)?,
                label: e.label.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; c];
    for e in &fitted {
        for (m, v) in mean.iter_mut().zip(e.input.channel_means()) {
            *m += v / fitted.len() as f64;
        }
    }
    let arch = student.arch_for(h, w, c, classes, mean);
    let accuracies = seeds
        .par_iter()
        .map(|&s| {
            let init = ModelCheckpoint::init(arch.clone(), seed::split(s, "student-init", 0))?;
            let config = TrainConfig {
                epochs: student.epochs,
                eta: student.eta,
                batch_size: student.batch_size,
                seed: seed::split(s, "student-shuffle", 0),
                checkpoint_epochs: Vec::new(),
                ..TrainConfig::default()
            };
            let trained = train_sgd(&init, &fitted, &config)?.pop().expect("final checkpoint");
            accuracy(&trained, test)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        strategy: strategy.to_string(),
        seeds: seeds.to_vec(),
        accuracies,
    })
}

/// Each distilled image contributes its `k` patches, resized to the student
/// input, against their stored soft labels.
pub fn eval_student(
    strategy: &str,
    distilled: &DistilledDataset,
    test: &[ImageSample],
    student: &StudentConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    eval_examples(strategy, &distilled.examples()?, test, distilled.classes, student, seeds)
}

/// Degenerate baseline: the original training set with hard labels.
pub fn eval_full_data(
    train: &[ImageSample],
    test: &[ImageSample],
    classes: usize,
    student: &StudentConfig,
    seeds: &[u64],
) -> Result<EvalReport> {
    let examples: Vec<Example> = train
        .iter()
        .map(|s| Example {
            input: s.pixels.clone(),
            label: Label::Hard(s.label),
        })
        .collect();
    eval_examples("full-data", &examples, test, classes, student, seeds)
}
