use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, cosine_lr, AdamState};
use super::pretrain::{accumulate, augment, derive_seed, TrainObserver};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::mae::{with_normals, Model, EXTRACT_SEED};
use crate::nn::{Activation, LayerNorm, Linear, ParamStore, Real, Tape, Tensor, Var};

/// Which parameters fine-tuning may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// Train backbone and head.
    Global,
    /// Freeze the backbone, train the head only.
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Linear,
    Nonlinear,
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ }) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", stringify!($ty), " `{}`"), other))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($ty::$variant => $name,)+
                })
            }
        }
    };
}

string_enum!(Scope { Global => "global", Local => "local" });
string_enum!(HeadKind { Linear => "linear", Nonlinear => "nonlinear" });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FinetuneProtocol {
    pub scope: Scope,
    pub head: HeadKind,
    pub num_classes: usize,
}

pub const HEAD_HIDDEN: usize = 256;
pub const HEAD_DROPOUT: f64 = 0.5;

/// Classifier over global features.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub kind: HeadKind,
    pub input: usize,
    pub classes: usize,
}

impl ClassifierHead {
    pub const PREFIX: &'static str = "cls";

    pub fn new(kind: HeadKind, input: usize, classes: usize) -> Self {
        ClassifierHead { kind, input, classes }
    }

    fn layers(&self) -> Vec<Linear> {
        match self.kind {
            HeadKind::Linear => vec![Linear::new("cls.linear", self.input, self.classes)],
            HeadKind::Nonlinear => vec![
                Linear::new("cls.fc0", self.input, HEAD_HIDDEN),
                Linear::new("cls.fc1", HEAD_HIDDEN, HEAD_HIDDEN),
                Linear::new("cls.fc2", HEAD_HIDDEN, self.classes),
            ],
        }
    }

    fn norms(&self) -> Vec<LayerNorm> {
        match self.kind {
            HeadKind::Linear => vec![],
            HeadKind::Nonlinear => vec![LayerNorm::new("cls.norm0", HEAD_HIDDEN), LayerNorm::new("cls.norm1", HEAD_HIDDEN)],
        }
    }

    pub const INPUT_SHIFT: &'static str = "cls.input.shift";
    pub const INPUT_SCALE: &'static str = "cls.input.scale";

    /// Trainable layers plus a frozen per-dimension standardization of the
    /// input (identity until [`ClassifierHead::fit_input_scaling`]).
    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        store.insert(Self::INPUT_SHIFT, Tensor::zeros(&[self.input]), false)?;
        store.insert(Self::INPUT_SCALE, Tensor::from_fn(&[self.input], |_| T::one()), false)?;
        for l in self.layers() {
            l.init(store, rng)?;
        }
        for n in self.norms() {
            n.init(store, rng)?;
        }
        Ok(())
    }

    /// Set the input standardization from training features: subtract the
    /// mean, divide by `sqrt(var + 1e-5)`. Backbone features share a large
    /// common component, so without this a linear head sees almost constant
    /// inputs.
    pub fn fit_input_scaling<T: Real>(&self, store: &mut ParamStore<T>, features: &[Vec<T>]) -> Result<()> {
        if features.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = features.len() as f64;
        let mut shift = vec![0.0f64; self.input];
        let mut scale = vec![0.0f64; self.input];
        for row in features {
            if row.len() != self.input {
                return Err(Error::shape(format!("feature width {} for head input {}", row.len(), self.input)));
            }
            for (m, v) in shift.iter_mut().zip(row) {
                *m += v.to_f64_lossy() / n;
            }
        }
        for row in features {
            for ((s, m), v) in scale.iter_mut().zip(&shift).zip(row) {
                *s += (v.to_f64_lossy() - m).powi(2) / n;
            }
        }
        let shift: Vec<f64> = shift.iter().map(|m| -m).collect();
        let scale: Vec<f64> = scale.iter().map(|v| 1.0 / (v + 1e-5).sqrt()).collect();
        *store.get_mut(Self::INPUT_SHIFT)? = Tensor::from_f64(&[self.input], &shift)?;
        *store.get_mut(Self::INPUT_SCALE)? = Tensor::from_f64(&[self.input], &scale)?;
        Ok(())
    }

    /// Trainable parameters only.
    pub fn param_count(&self) -> usize {
        let affine: usize = self.layers().iter().map(|l| (l.input + 1) * l.output).sum();
        affine + self.norms().len() * 2 * HEAD_HIDDEN
    }

    /// `features [b, input] -> logits [b, classes]`; dropout is active when a
    /// seed is given.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, features: Var, dropout_seed: Option<u64>) -> Result<Var> {
        let layers = self.layers();
        let norms = self.norms();
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let shift = tape.param(Self::INPUT_SHIFT)?;
        let scale = tape.param(Self::INPUT_SCALE)?;
        let scale = tape.reshape(scale, &[1, self.input])?;
        let mut h = tape.add_bias(features, shift)?;
        h = tape.mul(h, scale)?;
        for (i, layer) in layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if let Some(norm) = norms.get(i) {
                h = norm.forward(tape, h)?;
                h = tape.activation(h, Activation::Relu);
                if let Some(rng) = rng.as_mut() {
                    let keep = T::from_f64_lossy(1.0 / (1.0 - HEAD_DROPOUT));
                    let mask = Tensor::from_fn(tape.shape(h), |_| if rng.random_bool(1.0 - HEAD_DROPOUT) { keep } else { T::zero() });
                    let mask = tape.constant(mask);
                    h = tape.mul(h, mask)?;
                }
            }
        }
        Ok(h)
    }
}

/// Backbone plus classification head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub model: Model,
    pub head: ClassifierHead,
}

impl Classifier {
    pub fn new(model: Model, kind: HeadKind, classes: usize) -> Self {
        let head = ClassifierHead::new(kind, 2 * model.cfg.d, classes);
        Classifier { model, head }
    }

    /// Global features of every cloud, in order.
    pub fn features<T: Real>(&self, params: &ParamStore<T>, clouds: &[PointCloud]) -> Result<Vec<Vec<T>>> {
        clouds.par_iter().map(|c| self.model.extract_global_feature(c, params)).collect()
    }

    pub fn predict(&self, params: &ParamStore<f32>, clouds: &[PointCloud]) -> Result<Vec<usize>> {
        let features = self.features(params, clouds)?;
        self.predict_features(params, &features)
    }

    pub fn predict_features(&self, params: &ParamStore<f32>, features: &[Vec<f32>]) -> Result<Vec<usize>> {
        if features.is_empty() {
            return Ok(vec![]);
        }
        let mut tape = Tape::with_params(params);
        let x = tape.constant(stack(features)?);
        let logits = self.head.forward(&mut tape, x, None)?;
        Ok(argmax_rows(tape.value(logits)))
    }
}

fn stack<T: Real>(rows: &[Vec<T>]) -> Result<Tensor<T>> {
    let width = rows.first().map_or(0, Vec::len);
    Tensor::new(vec![rows.len(), width], rows.concat())
}

fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != labels.len() {
        return Err(Error::LabelMismatch(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy of the classifier on labeled clouds.
pub fn evaluate_classifier(classifier: &Classifier, params: &ParamStore<f32>, clouds: &[PointCloud], labels: &[usize]) -> Result<f64> {
    if clouds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    accuracy(&classifier.predict(params, clouds)?, labels)
}

pub struct FinetuneRun {
    pub classifier: Classifier,
    pub params: ParamStore<f32>,
    /// Mean training loss per epoch.
    pub curve: Vec<f64>,
    pub train_accuracy: f64,
}

/// Train a classification head (and, for global scope, the backbone) on
/// labeled clouds starting from pretrained backbone parameters.
pub fn finetune(
    model: &Model,
    pretrained: &ParamStore<f32>,
    clouds: &[PointCloud],
    labels: &[usize],
    protocol: FinetuneProtocol,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if clouds.len() != labels.len() {
        return Err(Error::LabelMismatch(format!("{} clouds with {} labels", clouds.len(), labels.len())));
    }
    if protocol.num_classes < 2 {
        return Err(Error::LabelMismatch("need at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= protocol.num_classes) {
        return Err(Error::LabelMismatch(format!("label {bad} with {} classes", protocol.num_classes)));
    }
    let classifier = Classifier::new(model.clone(), protocol.head, protocol.num_classes);
    let mut params = ParamStore::new();
    for prefix in Model::BACKBONE {
        params.merge(pretrained.subset(prefix))?;
    }
    let frozen = protocol.scope == Scope::Local;
    for prefix in Model::BACKBONE {
        params.set_trainable_prefix(prefix, !frozen);
    }
    classifier
        .head
        .init(&mut params, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x4ead])))?;
    let clouds: Vec<PointCloud> = clouds
        .par_iter()
        .map(|c| with_normals(c, &model.cfg))
        .collect::<Result<_>>()?;
    let initial = classifier.features(&params, &clouds)?;
    classifier.head.fit_input_scaling(&mut params, &initial)?;
    // a frozen backbone maps every cloud to a fixed feature
    let cached = if frozen { Some(initial) } else { None };
    let steps_per_epoch = clouds.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut state = AdamState::new();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..clouds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let batch_seed = derive_seed(cfg.seed, &[epoch as u64, step as u64]);
            let (loss, grads) = match &cached {
                Some(features) => {
                    let rows: Vec<Vec<f32>> = batch.iter().map(|&i| features[i].clone()).collect();
                    let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    let mut tape = Tape::with_params(&params);
                    let x = tape.constant(stack(&rows)?);
                    let logits = classifier.head.forward(&mut tape, x, Some(batch_seed))?;
                    let loss = tape.cross_entropy(logits, &targets, cfg.label_smoothing)?;
                    let value = tape.value(loss).item() as f64 * batch.len() as f64;
                    (value, tape.backward(loss)?.into_params())
                }
                None => {
                    let parts = batch
                        .par_iter()
                        .map(|&i| {
                            let seed = derive_seed(batch_seed, &[i as u64]);
                            let cloud = if cfg.augment {
                                augment(&clouds[i], seed)
                            } else {
                                clouds[i].clone()
                            };
                            let (_, input) = model.gate_input::<f32>(&cloud, EXTRACT_SEED)?;
                            let mut tape = Tape::with_params(&params);
                            let f = model.global_feature(&mut tape, &input)?;
                            let width = tape.shape(f)[0];
                            let f = tape.reshape(f, &[1, width])?;
                            let logits = classifier.head.forward(&mut tape, f, Some(seed))?;
                            let loss = tape.cross_entropy(logits, &[labels[i]], cfg.label_smoothing)?;
                            Ok((tape.value(loss).item() as f64, tape.backward(loss)?.into_params()))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let loss = parts.iter().map(|p| p.0).sum();
                    (loss, accumulate(parts.into_iter().map(|p| p.1).collect(), 1.0 / batch.len() as f32))
                }
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += loss;
            adamw_step(&mut params, &grads, &mut state, cosine_lr(step, total_steps, cfg), cfg)?;
            step += 1;
        }
        let mean = loss_sum / clouds.len() as f64;
        curve.push(mean);
        observer.epoch(epoch, mean);
    }
    let predictions = match &cached {
        Some(features) => classifier.predict_features(&params, features)?,
        None => classifier.predict(&params, &clouds)?,
    };
    let train_accuracy = accuracy(&predictions, labels)?;
    Ok(FinetuneRun {
        classifier,
        params,
        curve,
        train_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::io::{synth_shapes, Shape};

    #[test]
    fn head_sizes() {
        let h = ClassifierHead::new(HeadKind::Linear, 768, 40);
        assert_eq!(h.param_count(), 769 * 40);
        let mut s = ParamStore::<f32>::new();
        h.init(&mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let trainable = |s: &ParamStore<f32>| s.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum::<usize>();
        assert_eq!(trainable(&s), h.param_count());
        assert_eq!(s.numel(), h.param_count() + 2 * 768);
        let n = ClassifierHead::new(HeadKind::Nonlinear, 8, 3);
        let mut s = ParamStore::<f32>::new();
        n.init(&mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(trainable(&s), n.param_count());
    }

    #[test]
    fn input_scaling_standardizes() {
        let h = ClassifierHead::new(HeadKind::Linear, 2, 2);
        let mut s = ParamStore::<f64>::new();
        h.init(&mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let feats = vec![vec![10.0, 1.0], vec![12.0, 1.0], vec![14.0, 1.0]];
        h.fit_input_scaling(&mut s, &feats).unwrap();
        assert_eq!(s.get(ClassifierHead::INPUT_SHIFT).unwrap().data(), &[-12.0, -1.0]);
        let var = 8.0 / 3.0;
        let scale = s.get(ClassifierHead::INPUT_SCALE).unwrap().data().to_vec();
        assert!((scale[0] - 1.0 / (var + 1e-5f64).sqrt()).abs() < 1e-12);
        assert!((scale[1] - 1.0 / 1e-5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn accuracy_matches_tally() {
        let preds = [0, 1, 2, 3, 1, 1, 0, 2, 3, 3, 0, 0, 1, 2, 2, 3, 0, 1, 2, 3];
        let labels = [0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3];
        let mut confusion = [[0usize; 4]; 4];
        for (&p, &l) in preds.iter().zip(&labels) {
            confusion[l][p] += 1;
        }
        let trace: usize = (0..4).map(|i| confusion[i][i]).sum();
        assert_eq!(accuracy(&preds, &labels).unwrap(), trace as f64 / 20.0);
        assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
        assert_eq!(accuracy(&[0; 20], &labels).unwrap(), 0.25);
        assert!(matches!(accuracy(&[], &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("local".parse::<Scope>().unwrap(), Scope::Local);
        assert_eq!(HeadKind::Nonlinear.to_string(), "nonlinear");
        assert!("wide".parse::<HeadKind>().is_err());
    }

    #[test]
    fn local_scope_freezes_backbone() {
        let cfg = ModelConfig::gradcheck();
        let model = Model::new(&cfg).unwrap();
        let pretrained = model.init_params::<f32>(0).unwrap();
        let data = synth_shapes(&[Shape::Cube, Shape::Sphere], 4, cfg.n, 3).unwrap();
        let train = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        for head in [HeadKind::Linear, HeadKind::Nonlinear] {
            let protocol = FinetuneProtocol {
                scope: Scope::Local,
                head,
                num_classes: 2,
            };
            let run = finetune(&model, &pretrained, &data.clouds, &data.labels, protocol, &train, &mut ()).unwrap();
            for prefix in Model::BACKBONE {
                assert_eq!(run.params.fingerprint(prefix), pretrained.fingerprint(prefix));
            }
            assert_ne!(run.params.fingerprint("cls."), "");
        }
        let protocol = FinetuneProtocol {
            scope: Scope::Global,
            head: HeadKind::Linear,
            num_classes: 2,
        };
        let run = finetune(&model, &pretrained, &data.clouds, &data.labels, protocol, &train, &mut ()).unwrap();
        assert_ne!(run.params.fingerprint("encoder."), pretrained.fingerprint("encoder."));
        let bad = FinetuneProtocol { num_classes: 1, ..protocol };
        assert!(matches!(
            finetune(&model, &pretrained, &data.clouds, &data.labels, bad, &train, &mut ()),
            Err(Error::LabelMismatch(_))
        ));
    }
}
