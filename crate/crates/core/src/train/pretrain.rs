use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::optim::{adamw_step, cosine_lr, AdamState};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::mae::{with_normals, Model};
use crate::nn::{ParamStore, Real, Tape, Tensor};

/// Progress callbacks of the training loops.
pub trait TrainObserver {
    /// Mean loss of a finished epoch (1-based).
    fn epoch(&mut self, _epoch: usize, _loss: f64) {}

    /// Parameters after a scheduled epoch, or the last good state when
    /// training diverged (`last_good`).
    fn checkpoint(&mut self, _epoch: usize, _params: &ParamStore<f32>, _last_good: bool) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Mix a base seed with stream coordinates (SplitMix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

pub const SCALE_RANGE: (f64, f64) = (2.0 / 3.0, 1.5);
pub const SHIFT_RANGE: f64 = 0.2;

/// Random isotropic scale and per-axis translation.
pub fn augment(cloud: &PointCloud, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let mut shift = || rng.random_range(-SHIFT_RANGE..=SHIFT_RANGE);
    let t = Vec3::new(shift(), shift(), shift());
    cloud.scaled_shifted(scale, t)
}

/// Sum per-sample gradients in sample order and scale by `weight`.
pub(crate) fn accumulate<T: Real>(parts: Vec<BTreeMap<String, Tensor<T>>>, weight: T) -> BTreeMap<String, Tensor<T>> {
    let mut total: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for part in parts {
        for (name, g) in part {
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    for g in total.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v = *v * weight);
    }
    total
}

pub struct PretrainRun {
    pub params: ParamStore<f32>,
    /// Mean loss per epoch.
    pub curve: Vec<f64>,
    pub steps: usize,
}

/// Masked reconstruction pretraining with AdamW and cosine decay.
pub fn pretrain_loop(
    model: &Model,
    clouds: &[PointCloud],
    cfg: &TrainConfig,
    mut params: ParamStore<f32>,
    observer: &mut dyn TrainObserver,
) -> Result<PretrainRun> {
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // normals are static under scale and translation, so estimate them once
    let clouds: Vec<PointCloud> = clouds
        .par_iter()
        .map(|c| with_normals(c, &model.cfg))
        .collect::<Result<_>>()?;
    let steps_per_epoch = clouds.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut state = AdamState::new();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut last_good = (0, params.clone());
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..clouds.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        let mut loss_sum = 0.0;
        let mut outcome = Ok(());
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let sample_seed = derive_seed(cfg.seed, &[epoch as u64, i as u64]);
                    let cloud = if cfg.augment {
                        augment(&clouds[i], derive_seed(sample_seed, &[1]))
                    } else {
                        clouds[i].clone()
                    };
                    let mut tape = Tape::with_params(&params);
                    let out = model.pretrain_forward(&mut tape, &cloud, derive_seed(sample_seed, &[2]))?;
                    let loss = tape.value(out.loss).item() as f64;
                    if !loss.is_finite() {
                        return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}")));
                    }
                    Ok((loss, tape.backward(out.loss)?.into_params()))
                })
                .collect::<Result<Vec<_>>>();
            let results = match results {
                Ok(r) => r,
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            };
            let mut grads = Vec::with_capacity(results.len());
            for (loss, g) in results {
                loss_sum += loss;
                grads.push(g);
            }
            let grads = accumulate(grads, 1.0 / batch.len() as f32);
            let lr = cosine_lr(step, total_steps, cfg);
            if let Err(e) = adamw_step(&mut params, &grads, &mut state, lr, cfg) {
                outcome = Err(e);
                break;
            }
            step += 1;
        }
        let diverged = match outcome {
            Err(Error::Divergence(msg)) => Some(msg),
            Err(Error::NonFiniteGradient) => Some("non-finite gradient".into()),
            Err(e) => return Err(e),
            Ok(()) if !params.iter().all(|(_, p)| p.value.all_finite()) => Some(format!("non-finite parameters at epoch {epoch}")),
            Ok(()) => None,
        };
        if let Some(msg) = diverged {
            observer.checkpoint(last_good.0, &last_good.1, true)?;
            return Err(Error::Divergence(msg));
        }
        let mean = loss_sum / clouds.len() as f64;
        curve.push(mean);
        observer.epoch(epoch, mean);
        if cfg.checkpoint_epochs.contains(&epoch) {
            observer.checkpoint(epoch, &params, false)?;
        }
        last_good = (epoch, params.clone());
    }
    Ok(PretrainRun {
        params,
        curve,
        steps: step,
    })
}

/// Repeatedly fit one cloud with a fixed patch sample and mask; returns the
/// loss before every step and the final loss.
pub fn fit_single_cloud(
    model: &Model,
    cloud: &PointCloud,
    cfg: &TrainConfig,
    params: &mut ParamStore<f32>,
    steps: usize,
) -> Result<Vec<f64>> {
    let cloud = with_normals(cloud, &model.cfg)?;
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut tape = Tape::with_params(&*params);
        let out = model.pretrain_forward(&mut tape, &cloud, cfg.seed)?;
        let loss = tape.value(out.loss).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at step {step}")));
        }
        losses.push(loss);
        if step == steps {
            break;
        }
        let grads = tape.backward(out.loss)?.into_params();
        drop(tape);
        adamw_step(params, &grads, &mut state, cosine_lr(step, steps, cfg), cfg)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::io::{synth_shapes, Shape};

    #[test]
    fn augmentation_bounds_and_determinism() {
        let data = synth_shapes(&[Shape::Sphere], 1, 200, 0).unwrap();
        let c = &data.clouds[0];
        let a = augment(c, 5);
        assert_eq!(a, augment(c, 5));
        let max_in = c.points().iter().map(|p| p.norm()).fold(0.0, f64::max);
        let max_out = a.points().iter().map(|p| p.norm()).fold(0.0, f64::max);
        let slack = SHIFT_RANGE * 3f64.sqrt();
        assert!(max_out >= SCALE_RANGE.0 * max_in - slack && max_out <= SCALE_RANGE.1 * max_in + slack);
        assert_eq!(c.scaled_shifted(1.0, Vec3::zeros()), *c);
    }

    struct Recorder {
        epochs: Vec<(usize, f64)>,
        checkpoints: Vec<usize>,
    }

    impl TrainObserver for Recorder {
        fn epoch(&mut self, epoch: usize, loss: f64) {
            self.epochs.push((epoch, loss));
        }

        fn checkpoint(&mut self, epoch: usize, _: &ParamStore<f32>, _: bool) -> Result<()> {
            self.checkpoints.push(epoch);
            Ok(())
        }
    }

    #[test]
    fn bookkeeping_and_reproducibility() {
        let cfg = ModelConfig::gradcheck();
        let model = Model::new(&cfg).unwrap();
        let data = synth_shapes(&[Shape::Cube, Shape::Torus], 3, cfg.n, 1).unwrap();
        let train = TrainConfig {
            epochs: 2,
            batch_size: 4,
            checkpoint_epochs: vec![2],
            ..TrainConfig::default()
        };
        let run = |clouds: &[PointCloud]| {
            let mut rec = Recorder {
                epochs: vec![],
                checkpoints: vec![],
            };
            let out = pretrain_loop(&model, clouds, &train, model.init_params(0).unwrap(), &mut rec).unwrap();
            (out, rec)
        };
        let (a, rec) = run(&data.clouds);
        assert_eq!(a.steps, 4);
        assert_eq!(rec.epochs.len(), 2);
        assert_eq!(rec.checkpoints, vec![2]);
        let (b, _) = run(&data.clouds);
        assert_eq!(a.curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.params.fingerprint(""), b.params.fingerprint(""));
        let (one, _) = run(&data.clouds[..1]);
        assert_eq!(one.steps, 2);
    }

    #[test]
    fn divergence_reports_last_good_state() {
        let cfg = ModelConfig::gradcheck();
        let model = Model::new(&cfg).unwrap();
        let data = synth_shapes(&[Shape::Cube], 2, cfg.n, 1).unwrap();
        let mut params = model.init_params::<f32>(0).unwrap();
        params.get_mut("recon.head.bias").unwrap().data_mut()[0] = f32::NAN;
        let mut rec = Recorder {
            epochs: vec![],
            checkpoints: vec![],
        };
        let train = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let err = pretrain_loop(&model, &data.clouds, &train, params, &mut rec).err().unwrap();
        assert!(matches!(err, Error::Divergence(_)));
        assert_eq!(rec.checkpoints, vec![0]);
    }
}
