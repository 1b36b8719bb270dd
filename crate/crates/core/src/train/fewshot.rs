use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::finetune::{accuracy, finetune, FinetuneProtocol, HeadKind, Scope};
use super::pretrain::derive_seed;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::mae::Model;
use crate::nn::ParamStore;

pub const TEST_PER_CLASS: usize = 20;
pub const EPISODES: usize = 10;

/// One n-way m-shot split. Indices point into the source dataset; episode
/// labels are positions in `classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Source labels of the sampled classes, ascending.
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
}

/// Sample `n_way` classes among those with at least `m_shot + test_per_class`
/// items, then disjoint train and test items per class.
pub fn few_shot_episode(labels: &[usize], n_way: usize, m_shot: usize, test_per_class: usize, seed: u64) -> Result<Episode> {
    if n_way == 0 || m_shot == 0 {
        return Err(Error::Config("n-way and m-shot must be positive".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let need = m_shot + test_per_class;
    let eligible: Vec<usize> = by_class.iter().filter(|(_, v)| v.len() >= need).map(|(&c, _)| c).collect();
    if eligible.len() < n_way {
        return Err(Error::InsufficientSamples(format!(
            "{n_way}-way {m_shot}-shot needs {n_way} classes with {need} items each, found {}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = eligible.choose_multiple(&mut rng, n_way).copied().collect();
    classes.sort_unstable();
    let mut episode = Episode {
        classes: classes.clone(),
        train: vec![],
        test: vec![],
        train_labels: vec![],
        test_labels: vec![],
    };
    for (label, c) in classes.iter().enumerate() {
        let mut items = by_class[c].clone();
        items.shuffle(&mut rng);
        episode.train.extend_from_slice(&items[..m_shot]);
        episode.train_labels.extend(std::iter::repeat_n(label, m_shot));
        episode.test.extend_from_slice(&items[m_shot..need]);
        episode.test_labels.extend(std::iter::repeat_n(label, test_per_class));
    }
    Ok(episode)
}

#[derive(Clone, Debug)]
pub struct FewShotReport {
    pub accuracies: Vec<f64>,
    pub train_sizes: Vec<usize>,
    pub test_sizes: Vec<usize>,
    pub mean: f64,
    /// Sample standard deviation across episodes.
    pub std: f64,
}

/// Run `episodes` seeded episodes, fine-tuning a fresh head on each.
#[allow(clippy::too_many_arguments)]
pub fn run_few_shot(
    model: &Model,
    pretrained: &ParamStore<f32>,
    clouds: &[PointCloud],
    labels: &[usize],
    n_way: usize,
    m_shot: usize,
    episodes: usize,
    scope: Scope,
    head: HeadKind,
    cfg: &TrainConfig,
) -> Result<FewShotReport> {
    let mut accuracies = Vec::with_capacity(episodes);
    let mut train_sizes = Vec::with_capacity(episodes);
    let mut test_sizes = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let seed = derive_seed(cfg.seed, &[0xf5, e as u64]);
        let ep = few_shot_episode(labels, n_way, m_shot, TEST_PER_CLASS, seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| clouds[i].clone()).collect::<Vec<_>>();
        let protocol = FinetuneProtocol {
            scope,
            head,
            num_classes: n_way,
        };
        let episode_cfg = TrainConfig { seed, ..cfg.clone() };
        let run = finetune(model, pretrained, &pick(&ep.train), &ep.train_labels, protocol, &episode_cfg, &mut ())?;
        let predictions = run.classifier.predict(&run.params, &pick(&ep.test))?;
        accuracies.push(accuracy(&predictions, &ep.test_labels)?);
        train_sizes.push(ep.train.len());
        test_sizes.push(ep.test.len());
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(FewShotReport {
        accuracies,
        train_sizes,
        test_sizes,
        mean,
        std,
    })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn labels(classes: usize, per: usize) -> Vec<usize> {
        (0..classes * per).map(|i| i % classes).collect()
    }

    #[test]
    fn five_way_ten_shot_sizes() {
        let l = labels(8, 35);
        let ep = few_shot_episode(&l, 5, 10, TEST_PER_CLASS, 1).unwrap();
        assert_eq!((ep.train.len(), ep.test.len()), (50, 100));
        let train: BTreeSet<_> = ep.train.iter().collect();
        assert!(ep.test.iter().all(|i| !train.contains(i)));
        for (idx, lab) in ep.train.iter().zip(&ep.train_labels) {
            assert_eq!(l[*idx], ep.classes[*lab]);
        }
        assert_eq!(ep, few_shot_episode(&l, 5, 10, TEST_PER_CLASS, 1).unwrap());
    }

    #[test]
    fn seeds_change_the_classes() {
        let l = labels(10, 30);
        let base = few_shot_episode(&l, 5, 10, TEST_PER_CLASS, 0).unwrap().classes;
        let differing = (1..51).filter(|&s| few_shot_episode(&l, 5, 10, TEST_PER_CLASS, s).unwrap().classes != base).count();
        assert!(differing >= 45, "{differing}");
    }

    #[test]
    fn insufficient_samples() {
        let l = labels(5, 25);
        assert!(matches!(few_shot_episode(&l, 5, 10, TEST_PER_CLASS, 0), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn statistics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
