//! Optimization, pretraining, fine-tuning and few-shot protocols.

mod fewshot;
mod finetune;
mod optim;
mod pretrain;

pub use fewshot::{few_shot_episode, mean_std, run_few_shot, Episode, FewShotReport, EPISODES, TEST_PER_CLASS};
pub use finetune::{
    accuracy, evaluate_classifier, finetune, Classifier, ClassifierHead, FinetuneProtocol, FinetuneRun, HeadKind, Scope,
    HEAD_DROPOUT, HEAD_HIDDEN,
};
pub use optim::{adamw_step, cosine_lr, AdamState};
pub use pretrain::{augment, derive_seed, fit_single_cloud, pretrain_loop, PretrainRun, TrainObserver, SCALE_RANGE, SHIFT_RANGE};
