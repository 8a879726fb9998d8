//! The end-to-end pipeline on top of [`Config`]: initialize, pretrain,
//! fine-tune with periodic checkpoints, and evaluate.

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::crbm::EpochReport;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::head::SimilarityHead;
use crate::pipeline::Embedder;
use crate::rng::SeededRng;
use crate::synth::Dataset;
use crate::tensor::Tensor;
use crate::train::{evaluate_model, LossKind, Scorer, TrainRow, Trainer};

const STACK_STREAM: u64 = 100;
const HEAD_STREAM: u64 = 101;
const PRETRAIN_STREAM: u64 = 102;

/// Random stacks and head; nothing trained yet.
pub fn initial_checkpoint(cfg: &Config) -> Result<Checkpoint> {
    let embedder = Embedder::random(
        cfg.input.clone(),
        cfg.layout,
        &cfg.stack,
        cfg.mode,
        cfg.stack_variance,
        &mut SeededRng::new(cfg.seed, STACK_STREAM),
    )?;
    let head = SimilarityHead::random(
        embedder.feature_dim()?,
        cfg.head_variance,
        &mut SeededRng::new(cfg.seed, HEAD_STREAM),
    )?;
    Ok(Checkpoint {
        config: cfg.clone(),
        embedder,
        head: Some(head),
        train: None,
    })
}

/// Training and test identities under the configured split.
pub fn split(cfg: &Config, data: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    data.identity_split(cfg.train_fraction)
}

fn images_of(data: &Dataset, ids: &[usize]) -> Vec<Tensor> {
    data.indices_of(ids).into_iter().map(|i| data.images[i].clone()).collect()
}

/// CD-pretrain every branch on the training identities, then fit PCA if
/// configured. A fresh head is drawn for the (possibly new) feature size.
pub fn pretrain(
    cfg: &Config,
    data: &Dataset,
    ids: &[usize],
    observer: &mut dyn FnMut(usize, &EpochReport),
) -> Result<Checkpoint> {
    let mut ckpt = initial_checkpoint(cfg)?;
    let images = images_of(data, ids);
    ckpt.embedder.pretrain(
        &images,
        cfg.pretrain_epochs,
        &cfg.cd,
        &mut SeededRng::new(cfg.seed, PRETRAIN_STREAM),
        observer,
    )?;
    if cfg.pca > 0 {
        ckpt.embedder.fit_pca(&images, cfg.pca)?;
        ckpt.head = Some(SimilarityHead::random(
            ckpt.embedder.feature_dim()?,
            cfg.head_variance,
            &mut SeededRng::new(cfg.seed, HEAD_STREAM),
        )?);
    }
    Ok(ckpt)
}

/// Fine-tune from `start` (resuming its training state if present) up to
/// `cfg.train.iterations`. `on_checkpoint` sees the model every
/// `checkpoint_every` iterations (0 disables) and once at the end.
pub fn fine_tune(
    cfg: &Config,
    data: &Dataset,
    ids: &[usize],
    start: &Checkpoint,
    checkpoint_every: usize,
    on_row: &mut dyn FnMut(&TrainRow) -> Result<()>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    if !start.embedder.is_pretrained() {
        return Err(Error::contract("fine-tuning needs a pretrained stack"));
    }
    let head = start
        .head
        .clone()
        .ok_or_else(|| Error::contract("checkpoint has no similarity head"))?;
    let trainer = Trainer::new(cfg.train.clone(), data, ids, start.embedder.clone(), &head)?;
    let mut state = match &start.train {
        Some(s) => {
            if s.opt.w.len() != trainer.layout().len() {
                return Err(Error::dim("saved training state does not fit this model"));
            }
            s.clone()
        }
        None => trainer.initial_state(&head)?,
    };
    let snapshot = |state: &crate::train::TrainState| -> Result<Checkpoint> {
        let (embedder, head) = trainer.model(state)?;
        Ok(Checkpoint {
            config: cfg.clone(),
            embedder,
            head: Some(head),
            train: Some(state.clone()),
        })
    };
    let end = cfg.train.iterations;
    while state.iteration < end {
        let next = if checkpoint_every == 0 {
            end
        } else {
            ((state.iteration / checkpoint_every + 1) * checkpoint_every).min(end)
        };
        trainer.run(&mut state, next, on_row)?;
        if next < end {
            on_checkpoint(&snapshot(&state)?)?;
        }
    }
    let done = snapshot(&state)?;
    on_checkpoint(&done)?;
    Ok(done)
}

/// Head scores for quadruplet models, negative squared distance for triplet ones.
pub fn scorer<'h>(cfg: &Config, ckpt: &'h Checkpoint) -> Result<Scorer<'h>> {
    match (cfg.train.loss, &ckpt.head) {
        (LossKind::Triplet, _) => Ok(Scorer::NegSqDist),
        (LossKind::Quadruplet, Some(h)) => Ok(Scorer::Head(h)),
        (LossKind::Quadruplet, None) => Err(Error::contract("checkpoint has no similarity head")),
    }
}

pub fn evaluate(cfg: &Config, ckpt: &Checkpoint, data: &Dataset, ids: &[usize]) -> Result<EvalReport> {
    evaluate_model(&ckpt.embedder, scorer(cfg, ckpt)?, data, ids, &cfg.eval)
}
