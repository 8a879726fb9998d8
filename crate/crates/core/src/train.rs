//! Supervised fine-tuning of the similarity head and the top stack layers on
//! P x K identity batches, plus model evaluation on held-out identities.
//!
//! Training is phrased as a finite sum over mini-batches so that every
//! registered [`UpdateRule`] can drive it: batch `n` is drawn from its own rng
//! stream, so evaluating the same batch twice sees the same images.

use std::cell::RefCell;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{evaluate_splits, make_splits, EvalReport, ImageLabel};
use crate::head::SimilarityHead;
use crate::loss::{quadruplet_loss, quadruplet_loss_grad, triplet_loss, triplet_loss_grad, Margins};
use crate::mining::{mine_quadruplet_with, BatchLabels, PositiveMining, Quadruplet};
use crate::optim::{build_neighborhoods, build_rule, FiniteSumProblem, OptimizerState, RuleParams, UpdateRule};
use crate::pipeline::{Cached, Embedder, Embedding, ParamLayout};
use crate::preproc::resize_bilinear;
use crate::rng::SeededRng;
use crate::synth::Dataset;
use crate::tensor::Tensor;

const BATCH_STREAM: u64 = 1 << 32;
const SAMPLER_STREAM: u64 = 11;
const OPTIMIZER_STREAM: u64 = 12;
const BATCH_STREAM_LEN: usize = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Quadruplet,
    Triplet,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Quadruplet => "quadruplet",
            LossKind::Triplet => "triplet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "quadruplet" => Some(LossKind::Quadruplet),
            "triplet" => Some(LossKind::Triplet),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Registered optimizer name.
    pub optimizer: String,
    pub q: usize,
    pub neighbors: usize,
    /// Fixed mini-batches indexed by memory-based optimizers.
    pub batch_pool: usize,
    pub loss: LossKind,
    pub margins: Margins,
    pub triplet_alpha: f64,
    pub positive: PositiveMining,
    /// Mine one quadruplet per identity in the batch instead of one overall.
    pub per_identity: bool,
    /// How many top layers of each stack are fine-tuned.
    pub finetune_layers: usize,
    /// Random 0-5 pixel crop and stretch of every training image.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_p: 8,
            batch_k: 4,
            lr: 0.02,
            momentum: 0.9,
            optimizer: "momentum".into(),
            q: 1,
            neighbors: 5,
            batch_pool: 200,
            loss: LossKind::Quadruplet,
            margins: Margins::default(),
            triplet_alpha: 0.2,
            positive: PositiveMining::Local,
            per_identity: true,
            finetune_layers: 1,
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.margins.validate()?;
        if self.batch_p < 2 || self.batch_k < 2 {
            return Err(Error::config("batches need P >= 2 identities and K >= 2 images"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("learning rate must be >= 0 and momentum in [0, 1)"));
        }
        if self.finetune_layers == 0 {
            return Err(Error::config("at least one stack layer must be fine-tuned"));
        }
        if !(self.triplet_alpha > 0.0) {
            return Err(Error::config("triplet margin must be positive"));
        }
        if self.batch_pool == 0 {
            return Err(Error::config("batch pool must be non-empty"));
        }
        Ok(())
    }
}

/// One CSV row; triplet runs leave the score columns as NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRow {
    pub iteration: usize,
    pub loss: f64,
    pub s_ij: f64,
    pub s_ik: f64,
    pub s_il: f64,
    pub fallback: bool,
}

pub const TRAIN_CSV_HEADER: &str = "iteration,loss,s_ij,s_ik,s_il,fallback_flag";

impl TrainRow {
    pub fn csv(&self) -> String {
        let f = |x: f64| if x.is_nan() { String::new() } else { x.to_string() };
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            self.loss,
            f(self.s_ij),
            f(self.s_ik),
            f(self.s_il),
            u8::from(self.fallback)
        )
    }
}

pub fn write_train_csv(path: &Path, rows: &[TrainRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{TRAIN_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    out.flush()?;
    Ok(())
}

/// Everything that changes while training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub opt: OptimizerState,
    /// Picks batch indices for memory-based rules.
    pub sampler: SeededRng,
    pub iteration: usize,
}

/// Random crop of 0-5 pixels per side, stretched back to the input size.
pub fn random_crop_stretch(image: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
    let (h, w) = image.dims2()?;
    let cut = |rng: &mut SeededRng| rng.index(6);
    let (top, bottom, left, right) = (cut(rng), cut(rng), cut(rng), cut(rng));
    if top + bottom + 2 > h || left + right + 2 > w {
        return Ok(image.clone());
    }
    let (ch, cw) = (h - top - bottom, w - left - right);
    let crop = Tensor::from_fn(&[ch, cw], |p| image.data()[(top + p / cw) * w + left + p % cw]);
    resize_bilinear(&crop, h, w)
}

struct StepStats {
    loss: f64,
    s: [f64; 3],
    fallback: bool,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    /// Image indices per training identity.
    groups: Vec<Vec<usize>>,
    base: Embedder,
    head_dim: usize,
    layout: ParamLayout,
    cache: Vec<Option<Cached>>,
    rule: Box<dyn UpdateRule>,
    last: RefCell<Option<StepStats>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset, train_ids: &[usize], emb: Embedder, head: &SimilarityHead) -> Result<Self> {
        cfg.validate()?;
        let groups: Vec<Vec<usize>> = train_ids
            .iter()
            .map(|&id| (0..data.len()).filter(|&i| data.labels[i].identity == id).collect())
            .collect();
        if groups.len() < cfg.batch_p || groups.iter().any(|g| g.len() < cfg.batch_k) {
            return Err(Error::config(format!(
                "{} training identities cannot fill {}x{} batches",
                groups.len(),
                cfg.batch_p,
                cfg.batch_k
            )));
        }
        let d = emb.feature_dim()?;
        if head.d != d {
            return Err(Error::dim(format!("head is {}-d but features are {d}-d", head.d)));
        }
        let depth = emb.depth();
        let from = depth.saturating_sub(cfg.finetune_layers);
        let layout = ParamLayout::new(head.param_len(), &emb, from)?;
        let mut cache = vec![None; data.len()];
        if !cfg.augment {
            for g in &groups {
                for &i in g {
                    cache[i] = Some(emb.cache(&data.images[i], from)?);
                }
            }
        }
        let rule = build_rule(
            &cfg.optimizer,
            &RuleParams {
                q: cfg.q,
                k: cfg.neighbors,
                beta: cfg.momentum,
                forced: false,
            },
        )?;
        Ok(Trainer {
            cfg,
            data,
            groups,
            base: emb,
            head_dim: d,
            layout,
            cache,
            rule,
            last: RefCell::new(None),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn initial_state(&self, head: &SimilarityHead) -> Result<TrainState> {
        let w = self.layout.flatten(&head.params(), &self.base);
        let mut opt = OptimizerState::for_rule(
            self.rule.as_ref(),
            w,
            self.len(),
            self.cfg.lr,
            SeededRng::new(self.cfg.seed, OPTIMIZER_STREAM),
        )?;
        if self.cfg.optimizer == "nsaga" {
            // neighborhoods over mean initial embeddings of each pooled batch
            let points = (0..self.len())
                .map(|n| {
                    let (members, mut rng) = self.batch(n);
                    let mut mean = vec![0.0; self.head_dim];
                    for &i in &members {
                        let f = self.base.forward(&self.cached(i, &mut rng)?, self.layout.from)?;
                        mean.iter_mut().zip(f.features()).for_each(|(m, x)| *m += x);
                    }
                    Ok(mean)
                })
                .collect::<Result<Vec<_>>>()?;
            opt.neighborhoods = Some(build_neighborhoods(&points, self.cfg.neighbors)?);
        }
        Ok(TrainState {
            opt,
            sampler: SeededRng::new(self.cfg.seed, SAMPLER_STREAM),
            iteration: 0,
        })
    }

    /// Current model as standalone parts.
    pub fn model(&self, state: &TrainState) -> Result<(Embedder, SimilarityHead)> {
        self.materialize(&state.opt.w)
    }

    fn materialize(&self, w: &[f64]) -> Result<(Embedder, SimilarityHead)> {
        let mut emb = self.base.clone();
        let head_params = self.layout.apply(w, &mut emb);
        let mut head = SimilarityHead::zeros(self.head_dim);
        head.set_params(head_params)?;
        Ok((emb, head))
    }

    /// Image indices of mini-batch `n` and the rng that continues its stream.
    fn batch(&self, n: usize) -> (Vec<usize>, SeededRng) {
        let mut rng = SeededRng::new(self.cfg.seed, BATCH_STREAM + n as u64);
        let ids = rng.choose_distinct(self.groups.len(), self.cfg.batch_p);
        let mut members = Vec::with_capacity(self.cfg.batch_p * self.cfg.batch_k);
        for g in ids {
            let group = &self.groups[g];
            for m in rng.choose_distinct(group.len(), self.cfg.batch_k) {
                members.push(group[m]);
            }
        }
        (members, rng)
    }

    fn cached(&self, i: usize, rng: &mut SeededRng) -> Result<Cached> {
        match &self.cache[i] {
            Some(c) => Ok(c.clone()),
            None => {
                let img = random_crop_stretch(&self.data.images[i], rng)?;
                self.base.cache(&img, self.layout.from)
            }
        }
    }

    /// Advance until `state.iteration == until`, reporting each row.
    pub fn run(&self, state: &mut TrainState, until: usize, on_row: &mut dyn FnMut(&TrainRow) -> Result<()>) -> Result<()> {
        while state.iteration < until.min(self.cfg.iterations) {
            let n = if self.rule.uses_memory() {
                state.sampler.index(self.len())
            } else {
                state.iteration
            };
            self.last.replace(None);
            self.rule.step(&mut state.opt, self, n)?;
            if !state.opt.w.iter().all(|x| x.is_finite()) {
                return Err(Error::data(format!("training diverged at iteration {}", state.iteration)));
            }
            let stats = self
                .last
                .borrow_mut()
                .take()
                .ok_or_else(|| Error::contract("optimizer step evaluated no gradient"))?;
            let row = TrainRow {
                iteration: state.iteration,
                loss: stats.loss,
                s_ij: stats.s[0],
                s_ik: stats.s[1],
                s_il: stats.s[2],
                fallback: stats.fallback,
            };
            state.iteration += 1;
            on_row(&row)?;
        }
        Ok(())
    }

    /// Loss of batch `n` at parameters `w`, mining included.
    pub fn batch_loss(&self, n: usize, w: &[f64]) -> Result<f64> {
        let mut scratch = vec![0.0; w.len()];
        Ok(self.evaluate_batch(n, w, &mut scratch)?.loss)
    }

    fn evaluate_batch(&self, n: usize, w: &[f64], out: &mut [f64]) -> Result<StepStats> {
        let (emb, head) = self.materialize(w)?;
        let (members, mut rng) = self.batch(n);
        let from = self.layout.from;
        let embs: Vec<Embedding> = members
            .iter()
            .map(|&i| emb.forward(&self.cached(i, &mut rng)?, from))
            .collect::<Result<_>>()?;
        let feats: Vec<Vec<f64>> = embs.iter().map(|e| e.out.values.clone()).collect();
        let labels = BatchLabels::new(members.iter().map(|&i| self.data.labels[i].identity).collect());
        out.iter_mut().for_each(|x| *x = 0.0);
        let d = self.head_dim;
        let mut g_feat = vec![vec![0.0; d]; members.len()];

        let stats = match self.cfg.loss {
            LossKind::Quadruplet => {
                let scores = head.score_matrix(&feats)?;
                let quads = self.quadruplets(&scores, &labels, &mut rng)?;
                let scale = 1.0 / quads.len() as f64;
                let mut stats = StepStats {
                    loss: 0.0,
                    s: [0.0; 3],
                    fallback: false,
                };
                for q in &quads {
                    stats.loss += scale * quadruplet_loss(q, &self.cfg.margins);
                    stats.s[0] += scale * q.s_ij;
                    stats.s[1] += scale * q.s_ik;
                    stats.s[2] += scale * q.s_il;
                    stats.fallback |= q.fallback;
                    let g = quadruplet_loss_grad(q, &self.cfg.margins);
                    for (b, c) in [(q.j, g.d_ij), (q.k, g.d_ik), (q.l, g.d_il)] {
                        if c == 0.0 {
                            continue;
                        }
                        let fw = head.forward(&feats[q.i], &feats[b])?;
                        let hg = head.backward(&fw, &feats[q.i], &feats[b], c * scale);
                        hg.accumulate_params(&mut out[..self.layout.head_len]);
                        g_feat[q.i].iter_mut().zip(&hg.f_i).for_each(|(a, x)| *a += x);
                        g_feat[b].iter_mut().zip(&hg.f_j).for_each(|(a, x)| *a += x);
                    }
                }
                stats
            }
            LossKind::Triplet => {
                let trips = self.triplets(&labels, &mut rng);
                let loss = triplet_loss(&feats, &trips, self.cfg.triplet_alpha, Some(&labels))?;
                g_feat = triplet_loss_grad(&feats, &trips, self.cfg.triplet_alpha)?;
                StepStats {
                    loss,
                    s: [f64::NAN; 3],
                    fallback: false,
                }
            }
        };
        for (e, g) in embs.iter().zip(&g_feat) {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let lg = emb.backward(e, g, from)?;
            self.layout.accumulate(&lg, out);
        }
        Ok(stats)
    }

    fn quadruplets(&self, scores: &[Vec<f64>], labels: &BatchLabels, rng: &mut SeededRng) -> Result<Vec<Quadruplet>> {
        if !self.cfg.per_identity {
            return Ok(vec![mine_quadruplet_with(scores, labels, self.cfg.positive, Some(rng))?]);
        }
        let mut ids: Vec<usize> = labels.labels().to_vec();
        ids.dedup();
        ids.into_iter()
            .map(|id| {
                // hide the positive pairs of other identities from the anchor search
                let masked: Vec<Vec<f64>> = (0..labels.len())
                    .map(|a| {
                        (0..labels.len())
                            .map(|b| {
                                if labels.is_positive(a, b) && labels.label(a) != id {
                                    f64::INFINITY
                                } else {
                                    scores[a][b]
                                }
                            })
                            .collect()
                    })
                    .collect();
                mine_quadruplet_with(&masked, labels, self.cfg.positive, Some(rng))
            })
            .collect()
    }

    fn triplets(&self, labels: &BatchLabels, rng: &mut SeededRng) -> Vec<(usize, usize, usize)> {
        (0..labels.len())
            .map(|a| {
                let pos: Vec<usize> = labels.positives_of(a).collect();
                let neg: Vec<usize> = labels.negatives_of(a).collect();
                (a, pos[rng.index(pos.len())], neg[rng.index(neg.len())])
            })
            .collect()
    }
}

impl FiniteSumProblem for Trainer<'_> {
    /// Batch pool size for memory-based rules. Other rules index an unbounded
    /// stream of batches by iteration, so extending a run keeps the state valid.
    fn len(&self) -> usize {
        if self.rule.uses_memory() {
            self.cfg.batch_pool
        } else {
            BATCH_STREAM_LEN
        }
    }

    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn gradient(&self, n: usize, w: &[f64], out: &mut [f64]) -> Result<()> {
        let stats = self.evaluate_batch(n, w, out)?;
        let mut last = self.last.borrow_mut();
        if last.is_none() {
            *last = Some(stats);
        }
        Ok(())
    }

    /// The embedding objective is not convex; decreasing schedules reduce to constant steps.
    fn mu(&self) -> f64 {
        0.0
    }
}

/// How a trained model compares two embeddings.
#[derive(Clone, Copy, Debug)]
pub enum Scorer<'h> {
    Head(&'h SimilarityHead),
    /// Negative squared Euclidean distance (triplet-trained models).
    NegSqDist,
}

impl Scorer<'_> {
    pub fn score(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Scorer::Head(h) => h.similarity(a, b),
            Scorer::NegSqDist => Ok(-a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub trials: usize,
    pub gallery_view: usize,
    pub mq: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 10,
            gallery_view: 1,
            mq: false,
            seed: 0,
        }
    }
}

/// Embed the images of `ids` once and run the single-shot protocol on them.
pub fn evaluate_model(emb: &Embedder, scorer: Scorer<'_>, data: &Dataset, ids: &[usize], cfg: &EvalConfig) -> Result<EvalReport> {
    let idx = data.indices_of(ids);
    let labels: Vec<ImageLabel> = idx.iter().map(|&i| data.labels[i]).collect();
    let feats: Vec<Vec<f64>> = idx.iter().map(|&i| emb.embed_unchecked(&data.images[i])).collect::<Result<_>>()?;
    let mut rng = SeededRng::new(cfg.seed, 0);
    let splits = make_splits(&labels, cfg.gallery_view, cfg.trials, &mut rng)?;
    evaluate_splits(&splits.trials, &labels, cfg.mq, |p, g| scorer.score(&feats[p], &feats[g]))
}

/// `count` random (anchor, positive, negative) image triplets over `ids`.
pub fn sample_triplets(data: &Dataset, ids: &[usize], count: usize, rng: &mut SeededRng) -> Result<Vec<(usize, usize, usize)>> {
    let idx = data.indices_of(ids);
    let labels = BatchLabels::new(idx.iter().map(|&i| data.labels[i].identity).collect());
    let mut out = Vec::with_capacity(count);
    if labels.is_empty() {
        return Err(Error::data("no images for the requested identities"));
    }
    while out.len() < count {
        let a = rng.index(idx.len());
        let pos: Vec<usize> = labels.positives_of(a).collect();
        let neg: Vec<usize> = labels.negatives_of(a).collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::data("triplets need two images per identity and two identities"));
        }
        out.push((idx[a], idx[pos[rng.index(pos.len())]], idx[neg[rng.index(neg.len())]]));
    }
    Ok(out)
}

/// Fraction of triplets whose negative scores at least as high as the positive.
pub fn violation_rate(emb: &Embedder, scorer: Scorer<'_>, data: &Dataset, triplets: &[(usize, usize, usize)]) -> Result<f64> {
    let mut feats: Vec<Option<Vec<f64>>> = vec![None; data.len()];
    let mut violated = 0usize;
    for &(a, p, n) in triplets {
        for i in [a, p, n] {
            if feats[i].is_none() {
                feats[i] = Some(emb.embed_unchecked(&data.images[i])?);
            }
        }
        let f = |i: usize| feats[i].as_deref().unwrap_or_default();
        if scorer.score(f(a), f(n))? >= scorer.score(f(a), f(p))? {
            violated += 1;
        }
    }
    Ok(violated as f64 / triplets.len().max(1) as f64)
}
