//! Single-shot re-identification protocol: random splits, CMC and mAP.
//!
//! Ties are broken pessimistically: a gallery item scoring exactly as high as
//! the true match counts as ranked above it.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageLabel {
    pub identity: usize,
    pub view: usize,
}

/// One trial: indices into the dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSplit {
    pub trial: usize,
    pub probes: Vec<usize>,
    pub gallery: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub trials: Vec<EvalSplit>,
    /// Identities without images in both the probe and gallery side.
    pub excluded_identities: usize,
}

/// Per trial, one random gallery image per identity from `gallery_view`;
/// every image of that identity from another view is a probe.
pub fn make_splits(labels: &[ImageLabel], gallery_view: usize, trials: usize, rng: &mut SeededRng) -> Result<Splits> {
    if trials == 0 {
        return Err(Error::param("need at least one trial"));
    }
    let ids = {
        let mut v: Vec<usize> = labels.iter().map(|l| l.identity).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut usable = Vec::new();
    let mut excluded = 0;
    for &id in &ids {
        let gal: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i].identity == id && labels[i].view == gallery_view)
            .collect();
        let probes: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i].identity == id && labels[i].view != gallery_view)
            .collect();
        if gal.is_empty() || probes.is_empty() {
            excluded += 1;
        } else {
            usable.push((gal, probes));
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} identities lack a probe or gallery view and are excluded");
    }
    if usable.is_empty() {
        return Err(Error::data("no identity has images in both probe and gallery views"));
    }
    let trials = (0..trials)
        .map(|trial| {
            let mut split = EvalSplit {
                trial,
                probes: Vec::new(),
                gallery: Vec::new(),
            };
            for (gal, probes) in &usable {
                split.gallery.push(gal[rng.index(gal.len())]);
                split.probes.extend_from_slice(probes);
            }
            split
        })
        .collect();
    Ok(Splits {
        trials,
        excluded_identities: excluded,
    })
}

/// 1-based rank of the true match for each probe row. Rows whose identity is
/// absent from the gallery come back as `None`.
pub fn match_ranks(scores: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize]) -> Result<Vec<Option<usize>>> {
    if scores.len() != probe_ids.len() || scores.iter().any(|r| r.len() != gallery_ids.len()) {
        return Err(Error::dim(format!(
            "score matrix does not match {} probes x {} gallery",
            probe_ids.len(),
            gallery_ids.len()
        )));
    }
    Ok(scores
        .iter()
        .zip(probe_ids)
        .map(|(row, &id)| {
            let best = row
                .iter()
                .zip(gallery_ids)
                .filter(|(_, &g)| g == id)
                .map(|(s, _)| *s)
                .max_by(f64::total_cmp)?;
            let above = row
                .iter()
                .zip(gallery_ids)
                .filter(|(s, &g)| g != id && **s >= best)
                .count();
            Some(above + 1)
        })
        .collect())
}

/// `rate[r - 1]` is the fraction of ranked probes matched at rank `<= r`.
pub fn cmc_from_ranks(ranks: &[usize], gallery_size: usize) -> Vec<f64> {
    let mut counts = vec![0usize; gallery_size];
    for &r in ranks {
        if (1..=gallery_size).contains(&r) {
            counts[r - 1] += 1;
        }
    }
    let total = ranks.len().max(1) as f64;
    let mut acc = 0;
    counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / total
        })
        .collect()
}

/// Single relevant item per probe, so each AP is `1 / rank`.
pub fn map_from_ranks(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Probes whose identity had no gallery entry.
    pub excluded: usize,
}

pub fn cmc(scores: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize]) -> Result<Ranking> {
    let ranks = match_ranks(scores, probe_ids, gallery_ids)?;
    let kept: Vec<usize> = ranks.iter().flatten().copied().collect();
    Ok(Ranking {
        cmc: cmc_from_ranks(&kept, gallery_ids.len()),
        map: map_from_ranks(&kept),
        excluded: ranks.len() - kept.len(),
    })
}

pub fn map_score(scores: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize]) -> Result<f64> {
    Ok(cmc(scores, probe_ids, gallery_ids)?.map)
}

/// Multiple-query fusion: one row per probe identity holding the elementwise
/// maximum over that identity's query rows. Returns rows and their ids.
pub fn max_pool_queries(scores: &[Vec<f64>], probe_ids: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut ids: Vec<usize> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row, &id) in scores.iter().zip(probe_ids) {
        match ids.iter().position(|&x| x == id) {
            Some(p) => rows[p].iter_mut().zip(row).for_each(|(a, b)| *a = a.max(*b)),
            None => {
                ids.push(id);
                rows.push(row.clone());
            }
        }
    }
    (rows, ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean CMC over trials.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub trials: usize,
    pub per_trial_cmc: Vec<Vec<f64>>,
    pub per_trial_map: Vec<f64>,
    pub excluded_probes: usize,
}

impl EvalReport {
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc.get(r.saturating_sub(1)).copied().unwrap_or(0.0)
    }
}

/// Score every probe against the gallery of each trial and average.
pub fn evaluate_splits(
    splits: &[EvalSplit],
    labels: &[ImageLabel],
    mq: bool,
    mut score: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<EvalReport> {
    if splits.is_empty() {
        return Err(Error::param("no evaluation trials"));
    }
    let mut per_trial_cmc = Vec::with_capacity(splits.len());
    let mut per_trial_map = Vec::with_capacity(splits.len());
    let mut excluded_probes = 0;
    for split in splits {
        let gallery_ids: Vec<usize> = split.gallery.iter().map(|&g| labels[g].identity).collect();
        let mut rows = Vec::with_capacity(split.probes.len());
        for &p in &split.probes {
            rows.push(split.gallery.iter().map(|&g| score(p, g)).collect::<Result<Vec<f64>>>()?);
        }
        let mut probe_ids: Vec<usize> = split.probes.iter().map(|&p| labels[p].identity).collect();
        if mq {
            let (pooled, ids) = max_pool_queries(&rows, &probe_ids);
            rows = pooled;
            probe_ids = ids;
        }
        let ranking = cmc(&rows, &probe_ids, &gallery_ids)?;
        excluded_probes += ranking.excluded;
        per_trial_cmc.push(ranking.cmc);
        per_trial_map.push(ranking.map);
    }
    let g = per_trial_cmc.iter().map(Vec::len).max().unwrap_or(0);
    let t = splits.len() as f64;
    let cmc = (0..g)
        .map(|r| per_trial_cmc.iter().map(|c| c.get(r).copied().unwrap_or(1.0)).sum::<f64>() / t)
        .collect();
    Ok(EvalReport {
        cmc,
        map: per_trial_map.iter().sum::<f64>() / t,
        trials: splits.len(),
        per_trial_cmc,
        per_trial_map,
        excluded_probes,
    })
}

/// `trial,rank,rate`, one row per trial and rank.
pub fn write_cmc_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "trial,rank,rate")?;
    for (t, curve) in report.per_trial_cmc.iter().enumerate() {
        for (r, rate) in curve.iter().enumerate() {
            writeln!(out, "{t},{},{rate}", r + 1)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `metric,value` with rank-1/5/10/20, mAP and the trial count.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "metric,value")?;
    for r in [1, 5, 10, 20] {
        if r <= report.cmc.len() {
            writeln!(out, "rank{r},{}", report.rank(r))?;
        }
    }
    writeln!(out, "map,{}", report.map)?;
    writeln!(out, "trials,{}", report.trials)?;
    out.flush()?;
    Ok(())
}
