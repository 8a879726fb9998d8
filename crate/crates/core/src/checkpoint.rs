//! Checkpoint files.
//!
//! ```text
//! "DAFE" | version: u32 | sections...
//! section = name: str | length: u64 | payload
//! ```
//!
//! Strings are a u64 byte count followed by UTF-8; numbers are little-endian.
//! Sections: `config` (the text snapshot), `embedder`, `head`, `train`
//! (optimizer state, batch sampler, iteration). `config` and `embedder` are
//! required. Loading either returns every section or an error with the byte
//! offset of the first problem.

use std::path::Path;

use crate::config::Config;
use crate::crbm::{CdbnStack, CrbmLayer};
use crate::error::{Error, Result};
use crate::head::SimilarityHead;
use crate::io::{ByteReader, ByteWriter};
use crate::optim::{NeighborhoodIndex, OptimizerState};
use crate::pipeline::{Branch, Embedder};
use crate::preproc::{PcaModel, Representation};
use crate::rng::{RngState, SeededRng};
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"DAFE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub embedder: Embedder,
    pub head: Option<SimilarityHead>,
    pub train: Option<TrainState>,
}

fn put_rng(w: &mut ByteWriter, rng: &SeededRng) {
    let s = rng.state();
    w.u64(s.seed);
    w.u64(s.stream);
    w.u128(s.word_pos);
}

fn get_rng(r: &mut ByteReader) -> Result<SeededRng> {
    Ok(SeededRng::from_state(RngState {
        seed: r.u64()?,
        stream: r.u64()?,
        word_pos: r.u128()?,
    }))
}

fn put_usizes(w: &mut ByteWriter, v: &[usize]) {
    w.u64(v.len() as u64);
    v.iter().for_each(|&x| w.u64(x as u64));
}

fn get_usizes(r: &mut ByteReader) -> Result<Vec<usize>> {
    let n = r.len_prefix(8)?;
    (0..n).map(|_| Ok(r.u64()? as usize)).collect()
}

fn encode_embedder(w: &mut ByteWriter, emb: &Embedder) {
    w.u64(emb.branches.len() as u64);
    for b in &emb.branches {
        w.str(&b.representations.iter().map(|r| r.name()).collect::<Vec<_>>().join(","));
        let s = &b.stack;
        w.u64(s.input_channels as u64);
        w.u64(s.input_side as u64);
        w.u32(u32::from(s.pretrained));
        w.u64(s.layers.len() as u64);
        for l in &s.layers {
            w.tensor(&l.filters);
            w.f64s(&l.hidden_bias);
            w.f64(l.visible_bias);
            w.u64(l.pool as u64);
        }
        match &b.pca {
            None => w.u32(0),
            Some(p) => {
                w.u32(1);
                w.u64(p.dim as u64);
                w.u64(p.components as u64);
                w.f64s(&p.mean);
                w.f64s(&p.basis);
                w.f64s(&p.variances);
                w.f64(p.total_variance);
            }
        }
    }
}

fn decode_embedder(r: &mut ByteReader, cfg: &Config) -> Result<Embedder> {
    let n = r.len_prefix(1)?;
    let mut branches = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let representations = r
            .str()?
            .split(',')
            .map(|s| Representation::parse(s).ok_or_else(|| Error::format(at, format!("unknown representation {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let at = r.offset();
        let (channels, side) = (r.u64()? as usize, r.u64()? as usize);
        let pretrained = r.u32()? != 0;
        let depth = r.len_prefix(1)?;
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            layers.push(CrbmLayer {
                filters: r.tensor()?,
                hidden_bias: r.f64s()?,
                visible_bias: r.f64()?,
                pool: r.u64()? as usize,
            });
        }
        let mut stack = CdbnStack::new(layers, channels, side).map_err(|e| Error::format(at, e.to_string()))?;
        stack.pretrained = pretrained;
        let at = r.offset();
        let pca = match r.u32()? {
            0 => None,
            1 => {
                let (dim, components) = (r.u64()? as usize, r.u64()? as usize);
                let p = PcaModel {
                    dim,
                    components,
                    mean: r.f64s()?,
                    basis: r.f64s()?,
                    variances: r.f64s()?,
                    total_variance: r.f64()?,
                };
                if p.mean.len() != dim || p.basis.len() != dim * components || p.variances.len() != components {
                    return Err(Error::format(at, "PCA model sizes disagree"));
                }
                Some(p)
            }
            t => return Err(Error::format(at, format!("bad PCA tag {t}"))),
        };
        branches.push(Branch {
            representations,
            stack,
            pca,
        });
    }
    let emb = Embedder {
        input: cfg.input.clone(),
        mode: cfg.mode,
        branches,
    };
    emb.feature_dim().map_err(|e| Error::format(r.offset(), e.to_string()))?;
    Ok(emb)
}

fn encode_train(w: &mut ByteWriter, s: &TrainState) {
    let o = &s.opt;
    w.f64s(&o.w);
    w.f64s(&o.memory);
    w.f64s(&o.mean);
    w.f64s(&o.velocity);
    w.f64(o.gamma);
    w.u64(o.samples as u64);
    w.u64(o.t);
    w.u64(o.evaluations);
    match &o.neighborhoods {
        None => w.u32(0),
        Some(nb) => {
            w.u32(1);
            w.u64(nb.k as u64);
            w.u64(nb.sets.len() as u64);
            nb.sets.iter().for_each(|set| put_usizes(w, set));
        }
    }
    put_rng(w, &o.rng);
    put_rng(w, &s.sampler);
    w.u64(s.iteration as u64);
}

fn decode_train(r: &mut ByteReader) -> Result<TrainState> {
    let at = r.offset();
    let (w, memory, mean, velocity) = (r.f64s()?, r.f64s()?, r.f64s()?, r.f64s()?);
    let gamma = r.f64()?;
    let samples = r.u64()? as usize;
    let (t, evaluations) = (r.u64()?, r.u64()?);
    let tag_at = r.offset();
    let neighborhoods = match r.u32()? {
        0 => None,
        1 => {
            let k = r.u64()? as usize;
            let n = r.len_prefix(8)?;
            let sets = (0..n).map(|_| get_usizes(r)).collect::<Result<_>>()?;
            Some(NeighborhoodIndex { k, sets })
        }
        t => return Err(Error::format(tag_at, format!("bad neighborhood tag {t}"))),
    };
    let rng = get_rng(r)?;
    let sampler = get_rng(r)?;
    let iteration = r.u64()? as usize;
    let d = w.len();
    if mean.len() != d || velocity.len() != d || !(memory.is_empty() || memory.len() == samples * d) {
        return Err(Error::format(at, "optimizer state sizes disagree"));
    }
    let opt = OptimizerState {
        w,
        memory,
        mean,
        velocity,
        gamma,
        samples,
        t,
        evaluations,
        neighborhoods,
        rng,
    };
    Ok(TrainState { opt, sampler, iteration })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = ByteWriter::default();
        out.bytes(MAGIC);
        out.u32(VERSION);
        let mut section = |name: &str, f: &dyn Fn(&mut ByteWriter)| {
            let mut body = ByteWriter::default();
            f(&mut body);
            out.str(name);
            out.u64(body.buf.len() as u64);
            out.bytes(&body.buf);
        };
        section("config", &|w| w.str(&self.config.to_text()));
        section("embedder", &|w| encode_embedder(w, &self.embedder));
        if let Some(h) = &self.head {
            section("head", &|w| {
                w.u64(h.d as u64);
                w.f64s(&h.params());
            });
        }
        if let Some(t) = &self.train {
            section("train", &|w| encode_train(w, t));
        }
        out.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, not a DAFE checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let (mut config, mut embedder, mut head, mut train) = (None, None, None, None);
        while !r.is_done() {
            let name_at = r.offset();
            let name = r.str()?;
            let len = r.len_prefix(1)?;
            let base = r.offset();
            let mut s = ByteReader::with_base(r.take(len)?, base);
            match name.as_str() {
                "config" => {
                    let text = s.str()?;
                    config = Some(Config::parse(&text).map_err(|e| Error::format(base, e.to_string()))?);
                }
                "embedder" => {
                    let cfg = config
                        .as_ref()
                        .ok_or_else(|| Error::format(name_at, "embedder section before config"))?;
                    embedder = Some(decode_embedder(&mut s, cfg)?);
                }
                "head" => {
                    let d = s.u64()? as usize;
                    let at = s.offset();
                    let mut h = SimilarityHead::zeros(d);
                    h.set_params(&s.f64s()?).map_err(|e| Error::format(at, e.to_string()))?;
                    head = Some(h);
                }
                "train" => train = Some(decode_train(&mut s)?),
                other => return Err(Error::format(name_at, format!("unknown section {other:?}"))),
            }
            if !s.is_done() {
                return Err(Error::format(s.offset(), format!("trailing bytes in section {name:?}")));
            }
        }
        let end = r.offset();
        Ok(Checkpoint {
            config: config.ok_or_else(|| Error::format(end, "missing config section"))?,
            embedder: embedder.ok_or_else(|| Error::format(end, "missing embedder section"))?,
            head,
            train,
        })
    }

    /// Writes to a temporary sibling and renames, so readers never see half a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crbm::FeatureMode;
    use crate::optim::build_neighborhoods;
    use crate::pipeline::StackLayout;
    use crate::preproc::InputSpec;
    use crate::tensor::Tensor;

    fn sample() -> Checkpoint {
        let mut config = Config::toy();
        config.input = InputSpec {
            size: 16,
            representations: vec![Representation::Intensity, Representation::Lbp],
            ..InputSpec::default()
        };
        config.layout = StackLayout::PerRepresentation;
        config.stack.layers = vec![(3, 5, 2), (2, 3, 2)];
        let mut rng = SeededRng::new(4, 0);
        let mut embedder = Embedder::random(
            config.input.clone(),
            config.layout,
            &config.stack,
            FeatureMode::TopLayer,
            0.1,
            &mut rng,
        )
        .unwrap();
        embedder.branches[0].stack.pretrained = true;
        let imgs: Vec<Tensor> = (0..6).map(|i| Tensor::from_fn(&[16, 16], |p| ((p * (i + 3)) % 7) as f64)).collect();
        embedder.fit_pca(&imgs, 3).unwrap();
        let head = SimilarityHead::random(embedder.feature_dim().unwrap(), 0.1, &mut rng).unwrap();
        let w: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let mut opt = OptimizerState::new(w, 4, 0.25, rng.fork(9)).unwrap();
        opt.memory.iter_mut().for_each(|m| *m = 0.1 * std::f64::consts::PI);
        opt.t = 7;
        opt.evaluations = 11;
        opt.neighborhoods = Some(build_neighborhoods(&[vec![0.0], vec![1.0], vec![3.0], vec![3.5]], 2).unwrap());
        let mut sampler = SeededRng::new(4, 11);
        sampler.next_u64();
        Checkpoint {
            config,
            embedder,
            head: Some(head),
            train: Some(TrainState {
                opt,
                sampler,
                iteration: 7,
            }),
        }
    }

    #[test]
    fn bitwise_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.dafe");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn optional_sections() {
        let mut c = sample();
        c.head = None;
        c.train = None;
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn rng_resumes_its_stream() {
        let c = sample();
        let mut back = Checkpoint::from_bytes(&c.to_bytes()).unwrap().train.unwrap();
        let mut orig = c.train.unwrap();
        for _ in 0..5 {
            assert_eq!(back.sampler.next_u64(), orig.sampler.next_u64());
            assert_eq!(back.opt.rng.next_u64(), orig.opt.rng.next_u64());
        }
    }

    #[test]
    fn header_corruption_reports_offset() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 4, .. })));
        let mut bad = bytes.clone();
        bad[8 + 8] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = sample().to_bytes();
        for cut in (0..bytes.len()).step_by(97) {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }
}
