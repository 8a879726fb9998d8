use dafe::crbm::block_probs;
use dafe::eval::cmc;
use dafe::head::SimilarityHead;
use dafe::loss::{quadruplet_as_triplets, quadruplet_loss, quadruplet_triplet_terms, Margins};
use dafe::mining::{mine_quadruplet, BatchLabels, Quadruplet};
use dafe::rng::SeededRng;
use dafe::tensor::Tensor;
use proptest::prelude::*;

/// Labels with at least two identities and one positive pair, plus a
/// symmetric score matrix; `grid` draws scores from {0, .25, ..., 1}.
fn batch() -> impl Strategy<Value = (Vec<usize>, Vec<Vec<f64>>)> {
    (3usize..=32, 2usize..=8, any::<bool>(), any::<u64>()).prop_filter_map("needs a pair and a negative", |(n, ids, grid, seed)| {
        let mut rng = SeededRng::new(seed, 0);
        let labels: Vec<usize> = (0..n).map(|_| rng.index(ids)).collect();
        let distinct = labels.iter().any(|&x| x != labels[0]);
        let paired = (0..n).any(|i| (0..i).any(|j| labels[i] == labels[j]));
        if !(distinct && paired) {
            return None;
        }
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let v = if grid { rng.index(5) as f64 * 0.25 } else { rng.normal() };
                s[i][j] = v;
                s[j][i] = v;
            }
        }
        Some((labels, s))
    })
}

/// Brute force over all `(i, j, k, l)`, ordered by (s_ij, i*n + j, -s_ik, k,
/// fallback, s_il, l).
fn exhaustive(s: &[Vec<f64>], labels: &[usize]) -> Quadruplet {
    let n = labels.len();
    let mut best: Option<([f64; 7], Quadruplet)> = None;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    let ok = j != i && l != i && labels[j] == labels[i] && labels[l] == labels[i] && labels[k] != labels[i];
                    if !ok {
                        continue;
                    }
                    let fallback = s[i][l] <= s[i][k];
                    let key = [s[i][j], (i * n + j) as f64, -s[i][k], k as f64, fallback as u8 as f64, s[i][l], l as f64];
                    if best.as_ref().is_none_or(|(b, _)| key.partial_cmp(b) == Some(std::cmp::Ordering::Less)) {
                        let q = Quadruplet { i, j, l, k, s_ij: s[i][j], s_ik: s[i][k], s_il: s[i][l], fallback };
                        best = Some((key, q));
                    }
                }
            }
        }
    }
    best.unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mining_equals_exhaustive_search((labels, s) in batch()) {
        let got = mine_quadruplet(&s, &BatchLabels::new(labels.clone())).unwrap();
        prop_assert_eq!(got, exhaustive(&s, &labels));
    }

    #[test]
    fn mining_ignores_a_common_score_shift((labels, s) in batch(), shift in -3.0f64..3.0) {
        // on the grid a power-of-two shift keeps every comparison exact
        let shift = (shift * 4.0).round() / 4.0;
        let moved: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect();
        let lab = BatchLabels::new(labels);
        let (a, b) = (mine_quadruplet(&s, &lab).unwrap(), mine_quadruplet(&moved, &lab).unwrap());
        if s.iter().flatten().all(|x| (x * 4.0).fract() == 0.0) {
            prop_assert_eq!((a.i, a.j, a.k, a.l, a.fallback), (b.i, b.j, b.k, b.l, b.fallback));
        }
    }

    #[test]
    fn quadruplet_loss_bounds_and_monotonicity(
        s_ij in -3.0f64..3.0, s_ik in -3.0f64..3.0, s_il in -3.0f64..3.0, bump in 0.0f64..2.0,
    ) {
        let m = Margins::default();
        let q = Quadruplet { i: 0, j: 1, l: 1, k: 2, s_ij, s_ik, s_il, fallback: false };
        let loss = quadruplet_loss(&q, &m);
        prop_assert!(loss >= 0.0);
        let satisfied = s_ij >= s_ik + m.alpha1 && s_il >= s_ik + m.alpha2;
        prop_assert_eq!(loss == 0.0, satisfied);
        let closer_positive = quadruplet_loss(&Quadruplet { s_ij: s_ij + bump, ..q.clone() }, &m);
        let closer_negative = quadruplet_loss(&Quadruplet { s_ik: s_ik + bump, ..q }, &m);
        prop_assert!(closer_positive <= loss);
        prop_assert!(closer_negative >= loss);
    }

    #[test]
    fn two_triplets_equal_the_combined_form(seed in any::<u64>(), alpha in 0.01f64..2.0) {
        let mut rng = SeededRng::new(seed, 0);
        let mut f = || (0..6).map(|_| rng.normal()).collect::<Vec<f64>>();
        let (fi, fj, fl, fk) = (f(), f(), f(), f());
        let terms = quadruplet_triplet_terms(&fi, &fj, &fl, &fk, alpha);
        let combined = quadruplet_as_triplets(&fi, &fj, &fl, &fk, alpha);
        prop_assert!((terms.max(0.0) - combined).abs() < 1e-12);
    }

    #[test]
    fn head_is_symmetric(seed in any::<u64>(), d in 1usize..12) {
        let mut rng = SeededRng::new(seed, 0);
        let head = SimilarityHead::random(d, 0.3, &mut rng).unwrap();
        let mut unit = || {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
        };
        let (a, b) = (unit(), unit());
        prop_assert_eq!(head.similarity(&a, &b).unwrap().to_bits(), head.similarity(&b, &a).unwrap().to_bits());
    }

    #[test]
    fn block_probabilities_normalize(seed in any::<u64>(), pool in 1usize..4, blocks in 1usize..4, scale in 0.1f64..200.0) {
        let mut rng = SeededRng::new(seed, 0);
        let side = pool * blocks;
        let p = block_probs(&Tensor::from_fn(&[2, side, side], |_| scale * rng.normal()), pool).unwrap();
        for (b, off) in p.off.data().iter().enumerate() {
            let (k, by, bx) = (b / (blocks * blocks), b / blocks % blocks, b % blocks);
            let mut on = 0.0;
            for t in 0..pool * pool {
                on += p.detection.data()[(k * side + by * pool + t / pool) * side + bx * pool + t % pool];
            }
            prop_assert_eq!(on, p.pooling.data()[b]);
            prop_assert!((on + off - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cmc_is_monotone_and_rank_invariant(seed in any::<u64>(), probes in 1usize..10, gallery in 1usize..12) {
        let mut rng = SeededRng::new(seed, 0);
        let gallery_ids: Vec<usize> = (0..gallery).map(|_| rng.index(5)).collect();
        let probe_ids: Vec<usize> = (0..probes).map(|_| gallery_ids[rng.index(gallery)]).collect();
        let scores: Vec<Vec<f64>> = (0..probes).map(|_| (0..gallery).map(|_| rng.index(7) as f64 / 4.0).collect()).collect();
        let base = cmc(&scores, &probe_ids, &gallery_ids).unwrap();
        prop_assert!(base.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(base.cmc.last().copied(), Some(1.0));
        let warped: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|x| x.exp() - 1.0 / (1.0 + x)).collect()).collect();
        let w = cmc(&warped, &probe_ids, &gallery_ids).unwrap();
        prop_assert_eq!(&w.cmc, &base.cmc);
        prop_assert_eq!(w.map, base.map);
    }

    #[test]
    fn raising_a_true_match_never_lowers_rates(seed in any::<u64>(), probes in 1usize..8, gallery in 2usize..10) {
        let mut rng = SeededRng::new(seed, 0);
        let gallery_ids: Vec<usize> = (0..gallery).map(|_| rng.index(4)).collect();
        let probe_ids: Vec<usize> = (0..probes).map(|_| gallery_ids[rng.index(gallery)]).collect();
        let scores: Vec<Vec<f64>> = (0..probes).map(|_| (0..gallery).map(|_| rng.index(3) as f64).collect()).collect();
        let mut nudged = scores.clone();
        for (row, id) in nudged.iter_mut().zip(&probe_ids) {
            for (s, g) in row.iter_mut().zip(&gallery_ids) {
                if g == id {
                    *s += 1e-12;
                }
            }
        }
        let (a, b) = (cmc(&scores, &probe_ids, &gallery_ids).unwrap(), cmc(&nudged, &probe_ids, &gallery_ids).unwrap());
        prop_assert!(a.cmc.iter().zip(&b.cmc).all(|(x, y)| x <= y));
        prop_assert!(a.map <= b.map);
    }
}
