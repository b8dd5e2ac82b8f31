//! Property tests against independently written oracles.

use proptest::prelude::*;

use xreid::cpc::{momentum_blend, BatchFeatures, PrototypeMemory};
use xreid::data::Modality;
use xreid::metrics::{cmc, cosine_distance, mean_ap, Entry, Protocol, RetrievalRun};
use xreid::mii::channel_exchange_clip;
use xreid::tape::Tape;
use xreid::tensor::{dot, Tensor};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 128,
        ..ProptestConfig::default()
    }
}

/// Naive triple loop over (frame, patch, channel).
fn exchange_oracle(x: &[f64], t: usize, n: usize, d: usize) -> Vec<f64> {
    let q = d / 4;
    let mut out = vec![0.0; x.len()];
    for f in 0..t {
        let prev = if f == 0 { f } else { f - 1 };
        let next = if f + 1 == t { f } else { f + 1 };
        for p in 0..n {
            for c in 0..d {
                let src = if c < q {
                    prev
                } else if c < 2 * q {
                    next
                } else {
                    f
                };
                out[(f * n + p) * d + c] = x[(src * n + p) * d + c];
            }
        }
    }
    out
}

fn exchange_case() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..=6, 1usize..=8, prop::sample::select(vec![4usize, 8, 64])).prop_flat_map(|(t, n, d)| {
        prop::collection::vec(-1e3f64..1e3, t * n * d).prop_map(move |v| (t, n, d, v))
    })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn channel_exchange_matches_oracle((t, n, d, x) in exchange_case()) {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![t, n, d], x.clone()).unwrap());
        let out = channel_exchange_clip(&mut tape, v, 1).unwrap();
        let got: Vec<u64> = tape.value(out).data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = exchange_oracle(&x, t, n, d).iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn channel_exchange_index_map((t, n, d, _) in exchange_case()) {
        // Unique values: each output element names its source (frame, patch, channel).
        let ids: Vec<f64> = (0..t * n * d).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![t, n, d], ids).unwrap());
        let out = channel_exchange_clip(&mut tape, v, 1).unwrap();
        let q = d / 4;
        for (i, &src) in tape.value(out).data().iter().enumerate() {
            let (f, p, c) = (i / (n * d), (i / d) % n, i % d);
            let src = src as usize;
            let (sf, sp, sc) = (src / (n * d), (src / d) % n, src % d);
            prop_assert_eq!((sp, sc), (p, c));
            let expected = if c < q {
                f.saturating_sub(1)
            } else if c < 2 * q {
                (f + 1).min(t - 1)
            } else {
                f
            };
            prop_assert_eq!(sf, expected);
        }
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn momentum_contracts_geometrically(
        m0 in prop::collection::vec(-1.0f64..1.0, 6),
        b in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let mu = 0.2;
        let dist = |m: &[f64]| m.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let d0 = dist(&m0);
        let mut m = m0.clone();
        for n in 1..=20 {
            m = momentum_blend(&m, &b, mu);
            prop_assert!((dist(&m) - mu.powi(n) * d0).abs() < 1e-10);
        }
    }

    #[test]
    fn hard_selection_matches_scan(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 8..16),
        labels in prop::collection::vec((0usize..3, any::<bool>()), 16),
        proto in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let b = rows.len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(unit).collect();
        let identities: Vec<usize> = labels[..b].iter().map(|l| l.0).collect();
        let modalities: Vec<Modality> = labels[..b]
            .iter()
            .map(|l| if l.1 { Modality::Infrared } else { Modality::Visible })
            .collect();
        let batch = BatchFeatures {
            embeddings: Tensor::from_rows(&rows).unwrap(),
            identities: identities.clone(),
            modalities: modalities.clone(),
        };
        let proto = unit(proto);
        let memory = PrototypeMemory::from_embeddings(
            Modality::Visible,
            3,
            0.2,
            (0..3).map(|i| (i, proto.as_slice())),
        ).unwrap();
        for identity in 0..3 {
            let mut best: Option<(usize, f64)> = None;
            for i in 0..b {
                if identities[i] == identity && modalities[i] == Modality::Infrared {
                    let sim: f64 = rows[i].iter().zip(&proto).map(|(x, y)| x * y).sum();
                    match best {
                        Some((_, s)) if s <= sim => {}
                        _ => best = Some((i, sim)),
                    }
                }
            }
            match (memory.select_hard_cross(&batch, identity), best) {
                (Ok(got), Some((want, _))) => prop_assert_eq!(got, want),
                (Err(_), None) => {}
                (got, want) => prop_assert!(false, "selection {:?} vs scan {:?}", got.ok(), want),
            }
        }
    }
}

/// Position of every gallery item in the ranking, by counting the items that
/// must precede it.
fn oracle_ranks(q: &Entry, gallery: &[Entry]) -> Vec<usize> {
    let d: Vec<f64> = gallery.iter().map(|g| cosine_distance(&q.embedding, &g.embedding)).collect();
    (0..gallery.len())
        .map(|i| {
            (0..gallery.len())
                .filter(|&j| d[j] < d[i] || (d[j] == d[i] && gallery[j].clip_id < gallery[i].clip_id))
                .count()
        })
        .collect()
}

fn oracle_metrics(run: &RetrievalRun, ks: &[usize]) -> (Vec<f64>, f64) {
    let mut hits = vec![0usize; ks.len()];
    let mut ap_sum = 0.0;
    for q in &run.queries {
        let ranks = oracle_ranks(q, &run.gallery);
        let mut relevant: Vec<usize> = (0..run.gallery.len())
            .filter(|&i| run.gallery[i].identity == q.identity)
            .map(|i| ranks[i])
            .collect();
        relevant.sort_unstable();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if relevant[0] < k {
                *h += 1;
            }
        }
        let mut ap = 0.0;
        for (found, &r) in relevant.iter().enumerate() {
            ap += (found + 1) as f64 / (r + 1) as f64;
        }
        ap_sum += ap / relevant.len() as f64;
    }
    let n = run.queries.len() as f64;
    (hits.iter().map(|&h| h as f64 / n).collect(), ap_sum / n)
}

fn retrieval_case() -> impl Strategy<Value = RetrievalRun> {
    // Small integer coordinates make exact distance ties common.
    let entry = (prop::collection::vec(-2i32..=2, 3), 0usize..4);
    (
        prop::collection::vec(entry.clone(), 1..=6),
        prop::collection::vec(entry, 1..=10),
        prop::collection::vec(0usize..100, 10),
    )
        .prop_map(|(queries, gallery, ids)| {
            let to_entry = |(v, identity): (Vec<i32>, usize), clip_id: usize| Entry {
                embedding: v.into_iter().map(f64::from).collect(),
                identity,
                clip_id,
            };
            let gallery: Vec<Entry> = gallery
                .into_iter()
                .enumerate()
                .map(|(i, e)| to_entry(e, 1000 + ids[i] * 10 + i))
                .collect();
            // Queries take identities present in the gallery.
            let queries = queries
                .into_iter()
                .enumerate()
                .map(|(i, (v, id))| to_entry((v, gallery[id % gallery.len()].identity), i))
                .collect();
            RetrievalRun {
                protocol: Protocol::I2V,
                queries,
                gallery,
            }
        })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn metrics_match_definitional_oracle(run in retrieval_case()) {
        let ks = [1, 2, 3, 5, 20];
        let (want_cmc, want_map) = oracle_metrics(&run, &ks);
        prop_assert_eq!(cmc(&run, &ks).unwrap(), want_cmc);
        prop_assert_eq!(mean_ap(&run).unwrap().0, want_map);
    }

    #[test]
    fn metrics_ignore_gallery_order(run in retrieval_case(), seed in any::<u64>()) {
        let mut shuffled = run.clone();
        let len = shuffled.gallery.len();
        for i in (1..len).rev() {
            let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % (i as u64 + 1)) as usize;
            shuffled.gallery.swap(i, j);
        }
        prop_assert_eq!(cmc(&run, &[1, 5]).unwrap(), cmc(&shuffled, &[1, 5]).unwrap());
        prop_assert_eq!(mean_ap(&run).unwrap().0, mean_ap(&shuffled).unwrap().0);
    }
}
