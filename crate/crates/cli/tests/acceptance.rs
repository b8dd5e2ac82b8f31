//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xreid::ablation::{mean_map, Grid, Variant, SEEDS};
use xreid::cpc::{momentum_blend, BatchFeatures, PrototypeMemory};
use xreid::data::{Modality, Split};
use xreid::eval::{evaluate_model, extract_features, modality_gap};
use xreid::gradsuite::{run_suite, TOLERANCE};
use xreid::metrics::{cmc, cosine_distance, mean_ap, Entry, Protocol, RetrievalRun};
use xreid::mii::{channel_exchange, ClipLayout};
use xreid::model::Toggles;
use xreid::synth::{generate, SynthConfig};
use xreid::tape::Tape;
use xreid::tensor::Tensor;
use xreid::trainer::{train, TrainConfig};

const INSTANCES: usize = 100;

/// Criteria measured on trained models. Their lines are printed like the
/// others but a FAIL does not fail the test.
const EMPIRICAL: [u32; 2] = [5, 6];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, title: &str, outcome: &Outcome) {
    let status = if outcome.pass { "PASS" } else { "FAIL" };
    println!("criterion {id} [{status}] {title}: {}", outcome.detail);
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cases = run_suite().expect("gradient suite");
    let elapsed = start.elapsed();
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let failing: Vec<&str> = cases
        .iter()
        .filter(|c| !c.report.passes(TOLERANCE))
        .map(|c| c.name)
        .collect();
    Outcome {
        pass: failing.is_empty() && elapsed < Duration::from_secs(60),
        detail: format!(
            "{} cases, worst {} at {:.2e}, failing {:?}, {:.1}s",
            cases.len(),
            worst.name,
            worst.report.max_rel_error,
            failing,
            elapsed.as_secs_f64()
        ),
    }
}

fn channel_exchange_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let clips = rng.random_range(1..=2);
        let t = rng.random_range(1..=6);
        let n = rng.random_range(1..=8);
        let d = [4, 8, 64][rng.random_range(0..3)];
        let x: Vec<f64> = (0..clips * t * n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut want = vec![0.0; x.len()];
        let q = d / 4;
        for b in 0..clips {
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
                        want[((b * t + f) * n + p) * d + c] = x[((b * t + src) * n + p) * d + c];
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![clips * t * n, d], x).unwrap());
        let layout = ClipLayout { clips, frames: t, patches: n };
        let out = channel_exchange(&mut tape, v, layout, 1).unwrap();
        let same = tape
            .value(out)
            .data()
            .iter()
            .zip(&want)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("{INSTANCES} instances, {mismatches} mismatches"),
    }
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn memory_dynamics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mu = 0.2;
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let m0 = unit(&mut rng, 8);
        let b = unit(&mut rng, 8);
        let dist = |m: &[f64]| m.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let mut m = m0.clone();
        for n in 1..=20 {
            m = momentum_blend(&m, &b, mu);
            worst = worst.max((dist(&m) - mu.powi(n) * dist(&m0)).abs());
        }
    }

    let mut disagreements = 0;
    for _ in 0..INSTANCES {
        let rows: Vec<Vec<f64>> = (0..16).map(|_| unit(&mut rng, 8)).collect();
        let identities: Vec<usize> = (0..16).map(|_| rng.random_range(0..4)).collect();
        let modalities: Vec<Modality> = (0..16)
            .map(|_| if rng.random() { Modality::Infrared } else { Modality::Visible })
            .collect();
        let protos: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 8)).collect();
        let memory = PrototypeMemory::from_embeddings(
            Modality::Visible,
            4,
            mu,
            protos.iter().enumerate().map(|(i, p)| (i, p.as_slice())),
        )
        .unwrap();
        let batch = BatchFeatures {
            embeddings: Tensor::from_rows(&rows).unwrap(),
            identities: identities.clone(),
            modalities: modalities.clone(),
        };
        for identity in 0..4 {
            let brute = (0..16)
                .filter(|&i| identities[i] == identity && modalities[i] == Modality::Infrared)
                .map(|i| (i, rows[i].iter().zip(&protos[identity]).map(|(a, b)| a * b).sum::<f64>()))
                .fold(None, |best: Option<(usize, f64)>, (i, s)| match best {
                    Some((_, bs)) if bs <= s => best,
                    _ => Some((i, s)),
                })
                .map(|(i, _)| i);
            if memory.select_hard_cross(&batch, identity).ok() != brute {
                disagreements += 1;
            }
        }
    }
    Outcome {
        pass: worst < 1e-10 && disagreements == 0,
        detail: format!("max contraction deviation {worst:.2e}, hard selection disagreements {disagreements}"),
    }
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ks = [1, 5, 20];
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let entry = |rng: &mut ChaCha8Rng, identity: usize, clip_id: usize| Entry {
            embedding: (0..3).map(|_| rng.random_range(-2..=2) as f64).collect(),
            identity,
            clip_id,
        };
        let g = rng.random_range(1..=10);
        let gallery: Vec<Entry> = (0..g)
            .map(|i| {
                let id = rng.random_range(0..4);
                entry(&mut rng, id, 100 + i)
            }).collect();
        let queries: Vec<Entry> = (0..rng.random_range(1..=5))
            .map(|i| {
                let id = gallery[rng.random_range(0..g)].identity;
                entry(&mut rng, id, i)
            })
            .collect();

        let mut hits = [0usize; 3];
        let mut ap_sum = 0.0;
        for q in &queries {
            let d: Vec<f64> = gallery.iter().map(|x| cosine_distance(&q.embedding, &x.embedding)).collect();
            let rank = |i: usize| {
                (0..g)
                    .filter(|&j| d[j] < d[i] || (d[j] == d[i] && gallery[j].clip_id < gallery[i].clip_id))
                    .count()
            };
            let mut relevant: Vec<usize> = (0..g).filter(|&i| gallery[i].identity == q.identity).map(rank).collect();
            relevant.sort_unstable();
            for (h, k) in hits.iter_mut().zip(ks) {
                *h += usize::from(relevant[0] < k);
            }
            let ap: f64 = relevant.iter().enumerate().map(|(f, &r)| (f + 1) as f64 / (r + 1) as f64).sum();
            ap_sum += ap / relevant.len() as f64;
        }
        let nq = queries.len() as f64;
        let want_cmc: Vec<f64> = hits.iter().map(|&h| h as f64 / nq).collect();
        let run = RetrievalRun {
            protocol: Protocol::I2V,
            queries,
            gallery,
        };
        if cmc(&run, &ks).unwrap() != want_cmc || mean_ap(&run).unwrap().0 != ap_sum / nq {
            mismatches += 1;
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("{INSTANCES} instances, {mismatches} mismatches"),
    }
}

/// Trains the module grid plus a CMCL-off copy of the full model on the
/// default synthetic data.
fn training_criteria() -> (Outcome, Outcome) {
    let dataset = generate(&SynthConfig::default()).unwrap();
    let base = TrainConfig::default();
    let variants = Grid::Modules.variants();
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut gaps: Vec<(f64, f64)> = Vec::new();
    for &seed in &SEEDS {
        for v in &variants {
            let outcome = train(&dataset, &v.apply(&base, seed)).unwrap();
            let reports = evaluate_model(&outcome.model, &dataset, Split::Test).unwrap();
            for report in reports {
                rows.push(xreid::ablation::AblationRow {
                    variant: v.name.clone(),
                    seed,
                    report,
                });
            }
            if v.toggles == Toggles::ALL {
                let features = extract_features(&outcome.model, &dataset, Split::Test).unwrap();
                gaps.push((modality_gap(&features), f64::NAN));
            }
        }
    }
    let grid_time = start.elapsed();

    let without = Variant {
        name: "no-cmcl".into(),
        toggles: Toggles { cii: false, ..Toggles::ALL },
        sii_stride: None,
        lii_stride: None,
    };
    for (i, &seed) in SEEDS.iter().enumerate() {
        let outcome = train(&dataset, &without.apply(&base, seed)).unwrap();
        let features = extract_features(&outcome.model, &dataset, Split::Test).unwrap();
        gaps[i].1 = modality_gap(&features);
    }

    let mut ordered = true;
    let mut margin = f64::INFINITY;
    let mut detail = Vec::new();
    for protocol in Protocol::BOTH {
        let m = |name: &str| mean_map(&rows, name, protocol).unwrap();
        let (b, c, f) = (m("baseline"), m("+cpc"), m("+cpc+mii"));
        ordered &= b <= c && c <= f;
        margin = margin.min(f - b);
        detail.push(format!("{protocol} {b:.4}/{c:.4}/{f:.4}"));
    }
    let modules = Outcome {
        pass: ordered && margin >= 0.02 && grid_time < Duration::from_secs(900),
        detail: format!(
            "mean mAP baseline/+cpc/+cpc+mii {}, full-baseline {:+.4}, {:.0}s",
            detail.join(", "),
            margin,
            grid_time.as_secs_f64()
        ),
    };
    let gap = Outcome {
        pass: gaps.iter().all(|(with, without)| with < without),
        detail: gaps
            .iter()
            .zip(SEEDS)
            .map(|((w, wo), s)| format!("seed {s} {w:.4} vs {wo:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
    };
    (modules, gap)
}

fn xreid(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_xreid")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn pipeline(dir: &Path, seed: &str) -> Vec<u8> {
    let data = dir.join("d.xrd");
    let run = dir.join("run");
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());
    xreid(&["gen", "--out", data_s, "--seed", seed, "--identities", "8"]);
    xreid(&[
        "train", "--data", data_s, "--out", run_s, "--seed", seed, "--epochs", "2", "--steps-per-epoch", "5",
    ]);
    let ckpt = run.join("ckpt");
    let eval = run.join("eval2.csv");
    xreid(&["eval", "--data", data_s, "--ckpt", ckpt.to_str().unwrap(), "--out", eval.to_str().unwrap()]);
    let mut bytes = fs::read(run.join("log.csv")).unwrap();
    bytes.extend(fs::read(run.join("eval.csv")).unwrap());
    bytes.extend(fs::read(eval).unwrap());
    bytes
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path(), "7");
    let second = pipeline(b.path(), "7");
    Outcome {
        pass: first == second,
        detail: format!("{} bytes of log and metric CSVs compared", first.len()),
    }
}

fn stride_sweeps() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("t5.xrd");
    let out = dir.path().join("ablate");
    xreid(&["gen", "--out", data.to_str().unwrap(), "--frames", "5", "--identities", "8"]);
    xreid(&[
        "ablate", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--grid", "sii_stride", "lii_stride", "--epochs", "1", "--steps-per-epoch", "2",
    ]);
    let mut missing = Vec::new();
    let mut malformed = 0;
    for (grid, names) in [
        ("sii_stride", (1..=4).map(|s| format!("sii_s{s}")).collect::<Vec<_>>()),
        ("lii_stride", (0..=4).map(|s| format!("lii_s{s}")).collect()),
    ] {
        let csv = fs::read_to_string(out.join(format!("{grid}.csv"))).unwrap();
        let mut lines = csv.lines();
        if lines.next() != Some("variant,protocol,rank1,rank5,rank20,map,seed") {
            malformed += 1;
        }
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        for row in &rows {
            let numeric = row[2..6].iter().all(|f| f.parse::<f64>().is_ok() && f.split('.').nth(1).map(str::len) == Some(6));
            if row.len() != 7 || !numeric || row[6].parse::<u64>().is_err() {
                malformed += 1;
            }
        }
        for name in names {
            for protocol in ["I2V", "V2I"] {
                for seed in SEEDS {
                    let seed = seed.to_string();
                    if !rows.iter().any(|r| r[0] == name && r[1] == protocol && r[6] == seed) {
                        missing.push(format!("{name}/{protocol}/{seed}"));
                    }
                }
            }
        }
    }
    Outcome {
        pass: missing.is_empty() && malformed == 0,
        detail: format!("missing {missing:?}, malformed rows {malformed}"),
    }
}

fn main() {
    let mut results = vec![
        (1, "gradient checks", gradients()),
        (2, "channel exchange oracle", channel_exchange_oracle()),
        (3, "memory dynamics", memory_dynamics()),
        (4, "retrieval metric oracles", metrics_oracle()),
    ];
    let (modules, gap) = training_criteria();
    results.push((5, "module ordering", modules));
    results.push((6, "modality gap with CMCL", gap));
    results.push((7, "pipeline determinism", determinism()));
    results.push((8, "stride sweeps", stride_sweeps()));
    for (id, title, outcome) in &results {
        report(*id, title, outcome);
    }
    let failed: Vec<u32> = results
        .iter()
        .filter(|r| !r.2.pass && !EMPIRICAL.contains(&r.0))
        .map(|r| r.0)
        .collect();
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
