//! Acceptance criteria 1–8. Each test prints one PASS/FAIL line.

use std::io::Write;
use std::time::{Duration, Instant};

use bridgekit::benchmark::{run_toy_benchmark, ToyBenchmarkConfig};
use bridgekit::bten::{decode, encode, BtenEntry, TensorData};
use bridgekit::checkpoint::Checkpoint;
use bridgekit::evaluation::{ap_pix, auc_pix, fpr_at_global_threshold, max_dice_per_sample};
use bridgekit::network::ScoreNetworkConfig;
use bridgekit::oracle::{bridge_kernel_moments, gradient_checks, posterior_convergence};
use bridgekit::sampling::{dbim_sample, dbim_sample_traced, SamplerConfig};
use bridgekit::synthdata::{build_dataset, generate_pair, LesionSpec, PhantomSpec};
use bridgekit::toy::{GaussianBridgeOracle, GaussianToy};
use bridgekit::training::{train, Dataset, TrainConfig};
use bridgekit::{NoiseSchedule, RngStream, Tensor};

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n} ({name}): {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed: {detail}");
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

#[test]
fn criterion_1_bridge_kernel_moments() {
    let (checks, took) = timed(|| bridge_kernel_moments(10_000, 2000, 0).unwrap());
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed()).map(|c| c.to_string()).collect();
    let worst_se = checks
        .iter()
        .filter(|c| c.name.starts_with("mean"))
        .map(|c| c.measured)
        .fold(0.0, f64::max);
    let worst_var = checks
        .iter()
        .filter(|c| c.name.starts_with("variance"))
        .map(|c| c.measured)
        .fold(0.0, f64::max);
    let pass = failed.is_empty() && took < Duration::from_secs(60);
    verdict(
        1,
        "bridge-kernel moment match",
        pass,
        &format!(
            "worst mean {worst_se:.2} SE, worst variance {:.2}%, {took:.1?} {failed:?}",
            100.0 * worst_var
        ),
    );
}

#[test]
fn criterion_2_coefficient_identities() {
    let mut worst = 0.0f64;
    for s in [
        NoiseSchedule::brownian(1.0),
        NoiseSchedule::default(),
        NoiseSchedule::vp(0.1, 20.0, 2.5),
    ] {
        let end = s.bridge_coefficients(s.horizon).unwrap();
        let start = s.bridge_coefficients(0.0).unwrap();
        let (alpha0, _) = s.alpha_sigma(0.0).unwrap();
        for (got, want) in [
            (end.a, 1.0),
            (end.b, 0.0),
            (end.c, 0.0),
            (start.a, 0.0),
            (start.b, alpha0),
            (start.c, 0.0),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    let horizon = 2.0;
    let s = NoiseSchedule::brownian(horizon);
    for i in 1..=1000 {
        let t = horizon * i as f64 / 1001.0;
        let c = s.bridge_coefficients(t).unwrap();
        worst = worst
            .max((c.a - t / horizon).abs())
            .max((c.b - (1.0 - t / horizon)).abs())
            .max((c.c_sq() - t * (1.0 - t / horizon)).abs());
    }
    verdict(
        2,
        "coefficient identities",
        worst <= 1e-12,
        &format!("max deviation {worst:.2e}"),
    );
}

#[test]
fn criterion_3_gradient_correctness() {
    let (checks, took) = timed(|| gradient_checks(0).unwrap());
    let worst = checks.iter().map(|c| c.measured).fold(0.0, f64::max);
    let pass = checks.iter().all(|c| c.passed()) && took < Duration::from_secs(60);
    verdict(
        3,
        "gradient correctness",
        pass,
        &format!("max relative error {worst:.2e}, {took:.1?}"),
    );
}

#[test]
fn criterion_4_bayes_optimality() {
    let (check, took) = timed(|| posterior_convergence(5000, 0).unwrap());
    let pass = check.passed() && took < Duration::from_secs(600);
    verdict(
        4,
        "Bayes-optimality convergence",
        pass,
        &format!("mean squared deviation {:.4}, {took:.1?}", check.measured),
    );
}

#[test]
fn criterion_5_dbim_contracts() {
    let s = NoiseSchedule::default();
    let toy = GaussianToy::new(2, 1.0, 0.25).unwrap();
    let oracle = GaussianBridgeOracle::new(toy, s.clone());
    let strict = |n: usize, seed: u64| SamplerConfig {
        n_steps: n,
        strict: true,
        seed,
        ..SamplerConfig::default()
    };

    // A trained conv network and the Gaussian oracle.
    let net = ScoreNetworkConfig::conv(8, vec![4, 4], 4);
    let pairs: Vec<(Tensor, Tensor)> = (0..8)
        .map(|i| {
            let mut rng = RngStream::new(i, 50);
            let a = Tensor::new(vec![8, 8], rng.normal_vec(64)).unwrap();
            let b = a.map(|v| v + 0.1);
            (a, b)
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: 4,
        total_steps: 20,
        ..TrainConfig::default()
    };
    let model = train(&cfg, &s, &Dataset::Paired(pairs.clone()), &net).unwrap();
    let x_end = &pairs[0].1;
    let repro = dbim_sample(&model, &s, x_end, &strict(10, 1))
        .unwrap()
        .bitwise_eq(&dbim_sample(&model, &s, x_end, &strict(10, 2)).unwrap())
        && dbim_sample(&oracle, &s, &Tensor::from_vec(vec![0.4, -1.2]), &strict(10, 3))
            .unwrap()
            .bitwise_eq(&dbim_sample(&oracle, &s, &Tensor::from_vec(vec![0.4, -1.2]), &strict(10, 3)).unwrap());

    let mut identity = true;
    for eta in [0.0, 0.5, 1.0] {
        let cfg = SamplerConfig {
            eta,
            seed: 4,
            ..SamplerConfig::default()
        };
        let mut last = None;
        let out = dbim_sample_traced(&model, &s, x_end, &cfg, |st| {
            if st.t_cur == 0.0 {
                last = Some(st.x0_hat.clone());
            }
        })
        .unwrap();
        identity &= last.is_some_and(|x0| x0.bitwise_eq(&out));
    }

    let mut rng = RngStream::new(5, 0);
    let (mut sq, mut count) = (0.0, 0usize);
    for _ in 0..100 {
        let (_, x_end) = toy.sample_pair(&mut rng);
        let a = dbim_sample(&oracle, &s, &x_end, &strict(10, 0)).unwrap();
        let b = dbim_sample(&oracle, &s, &x_end, &strict(100, 0)).unwrap();
        sq += a.zip_map(&b, |x, y| (x - y) * (x - y)).sum();
        count += a.numel();
    }
    let rms = (sq / count as f64).sqrt();
    verdict(
        5,
        "DBIM contracts",
        repro && identity && rms < 1e-2,
        &format!("bitwise reproducible {repro}, final-step identity {identity}, N=10 vs N=100 rms {rms:.2e}"),
    );
}

fn quantized_map(rng: &mut RngStream, n: usize) -> Tensor {
    let data = (0..n).map(|_| (rng.below(8) as f64) / 8.0).collect();
    Tensor::new(vec![8, 8], data).unwrap()
}

fn random_mask(rng: &mut RngStream, n: usize) -> Tensor {
    let p = rng.uniform_range(0.05, 0.5);
    let data = (0..n).map(|_| if rng.uniform() < p { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![8, 8], data).unwrap()
}

fn dice_at(map: &Tensor, gt: &Tensor, tau: f64) -> f64 {
    let (mut inter, mut pred, mut truth) = (0.0, 0.0, 0.0);
    for (&m, &g) in map.data().iter().zip(gt.data()) {
        let p = (m >= tau) as u8 as f64;
        inter += p * g;
        pred += p;
        truth += g;
    }
    if pred + truth == 0.0 {
        1.0
    } else {
        2.0 * inter / (pred + truth)
    }
}

/// Candidate thresholds from the highest down: above the max, every value, 0.
fn thresholds(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.push(0.0);
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    let mut out = vec![v[0].next_up()];
    out.extend(v);
    out
}

fn brute_max_dice(map: &Tensor, gt: &Tensor) -> f64 {
    thresholds(map.data().iter().copied())
        .into_iter()
        .map(|t| dice_at(map, gt, t))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(|a, b| b.total_cmp(a));
    uniq.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in uniq {
        let selected: Vec<bool> = scores
            .iter()
            .zip(labels)
            .filter(|(s, _)| **s >= t)
            .map(|(_, &l)| l)
            .collect();
        let tp = selected.iter().filter(|&&l| l).count() as f64;
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * tp / selected.len() as f64;
        prev_recall = recall;
    }
    ap
}

fn brute_fpr(maps: &[Tensor], gts: &[Tensor]) -> f64 {
    let all = maps.iter().flat_map(|m| m.data().iter().copied());
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in thresholds(all) {
        let d = maps.iter().zip(gts).map(|(m, g)| dice_at(m, g, t)).sum::<f64>() / maps.len() as f64;
        if d > best.0 {
            best = (d, t);
        }
    }
    let (mut fp, mut neg) = (0.0, 0.0);
    for (m, g) in maps.iter().zip(gts) {
        for (&v, &gv) in m.data().iter().zip(g.data()) {
            if gv == 0.0 {
                neg += 1.0;
                fp += (v >= best.1) as u8 as f64;
            }
        }
    }
    if neg == 0.0 {
        0.0
    } else {
        fp / neg
    }
}

#[test]
fn criterion_6_metric_oracles() {
    let mut rng = RngStream::new(6, 0);
    let monotone = |v: f64| v * v * v + 2.0 * v;
    let mut worst = 0.0f64;
    let mut invariant = true;
    for _ in 0..1000 {
        let maps: Vec<Tensor> = (0..3).map(|_| quantized_map(&mut rng, 64)).collect();
        let gts: Vec<Tensor> = (0..3).map(|_| random_mask(&mut rng, 64)).collect();
        let scores: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
        let labels: Vec<bool> = gts.iter().flat_map(|g| g.data().iter().map(|&v| v == 1.0)).collect();
        let warped: Vec<Tensor> = maps.iter().map(|m| m.map(monotone)).collect();
        let warped_scores: Vec<f64> = scores.iter().map(|&v| monotone(v)).collect();

        for (m, g) in maps.iter().zip(&gts) {
            let (d, _) = max_dice_per_sample(m, g).unwrap();
            worst = worst.max((d - brute_max_dice(m, g)).abs());
            invariant &= max_dice_per_sample(&m.map(monotone), g).unwrap().0 == d;
        }
        let has_both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
        if has_both {
            let auc = auc_pix(&scores, &labels).unwrap();
            worst = worst.max((auc - brute_auc(&scores, &labels)).abs());
            invariant &= auc_pix(&warped_scores, &labels).unwrap() == auc;
            let ap = ap_pix(&scores, &labels).unwrap();
            worst = worst.max((ap - brute_ap(&scores, &labels)).abs());
            invariant &= ap_pix(&warped_scores, &labels).unwrap() == ap;
        }
        let (fpr, _) = fpr_at_global_threshold(&maps, &gts).unwrap();
        worst = worst.max((fpr - brute_fpr(&maps, &gts)).abs());
        invariant &= fpr_at_global_threshold(&warped, &gts).unwrap().0 == fpr;
    }
    verdict(
        6,
        "metric oracles",
        worst < 1e-12 && invariant,
        &format!("max deviation from brute force {worst:.2e}, monotone invariance {invariant}"),
    );
}

#[test]
fn criterion_7_end_to_end_ordering() {
    let cfg = ToyBenchmarkConfig::default();
    let start = Instant::now();
    let mut wins = 0;
    for seed in 0..3 {
        let out = run_toy_benchmark(&cfg, seed).unwrap();
        println!(
            "  seed {seed}: DDBM dice {:.4} ap {:.4}; best DDPM dice {:.4} ap {:.4}; {}",
            out.bridge.mean_max_dice,
            out.bridge.ap_pix,
            out.best_baseline_dice(),
            out.best_baseline_ap(),
            out.baselines
                .iter()
                .map(|b| format!("{} dice {:.4} ap {:.4}", b.name, b.mean_max_dice, b.ap_pix))
                .collect::<Vec<_>>()
                .join("; ")
        );
        wins += out.bridge_wins() as u32;
    }
    let took = start.elapsed();
    verdict(
        7,
        "end-to-end ordering",
        wins >= 2 && took < Duration::from_secs(7200),
        &format!("DDBM ahead on both metrics for {wins}/3 seeds, {took:.0?}"),
    );
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn criterion_8_pairing_and_format_invariants() {
    let phantom = PhantomSpec::default();
    let lesion = LesionSpec::default();
    let mut pairing = true;
    for seed in 0..200 {
        let s = generate_pair(seed, &phantom, &lesion).unwrap();
        pairing &= s.check_pairing().is_ok();
        pairing &= s
            .healthy
            .data()
            .iter()
            .zip(s.pathological.data())
            .zip(s.lesion_mask.data())
            .all(|((h, p), m)| *m != 0.0 || h.to_bits() == p.to_bits());
    }

    let mut rng = RngStream::new(8, 0);
    let mut roundtrip = true;
    for i in 0..50 {
        let n = 1 + rng.below(40) as usize;
        let entries = vec![
            BtenEntry::new(format!("f64_{i}"), vec![n], TensorData::F64(rng.normal_vec(n))).unwrap(),
            BtenEntry::new(
                "f32",
                vec![n],
                TensorData::F32((0..n).map(|_| rng.normal() as f32).collect()),
            )
            .unwrap(),
            BtenEntry::new(
                "u8",
                vec![1, n],
                TensorData::U8((0..n).map(|_| rng.below(256) as u8).collect()),
            )
            .unwrap(),
            BtenEntry::new(
                "i32",
                vec![n, 1],
                TensorData::I32((0..n).map(|_| rng.next_u64() as i32).collect()),
            )
            .unwrap(),
        ];
        let bytes = encode(&entries).unwrap();
        let back = decode(&bytes).unwrap();
        roundtrip &= back.len() == entries.len() && back.iter().zip(&entries).all(|(a, b)| a.bitwise_eq(b));
        roundtrip &= encode(&back).unwrap() == bytes;
    }

    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    build_dataset(42, 6, &phantom, &lesion, &a).unwrap();
    build_dataset(42, 6, &phantom, &lesion, &b).unwrap();
    let datasets = dir_bytes(&a) == dir_bytes(&b);

    let net = ScoreNetworkConfig::conv(16, vec![4, 4], 4);
    let small = PhantomSpec {
        image_side: 16,
        ..PhantomSpec::default()
    };
    let small_lesion = LesionSpec {
        seed_blob_radius: (2.0, 3.0),
        ..LesionSpec::default()
    };
    let pairs: Vec<(Tensor, Tensor)> = (0..6)
        .map(|i| {
            let s = generate_pair(i, &small, &small_lesion).unwrap();
            (s.healthy, s.pathological)
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: 2,
        total_steps: 10,
        ..TrainConfig::default()
    };
    let ckpt_bytes = |path: &std::path::Path| {
        let c: Checkpoint = train(&cfg, &NoiseSchedule::default(), &Dataset::Paired(pairs.clone()), &net).unwrap();
        c.save(path).unwrap();
        std::fs::read(path).unwrap()
    };
    let checkpoints = ckpt_bytes(&tmp.path().join("c1.bten")) == ckpt_bytes(&tmp.path().join("c2.bten"));

    verdict(
        8,
        "pairing/format invariants",
        pairing && roundtrip && datasets && checkpoints,
        &format!(
            "off-mask equality {pairing}, BTEN round trip {roundtrip}, dataset determinism {datasets}, checkpoint determinism {checkpoints}"
        ),
    );
}
