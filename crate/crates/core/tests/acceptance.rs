//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. Any failure makes the target exit nonzero.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use cfb::config::{BankUpdate, FilterMode, ThresholdKind};
use cfb::experiment::RunSummary;
use cfb::filter::WarmupBehavior;
use cfb::scoring::k_from_ratio;
use cfb::sim::stream::gen_stream;
use cfb::sim::{bank_scores, history_jsonl, simulate, Simulation};
use cfb::threshold::{class_stats, threshold};
use cfb::{
    auroc, ood_score, prototype_scores, BetaSchedule, DistanceMetric, ExperimentConfig, FeatureBankSet, FeatureVector,
    OodFilter, Progress, RejectReason, ThresholdPolicy,
};
use common::{fv, median, oracle_auroc, oracle_mean_std, oracle_score, oracle_self_scores, relative_error};

type Outcome = Result<String, String>;

/// Name, check, and runtime budget in seconds.
type Criterion = (&'static str, fn() -> Outcome, u64);

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

fn summary(cfg: &ExperimentConfig) -> RunSummary {
    RunSummary::from_events(&simulate(cfg).expect("simulation runs")).expect("history has epochs")
}

fn knn_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c1);
    let mut worst = 0.0f64;
    let mut count = 0;
    for metric in DistanceMetric::ALL {
        for _ in 0..1000 {
            let n = rng.random_range(1..=64);
            let dim = rng.random_range(1..=32);
            let k = rng.random_range(1..=n);
            let bank: Vec<Vec<f32>> = (0..n).map(|_| gaussian(&mut rng, dim)).collect();
            let query = gaussian(&mut rng, dim);
            let protos: Vec<FeatureVector> = bank.iter().map(|p| fv(p)).collect();
            let got = ood_score(&fv(&query), &protos, k, metric).map_err(|e| e.to_string())?;
            worst = worst.max(relative_error(got, oracle_score(&query, &bank, k, metric)));
            count += 1;
        }
    }
    ensure(worst <= 1e-6, format!("{count} instances, max relative error {worst:.2e} (limit 1e-6)"))
}

fn fifo_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c2);
    let mut checks = 0u64;
    let mut cases: Vec<(usize, usize)> = vec![(2, 3), (1, 10_000), (500, 10_000), (500, 499), (7, 0)];
    cases.extend((0..150).map(|_| (rng.random_range(1..=500), rng.random_range(0..=10_000))));
    for (cap, pushes) in cases {
        let mut banks = FeatureBankSet::new(1, cap, 1).map_err(|e| e.to_string())?;
        // Values repeat on purpose so duplicates are exercised too.
        let seq: Vec<f32> = (0..pushes).map(|_| rng.random_range(1..=50) as f32).collect();
        for (i, &v) in seq.iter().enumerate() {
            banks.push(0, fv(&[v])).map_err(|e| e.to_string())?;
            let start = (i + 1).saturating_sub(cap);
            let bank: Vec<f32> = banks.prototypes(0).unwrap().iter().map(|p| p.as_slice()[0]).collect();
            if bank != seq[start..=i] {
                return Err(format!("L={cap}: bank differs from the last-L suffix after push {}", i + 1));
            }
            checks += 1;
        }
        if banks.is_warm() != (pushes >= cap) {
            return Err(format!("L={cap}, {pushes} pushes: wrong warm flag"));
        }
    }
    ensure(true, format!("suffix law held after all {checks} pushes"))
}

fn threshold_arithmetic() -> Outcome {
    let tol = 1e-12;
    let mut notes = Vec::new();

    let s = class_stats(0, &[0.1, 0.2, 0.3]).map_err(|e| e.to_string())?;
    let (om, os) = oracle_mean_std(&[0.1, 0.2, 0.3]);
    let want_sigma = (0.02f64 / 3.0).sqrt();
    if (s.mu - 0.2).abs() > tol || (s.sigma - want_sigma).abs() > tol || (s.mu - om).abs() > tol || (s.sigma - os).abs() > tol {
        return Err(format!("class_stats([0.1,0.2,0.3]) = ({}, {})", s.mu, s.sigma));
    }
    let tau = threshold(&s, 1.0);
    if (tau - (0.2 + want_sigma)).abs() > tol || (tau - 0.2816497).abs() > 5e-8 {
        return Err(format!("threshold(beta=1) = {tau}"));
    }
    notes.push("stats/threshold example ok".to_string());

    let bank = vec![vec![1.0f32, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]];
    let protos: Vec<FeatureVector> = bank.iter().map(|p| fv(p)).collect();
    let scores = prototype_scores(&protos, 1, DistanceMetric::Cosine).map_err(|e| e.to_string())?;
    let oracle = oracle_self_scores(&bank, 1, DistanceMetric::Cosine);
    for ((got, want), lit) in scores.iter().zip(&oracle).zip([0.4, 0.2, 0.2]) {
        if (got - want).abs() > tol || (got - lit).abs() > 1e-7 {
            return Err(format!("leave-one-out scores {scores:?}, oracle {oracle:?}"));
        }
    }
    let chain = class_stats(0, &scores).map_err(|e| e.to_string())?;
    let (cm, cs) = oracle_mean_std(&oracle);
    let ctau = threshold(&chain, 1.0);
    if (chain.mu - cm).abs() > tol || (chain.sigma - cs).abs() > tol || (ctau - (cm + cs)).abs() > tol {
        return Err(format!("chain stats ({}, {}, {ctau})", chain.mu, chain.sigma));
    }
    // The quoted 0.3610 is the sum of the rounded mean and deviation; the
    // exact value is 0.36095, so it only agrees to 1e-4.
    if (chain.mu - 0.2667).abs() > 5e-5 || (chain.sigma - 0.0943).abs() > 5e-5 || (ctau - 0.3610).abs() > 1e-4 {
        return Err(format!("chain stats ({}, {}, {ctau}) differ from (0.2667, 0.0943, 0.3610)", chain.mu, chain.sigma));
    }
    let mut banks = FeatureBankSet::new(1, 3, 2).map_err(|e| e.to_string())?;
    for p in &protos {
        banks.push(0, p.clone()).map_err(|e| e.to_string())?;
    }
    let mut filter = OodFilter::new(cfb::FilterConfig {
        k: 1,
        metric: DistanceMetric::Cosine,
        policy: ThresholdPolicy::Adaptive(BetaSchedule::Fixed { beta: 1.0 }),
        conf_tau: 0.0,
        warmup: WarmupBehavior::Bypass,
    })
    .map_err(|e| e.to_string())?;
    let state = filter.thresholds(&banks, Progress { step: 0, total: 1 }).map_err(|e| e.to_string())?;
    if state.taus[0] != ctau {
        return Err(format!("filter threshold {} differs from chained {ctau}", state.taus[0]));
    }
    notes.push("three-prototype chain ok".to_string());

    let mut rng = ChaCha8Rng::seed_from_u64(0x0c3);
    for _ in 0..10_000 {
        let b0 = rng.random_range(-3.0..3.0);
        let b1 = rng.random_range(-3.0..3.0);
        let total = rng.random_range(1..1_000_000u64);
        let sched = BetaSchedule::Linear { beta_init: b0, beta_final: b1 };
        let (start, end) = (sched.beta_at(0, total).unwrap(), sched.beta_at(total, total).unwrap());
        if start != b0 || end != b1 {
            return Err(format!("schedule [{b0}, {b1}] over {total}: endpoints {start}, {end}"));
        }
    }
    notes.push("beta endpoints exact over 10000 schedules".to_string());
    ensure(true, notes.join("; "))
}

fn calibration() -> Outcome {
    let seeds = 50u64;
    let base = ExperimentConfig::with_seed(0);
    let k = base.k().map_err(|e| e.to_string())?;
    let per_seed: Vec<(usize, usize, f64)> = (0..seeds)
        .into_par_iter()
        .map(|seed| {
            let data = gen_stream(&base.stream, seed).expect("stream");
            let (mut above, mut total, mut worst) = (0, 0, 0.0f64);
            for c in 0..base.stream.num_id_classes {
                let bank: Vec<FeatureVector> = data
                    .burn_in
                    .iter()
                    .filter(|r| r.class() == Some(c))
                    .map(|r| r.feature.clone())
                    .collect();
                assert_eq!(bank.len(), base.bank.capacity);
                let scores = prototype_scores(&bank, k, DistanceMetric::Cosine).expect("scores");
                let s = class_stats(c, &scores).expect("stats");
                let cut = threshold(&s, 2.0);
                let n = scores.iter().filter(|&&x| x > cut).count();
                above += n;
                total += scores.len();
                worst = worst.max(n as f64 / scores.len() as f64);
            }
            (above, total, worst)
        })
        .collect();
    let above: usize = per_seed.iter().map(|r| r.0).sum();
    let total: usize = per_seed.iter().map(|r| r.1).sum();
    let worst = per_seed.iter().map(|r| r.2).fold(0.0, f64::max);
    let frac = above as f64 / total as f64;
    ensure(
        frac <= 0.05,
        format!(
            "{seeds} seeds x {} banks of L={}, D={}: {above}/{total} = {:.2}% above mu+2sigma (limit 5%), worst bank {:.0}%",
            base.stream.num_id_classes,
            base.bank.capacity,
            base.stream.dimension,
            100.0 * frac,
            100.0 * worst
        ),
    )
}

fn separability() -> Outcome {
    let seps = [2.0, 4.0, 8.0];
    let mut medians = Vec::new();
    for sep in seps {
        let aurocs: Vec<f64> = (0..20u64)
            .into_par_iter()
            .map(|seed| {
                let mut cfg = ExperimentConfig::with_seed(seed);
                cfg.stream.num_ood_classes = 1;
                cfg.stream.cluster_separation = sep;
                let k = cfg.k().unwrap();
                let mut sim = Simulation::new(cfg).expect("config");
                sim.burn_in().expect("burn-in");
                let samples = bank_scores(sim.state(), &sim.dataset().unlabeled[1], k, DistanceMetric::Cosine).unwrap();
                let a = auroc(&samples).unwrap();
                assert!((a - oracle_auroc(&samples)).abs() < 1e-12);
                a
            })
            .collect();
        medians.push(median(aurocs));
    }
    let monotone = medians.windows(2).all(|w| w[0] <= w[1]);
    ensure(
        monotone && medians[2] >= 0.99,
        format!(
            "median AUROC at separation 2/4/8: {:.4} / {:.4} / {:.4} (monotone, >= 0.99 at 8)",
            medians[0], medians[1], medians[2]
        ),
    )
}

fn static_vs_dynamic() -> Outcome {
    let wins: Vec<(bool, f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let mut cfg = ExperimentConfig::with_seed(seed);
            cfg.stream.drift_rate = 1.0;
            let mut st = cfg.clone();
            st.bank.update = BankUpdate::Static;
            cfg.bank.update = BankUpdate::Dynamic;
            let d = summary(&cfg).final_id_retention.unwrap_or(f64::NAN);
            let s = summary(&st).final_id_retention.unwrap_or(f64::NAN);
            (d >= s, d, s)
        })
        .collect();
    let n = wins.iter().filter(|w| w.0).count();
    let md = median(wins.iter().map(|w| w.1).collect());
    let ms = median(wins.iter().map(|w| w.2).collect());
    ensure(
        n >= 16,
        format!("drift 1.0: dynamic >= static final ID retention in {n}/20 seeds (need 16); medians {md:.3} vs {ms:.3}"),
    )
}

fn adaptive_vs_fixed() -> Outcome {
    let cutoffs = [0.4, 0.5, 0.6, 0.7];
    let mut cfgs = Vec::new();
    for seed in 0..20u64 {
        let mut cfg = ExperimentConfig::with_seed(seed);
        cfg.stream.contamination = 0.632;
        cfg.stream.drift_rate = 1.0;
        cfg.threshold.kind = ThresholdKind::Adaptive;
        cfg.threshold.beta_init = 1.0;
        cfg.threshold.beta_final = 2.0;
        cfgs.push((None, cfg.clone()));
        for tau in cutoffs {
            let mut f = cfg.clone();
            f.threshold.kind = ThresholdKind::Fixed;
            f.threshold.fixed_tau = tau;
            cfgs.push((Some(tau), f));
        }
    }
    let f1s: Vec<(Option<f64>, f64)> = cfgs
        .par_iter()
        .map(|(tag, cfg)| (*tag, summary(cfg).f1.unwrap_or(0.0)))
        .collect();
    let med = |tag: Option<f64>| median(f1s.iter().filter(|r| r.0 == tag).map(|r| r.1).collect());
    let adaptive = med(None);
    let fixed: Vec<(f64, f64)> = cutoffs.iter().map(|&t| (t, med(Some(t)))).collect();
    let (best_tau, best) = fixed.iter().copied().fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let listing: Vec<String> = fixed.iter().map(|(t, f)| format!("{t}: {f:.3}")).collect();
    ensure(
        best <= adaptive,
        format!(
            "drift 1.0: median F1 adaptive [1,2] {adaptive:.3} vs best fixed {best_tau} {best:.3} ({})",
            listing.join(", ")
        ),
    )
}

fn semantic_expansion() -> Outcome {
    let rows: Vec<(bool, bool)> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let mut on = ExperimentConfig::with_seed(seed);
            on.stream.contamination = 0.632;
            on.stream.ood_offset = Some(6.0);
            on.stream.test_per_epoch = 2000;
            on.train.ema_alpha = 0.99;
            on.filter.mode = FilterMode::Cfb;
            let mut off = on.clone();
            off.filter.mode = FilterMode::None;
            let (a, b) = (summary(&on), summary(&off));
            let purity = a.purity.unwrap_or(f64::NAN) > b.purity.unwrap_or(f64::NAN);
            let acc = a.final_teacher_accuracy.unwrap_or(f64::NAN) > b.final_teacher_accuracy.unwrap_or(f64::NAN);
            (purity, acc)
        })
        .collect();
    let purity = rows.iter().filter(|r| r.0).count();
    let acc = rows.iter().filter(|r| r.1).count();
    let both = rows.iter().filter(|r| r.0 && r.1).count();
    ensure(
        both >= 16,
        format!("filter on beats off in purity {purity}/20, teacher accuracy {acc}/20, both {both}/20 (need 16)"),
    )
}

/// First mutual-learning iteration (0-based, across epochs) that sees full
/// banks, from the batch arithmetic alone.
fn expected_first_gated(cfg: &ExperimentConfig) -> Option<u64> {
    let s = &cfg.stream;
    let t = &cfg.train;
    assert_eq!(t.labeled_batch % s.num_id_classes, 0, "arithmetic assumes class-balanced labeled batches");
    assert_eq!(s.labeled_per_epoch % t.labeled_batch, 0);
    let need = cfg.bank.capacity.saturating_sub(s.labeled_per_class);
    if need == 0 {
        return Some(0);
    }
    let per_batch = t.labeled_batch / s.num_id_classes;
    let fresh_batches = s.labeled_per_epoch / t.labeled_batch;
    let iters = s.unlabeled_per_epoch.div_ceil(t.unlabeled_batch);
    let mut filled = 0;
    let mut global = 0u64;
    for _ in 1..=s.epochs {
        for b in 0..iters {
            if b < fresh_batches {
                filled += per_batch;
            }
            global += 1;
            if filled >= need {
                return Some(global);
            }
        }
    }
    None
}

fn warmup_contract() -> Outcome {
    let mut notes = Vec::new();
    for (labeled_per_class, warmup) in [
        (60, WarmupBehavior::Bypass),
        (60, WarmupBehavior::Reject),
        (92, WarmupBehavior::Bypass),
        (100, WarmupBehavior::Bypass),
    ] {
        let mut cfg = ExperimentConfig::with_seed(11);
        cfg.stream.labeled_per_class = labeled_per_class;
        cfg.stream.epochs = 3;
        cfg.filter.warmup = warmup;
        let expected = expected_first_gated(&cfg).ok_or("banks never fill in this configuration")?;
        let mut sim = Simulation::new(cfg.clone()).map_err(|e| e.to_string())?;
        sim.burn_in().map_err(|e| e.to_string())?;
        let mut first_gated = None;
        let mut global = 0u64;
        for epoch in 1..=sim.epochs() {
            for batch in 0..sim.batches_in_epoch(epoch) {
                let r = sim.run_iteration(epoch, batch).map_err(|e| e.to_string())?;
                if r.warm != (global >= expected) {
                    return Err(format!("iteration {global}: warm={} but expected first warm at {expected}", r.warm));
                }
                let gated = r.decisions.iter().filter(|d| d.ood_score.is_some()).count();
                if !r.warm {
                    let leaked = r.decisions.iter().any(|d| {
                        d.ood_score.is_some()
                            || d.threshold_used.is_some()
                            || d.reject_reason == RejectReason::Ood
                            || (d.reject_reason != RejectReason::LowConfidence
                                && match warmup {
                                    WarmupBehavior::Bypass => !(d.kept && d.warmup),
                                    WarmupBehavior::Reject => d.kept || d.reject_reason != RejectReason::ColdBank,
                                })
                    });
                    if leaked {
                        return Err(format!("iteration {global}: gate decision emitted before the banks were warm"));
                    }
                } else if r.decisions.iter().any(|d| d.warmup || d.reject_reason == RejectReason::ColdBank) {
                    return Err(format!("iteration {global}: warm-up decision after the banks were warm"));
                }
                if gated > 0 && first_gated.is_none() {
                    first_gated = Some(global);
                }
                global += 1;
            }
        }
        if first_gated != Some(expected) {
            return Err(format!(
                "labeled_per_class={labeled_per_class}: first gated iteration {first_gated:?}, expected {expected}"
            ));
        }
        notes.push(format!("lpc={labeled_per_class} {warmup:?}: first gate at {expected}"));
    }
    ensure(true, notes.join("; "))
}

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::with_seed(2024);
    cfg.stream.drift_rate = 0.5;
    cfg.stream.epochs = 6;
    let serial = history_jsonl(&simulate(&cfg).map_err(|e| e.to_string())?);
    let again = history_jsonl(&simulate(&cfg).map_err(|e| e.to_string())?);
    cfg.filter.workers = 4;
    let par1 = history_jsonl(&simulate(&cfg).map_err(|e| e.to_string())?);
    let par2 = history_jsonl(&simulate(&cfg).map_err(|e| e.to_string())?);
    // The echoed config records the worker count; everything after it must match.
    let body = |s: &str| s.split_once('\n').map(|(_, rest)| rest.to_string()).unwrap_or_default();
    ensure(
        serial == again && par1 == par2 && body(&serial) == body(&par1) && !body(&serial).is_empty(),
        format!(
            "{} bytes; repeat identical: {}; 4 workers repeat identical: {}; 1 vs 4 workers identical past the config line: {}",
            serial.len(),
            serial == again,
            par1 == par2,
            body(&serial) == body(&par1)
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("k-NN score oracle", knn_oracle, 10),
        ("FIFO law", fifo_law, 5),
        ("threshold arithmetic", threshold_arithmetic, 5),
        ("calibration", calibration, 30),
        ("separability sweep", separability, 60),
        ("static vs dynamic bank", static_vs_dynamic, 120),
        ("adaptive vs fixed threshold", adaptive_vs_fixed, 120),
        ("semantic expansion", semantic_expansion, 300),
        ("warm-up contract", warmup_contract, 30),
        ("determinism", determinism, 60),
    ];
    assert_eq!(k_from_ratio(100, 0.05).unwrap(), 5);
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > Duration::from_secs(*budget) => Err(format!("{d}; over the {budget} s budget")),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} [{tag}] {name}: {detail} ({:.1} s)", i + 1, elapsed.as_secs_f64());
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
