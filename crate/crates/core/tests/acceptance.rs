//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{central_diff, loss_of_logits, rel_err, Instance, Loss, ALL_LOSSES};
use music_core::classifier::{ce_loss_grad, entropy_loss_grad, masked_softmax, negce_loss_grad};
use music_core::engine::{extract_positives, run_music, select_negative, Assignment, Mode, MusicConfig, PseudoState};
use music_core::episode::{sample_episode, EpisodeConfig};
use music_core::evaluation::{run_benchmark, RunReport, Summary};
use music_core::feature_store::{
    encode_store, generate_synthetic, load_store, save_store, FeatureRecord, FeatureStore, SyntheticConfig,
};
use rand::Rng;

struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok((pass, detail)) => Check { name, pass, detail },
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Check {
                name,
                pass: false,
                detail: format!("panicked: {msg}"),
            }
        }
    }
}

fn gradient_suite() -> (bool, String) {
    let start = Instant::now();
    let mut rng = common::rng(2024);
    let mut worst = [0.0f64; 3];
    let mut zero_ok = true;
    for _ in 0..100 {
        let inst = Instance::random(&mut rng);
        let z = inst.logits(&inst.weights);
        let p = masked_softmax(&z, &inst.mask).unwrap();
        for (i, kind) in ALL_LOSSES.into_iter().enumerate() {
            let grad = match kind {
                Loss::Ce => ce_loss_grad(&p, inst.target),
                Loss::NegCe => negce_loss_grad(&p, inst.target),
                Loss::Entropy => entropy_loss_grad(&p),
            }
            .unwrap()
            .grad;
            let fd = central_diff(|zz| loss_of_logits(kind, zz, &inst.mask, inst.target), &z, &inst.mask, 1e-6);
            worst[i] = worst[i].max(rel_err(&grad, &fd));
            zero_ok &= inst.mask.iter().zip(&grad).all(|(&m, &g)| m || g == 0.0);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&e| e < 1e-6) && zero_ok && elapsed < Duration::from_secs(5);
    (
        pass,
        format!(
            "max relative error CE {:.1e}, NegCE {:.1e}, MinEnt {:.1e} (< 1e-6); {:.2?} (< 5 s)",
            worst[0], worst[1], worst[2], elapsed
        ),
    )
}

fn simplex_suite() -> (bool, String) {
    let mut rng = common::rng(77);
    let mut worst_sum = 0.0f64;
    let mut worst_shift = 0.0f64;
    let mut zeros = true;
    for _ in 0..1000 {
        let c = rng.random_range(1..=20);
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-50.0..50.0)).collect();
        let mut mask: Vec<bool> = (0..c).map(|_| rng.random_bool(0.6)).collect();
        let keep = rng.random_range(0..c);
        mask[keep] = true;
        let p = masked_softmax(&z, &mask).unwrap();
        worst_sum = worst_sum.max((p.probs.iter().sum::<f64>() - 1.0).abs());
        zeros &= mask.iter().zip(&p.probs).all(|(&m, &v)| if m { v >= 0.0 } else { v == 0.0 });
        let s = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + s).collect();
        let q = masked_softmax(&shifted, &mask).unwrap();
        for (a, b) in p.probs.iter().zip(&q.probs) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    (
        worst_sum < 1e-9 && worst_shift < 1e-12 && zeros,
        format!(
            "1000 calls: max |sum - 1| {worst_sum:.1e} (< 1e-9), max shift change {worst_shift:.1e} (< 1e-12), excluded entries exactly 0: {zeros}"
        ),
    )
}

fn exclusion_suite() -> (bool, String) {
    let store = generate_synthetic(&SyntheticConfig {
        num_classes: 10,
        dim: 32,
        samples_per_class: 60,
        separation: 3.0,
        noise_sigma: 1.0,
        seed: 8,
    })
    .unwrap();
    let mut rng = common::rng(5);
    let mut terminated = true;
    let mut monotone = true;
    let mut complement = true;
    let modes = [Mode::Full, Mode::NoDelta, Mode::OnlyPos, Mode::AlternatingNegFirst];
    for trial in 0..40 {
        let ways = rng.random_range(2..=7);
        let cfg = EpisodeConfig {
            ways,
            unlabeled_per_class: 8,
            queries_per_class: 3,
            episodes: 1,
            base_seed: trial,
            ..EpisodeConfig::default()
        };
        let ep = sample_episode(&store, &cfg, 0).unwrap();
        let mut music = MusicConfig {
            mode: modes[trial as usize % modes.len()],
            ..MusicConfig::default()
        };
        music.train.steps = 20;
        let r = run_music(&ep, &music).unwrap();
        terminated &= r.negative_iterations < ways && r.pseudo.validate().is_ok();
        for u in 0..r.pseudo.samples() {
            let mine: Vec<&Assignment> = r.pseudo.log().iter().filter(|a| a.sample == u).collect();
            monotone &= mine.windows(2).all(|w| w[0].iteration < w[1].iteration && w[0].class != w[1].class);
            let mut seen = vec![false; ways];
            for a in &mine {
                monotone &= !seen[a.class];
                seen[a.class] = true;
            }
        }
        for (u, k) in extract_positives(&r.pseudo) {
            let left: Vec<usize> = (0..ways).filter(|&j| !r.pseudo.exclusions(u)[j]).collect();
            complement &= left == vec![k];
        }
    }
    // Direct state exercise: invalid exclusions are refused, counts only grow.
    for _ in 0..200 {
        let c = rng.random_range(2..8);
        let mut st = PseudoState::new(3, c);
        let mut prev = [0; 3];
        for iteration in 1..=c + 1 {
            for (u, before) in prev.iter_mut().enumerate() {
                let _ = st.exclude(Assignment {
                    iteration,
                    sample: u,
                    class: rng.random_range(0..c),
                    prob: 0.0,
                });
                monotone &= st.excluded_count(u) >= *before && st.excluded_count(u) < c;
                *before = st.excluded_count(u);
            }
        }
        for (u, k) in extract_positives(&st) {
            complement &= (0..c).filter(|&j| !st.exclusions(u)[j]).eq(std::iter::once(k));
        }
    }
    let mut boundary = true;
    for c in 2..=20 {
        let p = masked_softmax(&vec![0.0; c], &vec![true; c]).unwrap();
        let none = vec![false; c];
        boundary &= select_negative(&p, &none, 1.0 / c as f64, true).unwrap() == Some(0);
        boundary &= select_negative(&p, &none, 1.0 / c as f64 - 1e-9, true).unwrap().is_none();
    }
    (
        terminated && monotone && complement && boundary,
        format!(
            "termination within c-1: {terminated}, monotone exclusions: {monotone}, positive = complement: {complement}, delta boundary (1/c assigns, 1/c - 1e-9 rejects): {boundary}"
        ),
    )
}

fn benchmark_store(separation: f64) -> FeatureStore {
    generate_synthetic(&SyntheticConfig {
        num_classes: 20,
        dim: 64,
        samples_per_class: 600,
        separation,
        noise_sigma: 1.0,
        seed: 7,
    })
    .unwrap()
}

fn benchmark_episodes() -> EpisodeConfig {
    EpisodeConfig {
        ways: 5,
        shots: 1,
        unlabeled_per_class: 30,
        queries_per_class: 15,
        episodes: 100,
        base_seed: 0,
        ..EpisodeConfig::default()
    }
}

fn mode_cfg(mode: Mode) -> MusicConfig {
    MusicConfig {
        mode,
        ..MusicConfig::default()
    }
}

struct Bench {
    full: RunReport,
    support: RunReport,
    only_neg: RunReport,
    only_pos: RunReport,
    no_delta: RunReport,
    elapsed: Duration,
}

fn run_bench() -> Bench {
    let store = benchmark_store(4.0);
    let ecfg = benchmark_episodes();
    let start = Instant::now();
    let run = |mode| run_benchmark(&store, "synthetic", &ecfg, &mode_cfg(mode), 1).unwrap();
    let full = run(Mode::Full);
    let support = run(Mode::SupportOnly);
    let only_neg = run(Mode::OnlyNeg);
    let only_pos = run(Mode::OnlyPos);
    let no_delta = run(Mode::NoDelta);
    Bench {
        full,
        support,
        only_neg,
        only_pos,
        no_delta,
        elapsed: start.elapsed(),
    }
}

fn pct(s: &Summary) -> String {
    format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.ci95_halfwidth)
}

/// `a` above `b + margin` with the two 95% intervals disjoint.
fn separated_above(a: &Summary, b: &Summary, margin: f64) -> bool {
    a.lower() > b.upper() + margin
}

fn pooled(counts: impl Iterator<Item = (u64, u64)>) -> (u64, u64) {
    counts.fold((0, 0), |(w, n), (a, b)| (w + a, n + b))
}

fn asymmetry() -> (bool, String) {
    let store = benchmark_store(2.0);
    let ecfg = benchmark_episodes();
    let r = run_benchmark(&store, "synthetic", &ecfg, &mode_cfg(Mode::OnlyNeg), 0).unwrap();
    let (nw, nn) = pooled(r.episode_reports.iter().filter_map(|e| {
        e.neg_error_per_iteration.first().map(|c| (c.wrong, c.assigned))
    }));
    let (pw, pn) = pooled(
        r.episode_reports
            .iter()
            .map(|e| (e.threshold_baseline_error.wrong, e.threshold_baseline_error.assigned)),
    );
    let argmax_cfg = MusicConfig {
        pos_threshold: 0.0,
        ..mode_cfg(Mode::OnlyNeg)
    };
    let all = run_benchmark(&store, "synthetic", &ecfg, &argmax_cfg, 0).unwrap();
    let (aw, an) = pooled(
        all.episode_reports
            .iter()
            .map(|e| (e.threshold_baseline_error.wrong, e.threshold_baseline_error.assigned)),
    );
    let neg_rate = nw as f64 / nn.max(1) as f64;
    let context = format!(
        "iteration-1 negative error {nw}/{nn} = {:.2}%; unthresholded stage-0 argmax error {aw}/{an} = {:.2}%",
        100.0 * neg_rate,
        100.0 * aw as f64 / an.max(1) as f64
    );
    if pn == 0 {
        return (
            false,
            format!("no stage-0 prediction reached probability 0.7, so the thresholded positive error is undefined (0/0); {context}"),
        );
    }
    let pos_rate = pw as f64 / pn as f64;
    (
        nn > 0 && neg_rate < pos_rate,
        format!("thresholded positive error {pw}/{pn} = {:.2}%; {context}", 100.0 * pos_rate),
    )
}

fn determinism() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let store_path = dir.path().join("bench.fsf");
    save_store(&benchmark_store(4.0), &store_path).unwrap();
    let run = |threads: &str| {
        let out = dir.path().join(format!("p{threads}"));
        let o = Command::new(env!("CARGO_BIN_EXE_music"))
            .args(["run", "--store"])
            .arg(&store_path)
            .arg("--out")
            .arg(&out)
            .args(["--episodes", "100", "--parallel", threads, "--table"])
            .env_remove("MUSIC_THREADS")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let read = |ext: &str| std::fs::read(format!("{}.{ext}", out.display())).unwrap();
        (read("report"), read("csv"))
    };
    let one = run("1");
    let eight = run("8");
    let same = one == eight;
    (
        same,
        format!(
            "--parallel 1 vs 8: report {} bytes, table {} bytes, identical: {same}",
            one.0.len(),
            one.1.len()
        ),
    )
}

fn random_store(rng: &mut rand_chacha::ChaCha8Rng) -> FeatureStore {
    let dim = rng.random_range(1..=32);
    let classes = rng.random_range(1..=10);
    let count = rng.random_range(0..=40);
    let records = (0..count)
        .map(|_| FeatureRecord {
            class_id: rng.random_range(0..classes as u32),
            vector: (0..dim)
                .map(|_| loop {
                    let v = f32::from_bits(rng.random());
                    if v.is_finite() {
                        break v;
                    }
                })
                .collect(),
        })
        .collect();
    FeatureStore::new(dim, classes, records).unwrap()
}

fn format_round_trip(dir: &Path) -> (bool, String) {
    let mut rng = common::rng(1000);
    let mut bad = 0;
    for i in 0..1000 {
        let store = random_store(&mut rng);
        let path = dir.join(format!("s{i}.fsf"));
        save_store(&store, &path).unwrap();
        let back = load_store(&path).unwrap();
        let same = back.dim() == store.dim()
            && back.num_classes() == store.num_classes()
            && back.class_ids() == store.class_ids()
            && (0..store.len()).all(|r| {
                back.vector(r)
                    .iter()
                    .zip(store.vector(r))
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            })
            && encode_store(&back) == std::fs::read(&path).unwrap();
        bad += (!same) as usize;
    }
    (bad == 0, format!("1000 randomized stores, {bad} mismatches"))
}

fn main() {
    let mut checks = vec![
        check("gradient suite", gradient_suite),
        check("simplex/masking suite", simplex_suite),
        check("exclusion-logic suite", exclusion_suite),
    ];

    let bench = catch_unwind(run_bench).ok();
    match &bench {
        Some(b) => {
            let (full, support, neg, pos) = (
                b.full.accuracy(),
                b.support.accuracy(),
                b.only_neg.accuracy(),
                b.only_pos.accuracy(),
            );
            checks.push(check("synthetic benchmark: full > support-only", || {
                (
                    separated_above(&full, &support, 0.0),
                    format!("full {} vs support-only {}", pct(&full), pct(&support)),
                )
            }));
            checks.push(check("synthetic benchmark: full >= only_neg", || {
                (
                    separated_above(&full, &neg, 0.0),
                    format!(
                        "full {} vs only_neg {}; needs disjoint intervals with full above",
                        pct(&full),
                        pct(&neg)
                    ),
                )
            }));
            checks.push(check("synthetic benchmark: full >= only_pos - 1 point", || {
                (
                    separated_above(&full, &pos, -0.01),
                    format!("full {} vs only_pos {} (minus 1.00)", pct(&full), pct(&pos)),
                )
            }));
            let fe = b.full.diagnostics.pos_error;
            let ne = b.no_delta.diagnostics.pos_error;
            checks.push(check("synthetic benchmark: positive error full < no_delta", || {
                (
                    ne.per_episode_rate.lower() > fe.per_episode_rate.upper(),
                    format!(
                        "full {} ({:.1}/{:.1} per episode) vs no_delta {} ({:.1}/{:.1} per episode)",
                        pct(&fe.per_episode_rate),
                        fe.mean_wrong,
                        fe.mean_assigned,
                        pct(&ne.per_episode_rate),
                        ne.mean_wrong,
                        ne.mean_assigned
                    ),
                )
            }));
            checks.push(check("synthetic benchmark: runtime < 2 min single-threaded", || {
                (
                    b.elapsed < Duration::from_secs(120),
                    format!("5 modes x 100 episodes on one thread in {:.1?}", b.elapsed),
                )
            }));
            checks.push(check("iteration trend", || {
                let acc = &b.full.diagnostics.mean_per_iteration_accuracy;
                let (first, last) = (acc[0], *acc.last().unwrap());
                let trace: Vec<String> = acc.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
                (
                    last >= first,
                    format!("stage 0 {:.2} -> final {:.2} (stages: {})", 100.0 * first, 100.0 * last, trace.join(", ")),
                )
            }));
            checks.push(check("balance diagnostic", || {
                let counts = &b.full.diagnostics.mean_neg_per_class;
                let max = counts.iter().copied().fold(f64::MIN, f64::max);
                let min = counts.iter().copied().fold(f64::MAX, f64::min);
                let shown: Vec<String> = counts.iter().map(|c| format!("{c:.2}")).collect();
                (
                    min > 0.0 && max / min < 1.2,
                    format!("negative labels per class [{}], max/min {:.3} (< 1.2)", shown.join(", "), max / min),
                )
            }));
        }
        None => checks.push(Check {
            name: "synthetic benchmark",
            pass: false,
            detail: "benchmark run panicked".into(),
        }),
    }

    checks.push(check("negative-vs-positive asymmetry (separation 2.0)", asymmetry));
    checks.push(check("determinism", determinism));
    let dir = tempfile::tempdir().unwrap();
    checks.push(check("format round trip", || format_round_trip(dir.path())));

    println!();
    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
