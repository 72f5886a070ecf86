//! Acceptance gate, run by `cargo test` with its own `main` so that every
//! criterion prints one `criterion N: PASS|FAIL` line. Criterion 7 needs the
//! full public dataset and is skipped unless `AVDREC_FULL_CONFIG` points at a
//! run configuration. Arguments act as name filters.

use std::collections::HashSet;
use std::panic::catch_unwind;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};

use avdrec::cf::{self, Feedback, Hyperparams};
use avdrec::eval::{self, BaselineOptions, Task, WmfScorer};
use avdrec::features::{oblimin_rotate, RotationOptions};
use avdrec::ingest::{
    binarize, make_splits, InteractionSet, Playcount, PlaycountMatrix, SplitConfig, SplitLabel,
};

fn gate(n: u32, what: &str, pass: bool, elapsed: Duration, limit: Duration, detail: &str) -> bool {
    let ok = pass && elapsed < limit;
    println!(
        "criterion {n}: {} {what} ({:.2}s, limit {}s) {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    ok
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn lu_solve(a: DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    a.lu().solve(&b).expect("oracle system is invertible")
}

fn criterion_1_block_solves_match_dense_oracle() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let nu = rng.random_range(1..=6);
        let ni = rng.random_range(1..=8);
        let k = rng.random_range(1..=3);
        let l = rng.random_range(1..=2);
        let base = if rng.random_bool(0.5) { 0.0 } else { 1.0 };
        let r = DMatrix::from_fn(nu, ni, |_, _| f64::from(u8::from(rng.random_bool(0.4))));
        let c = DMatrix::from_fn(nu, ni, |u, i| {
            if r[(u, i)] == 1.0 || rng.random_bool(0.3) {
                rng.random_range(0.5..30.0)
            } else {
                base
            }
        });
        let fb = Feedback::from_dense(&r, &c, base).unwrap();
        let w = DMatrix::from_fn(k, nu, |_, _| rng.sample::<f64, _>(StandardNormal));
        let h = DMatrix::from_fn(k, ni, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(k, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = DMatrix::from_fn(l, ni, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lambda_w = rng.random_range(0.1..3.0);
        let lambda_h = rng.random_range(0.1..3.0);
        let lambda_b = rng.random_range(1e-3..1.0);

        for u in 0..nu {
            let cu = DMatrix::from_diagonal(&c.row(u).transpose());
            let a = &h * &cu * h.transpose() + DMatrix::identity(k, k) * lambda_w;
            let rhs = &h * &cu * r.row(u).transpose();
            let oracle = lu_solve(a, rhs);
            let got = cf::update_user(u, &h, &fb, lambda_w).unwrap();
            worst = worst.max((got - &oracle).amax());
        }
        for i in 0..ni {
            let ci = DMatrix::from_diagonal(&c.column(i).into_owned());
            let a = &w * &ci * w.transpose() + DMatrix::identity(k, k) * lambda_h;
            let zi = z.column(i).into_owned();
            let rhs = &w * &ci * r.column(i) + &b * &zi * lambda_h;
            let oracle = lu_solve(a, rhs);
            let got = cf::update_item(i, &w, &fb, lambda_h, Some((&b, &zi))).unwrap();
            worst = worst.max((got - &oracle).amax());
        }
        let inv = (&z * z.transpose() + DMatrix::identity(l, l) * lambda_b)
            .try_inverse()
            .unwrap();
        let oracle = &h * z.transpose() * inv;
        let items: Vec<usize> = (0..ni).collect();
        let got = cf::update_content_map(&h, &z, &items, lambda_b).unwrap();
        worst = worst.max(max_abs_diff(&got, &oracle));
    }
    gate(
        1,
        "block solves vs dense normal equations",
        worst <= 1e-10,
        start.elapsed(),
        Duration::from_secs(1),
        &format!("max abs error {worst:.3e}"),
    )
}

fn synthetic_feedback(rng: &mut ChaCha8Rng, nu: usize, ni: usize) -> (Feedback, DMatrix<f64>) {
    let hp = Hyperparams {
        base_confidence: 1.0,
        ..Hyperparams::default()
    };
    let mut entries = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            if rng.random_bool(0.12) {
                entries.push((u, i, 1.0, hp.confidence(rng.random_range(5..40))));
            } else if rng.random_bool(0.05) {
                entries.push((u, i, 0.0, hp.confidence(rng.random_range(1..5))));
            }
        }
    }
    let fb = Feedback::new(nu, ni, vec![true; ni], 1.0, entries).unwrap();
    let z = DMatrix::from_fn(2, ni, |_, _| rng.sample::<f64, _>(StandardNormal));
    (fb, z)
}

fn criterion_2_objective_is_monotone() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (fb, z) = synthetic_feedback(&mut rng, 50, 60);
    let hp = Hyperparams {
        rank: 5,
        n_iters: 20,
        base_confidence: 1.0,
        ..Hyperparams::default()
    };
    let mut worst_rise: f64 = f64::NEG_INFINITY;
    let mut ok = true;
    for content in [None, Some(&z)] {
        let model = cf::train(&fb, content, &hp, 7).unwrap();
        assert_eq!(model.objective_trace.len(), 20);
        for w in model.objective_trace.windows(2) {
            let rise = (w[1] - w[0]) / w[0].abs().max(1.0);
            worst_rise = worst_rise.max(rise);
            ok &= w[1] <= w[0] * (1.0 + 1e-9);
        }
    }
    gate(
        2,
        "non-increasing objective, both variants",
        ok,
        start.elapsed(),
        Duration::from_secs(5),
        &format!("largest relative step {worst_rise:.3e}"),
    )
}

fn brute_ndcg(rel: &[bool]) -> Option<f64> {
    let gain = |r: &[bool]| -> f64 {
        r.iter()
            .enumerate()
            .map(|(k, &x)| {
                if x {
                    1.0 / ((k + 1) as f64 + 1.0).log2()
                } else {
                    0.0
                }
            })
            .sum()
    };
    let mut ideal = rel.to_vec();
    ideal.sort_by(|a, b| b.cmp(a));
    let best = gain(&ideal);
    (best > 0.0).then(|| (gain(rel) / best).min(1.0))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn criterion_3_ndcg_matches_brute_force() -> bool {
    let start = Instant::now();
    let mut ok = true;
    let mut lists = 0;
    for n in 1..=6usize {
        let perms = permutations(n);
        for mask in 0u32..(1 << n) {
            let rel: Vec<bool> = (0..n).map(|k| mask & (1 << k) != 0).collect();
            lists += 1;
            ok &= eval::ndcg(&rel) == brute_ndcg(&rel);
            if rel.iter().any(|&r| r) {
                let best = perms
                    .iter()
                    .map(|p| {
                        let order: Vec<bool> = p.iter().map(|&k| rel[k]).collect();
                        eval::ndcg(&order).unwrap()
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                ok &= best == 1.0;
            } else {
                ok &= eval::ndcg(&rel).is_none();
            }
        }
    }
    gate(
        3,
        "ndcg vs brute force, perfect ranking scores 1",
        ok,
        start.elapsed(),
        Duration::from_secs(1),
        &format!("{lists} relevance patterns"),
    )
}

struct ColdStartData {
    set: InteractionSet,
    z: DMatrix<f64>,
}

/// Samples users, content and item factors from the content-aware prior,
/// then records a playcount of at least 5 wherever a noisy affinity clears
/// the per-user threshold.
fn cold_start_data(seed: u64) -> ColdStartData {
    let (nu, ni, k, l) = (200, 350, 5, 3);
    let (lambda_w, lambda_h) = (1.0f64, 4.0f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_n = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let b = DMatrix::from_fn(k, l, |_, _| std_n(&mut rng));
    let z = DMatrix::from_fn(l, ni, |_, _| std_n(&mut rng));
    let w = DMatrix::from_fn(k, nu, |_, _| std_n(&mut rng) / lambda_w.sqrt());
    let h = &b * &z + DMatrix::from_fn(k, ni, |_, _| std_n(&mut rng) / lambda_h.sqrt());
    let affinity = w.transpose() * &h;
    let noise = Normal::new(0.0, 0.5).unwrap();

    let mut entries = Vec::new();
    for u in 0..nu {
        let noisy: Vec<f64> = (0..ni)
            .map(|i| affinity[(u, i)] + rng.sample(noise))
            .collect();
        let mut sorted = noisy.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cut = sorted[ni / 10];
        for (i, &s) in noisy.iter().enumerate() {
            if s > cut {
                entries.push(Playcount {
                    user: u,
                    item: i,
                    count: 5 + rng.random_range(0..20),
                });
            } else if rng.random_bool(0.02) {
                entries.push(Playcount {
                    user: u,
                    item: i,
                    count: rng.random_range(1..5),
                });
            }
        }
    }
    let raw = PlaycountMatrix::new(
        (0..nu).map(|u| format!("u{u}")).collect(),
        (0..ni).map(|i| format!("s{i}")).collect(),
        entries,
    )
    .unwrap();
    let cfg = SplitConfig {
        out_of_matrix_song_fraction: 1.0 / 7.0,
        seed,
        ..SplitConfig::default()
    };
    let set = make_splits(&binarize(&raw, 5), &raw, &cfg).unwrap();
    assert_eq!(set.out_of_matrix_items().len(), 50);
    ColdStartData { set, z }
}

fn random_scorer_ndcg(set: &InteractionSet, shuffles: u64) -> f64 {
    let tc = eval::task_candidates(set, Task::OutOfMatrix).unwrap();
    let mut total = 0.0;
    let mut users = 0;
    for u in 0..set.n_users() {
        let rel = &tc.relevant[u];
        let cands = &tc.candidates[u];
        if !cands.iter().any(|i| rel.contains(i)) {
            continue;
        }
        let mut sum = 0.0;
        for s in 0..shuffles {
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ ((u as u64) << 32));
            let mut order = cands.clone();
            order.shuffle(&mut rng);
            let flags: Vec<bool> = order.iter().map(|i| rel.contains(i)).collect();
            sum += eval::ndcg(&flags).unwrap();
        }
        total += sum / shuffles as f64;
        users += 1;
    }
    total / users as f64
}

fn criterion_4_cold_start_ordering() -> bool {
    let start = Instant::now();
    let data = cold_start_data(4);
    let hp = Hyperparams {
        rank: 5,
        lambda_w: 1.0,
        lambda_h: 4.0,
        n_iters: 20,
        base_confidence: 1.0,
        ..Hyperparams::default()
    };
    let fb = Feedback::from_interactions(&data.set, &[SplitLabel::Train], &hp).unwrap();
    let model = cf::train(&fb, Some(&data.z), &hp, 4).unwrap();
    let scorer = WmfScorer::new(&model, Some(&data.z)).unwrap();
    let aware = eval::evaluate(&scorer, "content-aware", &data.set, Task::OutOfMatrix)
        .unwrap()
        .mean_ndcg
        .unwrap();
    let baseline =
        eval::pure_content_baseline(&data.set, &data.z, BaselineOptions::default()).unwrap();
    let pure = eval::evaluate(&baseline, "pure content", &data.set, Task::OutOfMatrix)
        .unwrap()
        .mean_ndcg
        .unwrap();
    let random = random_scorer_ndcg(&data.set, 1000);
    gate(
        4,
        "out-of-matrix ordering content-aware > pure content > random",
        aware > pure && pure > random,
        start.elapsed(),
        Duration::from_secs(60),
        &format!("content-aware {aware:.4}, pure content {pure:.4}, random {random:.4}"),
    )
}

fn criterion_5_rotation_invariants() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = RotationOptions::default();
    let (mut recon, mut diag, mut monotone): (f64, f64, bool) = (0.0, 0.0, true);
    for _ in 0..100 {
        let lam = DMatrix::from_fn(16, 3, |_, _| rng.random_range(-1.0..1.0));
        let rot = oblimin_rotate(&lam, &opts).unwrap();
        let back = &rot.pattern * &rot.phi * rot.pattern.transpose();
        recon = recon.max(max_abs_diff(&back, &(&lam * lam.transpose())));
        diag = rot
            .phi
            .diagonal()
            .iter()
            .map(|d| (d - 1.0).abs())
            .fold(diag, f64::max);
        monotone &= rot.criterion_trace.windows(2).all(|w| w[1] <= w[0]);
    }
    gate(
        5,
        "oblimin reconstruction, unit factor variances, monotone criterion",
        recon <= 1e-8 && diag <= 1e-10 && monotone,
        start.elapsed(),
        Duration::from_secs(10),
        &format!("reconstruction {recon:.2e}, diag {diag:.2e}, monotone {monotone}"),
    )
}

fn criterion_6_protocol_conformance() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (nu, ni) = (200, 150);
    let mut entries = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            if rng.random_bool(0.15) {
                entries.push(Playcount {
                    user: u,
                    item: i,
                    count: rng.random_range(1..30),
                });
            }
        }
    }
    // boundary cases
    entries.retain(|p| !(p.user == 0 && p.item < 2));
    entries.push(Playcount {
        user: 0,
        item: 0,
        count: 4,
    });
    entries.push(Playcount {
        user: 0,
        item: 1,
        count: 5,
    });
    let raw = PlaycountMatrix::new(
        (0..nu).map(|u| format!("u{u}")).collect(),
        (0..ni).map(|i| format!("s{i}")).collect(),
        entries,
    )
    .unwrap();
    let bin = binarize(&raw, 5);
    let expected: HashSet<(usize, usize)> = raw
        .entries()
        .iter()
        .filter(|p| p.count >= 5)
        .map(|p| (p.user, p.item))
        .collect();
    let binarize_ok = bin.positives.iter().copied().collect::<HashSet<_>>() == expected
        && !bin.contains(0, 0)
        && bin.contains(0, 1);

    let cfg = SplitConfig {
        out_of_matrix_song_fraction: 0.05,
        seed: 6,
        ..SplitConfig::default()
    };
    let set = make_splits(&bin, &raw, &cfg).unwrap();
    let held = set.out_of_matrix_items().len();
    let n_in = set
        .entries()
        .iter()
        .filter(|e| e.label != SplitLabel::TestOut)
        .count() as f64;
    let within = |label, frac: f64| (set.count(label) as f64 - frac * n_in).abs() <= 1.0;
    let split_ok = held == 8
        && within(SplitLabel::Train, 0.7)
        && within(SplitLabel::Validation, 0.2)
        && within(SplitLabel::TestIn, 0.1)
        && set
            .entries()
            .iter()
            .all(|e| (e.label == SplitLabel::TestOut) == set.is_out_of_matrix(e.item));
    gate(
        6,
        "hold-out count, 70/20/10 partition, threshold-5 binarization",
        binarize_ok && split_ok,
        start.elapsed(),
        Duration::from_secs(1),
        &format!(
            "held out {held}, train/val/test {}/{}/{} of {n_in}",
            set.count(SplitLabel::Train),
            set.count(SplitLabel::Validation),
            set.count(SplitLabel::TestIn)
        ),
    )
}

fn criterion_7_full_data_reproduction() -> bool {
    let Ok(path) = std::env::var("AVDREC_FULL_CONFIG") else {
        println!("criterion 7: SKIP full-data reproduction (set AVDREC_FULL_CONFIG to run)");
        return true;
    };
    let start = Instant::now();
    let cfg = avdrec::pipeline::RunConfig::load(path.as_ref()).unwrap();
    let summary = avdrec::pipeline::cmd_run_all(&cfg).unwrap();
    let cell = |method: &str, task: Task| {
        let col = summary.tasks.iter().position(|t| *t == task)?;
        summary.rows.iter().find(|r| r.method == method)?.values[col]
    };
    let in_matrix = cell("content-free WMF", Task::InMatrix).unwrap_or(f64::NAN);
    let out = cell("content-aware WMF", Task::OutOfMatrix).unwrap_or(f64::NAN);
    gate(
        7,
        "full-data NDCG near the published values",
        (in_matrix - 0.35).abs() <= 0.03 && (out - 0.21).abs() <= 0.03,
        start.elapsed(),
        Duration::from_secs(24 * 3600),
        &format!("in-matrix {in_matrix:.4}, out-of-matrix {out:.4}"),
    )
}

fn criterion_8_zero_content_reduces_to_content_free() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (fb, z) = synthetic_feedback(&mut rng, 40, 50);
    let zero = DMatrix::zeros(z.nrows(), z.ncols());
    let hp = Hyperparams {
        rank: 4,
        n_iters: 10,
        base_confidence: 1.0,
        ..Hyperparams::default()
    };
    let free = cf::train(&fb, None, &hp, 11).unwrap();
    let aware = cf::train(&fb, Some(&zero), &hp, 11).unwrap();
    let dw = max_abs_diff(&free.w, &aware.w);
    let dh = max_abs_diff(&free.h, &aware.h);
    let b_zero = aware
        .b
        .as_ref()
        .is_some_and(|b| b.iter().all(|&v| v == 0.0));
    let probe = DVector::zeros(z.nrows());
    let cold = cf::predict_out_of_matrix(&aware, 0, &probe).unwrap();
    gate(
        8,
        "zero content reproduces content-free factors",
        dw <= 1e-12 && dh <= 1e-12 && b_zero && cold == 0.0,
        start.elapsed(),
        Duration::from_secs(5),
        &format!("max |dW| {dw:.1e}, max |dH| {dh:.1e}, B zero {b_zero}"),
    )
}

type Criterion = (&'static str, fn() -> bool);

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [Criterion; 8] = [
        (
            "criterion_1_block_solves_match_dense_oracle",
            criterion_1_block_solves_match_dense_oracle,
        ),
        (
            "criterion_2_objective_is_monotone",
            criterion_2_objective_is_monotone,
        ),
        (
            "criterion_3_ndcg_matches_brute_force",
            criterion_3_ndcg_matches_brute_force,
        ),
        (
            "criterion_4_cold_start_ordering",
            criterion_4_cold_start_ordering,
        ),
        (
            "criterion_5_rotation_invariants",
            criterion_5_rotation_invariants,
        ),
        (
            "criterion_6_protocol_conformance",
            criterion_6_protocol_conformance,
        ),
        (
            "criterion_7_full_data_reproduction",
            criterion_7_full_data_reproduction,
        ),
        (
            "criterion_8_zero_content_reduces_to_content_free",
            criterion_8_zero_content_reduces_to_content_free,
        ),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let ok = catch_unwind(run).unwrap_or_else(|_| {
            println!("{name}: FAIL (panicked)");
            false
        });
        if !ok {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
