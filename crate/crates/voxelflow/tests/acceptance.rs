//! One line per acceptance criterion. Lines go straight to the stderr handle
//! so they survive output capture. Set `VOXELFLOW_ACCEPT=1,4,9` to run a subset.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxelflow::config::RunConfig;
use voxelflow::flops::{compare_on, dense_cube};
use voxelflow::oracle::brute_topk;
use voxelflow::pipeline::{evaluate_suite, infer_timed, synthetic_suite, train_toy, InferOptions, Scene};
use voxelflow::selfcheck::{ap_check, dense_equivalence, gradcheck_all, hand_ap_case, impulse_radius, nms_check, AP_ATOL, DENSE_ATOL, GRAD_REL_TOL};
use voxelflow_core::dffm::{receptive_field, StageKernel};
use voxelflow_core::eval::Difficulty;
use voxelflow_core::fsm::{select_topk, topk_rows};
use voxelflow_core::model::{Model, Selection};
use voxelflow_core::rulebook::build_rulebook;
use voxelflow_core::scene::{ClassName, SceneConfig};
use voxelflow_core::{ConvMode, Coord, Kernel, SparseTensor};

const SEED: u64 = 2024;
const DENSE_BUDGET_S: f64 = 10.0;
const GRAD_BUDGET_S: f64 = 60.0;
const OVERFIT_STEPS: usize = 300;
const OVERFIT_RATIO: f64 = 0.2;
const OVERFIT_BUDGET_S: f64 = 300.0;
const SUITE_FRAMES: usize = 50;
const TIMING_REPEATS: usize = 7;
const FASTER_FRAMES: usize = 45;
const PROBE_SCENES: usize = 8;
const PROBE_STEPS: usize = 400;
const PROBE_MAX_DROP: f64 = 0.2;

struct Outcome {
    id: u32,
    hard: bool,
    passed: bool,
}

fn report(out: &mut Vec<Outcome>, id: u32, hard: bool, passed: bool, line: String) {
    let tag = match (passed, hard) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "SOFT-FAIL",
    };
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "[acceptance] criterion {id:>2} {tag}: {line}");
    out.push(Outcome { id, hard, passed });
}

fn selected(id: u32) -> bool {
    match std::env::var("VOXELFLOW_ACCEPT") {
        Ok(v) if !v.trim().is_empty() => v.split(',').any(|s| s.trim().parse() == Ok(id)),
        _ => true,
    }
}

fn c1(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let e = dense_equivalence(200, SEED, false);
    let s = t.elapsed().as_secs_f64();
    let ok = e.mismatched_sites == 0 && e.max_abs_err <= DENSE_ATOL && s < DENSE_BUDGET_S;
    report(
        out,
        1,
        true,
        ok,
        format!(
            "sparse conv vs dense oracle, 200 tensors (grid <= 16^3, <= 8 ch): max |err| {:.2e} (atol {DENSE_ATOL:.0e}), site mismatches {}, {s:.2} s (< {DENSE_BUDGET_S} s)",
            e.max_abs_err, e.mismatched_sites
        ),
    );
}

fn c2(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let g = gradcheck_all(SEED);
    let s = t.elapsed().as_secs_f64();
    let worst = g.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let parts: Vec<String> = g.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(
        out,
        2,
        true,
        worst <= GRAD_REL_TOL && s < GRAD_BUDGET_S,
        format!("gradcheck on <= 6^3 instances: {} (rel tol {GRAD_REL_TOL:.0e}), {s:.2} s (< {GRAD_BUDGET_S} s)", parts.join(", ")),
    );
}

fn c3(out: &mut Vec<Outcome>) {
    let single = receptive_field(&[StageKernel::new(5, 1, 1)]).unwrap();
    let stacked = receptive_field(&[StageKernel::new(3, 1, 1); 2]).unwrap();
    let radii: Vec<u32> = (1..=3).map(impulse_radius).collect();
    report(
        out,
        3,
        true,
        single == 5 && stacked == 5 && radii == [1, 2, 3],
        format!("RF[(5,1,1)] = {single}, RF[(3,1,1)x2] = {stacked}, impulse support radius after n = 1..3 layers: {radii:?}"),
    );
}

/// Pairs landing on the center site of a dense cube.
fn center_pairs(n: usize, kernel: Kernel) -> usize {
    let x = dense_cube(n);
    let c = (n / 2) as u32;
    let row = x.find(Coord::new(c, c, c)).unwrap() as u32;
    let rb = build_rulebook(&x, kernel, ConvMode::Submanifold).unwrap();
    rb.pairs.iter().flatten().filter(|&&(_, o)| o == row).count()
}

fn c4(out: &mut Vec<Outcome>) {
    let mut all_smaller = true;
    let mut shown = Vec::new();
    for n in 3..=12 {
        let r = compare_on("cube", &dense_cube(n), 5, 16).unwrap();
        all_smaller &= r.decoupled_smaller;
        if [3, 6, 12].contains(&n) {
            shown.push(format!("n={n}: {} < {}", r.decoupled.total_flops, r.monolithic.total_flops));
        }
    }
    let mono = center_pairs(9, Kernel::cube(5));
    let dec = 2 * center_pairs(9, Kernel::cube(3));
    report(
        out,
        4,
        true,
        all_smaller && (mono, dec) == (125, 54),
        format!(
            "two k3 layers cheaper than one k5 on every dense cube n = 3..12 ({}); interior MACs per c^2 {mono}:{dec} (want 125:54)",
            shown.join(", ")
        ),
    );
}

fn c5(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let distinct = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        let mut w: Vec<f64> = (0..n).map(|i| (i as f64 + rng.random_range(0.0..0.9)) / n as f64).collect();
        for i in (1..n).rev() {
            w.swap(i, rng.random_range(0..=i));
        }
        w
    };
    let counts_ok = (1..=1000).all(|n| topk_rows(&distinct(&mut rng, n), 0.5).unwrap().len() == n.div_ceil(2));
    let mut brute_ok = true;
    for n in 1..=12 {
        for _ in 0..10 {
            let w = distinct(&mut rng, n);
            brute_ok &= topk_rows(&w, 0.5).unwrap() == brute_topk(&w, 0.5);
        }
    }
    let n = 41;
    let coords: Vec<Coord> = (0..n as u32).map(|i| Coord::new(i % 7, i / 7, 0)).collect();
    let feats: Vec<f64> = (0..n * 6).map(|_| rng.random_range(-3.0..3.0)).collect();
    let t = SparseTensor::new([7, 6, 1], 6, coords, feats).unwrap();
    let w = distinct(&mut rng, n);
    let (g, info) = select_topk(&t, &w, 0.5).unwrap();
    let gating_ok = info.kept_rows.iter().enumerate().all(|(i, &r)| {
        g.coords()[i] == t.coords()[r] && g.row(i).iter().zip(t.row(r)).all(|(a, b)| a.to_bits() == (w[r] * b).to_bits())
    });
    let mut invariant = 0;
    for i in 0..100 {
        let len = rng.random_range(1..400);
        let w = distinct(&mut rng, len);
        let mapped: Vec<f64> = match i % 3 {
            0 => w.iter().map(|x| x.exp()).collect(),
            1 => w.iter().map(|x| x * x * x + x).collect(),
            _ => w.iter().map(|x| 1.0 / (1.0 + (-8.0 * (x - 0.5)).exp())).collect(),
        };
        invariant += usize::from(topk_rows(&w, 0.5).unwrap() == topk_rows(&mapped, 0.5).unwrap());
    }
    report(
        out,
        5,
        true,
        counts_ok && brute_ok && gating_ok && invariant == 100,
        format!(
            "kept = ceil(N/2) for N = 1..1000: {counts_ok}; equals brute-force top-k for N <= 12: {brute_ok}; gating bitwise w*f: {gating_ok}; invariant under increasing maps: {invariant}/100"
        ),
    );
}

fn c6(out: &mut Vec<Outcome>) {
    let a = ap_check(500, SEED);
    let hand = hand_ap_case();
    report(
        out,
        6,
        true,
        a.max_abs_err <= AP_ATOL && a.mismatched == 0 && a.evaluated > 0 && hand == 0.5,
        format!(
            "AP|R40 vs brute-force evaluator on 500 mini-scenes ({} curves): max |err| {:.1e} (atol {AP_ATOL:.0e}), presence mismatches {}; hand case {hand} (want 0.5)",
            a.evaluated, a.max_abs_err, a.mismatched
        ),
    );
}

fn c7(out: &mut Vec<Outcome>) {
    let n = nms_check(1000, SEED);
    report(
        out,
        7,
        true,
        n.failures == 0,
        format!(
            "NMS vs exhaustive greedy oracle, 1000 trials of <= 10 boxes: {} failures (non-idempotent {}, overlapping kept {})",
            n.failures, n.not_idempotent, n.overlapping_kept
        ),
    );
}

fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(SEED);
    cfg.train.steps = OVERFIT_STEPS;
    cfg.train.scenes = 1;
    cfg
}

/// Returns the trained FSM model for criterion 9.
fn c8(out: &mut Vec<Outcome>) -> Model {
    let cfg = overfit_config();
    let scenes = synthetic_suite(&cfg.scene, 1).unwrap();
    let (m1, r1) = train_toy(&scenes, &cfg).unwrap();
    let (m2, r2) = train_toy(&scenes, &cfg).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let same = bits(r1.totals()) == bits(r2.totals())
        && m1.store.values().iter().flatten().map(|v| v.to_bits()).eq(m2.store.values().iter().flatten().map(|v| v.to_bits()));
    let secs = r1.wall_ms.max(r2.wall_ms) / 1e3;
    report(
        out,
        8,
        true,
        r1.final_over_initial < OVERFIT_RATIO && secs < OVERFIT_BUDGET_S && same,
        format!(
            "{OVERFIT_STEPS}-step single-scene overfit: loss {:.4} -> {:.4} (ratio {:.4}, want < {OVERFIT_RATIO}), slower run {secs:.1} s (< {OVERFIT_BUDGET_S} s), bitwise identical reruns: {same}",
            r1.initial_total, r1.final_total, r1.final_over_initial
        ),
    );
    m1
}

fn c9(out: &mut Vec<Outcome>, model: &Model) {
    let base = SceneConfig {
        seed: SEED + 10_000,
        ..model_scene()
    };
    let frames: Vec<_> = synthetic_suite(&base, SUITE_FRAMES).unwrap().into_iter().map(|s| s.0).collect();
    let opts = |sel| InferOptions {
        selection: sel,
        warmup: 1,
        repeats: TIMING_REPEATS,
    };
    let (mut exact, mut faster, mut fewer_candidates) = (0, 0, 0);
    let (mut t_full, mut t_fsm) = (0.0, 0.0);
    for pc in &frames {
        let one = std::slice::from_ref(pc);
        let (_, full) = infer_timed(model, one, &opts(Selection::Full)).unwrap();
        let (_, fsm) = infer_timed(model, one, &opts(Selection::Importance)).unwrap();
        let (a, b) = (&full.per_frame[0], &fsm.per_frame[0]);
        exact += usize::from(b.head_sites == a.head_sites.div_ceil(2));
        faster += usize::from(b.phases.head_nms_ms < a.phases.head_nms_ms);
        fewer_candidates += usize::from(b.candidates <= a.candidates);
        t_full += a.phases.head_nms_ms;
        t_fsm += b.phases.head_nms_ms;
    }
    let n = frames.len();
    report(
        out,
        9,
        true,
        exact == n && faster >= FASTER_FRAMES,
        format!(
            "{n}-frame suite on the trained checkpoint: head sites = ceil(50%) of no-FSM in {exact}/{n}; head+NMS faster with FSM in {faster}/{n} (need >= {FASTER_FRAMES}, min of {TIMING_REPEATS}); mean head+NMS {:.3} -> {:.3} ms; candidates not above no-FSM in {fewer_candidates}/{n}",
            t_full / n as f64,
            t_fsm / n as f64
        ),
    );
}

fn model_scene() -> SceneConfig {
    overfit_config().scene
}

fn c10(out: &mut Vec<Outcome>) {
    let mut cfg = RunConfig::default().with_seed(SEED + 1);
    cfg.backbone.fsm = false;
    cfg.train.steps = PROBE_STEPS;
    cfg.train.scenes = PROBE_SCENES;
    let scenes: Vec<Scene> = synthetic_suite(&cfg.scene, PROBE_SCENES).unwrap();
    let (model, _) = train_toy(&scenes, &cfg).unwrap();
    let ap = |sel| {
        evaluate_suite(&model, &scenes, sel, &cfg.eval)
            .unwrap()
            .ap(ClassName::Car, Difficulty::Moderate)
            .unwrap_or(0.0)
    };
    let full = ap(Selection::Full);
    let masked = ap(Selection::RandomMask {
        fraction: 0.5,
        seed: SEED,
    });
    let drop = if full > 0.0 { (full - masked) / full } else { f64::INFINITY };
    report(
        out,
        10,
        false,
        drop < PROBE_MAX_DROP,
        format!(
            "random 50% mask on a trained no-FSM checkpoint ({PROBE_SCENES} scenes, {PROBE_STEPS} steps, evaluated on its training suite): Car Moderate AP|R40 {:.2} -> {:.2}, relative drop {:.1}% (soft bound < {:.0}%)",
            full * 100.0,
            masked * 100.0,
            drop * 100.0,
            PROBE_MAX_DROP * 100.0
        ),
    );
}

#[test]
fn acceptance_criteria() {
    let mut out = Vec::new();
    let cheap: [(u32, fn(&mut Vec<Outcome>)); 7] = [(1, c1), (2, c2), (3, c3), (4, c4), (5, c5), (6, c6), (7, c7)];
    for (id, f) in cheap {
        if selected(id) {
            f(&mut out);
        }
    }
    if selected(8) || selected(9) {
        let model = c8(&mut out);
        if selected(9) {
            c9(&mut out, &model);
        }
    }
    if selected(10) {
        c10(&mut out);
    }
    let failed: Vec<u32> = out.iter().filter(|o| o.hard && !o.passed).map(|o| o.id).collect();
    let soft: Vec<u32> = out.iter().filter(|o| !o.hard && !o.passed).map(|o| o.id).collect();
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "[acceptance] hard failures {failed:?}, soft failures {soft:?}");
    drop(e);
    assert!(failed.is_empty(), "hard criteria failed: {failed:?}");
}
