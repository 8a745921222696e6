//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Runs the desk-scale training loop once and reuses its model.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use hybrid_grasp::collision::{free_interval, sweep_collision_oracle, Axis, GripperGeometry, Profile};
use hybrid_grasp::grasp_sim::execute_grasp;
use hybrid_grasp::heightmap::Heightmap;
use hybrid_grasp::imaging::{crop, extract_window, rotate_image, Window};
use hybrid_grasp::lateral_controller::{angle_b, side_gradients, ControllerConfig};
use hybrid_grasp::policy::{
    evaluate_grasp_rate, infer_grid, occupied_cells, plan_grasp, EvalPolicy, GripperVariant, LoopConfig, MapGeometry,
    RewardMap, Scenario, Strategy, TrainingRun, TrainingSetup, WorldConfig,
};
use hybrid_grasp::reward_model::{
    evaluate_bce, forward_dense, forward_window, gradient_check, init_model, train, AuxTask, ModelSpec, TrainConfig,
    TrainSample,
};
use hybrid_grasp::rng;
use hybrid_grasp::scene::{render_heightmap, sample_scene, sample_scene_with, GridSpec, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

const LN2: f64 = std::f64::consts::LN_2;

fn desk_setup() -> TrainingSetup {
    TrainingSetup {
        schedule: LoopConfig { attempts: 2000, retrain_interval: 200, ..LoopConfig::default() },
        config_hash: "acceptance".into(),
        ..TrainingSetup::default()
    }
}

/// The desk-scale run, trained on first use.
fn desk_run() -> &'static TrainingRun {
    static RUN: OnceLock<TrainingRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let run = hybrid_grasp::policy::run_training(&desk_setup(), 1, None, None).expect("desk-scale training");
        eprintln!("desk-scale training: {} attempts in {:.0} s", run.dataset.len(), t.elapsed().as_secs_f64());
        run
    })
}

fn action_grid_cardinality() -> Verdict {
    let model = init_model(&ModelSpec::default(), 1).unwrap();
    let scene = sample_scene(&SceneConfig::default(), 2, 1).unwrap();
    let hm = render_heightmap(&scene, &GridSpec::default()).unwrap();
    let t = Instant::now();
    let map = infer_grid(&model, &hm, 20).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let g = &map.geometry;
    let shape = (g.n_rot, g.rows, g.cols, g.n_prim);
    verdict(
        map.len() == 512_000 && (hm.width(), hm.height()) == (110, 110) && secs < 1.0,
        format!("{} values, grid {shape:?} from {}x{} px in {secs:.2} s", map.len(), hm.width(), hm.height()),
    )
}

fn ramp_window(f: impl Fn(f64, f64) -> f64) -> Window {
    let res = 0.11 / 32.0;
    let n = 32;
    let mut hm = Heightmap::new(n, n, res, [-16.0 * res; 2], 0.0).unwrap();
    for r in 0..n {
        for c in 0..n {
            let [x, y] = hm.cell_center(r, c);
            hm.set(r, c, f(x, y) as f32);
        }
    }
    Window::from_image(&hm, 0.0, 0.0, 0.0).unwrap()
}

fn controller_ramp_recovery() -> Verdict {
    let t = Instant::now();
    let cfg = ControllerConfig::default();
    let grip = GripperGeometry::default();
    let mut worst = 0.0f64;
    for theta in [0.1f64, 0.2, 0.3, 0.4, 0.5] {
        let b = angle_b(&ramp_window(|x, _| 0.06 - theta.tan() * x), &cfg).unwrap();
        let (_, _, gm) = side_gradients(&ramp_window(|_, y| 0.06 - theta.tan() * y), grip.strokes[1], grip.finger_width, &cfg).unwrap();
        worst = worst.max((b - theta).abs()).max((gm - theta).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(worst <= 1e-3 && secs < 1.0, format!("max error {worst:.2e} rad in {secs:.3} s"))
}

fn random_profile(rng: &mut ChaCha8Rng) -> (Profile, GripperGeometry) {
    let n = rng.gen_range(1..12);
    let mut pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-0.06..0.06), rng.gen_range(-0.02..0.12)]).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
    pts.dedup_by(|a, b| a[0] == b[0]);
    let d_l = rng.gen_range(0.02..0.07);
    let g = GripperGeometry { r_g: rng.gen_range(0.01..0.05), d_l, d_u: d_l + rng.gen_range(0.02..0.1), ..GripperGeometry::default() };
    let axis = if rng.gen() { Axis::B } else { Axis::C };
    (Profile::new(axis, pts).unwrap(), g)
}

/// Distance from `from` stepping by `dir` until the oracle reports a hit, up
/// to `limit`.
fn distance_to_hit(p: &Profile, g: &GripperGeometry, from: f64, dir: f64, limit: f64) -> Option<f64> {
    let step = 1e-4;
    let mut d = step;
    while d <= limit {
        let a = from + dir * d;
        if !(0.0..=PI).contains(&a) || sweep_collision_oracle(p, g, a) {
            return Some(d);
        }
        d += step;
    }
    None
}

fn collision_soundness() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut unsound, mut disagree, mut empty) = (0, 0, 0);
    let cases = 1000;
    for _ in 0..cases {
        let (p, g) = random_profile(&mut rng);
        match free_interval(&p, &g) {
            Ok(fi) => {
                let n = 400;
                for k in 1..n {
                    let a = fi.alpha_min + (fi.alpha_max - fi.alpha_min) * k as f64 / n as f64;
                    if sweep_collision_oracle(&p, &g, a) {
                        unsound += 1;
                        break;
                    }
                }
                let lo = distance_to_hit(&p, &g, fi.alpha_min, -1.0, 0.02);
                let hi = distance_to_hit(&p, &g, fi.alpha_max, 1.0, 0.02);
                if lo.is_none() || hi.is_none() {
                    disagree += 1;
                }
            }
            Err(_) => {
                // the empty signal means the planar approach itself is blocked
                empty += 1;
                if !sweep_collision_oracle(&p, &g, PI / 2.0) {
                    disagree += 1;
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        unsound == 0 && disagree == 0 && secs < 30.0,
        format!("{cases} profiles ({empty} empty): {unsound} unsound, {disagree} off by > 0.02 rad, {secs:.1} s"),
    )
}

/// Evaluate until at least `min_attempts` attempts, in chunks of fresh bins.
fn rate_over(model: &hybrid_grasp::reward_model::RewardModel, sc: &Scenario, world: &WorldConfig, min_attempts: usize) -> (usize, usize, usize) {
    let (mut att, mut ok, mut col) = (0, 0, 0);
    let mut chunk = 0u64;
    while att < min_attempts {
        let r = evaluate_grasp_rate(Some(model), sc, world, 20, 5, 10, rng::derive(77, &[chunk])).unwrap();
        att += r.attempts;
        ok += r.successes;
        col += r.collisions;
        chunk += 1;
    }
    (ok, att, col)
}

fn short_gripper_trend() -> Verdict {
    let run = desk_run();
    let world = WorldConfig::default();
    let stages = &world.scene.stages;
    let base = Scenario { gripper: GripperVariant::Short, ..Scenario::new("short", 5, 20, &stages[2].kinds) };
    let short = GripperVariant::Short.geometry(&world.planner.gripper);
    let wall = world.scene.bin.wall_height;
    let (on_ok, on_n, on_col) = rate_over(&run.model, &base, &world, 500);
    let planar = Scenario { adaption: false, ..base.clone() };
    let (off_ok, off_n, _) = rate_over(&run.model, &planar, &world, 500);
    let (on, off) = (on_ok as f64 / on_n as f64, off_ok as f64 / off_n as f64);
    verdict(
        short.d_l < wall && on > off && on_col == 0,
        format!(
            "d_l {:.3} < wall {wall:.2}; adaption on {on_ok}/{on_n} = {:.1}% ({on_col} collisions), planar {off_ok}/{off_n} = {:.1}%",
            short.d_l,
            on * 100.0,
            off * 100.0
        ),
    )
}

fn random_image(n: usize, seed: u64) -> Heightmap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hm = Heightmap::new(n, n, 0.11 / 32.0, [0.0, 0.0], 0.0).unwrap();
    for r in 0..n {
        for c in 0..n {
            if rng.gen::<f64>() < 0.1 {
                hm.set_unknown(r, c);
            } else {
                hm.set(r, c, rng.gen_range(0.0..0.08));
            }
        }
    }
    hm
}

/// Initialized model with non-trivial biases and normalization statistics.
fn scrambled(spec: &ModelSpec, seed: u64) -> hybrid_grasp::reward_model::RewardModel {
    let mut m = init_model(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let layout = m.layout();
    for blk in &layout.hidden {
        for o in 0..blk.out_c {
            m.params[blk.b + o] = rng.gen_range(-0.2..0.2);
            m.params[blk.gamma + o] = rng.gen_range(0.5..1.5);
            m.params[blk.beta + o] = rng.gen_range(-0.3..0.3);
            m.running[blk.running + o] = rng.gen_range(-0.5..0.5);
            m.running[blk.running + blk.out_c + o] = rng.gen_range(0.3..2.0);
        }
    }
    m
}

fn fcn_identity() -> Verdict {
    let m = scrambled(&ModelSpec::default(), 8);
    let img = random_image(110, 4);
    let rot = rotate_image(&img, 0.0);
    let dense = forward_dense(&m, &img).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let crops = 100;
    let rows = dense.rows.min(rot.image.height() - m.spec.window + 1);
    let cols = dense.cols.min(rot.image.width() - m.spec.window + 1);
    for _ in 0..crops {
        let (i, j) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
        let w = crop(&rot, i, j, m.spec.window).unwrap();
        let out = forward_window(&m, &w, false, 0).unwrap();
        for p in 0..m.spec.n_prim {
            worst = worst.max((out.probs[p] - dense.prob(p, i, j) as f64).abs());
        }
    }
    let spec = ModelSpec::tiny();
    let tiny = scrambled(&spec, 21);
    let rf = spec.receptive_field();
    let data: Vec<TrainSample> = (0..6)
        .map(|i| TrainSample {
            window: random_image(rf, 40 + i),
            m: i as usize % spec.n_prim,
            reward: (i % 3 == 0) as u8,
            aux: [0.2 - 0.1 * i as f64, 0.05 * i as f64, 0.3],
        })
        .collect();
    let g = gradient_check(&tiny, &data, 200, 1e-3, 77).unwrap();
    verdict(
        worst <= 1e-5 && g.failures == 0,
        format!(
            "{crops} crops, max |dense - windowed| = {worst:.1e}; gradient check {}/{} coordinates over 1e-3 (worst {:.1e})",
            g.failures, g.checked, g.worst_relative
        ),
    )
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        sxy += (i as f64 - mx) * (y - my);
        sxx += (i as f64 - mx).powi(2);
    }
    sxy / sxx
}

fn learning_effect() -> Verdict {
    let run = desk_run();
    let world = WorldConfig::default();
    let stage = &world.scene.stages[2];
    let held_out = |policy| Scenario { policy, attempt_budget: 1, ..Scenario::new("held-out", 1, stage.objects, &stage.kinds) };
    let greedy = evaluate_grasp_rate(Some(&run.model), &held_out(EvalPolicy::Model), &world, 20, 5, 200, 4242).unwrap();
    let random = evaluate_grasp_rate(None, &held_out(EvalPolicy::Random), &world, 20, 5, 200, 4242).unwrap();
    let bce: Vec<f64> = run.metrics.iter().map(|r| r.val_bce).filter(|v| v.is_finite()).collect();
    let last = bce.last().copied().unwrap_or(f64::NAN);
    let s = if bce.len() > 1 { slope(&bce) } else { f64::NAN };
    let ratio = greedy.rate / random.rate;
    verdict(
        run.dataset.len() >= 2000 && greedy.rate >= 1.5 * random.rate && last < LN2 && s < 0.0,
        format!(
            "{} attempts; greedy {}/{} vs random {}/{} (ratio {ratio:.2}); final val BCE {last:.4}, slope {s:.2e} per checkpoint over {}",
            run.dataset.len(),
            greedy.successes,
            greedy.attempts,
            random.successes,
            random.attempts,
            bce.len()
        ),
    )
}

/// Executed random-policy grasps on stage-2 scenes, as training samples.
fn random_samples(n: usize, seed: u64, rf: usize) -> Vec<TrainSample> {
    let world = WorldConfig::default();
    let stage = &world.scene.stages[2];
    let max_stroke = world.planner.gripper.max_stroke;
    let mut out = Vec::with_capacity(n);
    let mut bin = 0u64;
    while out.len() < n {
        let bseed = rng::derive(seed, &[bin]);
        let mut scene = sample_scene_with(&world.scene, stage.objects, &stage.kinds, bseed).unwrap();
        let planner = world.planner_for(&scene);
        for t in 0..10u64 {
            if scene.is_empty() || out.len() == n {
                break;
            }
            let hm = render_heightmap(&scene, &world.grid).unwrap();
            let geometry = MapGeometry::new(&hm, 20, rf, 4).unwrap();
            let len = geometry.len();
            let map = RewardMap { geometry, values: vec![0.5; len] };
            let eligible = occupied_cells(&hm, &map, planner.bounds, world.min_object_height);
            let mut r = rng::stream(bseed, &[t]);
            let Ok(plan) = plan_grasp(&hm, &map, &Strategy::Random, &planner, &mut r, &mut HashSet::new(), Some(&eligible)) else {
                break;
            };
            if !plan.accepted() {
                continue;
            }
            let act = plan.candidate.action;
            let (res, after) = execute_grasp(&scene, &act, &planner.gripper, &planner.sim, rng::derive(bseed, &[t, 1])).unwrap();
            let w = extract_window(&hm, act.x, act.y, act.a, rf).unwrap();
            out.push(TrainSample { window: w.image, m: act.m, reward: res.reward, aux: [act.b, act.c, res.d_final / max_stroke] });
            scene = after;
        }
        bin += 1;
    }
    out
}

fn aux_trend() -> Verdict {
    let spec = ModelSpec::default();
    let rf = spec.receptive_field();
    let t = Instant::now();
    let pool = random_samples(10_000, 31, rf);
    let held = random_samples(1_000, 977, rf);
    let held: Vec<&TrainSample> = held.iter().collect();
    eprintln!("aux study: {} + {} samples collected in {:.0} s", pool.len(), held.len(), t.elapsed().as_secs_f64());
    let seeds = 5;
    let mut gaps = Vec::new();
    let mut summary = Vec::new();
    for (size, epochs) in [(1_000usize, 30usize), (10_000, 3)] {
        let (mut none, mut aux) = (0.0, 0.0);
        for s in 0..seeds {
            for (task, acc) in [(AuxTask::None, &mut none), (AuxTask::Lateral, &mut aux)] {
                let mut model = init_model(&spec, 100 + s).unwrap();
                let cfg = TrainConfig { epochs, aux_task: task, seed: 100 + s, val_fraction: 0.0, ..TrainConfig::default() };
                train(&mut model, &pool[..size], &cfg).unwrap();
                *acc += evaluate_bce(&model, &held) / seeds as f64;
            }
        }
        gaps.push(none - aux);
        summary.push(format!("{size} samples: no-aux {none:.4}, aux-lateral {aux:.4}"));
    }
    verdict(
        gaps[0] >= 0.0 && gaps[1] < gaps[0],
        format!("{}; gap {:.4} -> {:.4} ({:.0} s)", summary.join("; "), gaps[0], gaps[1], t.elapsed().as_secs_f64()),
    )
}

fn lateral_support() -> Verdict {
    let run = desk_run();
    let logged: Vec<_> = run.dataset.iter().filter(|r| r.executed).collect();
    let worst = logged.iter().map(|r| r.b.abs().max(r.c.abs())).fold(0.0, f64::max);
    let all = run.dataset.iter().map(|r| r.b.abs().max(r.c.abs())).fold(0.0, f64::max);
    verdict(
        worst <= 0.5 && all <= 0.5 && !logged.is_empty(),
        format!("{} executed of {} logged attempts, max |b|, |c| = {all:.4} rad", logged.len(), run.dataset.len()),
    )
}

fn plan_once(model: &hybrid_grasp::reward_model::RewardModel, hm: &Heightmap, world: &WorldConfig) -> f64 {
    let t = Instant::now();
    let map = infer_grid(model, hm, 20).unwrap();
    let mut r = rng::stream(5, &[rng::label::SELECT]);
    let planner = hybrid_grasp::policy::PlannerConfig { bounds: Some(world.scene.bin.inner_bounds()), ..world.planner.clone() };
    plan_grasp(hm, &map, &Strategy::Greedy, &planner, &mut r, &mut HashSet::new(), None).unwrap();
    t.elapsed().as_secs_f64() * 1e3
}

fn median_ms(pool: &rayon::ThreadPool, f: impl Fn() -> f64 + Sync) -> f64 {
    let mut v: Vec<f64> = (0..5).map(|_| pool.install(&f)).collect();
    v.sort_by(f64::total_cmp);
    v[2]
}

fn performance_budget() -> Verdict {
    let world = WorldConfig::default();
    let model = init_model(&ModelSpec::default(), 3).unwrap();
    let scene = sample_scene(&world.scene, 2, 9).unwrap();
    let hm = render_heightmap(&scene, &world.grid).unwrap();
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let one = median_ms(&pool(1), || plan_once(&model, &hm, &world));
    let eight = median_ms(&pool(8), || plan_once(&model, &hm, &world));
    let speedup = one / eight;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    verdict(
        one <= 500.0 && speedup >= 3.0,
        format!("plan {one:.0} ms on 1 thread; 8 workers {eight:.0} ms, speedup {speedup:.2}x ({cores} cores available)"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("action-grid cardinality", action_grid_cardinality),
        ("controller ramp recovery", controller_ramp_recovery),
        ("collision soundness", collision_soundness),
        ("FCN identity", fcn_identity),
        ("performance budget", performance_budget),
        ("learning effect", learning_effect),
        ("lateral-angle support", lateral_support),
        ("short-gripper trend", short_gripper_trend),
        ("auxiliary-task trend", aux_trend),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| verdict(false, format!("panicked: {}", e.downcast_ref::<String>().cloned().unwrap_or_default())));
        failed += !v.pass as usize;
        println!("{} {name}: {} [{:.1} s]", if v.pass { "PASS" } else { "FAIL" }, v.detail, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
