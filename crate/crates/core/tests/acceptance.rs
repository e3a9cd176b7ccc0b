//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Arguments that are not flags select criteria by number or by a substring
//! of their name, e.g. `cargo test --test acceptance -- 4 resume`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use edgeseg::edge::{extract_edge_map, EdgeExtractor};
use edgeseg::inference::{plan_windows, sliding_window_predict, InferConfig, PatchPredictor, WindowOrder, STRIDE, WINDOW};
use edgeseg::losses::{cross_entropy, dice_loss, edge_loss, total_loss, LossWeights};
use edgeseg::metrics::{dice_score, percentile_95, surface_distances};
use edgeseg::network::{Mode, Model, NetworkConfig};
use edgeseg::phantom::{make_ellipsoid_phantom, PhantomSpec};
use edgeseg::trainer::{lr_schedule, Case, Dataset, LogRecord, Normalization, Preprocess, TrainConfig, Trainer};
use edgeseg::volume_io::{Volume, VolumeKind, CANONICAL_SPACING};
use edgeseg::{Result, Shape5, Tensor};
use edgeseg_tensor::{Gradients, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "loss identities", loss_identities),
    (2, "loss gradient check", gradient_check),
    (3, "shape suite", shape_suite),
    (4, "overfit one phantom", overfit_one_phantom),
    (5, "schedule conformance", schedule_conformance),
    (6, "sliding-window oracle", sliding_window_oracle),
    (7, "edge oracle", edge_oracle),
    (8, "metric oracle", metric_oracle),
    (9, "determinism and resume", determinism_and_resume),
    (10, "transfer direction of effect", transfer_direction),
    (11, "PROMISE12 integration", promise12_integration),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |n: u32, name: &str| {
        filters.is_empty() || filters.iter().any(|f| match f.parse::<u32>() {
            Ok(k) => k == n,
            Err(_) => name.contains(f.as_str()),
        })
    };
    let mut failed = Vec::new();
    let mut ran = 0;
    for (n, name, f) in CRITERIA {
        if !selected(n, name) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => ("FAIL", d),
            Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] criterion {n:>2} {name} ({secs:.1} s): {detail}");
        if matches!(outcome, Fail(_)) {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: {ran} criteria run, none failed");
    } else {
        println!("acceptance: {ran} criteria run, failed: {failed:?}");
        std::process::exit(1);
    }
}

fn t64(shape: Shape5, values: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, values)
}

fn line(values: &[f64]) -> Tensor<f64> {
    t64(Shape5::new(1, 1, values.len(), 1, 1), values.to_vec())
}

// 1 ------------------------------------------------------------------------

fn loss_identities() -> Outcome {
    let (_, mask) = make_ellipsoid_phantom::<f64>(&PhantomSpec::centered([16, 16, 8], 0)).unwrap();
    let y = mask.to_tensor();
    let w = LossWeights::default();
    let perfect = [
        dice_loss(&y, &y, w.eps_dice).unwrap().value,
        cross_entropy(&y, &y, w.eps_log).unwrap().value,
        edge_loss(&y, &y).unwrap().value,
    ];
    let perfect_ok = perfect.iter().all(|v| v.abs() <= 1e-6);

    // eps_dice -> 0 limit of the four-voxel example
    let third = dice_loss(&line(&[1.0, 1.0, 0.0, 0.0]), &line(&[0.5; 4]), 1e-12).unwrap().value;
    let third_err = (third - 1.0 / 3.0).abs();

    // y = [1,1,1], p = [1,1,0] gives dice 0.2; one unit error in ten voxels gives MSE 0.1
    let weights = LossWeights { eps_dice: 1e-15, ..LossWeights::default() };
    let prob = line(&[1.0, 1.0, 0.0]);
    let target = line(&[1.0, 1.0, 1.0]);
    let mut e_pred = vec![0.0; 10];
    e_pred[3] = 1.0;
    let e_pred = line(&e_pred);
    let e_tgt = line(&[0.0; 10]);
    let (b, _) = total_loss(&prob, [&e_pred; 3], &target, [&e_tgt; 3], &weights).unwrap();
    let hand = 0.2 + 0.5 * 0.1 + 0.8 * 0.1 + 1.0 * 0.1;
    let total_err = (b.total - 0.43).abs().max((b.total - hand).abs());
    let terms_ok = (b.dice - 0.2).abs() < 1e-9 && b.edge.iter().all(|&e| (e - 0.1).abs() < 1e-12);
    verdict(
        perfect_ok && third_err <= 1e-6 && total_err <= 1e-9 && terms_ok,
        format!(
            "perfect (dice, ce, edge) = [{:.1e}, {:.1e}, {:.1e}]; 4-voxel dice {third:.9} (|err| {third_err:.1e}); \
             total {:.12} vs 0.43 (|err| {total_err:.1e})",
            perfect[0], perfect[1], perfect[2], b.total
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn max_rel_error(analytic: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        let a = analytic.data()[i];
        let scale = a.abs().max(numeric.abs());
        if scale > 1e-10 {
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = Shape5::new(2, 1, 4, 4, 2);
    let (mut worst_dice, mut worst_ce, mut worst_edge) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let pred = Tensor::from_fn(shape, |_| rng.gen_range(0.05..0.95));
        let target = Tensor::from_fn(shape, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let edge_target = Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0));
        let d = dice_loss(&pred, &target, 1e-5).unwrap();
        worst_dice = worst_dice.max(max_rel_error(&d.grad, &|p| dice_loss(p, &target, 1e-5).unwrap().value, &pred));
        let c = cross_entropy(&pred, &target, 1e-7).unwrap();
        worst_ce = worst_ce.max(max_rel_error(&c.grad, &|p| cross_entropy(p, &target, 1e-7).unwrap().value, &pred));
        let e = edge_loss(&pred, &edge_target).unwrap();
        worst_edge = worst_edge.max(max_rel_error(&e.grad, &|p| edge_loss(p, &edge_target).unwrap().value, &pred));
    }
    let worst = worst_dice.max(worst_ce).max(worst_edge);
    verdict(
        worst < 1e-4,
        format!("max relative error dice {worst_dice:.2e}, cross-entropy {worst_ce:.2e}, edge {worst_edge:.2e} over 10 random 2x4x4x2 draws"),
    )
}

// 3 ------------------------------------------------------------------------

fn reduced_width() -> NetworkConfig {
    NetworkConfig { width_multiplier: 0.25, ..NetworkConfig::default() }
}

fn zero_gradient_fraction(model: &Model<f32>, input: &Tensor<f32>, target: &Tensor<f32>) -> f64 {
    let mut g = Graph::new(model.params());
    let x = g.input(input.clone());
    let out = model.forward_graph(&mut g, x).unwrap();
    let edges = out.edges.unwrap();
    let mask = Volume::from_tensor(target, CANONICAL_SPACING, VolumeKind::Label).unwrap();
    let maps = edgeseg::edge::EdgeMapSet::from_mask(&mask, EdgeExtractor::Surface).unwrap().maps.map(|m| m.to_tensor());
    let (_, lg) = total_loss(
        g.value(out.prob),
        edges.map(|v| g.value(v)),
        target,
        [&maps[0], &maps[1], &maps[2]],
        &LossWeights::default(),
    )
    .unwrap();
    let [g1, g2, g3] = lg.edges;
    let grads: Gradients<f32> = g.backward(&[(out.prob, lg.prob), (edges[0], g1), (edges[1], g2), (edges[2], g3)]);
    let (mut zero, mut total) = (0usize, 0usize);
    for (id, grad) in grads.iter() {
        let n = model.params().get(id).len();
        total += n;
        zero += match grad {
            Some(t) => t.data().iter().filter(|&&v| v == 0.0).count(),
            None => n,
        };
    }
    zero as f64 / total as f64
}

fn shape_suite() -> Outcome {
    let mut model = Model::<f32>::new(&reduced_width(), Mode::Full, 0).unwrap();
    let mut problems = Vec::new();
    for dims in [[96, 96, 32], [48, 48, 16]] {
        let (image, _) = make_ellipsoid_phantom::<f32>(&PhantomSpec::centered(dims, 1)).unwrap();
        let out = model.forward(&image.to_tensor()).unwrap();
        let edges = out.edges.unwrap();
        let expect = [[4, 4, 2], [2, 2, 1], [1, 1, 1]].map(|f| Shape5::new(1, 1, dims[0] / f[0], dims[1] / f[1], dims[2] / f[2]));
        if out.prob.shape() != Shape5::new(1, 1, dims[0], dims[1], dims[2]) {
            problems.push(format!("{dims:?}: prob {}", out.prob.shape()));
        }
        for (e, s) in edges.iter().zip(expect) {
            if e.shape() != s {
                problems.push(format!("{dims:?}: edge {} expected {s}", e.shape()));
            }
        }
        let in_range = |t: &Tensor<f32>| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&out.prob) || !edges.iter().all(in_range) {
            problems.push(format!("{dims:?}: output outside [0, 1]"));
        }
    }
    let (_, mask) = make_ellipsoid_phantom::<f32>(&PhantomSpec::centered([96, 96, 32], 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = Tensor::from_fn(mask.to_tensor().shape(), |_| rng.gen_range(-1.0f32..1.0));
    let at_init = zero_gradient_fraction(&model, &input, &mask.to_tensor());
    // zero-initialized residual scales block gradients into their branches at
    // initialization, so connectivity is probed with random-normal weights
    model.perturb(0.05, 3);
    let perturbed = zero_gradient_fraction(&model, &input, &mask.to_tensor());
    if perturbed >= 0.05 {
        problems.push(format!("zero-gradient fraction {perturbed:.4}"));
    }
    let detail = format!(
        "width 0.25, blocks 3/4/23/3; shapes and ranges checked at 96x96x32 and 48x48x16; zero-gradient fraction \
         on random input {:.4}% with random-normal weights ({:.1}% at initialization){}",
        perturbed * 100.0,
        at_init * 100.0,
        if problems.is_empty() { String::new() } else { format!("; problems: {}", problems.join("; ")) }
    );
    verdict(problems.is_empty(), detail)
}

// 4 ------------------------------------------------------------------------

fn overfit_one_phantom() -> Outcome {
    let dims = [96, 96, 32];
    let (raw, mask) = make_ellipsoid_phantom::<f32>(&PhantomSpec::centered(dims, 0)).unwrap();
    let pre = Preprocess { spacing: CANONICAL_SPACING, normalization: Normalization::ZScore };
    let image = pre.image(&raw).unwrap();
    let dataset = Dataset::from_cases(vec![Case { id: "phantom".into(), image: image.clone(), label: mask.clone() }]).unwrap();
    let mut cfg = TrainConfig::new(Mode::Full);
    cfg.network = reduced_width();
    cfg.augment.enabled = false;
    cfg.augment.patch_shape = dims;
    cfg.batch_size = 1;
    cfg.max_iterations = 200;
    assert_eq!(cfg.optimizer.lr, 1e-3);
    let start = Instant::now();
    let mut trainer = Trainer::<f32>::new(cfg, dataset).unwrap();
    let mut last = None;
    while trainer.iteration() < 200 {
        let rec = trainer.step().unwrap();
        if rec.iteration % 10 == 0 {
            eprintln!("  overfit iteration {:>3}: total {:.4}, dice {:.4}", rec.iteration, rec.total, rec.dice);
        }
        let done = rec.dice < 0.05;
        last = Some(rec);
        if done {
            break;
        }
    }
    let last = last.unwrap();
    // training dice is measured before each update; re-evaluate after the last one
    let out = trainer.model().forward(&image.to_tensor()).unwrap();
    let prob = Volume::from_tensor(&out.prob, CANONICAL_SPACING, VolumeKind::Image).unwrap();
    let train_dice_loss = dice_loss(&out.prob, &mask.to_tensor(), 1e-5).unwrap().value;
    let binary = edgeseg::inference::binarize(&prob, 0.5, false).unwrap();
    let score = dice_score(&binary, &mask).unwrap();
    let elapsed = start.elapsed();
    verdict(
        last.dice < 0.05 && score >= 0.95 && elapsed <= Duration::from_secs(2 * 3600),
        format!(
            "{} iterations, last training dice loss {:.4} (after final update {:.4}), dice_score {:.4}, {:.1} min CPU",
            last.iteration + 1,
            last.dice,
            train_dice_loss,
            score,
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn schedule_conformance() -> Outcome {
    let cfg = TrainConfig::new(Mode::Full);
    let got = [0, 2000, 4000].map(|it| lr_schedule(it, &cfg, 1));
    let within = [1999, 3999].map(|it| lr_schedule(it, &cfg, 1));
    verdict(
        got == [0.001, 0.0001, 0.00001] && within == [0.001, 0.0001],
        format!("lr at 0/2000/4000 = {got:?}; at 1999/3999 = {within:?}"),
    )
}

// 6 ------------------------------------------------------------------------

/// Returns, for every window, a constant identifying the window's origin,
/// which it reads back from the coordinate-encoding input.
struct OriginStub;

fn stub_value(origin: [usize; 3]) -> f64 {
    0.1 + 0.01 * (origin[0] / 24) as f64 + 0.02 * (origin[1] / 24) as f64 + 0.04 * (origin[2] / 8) as f64
}

impl PatchPredictor<f64> for OriginStub {
    fn predict(&self, patch: &Tensor<f64>) -> Result<Tensor<f64>> {
        let code = patch.data()[0] as usize;
        let origin = [code % 1000, (code / 1000) % 1000, code / 1_000_000];
        Ok(Tensor::full(patch.shape(), stub_value(origin)))
    }
}

fn sliding_window_oracle() -> Outcome {
    let dims = [120, 120, 40];
    let plan = plan_windows(dims, WINDOW, STRIDE).unwrap();
    let mut expected_origins = Vec::new();
    for z in [0, 8] {
        for y in [0, 24] {
            for x in [0, 24] {
                expected_origins.push([x, y, z]);
            }
        }
    }
    let origins_ok = plan.origins == expected_origins;

    let volume = Volume::from_fn(dims, [1.0; 3], VolumeKind::Image, |x, y, z| (x + 1000 * y + 1_000_000 * z) as f64).unwrap();
    let base = InferConfig::default();
    let out = sliding_window_predict(&OriginStub, &volume, &base).unwrap();
    // voxel -> windows covering it, worked out from the origins above
    let v = stub_value;
    let hand = [
        ([0, 0, 0], v([0, 0, 0])),
        ([119, 0, 0], v([24, 0, 0])),
        ([50, 0, 0], (v([0, 0, 0]) + v([24, 0, 0])) / 2.0),
        ([100, 10, 35], v([24, 0, 8])),
        ([10, 100, 20], (v([0, 24, 0]) + v([0, 24, 8])) / 2.0),
        (
            [50, 50, 20],
            expected_origins.iter().map(|&o| v(o)).sum::<f64>() / 8.0,
        ),
    ];
    let mut hand_err: f64 = 0.0;
    for (p, e) in hand {
        hand_err = hand_err.max((out.get(p[0], p[1], p[2]) - e).abs());
    }

    let mut invariance: f64 = 0.0;
    for (order, workers) in [(WindowOrder::Reverse, 1), (WindowOrder::Shuffled(7), 1), (WindowOrder::Raster, 3), (WindowOrder::Shuffled(11), 4)] {
        let cfg = InferConfig { order, workers, ..base.clone() };
        let other = sliding_window_predict(&OriginStub, &volume, &cfg).unwrap();
        for (a, b) in out.data().iter().zip(other.data()) {
            invariance = invariance.max((a - b).abs());
        }
    }
    verdict(
        origins_ok && hand_err <= 1e-9 && invariance < 1e-6,
        format!(
            "{} origins (expected 8: {}); max error vs hand averages {hand_err:.1e}; max change across orders/workers {invariance:.1e}",
            plan.origins.len(),
            if origins_ok { "match" } else { "MISMATCH" }
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn brute_edges(mask: &Volume<f64>) -> Vec<bool> {
    let [nx, ny, nz] = mask.dims();
    let fg = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < nx
            && (y as usize) < ny
            && (z as usize) < nz
            && mask.get(x as usize, y as usize, z as usize) > 0.0
    };
    let mut out = Vec::with_capacity(mask.len());
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                let n = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                out.push(fg(x, y, z) && n.iter().any(|&(a, b, c)| !fg(x + a, y + b, z + c)));
            }
        }
    }
    out
}

fn random_mask(rng: &mut ChaCha8Rng, max: usize, density: f64) -> Volume<f64> {
    let dims = [rng.gen_range(1..=max), rng.gen_range(1..=max), rng.gen_range(1..=max)];
    Volume::from_fn(dims, CANONICAL_SPACING, VolumeKind::Label, |_, _, _| rng.gen_bool(density) as u8 as f64).unwrap()
}

fn edge_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..50 {
        let density = rng.gen_range(0.2..0.9);
        let m = random_mask(&mut rng, 8, density);
        let fast: Vec<bool> = extract_edge_map(&m).unwrap().data().iter().map(|&v| v > 0.0).collect();
        if fast != brute_edges(&m) {
            mismatches += 1;
        }
    }
    let cube = Volume::from_fn([5, 5, 5], [1.0; 3], VolumeKind::Label, |x, y, z| {
        ((1..4).contains(&x) && (1..4).contains(&y) && (1..4).contains(&z)) as u8 as f64
    })
    .unwrap();
    let cube_edges = extract_edge_map(&cube).unwrap().foreground_count();
    verdict(
        mismatches == 0 && cube_edges == 26,
        format!("{mismatches}/50 random masks differ from the brute-force oracle; 3x3x3 cube has {cube_edges} edge voxels"),
    )
}

// 8 ------------------------------------------------------------------------

fn brute_distances(a: &Volume<f64>, b: &Volume<f64>, s: [f64; 3]) -> Option<Vec<f64>> {
    let pts = |m: &Volume<f64>| -> Vec<[usize; 3]> {
        let [nx, ny, _] = m.dims();
        brute_edges(m).iter().enumerate().filter(|(_, &e)| e).map(|(i, _)| [i % nx, (i / nx) % ny, i / (nx * ny)]).collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        let d = |k: usize| ((p[k] as f64 - q[k] as f64) * s[k]).powi(2);
        ((d(0) + d(1)) + d(2)).sqrt()
    };
    let mut out: Vec<f64> = pa.iter().map(|p| pb.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).collect();
    out.extend(pb.iter().map(|q| pa.iter().map(|p| dist(p, q)).fold(f64::INFINITY, f64::min)));
    Some(out)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spacings = [CANONICAL_SPACING, [1.0; 3], [0.8, 0.8, 3.0], [0.3, 0.7, 1.1]];
    let (mut compared, mut hd_mismatch, mut applicability) = (0, 0, 0);
    let mut msd_err: f64 = 0.0;
    for i in 0..300 {
        let s = spacings[i % spacings.len()];
        let density = rng.gen_range(0.05..0.8);
        let a = random_mask(&mut rng, 6, density).with_spacing(s).unwrap();
        let b = Volume::from_fn(a.dims(), s, VolumeKind::Label, |_, _, _| rng.gen_bool(density) as u8 as f64).unwrap();
        match (surface_distances(&a, &b, s).unwrap(), brute_distances(&a, &b, s)) {
            (None, None) => {}
            (Some(fast), Some(mut d)) => {
                compared += 1;
                d.sort_by(f64::total_cmp);
                if fast.hd95 != percentile_95(&d) {
                    hd_mismatch += 1;
                }
                let msd = d.iter().sum::<f64>() / d.len() as f64;
                msd_err = msd_err.max((fast.msd - msd).abs());
            }
            _ => applicability += 1,
        }
    }
    verdict(
        hd_mismatch == 0 && applicability == 0 && msd_err <= 1e-12,
        format!(
            "{compared} mask pairs up to 6x6x6 over 4 spacings: {hd_mismatch} hd95 mismatches (exact comparison), \
             max msd difference {msd_err:.1e}, {applicability} applicability disagreements"
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn small_dataset(n: usize, dims: [usize; 3], first: u64) -> Dataset<f32> {
    let pre = Preprocess { spacing: CANONICAL_SPACING, normalization: Normalization::ZScore };
    let cases = (0..n)
        .map(|i| {
            let mut spec = PhantomSpec::centered(dims, first + i as u64);
            spec.center[0] += i as f64 - 1.0;
            spec.radii[1] *= 1.0 + 0.1 * i as f64;
            let (image, label) = make_ellipsoid_phantom::<f32>(&spec).unwrap();
            Case { id: format!("c{i}"), image: pre.image(&image).unwrap(), label }
        })
        .collect();
    Dataset::from_cases(cases).unwrap()
}

fn small_config(mode: Mode) -> TrainConfig {
    let mut c = TrainConfig::new(mode);
    c.network = NetworkConfig { width_multiplier: 0.125, blocks: [1, 1, 1, 1] };
    c.augment.patch_shape = [16, 16, 8];
    c.augment.max_displacement = 2.0;
    c.batch_size = 2;
    c.seed = 21;
    c
}

fn bits(history: &[LogRecord]) -> Vec<Vec<u64>> {
    history.iter().map(|r| r.losses().iter().map(|v| v.to_bits()).collect()).collect()
}

fn params_of(t: &Trainer<f32>) -> Vec<Tensor<f32>> {
    t.model().params().iter().map(|(_, p)| p.value.clone()).collect()
}

fn determinism_and_resume() -> Outcome {
    let data = small_dataset(3, [32, 32, 16], 0);
    let run = |n: u64| {
        let mut c = small_config(Mode::Full);
        c.max_iterations = n;
        let mut t = Trainer::<f32>::new(c, data.clone()).unwrap();
        while t.iteration() < n {
            t.step().unwrap();
        }
        t
    };
    let a = run(50);
    let b = run(50);
    let identical = bits(a.history()) == bits(b.history()) && a.history().len() == 50;

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("iter25.ckpt");
    run(25).checkpoint().save(&path).unwrap();
    let mut c = small_config(Mode::Full);
    c.max_iterations = 50;
    let mut resumed = Trainer::<f32>::resume(c, data.clone(), &path).unwrap();
    let rec26 = resumed.step().unwrap();
    let unbroken = run(26);
    let record_match = bits(&[rec26.clone()]) == bits(&unbroken.history()[25..26]);
    let params_match = params_of(&resumed) == params_of(&unbroken);
    verdict(
        identical && record_match && params_match,
        format!(
            "50-iteration loss curves bit-identical: {identical}; resumed step 26 loss record identical: {record_match}; \
             parameters after step 26 identical: {params_match} (loss {:.6})",
            rec26.total
        ),
    )
}

// 10 -----------------------------------------------------------------------

/// Mean dice loss of the model over whole training volumes.
fn whole_volume_dice_loss(model: &Model<f32>, data: &Dataset<f32>) -> f64 {
    let losses: Vec<f64> = data
        .cases()
        .iter()
        .map(|c| {
            let prob = model.forward(&c.image.to_tensor()).unwrap().prob;
            dice_loss(&prob, &c.label.to_tensor(), 1e-5).unwrap().value
        })
        .collect();
    mean(&losses)
}

fn transfer_direction() -> Outcome {
    let data = small_dataset(4, [32, 32, 16], 0);
    // pretraining sees different, more numerous phantoms than fine-tuning
    let pretrain_data = small_dataset(8, [32, 32, 16], 100);
    let tmp = tempfile::tempdir().unwrap();
    let mut pc = small_config(Mode::Pretrain);
    pc.max_iterations = 300;
    pc.seed = 5;
    let mut pre = Trainer::<f32>::new(pc, pretrain_data).unwrap();
    while pre.iteration() < 300 {
        pre.step().unwrap();
    }
    let pre_ce = pre.history().last().unwrap().total;
    let ck_path = tmp.path().join("encoder.ckpt");
    pre.checkpoint().save(&ck_path).unwrap();

    let run = |warm: bool| -> (f64, f64) {
        let mut c = small_config(Mode::Full);
        c.max_iterations = 100;
        let mut t = Trainer::<f32>::new(c, data.clone()).unwrap();
        if warm {
            t.load_encoder(&ck_path, true).unwrap();
        }
        while t.iteration() < 100 {
            t.step().unwrap();
        }
        (whole_volume_dice_loss(t.model(), &data), t.history()[99].dice)
    };
    let ((cold, cold_batch), (warm, warm_batch)) = (run(false), run(true));
    verdict(
        warm <= cold,
        format!(
            "whole-volume dice loss after 100 iterations: warm start {warm:.4}, cold start {cold:.4} \
             (iteration-100 minibatch: warm {warm_batch:.4}, cold {cold_batch:.4}; pretraining ended at cross-entropy {pre_ce:.4})"
        ),
    )
}

// 11 -----------------------------------------------------------------------

/// `train` (with a hold-out split) then `infer` on each held-out case then
/// `eval`, all through the binary. Returns per-case dice values.
fn end_to_end(data: &Path, work: &Path, holdout: usize, train_flags: &[&str], infer_flags: &[&str]) -> std::result::Result<Vec<f64>, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let run_dir = work.join("train");
    let holdout_s = holdout.to_string();
    let mut args: Vec<String> = ["train", "--data.root"].iter().map(|a| a.to_string()).collect();
    args.extend([s(data), "--run-dir".into(), s(&run_dir), "--train.holdout".into(), holdout_s]);
    args.extend(train_flags.iter().map(|a| a.to_string()));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = common::edgeseg(&argv);
    if !out.status.success() {
        return Err(format!("train failed: {}", common::stderr(&out)));
    }
    let ckpts = std::fs::read_dir(run_dir.join("checkpoints")).map_err(|e| e.to_string())?;
    let ck = ckpts.filter_map(|e| e.ok().map(|e| e.path())).max().ok_or("no checkpoint")?;
    let held = std::fs::read_to_string(run_dir.join("holdout.txt")).map_err(|e| e.to_string())?;
    let (preds, gt) = (work.join("preds"), work.join("gt"));
    std::fs::create_dir_all(&preds).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&gt).map_err(|e| e.to_string())?;
    for id in held.lines() {
        for ext in ["mhd", "raw"] {
            let name = format!("{id}_segmentation.{ext}");
            std::fs::copy(data.join(&name), gt.join(&name)).map_err(|e| e.to_string())?;
        }
        let mut a = vec![
            "infer".to_string(),
            "--checkpoint".into(),
            s(&ck),
            "--input".into(),
            s(&data.join(format!("{id}.mhd"))),
            "--output".into(),
            s(&preds.join(format!("{id}.mhd"))),
            "--run-dir".into(),
            s(&work.join(format!("infer-{id}"))),
        ];
        a.extend(infer_flags.iter().map(|x| x.to_string()));
        let argv: Vec<&str> = a.iter().map(String::as_str).collect();
        let out = common::edgeseg(&argv);
        if !out.status.success() {
            return Err(format!("infer {id} failed: {}", common::stderr(&out)));
        }
    }
    let report = work.join("report.csv");
    let out = common::edgeseg(&[
        "eval",
        "--pred-dir",
        &s(&preds),
        "--gt-dir",
        &s(&gt),
        "--report",
        &s(&report),
        "--run-dir",
        &s(&work.join("eval")),
    ]);
    if !out.status.success() {
        return Err(format!("eval failed: {}", common::stderr(&out)));
    }
    let csv = std::fs::read_to_string(&report).map_err(|e| e.to_string())?;
    let mut dice = Vec::new();
    for row in csv.lines().skip(1).filter(|r| !r.starts_with("mean,") && !r.starts_with("std,")) {
        let cells: Vec<&str> = row.split(',').collect();
        for c in &cells[1..] {
            if *c != "NA" && !c.parse::<f64>().map_or(false, f64::is_finite) {
                return Err(format!("non-finite metric in row {row}"));
            }
        }
        dice.push(cells[1].parse::<f64>().map_err(|e| e.to_string())?);
    }
    Ok(dice)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn promise12_integration() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let Ok(root) = std::env::var("EDGESEG_PROMISE12_ROOT") else {
        // exercise the same pipeline on synthetic cases so a broken pipeline still fails
        let data = common::phantom_dataset(&tmp.path().join("data"), 4, [48, 48, 16]);
        let mut flags: Vec<&str> = common::TINY.to_vec();
        flags.extend(["--max-iterations", "3"]);
        let infer = ["--infer.window", "32,32,16", "--infer.stride", "16,16,8"];
        return match end_to_end(&data, &tmp.path().join("work"), 2, &flags, &infer) {
            Ok(d) => Skip(format!(
                "EDGESEG_PROMISE12_ROOT not set; synthetic stand-in train/infer/eval ran cleanly on {} held-out cases (mean dice {:.4})",
                d.len(),
                mean(&d)
            )),
            Err(e) => Fail(format!("EDGESEG_PROMISE12_ROOT not set; synthetic stand-in failed: {e}")),
        };
    };
    let iterations = std::env::var("EDGESEG_PROMISE12_ITERATIONS").unwrap_or_else(|_| "500".into());
    let holdout: usize = std::env::var("EDGESEG_PROMISE12_HOLDOUT").ok().and_then(|v| v.parse().ok()).unwrap_or(10);
    let flags = [
        "--network.width_multiplier",
        "0.25",
        "--train.batch_size",
        "2",
        "--train.checkpoint_every",
        "100",
        "--max-iterations",
        iterations.as_str(),
    ];
    let infer = ["--infer.workers", "1", "--lcc"];
    match end_to_end(Path::new(&root), &tmp.path().join("work"), holdout, &flags, &infer) {
        Ok(d) => verdict(
            d.iter().all(|v| v.is_finite()) && d.len() == holdout,
            format!("{} held-out cases after {iterations} iterations, all metrics finite, mean dice {:.4}", d.len(), mean(&d)),
        ),
        Err(e) => Fail(e),
    }
}
