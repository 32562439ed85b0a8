//! Acceptance suite. Prints one `PASS`/`FAIL`/`SKIP` line per criterion and
//! exits non-zero if any gating criterion fails.
//!
//! The MNIST criterion reads the dataset root from `RGL_DATA_DIR`; the
//! optional full-scale reproduction only runs with `RGL_FULL_REPRO=1`.

mod common;

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::panic;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;
use receptive_graph::cli::{cmd_train, ExperimentConfig, FrontLayer, GraphKind, SchemeInit};
use receptive_graph::data::load_idx;
use receptive_graph::graph::{build_grid_graph, graph_power, Graph};
use receptive_graph::layer::{effective_operator, Activation, ReceptiveGraphLayer, WeightKernel};
use receptive_graph::model::{dense_stack, Classifier, InputLayer};
use receptive_graph::optim::{train, EpochMetrics, Phase, TrainConfig, TrainObserver};
use receptive_graph::scheme::{
    check_capacity, convolution_scheme_1d, convolution_scheme_2d, fully_connected_scheme, init_onehot, init_uniform,
    ConstraintFlags, OneHotOrdering, SchemeTensor,
};
use receptive_graph::seed::{rng_from, Rng};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn random_vec(len: usize, rng: &mut Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_graph(rows: usize, cols: usize, density: f64, rng: &mut Rng) -> Graph {
    let mut edges: Vec<(usize, usize)> =
        (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).filter(|_| rng.random_bool(density)).collect();
    if edges.is_empty() {
        edges.push((rng.random_range(0..rows), rng.random_range(0..cols)));
    }
    Graph::from_edges(rows, cols, edges).unwrap()
}

// ---------------------------------------------------------------- 1

fn loss(layer: &ReceptiveGraphLayer<f64>, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
    let (_, y) = layer.forward_batch(x.view()).unwrap();
    (&y * c).sum()
}

/// Worst relative error over entries above 1e-6 in magnitude. An entry
/// passes if it is within 1e-5 relative or 1e-8 absolute.
fn compare(analytic: &[f64], numeric: &[f64]) -> (bool, f64) {
    let mut worst = 0.0f64;
    let mut ok = true;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        if scale > 1e-6 {
            worst = worst.max(diff / scale);
        }
        ok &= diff <= 1e-8 || diff <= 1e-5 * scale;
    }
    (ok, worst)
}

fn central_difference(values: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..values.len())
        .map(|k| {
            let orig = values[k];
            values[k] = orig + h;
            let plus = f(values);
            values[k] = orig - h;
            let minus = f(values);
            values[k] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = rng_from(0xC1);
    let cases = 24;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let activations = [Activation::Identity, Activation::Relu, Activation::Softmax];
    for case in 0..cases {
        let (n_out, n_in) = (rng.random_range(1..=30), rng.random_range(1..=30));
        let omega = rng.random_range(1..=8);
        let (p, q) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let density = rng.random_range(0.05..0.4);
        let g = random_graph(n_out, n_in, density, &mut rng);
        let activation = activations[case % 3];
        let batch = rng.random_range(1..=3);
        let (lay, x) = loop {
            let scheme = SchemeTensor::from_values(g.clone(), omega, random_vec(g.nnz() * omega, &mut rng)).unwrap();
            let kernel = WeightKernel::new(omega, p, q, random_vec(omega * p * q, &mut rng)).unwrap();
            let layer = ReceptiveGraphLayer::new(scheme, kernel, random_vec(q, &mut rng), activation).unwrap();
            let x = Array2::from_shape_vec((batch, n_in * p), random_vec(batch * n_in * p, &mut rng)).unwrap();
            // Stay away from relu kinks so central differences are exact.
            let (z, _) = layer.forward_batch(x.view()).unwrap();
            if activation != Activation::Relu || z.iter().all(|v| v.abs() > 1e-3) {
                break (layer, x);
            }
        };
        let c = Array2::from_shape_vec((batch, n_out * q), random_vec(batch * n_out * q, &mut rng)).unwrap();
        let (z, y) = lay.forward_batch(x.view()).unwrap();
        let grads = lay.backward_batch(x.view(), &z, &y, &c, true).unwrap();

        let mut probe = lay.clone();
        let dw = central_difference(&mut lay.kernel.values().to_vec(), h, |v| {
            probe.kernel.values_mut().copy_from_slice(v);
            loss(&probe, &x, &c)
        });
        let mut probe = lay.clone();
        let ds = central_difference(&mut lay.scheme.values().to_vec(), h, |v| {
            probe.scheme.values_mut().copy_from_slice(v);
            loss(&probe, &x, &c)
        });
        let mut probe = lay.clone();
        let db = central_difference(&mut lay.bias.clone(), h, |v| {
            probe.bias.copy_from_slice(v);
            loss(&probe, &x, &c)
        });
        let shape = x.dim();
        let dx = central_difference(&mut x.iter().copied().collect::<Vec<_>>(), h, |v| {
            let xp = Array2::from_shape_vec(shape, v.to_vec()).unwrap();
            loss(&lay, &xp, &c)
        });
        let dx_analytic: Vec<f64> = grads.input.unwrap().iter().copied().collect();
        for (name, a, n) in [
            ("dW", &grads.kernel, &dw),
            ("dS", &grads.scheme, &ds),
            ("db", &grads.bias, &db),
            ("dx", &dx_analytic, &dx),
        ] {
            let (ok, w) = compare(a, n);
            worst = worst.max(w);
            if !ok {
                failures.push(format!("case {case} {name} rel {w:.2e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{cases} layers, worst relative error {worst:.2e} (tol 1e-5), {secs:.1}s (limit 60s)");
    if !failures.is_empty() {
        return Verdict::Fail(format!("{detail}; {}", failures.join(", ")));
    }
    verdict(secs < 60.0, detail)
}

// ---------------------------------------------------------------- 2

/// Offsets `(dr, dc)` with `|dr| + |dc| <= k`, by distance then clockwise
/// from straight up.
fn ball_in_spiral_order(k: isize) -> Vec<(isize, isize)> {
    let mut out: Vec<(isize, isize)> =
        (-k..=k).flat_map(|dr| (-k..=k).map(move |dc| (dr, dc))).filter(|(a, b)| a.abs() + b.abs() <= k).collect();
    let angle = |(dr, dc): (isize, isize)| (dc as f64).atan2(-dr as f64).rem_euclid(TAU);
    out.sort_by(|&a, &b| {
        (a.0.abs() + a.1.abs()).cmp(&(b.0.abs() + b.1.abs())).then(angle(a).total_cmp(&angle(b)))
    });
    out
}

/// Direct sliding-window correlation with zero padding.
#[allow(clippy::too_many_arguments)]
fn sliding_window(
    x: &[f64],
    h: usize,
    w: usize,
    p: usize,
    q: usize,
    taps: &[(isize, isize)],
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; h * w * q];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let node = (r * w as isize + c) as usize;
            for o in 0..q {
                let mut acc = bias[o];
                for (t, &(dr, dc)) in taps.iter().enumerate() {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let src = (rr * w as isize + cc) as usize;
                    for ch in 0..p {
                        acc += x[src * p + ch] * kernel[(t * p + ch) * q + o];
                    }
                }
                out[node * q + o] = acc;
            }
        }
    }
    out
}

fn criterion_2() -> Verdict {
    let (w1, w2, w3) = (0.75, -1.5, 2.25);
    let s = convolution_scheme_1d::<f64>(5, 3, 1).unwrap();
    let theta = effective_operator(&s, &WeightKernel::new(3, 1, 1, vec![w1, w2, w3]).unwrap()).unwrap();
    let expected = ndarray::arr2(&[
        [w2, w3, 0.0, 0.0, 0.0],
        [w1, w2, w3, 0.0, 0.0],
        [0.0, w1, w2, w3, 0.0],
        [0.0, 0.0, w1, w2, w3],
        [0.0, 0.0, 0.0, w1, w2],
    ]);
    let toeplitz_ok = theta.dense_channel(0, 0) == expected;

    let mut rng = rng_from(0xC2);
    let (h, w, p, q) = (9, 11, 2, 3);
    let mut worst = 0.0f64;
    let mut check = |scheme: SchemeTensor<f64>, taps: Vec<(isize, isize)>, rng: &mut Rng| {
        let omega = scheme.omega();
        let kernel = random_vec(omega * p * q, rng);
        let bias = random_vec(q, rng);
        let layer = ReceptiveGraphLayer::new(
            scheme,
            WeightKernel::new(omega, p, q, kernel.clone()).unwrap(),
            bias.clone(),
            Activation::Identity,
        )
        .unwrap();
        for _ in 0..4 {
            let x = random_vec(h * w * p, rng);
            let (_, y) = layer.forward_batch(Array2::from_shape_vec((1, h * w * p), x.clone()).unwrap().view()).unwrap();
            let oracle = sliding_window(&x, h, w, p, q, &taps, &kernel, &bias);
            for (a, o) in y.iter().zip(&oracle) {
                worst = worst.max((a - o).abs() / o.abs().max(1e-12));
            }
        }
    };
    for k in 1..=3 {
        let g = graph_power(&build_grid_graph(h, w).unwrap(), k).unwrap();
        let omega = 2 * k * k + 2 * k + 1;
        let scheme = init_onehot(&g, omega, OneHotOrdering::KnownCirculant, 0).unwrap();
        check(scheme, ball_in_spiral_order(k as isize), &mut rng);
    }
    let rect: Vec<(isize, isize)> = (-1..=1).flat_map(|dr| (-2..=2).map(move |dc| (dr, dc))).collect();
    check(convolution_scheme_2d(h, w, 3, 5).unwrap(), rect, &mut rng);

    let ok = toeplitz_ok && worst <= 1e-6;
    verdict(ok, format!("1-D Toeplitz exact: {toeplitz_ok}; 2-D worst relative error {worst:.2e} (tol 1e-6)"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Verdict {
    let mut rng = rng_from(0xC3);
    let s = fully_connected_scheme::<f64>(3, 2).unwrap();
    let mut exact = 0;
    let trials = 100;
    for _ in 0..trials {
        let m = random_vec(6, &mut rng);
        let theta = effective_operator(&s, &WeightKernel::new(6, 1, 1, m.clone()).unwrap()).unwrap();
        let target = Array2::from_shape_vec((2, 3), m).unwrap();
        if theta.dense_channel(0, 0) == target {
            exact += 1;
        }
    }
    verdict(exact == trials, format!("{exact}/{trials} random dense 2x3 operators reconstructed exactly"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Verdict {
    let mut rng = rng_from(0xC4);
    let direct = |l: u64, w: u64, p: u64, q: u64| (l as u128) * (w as u128) + (w as u128) * (p as u128) * (q as u128) <= (l as u128) * (p as u128) * (q as u128);
    let mut tuples = Vec::new();
    // Tight cases: l = ω·pq / (pq − ω) exactly, plus both neighbors.
    while tuples.len() < 600 {
        let (p, q) = (rng.random_range(1..=12u64), rng.random_range(1..=12u64));
        let pq = p * q;
        if pq < 2 {
            continue;
        }
        let w = rng.random_range(1..pq);
        if (w * pq) % (pq - w) == 0 {
            let l = w * pq / (pq - w);
            for l in [l - 1, l, l + 1].into_iter().filter(|&l| l >= 1) {
                tuples.push((l, w, p, q));
            }
        }
    }
    let tight = tuples.len();
    while tuples.len() < 1000 {
        let scale = [10u64, 1_000, 1_000_000, u32::MAX as u64][rng.random_range(0..4)];
        tuples.push((
            rng.random_range(1..=scale),
            rng.random_range(1..=scale.min(10_000)),
            rng.random_range(1..=64),
            rng.random_range(1..=64),
        ));
    }
    let (mut agree, mut trues, mut equalities) = (0, 0, 0);
    for &(l, w, p, q) in &tuples {
        let expected = direct(l, w, p, q);
        if check_capacity(l, w, p, q) == expected {
            agree += 1;
        }
        trues += expected as usize;
        let lhs = (l as u128) * (w as u128) + (w as u128) * (p as u128) * (q as u128);
        equalities += (lhs == (l as u128) * (p as u128) * (q as u128)) as usize;
    }
    let ok = agree == tuples.len() && equalities > 0 && trues > 0 && trues < tuples.len();
    verdict(
        ok,
        format!(
            "{agree}/{} agree ({tight} near the boundary, {equalities} exact equalities, {trues} true)",
            tuples.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn boolean_power(g: &Graph, k: usize) -> BTreeSet<(usize, usize)> {
    let n = g.rows();
    let adj: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| g.contains(i, j)).collect()).collect();
    let mut acc = adj.clone();
    for _ in 1..k {
        let mut next = vec![vec![false; n]; n];
        for i in 0..n {
            for m in 0..n {
                if acc[i][m] {
                    for j in 0..n {
                        next[i][j] |= adj[m][j];
                    }
                }
            }
        }
        acc = next;
    }
    (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| acc[i][j]).collect()
}

fn criterion_5() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let grid = build_grid_graph(28, 28).unwrap();
    for k in 1..=3usize {
        let g = graph_power(&grid, k).unwrap();
        let expected = 2 * k * k + 2 * k + 1;
        let interior: BTreeSet<usize> = (k..28 - k)
            .flat_map(|r| (k..28 - k).map(move |c| r * 28 + c))
            .map(|i| g.degree(i))
            .collect();
        ok &= interior.len() == 1 && interior.contains(&expected);
        notes.push(format!("k={k}: {interior:?}"));
    }
    let mut rng = rng_from(0xC5);
    let trials = 120;
    let mut matched = 0;
    for _ in 0..trials {
        let n = rng.random_range(1..=64);
        let g = random_graph(n, n, rng.random_range(0.01..0.15), &mut rng);
        let k = rng.random_range(1..=4);
        let expected = boolean_power(&g, k);
        // Graphs are never empty, so a vanishing power is reported as an error.
        let same = match graph_power(&g, k) {
            Ok(p) => p.edges().collect::<BTreeSet<_>>() == expected,
            Err(_) => expected.is_empty(),
        };
        matched += same as usize;
    }
    ok &= matched == trials;
    verdict(ok, format!("interior degrees {} (expect 5, 13, 25); brute-force powers {matched}/{trials}", notes.join(", ")))
}

// ---------------------------------------------------------------- 6

struct SimplexWatch {
    flags: ConstraintFlags,
    steps: usize,
    worst_sum: f64,
    min_entry: f64,
    idempotent: bool,
}

impl TrainObserver<f32> for SimplexWatch {
    fn after_step(&mut self, _step: usize, _phase: Phase, model: &Classifier<f32>) -> receptive_graph::Result<()> {
        let s = &model.receptive().unwrap().scheme;
        for v in s.values().chunks(s.omega()) {
            let sum: f64 = v.iter().map(|&x| x as f64).sum();
            self.worst_sum = self.worst_sum.max((sum - 1.0).abs());
            self.min_entry = v.iter().fold(self.min_entry, |m, &x| m.min(x as f64));
        }
        self.idempotent &= s.projected(&self.flags).values() == s.values();
        self.steps += 1;
        Ok(())
    }
}

fn criterion_6() -> Verdict {
    let train_set = common::synthetic_dataset(10, 10, 10, 400, 61);
    let test_set = common::synthetic_dataset(10, 10, 10, 100, 62);
    let g = graph_power(&build_grid_graph(10, 10).unwrap(), 2).unwrap();
    let mut rng = rng_from(6);
    let scheme = init_uniform::<f32>(&g, 13, 6).unwrap();
    let kernel = WeightKernel::glorot(13, 1, 8, &mut rng).unwrap();
    let layer = ReceptiveGraphLayer::new(scheme, kernel, vec![0.0; 8], Activation::Relu).unwrap();
    let dense = dense_stack(800, &[32], 10, &mut rng);
    let mut model = Classifier::new(InputLayer::Receptive(layer), dense, 0.5).unwrap();
    let flags = ConstraintFlags { positive: true, normalized: true, l2_weight: 1e-5 };
    let config = TrainConfig { epochs_main: 5, epochs_finetune: 0, flags, batch_size: 32, seed: 6, ..TrainConfig::default() };
    let mut watch = SimplexWatch { flags, steps: 0, worst_sum: 0.0, min_entry: f64::INFINITY, idempotent: true };
    let report = train(&mut model, &train_set, Some(&test_set), &config, &mut watch).unwrap();

    let mut vec_rng = rng_from(66);
    let mut random_idempotent = true;
    for _ in 0..2000 {
        let omega = vec_rng.random_range(1..=16);
        let mut v: Vec<f32> = (0..omega * 4).map(|_| vec_rng.random_range(-2.0..2.0)).collect();
        receptive_graph::scheme::project_slice(&mut v, omega, &flags);
        let once = v.clone();
        receptive_graph::scheme::project_slice(&mut v, omega, &flags);
        random_idempotent &= once == v;
    }
    let last: &EpochMetrics = report.history.last().unwrap();
    let ok = watch.steps > 0 && watch.worst_sum <= 1e-6 && watch.min_entry >= 0.0 && watch.idempotent && random_idempotent;
    verdict(
        ok,
        format!(
            "{} steps, max |sum-1| {:.1e}, min entry {:.1e}, idempotent on trained S: {}, on 2000 random blocks: {}, final test error {:.3}",
            watch.steps,
            watch.worst_sum,
            watch.min_entry,
            watch.idempotent,
            random_idempotent,
            last.test_error.unwrap()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn mnist_config(data_dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        data_dir: Some(data_dir.display().to_string()),
        train_subset: Some(10_000),
        test_subset: Some(2_000),
        feature_maps: 50,
        hidden: vec![300],
        dropout: 0.5,
        epochs_main: 10,
        epochs_finetune: 5,
        seed: 7,
        ..ExperimentConfig::default()
    }
}

fn criterion_7(data_dir: Option<&Path>) -> Verdict {
    let Some(dir) = data_dir else {
        return Verdict::Fail("RGL_DATA_DIR is not set; MNIST is required and was not found".into());
    };
    let base = mnist_config(dir);
    let sizes = load_idx(&dir.join(&base.train_images), &dir.join(&base.train_labels))
        .and_then(|tr| Ok((tr.len(), load_idx(&dir.join(&base.test_images), &dir.join(&base.test_labels))?.len())));
    match sizes {
        Err(e) => return Verdict::Fail(format!("cannot load MNIST from {}: {e}", dir.display())),
        Ok((tr, te)) if tr < 10_000 || te < 2_000 => {
            return Verdict::Fail(format!("{} holds {tr}/{te} samples; need at least 10000/2000", dir.display()))
        }
        Ok(_) => {}
    }
    let start = Instant::now();
    let runs = [
        ("grid2", ExperimentConfig { graph: GraphKind::GridPower, power: 2, ..base.clone() }),
        ("conv5x5", ExperimentConfig { front_layer: FrontLayer::Conv, conv_kernel: 5, ..base.clone() }),
        (
            "scrambled-covariance",
            ExperimentConfig {
                graph: GraphKind::Covariance,
                density: 0.03,
                scheme_init: SchemeInit::OnehotRandom,
                scramble_seed: Some(77),
                ..base.clone()
            },
        ),
        ("scrambled-dense", ExperimentConfig { front_layer: FrontLayer::Dense, scramble_seed: Some(77), ..base.clone() }),
    ];
    let out = tempfile::tempdir().unwrap();
    let mut errors = Vec::new();
    for (name, cfg) in runs {
        match cmd_train(&cfg, &out.path().join(name)) {
            Ok(s) => errors.push((name, s.final_test_error.unwrap())),
            Err(e) => return Verdict::Fail(format!("{name}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (grid, conv, cov, dense) = (errors[0].1, errors[1].1, errors[2].1, errors[3].1);
    let ok = grid <= conv + 0.015 && cov < dense && secs < 1800.0;
    verdict(
        ok,
        format!(
            "grid2 {:.2}% vs conv {:.2}% (allow +1.5); scrambled covariance {:.2}% vs dense {:.2}%; {:.0}s (limit 1800s)",
            grid * 100.0,
            conv * 100.0,
            cov * 100.0,
            dense * 100.0,
            secs
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8(data_dir: Option<&Path>) -> Verdict {
    if std::env::var("RGL_FULL_REPRO").as_deref() != Ok("1") {
        return Verdict::Skip("optional full-scale run; set RGL_FULL_REPRO=1 and RGL_DATA_DIR to run".into());
    }
    let Some(dir) = data_dir else {
        return Verdict::Fail("RGL_DATA_DIR is not set".into());
    };
    let targets = [(1, 0.0121), (2, 0.0091), (3, 0.0091)];
    let out = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for (k, target) in targets {
        let cfg = ExperimentConfig {
            data_dir: Some(dir.display().to_string()),
            graph: GraphKind::GridPower,
            power: k,
            scheme_init: SchemeInit::OnehotCirculant,
            epochs_main: 100,
            epochs_finetune: 50,
            seed: 8,
            ..ExperimentConfig::default()
        };
        match cmd_train(&cfg, &out.path().join(format!("grid{k}"))) {
            Ok(s) => {
                let err = s.final_test_error.unwrap();
                ok &= (err - target).abs() <= 0.003;
                notes.push(format!("k={k}: {:.2}% (target {:.2}%)", err * 100.0, target * 100.0));
            }
            Err(e) => return Verdict::Fail(format!("k={k}: {e}")),
        }
    }
    verdict(ok, notes.join(", "))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Verdict {
    let mut rng = rng_from(0xC9);
    let trials = 300;
    let mut exact = 0;
    for _ in 0..trials {
        let (rows, cols) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let g = random_graph(rows, cols, rng.random_range(0.02..0.5), &mut rng);
        let (omega, p, q) = (rng.random_range(1..=30), rng.random_range(1..=8), rng.random_range(1..=64));
        let layer = ReceptiveGraphLayer::new(
            SchemeTensor::<f32>::zeros(g.clone(), omega).unwrap(),
            WeightKernel::zeros(omega, p, q).unwrap(),
            vec![0.0; q],
            Activation::Relu,
        )
        .unwrap();
        let count = layer.count_multiplies();
        let l = g.nnz() as u64;
        let (w, p, q) = (omega as u64, p as u64, q as u64);
        if count.baseline == l * p * q && count.receptive == l * w * p * q + l * p * q && count.ratio() == (w + 1) as f64 {
            exact += 1;
        }
    }
    let g = graph_power(&build_grid_graph(28, 28).unwrap(), 2).unwrap();
    let layer = ReceptiveGraphLayer::new(
        SchemeTensor::<f32>::zeros(g, 13).unwrap(),
        WeightKernel::zeros(13, 1, 50).unwrap(),
        vec![0.0; 50],
        Activation::Relu,
    )
    .unwrap();
    let grid_ratio = layer.count_multiplies().ratio();
    verdict(exact == trials && grid_ratio == 14.0, format!("{exact}/{trials} random layers give ratio ω+1; 28x28 grid² ω=13 ratio {grid_ratio}"))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    common::write_idx_splits(&data, 10, 10, 10, 300, 100);
    let cfg = ExperimentConfig {
        data_dir: Some(data.display().to_string()),
        image_height: 10,
        image_width: 10,
        feature_maps: 6,
        hidden: vec![24],
        epochs_main: 2,
        epochs_finetune: 1,
        scheme_init: SchemeInit::Uniform,
        positive: true,
        normalized: true,
        seed: 10,
        ..ExperimentConfig::default()
    };
    let run = |name: &str, cfg: &ExperimentConfig| -> (Vec<u8>, PathBuf) {
        let out = dir.path().join(name);
        cmd_train(cfg, &out).unwrap();
        (std::fs::read(out.join("metrics.csv")).unwrap(), out)
    };
    let (a, out_a) = run("a", &cfg);
    let (b, _) = run("b", &cfg);
    let resolved = ExperimentConfig::load(&out_a.join("resolved_config.toml")).unwrap();
    let (c, _) = run("c", &resolved);
    let rows = String::from_utf8_lossy(&a).lines().count() - 1;
    verdict(
        a == b && a == c && rows == 3,
        format!("identical configs: {}; rerun from resolved config: {}; {rows} epoch rows", a == b, a == c),
    )
}

fn main() {
    // The dataset root is only meant for the MNIST criteria; every other
    // criterion passes its own data directory explicitly.
    let data_dir = std::env::var_os("RGL_DATA_DIR").filter(|v| !v.is_empty()).map(PathBuf::from);
    std::env::remove_var("RGL_DATA_DIR");

    let criteria: Vec<(u32, &str, bool, Box<dyn Fn() -> Verdict>)> = vec![
        (1, "gradient correctness", true, Box::new(criterion_1)),
        (2, "convolution reduction", true, Box::new(criterion_2)),
        (3, "fully-connected reduction", true, Box::new(criterion_3)),
        (4, "capacity inequality", true, Box::new(criterion_4)),
        (5, "graph builders", true, Box::new(criterion_5)),
        (6, "constraint projection", true, Box::new(criterion_6)),
        (7, "desk-scale MNIST learning signal", true, Box::new({
            let d = data_dir.clone();
            move || criterion_7(d.as_deref())
        })),
        (8, "full-scale reproduction (optional)", false, Box::new({
            let d = data_dir.clone();
            move || criterion_8(d.as_deref())
        })),
        (9, "multiply-count ratio", true, Box::new(criterion_9)),
        (10, "reproducibility", true, Box::new(criterion_10)),
    ];
    let mut failed = Vec::new();
    for (id, name, gating, run) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(panic::AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                Verdict::Fail(format!("panicked: {}", msg.unwrap_or_default()))
            });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match result {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                if gating {
                    failed.push(id);
                }
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {id:>2} {tag} [{name}] {detail} ({secs:.1}s)");
    }
    if failed.is_empty() {
        println!("acceptance: all gating criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
