//! Acceptance suite: one PASS/FAIL line per criterion, then a non-zero exit
//! if any criterion failed.

use std::time::{Duration, Instant};

use vig_unet::blocks::{Ffn, ForwardCtx, Grapher};
use vig_unet::checkpoint::Checkpoint;
use vig_unet::gradcheck::{self, check_inputs, project};
use vig_unet::graph::{knn_graph, knn_graph_between, mr_aggregate, KnnGraph, NodeFeatures};
use vig_unet::tensor::{BnMode, ConvGeometry, ParamStore, Tape, Var};
use vig_unet::training::metrics::{dice, iou};
use vig_unet::training::{
    bce_loss, dice_loss, evaluate, mixed_loss, mixed_loss_on, train_epoch, LrSchedule, Normalization, SegSample,
};
use vig_unet::{Mode, ModelConfig, RngState, Tensor, VigUnet};
use vig_unet_cli::commands::{checkpoint_with_norm, cmd_info, fit_normalization, train_state};
use vig_unet_cli::dataset::{generate_synthetic, load_dataset};
use vig_unet_cli::RunConfig;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(start: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t <= budget, || format!("{what} took {t:.1?}, budget {budget:?}"))
}

/// Forward a 512x512 input through the full network in eval mode and compare
/// every recorded shape with the expected output-size column.
fn shape_conformance() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::full(512).with_reductions([4, 2, 1, 1, 1]);
    let dims = [32, 64, 128, 256, 512];
    let sizes = [256, 128, 64, 32, 16];
    let mut expected: Vec<(String, [usize; 3])> = vec![("stem".into(), [32, 256, 256])];
    for i in 0..4 {
        expected.push((format!("enc.{i}.grapher"), [dims[i], sizes[i], sizes[i]]));
        expected.push((format!("enc.{i}.ffn"), [dims[i], sizes[i], sizes[i]]));
        expected.push((format!("enc.{i}.down"), [dims[i + 1], sizes[i + 1], sizes[i + 1]]));
    }
    for j in 0..2 {
        expected.push((format!("bottleneck.{j}"), [512, 16, 16]));
    }
    for j in 0..4 {
        let l = 3 - j;
        for part in ["up", "grapher", "ffn"] {
            expected.push((format!("dec.{j}.{part}"), [dims[l], sizes[l], sizes[l]]));
        }
    }
    expected.push(("final".into(), [1, 512, 512]));

    let mut model = VigUnet::<f32>::new(cfg, &mut RngState::new(0)).map_err(err)?;
    let mut rng = RngState::new(1);
    let x = Tensor::from_fn(vec![1, 3, 512, 512], |_| rng.uniform() as f32);
    let (y, trace) = model.forward_traced(&x, Mode::Eval, &mut RngState::new(0)).map_err(err)?;
    ensure(trace.shapes.len() == expected.len(), || {
        format!("{} traced modules, expected {}", trace.shapes.len(), expected.len())
    })?;
    for ((name, got), (want_name, want)) in trace.shapes.iter().zip(&expected) {
        ensure(name == want_name && got[0] == 1 && got[1..] == want[..], || {
            format!("{name} {got:?}, expected {want_name} [1, {}, {}, {}]", want[0], want[1], want[2])
        })?;
    }
    ensure(y.shape() == [1, 1, 512, 512], || format!("output {:?}", y.shape()))?;
    within(start, Duration::from_secs(600), "forward")?;
    Ok(format!("{} shapes match, {:.1?}", expected.len(), start.elapsed()))
}

fn random(shape: Vec<usize>, rng: &mut RngState, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

fn sample_graphs(x: &Tensor<f64>, k: usize) -> Vec<KnnGraph> {
    let (b, c, h, w) = x.dims4().unwrap();
    (0..b)
        .map(|i| {
            let f = NodeFeatures::from_feature_map(&x.data()[i * c * h * w..(i + 1) * c * h * w], c, h, w).unwrap();
            knn_graph(&f, k).unwrap()
        })
        .collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = RngState::new(1);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> vig_unet::Result<Var>| {
        check_inputs(&inputs, build).map(|e| worst.push((name, e)))
    };
    let x = random(vec![2, 4, 4, 4], &mut rng, -1.0, 1.0);
    for (stride, pad, groups, k) in [(1, 1, 1, 3), (2, 1, 1, 3), (1, 0, 2, 1)] {
        let w = random(vec![4, 4 / groups, k, k], &mut rng, -0.5, 0.5);
        let b = random(vec![4], &mut rng, -0.5, 0.5);
        let geom = ConvGeometry::new(stride, pad).grouped(groups);
        run("conv2d", vec![x.clone(), w, b], &|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), geom)?;
            project(t, y, 2)
        })
        .map_err(err)?;
    }
    let gamma = random(vec![4], &mut rng, 0.5, 1.5);
    let beta = random(vec![4], &mut rng, -0.5, 0.5);
    run("batch_norm", vec![x.clone(), gamma, beta], &|t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], BnMode::Batch, 1e-5)?;
        project(t, y, 3)
    })
    .map_err(err)?;
    let p = random(vec![4, 4, 4], &mut rng, -1.0, 1.0);
    run("gelu", vec![x.clone()], &|t, v| {
        let y = t.gelu(v[0]);
        project(t, y, 4)
    })
    .map_err(err)?;
    run("add", vec![x.clone(), x.clone()], &|t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 5)
    })
    .map_err(err)?;
    run("add_broadcast", vec![x.clone(), p], &|t, v| {
        let y = t.add_broadcast(v[0], v[1])?;
        project(t, y, 6)
    })
    .map_err(err)?;
    run("droppath", vec![x.clone()], &|t, v| {
        let y = t.droppath(v[0], 0.4, Mode::Train, &mut RngState::new(9))?;
        project(t, y, 7)
    })
    .map_err(err)?;
    run("upsample_bilinear", vec![x.clone()], &|t, v| {
        let y = t.upsample_bilinear(v[0], 2)?;
        project(t, y, 8)
    })
    .map_err(err)?;
    run("avg_pool", vec![x.clone()], &|t, v| {
        let y = t.avg_pool(v[0], 2)?;
        project(t, y, 9)
    })
    .map_err(err)?;
    let graphs = sample_graphs(&x, 5);
    run("max_relative", vec![x.clone()], &|t, v| {
        let y = t.max_relative(v[0], v[0], &graphs)?;
        project(t, y, 10)
    })
    .map_err(err)?;
    let z = random(vec![2, 1, 4, 4], &mut rng, -3.0, 3.0);
    let target = Tensor::from_fn(vec![2, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    run("bce", vec![z.clone()], &|t, v| t.bce_with_logits(v[0], &target)).map_err(err)?;
    run("dice", vec![z.clone()], &|t, v| t.dice_loss(v[0], &target, 1.0)).map_err(err)?;
    run("mixed_loss", vec![z], &|t, v| Ok(mixed_loss_on(t, v[0], &target)?.0)).map_err(err)?;
    let (prim_name, prim) = worst.iter().fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });
    ensure(prim < 1e-4, || format!("{prim_name}: relative error {prim:e}"))?;

    let mut cfg = ModelConfig::full(32);
    for (s, d) in cfg.stages.iter_mut().zip([4, 8, 16, 32, 64]) {
        s.dim = d;
        s.heads = 1;
    }
    let mut model = VigUnet::<f64>::new(cfg, &mut RngState::new(10)).map_err(err)?;
    let x = random(vec![4, 3, 32, 32], &mut rng, 0.0, 1.0);
    let y = Tensor::from_fn(vec![4, 1, 32, 32], |i| ((i / 32) % 7 < 3) as u8 as f64);
    let e2e = gradcheck::model_gradient_error(&mut model, &x, &y, 2, 12).map_err(err)?;
    ensure(e2e < 1e-3, || format!("end-to-end relative error {e2e:e}"))?;
    within(start, Duration::from_secs(300), "gradient suite")?;
    Ok(format!(
        "{} primitive checks max {prim:.1e} ({prim_name}), end-to-end {e2e:.1e}, {:.1?}",
        worst.len(),
        start.elapsed()
    ))
}

fn dist(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
    }
    s
}

/// Sorted candidate indices by `(distance, index)`.
fn ranked(q: &[f32], cands: &[Vec<f32>], skip: Option<usize>) -> Vec<u32> {
    let mut all: Vec<(f32, usize)> = cands
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(j, c)| (dist(q, c), j))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().map(|(_, j)| j as u32).collect()
}

fn graph_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = RngState::new(77);
    for case in 0..200 {
        let (n, d, k) = (1 + rng.below(64), 1 + rng.below(8), 1 + rng.below(12));
        let quantized = case % 4 == 0;
        let m = 1 + rng.below(16);
        let mut draw = |count: usize| -> Vec<Vec<f32>> {
            (0..count)
                .map(|_| {
                    (0..d)
                        .map(|_| if quantized { rng.below(3) as f32 } else { rng.uniform_range(-2.0, 2.0) as f32 })
                        .collect()
                })
                .collect()
        };
        let rows = draw(n);
        let cands = draw(m);
        let feats = |r: &[Vec<f32>]| NodeFeatures::from_rows(r.len(), d, r.concat()).unwrap();
        let g = knn_graph(&feats(&rows), k).map_err(err)?;
        let mut expected_agg = Vec::new();
        for i in 0..n {
            let mut want = vec![i as u32];
            want.extend(ranked(&rows[i], &rows, Some(i)).into_iter().take(k.min(n) - 1));
            ensure(g.row(i) == want.as_slice(), || format!("case {case} node {i}: {:?} vs {want:?}", g.row(i)))?;
            expected_agg.extend_from_slice(&rows[i]);
            for c in 0..d {
                let best = want.iter().map(|&j| rows[j as usize][c] - rows[i][c]).fold(f32::NEG_INFINITY, f32::max);
                expected_agg.push(best);
            }
        }
        let agg = mr_aggregate(&feats(&rows), &g).map_err(err)?;
        ensure(agg.data() == expected_agg.as_slice(), || format!("case {case}: aggregate differs"))?;
        let gb = knn_graph_between(&feats(&rows), &feats(&cands), k).map_err(err)?;
        for i in 0..n {
            let want: Vec<u32> = ranked(&rows[i], &cands, None).into_iter().take(k.min(m)).collect();
            ensure(gb.row(i) == want.as_slice(), || format!("case {case} reduced node {i}"))?;
        }
    }
    within(start, Duration::from_secs(60), "graph oracle")?;
    Ok(format!("200 instances exact, {:.1?}", start.elapsed()))
}

fn residual_degeneracy() -> Outcome {
    let mut rng = RngState::new(3);
    for trial in 0..20 {
        let mut store = ParamStore::<f32>::new();
        let g = Grapher::new(&mut store, "g", 16, 1 + rng.below(9), 4, 1, 0.0, &mut rng).map_err(err)?;
        let f = Ffn::new(&mut store, "f", 16, 4, 0.0, &mut rng).map_err(err)?;
        for id in [g.fc_out.conv.weight, g.fc_out.conv.bias, f.fc2.conv.weight, f.fc2.conv.bias] {
            let zeros = Tensor::zeros(store.get(id).shape().to_vec());
            store.set_values(id, zeros).map_err(err)?;
        }
        let side = 2 + rng.below(6);
        let x = Tensor::from_fn(vec![1 + rng.below(3), 16, side, side], |_| rng.uniform_range(-5.0, 5.0) as f32);
        for mode in [Mode::Train, Mode::Eval] {
            for which in ["grapher", "ffn"] {
                let mut tape = Tape::new();
                let v = tape.constant(x.clone());
                let mut r = RngState::new(trial);
                let mut ctx = ForwardCtx {
                    tape: &mut tape,
                    store: &mut store,
                    mode,
                    rng: &mut r,
                    graphs: None,
                };
                let y = if which == "grapher" { g.forward(&mut ctx, v) } else { f.forward(&mut ctx, v) }.map_err(err)?;
                ensure(tape.value(y) == &x, || format!("trial {trial}: {which} in {mode:?} changed its input"))?;
            }
        }
    }
    Ok("20 random inputs, grapher and ffn, train and eval: exact".into())
}

fn metric_identity() -> Outcome {
    let mut rng = RngState::new(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = 1 + rng.below(256);
        let (pa, pb) = (rng.uniform() * rng.uniform(), rng.uniform());
        let a: Vec<u8> = (0..n).map(|_| rng.bernoulli(pa) as u8).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.bernoulli(pb) as u8).collect();
        let j = iou(&a, &b).map_err(err)?;
        worst = worst.max((dice(&a, &b).map_err(err)? - 2.0 * j / (1.0 + j)).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 pairs, max deviation {worst:.1e}"))
}

fn loss_recomposition() -> Outcome {
    let mut rng = RngState::new(12);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = 1 + rng.below(500);
        let scale = rng.uniform_range(0.1, 20.0);
        let z = Tensor::from_fn(vec![1, 1, n], |_| rng.uniform_range(-scale, scale) as f32);
        let y = Tensor::from_fn(vec![1, 1, n], |_| rng.bernoulli(0.3) as u8 as f32);
        let total = mixed_loss(&z, &y).map_err(err)? as f64;
        let parts = 0.5 * bce_loss(&z, &y).map_err(err)? as f64 + dice_loss(&z, &y).map_err(err)? as f64;
        worst = worst.max((total - parts).abs() / parts.abs().max(1.0));
    }
    // f32 evaluation: a few ulps of the sum
    ensure(worst < 1e-6, || format!("max relative deviation {worst:e}"))?;
    Ok(format!("200 random cases, max relative deviation {worst:.1e}"))
}

fn scheduler_endpoints() -> Outcome {
    let s = LrSchedule::with_defaults(200).map_err(err)?;
    let (a, b, mid) = (s.lr(0).map_err(err)?, s.lr(200).map_err(err)?, s.lr(100).map_err(err)?);
    ensure(a == 1e-4, || format!("lr(0) = {a:e}"))?;
    ensure(b == 1e-5, || format!("lr(T) = {b:e}"))?;
    ensure((mid - 5.5e-5).abs() < 1e-15, || format!("lr(T/2) = {mid:e}"))?;
    Ok(format!("lr(0) = {a:e}, lr(T) = {b:e}, lr(T/2) = {mid:e}"))
}

struct OverfitRun {
    losses: Vec<f64>,
    train_iou: f64,
    model: VigUnet,
    norm: Normalization,
    elapsed: Duration,
}

const OVERFIT_EPOCHS: usize = 250;

fn overfit_run(samples: &[SegSample]) -> Result<OverfitRun, String> {
    let start = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.epochs = OVERFIT_EPOCHS;
    cfg.lr_max = 1e-3;
    cfg.lr_min = 1e-4;
    cfg.seed = 2024;
    let norm = fit_normalization(&cfg, samples).map_err(err)?;
    let mut init = RngState::new(cfg.seed);
    let mut model = VigUnet::<f32>::new(cfg.model.clone(), &mut init).map_err(err)?;
    let mut state = train_state(&cfg, &model, norm.clone(), init.fork()).map_err(err)?;
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        losses.extend(train_epoch(&mut model, samples, &mut state, epoch).map_err(err)?.batch_losses);
    }
    let rep = evaluate(&mut model, samples, &norm, cfg.batch_size).map_err(err)?;
    Ok(OverfitRun {
        losses,
        train_iou: rep.mean_iou,
        model,
        norm,
        elapsed: start.elapsed(),
    })
}

fn overfit(run: &OverfitRun) -> Outcome {
    ensure(run.losses.len() == 500, || format!("{} optimization steps", run.losses.len()))?;
    ensure(run.train_iou >= 0.90, || format!("training-set mean IoU {:.4}", run.train_iou))?;
    ensure(run.elapsed <= Duration::from_secs(900), || format!("took {:.1?}", run.elapsed))?;
    Ok(format!(
        "500 steps, training-set mean IoU {:.4}, loss {:.3} -> {:.3}, {:.1?}",
        run.train_iou,
        run.losses[0],
        run.losses[run.losses.len() - 1],
        run.elapsed
    ))
}

fn checkpoint_roundtrip(run: &OverfitRun) -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    checkpoint_with_norm(&run.model, &run.norm).save(&a).map_err(err)?;
    Checkpoint::load(&a).map_err(err)?.save(&b).map_err(err)?;
    let (x, y) = (std::fs::read(&a).map_err(err)?, std::fs::read(&b).map_err(err)?);
    ensure(x == y, || "files differ".into())?;
    // and through a rebuilt model
    let c = dir.path().join("c.ckpt");
    let restored = Checkpoint::load(&a).map_err(err)?.to_model::<f32>().map_err(err)?;
    checkpoint_with_norm(&restored, &run.norm).save(&c).map_err(err)?;
    ensure(std::fs::read(&c).map_err(err)? == x, || "rebuilt model writes different bytes".into())?;
    Ok(format!("{} bytes identical after save -> load -> save", x.len()))
}

fn determinism(first: &OverfitRun, second: &OverfitRun) -> Outcome {
    ensure(first.losses == second.losses, || {
        let i = first.losses.iter().zip(&second.losses).position(|(a, b)| a != b).unwrap_or(0);
        format!("loss sequences diverge at step {i}")
    })?;
    Ok(format!("{} losses bit-identical across two runs", first.losses.len()))
}

fn parameter_report() -> Outcome {
    let text = cmd_info(&ModelConfig::full(512)).map_err(err)?;
    let total = text
        .lines()
        .find(|l| l.starts_with("total learnable parameters"))
        .ok_or("no total line")?;
    ensure(text.contains("0.7G"), || "note about the 0.7G figure missing".into())?;
    Ok(total.to_string())
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => {
            failed += 1;
            println!("FAIL  {name}: {detail}");
        }
    };
    report("shape conformance (512x512, full config)", shape_conformance());
    report("gradient suite", gradient_suite());
    report("graph oracle", graph_oracle());
    report("residual degeneracy", residual_degeneracy());
    report("metric identity", metric_identity());
    report("loss recomposition", loss_recomposition());
    report("scheduler endpoints", scheduler_endpoints());

    let data = tempfile::tempdir().expect("temp dir");
    let samples = generate_synthetic(data.path(), 8, 64, 7)
        .and_then(|_| load_dataset(data.path(), 3, 64, 64))
        .map_err(err);
    let runs = samples.and_then(|s| Ok((overfit_run(&s)?, overfit_run(&s)?)));
    match &runs {
        Ok((first, second)) => {
            report("overfit smoke test", overfit(first));
            report("checkpoint roundtrip", checkpoint_roundtrip(first));
            report("determinism", determinism(first, second));
        }
        Err(e) => {
            for name in ["overfit smoke test", "checkpoint roundtrip", "determinism"] {
                report(name, Err(format!("training failed: {e}")));
            }
        }
    }
    report("parameter report", parameter_report());

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
