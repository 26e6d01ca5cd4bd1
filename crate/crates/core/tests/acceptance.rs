//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use adaptformer::checkpoint::{Checkpoint, Subset};
use adaptformer::config::{RunConfig, SweepAxis};
use adaptformer::experiment::{
    backbone_checkpoint, backbone_digest, census, datasets, delta_checkpoint, desk, finetune, load_backbone, load_tuned, prepare,
    pretrain, sweep,
};
use adaptformer::gradcheck::check_params;
use adaptformer::harness::{evaluate, train_step, RunReport, Sgd, CSV_HEADER};
use adaptformer::rng::{Rng, Stream};
use adaptformer::tuning::adapter_param_count;
use adaptformer::{AdapterConfig, Graph, Insertion, PromptConfig, Result, TuningMode, VitConfig, VitModel};
use common::{random_images, randomize, refs};

const CENSUS: [(usize, usize); 3] = [(1, 161_466), (16, 438_126), (64, 1_323_438)];
const GRAD_TOL: f64 = 1e-4;
const TRANSFER_MARGIN_OVER_LINEAR: f64 = 10.0;
const TRANSFER_SLACK_UNDER_FULL: f64 = 5.0;
const STABILITY_RANGE: f64 = 3.0;
const FRAMES: [usize; 4] = [1, 2, 4, 8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e <= limit, format!("{:.2}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

/// Everything the later criteria reuse.
struct Shared {
    backbone: VitModel,
    linear: RunReport,
    adaptformer: (VitModel, RunReport),
    pretrain_secs: f64,
}

fn adapter_mode(a: AdapterConfig) -> TuningMode {
    TuningMode::AdaptFormer(a)
}

fn c1_param_counts() -> Result<Outcome> {
    let vit = VitConfig::vit_base(174);
    let t = Instant::now();
    let mut ok = true;
    for (mid, want) in CENSUS {
        let mode = adapter_mode(AdapterConfig { mid_dim: mid, ..Default::default() });
        ok &= census(&vit, &mode).tunable == want && adapter_param_count(768, mid, 12, Some(174)) == want;
    }
    let (fast, time) = within(t, Duration::from_secs(1));

    let t = Instant::now();
    let live = VitModel::new(vit, 0)?;
    let mut parts = Vec::new();
    for (mid, want) in CENSUS {
        let mode = adapter_mode(AdapterConfig { mid_dim: mid, ..Default::default() });
        let enumerated = live.clone().with_tuning(mode, 0)?.tunable_param_count();
        ok &= enumerated == want;
        parts.push(format!("d̂={mid}: {enumerated}"));
    }
    outcome(
        ok && fast,
        format!("{} (census {time}; instantiated models agree, {:.1}s untimed)", parts.join(", "), t.elapsed().as_secs_f64()),
    )
}

fn c2_init_identity() -> Result<Outcome> {
    let t = Instant::now();
    let mut base = VitModel::new(desk::vit(), 11)?;
    let d = base.config().embed_dim;
    base.set_running_stats((0..d).map(|j| 0.05 * j as f64).collect(), (0..d).map(|j| 0.5 + 0.02 * j as f64).collect())?;
    let tuned = base.clone().with_tuning(adapter_mode(desk::adapter()), 11)?;
    let images = random_images(&base, 100, 12);
    let mut equal = 0;
    for chunk in images.chunks(25) {
        let a = base.predict(&refs(chunk))?;
        let b = tuned.predict(&refs(chunk))?;
        let c = a.shape()[1];
        equal += a.data().chunks(c).zip(b.data().chunks(c)).filter(|(x, y)| x.iter().zip(*y).all(|(p, q)| p.to_bits() == q.to_bits())).count();
    }
    let (fast, time) = within(t, Duration::from_secs(5));
    outcome(equal == 100 && fast, format!("{equal}/100 inputs bit-identical ({time})"))
}

fn c3_gradients() -> Result<Outcome> {
    let t = Instant::now();
    let vit = VitConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        ..VitConfig::default()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for insertion in [Insertion::Parallel, Insertion::Sequential] {
        let mode = adapter_mode(AdapterConfig { mid_dim: 2, insertion, ..Default::default() });
        let mut m = VitModel::new(vit.clone(), 21)?.with_tuning(mode, 21)?;
        randomize(&mut m, "adapter.up", 0.5, 22);
        let images = random_images(&m, 4, 23);
        let report = check_params(&m, &refs(&images), &[0, 1, 2, 1], |n| n.contains(".adapter."), 1e-5)?;
        checked += report.entries.len();
        worst = worst.max(report.max_rel_err());
    }
    let (fast, time) = within(t, Duration::from_secs(30));
    outcome(worst <= GRAD_TOL && fast, format!("{checked} scalars, max rel err {worst:.2e} ({time})"))
}

fn c4_frozen(shared: &Shared) -> Result<Outcome> {
    let t = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    let modes = [adapter_mode(desk::adapter()), TuningMode::Linear, TuningMode::Prompt(PromptConfig::default())];
    for mode in modes {
        let cfg = desk::transfer(mode.clone());
        let mut m = prepare(&shared.backbone, &cfg)?;
        let (train, _) = datasets(&cfg)?;
        let before = backbone_digest(&m);
        let tunable_before = Checkpoint::from_model(&m, Subset::Delta).digest();
        let mut sgd = Sgd::new(cfg.train.momentum, cfg.train.weight_decay);
        let mut order = Rng::stream(0, Stream::Shuffle);
        let mut drop = Rng::stream(0, Stream::Dropout);
        let lr = cfg.train.effective_lr();
        let mut idx: Vec<usize> = (0..train.len()).collect();
        for step in 0..100 {
            if step % (train.len() / cfg.train.batch_size) == 0 {
                order.shuffle(&mut idx);
            }
            let b = step % (train.len() / cfg.train.batch_size);
            let (images, labels) = train.batch(&idx[b * cfg.train.batch_size..(b + 1) * cfg.train.batch_size]);
            train_step(&mut m, &mut sgd, &images, &labels, lr, &mut drop)?;
        }
        let same = backbone_digest(&m) == before;
        let moved = Checkpoint::from_model(&m, Subset::Delta).digest() != tunable_before;
        ok &= same && moved;
        parts.push(format!("{} {}", mode.name(), if same { "unchanged" } else { "CHANGED" }));
    }
    let (fast, time) = within(t, Duration::from_secs(60));
    outcome(ok && fast, format!("{} ({time})", parts.join(", ")))
}

fn c5_transfer(shared: &Shared, full: &RunReport, t_runs: f64) -> Result<Outcome> {
    let (lin, af, ft) = (shared.linear.final_top1(), shared.adaptformer.1.final_top1(), full.final_top1());
    let total = shared.pretrain_secs + t_runs;
    let ok = af >= lin + TRANSFER_MARGIN_OVER_LINEAR && af >= ft - TRANSFER_SLACK_UNDER_FULL && total <= 300.0;
    outcome(ok, format!("adaptformer {af:.1}, linear {lin:.1}, full {ft:.1} ({total:.1}s of 300s incl. pre-training)"))
}

fn c6_scale(shared: &Shared) -> Result<Outcome> {
    let run = |scale: f64, lr: Option<f64>| -> Result<RunReport> {
        let mut cfg = desk::transfer(adapter_mode(AdapterConfig { scale, ..desk::adapter() }));
        if let Some(lr) = lr {
            cfg.train.base_lr = lr;
        }
        Ok(finetune(&shared.backbone, &cfg)?.1)
    };
    let s01 = shared.adaptformer.1.final_top1();
    let s001 = run(0.01, None)?.final_top1();
    let linear_lr = desk::base_lr(&TuningMode::Linear);
    let zero = run(0.0, Some(linear_lr))?;
    let same_curve = zero.rows.iter().zip(&shared.linear.rows).all(|(a, b)| a.eval_top1 == b.eval_top1 && a.train_loss == b.train_loss);
    let exact = zero.final_top1() == shared.linear.final_top1();
    outcome(
        s01 >= s001 && exact && same_curve,
        format!(
            "s=0.1 {s01:.1} vs s=0.01 {s001:.1}; s=0 {:.2} vs linear {:.2} ({})",
            zero.final_top1(),
            shared.linear.final_top1(),
            if same_curve { "identical curves" } else { "curves differ" }
        ),
    )
}

fn c7_insertion(shared: &Shared) -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut ok = true;
    let images = random_images(&shared.backbone, 8, 31);
    let base = shared.backbone.predict(&refs(&images))?;
    for insertion in [Insertion::Parallel, Insertion::Sequential] {
        let mode = adapter_mode(AdapterConfig { insertion, ..desk::adapter() });
        let fresh = shared.backbone.clone().with_tuning(mode.clone(), 0)?;
        let identity = fresh.predict(&refs(&images))?.bit_eq(&base);
        let report = match insertion {
            Insertion::Parallel => shared.adaptformer.1.clone(),
            Insertion::Sequential => finetune(&shared.backbone, &desk::transfer(mode))?.1,
        };
        let complete = report.rows.len() == desk::transfer(TuningMode::Linear).train.epochs;
        ok &= identity && complete;
        parts.push(format!("{insertion} {:.1} (init identity {identity})", report.final_top1()));
    }
    outcome(ok, parts.join(", "))
}

fn c8_checkpoints(shared: &Shared, dir: &Path) -> Result<Outcome> {
    let (tuned, _) = &shared.adaptformer;
    let cfg = desk::transfer(adapter_mode(desk::adapter()));
    let (_, eval) = datasets(&cfg)?;
    let images: Vec<&[f64]> = eval.images.iter().map(Vec::as_slice).collect();
    let want = tuned.predict(&images)?;

    let full_path = dir.join("tuned.ckpt");
    Checkpoint::from_model(tuned, Subset::All).save(&full_path)?;
    let mut fresh = VitModel::new(tuned.config().clone(), 99)?.with_tuning(tuned.tuning().clone(), 99)?;
    Checkpoint::load(&full_path)?.load_into(&mut fresh, Subset::All)?;
    let round_trip = fresh.predict(&images)?.bit_eq(&want);

    let backbone_path = dir.join("backbone.ckpt");
    backbone_checkpoint(&shared.backbone, &desk::pretrain()).save(&backbone_path)?;
    let delta_path = dir.join("delta.ckpt");
    let delta_bytes = delta_checkpoint(tuned, &cfg, &backbone_path).save(&delta_path)?;
    let (composed, _) = load_tuned(&delta_path)?;
    let composition = composed.predict(&images)?.bit_eq(&want);
    let reloaded = load_backbone(&backbone_path)?.0.predict(&images[..4])?.bit_eq(&shared.backbone.predict(&images[..4])?);
    outcome(
        round_trip && composition && reloaded,
        format!(
            "round trip {round_trip}, backbone+delta {composition}, backbone reload {reloaded} on {} eval samples (delta {}, {} scalars)",
            images.len(),
            &delta_bytes[..12],
            Checkpoint::load(&delta_path)?.numel()
        ),
    )
}

fn csv_complete(path: &Path, epochs: usize) -> Result<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| adaptformer::Error::Io { path: path.into(), source: e })?;
    let mut lines = text.lines();
    let header_ok = lines.next().is_some_and(|h| h.ends_with(CSV_HEADER));
    let rows: Vec<&str> = lines.collect();
    let numbers_ok = rows.iter().all(|r| r.split(',').all(|f| f.parse::<f64>().is_ok_and(f64::is_finite)));
    Ok(header_ok && numbers_ok && rows.len() == epochs)
}

fn c9_stability(shared: &Shared, dir: &Path) -> Result<Outcome> {
    let mut ok = true;
    let mut parts = Vec::new();
    let vpt = desk::transfer(TuningMode::Prompt(PromptConfig::default()));
    let epochs = vpt.train.epochs;
    let tokens: Vec<String> = [1, 2, 4, 8, 16, 32].iter().map(ToString::to_string).collect();
    let points = sweep(&shared.backbone, &vpt, SweepAxis::PromptTokens, &tokens, |p| {
        let _ = p.report.write_csv(&dir.join(format!("prompt_tokens_{}.csv", p.value)));
    })?;
    for p in &points {
        ok &= csv_complete(&dir.join(format!("prompt_tokens_{}.csv", p.value)), epochs)?;
    }
    parts.push(format!(
        "vpt tokens {{1..32}} final {}",
        points.iter().map(|p| format!("{:.0}", p.report.final_top1())).collect::<Vec<_>>().join("/")
    ));
    let af = desk::transfer(adapter_mode(desk::adapter()));
    let mids: Vec<String> = [1, 16, 64].iter().map(ToString::to_string).collect();
    let points = sweep(&shared.backbone, &af, SweepAxis::MidDim, &mids, |p| {
        let _ = p.report.write_csv(&dir.join(format!("mid_dim_{}.csv", p.value)));
    })?;
    for p in &points {
        let range = p.report.tail_range(10);
        ok &= csv_complete(&dir.join(format!("mid_dim_{}.csv", p.value)), epochs)? && range <= STABILITY_RANGE;
        parts.push(format!("d̂={} final {:.1} tail-10 range {range:.2}", p.value, p.report.final_top1()));
    }
    outcome(ok, parts.join(", "))
}

fn c10_frames(shared: &Shared) -> Result<Outcome> {
    let mut ok = true;
    let mut parts = Vec::new();
    for frames in FRAMES {
        let mut cfg: RunConfig = desk::transfer(adapter_mode(desk::adapter()));
        cfg.vit.num_frames = frames;
        cfg.train.epochs = 2;
        cfg.train_samples = 64;
        cfg.eval_samples = 32;
        let model = prepare(&shared.backbone, &cfg)?;
        let n = model.config().patches_per_frame();
        let (train, eval) = datasets(&cfg)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let batch: Vec<&[f64]> = train.images[..2].iter().map(Vec::as_slice).collect();
        let tokens = model.patch_embed(&mut g, &bound, &batch)?;
        let rows = g.shape(tokens)[0] / 2;
        let mut m = model.clone();
        let report = adaptformer::harness::train(&mut m, &train, &eval, &cfg.train)?;
        let shape_ok = rows == frames * n + 1 && model.config().num_tokens() == rows;
        ok &= shape_ok && report.rows.len() == 2 && evaluate(&m, &eval, 16)?.is_finite();
        parts.push(format!("{frames}→{rows}"));
    }
    outcome(ok, format!("tokens per sample {} (N={}), all trained", parts.join(", "), desk::vit().patches_per_frame()))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, &str, Result<Outcome>)> = Vec::new();
    let report = |n: usize, name: &str, r: &Result<Outcome>| match r {
        Ok(o) => println!("{} criterion {n} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
        Err(e) => println!("FAIL criterion {n} ({name}): error: {e}"),
    };
    for (n, name, f) in [
        (1, "parameter counts", c1_param_counts as fn() -> Result<Outcome>),
        (2, "init identity", c2_init_identity),
        (3, "gradient check", c3_gradients),
    ] {
        let r = f();
        report(n, name, &r);
        results.push((n, name, r));
    }

    let shared = (|| -> Result<(Shared, RunReport, f64)> {
        let t = Instant::now();
        let (backbone, _) = pretrain(&desk::pretrain())?;
        let pretrain_secs = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let linear = finetune(&backbone, &desk::transfer(TuningMode::Linear))?.1;
        let adaptformer = finetune(&backbone, &desk::transfer(adapter_mode(desk::adapter())))?;
        let full = finetune(&backbone, &desk::transfer(TuningMode::Full))?.1;
        let runs = t.elapsed().as_secs_f64();
        Ok((Shared { backbone, linear, adaptformer, pretrain_secs }, full, runs))
    })();
    match shared {
        Ok((shared, full, runs)) => {
            let later: Vec<(usize, &str, Box<dyn Fn() -> Result<Outcome>>)> = vec![
                (4, "frozen immutability", Box::new(|| c4_frozen(&shared))),
                (5, "transfer ordering", Box::new(|| c5_transfer(&shared, &full, runs))),
                (6, "scale direction", Box::new(|| c6_scale(&shared))),
                (7, "sequential vs parallel", Box::new(|| c7_insertion(&shared))),
                (8, "checkpoint round trip", Box::new(|| c8_checkpoints(&shared, dir.path()))),
                (9, "stability monitoring", Box::new(|| c9_stability(&shared, dir.path()))),
                (10, "token scaling", Box::new(|| c10_frames(&shared))),
            ];
            for (n, name, f) in later {
                let r = f();
                report(n, name, &r);
                results.push((n, name, r));
            }
        }
        Err(e) => {
            for (n, name) in [(4, "frozen immutability"), (5, "transfer ordering"), (6, "scale direction"), (7, "sequential vs parallel"),
                (8, "checkpoint round trip"), (9, "stability monitoring"), (10, "token scaling")]
            {
                println!("FAIL criterion {n} ({name}): shared runs failed: {e}");
                results.push((n, name, Err(adaptformer::Error::Contract(e.to_string()))));
            }
        }
    }
    let passed = results.iter().filter(|(_, _, r)| r.as_ref().is_ok_and(|o| o.pass)).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
