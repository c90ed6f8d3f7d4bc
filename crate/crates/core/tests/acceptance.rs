//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! `cargo test --test acceptance -- 4 9` runs only criteria 4 and 9.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use common::suites;
use secpnet::blocks::{Initializer, SecFuse, SecInputs};
use secpnet::cli::overlay::{overlay_render, OverlaySpec, RgbImage, GT_ONLY_COLOR, PRED_ONLY_COLOR, TP_COLOR, gray};
use secpnet::data::{generate_phantom, split_folds, write_dataset, Sample};
use secpnet::networks::{build_variant, predict_mask, Network, NetworkConfig, VariantId};
use secpnet::training::{
    decode_checkpoint, encode_checkpoint, lr_at_epoch, save_checkpoint, staged_train_with, train_stage, Stage,
    StageEvent, StagePlan, TrainConfig,
};
use secpnet::{Graph, Mask, ParamStore, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
    warning: Option<String>,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into(), warning: None }
    }
}

fn check(failures: &mut Vec<String>, cond: bool, what: impl FnOnce() -> String) {
    if !cond {
        failures.push(what());
    }
}

fn verdict(failures: Vec<String>, ok: String) -> Outcome {
    if failures.is_empty() {
        Outcome::new(true, ok)
    } else {
        Outcome::new(false, failures.join("; "))
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for r in suites::op_gradients(20) {
        worst = worst.max(r.max_err);
        check(&mut failures, r.max_err < 1e-4, || format!("op {} rel err {:.2e}", r.name, r.max_err));
    }
    let (mut checked, mut skipped) = (0, 0);
    for v in VariantId::ALL {
        for seed in 0..20 {
            let r = suites::variant_gradient(v, seed, 2);
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            skipped += r.skipped;
            check(&mut failures, r.max_rel_error < 1e-4, || format!("{v} seed {seed} rel err {:.2e}", r.max_rel_error));
        }
    }
    check(&mut failures, skipped * 10 <= checked, || format!("{skipped} of {checked} elements skipped at kinks"));
    let secs = t.elapsed().as_secs_f64();
    check(&mut failures, secs < 60.0, || format!("took {secs:.1} s"));
    verdict(
        failures,
        format!(
            "{} ops and 6 variants × 20 instances, worst rel err {worst:.2e} (tol < 1e-4), \
             {skipped}/{checked} kink elements skipped, {secs:.1} s (limit 60 s)",
            suites::op_names().len()
        ),
    )
}

fn oracle_suite() -> Outcome {
    let t = Instant::now();
    let results = [
        suites::conv2d(100, 1),
        suites::max_pool(100, 2),
        suites::upsample(100, 3),
        suites::softmax_ce(100, 4),
        suites::overlap_metrics(100, 5),
        suites::argmax(100, 6),
    ];
    let secs = t.elapsed().as_secs_f64();
    let mut failures = Vec::new();
    for r in &results {
        check(&mut failures, r.max_err <= 1e-6, || format!("{} err {:.2e}", r.name, r.max_err));
    }
    check(&mut failures, secs < 30.0, || format!("took {secs:.1} s"));
    let worst = results.iter().map(|r| r.max_err).fold(0.0, f64::max);
    verdict(failures, format!("6 suites × 100 cases, worst err {worst:.2e} (tol 1e-6), {secs:.2} s (limit 30 s)"))
}

fn shape_suite() -> Outcome {
    let mut failures = Vec::new();
    let cfg = NetworkConfig::default();
    let net = build_variant::<f32>(VariantId::SECPNet, cfg, 0).unwrap();
    let image = Tensor::from_fn([1, 1, 64, 64], |i| ((i * 37) % 101) as f32 / 100.0);
    let (primary, last) = net.infer(&image).unwrap();
    check(&mut failures, primary.shape() == [1, 14, 64, 64], || format!("primary {:?}", primary.shape()));
    check(&mut failures, last.shape() == [1, 14, 64, 64], || format!("final {:?}", last.shape()));

    let mut worst = 0.0f64;
    for logits in [primary, last] {
        let mut g = Graph::<f32>::new();
        let x = g.input(logits);
        let p = g.softmax_channels(x).unwrap();
        let p = g.value(p);
        for i in 0..64 * 64 {
            let s: f64 = (0..14).map(|c| p.data()[c * 4096 + i] as f64).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    check(&mut failures, worst <= 1e-6, || format!("softmax sum off by {worst:.2e}"));
    check(&mut failures, net.secondary_in_channels() == Some(15), || {
        format!("secondary input {:?}", net.secondary_in_channels())
    });

    for s in 0..cfg.depth {
        let (c1, c2) = (cfg.width_at(s), cfg.width_at(s + 1));
        let mut store = ParamStore::<f32>::new();
        let fuse = SecFuse::new(&mut store, &Initializer::new(1), "sec", c1, c2, cfg.se_ratio).unwrap();
        let mut g = Graph::<f32>::new();
        let params = store.bind(&mut g);
        let level1 = g.input(Tensor::full([1, c1, 4, 4], 0.5));
        let level2 = g.input(Tensor::full([1, c2, 2, 2], 0.25));
        let out = fuse.forward(&mut g, &params, SecInputs { level1, level2 }).unwrap();
        check(&mut failures, g.shape(out) == [1, c1, 4, 4], || format!("stage {s} fuse {:?}", g.shape(out)));
        check(&mut failures, net.primary.secs[s].out_channels() == c1, || format!("stage {s} SEC channels"));
    }
    verdict(
        failures,
        format!("logits 1×14×64×64, softmax sum within {worst:.1e} (tol 1e-6), 15 secondary channels, SEC widths match"),
    )
}

/// Background, other organs, and the eye/lens group.
fn three_classes(s: &Sample) -> Sample {
    s.relabel(|l| match l {
        0 => 0,
        1 | 2 | 5 | 6 => 2,
        _ => 1,
    })
}

fn overfit(trained: &mut Option<(Network<f32>, Vec<Sample>)>) -> Outcome {
    let data: Vec<Sample> = generate_phantom(7, 4, 2, 64).unwrap().iter().map(three_classes).collect();
    let cfg = NetworkConfig { base_width: 8, num_classes: 3, ..Default::default() };
    let mut net = build_variant::<f32>(VariantId::BaselineSEC, cfg, 0).unwrap();
    let tc = TrainConfig { lr0: 0.05, dr: 0.0, epochs: 200, batch_size: 2, seed: 0, momentum: 0.9 };
    let t = Instant::now();
    let log = train_stage(&mut net, &data, &tc, Stage::PretrainBackbone).unwrap();
    let secs = t.elapsed().as_secs_f64();

    // scored after training, with the oracles from the test helpers
    let (mut dice_sum, mut ce_sum) = (0.0, 0.0);
    let mut preds = Vec::new();
    for s in &data {
        let x = s.image.clone().reshape([1, 1, s.height(), s.width()]).unwrap();
        let (_, logits) = net.infer(&x).unwrap();
        let logits = Tensor::from_fn(logits.shape().to_vec(), |i| logits.data()[i] as f64);
        ce_sum += common::cross_entropy(&logits, &s.mask);
        preds.push(Mask::from_slice(s.height(), s.width(), common::argmax(&logits)).unwrap());
    }
    let pred = Mask::stack(&preds).unwrap();
    let gt = Mask::stack(data.iter().map(|s| &s.mask)).unwrap();
    for c in 1..3u8 {
        dice_sum += common::dice(&pred, &gt, c).unwrap_or(0.0);
    }
    let mean_dice = dice_sum / 2.0;
    let ce = ce_sum / data.len() as f64;
    let logged = log.final_loss().unwrap_or(f64::NAN);
    let mut failures = Vec::new();
    check(&mut failures, mean_dice >= 0.95, || format!("mean foreground Dice {mean_dice:.4}"));
    check(&mut failures, ce < 0.05, || format!("cross-entropy {ce:.4}"));
    check(&mut failures, secs < 300.0, || format!("took {secs:.0} s"));
    *trained = Some((net, data));
    verdict(
        failures,
        format!(
            "8 slices, 3 classes, 64×64, BaselineSEC bw8, 200 epochs: mean Dice {mean_dice:.4} (≥ 0.95), \
             CE {ce:.5} (< 0.05, last epoch {logged:.5}), {secs:.0} s (target < 300 s)"
        ),
    )
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn snapshot(params: &ParamStore<f32>, prefix: &str) -> BTreeMap<String, Vec<u32>> {
    params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| (p.name.clone(), bits(&p.tensor))).collect()
}

fn staged_contract() -> Outcome {
    let data = generate_phantom(4, 2, 2, 16).unwrap();
    let cfg = NetworkConfig { in_channels: 1, num_classes: 14, base_width: 4, depth: 2, se_ratio: 2 };
    let tc = TrainConfig { lr0: 0.05, dr: 0.1, epochs: 2, batch_size: 2, seed: 3, momentum: 0.9 };
    let plan = StagePlan::for_variant(VariantId::SECPNet, 2);
    let mut failures = Vec::new();
    let mut stage1: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    let mut stage3: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    let (mut inherited, mut frozen) = (0, 0);
    let outcome = staged_train_with(VariantId::SECPNet, cfg, &data, &plan, &tc, |e| match e {
        StageEvent::Started { stage: Stage::AddSECAndTune, params } => {
            for (name, want) in &stage1 {
                match params.by_name(name) {
                    Some(p) if bits(&p.tensor) == *want => inherited += 1,
                    _ => failures.push(format!("{name} not inherited from stage 1")),
                }
            }
        }
        StageEvent::Started { stage: Stage::TrainSecondaryFrozenPrimary, params } => stage3 = snapshot(params, "primary."),
        StageEvent::Finished { stage: Stage::PretrainBackbone, params, .. } => stage1 = snapshot(params, ""),
        StageEvent::Finished { stage: Stage::TrainSecondaryFrozenPrimary, params, .. } => {
            for (name, after) in snapshot(params, "primary.") {
                if stage3.get(&name) == Some(&after) {
                    frozen += 1;
                } else {
                    failures.push(format!("{name} changed during stage 3"));
                }
            }
        }
        _ => {}
    })
    .unwrap();
    check(&mut failures, inherited > 0 && inherited == stage1.len(), || "no stage-1 parameters inherited".into());
    check(&mut failures, frozen > 0 && frozen == stage3.len(), || "primary parameter count changed in stage 3".into());
    check(&mut failures, outcome.stages.len() == 4, || format!("{} checkpoints", outcome.stages.len()));
    for (i, s) in outcome.stages.iter().enumerate() {
        match decode_checkpoint(&s.checkpoint) {
            Ok(net) => check(&mut failures, encode_checkpoint(&net) == s.checkpoint, || format!("checkpoint {} differs", i + 1)),
            Err(e) => failures.push(format!("checkpoint {}: {e}", i + 1)),
        }
    }
    verdict(
        failures,
        format!("{inherited} tensors inherited bitwise, {frozen} primary tensors frozen, 4 checkpoints round-trip bitwise"),
    )
}

fn schedule() -> Outcome {
    let mut failures = Vec::new();
    let cfg = TrainConfig::default();
    let at10 = lr_at_epoch(&TrainConfig { dr: 0.1, ..cfg.clone() }, 10);
    check(&mut failures, lr_at_epoch(&cfg, 0) == 0.01, || format!("lr(0) = {}", lr_at_epoch(&cfg, 0)));
    check(&mut failures, (at10 - 0.005).abs() < 1e-15, || format!("lr(10) = {at10}"));
    let flat = TrainConfig { dr: 0.0, ..cfg.clone() };
    check(&mut failures, (0..1000).all(|e| lr_at_epoch(&flat, e) == flat.lr0), || "dr = 0 is not constant".into());

    let data = generate_phantom(1, 2, 2, 16).unwrap();
    let net_cfg = NetworkConfig { in_channels: 1, num_classes: 14, base_width: 4, depth: 2, se_ratio: 2 };
    let tc = TrainConfig { epochs: 6, batch_size: 2, dr: 0.1, ..cfg };
    let mut net = build_variant::<f32>(VariantId::Baseline, net_cfg, 0).unwrap();
    let log = train_stage(&mut net, &data, &tc, Stage::PretrainBackbone).unwrap();
    for (line, r) in log.to_csv().lines().skip(1).zip(&log.records) {
        let logged: f64 = line.split(',').nth(1).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
        check(&mut failures, logged == lr_at_epoch(&tc, r.epoch), || format!("epoch {} logged lr {logged}", r.epoch));
    }
    check(&mut failures, log.records.len() == 6, || format!("{} log rows", log.records.len()));
    verdict(failures, format!("lr(0) = 0.01, lr(10; dr 0.1) = {at10}, constant at dr 0, 6 logged rates exact"))
}

fn fold_partition() -> Outcome {
    let ids: Vec<String> = (0..356).map(|i| format!("P{i:04}")).collect();
    let split = split_folds(&ids, 5, 0).unwrap();
    let mut failures = Vec::new();
    let mut sizes = split.sizes();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    check(&mut failures, sizes == [72, 71, 71, 71, 71], || format!("sizes {sizes:?}"));
    let mut seen = BTreeMap::new();
    for f in 0..5 {
        for p in split.members(f) {
            if let Some(prev) = seen.insert(p.to_owned(), f) {
                failures.push(format!("{p} in folds {prev} and {f}"));
            }
        }
    }
    check(&mut failures, seen.len() == 356, || format!("{} patients covered", seen.len()));

    // patient-atomic: slices of one patient never straddle train and test
    let samples: Vec<Sample> = generate_phantom(0, 10, 3, 16).unwrap();
    let ten: Vec<String> = samples.iter().map(|s| s.patient_id.clone()).collect();
    let split10 = split_folds(&ten, 5, 0).unwrap();
    for f in 0..5 {
        let (train, test) = split10.partition(&samples, f).unwrap();
        check(&mut failures, train.len() + test.len() == samples.len(), || "partition lost slices".into());
        check(&mut failures, test.iter().all(|t| train.iter().all(|s| s.patient_id != t.patient_id)), || {
            format!("fold {f} splits a patient")
        });
    }
    verdict(failures, format!("356 ids → {sizes:?}, disjoint, exhaustive, patient-atomic"))
}

fn cli(args: &[&str]) -> i32 {
    secpnet::cli::run(std::iter::once("secpnet").chain(args.iter().copied()))
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_owned();
    let config = r#"{
      "network": { "in_channels": 1, "num_classes": 14, "base_width": 4, "depth": 2, "se_ratio": 2 },
      "train": { "lr0": 0.02, "dr": 0.0, "epochs": 10, "batch_size": 2, "seed": 0, "momentum": 0.9 }
    }"#;
    std::fs::write(p("config.json"), config).unwrap();
    let t = Instant::now();
    let mut failures = Vec::new();
    check(&mut failures, cli(&["gen-data", "--patients", "20", "--slices", "2", "--size", "32", "--out", &p("data")]) == 0, || {
        "gen-data failed".into()
    });
    let code = cli(&["ablate", "--data", &p("data"), "--folds", "5", "--config", &p("config.json"), "--out", &p("ablation")]);
    let secs = t.elapsed().as_secs_f64();
    if code != 0 {
        return Outcome::new(false, format!("ablate exited with {code}"));
    }
    let out = dir.path().join("ablation");
    for v in VariantId::ALL {
        let r = read_json(&out.join(format!("report_{v:?}.json")));
        check(&mut failures, r["folds"] == 5, || format!("{v}: {} folds", r["folds"]));
        check(&mut failures, r["organs"].as_array().map(Vec::len) == Some(13), || format!("{v}: organ rows"));
    }
    for table in ["ablation_dice.csv", "ablation_jac.csv"] {
        let csv = std::fs::read_to_string(out.join(table)).unwrap();
        let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
        check(&mut failures, rows.len() == 15, || format!("{table}: {} lines", rows.len()));
        check(&mut failures, rows.iter().all(|r| r.len() == 7), || format!("{table}: ragged columns"));
        check(&mut failures, rows.last().map(|r| r[0]) == Some("Ave"), || format!("{table}: no Ave row"));
        let want: Vec<&str> = std::iter::once("organ").chain(VariantId::ALL.iter().map(|v| v.label())).collect();
        check(&mut failures, rows.first() == Some(&want), || format!("{table}: header {:?}", rows.first()));
    }
    let training = read_json(&out.join("training_dice.json"));
    let dice_of = |label: &str| {
        training["variants"].as_array().into_iter().flatten().find(|v| v["variant"] == label).and_then(|v| v["train_dice_mean"].as_f64())
    };
    let (secp, base) = (dice_of("SECP-Net").unwrap_or(f64::NAN), dice_of("Baseline").unwrap_or(f64::NAN));
    let mut outcome = verdict(
        failures,
        format!(
            "6 variants × 5 folds, 13 organs + Ave in Dice/Jaccard tables, {secs:.0} s; \
             training Dice SECP-Net {secp:.2} vs Baseline {base:.2}"
        ),
    );
    if !(secp >= base) {
        outcome.warning = Some(format!("SECP-Net training Dice {secp:.2} below Baseline {base:.2} on the phantom set"));
    }
    outcome
}

fn colour_rules_hold(rgb: &RgbImage, image: &Tensor<f32>, pred: &Mask, gt: &Mask, organ: u8) -> Result<(), String> {
    let w = rgb.width;
    for (i, ((&v, &p), &t)) in image.data().iter().zip(pred.labels()).zip(gt.labels()).enumerate() {
        let want = match (p == organ, t == organ) {
            (true, true) => TP_COLOR,
            (true, false) => PRED_ONLY_COLOR,
            (false, true) => GT_ONLY_COLOR,
            (false, false) => [gray(v); 3],
        };
        let got = rgb.pixel(i / w, i % w);
        if got != want {
            return Err(format!("organ {organ} pixel ({}, {}) is {got:?}, want {want:?}", i / w, i % w));
        }
    }
    Ok(())
}

fn overlay(trained: Option<(Network<f32>, Vec<Sample>)>) -> Outcome {
    let (net, data) = match trained {
        Some(t) => t,
        None => {
            let data: Vec<Sample> = generate_phantom(7, 1, 1, 64).unwrap().iter().map(three_classes).collect();
            let cfg = NetworkConfig { base_width: 8, num_classes: 3, ..Default::default() };
            (build_variant::<f32>(VariantId::BaselineSEC, cfg, 0).unwrap(), data)
        }
    };
    let mut failures = Vec::new();
    let sample = &data[0];
    let x = sample.image.clone().reshape([1, 1, sample.height(), sample.width()]).unwrap();
    let mut pred = predict_mask(&net, &x).unwrap();
    // a few flipped pixels so every colour occurs even for a perfect fit
    let mut labels = pred.labels().to_vec();
    for i in (0..labels.len()).step_by(97) {
        labels[i] = (labels[i] + 1) % 3;
    }
    pred = Mask::from_slice(sample.height(), sample.width(), labels).unwrap();
    let (mut pixels, mut colours) = (0, [0usize; 3]);
    for organ in 1..3u8 {
        let spec = OverlaySpec { organ: Some(organ) };
        let rgb = overlay_render(&sample.image, &pred, &sample.mask, &spec).unwrap();
        if let Err(e) = colour_rules_hold(&rgb, &sample.image, &pred, &sample.mask, organ) {
            failures.push(e);
        }
        for y in 0..rgb.height {
            for x in 0..rgb.width {
                let c = rgb.pixel(y, x);
                for (k, want) in [TP_COLOR, PRED_ONLY_COLOR, GT_ONLY_COLOR].iter().enumerate() {
                    colours[k] += usize::from(c == *want);
                }
                pixels += 1;
            }
        }
        let again = overlay_render(&sample.image, &pred, &sample.mask, &spec).unwrap();
        check(&mut failures, again.to_ppm() == rgb.to_ppm(), || format!("organ {organ}: PPM bytes differ between renders"));
    }
    check(&mut failures, colours.iter().all(|&c| c > 0), || format!("colour counts {colours:?}"));

    // through the command line, from a checkpoint and a dataset on disk
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("net.ckpt");
    save_checkpoint(&net, &ckpt).unwrap();
    write_dataset(dir.path().join("data"), &data[..1]).unwrap();
    let image = dir.path().join("data/images").read_dir().unwrap().next().unwrap().unwrap().path();
    let mut outputs = Vec::new();
    for name in ["a.ppm", "b.ppm"] {
        let out = dir.path().join(name);
        let code = cli(&["overlay", "--checkpoint", ckpt.to_str().unwrap(), "--sample", image.to_str().unwrap(), "--organ", "2", "--out", out.to_str().unwrap()]);
        check(&mut failures, code == 0, || format!("overlay exited with {code}"));
        outputs.push(std::fs::read(&out).unwrap_or_default());
    }
    let direct = overlay_render(&sample.image, &predict_mask(&net, &x).unwrap(), &sample.mask, &OverlaySpec { organ: Some(2) })
        .unwrap()
        .to_ppm();
    check(&mut failures, outputs[0] == outputs[1], || "CLI PPM bytes differ between runs".into());
    check(&mut failures, outputs[0] == direct, || "CLI PPM differs from the library render".into());
    verdict(
        failures,
        format!(
            "{pixels} pixels obey the TP/pred-only/GT-only/gray rules ({colours:?} coloured), PPM bytes identical across renders"
        ),
    )
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let mut trained = None;
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(n) {
            let t = Instant::now();
            let o = f();
            let status = if o.pass { "PASS" } else { "FAIL" };
            println!("[{status}] {n} {name}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
            if let Some(w) = &o.warning {
                println!("[WARN] {n} {name}: {w}");
            }
            results.push((n, name, o));
        }
    };
    run(1, "gradient suite", &mut gradient_suite);
    run(2, "oracle suite", &mut oracle_suite);
    run(3, "shapes and normalization", &mut shape_suite);
    run(4, "overfit", &mut || overfit(&mut trained));
    run(5, "staged-training contract", &mut staged_contract);
    run(6, "learning-rate schedule", &mut schedule);
    run(7, "fold partition", &mut fold_partition);
    run(8, "ablation harness", &mut ablation);
    run(9, "overlay", &mut || overlay(trained.take()));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
