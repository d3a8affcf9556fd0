//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Training criteria take a few minutes.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use patchnet::report::parse_report;
use patchnet_core::analysis::{
    centered_census, converged_probs, generate_synthetic, pixel_feature_counts, training_feature_counts,
    verify_convergence, FeatureCounts, SyntheticSpec,
};
use patchnet_core::imaging::{augment, color_constancy, gamma_correct, zoom, AugmentOp, ZoomAnchor};
use patchnet_core::metrics::{auroc, exact_match, recall, BinaryMask};
use patchnet_core::nn::{grad_check, kaiming_init, subnet_forward};
use patchnet_core::optim::{train, AdamConfig};
use patchnet_core::patchcore::{extract_heatmap, global_forward, heatmap_to_image, mean_probability, Coverage};
use patchnet_core::{Heatmap, Image, PatchConfig, PatchDims, RngState, SubnetParams, Tensor, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_image(rng: &mut RngState, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.below(256) as u8).collect()).unwrap()
}

/// Anchors along one axis, written out independently of the library.
fn anchors(len: usize, patch: usize, stride: usize, coverage: Coverage) -> Vec<usize> {
    let mut out = Vec::new();
    let mut a = 0;
    while a + patch <= len {
        out.push(a);
        a += stride;
    }
    if coverage == Coverage::ClampToEdge && *out.last().unwrap() != len - patch {
        out.push(len - patch);
    }
    out
}

/// `[1, c, ph, pw]` crop with top-left `(top, left)`; zeros outside.
fn crop(image: &Image, top: isize, left: isize, ph: usize, pw: usize) -> Tensor<f32> {
    let c = image.channels();
    let mut data = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                let (sy, sx) = (top + y as isize, left + x as isize);
                if sy >= 0 && sx >= 0 && (sy as usize) < image.height() && (sx as usize) < image.width() {
                    data[(ch * ph + y) * pw + x] = image.get(sy as usize, sx as usize, ch) as f32 / 255.0;
                }
            }
        }
    }
    Tensor::new(vec![1, c, ph, pw], data).unwrap()
}

fn trained(spec: &SyntheticSpec, patch: PatchConfig, lr: f64, epochs: usize, seed: u64) -> SubnetParams<f32> {
    let data = generate_synthetic(spec).unwrap();
    let mut cfg = TrainConfig::new(patch);
    cfg.adam = AdamConfig::with_lr(lr);
    cfg.max_epochs = epochs;
    cfg.patience = epochs;
    cfg.stop_at_full_train_accuracy = false;
    cfg.seed = seed;
    let init = kaiming_init(
        &mut RngState::new(seed),
        PatchDims::new(patch.height, patch.width, 1).unwrap(),
    );
    train(init, &data, &data, &cfg, &mut |_, _| {}).unwrap().last
}

fn criterion_1() -> Outcome {
    let spec = SyntheticSpec::quadrant(64, 64);
    let patch = PatchConfig::square(32, 32);
    let counts = training_feature_counts(&spec, &patch).map_err(|e| e.to_string())?;
    ensure((counts.a, counts.b) == (3, 1), || format!("counts {counts:?}"))?;
    // two images, batch 4: one optimizer step per epoch
    let steps = 300;
    let params = trained(&spec, patch, 1e-4, steps, 1);
    let check = verify_convergence(&params, counts, 0.05).map_err(|e| e.to_string())?;
    let detail = format!(
        "q(zeros)={:.4} (want 1/3 +- 0.05), q(ones)={:.4} (want >= 0.95), {steps} steps",
        check.p0_observed, check.p1_observed
    );
    ensure(
        (check.p0_observed - 1.0 / 3.0).abs() <= 0.05 && check.p1_observed >= 0.95,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn criterion_2() -> Outcome {
    let spec = SyntheticSpec::upper_left(32, 16);
    let patch = PatchConfig::square(5, 5);
    let counts = training_feature_counts(&spec, &patch).map_err(|e| e.to_string())?;
    let predicted = converged_probs(counts).map_err(|e| e.to_string())?;
    let params = trained(&spec, patch, 1e-3, 400, 1);
    let images = generate_synthetic(&spec).unwrap();
    let heat = extract_heatmap(&params, &images[1].image).map_err(|e| e.to_string())?;

    // interior: the centered patch lies inside the square; background: it
    // stays at least one pixel clear of it
    let (mut interior_min, mut background_dev) = (f32::INFINITY, 0.0f64);
    for i in 0..32 {
        for j in 0..32 {
            let v = heat.get(i, j);
            if (2..=13).contains(&i) && (2..=13).contains(&j) {
                interior_min = interior_min.min(v);
            } else if i >= 19 || j >= 19 {
                background_dev = background_dev.max((v as f64 - predicted.p0).abs());
            }
        }
    }
    let census = centered_census(&spec, params.dims).map_err(|e| e.to_string())?;
    let detail = format!(
        "counts a={} b={}, p0={:.4}; interior min {interior_min:.4} (>= 0.9), background max |q-p0| {background_dev:.4} (<= 0.07); heatmap census {} pure / {} touching",
        counts.a, counts.b, predicted.p0, census.pure_feature, census.any_feature
    );
    ensure(interior_min >= 0.9 && background_dev <= 0.07, || detail.clone())?;
    Ok(detail)
}

fn criterion_3() -> Outcome {
    let mut rng = RngState::new(3);
    let params: SubnetParams<f64> = kaiming_init(&mut rng, PatchDims::new(6, 6, 3).unwrap());
    let r = grad_check(&params, &mut rng, 200).map_err(|e| e.to_string())?;
    let detail = format!(
        "max relative error {:.3e} over {} probes ({} redrawn)",
        r.max_relative_error, r.probes, r.resampled
    );
    ensure(r.probes == 200 && r.max_relative_error < 1e-4, || detail.clone())?;
    Ok(detail)
}

fn criterion_4() -> Outcome {
    let mut rng = RngState::new(4);
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let c = if rng.below(2) == 0 { 1 } else { 3 };
        let (ph, pw) = (2 + rng.below(4), 2 + rng.below(4));
        let (h, w) = (ph + rng.below(14), pw + rng.below(14));
        let (sy, sx) = (1 + rng.below(ph), 1 + rng.below(pw));
        let coverage = if rng.below(2) == 0 {
            Coverage::ClampToEdge
        } else {
            Coverage::DropRemainder
        };
        let cfg = PatchConfig {
            height: ph,
            width: pw,
            stride_y: sy,
            stride_x: sx,
            coverage,
        };
        let params: SubnetParams<f32> = kaiming_init(&mut rng, PatchDims::new(ph, pw, c).unwrap());
        let image = random_image(&mut rng, h, w, c);
        let pred = global_forward(&params, &image, &cfg).map_err(|e| e.to_string())?;

        let mut probs = Vec::new();
        for &top in &anchors(h, ph, sy, coverage) {
            for &left in &anchors(w, pw, sx, coverage) {
                let q = subnet_forward(&params, &crop(&image, top as isize, left as isize, ph, pw)).unwrap();
                probs.push(q.data()[0] as f64);
            }
        }
        let mean = probs.iter().sum::<f64>() / probs.len() as f64;
        worst = worst.max((pred.p_global as f64 - mean).abs());
        ensure(probs.len() == pred.patch_probs.len(), || {
            format!("draw {draw}: patch count")
        })?;

        let mut shuffled = pred.patch_probs.data().to_vec();
        rng.shuffle(&mut shuffled);
        ensure(mean_probability(&shuffled).to_bits() == pred.p_global.to_bits(), || {
            format!("draw {draw}: permuted patches change p_global")
        })?;
    }
    ensure(worst <= 1e-6, || format!("max |p_global - mean| = {worst:e}"))?;
    Ok(format!(
        "100 draws, max |p_global - mean q| = {worst:.2e}, permutation bit-identical"
    ))
}

fn criterion_5() -> Outcome {
    let mut rng = RngState::new(5);
    let mut checked = 0;
    for img in 0..10 {
        let c = if img % 2 == 0 { 1 } else { 3 };
        let (ph, pw) = (1 + rng.below(7), 1 + rng.below(7));
        let params: SubnetParams<f32> = kaiming_init(&mut rng, PatchDims::new(ph, pw, c).unwrap());
        let (h, w) = (4 + rng.below(20), 4 + rng.below(20));
        let image = random_image(&mut rng, h, w, c);
        let heat = extract_heatmap(&params, &image).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let (i, j) = (rng.below(h), rng.below(w));
            let top = i as isize - ((ph - 1) / 2) as isize;
            let left = j as isize - ((pw - 1) / 2) as isize;
            let q = subnet_forward(&params, &crop(&image, top, left, ph, pw))
                .unwrap()
                .data()[0];
            ensure(heat.get(i, j).to_bits() == q.to_bits(), || {
                format!(
                    "image {img} ({h}x{w}x{c}, patch {ph}x{pw}) pixel ({i},{j}): {} vs {q}",
                    heat.get(i, j)
                )
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} pixels bit-identical"))
}

fn criterion_6() -> Outcome {
    let mut rng = RngState::new(6);
    let mut with_auroc = 0;
    for pair in 0..200 {
        let (h, w) = (1 + rng.below(32), 1 + rng.below(32));
        let n = h * w;
        let levels = [4, 16, 1 << 20][rng.below(3)];
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels + 1) as f64 / levels as f64).collect();
        let density = rng.uniform();
        let bits: Vec<bool> = (0..n).map(|_| rng.uniform() < density).collect();
        let heat = Heatmap::new(Tensor::new(vec![h, w], scores.clone()).unwrap()).unwrap();
        let mask = BinaryMask::new(h, w, bits.clone()).unwrap();

        let agree = scores.iter().zip(&bits).filter(|(s, b)| (**s >= 0.5) == **b).count();
        ensure(exact_match(&heat, &mask).unwrap() == agree as f64 / n as f64, || {
            format!("pair {pair}: exact match")
        })?;

        let pos: Vec<f64> = scores.iter().zip(&bits).filter(|(_, b)| **b).map(|(s, _)| *s).collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(&bits)
            .filter(|(_, b)| !**b)
            .map(|(s, _)| *s)
            .collect();
        if !pos.is_empty() {
            let hit = pos.iter().filter(|&&s| s >= 0.5).count();
            ensure(recall(&heat, &mask).unwrap() == hit as f64 / pos.len() as f64, || {
                format!("pair {pair}: recall")
            })?;
        } else {
            ensure(recall(&heat, &mask).is_err(), || {
                format!("pair {pair}: recall without positives")
            })?;
        }
        if !pos.is_empty() && !neg.is_empty() {
            let mut twice = 0u64;
            for p in &pos {
                for q in &neg {
                    twice += if p > q {
                        2
                    } else if p == q {
                        1
                    } else {
                        0
                    };
                }
            }
            let oracle = twice as f64 / (2 * pos.len() * neg.len()) as f64;
            let got = auroc(&heat, &mask).unwrap();
            ensure(got == oracle, || {
                format!("pair {pair}: auroc {got} vs pairwise {oracle}")
            })?;

            let own =
                Heatmap::new(Tensor::new(vec![h, w], bits.iter().map(|&b| b as u8 as f64).collect()).unwrap()).unwrap();
            ensure(auroc(&own, &mask).unwrap() == 1.0, || {
                format!("pair {pair}: self auroc")
            })?;
            with_auroc += 1;
        } else {
            ensure(auroc(&heat, &mask).is_err(), || {
                format!("pair {pair}: single-class auroc")
            })?;
        }
    }
    Ok(format!(
        "200 pairs ({with_auroc} with both classes) match the oracles exactly"
    ))
}

fn criterion_7() -> Outcome {
    let probs = |a, b| converged_probs(FeatureCounts::new(a, b).unwrap()).unwrap();
    let exact = |a: u64, b: u64| if a > b { (a - b) as f64 / (2 * a) as f64 } else { 0.0 };
    let table = [(3, 1), (12288, 4096), (2, 5), (4, 4), (1, 100), (5, 3), (1_000_000, 1)];
    for (a, b) in table {
        let p = probs(a, b);
        ensure(
            (p.p0 - exact(a, b)).abs() <= 1e-12 && (p.p1 - 1.0).abs() <= 1e-12,
            || format!("converge({a},{b}) = ({}, {})", p.p0, p.p1),
        )?;
    }
    ensure((probs(3, 1).p0 - 1.0 / 3.0).abs() <= 1e-12, || "3,1".into())?;
    ensure((probs(12288, 4096).p0 - 1.0 / 3.0).abs() <= 1e-12, || {
        "12288,4096".into()
    })?;
    let counts = pixel_feature_counts(&SyntheticSpec::upper_left(128, 64)).unwrap();
    ensure((counts.a, counts.b) == (12288, 4096), || {
        format!("pixel counts {counts:?}")
    })?;
    ensure(converged_probs(FeatureCounts::new(3, 0).unwrap()).is_err(), || {
        "b = 0 accepted".into()
    })?;
    let mut prev = 0.0;
    for k in 1..=12 {
        let a = 10u64.pow(k);
        let p0 = probs(a, 1).p0;
        ensure(
            p0 > prev && p0 < 0.5 && (0.5 - p0 - 0.5 / a as f64).abs() <= 1e-12,
            || format!("limit a={a}: {p0}"),
        )?;
        prev = p0;
    }
    Ok(format!(
        "(3,1) and (12288,4096) -> (1/3, 1); a <= b -> (0, 1); b/a -> 0 gives p0 -> 1/2 (last {prev:.12})"
    ))
}

fn criterion_8() -> Outcome {
    let mut rng = RngState::new(8);
    for k in 0..50 {
        let (h, w) = (1 + rng.below(20), 1 + rng.below(20));
        let gray = random_image(&mut rng, h, w, 1);
        let rgb = random_image(&mut rng, h, w, 3);
        for img in [&gray, &rgb] {
            ensure(gamma_correct(img, 1.0).unwrap() == *img, || {
                format!("case {k}: gamma 1")
            })?;
            for op in [AugmentOp::Rotate180, AugmentOp::HFlip, AugmentOp::VFlip] {
                let twice = augment(&augment(img, op).unwrap(), op).unwrap();
                ensure(twice == *img, || format!("case {k}: {op:?} twice"))?;
            }
            let scale = 1.0 + 0.2 * rng.uniform();
            let z = zoom(img, scale, ZoomAnchor::Random, Some(&mut rng)).unwrap();
            ensure((z.height(), z.width(), z.channels()) == (h, w, img.channels()), || {
                format!("case {k}: zoom dims")
            })?;
        }
        let ends = Image::new(1, 2, 1, vec![0, 255]).unwrap();
        let g = 0.3 + 4.0 * rng.uniform();
        ensure(gamma_correct(&ends, g).unwrap() == ends, || {
            format!("case {k}: gamma {g} fixed points")
        })?;
        let achromatic = Image::new(h, w, 3, gray.data().iter().flat_map(|&v| [v, v, v]).collect()).unwrap();
        let p = 1.0 + 7.0 * rng.uniform();
        ensure(color_constancy(&achromatic, p).unwrap() == achromatic, || {
            format!("case {k}: constancy p={p}")
        })?;
    }
    Ok("50 random cases: gamma 1 identity, fixed points, involutions, achromatic constancy, zoom dims".into())
}

fn patchnet(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_patchnet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!(
            "patchnet {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&o.stderr)
        ))
    }
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let data = root.join("data");
    patchnet(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--size",
        "16",
        "--square",
        "8",
        "--copies",
        "2",
    ])?;
    let run = |name: &str, seed: &str| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = root.join(name);
        patchnet(&[
            "--deterministic",
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--patch-size",
            "4",
            "--stride",
            "4",
            "--max-epochs",
            "5",
            "--no-accuracy-stop",
            "--seed",
            seed,
        ])?;
        let read = |f: &str| std::fs::read(out.join(f)).map_err(|e| e.to_string());
        Ok((read("best.pnet")?, read("final.pnet")?))
    };
    let a = run("a", "11")?;
    let b = run("b", "11")?;
    let c = run("c", "12")?;
    ensure(a == b, || "same seed, different checkpoint bytes".into())?;
    ensure(a.1 != c.1, || "different seeds gave identical checkpoints".into())?;
    Ok(format!(
        "best and final checkpoints byte-identical ({} bytes)",
        a.1.len()
    ))
}

fn criterion_10() -> Outcome {
    let toy = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/toy");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = dir.path().join("run");
    patchnet(&[
        "train",
        "--data",
        toy.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--patch-size",
        "7",
        "--stride",
        "4",
        "--max-epochs",
        "15",
        "--lr",
        "1e-3",
        "--seed",
        "3",
    ])?;
    let model = run.join("best.pnet");
    let heat = dir.path().join("heat.png");
    let image = toy.join("test/1/b00.png");
    patchnet(&[
        "heatmap",
        "--model",
        model.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        heat.to_str().unwrap(),
    ])?;
    let rendered = patchnet::image_io::load_image(&heat).map_err(|e| e.to_string())?;
    ensure(
        (rendered.height(), rendered.width(), rendered.channels()) == (24, 24, 1),
        || "heatmap dims".into(),
    )?;

    let report_path = dir.path().join("eval.txt");
    patchnet(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        toy.to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
    ])?;
    let report = parse_report(&std::fs::read_to_string(&report_path).map_err(|e| e.to_string())?);
    let mut stats = Vec::new();
    for key in ["average_exact_match", "average_recall", "average_auroc"] {
        let v: f64 = report
            .get(key)
            .ok_or(format!("{key} missing"))?
            .parse()
            .map_err(|_| format!("{key} not a number"))?;
        ensure((0.0..=1.0).contains(&v), || format!("{key} = {v}"))?;
        stats.push(format!("{key}={v:.3}"));
    }
    for col in ["exact_match", "recall", "auroc"] {
        for v in report.column(col).ok_or(format!("column {col}"))? {
            if v != "none" {
                let v: f64 = v.parse().map_err(|_| format!("{col} value {v}"))?;
                ensure((0.0..=1.0).contains(&v), || format!("{col} = {v}"))?;
            }
        }
    }
    ensure(report.rows.len() == 4, || format!("{} rows", report.rows.len()))?;
    // the rendering ties back to the stored model
    let params = patchnet::checkpoint::load_checkpoint(&model).map_err(|e| e.to_string())?;
    let src = patchnet::image_io::load_image(&image).map_err(|e| e.to_string())?;
    let expect = heatmap_to_image(&extract_heatmap(&params, &src).unwrap()).unwrap();
    ensure(expect == rendered, || {
        "rendered heatmap differs from library output".into()
    })?;
    Ok(format!(
        "train -> heatmap -> eval on 20 toy images; {}",
        stats.join(" ")
    ))
}

fn main() {
    // `cargo test` passes filter and harness flags; `--list` must print nothing
    // that looks like a test.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 10] = [
        ("convergence to the closed form (64x64 quadrant)", criterion_1),
        ("reduced square experiment heatmap", criterion_2),
        ("gradient check", criterion_3),
        ("aggregation invariants", criterion_4),
        ("heatmap / forward consistency", criterion_5),
        ("metric oracles", criterion_6),
        ("closed-form table", criterion_7),
        ("preprocessing invariants", criterion_8),
        ("deterministic training", criterion_9),
        ("toy end-to-end smoke run", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:2} PASS [{secs:6.1}s] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:2} FAIL [{secs:6.1}s] {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
