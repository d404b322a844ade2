//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p gelvec --test acceptance`. Exits non-zero when any
//! criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use gelvec::features::{segment_spot, spot_density, vectorize_whole, Representation, SpotRegion};
use gelvec::imagecore::{GelImage, PixelCoord};
use gelvec::registration::{
    normalize, refs_in_roi_frame, resample, roi_origin, solve_affine, AffineMap, InterpKind,
    ReferencePair, RoiSpec,
};
use gelvec::study::{
    detect_references, parse_manifest, run_featurize, run_normalize, run_pipeline, run_refs,
    run_synth, DetectionConfig, FeatureMatrix, StudyManifest, StudyReport,
};
use gelvec::svm::{cross_validate, label_of, train_smo, Dataset, SvmParams};
use gelvec::synthgel::{
    jitter_spots, render_gel, sample_seed, stain_response, CohortSpec, JitterSpec, SpotSpec,
    StainModel,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;
type Suite = fn() -> Result<(), String>;
type Criterion = fn() -> Outcome;

const COHORT_SEED: u64 = 0;
const ROI: usize = 128;
/// Canonical-frame seeds: the three disease-shifted spots plus one stable spot.
const SPOT_NAMES: [&str; 4] = ["CA-1", "CA-2", "CA-4", "BD-2"];

fn manifest(dir: &Path, mode: &str, seeds: &[PixelCoord], seed: u64) -> StudyManifest {
    let seeds: Vec<[usize; 2]> = seeds.iter().map(|&p| p.into()).collect();
    let json = serde_json::json!({
        "study": "acceptance",
        "synth": "default",
        "output_dir": "out",
        "roi": {"width": ROI, "height": ROI},
        "interp": "bilinear",
        "representation": {"mode": mode, "seeds": seeds},
        "svm": {"c": 1.0, "kernel": "linear"},
        "cv": {"k": 5},
        "seed": seed,
    });
    let mut m = parse_manifest(json.to_string().as_bytes()).expect("acceptance manifest");
    m.base_dir = dir.to_path_buf();
    m
}

fn chosen_seeds() -> Vec<PixelCoord> {
    let spec = CohortSpec::default_study(COHORT_SEED);
    SPOT_NAMES
        .iter()
        .map(|n| {
            let c = spec.spot(n).expect("named spot").center;
            PixelCoord::round_from(c.0, c.1)
        })
        .collect()
}

fn check_default_cohort(spec: &CohortSpec) -> Result<(), String> {
    let j = &spec.jitter;
    let ok = spec.n_disease == 20
        && spec.n_normal == 20
        && spec.spots.len() == 12
        && spec.disease_deltas.len() == 3
        && spec.disease_deltas.values().all(|&d| d >= 1.5)
        && j.scale_x == [0.9, 1.1]
        && j.scale_y == [0.9, 1.1]
        && j.translate_x == [-10.0, 10.0]
        && j.translate_y == [-10.0, 10.0]
        && j.noise_sigma == 0.02;
    if ok {
        Ok(())
    } else {
        Err(format!(
            "default cohort does not match the criterion: {spec:?}"
        ))
    }
}

fn criterion_1() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let m = manifest(dir.path(), "whole", &[], COHORT_SEED);
    check_default_cohort(m.synth.as_ref().expect("synth"))?;
    let start = Instant::now();
    let report = run_pipeline(&m).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let eval = report
        .mode(Representation::Whole)
        .ok_or("no whole-mode report")?;
    let detail = format!(
        "accuracy {:.3} (>= 0.90), dim {}, runtime {secs:.1} s (<= 60 s)",
        eval.accuracy, report.modes["whole"].dim
    );
    if eval.accuracy >= 0.90 && secs <= 60.0 && report.modes["whole"].dim == ROI * ROI {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let m = manifest(dir.path(), "compare", &chosen_seeds(), COHORT_SEED);
    let report: StudyReport = run_pipeline(&m).map_err(|e| e.to_string())?;
    let keys: Vec<&str> = report.modes.keys().map(String::as_str).collect();
    let spots = report
        .mode(Representation::Spots)
        .ok_or("no spots-mode report")?;
    let whole = report
        .mode(Representation::Whole)
        .ok_or("no whole-mode report")?;
    let dim = report.modes["spots"].dim;
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(m.out("report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let on_disk = json["modes"].as_object().map(|o| o.len()).unwrap_or(0);
    let detail = format!(
        "spots accuracy {:.3} (>= 0.90, K = {dim}), compare modes {keys:?} (whole {:.3}), report.json modes {on_disk}",
        spots.accuracy, whole.accuracy
    );
    if spots.accuracy >= 0.90 && dim == 4 && keys == ["spots", "whole"] && on_disk == 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3() -> Outcome {
    let spec = CohortSpec::default_study(COHORT_SEED);
    let canonical = spec.template_refs().map_err(|e| e.to_string())?;
    let roi = RoiSpec::new(ROI, ROI, 0).map_err(|e| e.to_string())?;
    let (ox, oy) = roi_origin(&canonical, &roi);
    let jitter = JitterSpec {
        noise_sigma: 0.0,
        ..JitterSpec::default()
    };
    let detection = DetectionConfig::default();
    let mut worst = (0.0f64, String::new());
    for i in 0..100u64 {
        let seed = sample_seed(0xf1de, i);
        let (moved, _) = jitter_spots(&spec.spots, &jitter, seed).map_err(|e| e.to_string())?;
        let image = render_gel(
            &moved,
            &spec.stain,
            spec.width,
            spec.height,
            spec.max_density,
            0.0,
            0,
        )
        .map_err(|e| e.to_string())?;
        let refs = detect_references(&image, &detection).map_err(|e| format!("jitter {i}: {e}"))?;
        let out = normalize(&image, &refs, &canonical, &roi, InterpKind::Bilinear)
            .map_err(|e| e.to_string())?;
        for s in spec
            .spots
            .iter()
            .filter(|s| !spec.reference_spots.contains(&s.name))
        {
            let (tx, ty) = (s.center.0 - ox as f64, s.center.1 - oy as f64);
            let region: SpotRegion = segment_spot(&out, PixelCoord::round_from(tx, ty), 0.5)
                .map_err(|e| format!("jitter {i}, {}: {e}", s.name))?;
            let err = (region.centroid.0 - tx).hypot(region.centroid.1 - ty);
            if err > worst.0 {
                worst = (err, format!("jitter {i}, {}", s.name));
            }
        }
    }
    let detail = format!(
        "100 jitters x 10 spots, max centroid error {:.3} px at {} (<= 1.5)",
        worst.0, worst.1
    );
    if worst.0 <= 1.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_4() -> Outcome {
    let params = SvmParams {
        c: 1.0,
        ..SvmParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut max_gap = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..10 {
        let d = common::random_four_point(&mut rng);
        let r = common::four_point_case(&d, &params);
        let gap = (r.trained - r.grid).abs();
        max_gap = max_gap.max(gap);
        if gap > 1e-3 || !r.predictions_agree {
            failures.push(format!(
                "case {case}: gap {gap:.2e}, agree {}",
                r.predictions_agree
            ));
        }
    }

    let two = Dataset::new(vec![vec![1.0], vec![-1.0]], vec![1, -1]).map_err(|e| e.to_string())?;
    let model = train_smo(&two, &params).map_err(|e| e.to_string())?;
    let (w, b) = model
        .linear_weights()
        .ok_or("linear model has no weights")?;
    if (w[0] - 1.0).abs() > 1e-3 || b.abs() > 1e-3 {
        failures.push(format!("two-point case: w = {}, b = {b}", w[0]));
    }
    let detail = format!(
        "10 four-point cases, max |dual - grid| {max_gap:.2e} (<= 1e-3); two-point w = {:.6}, b = {:.2e}",
        w[0], b
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn prop<S: Strategy>(
    name: &str,
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases)
        .run(&strategy, test)
        .map_err(|e| format!("{name}: {e}"))
}

fn pair(ax: usize, ay: usize, bx: usize, by: usize) -> ReferencePair {
    ReferencePair::new(PixelCoord::new(ax, ay), PixelCoord::new(bx, by)).unwrap()
}

fn image_strategy(max_w: usize, max_h: usize) -> impl Strategy<Value = GelImage> {
    (1..=max_w, 1..=max_h).prop_flat_map(|(w, h)| {
        proptest::collection::vec(0u16..=255, w * h)
            .prop_map(move |data| GelImage::new(w, h, 255, data).unwrap())
    })
}

fn textured(w: usize, h: usize) -> GelImage {
    let data = (0..w * h)
        .map(|i| ((i % w) * 7 + (i / w) * 13 + (i * i) % 31) as u16 % 256)
        .collect();
    GelImage::new(w, h, 255, data).unwrap()
}

fn kernels() -> impl Strategy<Value = InterpKind> {
    prop_oneof![
        Just(InterpKind::Bilinear),
        Just(InterpKind::DEFAULT_GAUSSIAN),
        (1usize..4, 0.3f64..3.0).prop_map(|(radius, sigma)| InterpKind::Gaussian { radius, sigma }),
    ]
}

fn affine_round_trips() -> Result<(), String> {
    let map = (0.2f64..5.0, 0.2f64..5.0, -100.0f64..100.0, -100.0f64..100.0);
    let point = (-500.0f64..500.0, -500.0f64..500.0);
    prop(
        "apply/invert",
        500,
        (map, point),
        |((sx, sy, tx, ty), p)| {
            let m = AffineMap::new(sx, sy, tx, ty).unwrap();
            let back = m.invert().apply(m.apply(p));
            prop_assert!((back.0 - p.0).abs() <= 1e-9 && (back.1 - p.1).abs() <= 1e-9);
            let id = m.compose(&m.invert());
            prop_assert!((id.sx() - 1.0).abs() <= 1e-9 && id.tx().abs() <= 1e-9);
            Ok(())
        },
    )?;
    let refs = || (0usize..200, 0usize..200, 0usize..200, 0usize..200);
    prop("solve", 500, (refs(), refs()), |(s, d)| {
        prop_assume!(s.0 != s.2 && s.1 != s.3 && d.0 != d.2 && d.1 != d.3);
        let (src, dst) = (pair(s.0, s.1, s.2, s.3), pair(d.0, d.1, d.2, d.3));
        let m = solve_affine(&src, &dst).unwrap();
        for (a, b) in [(src.a(), dst.a()), (src.b(), dst.b())] {
            let (x, y) = m.apply((a.x as f64, a.y as f64));
            prop_assert!((x - b.x as f64).abs() <= 1e-9 && (y - b.y as f64).abs() <= 1e-9);
        }
        Ok(())
    })
}

fn identity_resample() -> Result<(), String> {
    prop(
        "identity resample",
        200,
        (image_strategy(24, 24), kernels()),
        |(img, k)| {
            let out =
                resample(&img, &AffineMap::IDENTITY, img.width(), img.height(), k, 0).unwrap();
            prop_assert_eq!(out, img);
            Ok(())
        },
    )
}

fn roi_dimensions() -> Result<(), String> {
    let strategy = (
        (0usize..30, 0usize..30, 40usize..90, 35usize..70),
        (1usize..60, 1usize..60),
        kernels(),
    );
    prop(
        "ROI dimensions",
        100,
        strategy,
        |((ax, ay, bx, by), (w, h), k)| {
            let img = textured(96, 80);
            let roi = RoiSpec::new(w, h, 0).unwrap();
            let out =
                normalize(&img, &pair(ax, ay, bx, by), &pair(10, 12, 70, 60), &roi, k).unwrap();
            prop_assert_eq!((out.width(), out.height()), (w, h));
            Ok(())
        },
    )
}

fn vector_dims() -> Result<(), String> {
    prop("vector dim", 200, image_strategy(40, 40), |img| {
        let v = vectorize_whole(&img, "x");
        prop_assert_eq!(v.dim(), img.width() * img.height());
        prop_assert!(v
            .values
            .iter()
            .zip(img.data())
            .all(|(&a, &b)| a == f64::from(b)));
        Ok(())
    })
}

fn idempotence() -> Result<(), String> {
    let strategy = (
        (0usize..20, 0usize..20, 40usize..70, 35usize..60),
        kernels(),
    );
    prop("idempotence", 100, strategy, |((ax, ay, bx, by), k)| {
        let img = textured(80, 64);
        let canonical = pair(12, 10, 60, 50);
        let roi = RoiSpec::new(48, 40, 0).unwrap();
        let once = normalize(&img, &pair(ax, ay, bx, by), &canonical, &roi, k).unwrap();
        let frame = refs_in_roi_frame(&canonical, &roi).unwrap();
        let twice = normalize(&once, &frame, &canonical, &roi, k).unwrap();
        prop_assert_eq!(twice, once);
        Ok(())
    })
}

fn stain_response_grid() -> Result<(), String> {
    for (t, d, w) in [
        (100.0, 240.0, 100.0),
        (50.0, 255.0, 20.0),
        (10.0, 60.0, 300.0),
    ] {
        let model = StainModel {
            threshold: t,
            peak_density: d,
            decay_width: w,
        };
        let lipschitz = (d / t).max(d / w);
        let step = t / 1000.0;
        let mut prev = stain_response(0.0, &model);
        for i in 1..=4000 {
            let q = i as f64 * step;
            let v = stain_response(q, &model);
            if (v - prev).abs() > lipschitz * step * (1.0 + 1e-9) {
                return Err(format!("stain response jumps at q = {q} ({t}, {d}, {w})"));
            }
            let rising = q <= t;
            if (rising && v < prev) || (!rising && v > prev) {
                return Err(format!(
                    "stain response not unimodal at q = {q} ({t}, {d}, {w})"
                ));
            }
            prev = v;
        }
        let peak = stain_response(t, &model);
        if (peak - d).abs() > 1e-9 {
            return Err(format!("stain response peak {peak} != {d}"));
        }
    }
    Ok(())
}

fn negative_stain_annulus() -> Result<(), String> {
    let stain = StainModel::default();
    let spot = SpotSpec::new("s", (32.0, 32.0), 3.0 * stain.threshold, 4.0);
    let img = render_gel(&[spot], &stain, 64, 64, 255, 0.0, 0).map_err(|e| e.to_string())?;
    let center = img
        .density_at(PixelCoord::new(32, 32))
        .map_err(|e| e.to_string())?;
    let ring = (1..20)
        .map(|r| img.density_at(PixelCoord::new(32 + r, 32)).unwrap())
        .max()
        .unwrap();
    if center < ring {
        Ok(())
    } else {
        Err(format!("annulus: center {center} not below ring {ring}"))
    }
}

fn density_additivity() -> Result<(), String> {
    let strategy = (
        20.0f64..44.0,
        20.0f64..44.0,
        20.0f64..95.0,
        2.0f64..6.0,
        0.2f64..0.9,
    );
    prop(
        "additivity",
        100,
        strategy,
        |(cx, cy, q, sigma, fraction)| {
            let stain = StainModel::default();
            let img = render_gel(
                &[SpotSpec::new("s", (cx, cy), q, sigma)],
                &stain,
                64,
                64,
                255,
                0.0,
                0,
            )
            .unwrap();
            let region = segment_spot(&img, PixelCoord::round_from(cx, cy), fraction).unwrap();
            let (even, odd): (Vec<_>, Vec<_>) =
                region.pixels.iter().partition(|p| (p.x + p.y) % 2 == 0);
            let part = |pixels: Vec<PixelCoord>| {
                spot_density(
                    &img,
                    &SpotRegion {
                        pixels,
                        ..region.clone()
                    },
                )
                .unwrap()
            };
            let whole = spot_density(&img, &region).unwrap();
            prop_assert_eq!(whole, part(even) + part(odd));
            Ok(())
        },
    )
}

fn random_separable(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Dataset {
    let normal: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    while vectors.len() < n {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let side: f64 = x.iter().zip(&normal).map(|(a, b)| a * b).sum::<f64>() + 0.3;
        let label = label_of(side);
        // first two points fix one of each class
        if side.abs() < 0.2 || (vectors.len() < 2 && label != [1, -1][vectors.len()]) {
            continue;
        }
        vectors.push(x);
        labels.push(label);
    }
    Dataset::new(vectors, labels).unwrap()
}

fn svm_conditions() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..20 {
        let n = rng.random_range(4..=40);
        let dim = rng.random_range(1..=8);
        let d = random_separable(&mut rng, n, dim);
        let params = SvmParams {
            c: [0.1, 1.0, 10.0][case % 3],
            max_passes: 2000,
            ..SvmParams::default()
        };
        let m = train_smo(&d, &params).map_err(|e| e.to_string())?;
        let tol = 10.0 * params.tol;
        let mut balance = 0.0;
        for ((x, &y), &a) in d.vectors().iter().zip(d.labels()).zip(&m.alphas) {
            if !(0.0..=m.c).contains(&a) {
                return Err(format!("case {case}: alpha {a} outside [0, {}]", m.c));
            }
            let r = f64::from(y) * m.decision_value(x).unwrap() - 1.0;
            let ok = if a == 0.0 {
                r >= -tol
            } else if a == m.c {
                r <= tol
            } else {
                r.abs() <= tol
            };
            if !ok {
                return Err(format!("case {case}: KKT violated (alpha {a}, margin {r})"));
            }
            balance += a * f64::from(y);
        }
        if balance.abs() > 1e-6 {
            return Err(format!("case {case}: sum alpha y = {balance}"));
        }
    }
    Ok(())
}

fn end_to_end_determinism() -> Result<(), String> {
    let dirs = [TempDir::new(), TempDir::new()].map(|d| d.unwrap());
    let mut outputs = Vec::new();
    for dir in &dirs {
        let m = manifest(dir.path(), "compare", &chosen_seeds(), 11);
        run_pipeline(&m).map_err(|e| e.to_string())?;
        let files = [
            "report.json",
            "features-whole.json",
            "features-spots.json",
            "model-spots.svm",
        ];
        outputs.push(files.map(|f| fs::read(m.out(f)).unwrap()));
    }
    if outputs[0] == outputs[1] {
        Ok(())
    } else {
        Err("same manifest and seed gave different artifacts".into())
    }
}

fn criterion_5() -> Outcome {
    let suites: [(&str, Suite); 10] = [
        ("affine round trips", affine_round_trips),
        ("identity resample", identity_resample),
        ("ROI dimensions", roi_dimensions),
        ("idempotence", idempotence),
        ("stain response", stain_response_grid),
        ("annulus", negative_stain_annulus),
        ("additivity", density_additivity),
        ("vector dim", vector_dims),
        ("KKT/box/balance", svm_conditions),
        ("determinism", end_to_end_determinism),
    ];
    let mut failed = Vec::new();
    for (name, suite) in suites {
        if let Err(e) = suite() {
            failed.push(format!("{name}: {e}"));
        }
    }
    if failed.is_empty() {
        Ok(format!("{} suites", suites.len()))
    } else {
        Err(failed.join("; "))
    }
}

fn criterion_6() -> Outcome {
    let mut accuracies = Vec::new();
    for seed in 0..10u64 {
        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let m = manifest(dir.path(), "whole", &[], 1000 + seed);
        run_synth(&m).map_err(|e| e.to_string())?;
        run_refs(&m).map_err(|e| e.to_string())?;
        run_normalize(&m).map_err(|e| e.to_string())?;
        run_featurize(&m, &[Representation::Whole]).map_err(|e| e.to_string())?;
        let matrix =
            FeatureMatrix::load(&m.out("features-whole.json")).map_err(|e| e.to_string())?;
        let dataset = matrix.dataset().map_err(|e| e.to_string())?;
        let mut labels = dataset.labels().to_vec();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = dataset.relabeled(labels).map_err(|e| e.to_string())?;
        let report = cross_validate(&shuffled, m.cv.k, &m.svm.params_for(matrix.dim), m.seed)
            .map_err(|e| e.to_string())?;
        accuracies.push(report.accuracy);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let detail = format!(
        "mean shuffled-label accuracy {mean:.3} over 10 seeds (in [0.3, 0.7]); per seed {:?}",
        accuracies
            .iter()
            .map(|a| (a * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );
    if (0.3..=0.7).contains(&mean) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(&str, Criterion); 6] = [
        ("end-to-end whole-rectangle study", criterion_1),
        ("chosen-spot study and compare mode", criterion_2),
        ("registration fidelity", criterion_3),
        ("SMO oracle equivalence", criterion_4),
        ("invariant suites", criterion_5),
        ("shuffled-label null", criterion_6),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  criterion {} {name}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL  criterion {} {name}: {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
