//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::cell::OnceCell;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use homogen::estimator::{RegressorModel, RegressorSpec, TrainConfig};
use homogen::eval::{default_thresholds, pme, robustness_curve};
use homogen::generator::{fusion_band, generate_naive, generate_realistic, label_residual, GeneratorConfig};
use homogen::homography::{
    dlt_solve, homography_to_offsets, normalize, offsets_to_homography, sample_gt, Correspondence, Frame, Homography,
    Interval, PerturbationRanges,
};
use homogen::imaging::{seam_energy, warp_same, ImageBuf};
use homogen::pipeline::corpus::{synth_pair, synth_test_set, CorpusSpec, ScenePair};
use homogen::pipeline::{process_pair, run, EstimatorState, GenConfig};
use homogen::plane_seg::{estimate_masks, PlaneSegConfig};
use homogen::refine::{bce, ccl_loss, ccm_apply, ccm_reconstruct, logistic_objective, CcmConfig};
use homogen::seed::mix64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn wide() -> PerturbationRanges {
    PerturbationRanges {
        scaling: Interval::new(0.7, 1.3),
        shearing: Interval::symmetric(0.3),
        rotation: Interval::symmetric(0.5),
        translation: Interval::symmetric(32.0),
        perspective: Interval::symmetric(5e-4),
    }
}

fn smooth(w: usize, h: usize, phase: f32) -> ImageBuf {
    ImageBuf::from_fn(w, h, |x, y| {
        let (x, y) = (x as f32, y as f32);
        0.5 + 0.2 * (x * 0.11 + phase).sin() * (y * 0.07).cos() + 0.1 * ((x - y) * 0.05).sin()
    })
}

fn scene(spec: &CorpusSpec, seed: u64) -> (ScenePair, homogen::pipeline::corpus::PairTruth) {
    let pair = synth_pair(spec, seed, 10_000 + seed);
    let truth = pair.truth.clone().unwrap();
    (pair, truth)
}

fn gt_for(seed: u64) -> Homography {
    sample_gt(&PerturbationRanges::default(), Frame::new(128, 128), mix64(seed)).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn algebra() -> Outcome {
    let start = Instant::now();
    let f = Frame::new(128, 128);
    let id = Homography::identity();
    let (mut worst_assoc, mut worst_inv, mut worst_roundtrip, mut worst_dlt) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut neutral = true;
    for s in 0..10_000u64 {
        let h = sample_gt(&wide(), f, s).unwrap();
        let g = sample_gt(&wide(), f, s + 1_000_000).unwrap();
        let k = sample_gt(&wide(), f, s + 2_000_000).unwrap();
        worst_assoc = worst_assoc.max(h.compose(&g).compose(&k).max_abs_diff(&h.compose(&g.compose(&k))));
        neutral &= id.compose(&h) == h && h.compose(&id) == h;
        let inv = h.invert().unwrap();
        worst_inv = worst_inv
            .max(h.compose(&inv).max_abs_diff(&id))
            .max(inv.invert().unwrap().max_abs_diff(&h));
        let back = offsets_to_homography(&homography_to_offsets(&h, f).unwrap()).unwrap();
        worst_roundtrip = worst_roundtrip.max(back.max_abs_diff(&h) / h.matrix().amax());
        let corr: Vec<Correspondence> = f
            .corners()
            .iter()
            .map(|c| {
                let t = h.transform_point(*c).unwrap();
                Correspondence::new(c.x, c.y, t.x, t.y)
            })
            .collect();
        let est = normalize(dlt_solve(&corr).unwrap().matrix());
        let truth = normalize(h.matrix());
        worst_dlt = worst_dlt.max((est - truth).amax() / truth.amax());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_assoc < 1e-9 && neutral && worst_inv < 1e-10 && worst_roundtrip < 1e-9 && worst_dlt < 1e-6 && secs < 10.0;
    outcome(
        pass,
        format!(
            "10k H: assoc {worst_assoc:.1e}, inverse {worst_inv:.1e}, roundtrip {worst_roundtrip:.1e}, dlt {worst_dlt:.1e}, {secs:.2} s"
        ),
    )
}

fn warp_oracles() -> Outcome {
    let img = ImageBuf::from_fn(16, 12, |x, y| ((x * 5 + y * 11) % 23) as f32 / 23.0);
    let (same, _) = warp_same(&img, &Homography::identity()).unwrap();
    let identity = same == img;
    let (shifted, _) = warp_same(&img, &Homography::translation(2.0, 1.0)).unwrap();
    let translation = (1..12).all(|y| (2..16).all(|x| shifted.get(x, y, 0) == img.get(x - 2, y - 1, 0)));
    let (half, _) = warp_same(&img, &Homography::translation(0.5, 0.0)).unwrap();
    let midpoint = (0..12)
        .all(|y| (1..16).all(|x| (half.get(x, y, 0) - 0.5 * (img.get(x - 1, y, 0) + img.get(x, y, 0))).abs() < 1e-6));

    let mut worst: f64 = 0.0;
    for s in 0..50u64 {
        let (ha, hb) = (gt_for(s), gt_for(s + 500));
        let base = smooth(128, 128, s as f32 * 0.1);
        let (mid, mid_valid) = warp_same(&base, &ha).unwrap();
        let (twice, v2) = warp_same(&mid, &hb).unwrap();
        let (direct, _) = warp_same(&base, &hb.compose(&ha)).unwrap();
        let (vmid, _) = warp_same(&mid_valid.as_image(), &hb).unwrap();
        let (mut sum, mut n) = (0.0, 0usize);
        for i in 0..twice.data.len() {
            if v2.weights[i] >= 0.999 && vmid.data[i] >= 0.999 {
                sum += (twice.data[i] - direct.data[i]).abs() as f64;
                n += 1;
            }
        }
        worst = worst.max(sum / n.max(1) as f64);
    }
    outcome(
        identity && translation && midpoint && worst < 0.02,
        format!("identity {identity}, translation {translation}, midpoint {midpoint}, composition worst mean {worst:.4}"),
    )
}

fn label_criterion() -> Outcome {
    let spec = CorpusSpec::default();
    let seg = PlaneSegConfig::default();
    let gen = GeneratorConfig::default();
    let mut residuals = Vec::new();
    for s in 0..200u64 {
        let (pair, t) = scene(&spec, s);
        let (m_s, m_t) = estimate_masks(&pair.source, &pair.target, &t.h_ts, &seg).unwrap();
        let h_gt = gt_for(s);
        let comp = generate_realistic(&pair.source, &pair.target, &m_s, &m_t, &h_gt, &t.h_ts, &gen).unwrap();
        let refined = ccm_apply(&comp.image, &pair.target, &h_gt, &t.h_ts, &CcmConfig::default()).unwrap();
        residuals.push(label_residual(&pair.source, &refined.image, &h_gt, &comp.plane_weight).unwrap());
    }
    let ok = residuals.iter().filter(|r| **r < 0.02).count();
    let frac = ok as f64 / residuals.len() as f64;
    outcome(
        frac >= 0.98,
        format!(
            "{ok}/200 samples under 0.02 ({:.1}%), median residual {:.4}",
            frac * 100.0,
            median(residuals)
        ),
    )
}

fn polygon_centroid(pts: &[(f64, f64)]) -> (f64, f64) {
    let (mut a, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..pts.len() {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % pts.len()];
        let cross = x0 * y1 - x1 * y0;
        a += cross;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    (cx / (3.0 * a), cy / (3.0 * a))
}

fn realism_criterion() -> Outcome {
    let spec = CorpusSpec {
        min_objects: 1,
        max_objects: 1,
        ..CorpusSpec::default()
    };
    let seg = PlaneSegConfig::default();
    let gen = GeneratorConfig::default();
    let square = |o: &homogen::pipeline::corpus::ObjectTruth| {
        [(0.0, 0.0), (o.size, 0.0), (o.size, o.size), (0.0, o.size)]
            .map(|(dx, dy)| (o.x0 + o.motion[0] + dx, o.y0 + o.motion[1] + dy))
    };
    let (mut ok, mut checked, mut skipped) = (0usize, 0usize, 0usize);
    let mut errors = Vec::new();
    for s in 0..200u64 {
        let (pair, t) = scene(&spec, s);
        let h_gt = gt_for(s);
        let o = &t.objects[0];
        // Expected placement: object motion, then camera motion into the target view, then H_gt.
        let expected = square(o).map(|(x, y)| h_gt.apply(x, y).unwrap());
        let seen = square(o).map(|(x, y)| t.h_st.apply(x, y).unwrap());
        if expected.iter().chain(&seen).any(|(x, y)| *x < 2.0 || *y < 2.0 || *x > 125.0 || *y > 125.0) {
            skipped += 1;
            continue;
        }
        let (m_s, m_t) = estimate_masks(&pair.source, &pair.target, &t.h_ts, &seg).unwrap();
        let ind = |target: bool| t.object_support(0, 128, 128, target).as_image();
        let moved = generate_realistic(&ind(false), &ind(true), &m_s, &m_t, &h_gt, &t.h_ts, &gen).unwrap().image;
        let (mut mx, mut my, mut mass) = (0.0, 0.0, 0.0);
        for y in 0..128 {
            for x in 0..128 {
                let v = moved.data[y * 128 + x] as f64;
                mx += v * x as f64;
                my += v * y as f64;
                mass += v;
            }
        }
        let (ex, ey) = polygon_centroid(&expected);
        let err = (mx / mass - ex).hypot(my / mass - ey);
        checked += 1;
        if err <= 1.0 {
            ok += 1;
        }
        errors.push(err);
    }
    let frac = ok as f64 / checked.max(1) as f64;
    outcome(
        checked >= 100 && frac >= 0.95,
        format!(
            "{ok}/{checked} objects within 1 px ({:.1}%), median error {:.3} px, {skipped} scenes with the object leaving the frame",
            frac * 100.0,
            median(errors)
        ),
    )
}

fn seam_criterion() -> Outcome {
    let spec = CorpusSpec {
        min_objects: 2,
        max_objects: 3,
        ..CorpusSpec::default()
    };
    let seg = PlaneSegConfig::default();
    let gen = GeneratorConfig::default();
    let (mut ok, mut n) = (0usize, 0usize);
    let (mut sum_r, mut sum_n) = (0.0, 0.0);
    for s in 0..200u64 {
        let (pair, t) = scene(&spec, s);
        let h_gt = gt_for(s);
        let (m_s, m_t) = estimate_masks(&pair.source, &pair.target, &t.h_ts, &seg).unwrap();
        let real = generate_realistic(&pair.source, &pair.target, &m_s, &m_t, &h_gt, &t.h_ts, &gen).unwrap();
        let naive = generate_naive(&pair.source, &pair.target, &m_s, &m_t, &h_gt).unwrap();
        let (_, plane_valid) = warp_same(&pair.source, &h_gt).unwrap();
        let band = fusion_band(&real, &plane_valid, 2);
        let (Ok(er), Ok(en)) = (seam_energy(&real.image, &band), seam_energy(&naive, &band)) else {
            continue;
        };
        n += 1;
        sum_r += er;
        sum_n += en;
        if er <= en {
            ok += 1;
        }
    }
    let frac = ok as f64 / n.max(1) as f64;
    outcome(
        n >= 190 && frac >= 0.95,
        format!(
            "{ok}/{n} samples with realistic seam <= naive ({:.1}%), mean seam {:.4} vs {:.4}",
            frac * 100.0,
            sum_r / n.max(1) as f64,
            sum_n / n.max(1) as f64
        ),
    )
}

fn ccm_criterion() -> Outcome {
    let cfg = GenConfig::default();
    let spec = CorpusSpec::default();
    let mut worst_increase = f64::NEG_INFINITY;
    let mut drops = Vec::new();
    for s in 0..200u64 {
        let (pair, _) = scene(&spec, s);
        let out = process_pair(&cfg, &EstimatorState::Bootstrap, &pair, 0).unwrap();
        worst_increase = worst_increase.max(out.ccl_after - out.ccl_before);

        // Inject a bright stripe into the refined sample and repair it.
        let h_ts = out.sample.provenance.h_ts_used;
        let h_gt = out.sample.h_gt;
        let mut hurt = out.sample.i_t_prime.clone();
        let x0 = 40 + (mix64(s) % 40) as usize;
        for y in 20..108 {
            for x in x0..x0 + 3 {
                let v = hurt.get(x, y, 0);
                hurt.set(x, y, 0, (v + 0.5).min(1.0));
            }
        }
        let before = ccl_loss(&hurt, &pair.target, &h_gt, &h_ts).unwrap();
        let fixed = ccm_reconstruct(&hurt, &pair.target, &h_gt, &h_ts, &CcmConfig::default()).unwrap();
        let after = ccl_loss(&fixed, &pair.target, &h_gt, &h_ts).unwrap();
        worst_increase = worst_increase.max(after - before);
        drops.push((before - after) / before);
    }
    let med = median(drops);
    outcome(
        worst_increase <= 1e-6 && med >= 0.2,
        format!("largest loss change {worst_increase:.2e} over 400 repairs, median drop on injected seams {:.1}%", med * 100.0),
    )
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = RegressorSpec {
        input_side: 4,
        hidden: vec![6, 5],
        output_scale: 4.0,
        patch: Frame::new(16, 16),
    };
    let mut model = RegressorModel::new(spec.clone(), TrainConfig::default(), 1).unwrap();
    // Random weights everywhere, so hidden layers receive gradient too.
    let p0: Vec<f64> = (0..model.n_params()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    model.set_params(&p0);
    let i_s = ImageBuf::from_fn(16, 16, |_, _| rng.gen_range(0.0..1.0));
    let i_t = ImageBuf::from_fn(16, 16, |_, _| rng.gen_range(0.0..1.0));
    let h = Homography::translation(1.3, -0.7);
    let ex = homogen::estimator::Example::new(&i_s, &i_t, &h, &spec).unwrap();
    let analytic = model.example_grad(&ex).1.flat();
    let step = 1e-5;
    let mut probe = model.clone();
    let mut worst_reg: f64 = 0.0;
    for k in 0..p0.len() {
        let mut p = p0.clone();
        p[k] += step;
        probe.set_params(&p);
        let up = probe.loss(std::slice::from_ref(&ex));
        p[k] -= 2.0 * step;
        probe.set_params(&p);
        let down = probe.loss(std::slice::from_ref(&ex));
        let fd = (up - down) / (2.0 * step);
        let denom = fd.abs().max(analytic[k].abs());
        if denom > 1e-7 {
            worst_reg = worst_reg.max((fd - analytic[k]).abs() / denom);
        }
    }

    let x: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let y: Vec<f64> = (0..30).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = rng.gen_range(-0.5..0.5);
    let (_, gw, gb) = logistic_objective(&w, b, &x, &y);
    let mut worst_qam: f64 = 0.0;
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
    for k in 0..=w.len() {
        let eval = |d: f64| {
            let mut w2 = w.clone();
            let mut b2 = b;
            if k < w.len() {
                w2[k] += d;
            } else {
                b2 += d;
            }
            logistic_objective(&w2, b2, &x, &y).0
        };
        let fd = (eval(step) - eval(-step)) / (2.0 * step);
        let an = if k < w.len() { gw[k] } else { gb };
        worst_qam = worst_qam.max(rel(fd, an));
    }
    outcome(
        worst_reg < 1e-4 && worst_qam < 1e-5,
        format!(
            "regressor worst relative error {worst_reg:.1e} over {} weights, quality model {worst_qam:.1e}",
            p0.len()
        ),
    )
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism() -> Outcome {
    let cfg = GenConfig {
        master_seed: 11,
        corpus: CorpusSpec {
            pairs: 40,
            ..CorpusSpec::default()
        },
        test_set: CorpusSpec {
            pairs: 10,
            ..CorpusSpec::default()
        },
        train: TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
        ..GenConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&cfg, Some(&a)).unwrap();
    run(&cfg, Some(&b)).unwrap();
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<_> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let same = ta.len() == tb.len() && differing.is_empty();
    outcome(
        same && ta.len() > 100,
        format!("{} files per run, {} differ {:?}", ta.len(), differing.len(), differing.iter().take(3).collect::<Vec<_>>()),
    )
}

fn eval_semantics() -> Outcome {
    let spec = CorpusSpec {
        pairs: 50,
        ..CorpusSpec::default()
    };
    let test = synth_test_set(&spec, 123).unwrap();
    let id = Homography::identity();
    let exact = test
        .iter()
        .all(|p| pme(&id, &p.correspondences).unwrap().value == p.correspondences.mean_displacement());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = default_thresholds();
    let monotone = (0..200).all(|_| {
        let errors: Vec<f64> = (0..rng.gen_range(0..60)).map(|_| rng.gen_range(0.0..4.0)).collect();
        let c = robustness_curve(&errors, &grid);
        c.inlier_fraction.windows(2).all(|w| w[0] <= w[1])
    });
    let axis = grid.first() == Some(&0.1) && grid.last() == Some(&3.0) && grid.windows(2).all(|w| w[0] < w[1]);
    outcome(
        exact && monotone && axis,
        format!(
            "identity PME exact on 50 pairs: {exact}, curves monotone: {monotone}, grid {:.1}..{:.1} ({} steps)",
            grid[0],
            grid[grid.len() - 1],
            grid.len()
        ),
    )
}

fn full_run() -> (homogen::pipeline::RunOutput, f64) {
    let cfg = GenConfig {
        corpus: CorpusSpec {
            pairs: 500,
            ..CorpusSpec::default()
        },
        ..GenConfig::default()
    };
    let start = Instant::now();
    let out = run(&cfg, None).unwrap();
    (out, start.elapsed().as_secs_f64())
}

/// Criterion numbers given on the command line restrict the run to those.
fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    // Criteria 7 and 9 share one full pipeline run at corpus size 500.
    let full = OnceCell::new();

    let qam = || {
        let (run_out, _) = full.get_or_init(full_run);
        let ln2 = std::f64::consts::LN_2;
        let bce_exact = (bce(0.5, 0.0) - ln2).abs() <= 1e-12 && (bce(0.5, 1.0) - ln2).abs() <= 1e-12;
        let acc: Vec<f64> = run_out.reports.iter().map(|r| r.qam.holdout_accuracy).collect();
        let trained = run_out.reports.iter().all(|r| r.qam.trained);
        outcome(
            bce_exact && trained && acc.iter().all(|a| *a >= 0.9),
            format!("hold-out accuracy per iteration {acc:.3?}, BCE(0.5) = ln 2: {bce_exact}"),
        )
    };
    let trend = || {
        let (run_out, secs) = full.get_or_init(full_run);
        let pme: Vec<f64> = run_out.reports.iter().filter_map(|r| r.eval_pme).collect();
        let identity = run_out.reports[0].eval_identity_pme.unwrap_or(f64::NAN);
        let improved = pme.len() == 2 && pme[1] <= pme[0];
        outcome(
            improved && *secs < 600.0,
            format!("PME {pme:.3?} (identity {identity:.3}), 500-pair run in {secs:.0} s"),
        )
    };

    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "homography algebra", Box::new(algebra)),
        (2, "warp oracles", Box::new(warp_oracles)),
        (3, "label criterion", Box::new(label_criterion)),
        (4, "realism criterion", Box::new(realism_criterion)),
        (5, "two-homography fusion seams", Box::new(seam_criterion)),
        (6, "content consistency", Box::new(ccm_criterion)),
        (7, "quality model", Box::new(qam)),
        (8, "gradient checks", Box::new(gradient_checks)),
        (9, "iteration trend", Box::new(trend)),
        (10, "determinism", Box::new(determinism)),
        (11, "eval semantics", Box::new(eval_semantics)),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (k, name, check) in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.0)) {
        ran += 1;
        let o = check();
        println!("criterion {k:>2} {name}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
