//! Acceptance gate. Prints one line per criterion and exits non-zero if any
//! evaluated criterion fails.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::random_orthogonal;
use sepdl_core::data::{add_gaussian_noise, extract_patches, load_pgm, synth_separable, PatchSet, SynthSpec};
use sepdl_core::denoise::{denoise_image, psnr, ssim, DenoiseConfig};
use sepdl_core::dictupdate::{
    accumulate_left_cross, accumulate_right_cross, update_left_ortho, update_right_ortho, DictMode, DictionaryPair,
    PartialBody,
};
use sepdl_core::numerics::{kron, vec, Mat};
use sepdl_core::rng::{gaussian_mat, seeded, unit_column_mat};
use sepdl_core::sparse2d::omp1d_reference;
use sepdl_core::trainer::{train, InMemoryTransport, InitPolicy, RunMetrics, TrainConfig, TrainOutput};
use sepdl_core::{omp2d, threshold_code, CodingStop};

const MONOTONE_SLACK: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-10;
const PARALLEL_TOL: f64 = 1e-10;
const CONVERGED_REL_CHANGE: f64 = 1e-3;
const FIXED_POINT_MAX: f64 = 1e-15;
const DENOISE_MIN_GAIN_DB: f64 = 4.0;
const DENOISE_MIN_SSIM_GAIN: f64 = 0.05;
const NOISY_PSNR_TARGET: f64 = 28.13;
const NOISY_PSNR_TOL: f64 = 0.05;

enum Verdict {
    Pass(String),
    Fail(String),
    NotEvaluated(String),
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "2D-OMP equals vectorized OMP",
            budget: Duration::from_secs(10),
            run: oracle_equivalence,
        },
        Criterion {
            id: 2,
            name: "monotone dictionary updates",
            budget: Duration::from_secs(120),
            run: monotone_updates,
        },
        Criterion {
            id: 3,
            name: "serial equals parallel",
            budget: Duration::from_secs(120),
            run: serial_equals_parallel,
        },
        Criterion { id: 4, name: "communication volume law", budget: Duration::from_secs(600), run: communication_law },
        Criterion { id: 5, name: "parallel speedup", budget: Duration::from_secs(900), run: speedup },
        Criterion { id: 6, name: "denoising gain", budget: Duration::from_secs(600), run: denoising_gain },
        Criterion {
            id: 7,
            name: "orthonormal fast convergence",
            budget: Duration::from_secs(120),
            run: ortho_convergence,
        },
        Criterion {
            id: 8,
            name: "Procrustes optimality",
            budget: Duration::from_secs(120),
            run: procrustes_optimality,
        },
        Criterion { id: 9, name: "noiseless fixed point", budget: Duration::from_secs(120), run: fixed_point },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let verdict = (c.run)();
        let elapsed = start.elapsed();
        let over = elapsed > c.budget;
        let (tag, detail) = match verdict {
            Verdict::Pass(d) if !over => ("PASS", d),
            Verdict::Pass(d) => ("FAIL", format!("{d}; over time budget {:?}", c.budget)),
            Verdict::Fail(d) => ("FAIL", d),
            Verdict::NotEvaluated(d) => ("NOT EVALUATED", d),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("criterion {} [{}]: {tag} ({:.1}s) {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn general_pair(seed: u64, m: usize, n1: usize, n2: usize) -> DictionaryPair {
    let mut rng = seeded(seed);
    let d1 = unit_column_mat(&mut rng, m, n1);
    let d2 = unit_column_mat(&mut rng, m, n2);
    DictionaryPair::new(DictMode::General, d1, d2).unwrap()
}

fn oracle_equivalence() -> Verdict {
    let mut worst = 0.0f64;
    let mut mismatches = 0;
    for trial in 0..200u64 {
        let mut rng = seeded(10_000 + trial);
        let m = 2 + (trial % 3) as usize;
        let pick =
            |rng: &mut sepdl_core::rng::Rng| m + (gaussian_mat(rng, 1, 1)[(0, 0)].abs() * 10.0) as usize % (m + 1);
        let (n1, n2) = (pick(&mut rng), pick(&mut rng));
        let s = 1 + (trial as usize / 3) % 4;
        let dict = general_pair(trial, m, n1, n2);
        let y = gaussian_mat(&mut rng, m, m);
        let stop = CodingStop::FixedSparsity(s);
        let code = omp2d(&y, &dict, stop).unwrap();
        let reference = omp1d_reference(vec(&y).as_slice(), &kron(dict.d2(), dict.d1()), stop).unwrap();
        if code.len() != reference.entries.len() {
            mismatches += 1;
            continue;
        }
        for (e, &(k, v)) in code.triplets().iter().zip(&reference.entries) {
            if e.col * n1 + e.row != k {
                mismatches += 1;
                break;
            }
            worst = worst.max((e.value - v).abs());
        }
    }
    verdict(
        mismatches == 0 && worst <= ORACLE_TOL,
        format!("200 trials, support mismatches {mismatches}, max coefficient diff {worst:.2e} (tol {ORACLE_TOL:.0e})"),
    )
}

fn criterion2_data(mode: DictMode) -> (PatchSet, TrainConfig) {
    let (n, s) = match mode {
        DictMode::General => (16, 6),
        DictMode::Orthonormal => (8, 8),
    };
    let spec = SynthSpec { count: 512, m: 8, n1: n, n2: n, s, noise_sigma: 0.1, mode };
    let data = synth_separable(2024, &spec).unwrap().0;
    (data, TrainConfig::new(mode, n, n, s, 50, 1, 7))
}

fn criterion2_run(mode: DictMode) -> TrainOutput {
    let (data, cfg) = criterion2_data(mode);
    train(&cfg, &data, &InMemoryTransport).unwrap()
}

fn monotone_violations(metrics: &RunMetrics) -> (usize, f64) {
    let mut bad = 0;
    let mut worst = f64::NEG_INFINITY;
    for row in &metrics.iterations[1..] {
        for (before, after) in [(row.left_before, row.left_after), (row.right_before, row.right_after)] {
            let rel = (after - before) / before;
            worst = worst.max(rel);
            if after > before * (1.0 + MONOTONE_SLACK) {
                bad += 1;
            }
        }
    }
    (bad, worst)
}

fn monotone_updates() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in [DictMode::General, DictMode::Orthonormal] {
        let out = criterion2_run(mode);
        let (bad, worst) = monotone_violations(&out.metrics);
        ok &= bad == 0 && out.metrics.iterations.len() == 51;
        parts.push(format!("{}: {bad} violations, max relative change {worst:.2e}", mode.as_str()));
    }
    verdict(ok, format!("K=50, N=512, m=8; {}", parts.join("; ")))
}

fn serial_equals_parallel() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in [DictMode::General, DictMode::Orthonormal] {
        let (data, mut cfg) = criterion2_data(mode);
        cfg.iters = 10;
        cfg.keep_history = true;
        let runs: Vec<_> = [1, 2, 4]
            .iter()
            .map(|&p| {
                cfg.nodes = p;
                train(&cfg, &data, &InMemoryTransport).unwrap()
            })
            .collect();
        let mut worst = 0.0f64;
        for other in &runs[1..] {
            for (a, b) in runs[0].history.iter().zip(&other.history) {
                worst = worst.max(a.d1().max_abs_diff(b.d1())).max(a.d2().max_abs_diff(b.d2()));
            }
        }
        ok &= worst <= PARALLEL_TOL;
        parts.push(format!("{}: max elementwise diff {worst:.2e}", mode.as_str()));
    }
    verdict(ok, format!("p in {{1,2,4}}, 10 iterations; {} (tol {PARALLEL_TOL:.0e})", parts.join("; ")))
}

/// Up plus down bytes of the first left and right update phases.
fn phase_bytes(mode: DictMode, count: usize, p: usize) -> (u64, u64) {
    let n = match mode {
        DictMode::General => 16,
        DictMode::Orthonormal => 8,
    };
    let spec = SynthSpec { count, m: 8, n1: n, n2: n, s: 2, noise_sigma: 0.1, mode };
    let data = synth_separable(5, &spec).unwrap().0;
    let cfg = TrainConfig::new(mode, n, n, 2, 1, p, 3);
    let out = train(&cfg, &data, &InMemoryTransport).unwrap();
    let row = &out.metrics.iterations[1];
    (row.left_bytes.up + row.left_bytes.down, row.right_bytes.up + row.right_bytes.down)
}

fn communication_law() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in [DictMode::General, DictMode::Orthonormal] {
        let small = phase_bytes(mode, 1_000, 4);
        let large = phase_bytes(mode, 100_000, 4);
        let per_p: Vec<(u64, u64)> = [1, 2, 4, 8].iter().map(|&p| phase_bytes(mode, 1_000, p)).collect();
        let linear = [1u64, 2, 4, 8].iter().zip(&per_p).all(|(&p, b)| b.0 == p * per_p[0].0 && b.1 == p * per_p[0].1);
        ok &= small == large && linear;
        parts.push(format!(
            "{}: p=4 left/right bytes N=1000 {:?} vs N=100000 {:?}, p=1,2,4,8 left {:?}",
            mode.as_str(),
            small,
            large,
            per_p.iter().map(|b| b.0).collect::<Vec<_>>()
        ));
    }
    verdict(ok, parts.join("; "))
}

fn main_loop_seconds(mode: DictMode, count: usize, iters: usize, p: usize) -> f64 {
    let (n, s) = match mode {
        DictMode::General => (16, 16),
        DictMode::Orthonormal => (16, 16),
    };
    let spec = SynthSpec { count, m: 16, n1: n, n2: n, s, noise_sigma: 0.1, mode };
    let data = synth_separable(11, &spec).unwrap().0;
    let cfg = TrainConfig::new(mode, n, n, s, iters, p, 1);
    train(&cfg, &data, &InMemoryTransport).unwrap().metrics.total_seconds
}

fn speedup() -> Verdict {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    if threads < 8 {
        // still measure at reduced size so the report shows what this host does
        let base = main_loop_seconds(DictMode::Orthonormal, 4_000, 3, 1);
        let s4 = base / main_loop_seconds(DictMode::Orthonormal, 4_000, 3, 4);
        let s8 = base / main_loop_seconds(DictMode::Orthonormal, 4_000, 3, 8);
        return Verdict::NotEvaluated(format!(
            "host exposes {threads} hardware thread(s), criterion needs >= 8 physical cores; \
             reduced run (ortho, m=16, N=4000, 3 iterations) measured speedup p=4 x{s4:.2}, p=8 x{s8:.2}"
        ));
    }
    let ortho = |p| main_loop_seconds(DictMode::Orthonormal, 32_000, 20, p);
    let general = |p| main_loop_seconds(DictMode::General, 32_000, 20, p);
    let (o1, g1) = (ortho(1), general(1));
    let (o4, o8, g4) = (o1 / ortho(4), o1 / ortho(8), g1 / general(4));
    verdict(
        o8 >= 5.0 && o4 >= 2.5 && g4 >= 2.0,
        format!("ortho p=4 x{o4:.2} (>= 2.5), p=8 x{o8:.2} (>= 5.0); general p=4 x{g4:.2} (>= 2.0)"),
    )
}

fn denoising_gain() -> Verdict {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/camera.pgm");
    let clean = load_pgm(path).unwrap();
    let noisy = add_gaussian_noise(&clean, 10.0, 1).unwrap();
    let input_psnr = psnr(&noisy, &clean).unwrap();
    let training = extract_patches(&noisy, 8, 1).unwrap().sample(4000, 2).unwrap();
    let cfg = TrainConfig::new(DictMode::Orthonormal, 8, 8, 6, 20, 1, 3);
    let dict = train(&cfg, &training, &InMemoryTransport).unwrap().dict;
    let (denoised, stats) = denoise_image(&noisy, &dict, &DenoiseConfig::new(10.0, 8)).unwrap();
    let out_psnr = psnr(&denoised, &clean).unwrap();
    let (ssim_in, ssim_out) = (ssim(&noisy, &clean).unwrap(), ssim(&denoised, &clean).unwrap());
    let ok = (input_psnr - NOISY_PSNR_TARGET).abs() <= NOISY_PSNR_TOL
        && out_psnr - input_psnr >= DENOISE_MIN_GAIN_DB
        && ssim_out - ssim_in >= DENOISE_MIN_SSIM_GAIN;
    verdict(
        ok,
        format!(
            "512x512 camera, sigma=10: PSNR {input_psnr:.3} -> {out_psnr:.3} dB (gain {:.2}), SSIM {ssim_in:.4} -> {ssim_out:.4} (gain {:.4}), {} patches, {:.2} triplets/patch",
            out_psnr - input_psnr,
            ssim_out - ssim_in,
            stats.patches_coded,
            stats.mean_triplets
        ),
    )
}

fn ortho_convergence() -> Verdict {
    let out = criterion2_run(DictMode::Orthonormal);
    let rmse: Vec<f64> = out.metrics.iterations.iter().map(|r| r.rmse).collect();
    let worst = (30..rmse.len()).map(|k| ((rmse[k] - rmse[k - 1]) / rmse[k - 1]).abs()).fold(0.0f64, f64::max);
    verdict(
        worst < CONVERGED_REL_CHANGE,
        format!("max relative RMSE change over iterations 30..50 is {:.3e} (< {CONVERGED_REL_CHANGE:.0e}), final RMSE {:.4e}", worst, rmse[rmse.len() - 1]),
    )
}

fn procrustes_optimality() -> Verdict {
    let m = 8;
    let spec = SynthSpec { count: 512, m, n1: m, n2: m, s: 8, noise_sigma: 0.1, mode: DictMode::Orthonormal };
    let data = synth_separable(99, &spec).unwrap().0;
    let mut rng = seeded(100);
    let start =
        DictionaryPair::new(DictMode::Orthonormal, random_orthogonal(&mut rng, m), random_orthogonal(&mut rng, m))
            .unwrap();
    let codes: Vec<Mat> = data.patches().iter().map(|y| threshold_code(&start, y, 8).unwrap().to_dense()).collect();
    let sparse: Vec<_> = data.patches().iter().map(|y| threshold_code(&start, y, 8).unwrap()).collect();
    let objective = |d1: &Mat, d2: &Mat| -> f64 {
        data.patches().iter().zip(&codes).map(|(y, x)| y.sub(&d1.matmul(x).matmul_tr(d2)).frobenius_sq()).sum()
    };
    let samples: Vec<_> = data.patches().iter().zip(&sparse).collect();
    let PartialBody::LeftCross { s1 } = accumulate_left_cross(0, samples.clone(), start.d2(), m).unwrap().body else {
        unreachable!()
    };
    let PartialBody::RightCross { s2 } = accumulate_right_cross(0, samples, start.d1(), m).unwrap().body else {
        unreachable!()
    };
    let left = objective(&update_left_ortho(&s1).unwrap(), start.d2());
    let right = objective(start.d1(), &update_right_ortho(&s2).unwrap());
    let mut losses = 0;
    let mut margin = f64::INFINITY;
    for _ in 0..1000 {
        let omega = random_orthogonal(&mut rng, m);
        let (ol, or) = (objective(&omega, start.d2()), objective(start.d1(), &omega));
        losses += usize::from(left > ol) + usize::from(right > or);
        margin = margin.min(ol - left).min(or - right);
    }
    verdict(
        losses == 0,
        format!("1000 random orthogonal trials per side, {losses} beat the polar solution, min margin {margin:.3e}"),
    )
}

fn fixed_point() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    // one atom per patch is the sparsity at which OMP recovery on a random
    // redundant pair is guaranteed; at s=2 a few of 256 patches already miss
    for (mode, n, s) in [(DictMode::General, 12, 1), (DictMode::Orthonormal, 8, 6)] {
        let spec = SynthSpec { count: 256, m: 8, n1: n, n2: n, s, noise_sigma: 0.0, mode };
        let (data, truth, _) = synth_separable(31, &spec).unwrap();
        let mut cfg = TrainConfig::new(mode, n, n, s, 10, 2, 0);
        cfg.init = InitPolicy::Given(truth);
        let out = train(&cfg, &data, &InMemoryTransport).unwrap();
        let worst = out.metrics.iterations.iter().flat_map(|r| [r.objective, r.objective_mid]).fold(0.0f64, f64::max);
        ok &= worst < FIXED_POINT_MAX;
        parts.push(format!("{} (n={n}, s={s}): max objective {worst:.2e}", mode.as_str()));
    }
    verdict(ok, format!("10 iterations from ground truth, N=256, m=8; {} (< {FIXED_POINT_MAX:.0e})", parts.join("; ")))
}
