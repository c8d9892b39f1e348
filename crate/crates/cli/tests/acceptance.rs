//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-8 exercise the library directly. Criteria 9-11 drive the
//! `diffcf` binary over the default synthetic dataset, sharing one dataset
//! and one trained model.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use diffcf::diffusion::sample_chain;
use diffcf::experiment::{Summary, Variant, REPORT_CSV, SUMMARY_JSON};
use diffcf::guidance::{metric_gradient, metric_value};
use diffcf::metrics::{psnr, score, weighted_confusion};
use diffcf::seed::NoiseStream;
use diffcf::tiler::{merge_patches, split_patches};
use diffcf::{
    forward_sample, guided_reverse_step, reverse_step, ConfusionW, ConvNet, Denoiser, GuidanceMetric, HeatMap,
    ImageTensor, LayerDesc, Mask, NoiseSchedule, Shape,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn schedule_exactness() -> Outcome {
    let s = NoiseSchedule::linear(3, 0.1, 0.1).map_err(|e| e.to_string())?;
    let expect = [0.9, 0.81, 0.729];
    let got: Vec<f64> = (1..=3).map(|t| s.alpha_bar(t).unwrap()).collect();
    let worst = got.iter().zip(expect).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let half = NoiseSchedule::linear(1, 0.5, 0.5).map_err(|e| e.to_string())?;
    assert_eq!(half.alpha_bar(1).unwrap(), 0.5);
    let g = half.guidance_scale(1, 1.0).unwrap();
    check(
        worst <= 1e-12 && g == 1.0,
        format!("alpha_bar {got:?} (max err {worst:.1e}), guidance scale {g}"),
    )
}

fn forward_marginal() -> Outcome {
    let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
    let t = 2;
    assert!((s.alpha_bar(t).unwrap() - 0.81).abs() < 1e-12);
    let shape = Shape::new(2, 2, 1);
    let x0 = ImageTensor::new(shape, vec![0.5f64, -0.25, 1.0, 0.0]).unwrap();
    let n = 100_000;
    let mut rng = NoiseStream::new(2);
    let (mut sum, mut sum2) = ([0.0f64; 4], [0.0f64; 4]);
    for _ in 0..n {
        let eps = rng.normal_image::<f64>(shape);
        let xt = forward_sample(&x0, t, &eps, &s).unwrap();
        for (i, v) in xt.data().iter().enumerate() {
            sum[i] += v;
            sum2[i] += v * v;
        }
    }
    let nf = n as f64;
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for i in 0..4 {
        let mean = sum[i] / nf;
        let var = (sum2[i] - nf * mean * mean) / (nf - 1.0);
        worst_mean = worst_mean.max((mean - 0.9 * x0.data()[i]).abs() / (0.19 / nf).sqrt());
        worst_var = worst_var.max((var - 0.19).abs() / (0.19 * (2.0 / (nf - 1.0)).sqrt()));
    }
    check(
        worst_mean < 3.0 && worst_var < 3.0,
        format!("worst deviation {worst_mean:.2} SE (mean), {worst_var:.2} SE (variance)"),
    )
}

/// Exact mean and variance of the ancestral chain for one Gaussian
/// dimension: with the exact eps the step is affine in `x_t`.
fn chain_moments(s: &NoiseSchedule, m: f64, v: f64) -> (f64, f64) {
    let (mut mean, mut var) = (0.0, 1.0);
    for t in (1..=s.steps()).rev() {
        let (ab, beta) = (s.alpha_bar(t).unwrap(), s.beta(t).unwrap());
        let gain = ab.sqrt() * v / (ab * v + 1.0 - ab);
        // eps_hat = p x + q
        let p = (1.0 - ab.sqrt() * gain) / (1.0 - ab).sqrt();
        let q = -ab.sqrt() * m * (1.0 - gain * ab.sqrt()) / (1.0 - ab).sqrt();
        let k = beta / (1.0 - ab).sqrt();
        let c = (1.0 - k * p) / (1.0 - beta).sqrt();
        let d = -k * q / (1.0 - beta).sqrt();
        mean = c * mean + d;
        var = c * c * var + s.sigma(t).unwrap().powi(2);
    }
    (mean, var)
}

fn oracle_sampling() -> Outcome {
    // Ancestral sampling with the posterior sigma underestimates the target
    // variance by ~4-6% at T=100 for any linear schedule; this setting keeps
    // that bias and the prior mismatch of the mean small.
    let s = NoiseSchedule::linear(100, 1e-4, 0.04).unwrap();
    let shape = Shape::new(8, 1, 1);
    let m: Vec<f64> = (0..8).map(|i| -0.1 + 0.2 * i as f64 / 7.0).collect();
    let v: Vec<f64> = (0..8).map(|i| 0.4 + 0.4 * i as f64 / 7.0).collect();
    let den = Denoiser::analytic_gaussian(
        ImageTensor::new(shape, m.clone()).unwrap(),
        ImageTensor::new(shape, v.clone()).unwrap(),
    )
    .unwrap();
    let runs = 5000;
    let mut rng = NoiseStream::new(3);
    let (mut sum, mut sum2) = (vec![0.0f64; 8], vec![0.0f64; 8]);
    for _ in 0..runs {
        let x = sample_chain(&den, &s, shape, &mut rng).unwrap();
        for (i, a) in x.data().iter().enumerate() {
            sum[i] += a;
            sum2[i] += a * a;
        }
    }
    let nf = runs as f64;
    let (mut worst_mean, mut worst_var, mut worst_se) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..8 {
        let mean = sum[i] / nf;
        let var = (sum2[i] - nf * mean * mean) / (nf - 1.0);
        worst_mean = worst_mean.max((mean - m[i]).abs());
        worst_var = worst_var.max((var / v[i] - 1.0).abs());
        let (em, ev) = chain_moments(&s, m[i], v[i]);
        let se_mean = (mean - em).abs() / (ev / nf).sqrt();
        let se_var = (var - ev).abs() / (ev * (2.0 / (nf - 1.0)).sqrt());
        worst_se = worst_se.max(se_mean).max(se_var);
    }
    check(
        worst_mean <= 0.05 && worst_var <= 0.1 && worst_se < 4.0,
        format!(
            "max |mean - m| {worst_mean:.4}, max relative variance error {worst_var:.4}, \
             {worst_se:.2} SE from the exact chain moments"
        ),
    )
}

fn guidance_degeneracy() -> Outcome {
    let s = NoiseSchedule::default_linear();
    let mut rng = NoiseStream::new(4);
    let metrics = [GuidanceMetric::default(), GuidanceMetric::Mse];
    for case in 0..100 {
        let shape = Shape::new(rng.below(11, 24), rng.below(11, 24), 1 + 2 * (case % 2));
        let mean = rng.normal_image::<f32>(shape).map(|a| 0.3 * a);
        let var = ImageTensor::from_fn(shape, |_, _, _| (0.05 + rng.uniform() * 0.5) as f32);
        let den = Denoiser::analytic_gaussian(mean, var).unwrap();
        let t = rng.below(1, 1001);
        let x_t = rng.normal_image::<f32>(shape);
        let x_in = rng.normal_image::<f32>(shape).map(|a| a.clamp(-1.0, 1.0));
        let noise = rng.normal_image::<f32>(shape);
        let plain = reverse_step(&x_t, t, &den, &s, &noise).unwrap();
        let guided = guided_reverse_step(&x_t, t, &x_in, &den, &s, &metrics[case % 2], 0.0, &noise).unwrap();
        if plain.data().iter().zip(guided.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("case {case} (t={t}) differs"));
        }
    }
    Ok("100 cases bit-identical".into())
}

const FD_STEP: f64 = 1e-3;

fn metric_fd_error(metric: &GuidanceMetric, x: &ImageTensor<f64>, y: &ImageTensor<f64>) -> f64 {
    let g = metric_gradient(metric, x, y).unwrap();
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let fd = (metric_value(metric, &plus, y).unwrap() - metric_value(metric, &minus, y).unwrap()) / (2.0 * FD_STEP);
        worst = worst.max((g.data()[i] - fd).abs());
        scale = scale.max(fd.abs());
    }
    worst / scale
}

fn convnet_fd_error() -> (usize, f64) {
    let layers = vec![
        LayerDesc {
            in_channels: 2,
            out_channels: 4,
        },
        LayerDesc {
            in_channels: 4,
            out_channels: 1,
        },
    ];
    let mut net = ConvNet::<f64>::new(layers, 100, 8).unwrap();
    let mut rng = NoiseStream::new(9);
    let shape = Shape::new(7, 6, 1);
    let xs: Vec<ImageTensor<f64>> = (0..2).map(|_| rng.normal_image(shape)).collect();
    let eps: Vec<ImageTensor<f64>> = (0..2).map(|_| rng.normal_image(shape)).collect();
    let batch = vec![(&xs[0], 12, &eps[0]), (&xs[1], 77, &eps[1])];
    let (_, grad) = net.loss_and_gradient(&batch).unwrap();
    let h = 1e-6;
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for i in 0..net.param_count() {
        let w = net.params()[i];
        net.params_mut()[i] = w + h;
        let plus = net.loss_and_gradient(&batch).unwrap().0;
        net.params_mut()[i] = w - h;
        let minus = net.loss_and_gradient(&batch).unwrap().0;
        net.params_mut()[i] = w;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max((grad[i] - fd).abs());
        scale = scale.max(fd.abs());
    }
    (net.param_count(), worst / scale)
}

fn gradient_fidelity() -> Outcome {
    let mut rng = NoiseStream::new(5);
    let metrics = [GuidanceMetric::default(), GuidanceMetric::Mse];
    let mut worst = [0.0f64; 2];
    for _ in 0..20 {
        let shape = Shape::new(16, 16, 3);
        let x = ImageTensor::from_fn(shape, |_, _, _| rng.uniform() * 2.0 - 1.0);
        let j = ImageTensor::from_fn(shape, |_, _, _| rng.uniform() * 2.0 - 1.0);
        let y = x.zip_map(&j, |a, b| 0.6 * a + 0.3 * b).unwrap();
        for (k, m) in metrics.iter().enumerate() {
            worst[k] = worst[k].max(metric_fd_error(m, &x, &y));
        }
    }
    let (params, net_err) = convnet_fd_error();
    check(
        worst[0] < 1e-3 && worst[1] < 1e-3 && params <= 200 && net_err < 1e-4,
        format!(
            "ssim {:.1e}, mse {:.1e}, convnet ({params} params) {net_err:.1e}",
            worst[0], worst[1]
        ),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = NoiseStream::new(6);
    for _ in 0..50 {
        let (h, w) = (rng.below(1, 30), rng.below(1, 30));
        let m: Vec<u8> = (0..h * w).map(|_| (rng.uniform() < 0.3) as u8).collect();
        let hv: Vec<u8> = (0..h * w).map(|_| (rng.uniform() < 0.5) as u8).collect();
        let heat = HeatMap::new(h, w, hv.iter().map(|&v| v as f64).collect()).unwrap();
        let c = weighted_confusion(&heat, &Mask::new(h, w, m.clone()).unwrap()).unwrap();
        let count = |a: u8, b: u8| hv.iter().zip(&m).filter(|&(&x, &y)| x == a && y == b).count() as f64;
        if (c.tp, c.fp, c.fn_, c.tn) != (count(1, 1), count(1, 0), count(0, 1), count(0, 0)) {
            return Err(format!("binary counts differ: {c:?}"));
        }
    }
    let c = ConfusionW {
        tp: 1.5,
        fn_: 0.5,
        fp: 0.0,
        tn: 2.0,
    };
    let s = score(&c);
    let w = score(&c.swapped());
    let worked = (s.iou - 0.75).abs() <= 1e-6 && (s.f1 - 0.857143).abs() <= 1e-6 && (s.mcc - 0.774597).abs() <= 1e-6;
    let swap = (s.iou - w.iou).abs() <= 1e-12 && (s.f1 - w.f1).abs() <= 1e-12 && (s.mcc - w.mcc).abs() <= 1e-12;
    check(
        worked && swap,
        format!("worked case iou {:.6} f1 {:.6} mcc {:.6}; swap {swap}", s.iou, s.f1, s.mcc),
    )
}

fn psnr_cap() -> Outcome {
    let mut rng = NoiseStream::new(7);
    let x = ImageTensor::from_fn(Shape::new(9, 13, 3), |_, _, _| rng.uniform() * 0.8);
    let same = psnr(&x, &x, 1.0).unwrap();
    let mut worst = 0.0f64;
    for c in [0.01, 0.05, 0.1, 0.2] {
        let y = x.map(|v| v + c);
        let expect = 10.0 * (1.0 / (c * c)).log10();
        worst = worst.max((psnr(&x, &y, 1.0).unwrap() - expect).abs());
    }
    check(
        same == 80.0 && worst <= 1e-9,
        format!("psnr(x, x) = {same}, offset max error {worst:.1e}"),
    )
}

fn tiler_round_trip() -> Outcome {
    let mut rng = NoiseStream::new(8);
    for case in 0..200 {
        let shape = Shape::new(rng.below(1, 601), rng.below(1, 601), 3);
        let img = rng.normal_image::<f32>(shape);
        let (patches, layout) = split_patches(&img, 256).map_err(|e| e.to_string())?;
        if merge_patches(&patches, &layout).map_err(|e| e.to_string())? != img {
            return Err(format!("case {case} ({}x{}) not restored", shape.height, shape.width));
        }
    }
    Ok("200 sizes restored bit-exactly".into())
}

/// Shared state of the end-to-end criteria.
struct Fixture {
    root: tempfile::TempDir,
}

impl Fixture {
    fn dataset(&self) -> PathBuf {
        self.root.path().join("data")
    }

    fn model(&self) -> PathBuf {
        self.root.path().join("model.cfdn")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }
}

fn diffcf(args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_diffcf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("diffcf {} failed: {status}", args.join(" ")))
    }
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn build_fixture() -> Result<Fixture, String> {
    let fx = Fixture {
        root: tempfile::tempdir().map_err(|e| e.to_string())?,
    };
    diffcf(&["gen", "--out", path(&fx.dataset()), "--seed", "0"])?;
    let started = Instant::now();
    diffcf(&[
        "train",
        "--dataset",
        path(&fx.dataset()),
        "--out",
        path(&fx.model()),
        "--iterations",
        "1000",
        "--t-max",
        "200",
    ])?;
    println!("fixture: dataset and model ready ({:.0?} training)", started.elapsed());
    Ok(fx)
}

fn eval(fx: &Fixture, out: &str, jobs: usize) -> Result<(), String> {
    let jobs = jobs.to_string();
    diffcf(&[
        "eval",
        "--dataset",
        path(&fx.dataset()),
        "--model",
        path(&fx.model()),
        "--out",
        path(&fx.out(out)),
        "--jobs",
        &jobs,
    ])
}

fn summary(dir: &Path) -> Result<Summary, String> {
    let p = dir.join(SUMMARY_JSON);
    let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn counter_forensic_effect(fx: &Fixture) -> Outcome {
    let started = Instant::now();
    eval(fx, "eval_1", 1)?;
    let s = summary(&fx.out("eval_1"))?;
    let cf = &s.variants[&Variant::DiffCf];
    let before = cf.mcc.before["grid"];
    let after = cf.mcc.after["grid"];
    check(
        s.images == 20 && before >= 0.4 && after <= 0.5 * before && cf.psnr >= 25.0 && cf.ssim >= 0.7,
        format!(
            "grid mcc {before:.3} -> {after:.3}, psnr {:.2} dB, ssim {:.3}, {} images in {:.0?}",
            cf.psnr,
            cf.ssim,
            s.images,
            started.elapsed()
        ),
    )
}

/// Spearman correlation with average ranks for ties.
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn sweep(fx: &Fixture, out: &str, param: &str, values: &str) -> Result<(), String> {
    diffcf(&[
        "sweep",
        "--dataset",
        path(&fx.dataset()),
        "--model",
        path(&fx.model()),
        "--out",
        path(&fx.out(out)),
        "--param",
        param,
        "--values",
        values,
    ])
}

fn trade_off_trend(fx: &Fixture) -> Outcome {
    let t_values = [10.0, 20.0, 40.0, 80.0, 160.0];
    sweep(fx, "sweep_t", "t_star", "10,20,40,80,160")?;
    let (mut mcc, mut psnrs) = (Vec::new(), Vec::new());
    for t in t_values {
        let s = summary(&fx.out("sweep_t").join(format!("t_star_{t}")))?;
        let cf = &s.variants[&Variant::DiffCf];
        mcc.push(cf.mcc.after.values().sum::<f64>() / cf.mcc.after.len() as f64);
        psnrs.push(cf.psnr);
    }
    let rho = spearman(&t_values, &mcc);
    let decreasing = psnrs.windows(2).all(|w| w[1] < w[0]);

    sweep(fx, "sweep_s", "scale", "0,100,10000,1000000")?;
    let guided = summary(&fx.out("sweep_s").join("scale_1000000"))?.variants[&Variant::DiffCfg].psnr;
    let unguided = psnrs[2];
    check(
        rho <= -0.8 && decreasing && guided >= unguided,
        format!(
            "mean mcc {mcc:.4?} (spearman {rho:.3}), psnr {psnrs:.2?}; at t*=40 diff-cfg(1e6) {guided:.2} dB vs diff-cf {unguided:.2} dB"
        ),
    )
}

fn determinism(fx: &Fixture) -> Outcome {
    eval(fx, "eval_3", 3)?;
    let read = |d: &str| std::fs::read(fx.out(d).join(REPORT_CSV)).map_err(|e| e.to_string());
    let (a, b) = (read("eval_1")?, read("eval_3")?);
    check(
        !a.is_empty() && a == b,
        format!("report.csv with --jobs 1 and --jobs 3: {} vs {} bytes, identical: {}", a.len(), b.len(), a == b),
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {n:>2} {name}: {detail} [{:.1?}]", started.elapsed());
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= run(1, "schedule exactness", schedule_exactness);
    ok &= run(2, "forward marginal", forward_marginal);
    ok &= run(3, "exact-oracle sampling", oracle_sampling);
    ok &= run(4, "guidance degeneracy", guidance_degeneracy);
    ok &= run(5, "gradient fidelity", gradient_fidelity);
    ok &= run(6, "metric oracle", metric_oracle);
    ok &= run(7, "psnr cap", psnr_cap);
    ok &= run(8, "tiler round trip", tiler_round_trip);
    match build_fixture() {
        Ok(fx) => {
            ok &= run(9, "counter-forensic effect", || counter_forensic_effect(&fx));
            ok &= run(11, "determinism across --jobs", || determinism(&fx));
            ok &= run(10, "trade-off trend", || trade_off_trend(&fx));
        }
        Err(e) => {
            for (n, name) in [(9, "counter-forensic effect"), (10, "trade-off trend"), (11, "determinism across --jobs")] {
                println!("FAIL criterion {n:>2} {name}: fixture failed: {e}");
            }
            ok = false;
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
