use diffcf::denoiser::analytic_gaussian_posterior_mean;
use diffcf::image::{ImageTensor, Shape};
use diffcf::seed::NoiseStream;
use diffcf::{forward_sample, purify, Denoiser, NoiseSchedule, PurifyConfig};

#[test]
fn posterior_mean_satisfies_orthogonality() {
    // For the true conditional mean, the error x0 - E[x0|x_t] has zero mean
    // and is uncorrelated with x_t.
    let schedule = NoiseSchedule::default_linear();
    let shape = Shape::new(1, 1, 1);
    let (m, v) = (0.3f64, 0.5f64);
    let mean = ImageTensor::filled(shape, m);
    let var = ImageTensor::filled(shape, v);
    let mut rng = NoiseStream::new(21);
    for t in [10, 200, 700] {
        let n = 1_000_000;
        let (mut s_err, mut s_err2, mut s_cross, mut s_cross2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x0 = ImageTensor::filled(shape, m + v.sqrt() * rng.normal());
            let eps = ImageTensor::filled(shape, rng.normal());
            let xt = forward_sample(&x0, t, &eps, &schedule).unwrap();
            let post = analytic_gaussian_posterior_mean(&mean, &var, &xt, t, &schedule).unwrap();
            let err = x0.data()[0] - post.data()[0];
            let cross = err * xt.data()[0];
            s_err += err;
            s_err2 += err * err;
            s_cross += cross;
            s_cross2 += cross * cross;
        }
        let nf = n as f64;
        let se = |s: f64, s2: f64| ((s2 / nf - (s / nf).powi(2)) / nf).sqrt();
        assert!((s_err / nf).abs() < 3.0 * se(s_err, s_err2), "t={t}: mean error {}", s_err / nf);
        assert!((s_cross / nf).abs() < 3.0 * se(s_cross, s_cross2), "t={t}: correlation {}", s_cross / nf);
    }
}

fn oracle_for(x: &ImageTensor<f64>) -> Denoiser<f64> {
    let m = x.mean();
    let v = x.data().iter().map(|&a| (a - m).powi(2)).sum::<f64>() / x.len() as f64;
    Denoiser::analytic_gaussian(ImageTensor::filled(x.shape(), m), ImageTensor::filled(x.shape(), v)).unwrap()
}

#[test]
fn deviation_grows_with_t_star() {
    let schedule = NoiseSchedule::default_linear();
    let mut rng = NoiseStream::new(22);
    let images: Vec<ImageTensor<f64>> = (0..8)
        .map(|_| {
            let n = rng.normal_image::<f64>(Shape::new(16, 16, 3));
            n.map(|v| (0.4 * v).clamp(-1.0, 1.0))
        })
        .collect();
    let mut last = 0.0;
    for t_star in [0, 5, 20, 80, 300] {
        let mut total = 0.0;
        for (i, x) in images.iter().enumerate() {
            let cfg = PurifyConfig {
                t_star,
                seed: i as u64,
                ..PurifyConfig::default()
            };
            let out = purify(x, &oracle_for(x), &schedule, &cfg).unwrap();
            total += out.mean_abs_diff(x).unwrap();
        }
        let mean = total / images.len() as f64;
        if t_star == 0 {
            assert_eq!(mean, 0.0);
        }
        assert!(mean >= last, "t*={t_star}: {mean} < {last}");
        last = mean;
    }
}

#[test]
fn purify_is_a_function_of_its_inputs() {
    let schedule = NoiseSchedule::default_linear();
    let x = NoiseStream::new(3).normal_image::<f64>(Shape::new(8, 8, 1)).map(|v| v.clamp(-1.0, 1.0));
    let den = oracle_for(&x);
    let cfg = PurifyConfig {
        t_star: 30,
        seed: 9,
        ..PurifyConfig::default()
    };
    let a = purify(&x, &den, &schedule, &cfg).unwrap();
    assert_eq!(purify(&x, &den, &schedule, &cfg).unwrap(), a);
    let other = PurifyConfig { seed: 10, ..cfg };
    assert_ne!(purify(&x, &den, &schedule, &other).unwrap(), a);
}
