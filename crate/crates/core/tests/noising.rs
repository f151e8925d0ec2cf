use kanrecon_core::diffusion::{make_schedule, q_sample};
use kanrecon_core::kspace::{fft2, ImageGrid};
use kanrecon_core::mcmodel::{build_condition, noise_condition};
use kanrecon_core::rng::SplitMix64;
use kanrecon_core::tensor::Tensor;

#[test]
fn forward_noise_variance() {
    let sched = make_schedule(50, 1e-4, 0.02).unwrap();
    let mut rng = SplitMix64::new(1);
    let x0 = Tensor::randn(vec![1, 2, 2], 1.0, &mut rng);
    for t in [0, 10, 49] {
        let draws = 10_000;
        let mut sum = vec![0.0; 4];
        let mut sq = vec![0.0; 4];
        for _ in 0..draws {
            let eps = Tensor::randn(vec![1, 2, 2], 1.0, &mut rng);
            let xt = q_sample(&x0, t, &eps, &sched).unwrap();
            for (i, v) in xt.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let want = 1.0 - sched.alpha_bar(t).unwrap();
        for i in 0..4 {
            let mean = sum[i] / draws as f64;
            let var = sq[i] / draws as f64 - mean * mean;
            assert!((var / want - 1.0).abs() <= 0.05, "t={t}: {var} vs {want}");
        }
    }
}

#[test]
fn noised_condition_is_centered_on_scaled_input() {
    let sched = make_schedule(50, 1e-4, 0.02).unwrap();
    let mut rng = SplitMix64::new(2);
    let img = ImageGrid::new(8, 8, (0..64).map(|_| rng.next_f64()).collect()).unwrap();
    let c = build_condition(&fft2(&img).unwrap(), &img).unwrap();
    let t = 30;
    let a = sched.alpha_bar(t).unwrap().sqrt();
    let draws = 2000;
    let mut mean = vec![0.0; 128];
    for s in 0..draws {
        let n = noise_condition(&c, t, &sched, s).unwrap();
        mean.iter_mut().zip(n.data()).for_each(|(m, v)| *m += v / draws as f64);
    }
    let sd = (1.0 - sched.alpha_bar(t).unwrap()).sqrt() / (draws as f64).sqrt();
    for (m, x) in mean.iter().zip(c.x_tilde.data()) {
        assert!((m - a * x).abs() <= 5.0 * sd);
    }
}
