use ssg_core::diffusion::{
    add_noise, ddim_step, dsm_objective, euler_denoised, euler_step, inference_timesteps, initial_noise, run_sampler,
    DsmBatch, NoiseSchedule, SamplerConfig, SamplerKind,
};
use ssg_core::denoiser::Condition;
use ssg_core::metrics::{sliced_wasserstein2, SampleSet};
use ssg_core::{RngStream, TokenTensor};

const T: usize = 2;
const D: usize = 2;

/// Posterior-mean noise for data `N(mu, s²I)` per coordinate.
fn gaussian_eps(x: &TokenTensor, ab: f64, mu: &[f64], s2: f64) -> TokenTensor {
    let (a, sig) = (ab.sqrt(), (1.0 - ab).sqrt());
    let var = ab * s2 + 1.0 - ab;
    let d = x.channels() * x.tokens();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(k, v)| sig * (v - a * mu[k % d]) / var)
        .collect();
    let (b, t, c) = x.shape();
    TokenTensor::new(b, t, c, data).unwrap()
}

/// Posterior-mean noise for an isotropic Gaussian mixture.
fn mixture_eps(x: &TokenTensor, ab: f64, means: &[Vec<f64>], weights: &[f64], s2: f64) -> TokenTensor {
    let (a, sig) = (ab.sqrt(), (1.0 - ab).sqrt());
    let var = ab * s2 + 1.0 - ab;
    let (b, t, c) = x.shape();
    let d = t * c;
    let mut out = Vec::with_capacity(b * d);
    for inst in x.data().chunks(d) {
        let logp: Vec<f64> = means
            .iter()
            .zip(weights)
            .map(|(m, w)| {
                let sq: f64 = inst.iter().zip(m).map(|(v, mk)| (v - a * mk).powi(2)).sum();
                w.ln() - 0.5 * sq / var
            })
            .collect();
        let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let r: Vec<f64> = logp.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = r.iter().sum();
        for k in 0..d {
            let x0: f64 = means
                .iter()
                .zip(&r)
                .map(|(m, rk)| rk / z * (m[k] + a * s2 / var * (inst[k] - a * m[k])))
                .sum();
            out.push((inst[k] - a * x0) / sig);
        }
    }
    TokenTensor::new(b, t, c, out).unwrap()
}

fn to_set(x: &TokenTensor) -> SampleSet {
    SampleSet::new(x.batch(), x.tokens() * x.channels(), x.data().to_vec()).unwrap()
}

fn sample_gaussian(kind: SamplerKind, n: usize) -> f64 {
    let schedule = NoiseSchedule::default();
    let mu = [0.5, -1.0, 0.25, 1.5];
    let s2 = 0.3;
    let sampler = SamplerConfig {
        kind,
        num_inference_steps: 50,
        eta: 0.0,
    };
    let rng = RngStream::new(42, 0);
    let x_init = initial_noise(n, T, D, &rng);
    let out = run_sampler(&schedule, &sampler, x_init, &rng, |x, t, _| {
        Ok(gaussian_eps(x, schedule.alpha_bar[t], &mu, s2))
    })
    .unwrap();
    let mut draw = RngStream::new(7, 0);
    let reference: Vec<f64> = (0..n * 4).map(|k| mu[k % 4] + s2.sqrt() * draw.normal()).collect();
    let reference = SampleSet::new(n, 4, reference).unwrap();
    sliced_wasserstein2(&to_set(&out), &reference, 64, &mut RngStream::new(9, 0)).unwrap()
}

#[test]
fn ddim_reaches_gaussian_target() {
    let sw = sample_gaussian(SamplerKind::Ddim, 4096);
    assert!(sw < 0.05, "sliced W2 {sw}");
}

#[test]
fn euler_reaches_gaussian_target() {
    let sw = sample_gaussian(SamplerKind::EulerDiscrete, 4096);
    assert!(sw < 0.05, "sliced W2 {sw}");
}

#[test]
fn ancestral_sampler_reaches_mixture_target() {
    let schedule = NoiseSchedule::default();
    let means = vec![vec![1.0, 1.0, -1.0, 0.5], vec![-1.0, -0.5, 1.0, -1.0]];
    let weights = [0.3, 0.7];
    let s2 = 0.05;
    let run = |steps: usize| {
        let sampler = SamplerConfig {
            kind: SamplerKind::Ddim,
            num_inference_steps: steps,
            eta: 1.0,
        };
        let rng = RngStream::new(1234, 0);
        let x_init = initial_noise(2048, T, D, &rng);
        run_sampler(&schedule, &sampler, x_init, &rng, |x, t, _| {
            Ok(mixture_eps(x, schedule.alpha_bar[t], &means, &weights, s2))
        })
        .unwrap()
    };
    let mut draw = RngStream::new(77, 0);
    let direct: Vec<f64> = (0..2048)
        .flat_map(|_| {
            let k = usize::from(draw.uniform() >= weights[0]);
            let m = means[k].clone();
            let noise = draw.normals(4);
            (0..4).map(move |j| m[j] + s2.sqrt() * noise[j]).collect::<Vec<_>>()
        })
        .collect();
    let direct = SampleSet::new(2048, 4, direct).unwrap();
    let few = sliced_wasserstein2(&to_set(&run(50)), &direct, 64, &mut RngStream::new(5, 0)).unwrap();
    let many = sliced_wasserstein2(&to_set(&run(1000)), &direct, 64, &mut RngStream::new(5, 0)).unwrap();
    eprintln!("mixture sliced W2: 50 steps {few}, 1000 steps {many}");
    assert!(many < 0.08, "1000 steps: {many}");
    assert!(few < 0.25, "50 steps: {few}");
}

#[test]
fn schedule_invariants() {
    let s = NoiseSchedule::default();
    assert_eq!(s.beta.len(), 1000);
    assert_eq!(s.beta[0], 1e-4);
    assert!((s.beta[999] - 0.02).abs() < 1e-15);
    for t in 0..1000 {
        assert!(s.alpha_bar[t] > 0.0 && s.alpha_bar[t] < 1.0);
        assert!((s.alpha_bar[t] + s.sigma[t] * s.sigma[t] - 1.0).abs() < 1e-14);
        if t > 0 {
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            assert!(s.beta[t] > s.beta[t - 1]);
        }
    }
    assert!(s.alpha_bar[999] < 1e-4);
    assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
}

#[test]
fn timestep_spacing() {
    let ts = inference_timesteps(1000, 50);
    assert_eq!(ts.len(), 50);
    assert_eq!(ts[0], 980);
    assert_eq!(*ts.last().unwrap(), 0);
    assert!(ts.windows(2).all(|w| w[0] > w[1]));
    assert_eq!(inference_timesteps(1000, 1000), (0..1000).rev().collect::<Vec<_>>());
}

#[test]
fn ddim_with_true_noise_tracks_forward_marginal_closely() {
    let s = NoiseSchedule::default();
    let mut rng = RngStream::new(0, 0);
    let x0 = TokenTensor::new(4, T, D, rng.normals(16)).unwrap();
    let eps = TokenTensor::new(4, T, D, rng.normals(16)).unwrap();
    let x_t = add_noise(&x0, 600, &eps, &s).unwrap();
    let x_s = ddim_step(&x_t, &eps, 600, Some(200), &s, 0.0, &mut rng).unwrap();
    let want = add_noise(&x0, 200, &eps, &s).unwrap();
    for (a, b) in x_s.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-13, "{a} vs {b}");
    }
    let clean = ddim_step(&x_t, &eps, 600, None, &s, 0.0, &mut rng).unwrap();
    for (a, b) in clean.data().iter().zip(x0.data()) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn euler_endpoints_are_exact() {
    let mut rng = RngStream::new(2, 0);
    let x = TokenTensor::new(2, T, D, rng.normals(8)).unwrap();
    let e = TokenTensor::new(2, T, D, rng.normals(8)).unwrap();
    assert_eq!(euler_step(&x, &e, 3.0, 0.0).unwrap(), euler_denoised(&x, &e, 3.0).unwrap());
    assert_eq!(euler_step(&x, &e, 3.0, 3.0).unwrap(), x);
    assert!(euler_step(&x, &e, 0.0, 0.0).is_err());
}

fn dsm_batch(b: usize, rng: &mut RngStream, s: &NoiseSchedule) -> DsmBatch {
    let x0 = TokenTensor::new(b, 16, 16, vec![0.25; b * 256]).unwrap();
    ssg_core::diffusion::draw_dsm_batch(s, &x0, &vec![Condition::Class(0); b], 0.1, rng).unwrap()
}

#[test]
fn dsm_objective_oracles() {
    let s = NoiseSchedule::default();
    let mut rng = RngStream::new(8, 0);
    let batch = dsm_batch(512, &mut rng, &s);
    let (loss, grad) = dsm_objective(&batch.eps, &batch, &s).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.data().iter().all(|g| *g == 0.0));
    let zero = TokenTensor::zeros(512, 16, 16);
    let (loss, _) = dsm_objective(&zero, &batch, &s).unwrap();
    assert!((loss / 256.0 - 1.0).abs() < 0.05, "loss {loss}");
}

#[test]
fn dsm_gradient_matches_difference_quotient() {
    let s = NoiseSchedule::default();
    let mut rng = RngStream::new(3, 0);
    let batch = dsm_batch(4, &mut rng, &s);
    let pred = TokenTensor::new(4, 16, 16, rng.normals(4 * 256)).unwrap();
    let (_, grad) = dsm_objective(&pred, &batch, &s).unwrap();
    for k in [0usize, 17, 300, 1023] {
        let h = 1e-6;
        let mut p = pred.clone();
        p.data_mut()[k] += h;
        let up = dsm_objective(&p, &batch, &s).unwrap().0;
        p.data_mut()[k] -= 2.0 * h;
        let down = dsm_objective(&p, &batch, &s).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        assert!((fd - grad.data()[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad.data()[k]);
    }
}
