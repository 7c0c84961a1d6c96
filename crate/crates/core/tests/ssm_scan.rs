use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmxtrack::ssm::{
    discretize, kernel_apply, lti_kernel, recurrent_scan, selective_scan, SelectiveParams, SelectiveWeights,
    StateMatrix,
};
use ssmxtrack::Tensor;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Straight-line selective scan, one timestep at a time.
fn naive_selective(x: &Tensor<f64>, w: &SelectiveWeights<f64>) -> Vec<f64> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let n = w.a_log.shape()[1];
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let xt = &x.data()[t * d..(t + 1) * d];
        let b: Vec<f64> = (0..n).map(|s| (0..d).map(|k| xt[k] * w.w_b.at(&[k, s])).sum()).collect();
        let c: Vec<f64> = (0..n).map(|s| (0..d).map(|k| xt[k] * w.w_c.at(&[k, s])).sum()).collect();
        for ch in 0..d {
            let pre: f64 = w.delta_bias.data()[ch] + (0..d).map(|k| xt[k] * w.w_delta.at(&[k, ch])).sum::<f64>();
            let dt = softplus(pre);
            let mut acc = 0.0;
            for s in 0..n {
                let a = -w.a_log.at(&[ch, s]).exp();
                let a_bar = (dt * a).exp();
                let b_bar = (a_bar - 1.0) / a * b[s];
                h[ch * n + s] = a_bar * h[ch * n + s] + b_bar * xt[ch];
                acc += c[s] * h[ch * n + s];
            }
            y[t * d + ch] = acc;
        }
    }
    y
}

#[test]
fn selective_scan_matches_step_by_step_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let d = rng.random_range(1..5);
        let n = rng.random_range(1..7);
        let l = rng.random_range(1..30);
        let w = SelectiveWeights::<f64>::init(d, n, &mut rng);
        let x = Tensor::randn(&[l, d], 1.0, &mut rng);
        let fast = selective_scan(&x, &w).unwrap();
        let slow = naive_selective(&x, &w);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn lti_recurrence_equals_closed_form_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let n = rng.random_range(1..=16);
        let l = rng.random_range(1..=64);
        let a_diag: Vec<f64> = (0..n).map(|_| -rng.random_range(0.05..4.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dt = rng.random_range(0.01..0.5);
        let a = StateMatrix::from_diagonal(&Tensor::new(&[1, n], a_diag.clone()).unwrap()).unwrap();
        let params = SelectiveParams::constant(&b, &c, &[dt], l).unwrap();
        let sys = discretize(&a, &params).unwrap();
        let u = Tensor::randn(&[l, 1], 1.0, &mut rng);
        let y = recurrent_scan(&sys, &params, &u, None).unwrap();
        // K_j = Σ_n C_n exp(jΔa_n) (exp(Δa_n) − 1)/a_n B_n, applied as a causal convolution.
        let kernel: Vec<f64> = (0..l)
            .map(|j| {
                (0..n)
                    .map(|s| {
                        let ad = dt * a_diag[s];
                        c[s] * (j as f64 * ad).exp() * (ad.exp() - 1.0) / a_diag[s] * b[s]
                    })
                    .sum()
            })
            .collect();
        for k in 0..l {
            let expect: f64 = (0..=k).map(|j| kernel[j] * u.data()[k - j]).sum();
            assert!((y.data()[k] - expect).abs() < 1e-9, "step {k}: {} vs {expect}", y.data()[k]);
        }
        let lib_kernel = lti_kernel(&sys, &params, l).unwrap();
        for j in 0..l {
            assert!((lib_kernel.data()[j] - kernel[j]).abs() < 1e-12);
        }
        let yk = kernel_apply(&lib_kernel, &u).unwrap();
        assert!(yk.max_abs_diff(&y) < 1e-9);
    }
}

#[test]
fn zoh_matches_closed_form() {
    let a = StateMatrix::from_diagonal(&Tensor::new(&[1, 2], vec![-1.0, -0.5]).unwrap()).unwrap();
    let params = SelectiveParams::constant(&[1.0, 2.0], &[1.0, 1.0], &[0.1], 1).unwrap();
    let sys = discretize(&a, &params).unwrap();
    let expect_a = [(-0.1f64).exp(), (-0.05f64).exp()];
    let expect_b = [(1.0 - (-0.1f64).exp()) / 1.0, 2.0 * (1.0 - (-0.05f64).exp()) / 0.5];
    for s in 0..2 {
        assert!((sys.a_bar.data()[s] - expect_a[s]).abs() < 1e-15);
        assert!((sys.b_bar.data()[s] - expect_b[s]).abs() < 1e-15);
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = SelectiveWeights::<f64>::init(3, 4, &mut rng);
    let y = selective_scan(&Tensor::zeros(&[10, 3]), &w).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn f32_scan_tracks_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = SelectiveWeights::<f64>::init(3, 4, &mut rng);
    let x = Tensor::randn(&[16, 3], 1.0, &mut rng);
    let y64 = selective_scan(&x, &w).unwrap();
    let w32 = SelectiveWeights {
        w_b: w.w_b.cast::<f32>(),
        w_c: w.w_c.cast(),
        w_delta: w.w_delta.cast(),
        delta_bias: w.delta_bias.cast(),
        a_log: w.a_log.cast(),
    };
    let y32 = selective_scan(&x.cast::<f32>(), &w32).unwrap();
    assert!(y32.cast::<f64>().max_abs_diff(&y64) < 1e-4);
}
