use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmxtrack::ssm::{selective_scan, SelectiveWeights};
use ssmxtrack::xcorr::{cis_inverse, cis_scan, conv_xcorr, ssmx_corr, Direction, ScanLayout, ScanOrder, WindowGrid};
use ssmxtrack::Tensor;

/// Window-by-window reference: interleave, scan each direction separately,
/// pull the search positions back out, sum directions and average overlaps.
fn reference(
    z: &Tensor<f64>,
    x: &Tensor<f64>,
    m: &Tensor<f64>,
    dirs: &[SelectiveWeights<f64>],
    order: ScanOrder,
) -> Tensor<f64> {
    let (c, hx, wx) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (hz, wz) = (z.shape()[1], z.shape()[2]);
    let grid = WindowGrid::new(hx, wx, hz, wz).unwrap();
    let mut acc = vec![0.0; c * hx * wx];
    let mut hits = vec![0usize; hx * wx];
    for &(r0, c0) in &grid.offsets {
        let win = Tensor::from_fn(&[c, hz, wz], |i| {
            let (ch, p) = (i / (hz * wz), i % (hz * wz));
            x.at(&[ch, r0 + p / wz, c0 + p % wz])
        });
        let mut summed = Tensor::zeros(&[c, hz, wz]);
        for (dir, w) in Direction::ALL.into_iter().zip(dirs) {
            let layout = ScanLayout::new(dir, order, hz, wz, m.shape()[0]);
            let seq = cis_scan(z, &win, m, &layout).unwrap();
            let y = selective_scan(&seq, w).unwrap();
            let (_, x_hat, _) = cis_inverse(&y, &layout).unwrap();
            summed = summed.zip_map(&x_hat, |a, b| a + b).unwrap();
        }
        for p in 0..hz * wz {
            let (r, q) = (r0 + p / wz, c0 + p % wz);
            hits[r * wx + q] += 1;
            for ch in 0..c {
                acc[ch * hx * wx + r * wx + q] += summed.at(&[ch, p / wz, p % wz]);
            }
        }
    }
    Tensor::from_fn(&[c, hx, wx], |i| acc[i] / hits[i % (hx * wx)] as f64)
}

#[test]
fn ssmx_corr_matches_windowed_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let shapes = [(4, 4, 2, 2), (8, 8, 4, 4), (6, 8, 4, 4), (4, 6, 4, 2), (3, 3, 3, 3)];
    for (i, &(hx, wx, hz, wz)) in shapes.iter().enumerate() {
        for order in [ScanOrder::Interleaved, ScanOrder::MotionMiddle, ScanOrder::Concat] {
            let c = 2 + i % 2;
            let t = [0, 1, 3][i % 3];
            let dirs: Vec<_> = (0..4).map(|_| SelectiveWeights::init(c, 3, &mut rng)).collect();
            let z = Tensor::randn(&[c, hz, wz], 1.0, &mut rng);
            let x = Tensor::randn(&[c, hx, wx], 1.0, &mut rng);
            let m = Tensor::randn(&[t, c], 1.0, &mut rng);
            let got = ssmx_corr(&z, &x, &m, &dirs, order).unwrap();
            let want = reference(&z, &x, &m, &dirs, order);
            let diff = got.max_abs_diff(&want);
            assert!(diff < 1e-12, "{hx}x{wx}/{hz}x{wz} {order:?} T={t}: {diff:e}");
        }
    }
}

#[test]
fn motion_changes_output_only_through_the_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let dirs: Vec<_> = (0..4).map(|_| SelectiveWeights::<f64>::init(2, 3, &mut rng)).collect();
    let z = Tensor::randn(&[2, 2, 2], 1.0, &mut rng);
    let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
    let m1 = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let m2 = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let a = ssmx_corr(&z, &x, &m1, &dirs, ScanOrder::Interleaved).unwrap();
    let b = ssmx_corr(&z, &x, &m2, &dirs, ScanOrder::Interleaved).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-9);
}

#[test]
fn grid_errors_name_all_sizes() {
    let err = WindowGrid::new(7, 8, 4, 4).unwrap_err().to_string();
    for s in ["H_x=7", "W_x=8", "H_z=4", "W_z=4"] {
        assert!(err.contains(s), "{err}");
    }
}

#[test]
fn conv_xcorr_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let c = rng.random_range(1..4);
        let (hz, wz) = (rng.random_range(1..5), rng.random_range(1..5));
        let (hx, wx) = (hz + rng.random_range(0..6), wz + rng.random_range(0..6));
        let z = Tensor::<f64>::randn(&[c, hz, wz], 1.0, &mut rng);
        let x = Tensor::randn(&[c, hx, wx], 1.0, &mut rng);
        let got = conv_xcorr(&z, &x).unwrap();
        assert_eq!(got.shape(), &[1, hx - hz + 1, wx - wz + 1]);
        for r in 0..=hx - hz {
            for s in 0..=wx - wz {
                let mut acc = 0.0;
                for ch in 0..c {
                    for i in 0..hz {
                        for j in 0..wz {
                            acc += z.at(&[ch, i, j]) * x.at(&[ch, r + i, s + j]);
                        }
                    }
                }
                assert!((got.at(&[0, r, s]) - acc).abs() < 1e-12);
            }
        }
    }
}
