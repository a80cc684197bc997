use alloc::vec;
use alloc::vec::Vec;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i * 7 % 11) as f64 - 5.0) * scale)
}

#[test]
fn matmul_matches_loops() {
    let mut tape = Tape::new();
    let a = ramp(&[3, 4], 0.1);
    let b = ramp(&[4, 2], 0.3);
    let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
            assert!((tape.value(c).data()[i * 2 + j] - s).abs() < 1e-12);
        }
    }
    let loss = tape.sum_all(c).unwrap();
    tape.backward(loss).unwrap();
    // d/da_ik sum_ij = sum_j b_kj
    let ga = tape.grad(va).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let want = b.data()[k * 2] + b.data()[k * 2 + 1];
            assert!((ga.data()[i * 4 + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_same_padding_matches_loops() {
    let x = ramp(&[1, 5, 5, 2], 0.1);
    let w = ramp(&[3, 3, 2, 3], 0.2);
    for stride in [1, 2] {
        let mut tape = Tape::new();
        let (vx, vw) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
        let y = tape.conv2d(vx, vw, stride).unwrap();
        let out = tape.value(y);
        let ho = 5usize.div_ceil(stride);
        assert_eq!(out.shape(), &[1, ho, ho, 3]);
        let (_, pad) = same_padding(5, 3, stride);
        for oy in 0..ho {
            for ox in 0..ho {
                for co in 0..3 {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                continue;
                            }
                            for ci in 0..2 {
                                s += x.get4(0, iy as usize, ix as usize, ci)
                                    * w.data()[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    assert!((out.get4(0, oy, ox, co) - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn depthwise_matches_loops() {
    let x = ramp(&[2, 4, 4, 3], 0.1);
    let w = ramp(&[3, 3, 3], 0.2);
    let mut tape = Tape::new();
    let (vx, vw) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
    let y = tape.depthwise_conv2d(vx, vw, 1).unwrap();
    let out = tape.value(y);
    for n in 0..2 {
        for oy in 0..4 {
            for ox in 0..4 {
                for c in 0..3 {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                s += x.get4(n, iy as usize, ix as usize, c) * w.data()[(ky * 3 + kx) * 3 + c];
                            }
                        }
                    }
                    assert!((out.get4(n, oy, ox, c) - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn softmax_rows_and_shift() {
    let mut tape = Tape::new();
    let x = t(&[2, 3], &[1.0, 2.0, 3.0, 1000.0, 1001.0, 1002.0]);
    let v = tape.leaf(x);
    let s = tape.softmax(v, 1).unwrap();
    let d = tape.value(s).data().to_vec();
    for r in 0..2 {
        let row = &d[r * 3..r * 3 + 3];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|p| p.is_finite()));
    }
    for i in 0..3 {
        assert!((d[i] - d[3 + i]).abs() < 1e-12);
    }
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| libm::exp(*v)).sum();
    assert!((d[0] - libm::exp(1.0) / z).abs() < 1e-12);
}

#[test]
fn channel_broadcast_grad_sums_positions() {
    let mut tape = Tape::new();
    let x = tape.leaf(ramp(&[2, 2, 2, 3], 0.1));
    let b = tape.leaf(t(&[3], &[0.1, 0.2, 0.3]));
    let y = tape.add(x, b).unwrap();
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(b).unwrap().data(), &[8.0, 8.0, 8.0]);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::<f64>::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::<f64>::zeros(&[4, 2]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    assert!(tape.add(a, b).is_err());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::<f64>::zeros(&[2]));
    assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shared_leaf_accumulates() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2], &[1.5, -2.0]));
    let y = tape.mul(a, a).unwrap();
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    let g: Vec<f64> = tape.grad(a).unwrap().data().to_vec();
    assert_eq!(g, vec![3.0, -4.0]);
}

#[test]
fn fault_scales_one_op() {
    let mut tape = Tape::new();
    tape.inject_fault(Some(OpKind::Gelu));
    let a = tape.leaf(t(&[1], &[0.3]));
    let y = tape.scale(a, 2.0);
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[2.0]);
}
