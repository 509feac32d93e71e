use proptest::prelude::*;
use uadt_core::numerics::{Rng, Tape, Tensor};
use uadt_core::pose_kit::{render_pose_maps, Keypoint, PoseSequence};

/// Textbook seven-loop convolution with zero padding.
fn naive_conv3d(x: &Tensor, w: &Tensor, b: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let out_len = |a: usize| (xs[a + 1] + 2 * pad[a] - ws[a + 2]) / stride[a] + 1;
    let (to, ho, wo) = (out_len(0), out_len(1), out_len(2));
    Tensor::from_fn(vec![ws[0], to, ho, wo], |o| {
        let mut acc = b.data()[o[0]];
        for ci in 0..ws[1] {
            for kt in 0..ws[2] {
                for kh in 0..ws[3] {
                    for kw in 0..ws[4] {
                        let t = (o[1] * stride[0] + kt) as isize - pad[0] as isize;
                        let h = (o[2] * stride[1] + kh) as isize - pad[1] as isize;
                        let c = (o[3] * stride[2] + kw) as isize - pad[2] as isize;
                        if t < 0 || h < 0 || c < 0 || t >= xs[1] as isize || h >= xs[2] as isize || c >= xs[3] as isize {
                            continue;
                        }
                        acc += w.at(&[o[0], ci, kt, kh, kw]) * x.at(&[ci, t as usize, h as usize, c as usize]);
                    }
                }
            }
        }
        acc
    })
}

fn conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.conv3d(xv, wv, bv, stride, pad).unwrap();
    tape.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv3d_equals_naive_loop_bitwise(
        seed in any::<u64>(),
        c_in in 1usize..3, c_out in 1usize..3,
        t in 1usize..6, h in 1usize..6, w in 1usize..6,
        k in prop::array::uniform3(1usize..4),
        stride in prop::array::uniform3(1usize..3),
        pad in prop::array::uniform3(0usize..2),
    ) {
        let dims = [t, h, w];
        prop_assume!((0..3).all(|a| k[a] <= dims[a] + 2 * pad[a]));
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(vec![c_in, t, h, w]);
        let wt = rng.normal_tensor(vec![c_out, c_in, k[0], k[1], k[2]]);
        let b = rng.normal_tensor(vec![c_out]);
        prop_assert_eq!(conv(&x, &wt, &b, stride, pad), naive_conv3d(&x, &wt, &b, stride, pad));
    }

    #[test]
    fn conv3d_commutes_with_translation(seed in any::<u64>(), shift in prop::array::uniform3(0usize..3)) {
        let mut rng = Rng::new(seed);
        let (t, h, w) = (6, 7, 7);
        let x = rng.normal_tensor(vec![2, t, h, w]);
        let wt = rng.normal_tensor(vec![2, 2, 3, 3, 3]);
        let b = rng.normal_tensor(vec![2]);
        let shifted = Tensor::from_fn(vec![2, t, h, w], |i| {
            let (a, b2, c) = (i[1] + shift[0], i[2] + shift[1], i[3] + shift[2]);
            if a < t && b2 < h && c < w { x.at(&[i[0], a, b2, c]) } else { 0.0 }
        });
        let y = conv(&x, &wt, &b, [1; 3], [0; 3]);
        let ys = conv(&shifted, &wt, &b, [1; 3], [0; 3]);
        let o = y.shape().to_vec();
        for co in 0..2 {
            for a in 0..o[1] - shift[0] {
                for bb in 0..o[2] - shift[1] {
                    for c in 0..o[3] - shift[2] {
                        prop_assert_eq!(ys.at(&[co, a, bb, c]), y.at(&[co, a + shift[0], bb + shift[1], c + shift[2]]));
                    }
                }
            }
        }
    }

    #[test]
    fn pose_maps_shift_with_the_joint(x in 4.0f64..10.0, y in 4.0f64..10.0, dx in 0usize..4, dy in 0usize..4) {
        let seq = |px: f64, py: f64| PoseSequence::new([16, 16], 1, vec![vec![Keypoint::new(px, py, 1.0)]]).unwrap();
        let a = render_pose_maps(&seq(x, y), 1.5).unwrap();
        let b = render_pose_maps(&seq(x + dx as f64, y + dy as f64), 1.5).unwrap();
        for r in 0..16 - dy {
            for c in 0..16 - dx {
                let (va, vb) = (a.at(&[0, 0, r, c]), b.at(&[0, 0, r + dy, c + dx]));
                prop_assert!((va - vb).abs() < 1e-12, "({r},{c}): {va} vs {vb}");
            }
        }
    }

    #[test]
    fn rng_split_streams_are_reproducible(seed in any::<u64>(), i in 0u64..1000) {
        let mut a = Rng::new(seed).split(i);
        let mut b = Rng::new(seed).split(i);
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
        prop_assert_ne!(Rng::new(seed).split(i).next_u64(), Rng::new(seed).split(i + 1).next_u64());
    }
}
