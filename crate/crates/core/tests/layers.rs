//! Convolution and pooling against direct loop-nest definitions.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxattn::autograd::Tape;
use voxattn::tensor::Tensor;

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, pad: [usize; 3]) -> Tensor {
    let &[n, ci, d, h, wd] = x.shape() else { unreachable!() };
    let &[co, _, kd, kh, kw] = w.shape() else {
        unreachable!()
    };
    let out = [
        d + 2 * pad[0] - kd + 1,
        h + 2 * pad[1] - kh + 1,
        wd + 2 * pad[2] - kw + 1,
    ];
    let xi = |s: usize, c: usize, z: isize, y: isize, q: isize| -> f64 {
        if z < 0 || y < 0 || q < 0 || z >= d as isize || y >= h as isize || q >= wd as isize {
            return 0.0;
        }
        x.data()[(((s * ci + c) * d + z as usize) * h + y as usize) * wd + q as usize]
    };
    let mut data = Vec::new();
    for s in 0..n {
        for o in 0..co {
            for z in 0..out[0] {
                for y in 0..out[1] {
                    for q in 0..out[2] {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for a in 0..kd {
                                for e in 0..kh {
                                    for f in 0..kw {
                                        let wv = w.data()[(((o * ci + c) * kd + a) * kh + e) * kw + f];
                                        acc += wv
                                            * xi(
                                                s,
                                                c,
                                                (z + a) as isize - pad[0] as isize,
                                                (y + e) as isize - pad[1] as isize,
                                                (q + f) as isize - pad[2] as isize,
                                            );
                                    }
                                }
                            }
                        }
                        data.push(acc);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, out[0], out[1], out[2]], data).unwrap()
}

fn naive_pool(x: &Tensor, k: [usize; 3]) -> Tensor {
    let &[n, c, d, h, w] = x.shape() else { unreachable!() };
    let out = [d / k[0], h / k[1], w / k[2]];
    let mut data = Vec::new();
    for s in 0..n * c {
        for z in 0..out[0] {
            for y in 0..out[1] {
                for q in 0..out[2] {
                    let mut best = f64::NEG_INFINITY;
                    for a in 0..k[0] {
                        for e in 0..k[1] {
                            for f in 0..k[2] {
                                let idx = ((s * d + z * k[0] + a) * h + y * k[1] + e) * w + q * k[2] + f;
                                best = best.max(x.data()[idx]);
                            }
                        }
                    }
                    data.push(best);
                }
            }
        }
    }
    Tensor::new(vec![n, c, out[0], out[1], out[2]], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_loop_nest(
        seed in any::<u64>(),
        n in 1usize..3, ci in 1usize..3, co in 1usize..4,
        dims in prop::array::uniform3(1usize..6),
        kernel in prop::array::uniform3(1usize..4),
        pad in prop::array::uniform3(0usize..2),
    ) {
        prop_assume!((0..3).all(|a| dims[a] + 2 * pad[a] >= kernel[a]));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, ci, dims[0], dims[1], dims[2]], 1.0, &mut rng);
        let w = Tensor::randn(&[co, ci, kernel[0], kernel[1], kernel[2]], 1.0, &mut rng);
        let b = Tensor::randn(&[co], 1.0, &mut rng);
        let expected = naive_conv(&x, &w, &b, pad);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let y = tape.conv(xv, wv, bv, pad).unwrap();
        prop_assert_eq!(tape.shape(y), expected.shape());
        prop_assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn pool_matches_loop_nest(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..3,
        k in prop::array::uniform3(1usize..4),
        blocks in prop::array::uniform3(1usize..4),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, c, k[0] * blocks[0], k[1] * blocks[1], k[2] * blocks[2]], 1.0, &mut rng);
        let expected = naive_pool(&x, k);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.max_pool(xv, k).unwrap();
        prop_assert_eq!(tape.value(y), &expected);
    }
}

#[test]
fn pool_gradient_routes_to_the_maximum() {
    let x = Tensor::new(vec![1, 1, 1, 2, 2], vec![0.5, 3.0, -1.0, 2.0]).unwrap();
    let mut store = voxattn::params::ParamStore::default();
    let id = store.add("x", x);
    let mut tape = Tape::new();
    let xv = tape.param(&store, id);
    let y = tape.max_pool(xv, [1, 2, 2]).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(id).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}
