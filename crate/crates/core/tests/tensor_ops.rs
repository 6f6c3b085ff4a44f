use gaclab::tensor::checkpoint::{Checkpoint, INDEX_FILE, WEIGHTS_FILE};
use gaclab::tensor::kernels::{conv2d, l2_normalize, pointwise, Pointwise};
use gaclab::tensor::{grad_check, ParamStore};
use gaclab::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct cross-correlation with explicit zero padding.
fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (ic, ih, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kc, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (ih + 2 * pad - kh) / stride + 1;
    let ow = (iw + 2 * pad - kw) / stride + 1;
    let at = |c: usize, r: isize, s: isize| -> f64 {
        if r < 0 || s < 0 || r as usize >= ih || s as usize >= iw {
            0.0
        } else {
            x.data()[(c * ih + r as usize) * iw + s as usize]
        }
    };
    let mut out = Vec::with_capacity(kc * oh * ow);
    for o in 0..kc {
        for y in 0..oh {
            for z in 0..ow {
                let mut acc = 0.0;
                for c in 0..ic {
                    for a in 0..kh {
                        for b in 0..kw {
                            let r = (y * stride + a) as isize - pad as isize;
                            let s = (z * stride + b) as isize - pad as isize;
                            acc += at(c, r, s) * k.data()[((o * ic + c) * kh + a) * kw + b];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn uniform(shape: &[usize], lim: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-lim..=lim)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_summation(
        seed in any::<u64>(),
        ic in 1usize..4, kc in 1usize..4,
        ih in 1usize..7, iw in 1usize..7,
        kh in 1usize..4, kw in 1usize..4,
        stride in 1usize..3, pad in 0usize..2,
    ) {
        prop_assume!(kh <= ih + 2 * pad && kw <= iw + 2 * pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&[ic, ih, iw], 10.0, &mut rng);
        let k = uniform(&[kc, ic, kh, kw], 10.0, &mut rng);
        let got = conv2d(&x, &k, stride, pad).unwrap();
        let want = naive_conv(&x, &k, stride, pad);
        prop_assert_eq!(got.shape(), &[kc, (ih + 2 * pad - kh) / stride + 1, (iw + 2 * pad - kw) / stride + 1][..]);
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn sigmoid_stays_in_open_unit_interval(x in -30.0f64..30.0) {
        let y = pointwise(&Tensor::scalar(x), Pointwise::Sigmoid).item();
        prop_assert!(y > 0.0 && y < 1.0);
    }

    #[test]
    fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..16)) {
        let t = Tensor::vector(&v);
        prop_assume!(t.norm() > 1e-6);
        let n = l2_normalize(&t).unwrap();
        prop_assert!((n.norm() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn conv_relu_sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let x = store.add("x", uniform(&[3, 4, 4], 1.0, &mut rng));
    let k = store.add("k", uniform(&[2, 3, 3, 3], 1.0, &mut rng));
    let err = grad_check(&mut store, 1e-4, |g| {
        let (x, k) = (g.param(x), g.param(k));
        let y = g.conv2d(x, k, 1, 1)?;
        let y = g.relu(y)?;
        g.sum(y)
    })
    .unwrap();
    assert!(err <= 1e-4, "{err:e}");
}

#[test]
fn linear_scalar_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let x = store.add("x", uniform(&[5], 1.0, &mut rng));
    let w = store.add("w", uniform(&[1, 5], 1.0, &mut rng));
    let b = store.add("b", uniform(&[1], 1.0, &mut rng));
    let err = grad_check(&mut store, 1e-4, |g| {
        let (x, w, b) = (g.param(x), g.param(w), g.param(b));
        let y = g.linear(x, w, Some(b))?;
        g.sum(y)
    })
    .unwrap();
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn degenerate_vector_is_rejected() {
    assert!(matches!(
        l2_normalize(&Tensor::vector(&[0.0, 1e-13])),
        Err(Error::DegenerateVector { .. })
    ));
}

#[test]
fn checkpoint_layout_is_index_plus_little_endian_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut tensors = indexmap::IndexMap::new();
    tensors.insert("b".to_string(), Tensor::vector(&[1.5, -2.0]));
    tensors.insert("a".to_string(), Tensor::new(vec![1, 1], vec![0.25]).unwrap());
    Checkpoint { arch: None, tensors }.save(dir.path()).unwrap();

    let bytes = std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
    let floats: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(floats, vec![1.5, -2.0, 0.25]);

    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap()).unwrap();
    assert_eq!(index["tensors"]["b"]["offset"], 0);
    assert_eq!(index["tensors"]["a"]["offset"], 16);
    assert_eq!(index["tensors"]["a"]["dtype"], "f64");
    assert_eq!(index["tensors"]["a"]["shape"], serde_json::json!([1, 1]));
}
