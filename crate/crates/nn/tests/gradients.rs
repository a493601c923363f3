use eclf_nn::gradcheck::{CrossEntropyLoss, HalfSumSquares};
use eclf_nn::{grad_check, ConvSpec, LayerSpec, Real, Sequential, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-1.0..1.0)))
}

fn layer_cases() -> Vec<(&'static str, Vec<LayerSpec>, Vec<usize>)> {
    vec![
        ("dense", vec![LayerSpec::Dense { inputs: 6, outputs: 4 }], vec![3, 6]),
        ("conv", vec![LayerSpec::Conv(ConvSpec::new(2, 3, 3, 1, 1))], vec![2, 2, 5, 5]),
        ("strided conv", vec![LayerSpec::Conv(ConvSpec::new(2, 3, 4, 2, 1))], vec![2, 2, 8, 8]),
        ("conv-transpose", vec![LayerSpec::ConvTranspose(ConvSpec::new(3, 2, 4, 2, 1))], vec![2, 3, 4, 4]),
        (
            "dense+relu",
            vec![
                LayerSpec::Dense { inputs: 5, outputs: 7 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 7, outputs: 3 },
            ],
            vec![4, 5],
        ),
        (
            "dense+sigmoid",
            vec![LayerSpec::Dense { inputs: 5, outputs: 3 }, LayerSpec::Sigmoid],
            vec![4, 5],
        ),
    ]
}

#[test]
fn every_layer_kind_passes_fp64_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, specs, shape) in layer_cases() {
        let net = Sequential::<f64>::init(&specs, &mut rng).unwrap();
        let x = random_input::<f64>(&shape, &mut rng);
        let rep = grad_check(&net, &HalfSumSquares, &x, 40, 1e-6, &mut rng).unwrap();
        assert!(rep.max_relative_error < 1e-5, "{name}: {:?}", rep.worst());
    }
}

#[test]
fn every_layer_kind_passes_fp32_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (name, specs, shape) in layer_cases() {
        let net = Sequential::<f32>::init(&specs, &mut rng).unwrap();
        let x = random_input::<f32>(&shape, &mut rng);
        let rep = grad_check(&net, &HalfSumSquares, &x, 40, 1e-3, &mut rng).unwrap();
        assert!(rep.max_relative_error < 1e-3, "{name}: {:?}", rep.worst());
    }
}

#[test]
fn conv3x3_matches_central_differences_at_1e_4() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Sequential::<f64>::init(&[LayerSpec::Conv(ConvSpec::new(3, 4, 3, 1, 1))], &mut rng).unwrap();
    let x = random_input::<f64>(&[2, 3, 6, 6], &mut rng);
    let rep = grad_check(&net, &HalfSumSquares, &x, 200, 1e-4, &mut rng).unwrap();
    assert!(rep.max_relative_error < 1e-6, "{:?}", rep.worst());
}

#[test]
fn two_conv_layer_network_fp32() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let specs = [
        LayerSpec::Conv(ConvSpec::new(3, 4, 3, 2, 1)),
        LayerSpec::Relu,
        LayerSpec::Conv(ConvSpec::new(4, 2, 3, 1, 1)),
    ];
    let net = Sequential::<f32>::init(&specs, &mut rng).unwrap();
    let x = random_input::<f32>(&[2, 3, 8, 8], &mut rng);
    let rep = grad_check(&net, &HalfSumSquares, &x, 60, 1e-3, &mut rng).unwrap();
    assert!(rep.max_relative_error < 1e-3, "{:?}", rep.worst());
}

#[test]
fn classifier_cross_entropy_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = Sequential::<f64>::mlp(&[4, 6, 3], &mut rng).unwrap();
    let x = random_input::<f64>(&[5, 4], &mut rng);
    let rep = grad_check(&net, &CrossEntropyLoss(vec![0, 2, 1, 1, 0]), &x, 30, 1e-6, &mut rng).unwrap();
    assert!(rep.max_relative_error < 1e-5, "{:?}", rep.worst());
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let specs = [
        LayerSpec::Conv(ConvSpec::new(3, 8, 4, 2, 1)),
        LayerSpec::Relu,
        LayerSpec::ConvTranspose(ConvSpec::new(8, 3, 4, 2, 1)),
        LayerSpec::Sigmoid,
    ];
    let net = Sequential::<f32>::init(&specs, &mut rng).unwrap();
    let x = random_input::<f32>(&[3, 3, 16, 16], &mut rng);
    let a = net.forward(&x).unwrap();
    let b = net.clone().forward(&x).unwrap();
    assert_eq!(a.shape(), &[3, 3, 16, 16]);
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Stride-1 "same" convolution followed by its transpose keeps spatial size.
    #[test]
    fn same_padding_round_trip_shape(h in 3usize..12, w in 3usize..12, k in prop::sample::select(vec![1usize, 3, 5]), c in 1usize..4) {
        let p = k / 2;
        let conv = LayerSpec::Conv(ConvSpec::new(c, 2, k, 1, p));
        let tconv = LayerSpec::ConvTranspose(ConvSpec::new(2, c, k, 1, p));
        let mid = conv.output_shape(&[1, c, h, w]).unwrap();
        prop_assert_eq!(tconv.output_shape(&mid).unwrap(), vec![1, c, h, w]);
    }

    /// Batch rows are independent: a sample's output does not depend on its neighbours.
    #[test]
    fn batch_independence(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Sequential::<f64>::init(&[LayerSpec::Conv(ConvSpec::new(2, 3, 3, 2, 1)), LayerSpec::Relu], &mut rng).unwrap();
        let x = random_input::<f64>(&[3, 2, 6, 6], &mut rng);
        let full = net.forward(&x).unwrap();
        let single = Tensor::new(vec![1, 2, 6, 6], x.row(1).to_vec()).unwrap();
        let one = net.forward(&single).unwrap();
        prop_assert_eq!(full.row(1), one.data());
    }
}
