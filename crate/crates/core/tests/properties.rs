use bimii_core::ccnn::{CcnnConfig, CcnnLayer, CcnnMode, CcnnState};
use bimii_core::checkpoint::{Checkpoint, RunMeta};
use bimii_core::kernels::{conv2d_forward, resize_forward};
use bimii_core::{ConvSpec, Graph, Mode, NamedTensorSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: [usize; 4], seed: u64, scale: f64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&shape, |_| rng.gen_range(-scale..scale))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_kernel_is_identity(
        c in 1usize..5,
        h in 1usize..9,
        w in 1usize..9,
        half in 0usize..3,
        dilation in 1usize..3,
        depthwise in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let k = 2 * half + 1;
        let x = tensor([2, c, h, w], seed, 3.0);
        let cin_g = if depthwise { 1 } else { c };
        let centre = half * k + half;
        let wt = Tensor::from_fn(&[c, cin_g, k, k], |i| {
            let (o, rest) = (i / (cin_g * k * k), i % (cin_g * k * k));
            let (ci, tap) = (rest / (k * k), rest % (k * k));
            let same = if depthwise { true } else { ci == o };
            if same && tap == centre { 1.0 } else { 0.0 }
        });
        let spec = ConvSpec { groups: if depthwise { c } else { 1 }, ..ConvSpec::dilated(k, dilation) };
        let y = conv2d_forward(&x, &wt, None, spec).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn resize_stays_within_input_range(
        h in 1usize..10,
        w in 1usize..10,
        th in 1usize..14,
        tw in 1usize..14,
        seed in any::<u64>(),
    ) {
        let x = tensor([1, 2, h, w], seed, 5.0);
        let y = resize_forward(&x, th, tw).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, th, tw][..]);
        for ch in 0..2 {
            let src = &x.data()[ch * h * w..(ch + 1) * h * w];
            let lo = src.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in &y.data()[ch * th * tw..(ch + 1) * th * tw] {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{} outside [{}, {}]", v, lo, hi);
            }
        }
    }

    #[test]
    fn softmax_pair_sums_to_one(seed in any::<u64>(), scale in 0.1f64..60.0) {
        let mut g = Graph::<f64>::standalone();
        let a = g.constant(tensor([2, 3, 4, 4], seed, scale));
        let b = g.constant(tensor([2, 3, 4, 4], seed ^ 0x5eed, scale));
        let (va, vb) = g.softmax_pair(a, b).unwrap();
        for (p, q) in g.value(va).data().iter().zip(g.value(vb).data()) {
            prop_assert!((0.0..=1.0).contains(p) && (0.0..=1.0).contains(q));
            prop_assert!((p + q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ccnn_output_stays_in_open_unit_interval(
        alpha_f in 0.01f64..3.0,
        alpha_l in 0.01f64..3.0,
        alpha_e in 0.01f64..3.0,
        v_e in 0.0f64..30.0,
        beta in 0.0f64..5.0,
        nolinking in any::<bool>(),
        steps in 1usize..6,
        drive in 0.1f64..100.0,
        seed in any::<u64>(),
    ) {
        let cfg = CcnnConfig {
            alpha_f,
            alpha_l,
            alpha_e,
            v_e,
            beta,
            kernel: 3,
            mode: if nolinking { CcnnMode::Nolinking } else { CcnnMode::Full },
            ..CcnnConfig::default()
        };
        let layer = CcnnLayer::new("c", 2, cfg);
        let mut store = NamedTensorSet::<f32>::new();
        layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.constant(tensor([1, 2, 5, 5], seed, drive).cast());
        let mut st = CcnnState::zeros(&mut g, &[1, 2, 5, 5]);
        for _ in 0..steps {
            let (next, _) = layer.step(&mut g, st, x).unwrap();
            st = next;
            prop_assert!(g.value(st.y).data().iter().all(|&y| y > 0.0 && y < 1.0));
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5),
        seed in any::<u64>(),
        stage in 1u32..3,
        epoch in 0u32..100,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = NamedTensorSet::<f32>::new();
        for (i, shape) in shapes.iter().enumerate() {
            let t = Tensor::from_fn(shape, |_| rng.gen::<f32>() * 2.0 - 1.0);
            store.insert(format!("t{i}.w"), t, i % 2 == 0);
        }
        let ck = Checkpoint::capture(&store, RunMeta { stage, epoch, seed });
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back.meta, &ck.meta);
        let mut restored = store.clone();
        for (_, e) in restored.iter_mut() {
            e.tensor = Tensor::zeros(e.tensor.shape());
        }
        back.restore_into(&mut restored).unwrap();
        for (name, e) in store.iter() {
            let r = restored.get(name).unwrap();
            prop_assert!(e.tensor.data().iter().zip(r.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
