use cortex::data::{normalize, read_dataset, resize_bilinear, write_dataset, Dataset, Example, LabelMap, PixelGrid};
use cortex::metrics::{confusion, report};
use cortex::nn::{conv2d_forward, maxpool2d_forward, Conv2d};
use cortex::tensor::Tensor;
use cortex::train::{
    paper_model, read_checkpoint, split_indices, write_checkpoint, CheckpointMeta, HeadMode, Model,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(dims: &[usize], data: Vec<f32>) -> Tensor<f32> {
    Tensor::from_vec(dims, data).unwrap()
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..5, 1usize..5, 1usize..6).prop_flat_map(|(h, w, n)| {
        proptest::collection::vec((0usize..4, proptest::collection::vec(0.0f32..=1.0, 3 * h * w), "[a-z]{1,8}"), n)
            .prop_map(move |items| Dataset {
                label_map: LabelMap::default(),
                image_size: (h, w),
                examples: items
                    .into_iter()
                    .map(|(label, data, id)| Example {
                        image: tensor(&[3, h, w], data),
                        label,
                        source_id: id,
                    })
                    .collect(),
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_round_trip_is_byte_identical(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let sum_a = write_dataset(&ds, &a).unwrap();
        let (loaded, sum_read) = read_dataset(&a).unwrap();
        prop_assert_eq!(&loaded, &ds);
        prop_assert_eq!(sum_a, sum_read);
        write_dataset(&loaded, &b).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let counts: usize = loaded.class_counts().iter().sum();
        prop_assert_eq!(counts, ds.examples.len());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), size in 46usize..52, sigmoid in any::<bool>(), epoch in any::<u64>()) {
        let head = if sigmoid { HeadMode::Sigmoid } else { HeadMode::Softmax };
        let model: Model<f32> = paper_model(size, head, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let meta = CheckpointMeta { epoch, seed, config_hash: seed.rotate_left(7), class_names: LabelMap::default().names().to_vec() };
        let bytes = write_checkpoint(&model, &meta).unwrap();
        let (loaded, meta2) = read_checkpoint::<f32>(&bytes).unwrap();
        for (p, q) in model.params().iter().zip(loaded.params()) {
            let same = p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
        prop_assert_eq!(&meta2, &meta);
        prop_assert_eq!(write_checkpoint(&loaded, &meta2).unwrap(), bytes);
    }

    #[test]
    fn resize_of_constant_image_is_constant(rgb in any::<[u8; 3]>(), w in 1usize..20, h in 1usize..20, ow in 1usize..30, oh in 1usize..30) {
        let grid = PixelGrid::filled(w, h, rgb).unwrap();
        let out = resize_bilinear(&grid, ow, oh).unwrap();
        prop_assert_eq!((out.width(), out.height()), (ow, oh));
        prop_assert!(out.data().chunks(3).all(|p| p == rgb));
        let t = normalize(&out);
        prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pool_output_never_exceeds_input_max(data in proptest::collection::vec(-100.0f32..100.0, 2 * 3 * 5 * 7)) {
        let x = tensor(&[2, 3, 5, 7], data);
        let (y, _) = maxpool2d_forward(&x).unwrap();
        let global = x.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(y.dims(), &[2, 3, 2, 3]);
        prop_assert!(y.data().iter().all(|&v| v <= global));
    }

    #[test]
    fn conv_without_bias_is_homogeneous(
        x in proptest::collection::vec(-1.0f32..1.0, 2 * 6 * 6),
        w in proptest::collection::vec(-1.0f32..1.0, 3 * 2 * 9),
        a in -4.0f32..4.0,
    ) {
        let layer = Conv2d::new(tensor(&[3, 2, 3, 3], w), Tensor::zeros(&[3]).unwrap()).unwrap();
        let input = tensor(&[1, 2, 6, 6], x);
        let scaled = input.map(|v| a * v);
        let lhs = conv2d_forward(&scaled, &layer).unwrap();
        let rhs = conv2d_forward(&input, &layer).unwrap().map(|v| a * v);
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((p - q).abs() <= 1e-5 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn split_partitions_and_rounds_down(labels in proptest::collection::vec(0usize..4, 1..300), fraction in 0.05f64..0.95, seed in any::<u64>(), stratify in any::<bool>()) {
        let s = split_indices(&labels, fraction, seed, stratify).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        if !stratify {
            prop_assert_eq!(s.train.len(), (fraction * labels.len() as f64).floor() as usize);
        }
        prop_assert_eq!(&s, &split_indices(&labels, fraction, seed, stratify).unwrap());
    }

    #[test]
    fn accuracy_is_trace_over_total(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200)) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let r = report(&confusion(&truth, &pred, 4).unwrap()).unwrap();
        let correct = pairs.iter().filter(|(t, p)| t == p).count();
        prop_assert_eq!(r.confusion.total() as usize, pairs.len());
        prop_assert!((r.accuracy - correct as f64 / pairs.len() as f64).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.accuracy));
    }
}
