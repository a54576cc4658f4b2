//! Minimal CNN engine: layers, reverse-mode gradients, Adam and the
//! training loop.

mod checkpoint;
pub mod gradcheck;
mod layers;
mod network;
mod optim;
mod real;
mod tensor;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{BatchNorm, Cache, ConvBank, ConvGroup, Dense, Layer, MaxPool};
pub use network::{
    build_network, softmax_rows, BatchStats, FilterConfiguration, FilterGroup, NamedLayer, Network, NetworkConfig, Step,
    FILTER_CONFIGURATION_NAMES,
};
pub use optim::Adam;
pub use real::{gemm, Real};
pub use tensor::{Pool, Tensor};
pub use train::{
    argmax, evaluate, predict_proba, predict_segments, stratified_split, train, EpochRecord, History, TrainingConfig,
};

/// Small network with the same topology, for fast tests.
pub fn tiny_config(classes: usize) -> NetworkConfig {
    let mut c = NetworkConfig::with_filters(FilterConfiguration::new("tiny", &[(2, 3, 3), (2, 3, 5)]));
    c.conv2_extent = (3, 3);
    c.pool1 = (2, 2);
    c.pool2 = (3, 2);
    c.input_frames = 10;
    c.input_bands = 12;
    c.classes = classes;
    c
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_layer, check_network, random_tensor};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_counts() {
        let count = |n: &str| build_network::<f32>(&NetworkConfig::named(n).unwrap(), 0).unwrap().param_count();
        assert_eq!(count("CNN_4"), 656_639);
        assert_eq!(count("CNN_sq"), 647_823);
        for n in FILTER_CONFIGURATION_NAMES {
            let c = count(n);
            assert!((647_000..=661_000).contains(&c), "{n}: {c}");
            assert!(c >= count("CNN_sq"));
            assert_eq!(FilterConfiguration::named(n).unwrap().total_filters(), 112);
        }
    }

    #[test]
    fn cnn4_shape_chain() {
        let net = build_network::<f32>(&NetworkConfig::named("CNN_4").unwrap(), 0).unwrap();
        let mut s = net.input_shape();
        let mut shapes = Vec::new();
        for l in &net.layers {
            s = l.layer.out_shape(s).unwrap();
            shapes.push((l.name.clone(), s));
        }
        let at = |n: &str| shapes.iter().find(|(m, _)| m == n).unwrap().1;
        assert_eq!(at("conv1"), [112, 75, 128]);
        assert_eq!(at("pool1"), [112, 15, 25]);
        assert_eq!(at("conv2"), [224, 11, 21]);
        assert_eq!(at("pool2"), [224, 1, 5]);
        assert_eq!(at("dense"), [15, 1, 1]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = NetworkConfig::named("CNN_4").unwrap();
        c.conv2_filters = 200;
        assert!(build_network::<f32>(&c, 0).is_err());
        let mut c = tiny_config(3);
        c.pool2 = (9, 2);
        let err = build_network::<f32>(&c, 0).unwrap_err().to_string();
        assert!(err.contains("pool2"), "{err}");
        assert!(FilterConfiguration::named("CNN_9").is_err());
    }

    fn tiny_batch(n: usize, seed: u64) -> Tensor<f64> {
        random_tensor([n, 1, 10, 12], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn outputs_are_distributions() {
        let mut net = build_network::<f64>(&tiny_config(5), 1).unwrap();
        for training in [true, false] {
            net.set_training(training);
            let p = net.forward(&tiny_batch(6, 2)).unwrap();
            for row in p.data.chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        assert!(net.forward(&Tensor::zeros([2, 1, 10, 11])).is_err());
    }

    #[test]
    fn duplicated_rows_match_in_inference() {
        let net = build_network::<f32>(&tiny_config(4), 3).unwrap();
        let x = tiny_batch(1, 4).cast::<f32>();
        let mut d = x.clone();
        d.data.extend_from_slice(&x.data);
        d.shape[0] = 2;
        let p = net.forward(&d).unwrap();
        assert_eq!(p.data[..4], p.data[4..]);
    }

    #[test]
    fn zero_dense_gives_uniform() {
        let mut net = build_network::<f64>(&NetworkConfig::named("CNN_sq").unwrap(), 0).unwrap();
        for p in net.params_mut().into_iter().rev().take(2) {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random_tensor([2, 1, 75, 128], &mut ChaCha8Rng::seed_from_u64(0));
        let p = net.forward(&x).unwrap();
        assert!(p.data.iter().all(|v| (v - 1.0 / 15.0).abs() < 1e-12));
    }

    #[test]
    fn duplicated_sample_same_loss() {
        let net = build_network::<f64>(&tiny_config(3), 5).unwrap();
        let x = tiny_batch(1, 6);
        let mut x4 = x.clone();
        for _ in 0..3 {
            x4.data.extend_from_slice(&x.data);
        }
        x4.shape[0] = 4;
        // batch statistics of identical rows equal those of the single row
        let a = net.loss_and_gradients(&x, &[1]).unwrap().loss;
        let b = net.loss_and_gradients(&x4, &[1; 4]).unwrap().loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_leaves_l2_only() {
        let mut net = build_network::<f64>(&tiny_config(3), 7).unwrap();
        let n = net.params().len();
        {
            let mut p = net.params_mut();
            p[n - 2].iter_mut().for_each(|v| *v = 0.0);
            p[n - 1].copy_from_slice(&[0.0, 800.0, 0.0]);
        }
        let step = net.loss_and_gradients(&tiny_batch(3, 8), &[1, 1, 1]).unwrap();
        let l2: f64 = net.layers.iter().map(|l| l.layer.l2_penalty()).sum();
        assert!(step.cross_entropy < 1e-12);
        assert!((step.loss - l2).abs() < 1e-12);
    }

    fn conv(groups: &[(usize, usize, usize, (usize, usize), (usize, usize))], cin: usize, seed: u64) -> Layer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Layer::Conv(ConvBank {
            in_channels: cin,
            l2: 0.01,
            groups: groups
                .iter()
                .map(|&(f, kt, kf, pt, pf)| ConvGroup {
                    filters: f,
                    kt,
                    kf,
                    pad_t: pt,
                    pad_f: pf,
                    weight: random_tensor([f, cin, kt, kf], &mut rng).data,
                    bias: random_tensor([f, 1, 1, 1], &mut rng).data,
                })
                .collect(),
        })
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor([4, 2, 6, 7], &mut rng);
        let mut bn = BatchNorm::<f64>::new(2, 0.99, 1e-3);
        bn.gamma = vec![1.3, -0.7];
        bn.beta = vec![0.2, 0.5];
        let layers: Vec<Layer<f64>> = vec![
            conv(&[(3, 3, 3, (1, 1), (1, 1)), (2, 3, 4, (1, 1), (1, 2))], 2, 1),
            conv(&[(3, 2, 2, (0, 0), (0, 0))], 2, 2),
            Layer::BatchNorm(bn),
            Layer::Relu,
            Layer::MaxPool(MaxPool { pt: 2, pf: 3 }),
            Layer::Dense(Dense {
                inputs: 84,
                units: 5,
                weight: random_tensor([5, 84, 1, 1], &mut rng).data,
                bias: random_tensor([5, 1, 1, 1], &mut rng).data,
            }),
        ];
        for l in &layers {
            let r = check_layer(l, &x, 3, 1e-5, 1e-4);
            assert!(r.passed(), "{}: {r:?}", l.kind());
        }
    }

    #[test]
    fn max_pool_routes_to_argmax_only() {
        let pool = Layer::<f64>::MaxPool(MaxPool { pt: 2, pf: 2 });
        let x = random_tensor([2, 3, 5, 4], &mut ChaCha8Rng::seed_from_u64(9));
        let (y, cache) = pool.forward(x.clone(), true);
        let dy = random_tensor(y.shape, &mut ChaCha8Rng::seed_from_u64(10));
        let dx = pool.backward(cache.unwrap(), dy.clone(), &mut [], true);
        assert!((dx.data.iter().sum::<f64>() - dy.data.iter().sum::<f64>()).abs() < 1e-12);
        let nonzero = dx.data.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, y.data.len());
        // the discarded fifth row never receives gradient
        for bc in 0..6 {
            assert!(dx.data[bc * 20 + 16..bc * 20 + 20].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn composed_network_gradients() {
        for pre in [false, true] {
            for seed in 0..3 {
                let mut cfg = tiny_config(3);
                cfg.pre_activation = pre;
                cfg.pre_activation_mid = pre;
                let net = build_network::<f64>(&cfg, seed).unwrap();
                let r = check_network(&net, &tiny_batch(4, seed + 100), &[0, 2, 1, 2], None, seed, 1e-5, 1e-4).unwrap();
                assert!(r.passed(), "pre {pre} seed {seed}: {r:?}");
            }
        }
    }

    fn separable_set(classes: usize, per_class: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut patches = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for _ in 0..per_class {
                let mut p = random_tensor([1, 1, 10, 12], &mut rng).cast::<f32>().data;
                p.iter_mut().for_each(|v| *v *= 0.3);
                // class marker: a bright frequency band
                for t in 0..10 {
                    p[t * 12 + (c % 12)] += 3.0;
                }
                patches.push(p);
                labels.push(c);
            }
        }
        (patches, labels)
    }

    #[test]
    fn overfits_separable_patches() {
        let (patches, labels) = separable_set(12, 20, 1);
        let refs: Vec<&[f32]> = patches.iter().map(|p| &p[..]).collect();
        let mut cfg = tiny_config(12);
        cfg.bn_momentum = 0.9;
        let mut net = build_network::<f32>(&cfg, 2).unwrap();
        let tc = TrainingConfig {
            max_epochs: 60,
            batch_size: 16,
            initial_lr: 0.01,
            seed: 3,
            ..Default::default()
        };
        let h = train(&mut net, &refs, &labels, &tc, |_| {}).unwrap();
        assert!(h.epochs.len() <= 60);
        let (_, acc) = evaluate(&net, &refs, &labels, 64).unwrap();
        assert!(acc >= 0.95, "train accuracy {acc}");
        for w in h.epochs.windows(2) {
            let r = w[0].lr / w[1].lr;
            assert!(r == 1.0 || r == 2.0);
        }
        assert!(!net.is_training());
        assert!(net.buffers().iter().all(|b| b.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn training_is_deterministic() {
        let (patches, labels) = separable_set(3, 8, 4);
        let refs: Vec<&[f32]> = patches.iter().map(|p| &p[..]).collect();
        let tc = TrainingConfig {
            max_epochs: 3,
            batch_size: 5,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let mut net = build_network::<f32>(&tiny_config(3), 1).unwrap();
            let h = train(&mut net, &refs, &labels, &tc, |_| {}).unwrap();
            (net.params().iter().map(|p| p.to_vec()).collect::<Vec<_>>(), h)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_class_is_an_error() {
        let (patches, mut labels) = separable_set(3, 4, 5);
        labels.iter_mut().for_each(|l| *l = (*l).min(1));
        let refs: Vec<&[f32]> = patches.iter().map(|p| &p[..]).collect();
        let mut net = build_network::<f32>(&tiny_config(3), 1).unwrap();
        assert!(train(&mut net, &refs, &labels, &TrainingConfig::default(), |_| {}).is_err());
    }

    #[test]
    fn stratified_split_takes_fifteen_percent_per_class() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let (tr, va) = stratified_split(&labels, 4, 0.15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.len() + va.len(), 200);
        for c in 0..4 {
            assert_eq!(va.iter().filter(|&&i| labels[i] == c).count(), 8);
        }
    }

    #[test]
    fn segment_prediction() {
        let mut cfg = tiny_config(4);
        cfg.input_frames = 75;
        cfg.input_bands = 16;
        cfg.pool2 = (11, 2);
        let net = build_network::<f32>(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches: Vec<Vec<f32>> = (0..7).map(|_| random_tensor([1, 1, 75, 16], &mut rng).cast().data).collect();
        let refs: Vec<&[f32]> = patches.iter().map(|p| &p[..]).collect();
        let out = predict_segments(&net, &refs).unwrap();
        assert_eq!(out.len(), 7);
        assert!(out.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-6));
        let mut rev = refs.clone();
        rev.reverse();
        let out_rev = predict_segments(&net, &rev).unwrap();
        for i in 0..7 {
            assert_eq!(out[i], out_rev[6 - i]);
        }
        let same = vec![refs[0]; 7];
        let o = predict_segments(&net, &same).unwrap();
        assert!(o.iter().all(|r| r == &o[0]));
        assert!(predict_segments(&net, &refs[..6]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = build_network::<f32>(&tiny_config(3), 4).unwrap();
        net.buffers_mut()[0][1] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cnn.bin");
        save_checkpoint(&p, &net, "abc").unwrap();
        let (back, hash) = load_checkpoint(&p).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(back.params(), net.params());
        assert_eq!(back.buffers(), net.buffers());
        assert_eq!(back.config, net.config);
    }
}
