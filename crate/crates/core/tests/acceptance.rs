//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when a
//! required criterion fails; the dataset track only reports.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use scenefuse_core::codec::sha256_file;
use scenefuse_core::dataset::{synthesize_recording, Recording, SyntheticSceneSpec};
use scenefuse_core::eval::MetricsReport;
use scenefuse_core::experiment::{BranchKind, EvalMode, Experiment, ExperimentConfig, Split};
use scenefuse_core::features::{fit_feature_scaler, FeatureExtractor, SEGMENT_DIM};
use scenefuse_core::frontend::{build_mel_filterbank, fit_scaler, hz_to_mel, Frontend, FrontendConfig, StftConfig};
use scenefuse_core::fusion::{fuse_simple, ClassProbabilities, FusionMethod, SimpleFusion};
use scenefuse_core::gbm::{
    bin_features, fit_gbm, grow_tree, leaf_score, min_gain, pick_best, BinnedDataset, Candidate, GbmConfig, GrowParams,
};
use scenefuse_core::lda::{fit_lda, regularized_within, scatter_matrices};
use scenefuse_core::nn::gradcheck::{check_layer, check_network, random_tensor};
use scenefuse_core::nn::{
    build_network, BatchNorm, ConvBank, ConvGroup, Dense, Layer, MaxPool, NetworkConfig, FILTER_CONFIGURATION_NAMES,
};
use scenefuse_core::scaler::ScalerScope;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    if t <= limit {
        Ok(())
    } else {
        Err(format!("{what} took {t:.1?}, limit {limit:?}"))
    }
}

fn parameter_counts() -> Outcome {
    let start = Instant::now();
    let count = |n: &str| -> Result<usize, String> {
        let cfg = NetworkConfig::named(n).map_err(|e| e.to_string())?;
        Ok(build_network::<f32>(&cfg, 0).map_err(|e| e.to_string())?.param_count())
    };
    let cnn4 = count("CNN_4")?;
    let sq = count("CNN_sq")?;
    let mut all = Vec::new();
    for n in FILTER_CONFIGURATION_NAMES {
        all.push((n, count(n)?));
    }
    within(start, Duration::from_secs(1), "building all networks")?;
    let near = |v: usize, target: f64| (v as f64 - target).abs() <= 0.005 * target;
    check(
        cnn4 == 656_639
            && sq == 647_823
            && near(cnn4, 657_000.0)
            && near(sq, 648_000.0)
            && all.iter().all(|(_, c)| (647_000..=661_000).contains(c)),
        format!("CNN_4 {cnn4}, CNN_sq {sq}, all {all:?}"),
    )
}

fn conv_layer(groups: &[(usize, usize, usize, (usize, usize), (usize, usize))], cin: usize, rng: &mut ChaCha8Rng) -> Layer<f64> {
    Layer::Conv(ConvBank {
        in_channels: cin,
        l2: 0.01,
        groups: groups
            .iter()
            .map(|&(filters, kt, kf, pad_t, pad_f)| ConvGroup {
                filters,
                kt,
                kf,
                pad_t,
                pad_f,
                weight: random_tensor([filters, cin, kt, kf], rng).data,
                bias: random_tensor([filters, 1, 1, 1], rng).data,
            })
            .collect(),
    })
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (step, tol) = (1e-5, 1e-4);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut kinks = 0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor([4, 2, 6, 7], &mut rng);
        let mut bn = BatchNorm::<f64>::new(2, 0.99, 1e-3);
        bn.gamma = vec![rng.gen_range(0.5..1.5), -rng.gen_range(0.5..1.5)];
        bn.beta = vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        let layers = vec![
            conv_layer(&[(3, 3, 3, (1, 1), (1, 1)), (2, 3, 4, (1, 1), (1, 2))], 2, &mut rng),
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
            let r = check_layer(l, &x, seed, step, tol);
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            if !r.passed() {
                return Err(format!("{} layer, seed {seed}: {r:?}", l.kind()));
            }
        }

        let net = build_network::<f64>(&NetworkConfig::named("CNN_4").map_err(|e| e.to_string())?, seed)
            .map_err(|e| e.to_string())?;
        let batch = random_tensor([4, 1, 75, 128], &mut ChaCha8Rng::seed_from_u64(100 + seed));
        let r = check_network(&net, &batch, &[0, 7, 3, 14], Some(2), seed, step, tol).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        kinks += r.kinks;
        if !r.passed() || r.kinks * 10 > r.checked {
            return Err(format!("CNN_4, seed {seed}: {r:?}"));
        }
    }
    within(start, Duration::from_secs(120), "gradient checks")?;
    Ok(format!(
        "{checked} coordinates over 5 seeds, max relative error {worst:.2e}, {kinks} skipped at activation kinks"
    ))
}

fn oracle(data: &BinnedDataset, g: &[f64], h: &[f64], rows: &[usize], p: GrowParams) -> Option<Candidate> {
    let gp: f64 = rows.iter().map(|&i| g[i]).sum();
    let hp: f64 = rows.iter().map(|&i| h[i]).sum();
    let parent = leaf_score(gp, hp, p.lambda_l2);
    let mut cands = Vec::new();
    for f in 0..data.features() {
        let col = data.column(f);
        for b in 0..data.mappers[f].bins().saturating_sub(1) {
            let (mut gl, mut hl, mut nl, mut gr, mut hr, mut nr) = (0.0, 0.0, 0, 0.0, 0.0, 0);
            for &i in rows {
                if col[i] as usize <= b {
                    gl += g[i];
                    hl += h[i];
                    nl += 1;
                } else {
                    gr += g[i];
                    hr += h[i];
                    nr += 1;
                }
            }
            if nl < p.min_data_in_leaf || nr < p.min_data_in_leaf || hl < p.min_sum_hessian || hr < p.min_sum_hessian {
                continue;
            }
            let gain = leaf_score(gl, hl, p.lambda_l2) + leaf_score(gr, hr, p.lambda_l2) - parent;
            if gain > min_gain(parent) {
                cands.push(Candidate {
                    feature: f,
                    bin: b as u16,
                    gain,
                });
            }
        }
    }
    pick_best(&cands)
}

fn split_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut splits = 0;
    for inst in 0..50 {
        let n = rng.gen_range(20..=200);
        let f = rng.gen_range(1..=5);
        let max_bins = rng.gen_range(2..=16);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..f).map(|_| rng.gen_range(0..30) as f64 * 0.5).collect())
            .collect();
        let data = bin_features(&rows, max_bins).map_err(|e| e.to_string())?;
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.02..0.98)).collect();
        let g: Vec<f64> = p.iter().map(|&p| p - f64::from(u8::from(rng.gen_bool(0.4)))).collect();
        let h: Vec<f64> = p.iter().map(|&p| p * (1.0 - p)).collect();
        let params = GrowParams {
            num_leaves: rng.gen_range(2..=10),
            min_data_in_leaf: rng.gen_range(1..=12),
            lambda_l2: if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..1.0) },
            min_sum_hessian: 1e-3,
        };
        let all: Vec<usize> = (0..n).collect();
        let mut log = Vec::new();
        grow_tree(&data, &g, &h, &all, params, Some(&mut log));
        for ev in &log {
            let want = oracle(&data, &g, &h, &ev.rows, params).ok_or(format!("instance {inst}: oracle finds no split"))?;
            if (ev.feature, ev.bin) != (want.feature, want.bin) {
                return Err(format!(
                    "instance {inst}: grown split ({}, {}) vs oracle ({}, {})",
                    ev.feature, ev.bin, want.feature, want.bin
                ));
            }
            splits += 1;
        }
    }
    within(start, Duration::from_secs(60), "split oracle")?;
    check(splits > 0, format!("{splits} splits over 50 instances match"))
}

fn synthetic_feature_rows(classes: usize, per_class: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>), String> {
    let spec = SyntheticSceneSpec::new(classes, per_class, 10.0, 11);
    let fx = FeatureExtractor::new(StftConfig::default()).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for i in 0..per_class {
            let rec = Recording::new(format!("{c}_{i}"), synthesize_recording(&spec, c, i), Some(c)).map_err(|e| e.to_string())?;
            for s in fx.segment_features(&rec).map_err(|e| e.to_string())? {
                rows.push(s.values);
                labels.push(c);
            }
        }
    }
    Ok((rows, labels))
}

fn gbm_loss_monotone() -> Outcome {
    let (rows, labels) = synthetic_feature_rows(15, 2)?;
    let cfg = GbmConfig {
        num_rounds: 100,
        num_leaves: 8,
        min_data_in_leaf: 3,
        max_bins: 32,
        ..GbmConfig::default()
    };
    let data = bin_features(&rows, cfg.max_bins).map_err(|e| e.to_string())?;
    let m = fit_gbm(&data, &labels, 15, &cfg).map_err(|e| e.to_string())?;
    let worst = m.train_loss.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    check(
        m.train_loss.len() == 101 && worst <= 1e-12,
        format!(
            "{} rows x {} dims, loss {:.4} -> {:.4}, largest step {worst:.2e}",
            rows.len(),
            rows[0].len(),
            m.train_loss[0],
            m.train_loss[100]
        ),
    )
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn lda_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, shift) in [(0usize, [0.0, 0.0, 0.0]), (1, [4.0, 1.0, -2.0])] {
        for _ in 0..300 {
            let z = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
            // correlated within-class noise
            rows.push(vec![shift[0] + z[0] + 0.5 * z[1], shift[1] + z[1], shift[2] + 0.3 * z[0] + z[2]]);
            labels.push(c);
        }
    }
    let m = fit_lda(&rows, &labels, 1).map_err(|e| e.to_string())?;
    let (_, sw, _) = scatter_matrices(&rows, &labels).map_err(|e| e.to_string())?;
    let mean = |c: usize| {
        let sel: Vec<&Vec<f64>> = rows.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
        DVector::from_fn(3, |j, _| sel.iter().map(|r| r[j]).sum::<f64>() / sel.len() as f64)
    };
    let fisher = sw.try_inverse().ok_or("singular Sw")? * (mean(1) - mean(0));
    let v = DVector::from_column_slice(m.direction(0));
    let cos = (v.dot(&fisher) / (v.norm() * fisher.norm())).abs();

    let mut worst_residual = 0.0f64;
    let mut max_rank = 0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let p = 30;
        let centers: Vec<Vec<f64>> = (0..15).map(|_| (0..p).map(|_| 3.0 * normal(&mut rng)).collect()).collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, mu) in centers.iter().enumerate() {
            for _ in 0..20 {
                rows.push(mu.iter().map(|m| m + normal(&mut rng)).collect::<Vec<f64>>());
                labels.push(c);
            }
        }
        let m = fit_lda(&rows, &labels, 20).map_err(|e| e.to_string())?;
        let (_, sw, sb) = scatter_matrices(&rows, &labels).map_err(|e| e.to_string())?;
        let reg = regularized_within(&sw, 1e-4);
        for k in 0..m.output_dim() {
            let v = DVector::from_column_slice(m.direction(k));
            let r = (&sb * &v - (&reg * &v) * m.eigenvalues[k]).norm() / v.norm();
            worst_residual = worst_residual.max(r);
        }
        max_rank = max_rank.max(m.effective_rank);
    }
    check(
        cos >= 0.999 && worst_residual < 1e-6 && max_rank <= 14,
        format!("cosine {cos:.6}, residual {worst_residual:.2e}, effective rank {max_rank}"),
    )
}

fn frontend_invariants() -> Outcome {
    let fb = build_mel_filterbank(128, 0.0, 22_050.0, 2048, 44_100.0).map_err(|e| e.to_string())?;
    let peaks_ok = (0..128).all(|m| fb.row(m).iter().cloned().fold(f64::NEG_INFINITY, f64::max) == 1.0);
    let mel1000 = hz_to_mel(1000.0);

    let spec = SyntheticSceneSpec::new(15, 2, 10.0, 3);
    let fe = Frontend::new(FrontendConfig::default()).map_err(|e| e.to_string())?;
    let fx = FeatureExtractor::new(StftConfig::default()).map_err(|e| e.to_string())?;
    let mut mels = Vec::new();
    let mut feats = Vec::new();
    for c in [0, 7, 14] {
        for i in 0..2 {
            let rec = Recording::new(format!("{c}_{i}"), synthesize_recording(&spec, c, i), Some(c)).map_err(|e| e.to_string())?;
            mels.push(fe.mel_record(&rec).map_err(|e| e.to_string())?);
            feats.push(fx.segment_features(&rec).map_err(|e| e.to_string())?);
        }
    }
    let shapes_ok = mels.iter().all(|m| m.patches.len() == 7 && m.patches.iter().all(|p| p.len() == 75 * 128))
        && feats.iter().all(|f| f.len() == 7 && f.iter().all(|s| s.values.len() == SEGMENT_DIM));

    let worst = |rows: &[Vec<f64>]| -> (f64, f64) {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut m_err = 0.0f64;
        let mut s_err = 0.0f64;
        for j in 0..d {
            let mu = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let sd = (rows.iter().map(|r| (r[j] - mu).powi(2)).sum::<f64>() / n).sqrt();
            m_err = m_err.max(mu.abs());
            if sd > 0.0 {
                s_err = s_err.max((sd - 1.0).abs());
            }
        }
        (m_err, s_err)
    };
    let scaler = fit_scaler(mels.iter(), ScalerScope::PerBand).map_err(|e| e.to_string())?;
    let mut frames = Vec::new();
    for m in &mels {
        for t in 0..m.valid_frames {
            let mut v: Vec<f64> = m.frame(t).iter().map(|&x| x as f64).collect();
            scaler.apply_in_place(&mut v).map_err(|e| e.to_string())?;
            frames.push(v);
        }
    }
    let (mel_mu, mel_sd) = worst(&frames);
    let mut rows: Vec<Vec<f64>> = feats.iter().flatten().map(|s| s.values.clone()).collect();
    let fscaler = fit_feature_scaler(rows.iter().map(Vec::as_slice)).map_err(|e| e.to_string())?;
    for r in &mut rows {
        fscaler.apply_in_place(r).map_err(|e| e.to_string())?;
    }
    let (f_mu, f_sd) = worst(&rows);
    check(
        peaks_ok && mel1000 == 15.0 && shapes_ok && mel_mu < 1e-9 && mel_sd < 1e-9 && f_mu < 1e-9 && f_sd < 1e-9,
        format!(
            "peaks {peaks_ok}, mel(1000) {mel1000}, shapes {shapes_ok}, log-mel |mu| {mel_mu:.1e} |sd-1| {mel_sd:.1e}, features |mu| {f_mu:.1e} |sd-1| {f_sd:.1e}"
        ),
    )
}

fn e2e_config(out: &std::path::Path) -> Result<ExperimentConfig, String> {
    ExperimentConfig::with_overrides(
        "",
        &[
            format!("output_dir={}", out.display()),
            "dataset.synthetic.n_classes=15".into(),
            "dataset.synthetic.recordings_per_class=8".into(),
            "dataset.folds=4".into(),
            "cnn.bn_momentum=0.9".into(),
            "cnn.training.max_epochs=3".into(),
            "gbm.num_leaves=16".into(),
            "gbm.min_data_in_leaf=20".into(),
        ],
    )
    .map_err(|e| e.to_string())
}

fn metrics(exp: &Experiment, stem: &str) -> Result<MetricsReport, String> {
    let p = exp.out.join("metrics").join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exp = Experiment::new(e2e_config(dir.path())?).map_err(|e| e.to_string())?;
    let run = || -> scenefuse_core::Result<()> {
        exp.gen_synthetic()?;
        exp.extract_mel()?;
        exp.extract_features()?;
        exp.evaluate(BranchKind::Cnn, EvalMode::Cv)?;
        exp.evaluate(BranchKind::Gbm, EvalMode::Cv)?;
        exp.fuse(FusionMethod::Stacking, Split::Dev)?;
        Ok(())
    };
    run().map_err(|e| e.to_string())?;
    let cnn = metrics(&exp, "cnn_dev")?.headline();
    let gbm = metrics(&exp, "gbm_dev")?.headline();
    let fused = metrics(&exp, "fused_stacking_dev")?.accuracy;
    within(start, Duration::from_secs(30 * 60), "synthetic pipeline")?;
    check(
        cnn >= 0.90 && gbm >= 0.80 && fused >= cnn.max(gbm) - 0.01,
        format!("cnn {cnn:.4}, gbm {gbm:.4}, stacked {fused:.4}, {:.0?}", start.elapsed()),
    )
}

fn random_dist(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-6..1.0f64).powi(3)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn fusion_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cp = |v: Vec<f64>| ClassProbabilities::new("r", v).expect("valid distribution");
    let methods = [SimpleFusion::Arithmetic, SimpleFusion::Geometric, SimpleFusion::Rank];
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let (p, q) = (cp(random_dist(&mut rng, 15)), cp(random_dist(&mut rng, 15)));
        for m in methods {
            let (f, _) = fuse_simple(m, &p, &q).map_err(|e| e.to_string())?;
            if f.probs.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("{m:?} produced an entry outside [0, 1]"));
            }
            worst_sum = worst_sum.max((f.probs.iter().sum::<f64>() - 1.0).abs());
            if m != SimpleFusion::Rank {
                let (g, _) = fuse_simple(m, &q, &p).map_err(|e| e.to_string())?;
                if f.probs != g.probs {
                    return Err(format!("{m:?} is not symmetric"));
                }
            }
        }
    }
    for i in 0..100 {
        let (p, q) = (cp(random_dist(&mut rng, 15)), cp(random_dist(&mut rng, 15)));
        let a = rng.gen_range(0.2..5.0);
        let b = rng.gen_range(0.1..10.0);
        let map = |x: f64| match i % 3 {
            0 => x.powf(a),
            1 => (b * x).exp() - 1.0 + 1e-9,
            _ => (1.0 + b * x).ln() + x.powf(a),
        };
        let mapped: Vec<f64> = p.probs.iter().map(|&x| map(x)).collect();
        let s: f64 = mapped.iter().sum();
        let mapped = cp(mapped.into_iter().map(|v| v / s).collect());
        let (f1, l1) = fuse_simple(SimpleFusion::Rank, &p, &q).map_err(|e| e.to_string())?;
        let (f2, l2) = fuse_simple(SimpleFusion::Rank, &mapped, &q).map_err(|e| e.to_string())?;
        if f1.probs != f2.probs || l1 != l2 {
            return Err(format!("rank fusion changed under monotone map {i}"));
        }
    }
    check(worst_sum <= 1e-6, format!("max |sum - 1| {worst_sum:.1e}, symmetry exact, 100 monotone maps invariant"))
}

fn determinism() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let run = || -> Result<Vec<String>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = ExperimentConfig::with_overrides(
            "",
            &[
                format!("output_dir={}", dir.path().display()),
                "dataset.synthetic.n_classes=3".into(),
                "dataset.synthetic.recordings_per_class=4".into(),
                "dataset.folds=2".into(),
                "cnn.training.max_epochs=1".into(),
                "gbm.num_rounds=10".into(),
                "gbm.num_leaves=8".into(),
                "gbm.min_data_in_leaf=5".into(),
            ],
        )
        .map_err(|e| e.to_string())?;
        let exp = Experiment::new(cfg).map_err(|e| e.to_string())?;
        pool.install(|| -> scenefuse_core::Result<Vec<PathBuf>> {
            exp.gen_synthetic()?;
            exp.extract_mel()?;
            exp.extract_features()?;
            let mut files = exp.evaluate(BranchKind::Cnn, EvalMode::Cv)?;
            files.extend(exp.evaluate(BranchKind::Gbm, EvalMode::Cv)?);
            files.extend(exp.fuse(FusionMethod::Stacking, Split::Dev)?);
            Ok(files)
        })
        .map_err(|e| e.to_string())?
        .iter()
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .map(|p| sha256_file(p).map_err(|e| e.to_string()))
        .collect()
    };
    let a = run()?;
    let b = run()?;
    check(a == b && a.len() == 3, format!("{} metric files hash-identical across reruns", a.len()))
}

fn dataset_track() -> Option<Outcome> {
    let root = PathBuf::from(std::env::var_os("SCENEFUSE_TUT_DEV")?);
    let meta = root.join("meta.txt");
    if !meta.exists() {
        return None;
    }
    let out = tempfile::tempdir().ok()?;
    let result = (|| -> Result<f64, String> {
        let cfg = ExperimentConfig::with_overrides(
            "",
            &[
                format!("output_dir={}", out.path().display()),
                format!("dataset.dev_manifest={}", meta.display()),
                format!("dataset.fold_dir={}", root.join("evaluation_setup").display()),
                "lda.enabled=true".into(),
            ],
        )
        .map_err(|e| e.to_string())?;
        let exp = Experiment::new(cfg).map_err(|e| e.to_string())?;
        exp.extract_features().map_err(|e| e.to_string())?;
        exp.evaluate(BranchKind::Gbm, EvalMode::Cv).map_err(|e| e.to_string())?;
        Ok(metrics(&exp, "gbm_lda_dev")?.headline())
    })();
    Some(result.and_then(|acc| check((acc - 0.811).abs() <= 0.06, format!("GBM+LDA dev accuracy {acc:.4}"))))
}

fn main() {
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "parameter counts", parameter_counts),
        (2, "gradient checks", gradients),
        (3, "GBM split oracle", split_oracle),
        (4, "GBM loss monotone", gbm_loss_monotone),
        (5, "LDA closed form", lda_closed_form),
        (6, "front-end invariants", frontend_invariants),
        (7, "end-to-end synthetic", end_to_end),
        (8, "fusion properties", fusion_properties),
        (9, "determinism", determinism),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(d) => println!("criterion {n} ({name}): PASS [{:.1?}] {d}", start.elapsed()),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{:.1?}] {d}", start.elapsed());
            }
        }
    }
    if filter.is_empty() || filter.contains(&10) {
        match dataset_track() {
            None => println!("criterion 10 (dataset track): SKIP (set SCENEFUSE_TUT_DEV to a TUT Acoustic Scenes 2017 development directory)"),
            Some(Ok(d)) => println!("criterion 10 (dataset track): PASS {d}"),
            Some(Err(d)) => println!("criterion 10 (dataset track): FAIL (optional) {d}"),
        }
    }
    if failed > 0 {
        println!("{failed} required criteria failed");
        std::process::exit(1);
    }
}

