use std::fs;
use std::path::Path;

use maskunit::clustering::{fit_codebook, FitConfig, FitMethod};
use maskunit::io::{self, LabelLine};
use maskunit::metrics::{build_contingency, pnmi, MetricsReport};
use maskunit::model::{checkpoint, MaskedPredictionModel, ModelConfig, TrainConfig};
use maskunit::pipeline::data::stack_frames;
use maskunit::pipeline::studies::{
    alpha_sweep, corrupt_labels, ensemble_run, layer_sweep, stability_study, AblationConfig, EnsembleTeacher,
    TeacherConfig,
};
use maskunit::pipeline::{
    gen_synthetic_corpus, run_pipeline, CorpusSource, FeatureSource, IterationConfig, PipelineConfig, RunContext,
    SyntheticCorpusSpec, CHECKPOINT_FILE, CODEBOOK_FILE, LABELS_FILE, METRICS_FILE,
};
use maskunit::{Error, FeatureKind};
use tempfile::tempdir;

fn small_spec(sigma: f64) -> SyntheticCorpusSpec {
    SyntheticCorpusSpec {
        num_phones: 6,
        dim: 8,
        sigma,
        num_utterances: 12,
        mean_frames: 60,
        ..SyntheticCorpusSpec::default()
    }
}

fn lloyd_pnmi(spec: &SyntheticCorpusSpec, k: usize) -> f64 {
    let corpus = gen_synthetic_corpus(spec).unwrap();
    let idx: Vec<usize> = (0..corpus.features.len()).collect();
    let data = stack_frames(&corpus.features, &idx).unwrap();
    let cb = fit_codebook(data.view(), FeatureKind::Mfcc, &FitConfig { k, ..FitConfig::lloyd(1) }).unwrap();
    let units: Vec<Vec<u32>> = corpus.features.iter().map(|f| cb.assign(f).unwrap().labels).collect();
    let table = build_contingency(corpus.phones.iter().zip(&units).map(|(p, u)| (p, u.as_slice()))).unwrap();
    pnmi(&table).unwrap()
}

#[test]
fn noiseless_corpus_is_perfectly_separable() {
    let spec = small_spec(0.0);
    let v = lloyd_pnmi(&spec, spec.num_phones);
    assert!((v - 1.0).abs() < 1e-12, "{v}");
}

#[test]
fn moderate_noise_stays_well_separated() {
    let spec = SyntheticCorpusSpec {
        sigma: 0.5,
        anchor_distance: 4.0,
        ..SyntheticCorpusSpec::default()
    };
    let v = lloyd_pnmi(&spec, spec.num_phones);
    assert!(v > 0.9, "{v}");
}

#[test]
fn corpus_depends_only_on_seed() {
    let a = gen_synthetic_corpus(&small_spec(1.0)).unwrap();
    let b = gen_synthetic_corpus(&small_spec(1.0)).unwrap();
    assert_eq!(a, b);
    let c = gen_synthetic_corpus(&SyntheticCorpusSpec {
        seed: 9,
        ..small_spec(1.0)
    })
    .unwrap();
    assert_ne!(a.phones, c.phones);
    for p in &a.phones {
        assert!(p.labels.iter().all(|&l| (l as usize) < 6));
    }
    // left-to-right: a phone never follows itself across a boundary, so every
    // run is at least states_per_phone frames except possibly the last
    for p in &a.phones {
        let mut runs = Vec::new();
        let mut n = 1;
        for w in p.labels.windows(2) {
            if w[0] == w[1] {
                n += 1;
            } else {
                runs.push(n);
                n = 1;
            }
        }
        assert!(runs.iter().all(|&r| r >= 3), "{runs:?}");
    }
}

#[test]
fn corpus_spec_rejects_bad_values() {
    for spec in [
        SyntheticCorpusSpec {
            num_phones: 1,
            ..small_spec(1.0)
        },
        SyntheticCorpusSpec {
            sigma: -0.1,
            ..small_spec(1.0)
        },
        SyntheticCorpusSpec {
            dim: 3,
            ..small_spec(1.0)
        },
    ] {
        assert!(matches!(gen_synthetic_corpus(&spec), Err(Error::Config(_))));
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        embed_dim: 16,
        ffn_dim: 32,
        num_heads: 2,
        proj_dim: 8,
        pos_conv_kernel: 4,
        pos_conv_groups: 2,
        ..ModelConfig::default()
    }
}

fn tiny_iteration(source: FeatureSource, steps: u64) -> IterationConfig {
    IterationConfig {
        source,
        clustering: FitConfig {
            k: 8,
            batch_size: 200,
            max_batches: 20,
            n_starts: 2,
            ..FitConfig::default()
        },
        subsample: 0.5,
        train: TrainConfig {
            steps,
            batch_size: 2,
            crop_frames: 30,
            ..TrainConfig::default()
        },
        probe_layer: Some(1),
    }
}

fn tiny_config(dir: &Path, steps: u64) -> PipelineConfig {
    PipelineConfig {
        work_dir: dir.to_path_buf(),
        seed: 5,
        corpus: CorpusSource::Synthetic(small_spec(1.0)),
        model: tiny_model(),
        iterations: vec![
            tiny_iteration(FeatureSource::Mfcc, steps),
            tiny_iteration(FeatureSource::Layer(1), steps),
        ],
        ..PipelineConfig::default()
    }
}

#[test]
fn first_iteration_must_cluster_mfcc() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), 1);
    cfg.iterations[0].source = FeatureSource::Layer(1);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = tiny_config(dir.path(), 1);
    cfg.iterations[1].source = FeatureSource::Mfcc;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = tiny_config(dir.path(), 1);
    cfg.iterations[1].source = FeatureSource::Layer(3);
    assert!(cfg.validate().is_err());
    assert!(tiny_config(dir.path(), 1).validate().is_ok());
}

#[test]
fn config_survives_toml() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3);
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
    let partial = PipelineConfig::from_toml_str("seed = 4\nwork_dir = \"w\"\n").unwrap();
    assert_eq!(partial.seed, 4);
    assert_eq!(partial.iterations.len(), 2);
    assert!(PipelineConfig::from_toml_str("seed = \"x\"").is_err());
}

#[test]
fn zero_steps_keeps_the_initial_model() {
    let dir = tempdir().unwrap();
    let ctx = RunContext::prepare(tiny_config(dir.path(), 0)).unwrap();
    let out = ctx.run_iteration(1).unwrap();
    let saved = checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(saved.step, 0);
    assert_eq!(out.labels.len(), 12);
    assert!(out.dir.join(LABELS_FILE).exists());
    let seed = maskunit::seed::derive_seed(5, &["iteration".into(), 1usize.into(), "init".into()]);
    let mut cfg = tiny_model();
    cfg.codebook_sizes = vec![8];
    cfg.input_dim = 8;
    let mut fresh = MaskedPredictionModel::new(cfg, seed).unwrap();
    checkpoint::round_to_storage(&mut fresh);
    assert_eq!(checkpoint::encode(&fresh).unwrap(), fs::read(&out.checkpoint).unwrap());
}

#[test]
fn two_iterations_write_every_artifact() {
    let dir = tempdir().unwrap();
    let outs = run_pipeline(tiny_config(dir.path(), 4)).unwrap();
    assert_eq!(outs.len(), 2);
    for (i, o) in outs.iter().enumerate() {
        let d = dir.path().join(format!("it{}", i + 1));
        for f in [CODEBOOK_FILE, LABELS_FILE, CHECKPOINT_FILE, METRICS_FILE] {
            assert!(d.join(f).exists(), "{}", d.join(f).display());
        }
        let m = o.metrics.as_ref().unwrap();
        assert!(m.teacher.pnmi >= 0.0 && m.teacher.pnmi <= 1.0);
        assert_eq!(m.probe.as_ref().unwrap().layer, 1);
        assert_eq!(o.train.losses.len(), 4);
    }
    assert_eq!(
        io::read_features(dir.path().join("corpus/features/utt00000.mulf")).unwrap().kind,
        FeatureKind::Mfcc
    );
    assert_eq!(
        maskunit::clustering::Codebook::load(dir.path().join("it2").join(CODEBOOK_FILE))
            .unwrap()
            .kind,
        FeatureKind::EncoderLayer(1)
    );
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>, std::time::SystemTime)> {
    let mut out = Vec::new();
    for i in 1..=2 {
        for f in [CODEBOOK_FILE, LABELS_FILE, CHECKPOINT_FILE, METRICS_FILE] {
            let p = dir.join(format!("it{i}")).join(f);
            let meta = fs::metadata(&p).unwrap();
            out.push((format!("it{i}/{f}"), fs::read(&p).unwrap(), meta.modified().unwrap()));
        }
    }
    out
}

#[test]
fn deleted_artifacts_are_rebuilt_without_touching_upstream() {
    let dir = tempdir().unwrap();
    run_pipeline(tiny_config(dir.path(), 3)).unwrap();
    let before = snapshot(dir.path());
    fs::remove_file(dir.path().join("it2").join(CHECKPOINT_FILE)).unwrap();
    run_pipeline(tiny_config(dir.path(), 3)).unwrap();
    let after = snapshot(dir.path());
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(b.1, a.1, "{} changed", b.0);
        if b.0 != "it2/checkpoint.muck" {
            assert_eq!(b.2, a.2, "{} was rewritten", b.0);
        }
    }
}

#[test]
fn later_iteration_needs_upstream_checkpoint() {
    let dir = tempdir().unwrap();
    let ctx = RunContext::prepare(tiny_config(dir.path(), 1)).unwrap();
    match ctx.run_iteration(2) {
        Err(Error::MissingArtifact(p)) => assert!(p.ends_with("it1/checkpoint.muck"), "{}", p.display()),
        other => panic!("expected missing artifact, got {other:?}"),
    }
    assert!(ctx.run_iteration(3).is_err());
}

#[test]
fn corpus_without_phones_omits_metrics() {
    let dir = tempdir().unwrap();
    let corpus = gen_synthetic_corpus(&small_spec(1.0)).unwrap();
    let manifest = corpus.write(dir.path().join("c")).unwrap();
    let mut cfg = tiny_config(&dir.path().join("w"), 1);
    cfg.corpus = CorpusSource::Manifest { manifest, phones: None };
    cfg.iterations.truncate(1);
    let outs = run_pipeline(cfg).unwrap();
    assert!(outs[0].metrics.is_none());
    assert!(!dir.path().join("w/it1").join(METRICS_FILE).exists());
}

#[test]
fn corruption_touches_the_requested_share() {
    let clean: Vec<LabelLine> = (0..5)
        .map(|u| LabelLine {
            utterance_id: format!("u{u}"),
            labels: (0..50).map(|i| (i % 7) as u32).collect(),
        })
        .collect();
    let noisy = corrupt_labels(&clean, 0.4, 7, 3).unwrap();
    for (c, n) in clean.iter().zip(&noisy) {
        let changed = c.labels.iter().zip(&n.labels).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 20);
        assert!(n.labels.iter().all(|&l| l < 7));
    }
    assert_eq!(noisy, corrupt_labels(&clean, 0.4, 7, 3).unwrap());
    assert_eq!(corrupt_labels(&clean, 0.0, 7, 3).unwrap(), clean);
    assert!(corrupt_labels(&clean, 0.4, 5, 3).is_err());
}

#[test]
fn stability_grid_shape_and_single_trial() {
    let dir = tempdir().unwrap();
    let ctx = RunContext::prepare(tiny_config(dir.path(), 1)).unwrap();
    let phones = ctx.corpus.phones.as_ref().unwrap();
    let base = ctx.config.iterations[0].clustering.clone();
    let g = stability_study(&ctx.corpus.features, phones, &ctx.split, &[4, 8, 12], &[0.5, 1.0], 1, &base, 1).unwrap();
    assert_eq!(g.mean.len(), 3);
    assert!(g.mean.iter().all(|r| r.len() == 2));
    assert!(g.std.iter().flatten().all(|&s| s == 0.0));
    let g3 = stability_study(&ctx.corpus.features, phones, &ctx.split, &[8], &[1.0], 3, &base, 1).unwrap();
    assert!(g3.std[0][0] >= 0.0 && g3.std[0][0] < 0.2);
}

#[test]
fn layer_sweep_covers_every_layer() {
    let dir = tempdir().unwrap();
    let ctx = RunContext::prepare(tiny_config(dir.path(), 2)).unwrap();
    let out = ctx.run_iteration(1).unwrap();
    let model = checkpoint::load(&out.checkpoint).unwrap();
    let inputs = ctx.corpus.model_inputs(model.config.input_mode).unwrap();
    let phones = ctx.corpus.phones.as_ref().unwrap();
    let base = ctx.config.iterations[0].clustering.clone();
    let rows = layer_sweep(&model, &inputs, phones, &ctx.split, &[4, 8], 1.0, &base, 2).unwrap();
    assert_eq!(rows.len(), 3 * 2);
    assert_eq!(rows[0].layer, 0);
    assert_eq!(rows[5].layer, 2);

    // layer 0 equals clustering the transformer input directly
    let l0 = maskunit::model::extract_features(&model, &inputs, 0).unwrap();
    let fit = FitConfig {
        k: 4,
        seed: maskunit::seed::derive_seed(2, &["layer-sweep".into(), 4usize.into()]),
        ..base
    };
    let cb = maskunit::pipeline::fit_on_split(&l0, &ctx.split.train, 1.0, &fit).unwrap();
    let units = maskunit::pipeline::assign_all(&cb, &l0).unwrap();
    let direct: MetricsReport = maskunit::pipeline::held_out_report(phones, &units, &ctx.split.held_out).unwrap();
    assert_eq!(direct.pnmi, rows[0].pnmi);
}

#[test]
fn alpha_sweep_reports_each_setting() {
    let dir = tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), 2);
    cfg.ablation = AblationConfig {
        train: cfg.iterations[0].train.clone(),
        teacher: TeacherConfig::NoisyPhones { corruption: 0.4 },
        probe_layer: Some(1),
        probe_clustering: cfg.iterations[0].clustering.clone(),
        probe_subsample: 1.0,
        ..AblationConfig::default()
    };
    let ctx = RunContext::prepare(cfg).unwrap();
    let reports = alpha_sweep(&ctx, &ctx.config.ablation, &[1.0, 0.5, 0.0]).unwrap();
    assert_eq!(reports.len(), 3);
    assert_eq!(reports[2].alpha, 0.0);
    assert!(reports.iter().all(|r| r.probe.is_some() && r.held_out.masked_frames > 0));
}

#[test]
fn ensemble_heads_and_initial_loss() {
    let dir = tempdir().unwrap();
    let ctx = RunContext::prepare(tiny_config(dir.path(), 0)).unwrap();
    let out = ensemble_run(&ctx, &EnsembleTeacher::Kmeans { ks: vec![4, 8, 16] }).unwrap();
    assert_eq!(out.report.head_count, 3);
    assert_eq!(out.ensemble.codebooks.len(), 3);
    let expected: f64 = [4.0f64, 8.0, 16.0].iter().map(|c| c.ln()).sum();
    let per_frame = out.report.initial_loss * 3.0;
    assert!((per_frame - expected).abs() < 0.1 * expected, "{per_frame} vs {expected}");
    assert_eq!(out.report.teachers.len(), 3);

    let pq = ensemble_run(
        &ctx,
        &EnsembleTeacher::Product {
            partition: vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7]],
            k: 4,
        },
    )
    .unwrap();
    assert_eq!(pq.report.head_count, 3);
    assert_eq!(pq.ensemble.target_space_size(), 64);
}

#[test]
fn single_codebook_ensemble_matches_plain_iteration() {
    let dir = tempdir().unwrap();
    let ctx = RunContext::prepare(tiny_config(dir.path(), 3)).unwrap();
    let plain = ctx.run_iteration(1).unwrap();
    let mut ens = ensemble_run(&ctx, &EnsembleTeacher::Kmeans { ks: vec![8] }).unwrap();
    assert_eq!(ens.ensemble.codebooks[0], plain.codebook);
    checkpoint::round_to_storage(&mut ens.model);
    assert_eq!(checkpoint::encode(&ens.model).unwrap(), fs::read(&plain.checkpoint).unwrap());
}

#[test]
fn minibatch_teacher_matches_config() {
    let it = tiny_iteration(FeatureSource::Mfcc, 1);
    assert_eq!(it.clustering.method, FitMethod::MiniBatch);
}
