use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stemedit::audio::Waveform;
use stemedit::autograd::Mat;
use stemedit::codec::{CodebookStack, CodecConfig};
use stemedit::datagen::{build_manifest, gen_synthetic_track, load_record_audio, read_manifest, DatagenConfig, Task};
use stemedit::metrics::{
    evaluate, fad, kl_div, si_sdr, si_sdri, ssim, CodecEmbedder, CopyEditor, EmbeddingSetStats, MetricsConfig,
    OracleEditor,
};

fn wave(samples: Vec<f32>) -> Waveform {
    Waveform::new(samples, 8000).unwrap()
}

fn noise(seed: u64, len: usize) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    wave((0..len).map(|_| rng.gen_range(-0.5f32..0.5)).collect())
}

fn features(seed: u64, rows: usize, dim: usize, shift: f64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_shape_simple_fn((rows, dim), || rng.gen_range(-1.0..1.0) + shift)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    // 16-bit samples times an 8-bit coefficient are exact in f32, so the
    // scaled waveform is exactly `c · est`.
    #[test]
    fn si_sdr_is_scale_invariant(seed in any::<u64>(), k in prop_oneof![-255i32..=-1, 1i32..=255]) {
        let c = k as f32 / 16.0;
        let reference = noise(seed, 400);
        let est = wave(noise(seed ^ 1, 400).samples.iter().map(|v| (v * 32768.0).round() / 32768.0).collect());
        let scaled = wave(est.samples.iter().map(|v| v * c).collect());
        let a = si_sdr(&est, &reference).unwrap();
        let b = si_sdr(&scaled, &reference).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn si_sdri_of_the_condition_is_zero(seed in any::<u64>()) {
        let reference = noise(seed, 300);
        let condition = noise(seed.wrapping_add(7), 300);
        prop_assert_eq!(si_sdri(&condition, &condition, &reference).unwrap(), 0.0);
        let est = noise(seed.wrapping_add(9), 300);
        let expected = si_sdr(&est, &reference).unwrap() - si_sdr(&condition, &reference).unwrap();
        prop_assert!((si_sdri(&est, &condition, &reference).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_bounded_symmetric_and_reflexive(seed in any::<u64>(), len in 1024usize..3000) {
        let cfg = MetricsConfig::default();
        let a = noise(seed, len);
        let b = noise(seed ^ 0xff, len);
        let ab = ssim(&a, &b, &cfg).unwrap();
        prop_assert!(ab.abs() <= 1.0);
        prop_assert_eq!(ab, ssim(&b, &a, &cfg).unwrap());
        prop_assert_eq!(ssim(&a, &a, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn fad_is_symmetric_nonnegative_and_zero_on_itself(seed in any::<u64>(), dim in 1usize..6, shift in -2.0f64..2.0) {
        let a = EmbeddingSetStats::from_features(&features(seed, 40, dim, 0.0)).unwrap();
        let b = EmbeddingSetStats::from_features(&features(seed ^ 3, 30, dim, shift)).unwrap();
        let ab = fad(&a, &b).unwrap();
        prop_assert!(ab >= -1e-8);
        prop_assert_eq!(ab, fad(&b, &a).unwrap());
        prop_assert!(fad(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(seed in any::<u64>(), dim in 1usize..6, shift in -2.0f64..2.0) {
        let a = features(seed, 40, dim, 0.0);
        let b = features(seed ^ 5, 25, dim, shift);
        prop_assert!(kl_div(&a, &b, 1e-8).unwrap() >= 0.0);
        prop_assert!(kl_div(&a, &a, 1e-8).unwrap().abs() < 1e-8);
    }

    #[test]
    fn metrics_are_pure(seed in any::<u64>()) {
        let cfg = MetricsConfig::default();
        let (a, b) = (noise(seed, 2048), noise(seed ^ 2, 2048));
        prop_assert_eq!(si_sdr(&a, &b).unwrap().to_bits(), si_sdr(&a, &b).unwrap().to_bits());
        prop_assert_eq!(ssim(&a, &b, &cfg).unwrap().to_bits(), ssim(&a, &b, &cfg).unwrap().to_bits());
    }
}

#[test]
fn one_dimensional_closed_forms() {
    let a = EmbeddingSetStats::from_moments(vec![0.0], vec![1.0], 10).unwrap();
    let b = EmbeddingSetStats::from_moments(vec![3.0], vec![1.0], 10).unwrap();
    assert!((fad(&a, &b).unwrap() - 9.0).abs() < 1e-6);
    // Symmetric two-point samples give exact unit variance about the means.
    let x = Mat::from_shape_vec((2, 1), vec![-(0.5f64).sqrt(), (0.5f64).sqrt()]).unwrap();
    let y = &x + 1.0;
    assert!((kl_div(&x, &y, 1e-8).unwrap() - 0.5).abs() < 1e-6);
    let zero_ref = wave(vec![0.0; 16]);
    assert!(si_sdr(&noise(1, 16), &zero_ref).is_err());
    let est = wave(vec![1.0, 1.0]);
    let reference = wave(vec![1.0, 0.0]);
    assert!(si_sdr(&est, &reference).unwrap().abs() < 1e-9);
}

fn small_manifest(dir: &std::path::Path, count: usize) -> (CodebookStack, Vec<stemedit::datagen::ManifestRecord>) {
    let cfg = DatagenConfig { sample_rate: 8000, track_seconds: 3.0, clip_seconds: 1.0, ..DatagenConfig::default() };
    let tracks: Vec<_> = (0..4).map(|s| gen_synthetic_track(s, 3, 3.0, &cfg).unwrap()).collect();
    let path = build_manifest(&tracks, count, 5, dir, &cfg).unwrap();
    let audio: Vec<Waveform> = tracks.iter().flat_map(|t| t.stems.iter().map(|s| s.waveform.clone())).collect();
    let codec_cfg = CodecConfig { sample_rate: 8000, n_codebooks: 2, codebook_size: 16, feature_dim: 8, ..CodecConfig::default() };
    (CodebookStack::fit(&audio, &codec_cfg, 1).unwrap(), read_manifest(&path).unwrap())
}

#[test]
fn copy_and_oracle_editors_hit_their_definitional_values() {
    let dir = tempfile::tempdir().unwrap();
    let (codec, records) = small_manifest(dir.path(), 24);
    let cfg = MetricsConfig::default();
    let embedder = CodecEmbedder(&codec);

    let copy = evaluate(dir.path(), 8000, &records, &CopyEditor, &embedder, &cfg);
    assert!(copy.failures.is_empty());
    for task in [Task::Remove, Task::Extract] {
        let m = copy.task(task).unwrap();
        assert!(m.count > 0);
        assert_eq!(m.si_sdri, Some(0.0), "{task}");
    }
    assert_eq!(copy.task(Task::Add).unwrap().si_sdr, None);
    assert_eq!(copy.task(Task::Add).unwrap().si_sdri, None);
    assert!(copy.tasks.iter().all(|t| t.clap.is_none()));

    let answers: BTreeMap<String, Waveform> = records
        .iter()
        .map(|r| (r.id.clone(), load_record_audio(r, dir.path(), 8000).unwrap().1))
        .collect();
    let oracle = evaluate(dir.path(), 8000, &records, &OracleEditor(answers), &embedder, &cfg);
    for m in &oracle.tasks {
        assert_eq!(m.ssim, Some(1.0), "{}", m.task);
        assert!(m.fad.unwrap().abs() < 1e-8);
        assert!(m.kl.unwrap().abs() < 1e-8);
    }
    for task in [Task::Remove, Task::Extract] {
        let rows: Vec<_> = records.iter().filter(|r| r.task == task).collect();
        let expected = rows
            .iter()
            .map(|r| {
                let (cond, target) = load_record_audio(r, dir.path(), 8000).unwrap();
                cfg.si_sdr_cap - si_sdr(&cond, &target).unwrap().min(cfg.si_sdr_cap)
            })
            .sum::<f64>()
            / rows.len() as f64;
        let got = oracle.task(task).unwrap().si_sdri.unwrap();
        assert!((got - expected).abs() < 1e-9, "{task}: {got} vs {expected}");
        assert_eq!(oracle.task(task).unwrap().si_sdr, Some(cfg.si_sdr_cap));
    }
    // Reports regenerate identically.
    assert_eq!(copy.to_json(), evaluate(dir.path(), 8000, &records, &CopyEditor, &embedder, &cfg).to_json());
}

#[test]
fn missing_audio_is_listed_and_evaluation_continues() {
    let dir = tempfile::tempdir().unwrap();
    let (codec, records) = small_manifest(dir.path(), 6);
    std::fs::remove_file(dir.path().join(&records[2].condition_path)).unwrap();
    let report = evaluate(dir.path(), 8000, &records, &CopyEditor, &CodecEmbedder(&codec), &MetricsConfig::default());
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].0, records[2].id);
    assert_eq!(report.tasks.iter().map(|t| t.count).sum::<usize>(), 5);
}
