use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stemedit::audio::Waveform;
use stemedit::datagen::{
    build_manifest, gen_synthetic_track, load_record_audio, plan_triplets, read_manifest, sample_triplet, silence_fraction,
    DatagenConfig, Task,
};

fn cfg() -> DatagenConfig {
    DatagenConfig { sample_rate: 8000, track_seconds: 3.0, clip_seconds: 1.0, ..DatagenConfig::default() }
}

fn minus(a: &Waveform, b: &Waveform) -> Vec<f32> {
    a.samples.iter().zip(&b.samples).map(|(x, y)| x - y).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, ..ProptestConfig::default() })]

    #[test]
    fn triplets_obey_the_mixing_algebra(track_seed in any::<u64>(), draw_seed in any::<u64>(), n_stems in 2usize..=4) {
        let cfg = cfg();
        let track = gen_synthetic_track(track_seed, n_stems, 3.0, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        for _ in 0..6 {
            let Ok(t) = sample_triplet(&track, &mut rng, &cfg) else { continue };
            prop_assert_eq!(t.condition.len(), 8000);
            prop_assert_eq!(t.target.len(), 8000);
            prop_assert!(silence_fraction(&t.stem, cfg.silence_frame_ms, cfg.silence_threshold) <= 0.5);
            match t.task {
                Task::Add => prop_assert_eq!(minus(&t.target, &t.condition), t.stem.samples.clone()),
                Task::Remove => {
                    prop_assert!(t.n_other_stems >= 1);
                    prop_assert_eq!(minus(&t.condition, &t.target), t.stem.samples.clone());
                }
                Task::Extract => {
                    prop_assert!(t.n_other_stems >= 1);
                    prop_assert_eq!(&t.target, &t.stem);
                }
            }
            let verb = match t.task { Task::Add => "Add", Task::Remove => "Remove", Task::Extract => "Extract" };
            prop_assert_eq!(t.instruction.clone(), format!("{verb} {}", t.target_stem_label));
        }
    }
}

#[test]
fn manifest_has_one_record_and_two_files_per_triplet_and_is_reproducible() {
    let cfg = cfg();
    let tracks: Vec<_> = (0..5).map(|s| gen_synthetic_track(100 + s, 3, 3.0, &cfg).unwrap()).collect();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = build_manifest(&tracks, 10, 42, a.path(), &cfg).unwrap();
    let pb = build_manifest(&tracks, 10, 42, b.path(), &cfg).unwrap();
    let records = read_manifest(&pa).unwrap();
    assert_eq!(records.len(), 10);
    assert_eq!(std::fs::read_dir(a.path().join("audio")).unwrap().count(), 20);
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    for r in &records {
        assert_eq!(
            std::fs::read(a.path().join(&r.target_path)).unwrap(),
            std::fs::read(b.path().join(&r.target_path)).unwrap()
        );
    }
    // Exported files preserve the algebra.
    for r in records.iter().filter(|r| r.task == Task::Remove) {
        let (cond, target) = load_record_audio(r, a.path(), 8000).unwrap();
        let track = tracks.iter().find(|t| t.track_id == r.track_id).unwrap();
        let start = (r.offset_seconds * 8000.0).round() as usize;
        let stem = track.stem(&r.target_stem).unwrap().waveform.slice(start, 8000).unwrap();
        assert_eq!(minus(&cond, &target), stem.samples);
    }
    let other = build_manifest(&tracks, 10, 43, b.path(), &cfg).unwrap();
    assert_ne!(std::fs::read(&pa).unwrap(), std::fs::read(other).unwrap());
}

#[test]
fn record_draws_do_not_depend_on_the_count() {
    let cfg = cfg();
    let tracks: Vec<_> = (0..4).map(|s| gen_synthetic_track(s, 3, 3.0, &cfg).unwrap()).collect();
    let short = plan_triplets(&tracks, 5, 7, &cfg).unwrap();
    let long = plan_triplets(&tracks, 12, 7, &cfg).unwrap();
    for (a, b) in short.iter().zip(&long) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
