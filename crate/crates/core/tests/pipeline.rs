mod common;

use std::collections::{BTreeSet, HashMap};

use maskbench_core::harness::{
    run_experiment, Criterion, ExperimentPlan, MaskFamily, Phase, QualityScorer, RunOptions, Split, TrialKey,
};
use maskbench_core::metrics::ncm;
use maskbench_core::synth::NoiseKind;
use maskbench_core::{AudioBuffer, CorpusManifest, MaskParams, Result};

fn fixed_cm() -> Vec<MaskParams> {
    [(0.5, 1.0), (1.0, 1.0), (2.0, 0.5), (4.0, 1.0), (4.0, 2.0)]
        .into_iter()
        .map(|(gamma, mu)| MaskParams::Conformable { gamma, mu })
        .collect()
}

fn plan(criterion: Criterion) -> ExperimentPlan {
    ExperimentPlan {
        snr_levels_db: vec![-5.0, 5.0],
        noises: Vec::new(),
        mask_families: vec![MaskFamily::Fixed(fixed_cm())],
        criterion,
        split: Split { train_count: 3, test_count: 2 },
        seed: 11,
    }
}

#[test]
fn report_is_internally_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let manifest =
        CorpusManifest::load(&common::write_corpus(dir.path(), 6, 1.0, &[NoiseKind::White, NoiseKind::Babble]))
            .unwrap();
    let report = run_experiment(&plan(Criterion::Intelligibility), &manifest, &RunOptions::default()).unwrap();
    let grid = fixed_cm();

    let mut sets: HashMap<(String, String), (BTreeSet<String>, BTreeSet<String>)> = HashMap::new();
    for (noise, snr, id, phase) in &report.split {
        let entry = sets.entry((noise.clone(), snr.to_string())).or_default();
        match phase {
            Phase::Train => entry.0.insert(id.clone()),
            Phase::Test => entry.1.insert(id.clone()),
        };
    }
    assert_eq!(sets.len(), 4);
    for (train, test) in sets.values() {
        assert_eq!((train.len(), test.len()), (3, 2));
        assert!(train.is_disjoint(test));
    }

    assert_eq!(report.params.len(), 4);
    for row in &report.params {
        assert!(grid.contains(&row.params), "{:?}", row.params);
        assert_eq!(row.n, 3);
    }
    for t in report.trials.iter().filter(|t| t.phase == Phase::Train) {
        assert!(grid.contains(&t.params.unwrap()));
    }

    assert_eq!(report.scores.len(), 12);
    for row in &report.scores {
        let ncms: Vec<f64> = report
            .trials
            .iter()
            .filter(|t| t.phase == Phase::Test && t.noise == row.noise && t.snr_db == row.snr_db && t.mask == row.mask)
            .map(|t| t.scores.unwrap().ncm)
            .collect();
        assert_eq!(ncms.len(), row.n);
        let mean = ncms.iter().sum::<f64>() / ncms.len() as f64;
        assert!((mean - row.mean_ncm).abs() < 1e-12);
        assert!(row.q1 <= row.median_ncm && row.median_ncm <= row.q3);
        assert!(row.mean_quality.is_none());
    }
}

/// Rates one parameter set highly and everything else poorly.
struct Prefers(MaskParams);

impl QualityScorer for Prefers {
    fn quality(&self, _: &TrialKey, params: &MaskParams, _: &AudioBuffer, _: &AudioBuffer) -> Result<Option<f64>> {
        Ok(Some(if *params == self.0 { 4.5 } else { 1.0 }))
    }
}

#[test]
fn quality_criterion_follows_the_scorer() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = CorpusManifest::load(&common::write_corpus(dir.path(), 5, 1.0, &[NoiseKind::Train])).unwrap();
    let target = MaskParams::Conformable { gamma: 0.5, mu: 1.0 };
    let scorer = Prefers(target);
    let opts = RunOptions { quality: Some(&scorer), ..RunOptions::default() };
    let report = run_experiment(&plan(Criterion::Quality), &manifest, &opts).unwrap();
    assert!(report.params.iter().all(|r| r.params == target));
    for row in &report.scores {
        let expected = if row.params == target { 4.5 } else { 1.0 };
        assert_eq!(row.mean_quality, Some(expected), "{}", row.mask);
    }

    let missing = run_experiment(&plan(Criterion::Composite), &manifest, &RunOptions::default());
    assert!(missing.is_err());
}

#[test]
fn oversized_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = CorpusManifest::load(&common::write_corpus(dir.path(), 4, 0.5, &[NoiseKind::White])).unwrap();
    let mut p = plan(Criterion::Intelligibility);
    p.split = Split { train_count: 3, test_count: 2 };
    assert!(run_experiment(&p, &manifest, &RunOptions::default()).is_err());
}

#[test]
fn tuned_masks_beat_the_unprocessed_mixture() {
    use maskbench_core::harness::PreparedTrial;
    let dir = tempfile::tempdir().unwrap();
    let manifest = CorpusManifest::load(&common::write_corpus(dir.path(), 1, 1.0, &[NoiseKind::Babble])).unwrap();
    let speech = maskbench_core::io::read_wav(&manifest.entries[0].speech_path).unwrap();
    let noise = maskbench_core::io::read_wav(&manifest.noise_profiles[0].noise_path).unwrap();
    let key = TrialKey { id: "utt00".into(), noise: "babble".into(), snr_db: -5.0 };
    let trial = PreparedTrial::new(key, &speech, &noise, 3, &Default::default()).unwrap();
    // A threshold far below any SNR passes everything through.
    let passthrough = trial.process(&MaskParams::Binary { mu0: 1e-12 }).unwrap();
    let wiener = trial.process(&MaskParams::Wiener).unwrap();
    assert_eq!(passthrough.len(), speech.len());
    let raw = ncm(trial.clean(), &passthrough).unwrap();
    assert!(ncm(trial.clean(), &wiener).unwrap() > raw);
    assert!(trial.evaluate(&MaskParams::Wiener, None).unwrap().ncm > raw);
}
