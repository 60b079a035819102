use lixp::adapters::Classifier;
use lixp::eval::{
    compare_runs, run_episodes, EpisodePools, EpisodeResult, EpisodeSpec, ResultTable,
};
use lixp::format::{export_embeddings, import_embeddings};
use lixp::{Array2, EmbeddingBatch, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `n` classes with `per_class` noisy rows around random centres.
fn pool(
    rng: &mut ChaCha8Rng,
    n: usize,
    per_class: usize,
    d: usize,
    noise: f64,
    centers: &Array2,
) -> (Array2, Vec<usize>) {
    let labels: Vec<usize> = (0..n)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect();
    let x = Array2::from_fn(labels.len(), d, |i, j| {
        centers.get(labels[i], j) + noise * rng.sample::<f64, _>(StandardNormal)
    });
    (x, labels)
}

fn pools(seed: u64, noise: f64, support_per_class: usize) -> EpisodePools {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (5, 8);
    let centers = Array2::from_fn(n, d, |_, _| rng.sample(StandardNormal));
    let (s, sl) = pool(&mut rng, n, support_per_class, d, noise, &centers);
    let (t, tl) = pool(&mut rng, n, 12, d, noise, &centers);
    let texts = Array2::from_fn(n, d, |_, _| rng.sample(StandardNormal));
    EpisodePools::new(&s, sl, &t, tl, &texts).unwrap()
}

fn all_classifiers() -> Vec<Classifier> {
    Classifier::NAMES
        .iter()
        .map(|n| Classifier::from_name(n).unwrap())
        .collect()
}

#[test]
fn zero_shots_produce_only_support_free_rows() {
    let spec = EpisodeSpec {
        shots: vec![0],
        num_episodes: 3,
        classifiers: all_classifiers(),
        ..EpisodeSpec::default()
    };
    let table = run_episodes(&pools(1, 0.5, 6), &spec).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert!(table
        .rows
        .iter()
        .all(|r| r.classifier == "zero_shot" && r.shots == 0));
    // zero-shot does not depend on the episode
    assert!(table
        .rows
        .windows(2)
        .all(|w| w[0].accuracy == w[1].accuracy));
}

#[test]
fn episodes_are_reproducible_and_seed_dependent() {
    let p = pools(2, 1.0, 10);
    let spec = EpisodeSpec {
        shots: vec![1, 2, 4],
        num_episodes: 2,
        seed: 5,
        classifiers: all_classifiers(),
        parallel: true,
    };
    let a = run_episodes(&p, &spec).unwrap();
    assert_eq!(a, run_episodes(&p, &spec).unwrap());
    assert_eq!(
        a,
        run_episodes(
            &p,
            &EpisodeSpec {
                parallel: false,
                ..spec.clone()
            }
        )
        .unwrap()
    );
    assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    let other = run_episodes(&p, &EpisodeSpec { seed: 6, ..spec }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn support_draws_are_stratified() {
    let p = pools(3, 0.5, 9);
    for k in 1..=9 {
        for seed in 0..5 {
            let spt = p.sample_support(k, seed).unwrap();
            assert_eq!(spt.len(), 5 * k);
            for rows in spt.class_index() {
                assert_eq!(rows.len(), k);
            }
            let mut seen: Vec<Vec<u64>> = spt
                .embeddings()
                .iter_rows()
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), 5 * k, "rows drawn twice");
        }
    }
}

#[test]
fn separable_pool_is_solved_by_prototypes() {
    let spec = EpisodeSpec {
        shots: vec![1, 2, 3],
        num_episodes: 3,
        classifiers: vec![Classifier::Prototypical],
        ..EpisodeSpec::default()
    };
    let table = run_episodes(&pools(4, 0.0, 3), &spec).unwrap();
    assert!(table.rows.iter().all(|r| r.accuracy == 1.0));
}

#[test]
fn short_class_is_named() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let centers = Array2::identity(3);
    let (s, mut sl) = pool(&mut rng, 3, 4, 3, 0.1, &centers);
    sl[8] = 1; // class 2 keeps 3 rows
    let (t, tl) = pool(&mut rng, 3, 2, 3, 0.1, &centers);
    let p = EpisodePools::new(&s, sl, &t, tl, &centers).unwrap();
    let spec = EpisodeSpec {
        shots: vec![4],
        ..EpisodeSpec::default()
    };
    let err = run_episodes(&p, &spec).unwrap_err();
    assert!(matches!(
        err,
        Error::InsufficientSupport {
            class: 2,
            needed: 4,
            available: 3
        }
    ));
    assert!(err.to_string().contains("class 2"));
}

#[test]
fn pools_load_from_exported_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let centers = Array2::from_fn(3, 5, |_, _| rng.sample(StandardNormal));
    let (s, sl) = pool(&mut rng, 3, 4, 5, 0.3, &centers);
    let (t, tl) = pool(&mut rng, 3, 4, 5, 0.3, &centers);
    let paths = ["support", "test", "texts"].map(|n| dir.path().join(format!("{n}.emb")));
    let batches = [
        EmbeddingBatch::from_raw(s),
        EmbeddingBatch::from_raw(t),
        EmbeddingBatch::from_raw(centers),
    ];
    let labels = [sl, tl, vec![0, 1, 2]];
    for ((b, l), p) in batches.iter().zip(&labels).zip(&paths) {
        export_embeddings(b, l, p).unwrap();
        let back = import_embeddings(p).unwrap();
        assert_eq!(back.embeddings, b.normalized.map(|v| v as f32 as f64));
        assert_eq!(back.class_labels().unwrap(), *l);
    }
    let files = paths.map(|p| import_embeddings(p).unwrap());
    let p = EpisodePools::from_files(&files[0], &files[1], &files[2]).unwrap();
    let spec = EpisodeSpec {
        shots: vec![0, 2],
        num_episodes: 2,
        ..EpisodeSpec::default()
    };
    assert_eq!(run_episodes(&p, &spec).unwrap().rows.len(), 2 + 4);
}

#[test]
fn tables_persist_as_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let spec = EpisodeSpec {
        shots: vec![0, 1, 3],
        num_episodes: 3,
        classifiers: all_classifiers(),
        ..EpisodeSpec::default()
    };
    let table = run_episodes(&pools(5, 0.8, 5), &spec).unwrap();
    let path = dir.path().join("run.csv");
    table.save(&path).unwrap();
    assert_eq!(ResultTable::load(&path).unwrap(), table);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), table.rows.len());
    assert_eq!(
        json["aggregates"].as_array().unwrap().len(),
        table.aggregates().len()
    );
}

fn random_table(
    rng: &mut ChaCha8Rng,
    classifiers: &[&str],
    shots: &[usize],
    episodes: usize,
) -> ResultTable {
    let mut rows = Vec::new();
    for &k in shots {
        for e in 0..episodes {
            for c in classifiers {
                rows.push(EpisodeResult {
                    classifier: c.to_string(),
                    shots: k,
                    episode: e,
                    num_classes: 7,
                    accuracy: rng.random_range(0.05..1.0),
                });
            }
        }
    }
    ResultTable { rows }
}

proptest! {
    #[test]
    fn aggregates_recompute_from_rows(seed in any::<u64>(), episodes in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random_table(&mut rng, &["prototypical", "tip"], &[1, 4], episodes);
        for a in table.aggregates() {
            let accs: Vec<f64> = table
                .rows
                .iter()
                .filter(|r| r.classifier == a.classifier && r.shots == a.shots)
                .map(|r| r.accuracy)
                .collect();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let var = if accs.len() > 1 {
                accs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (accs.len() - 1) as f64
            } else {
                0.0
            };
            prop_assert_eq!(a.episodes, episodes);
            prop_assert!((a.mean - mean).abs() <= 1e-12);
            prop_assert!((a.std - var.sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn gains_match_a_spreadsheet_loop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shots = [1, 2, 4, 8];
        let names = ["prototypical", "nn_softmax"];
        let base = random_table(&mut rng, &names, &shots, 3);
        let ctx = random_table(&mut rng, &names, &shots, 3);
        let report = compare_runs(&base, &ctx).unwrap();
        prop_assert_eq!(report.cells.len(), 8);
        let mut points = Vec::new();
        for cell in &report.cells {
            let mean = |t: &ResultTable| {
                let mut sum = 0.0;
                let mut count = 0.0;
                for r in &t.rows {
                    if r.classifier == cell.classifier && r.shots == cell.shots {
                        sum += r.accuracy;
                        count += 1.0;
                    }
                }
                sum / count
            };
            let (b, c) = (mean(&base), mean(&ctx));
            prop_assert!((cell.absolute - (c - b)).abs() <= 1e-12);
            prop_assert!((cell.relative - (c - b) / b).abs() <= 1e-12);
            prop_assert_eq!(cell.num_examples, 7 * cell.shots);
            points.push((cell.num_examples as f64, cell.relative));
        }
        let fit = report.fit.unwrap();
        let direct = lixp::eval::relative_gain_fit(&points).unwrap();
        prop_assert!((fit.slope - direct.slope).abs() <= 1e-12);
        prop_assert!((fit.intercept - direct.intercept).abs() <= 1e-12);
    }
}
