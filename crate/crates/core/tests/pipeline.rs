use std::path::{Path, PathBuf};

use relground::corpus::load_corpus;
use relground::dataio::{self, DatasetIndex};
use relground::evalx;
use relground::features::{EmbeddingTable, FeatureSchema};
use relground::geometry::DenoiseConfig;
use relground::ranking::{detector_only, Grounder, LiftCache, RankingConfig};
use relground::srm::{self, TrainConfig};
use relground::synthgen::{generate_benchmark, SceneSpec};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn embeddings() -> EmbeddingTable {
    EmbeddingTable::load(&fixture("embeddings50.txt")).unwrap()
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        hidden: [16, 8],
        ..Default::default()
    }
}

#[test]
fn embeddings_fixture_covers_synthetic_classes() {
    let table = embeddings();
    assert_eq!(table.dim(), 50);
    for class in relground::synthgen::CLASSES {
        for word in class.split_whitespace() {
            assert!(table.get(word).is_some(), "missing {word}");
        }
    }
}

#[test]
fn language_schemas_train_and_ground() {
    let dir = tempfile::tempdir().unwrap();
    generate_benchmark(20, &SceneSpec { seed: 4, ..Default::default() }, 2, dir.path()).unwrap();
    let table = embeddings();
    let denoise = DenoiseConfig::default();
    for (schema, width) in [(FeatureSchema::Geom3dLng, 130), (FeatureSchema::Geom2dLng, 108)] {
        let corpus = load_corpus(&dir.path().join("train"), schema, Some(&table), &denoise).unwrap();
        assert!(corpus.samples.iter().all(|s| s.x.len() == width));
        let (model, log) = srm::train(&quick_train(), schema, &corpus.vocabulary, &corpus.samples, None).unwrap();
        assert_eq!(model.input_dim(), width);
        assert_eq!(log.epochs.len(), 3);

        let bytes = srm::model_to_bytes(&model);
        assert_eq!(srm::model_from_bytes(&bytes).unwrap(), model);

        let test = dir.path().join("test");
        let index = DatasetIndex::load(&test).unwrap();
        let scene = index.load_scene(&test, 0).unwrap();
        let depth = scene.load_depth_for(&index.manifest_path(&test, 0)).unwrap();
        let grounder = Grounder {
            model: &model,
            embeddings: Some(&table),
            ranking: RankingConfig::for_vocabulary(&model.vocabulary),
            denoise,
        };
        let mut cache = LiftCache::default();
        let expr = &scene.expressions[0];
        let result = grounder.ground(&scene, &depth, expr, &mut cache, true).unwrap();
        assert!((0.0..=1.0).contains(&result.relation_prob));
        assert!(!result.per_pair_table.unwrap().is_empty());

        let no_table = Grounder { embeddings: None, ..grounder };
        assert!(no_table.ground(&scene, &depth, expr, &mut cache, false).unwrap_err().is_validation());
    }
}

#[test]
fn synthetic_manifests_round_trip_byte_stably() {
    let dir = tempfile::tempdir().unwrap();
    generate_benchmark(10, &SceneSpec { seed: 11, ..Default::default() }, 1, dir.path()).unwrap();
    for split in ["train", "val", "test"] {
        let d = dir.path().join(split);
        let index = DatasetIndex::load(&d).unwrap();
        for i in 0..index.scenes.len() {
            let path = index.manifest_path(&d, i);
            let text = std::fs::read_to_string(&path).unwrap();
            let scene = dataio::load_manifest(&path).unwrap();
            scene.validate().unwrap();
            assert_eq!(dataio::manifest_to_string(&scene), text);
        }
    }
}

#[test]
fn geom3d_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    generate_benchmark(100, &SceneSpec { seed: 7, ..Default::default() }, 4, dir.path()).unwrap();
    let denoise = DenoiseConfig::default();
    let train = load_corpus(&dir.path().join("train"), FeatureSchema::Geom3d, None, &denoise).unwrap();
    let (model, _) =
        srm::train(&TrainConfig::default(), FeatureSchema::Geom3d, &train.vocabulary, &train.samples, None).unwrap();

    let test_dir = dir.path().join("test");
    let test = load_corpus(&test_dir, FeatureSchema::Geom3d, None, &denoise).unwrap();
    assert!(srm::topk_accuracy(&model, &test.samples, 1).unwrap() >= 95.0);

    let index = DatasetIndex::load(&test_dir).unwrap();
    let ranking = RankingConfig::for_vocabulary(&model.vocabulary);
    let grounder = Grounder { model: &model, embeddings: None, ranking: ranking.clone(), denoise };
    let (mut ours, mut base, mut gts) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..index.scenes.len() {
        let scene = index.load_scene(&test_dir, i).unwrap();
        let depth = scene.load_depth_for(&index.manifest_path(&test_dir, i)).unwrap();
        let mut cache = LiftCache::default();
        for e in &scene.expressions {
            ours.push(grounder.ground(&scene, &depth, e, &mut cache, false).ok().map(|r| r.target.bbox));
            base.push(detector_only(&scene, e, &ranking).ok().map(|d| d.bbox));
            gts.push(e.gt_targets());
        }
    }
    let ours = evalx::eval_grounding(&ours, &gts, 0.5).unwrap();
    let base = evalx::eval_grounding(&base, &gts, 0.5).unwrap();
    assert!(ours.n > 100);
    assert!(ours.accuracy > base.accuracy, "{} vs {}", ours.accuracy, base.accuracy);
}
