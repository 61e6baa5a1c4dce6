use std::fs;
use std::path::Path;

use gmptl::corpus::{generate_synthetic_corpus, write_corpus, SyntheticCorpusSpec};
use gmptl::encoder::{load_checkpoint, read_metadata, save_checkpoint};
use gmptl::gmp::provenance_path;
use gmptl::pipeline::{
    run_ablation, run_pipeline, verify_fold_chain, AblationGrid, PipelineConfig, CODEBOOK_FILE, GMP_DIR, STAGE1_CKPT,
    STAGE2_CKPT, STAGE3_CKPT,
};
use gmptl::Error;

const TINY: &str = "\
corpus.synthetic.n_utterances=40
corpus.synthetic.feature_dim=8
corpus.synthetic.frame_min=8
corpus.synthetic.frame_max=12
encoder.n_layers=6
encoder.model_dim=8
encoder.n_heads=2
encoder.ff_dim=16
pooling.bilstm_hidden=4
pooling.proj_hidden=8
pooling.embed_dim=8
gmp.scales=2,4,8
gmp.tap=-1
stage2.head_hidden=8
stage2.mask_prob=0.3
stage2.span_length=3
train.lr=0.001
train.batch_size=16
train.stage1_epochs=1
train.stage2_epochs=1
train.stage3_epochs=1
";

fn tiny(root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_kv_str(TINY).unwrap();
    cfg.artifact_root = root.to_path_buf();
    cfg
}

fn summary(root: &Path) -> String {
    let report = fs::read_to_string(root.join("report.txt")).unwrap();
    report.lines().find(|l| l.starts_with("MEAN UAR=")).unwrap().to_string()
}

#[test]
fn artifact_contract_and_rerun_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let run = run_pipeline(&tiny(&a)).unwrap();
    assert_eq!(run.report.folds.len(), 5);
    for k in 1..=5 {
        let fold = a.join(format!("fold{k}"));
        for f in [STAGE1_CKPT, STAGE2_CKPT, STAGE3_CKPT, "predictions.tsv", "stage3_log.csv"] {
            assert!(fold.join(f).exists(), "{}", fold.join(f).display());
        }
        let gmp_files = fs::read_dir(fold.join(GMP_DIR)).unwrap().filter(|e| {
            e.as_ref().unwrap().path().extension().is_some_and(|x| x == "gmp")
        });
        assert_eq!(gmp_files.count(), 32, "fold {k}: one label file per training utterance");
        assert!(provenance_path(&fold.join(GMP_DIR).join(CODEBOOK_FILE)).exists());
        let meta = read_metadata(&fold.join(STAGE3_CKPT)).unwrap();
        assert_eq!(meta.get("finetune_mode").map(String::as_str), Some("hybrid_ft"));
        assert!(meta.contains_key("ams.margin") && meta.contains_key("upstream_hash"));
        verify_fold_chain(&fold).unwrap();
    }
    assert!(a.join("config.txt").exists());

    let b = dir.path().join("b");
    run_pipeline(&tiny(&b)).unwrap();
    assert_eq!(summary(&a), summary(&b));
    assert_eq!(
        fs::read(a.join("fold3").join(STAGE3_CKPT)).unwrap(),
        fs::read(b.join("fold3").join(STAGE3_CKPT)).unwrap()
    );
}

#[test]
fn tampered_chain_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let mut cfg = tiny(&root);
    cfg.set("mode.finetune_mode", "ce_ft").unwrap();
    run_pipeline(&cfg).unwrap();
    let fold = root.join("fold2");
    let meta = fs::read_to_string(fold.join("stage3.ckpt.meta")).unwrap();
    assert!(!meta.contains("ams."));

    // replace fold 2's stage-1 checkpoint with fold 1's
    let other = load_checkpoint(&root.join("fold1").join(STAGE1_CKPT)).unwrap();
    save_checkpoint(&other, &fold.join(STAGE1_CKPT)).unwrap();
    let err = verify_fold_chain(&fold).unwrap_err();
    assert!(matches!(err, Error::ProvenanceMismatch(_)), "{err}");
}

#[test]
fn ablation_tables_and_cell_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let table = run_ablation(&AblationGrid::components(vec![0]), &cfg).unwrap();
    let rows: Vec<(String, String)> = table
        .rows
        .iter()
        .map(|r| (r.setting("labels").unwrap().to_string(), r.setting("finetune").unwrap().to_string()))
        .collect();
    let expected = [("MPs", "CE-FT"), ("MPs", "Hybrid-FT"), ("GMPs", "CE-FT"), ("GMPs", "Hybrid-FT")];
    assert_eq!(rows, expected.map(|(a, b)| (a.to_string(), b.to_string())));
    let tsv = fs::read_to_string(dir.path().join("ablation/table.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 5);

    // delete one cell and rerun it alone
    let cell = dir.path().join("ablation/labels=GMPs,finetune=Hybrid-FT/seed0");
    let before = fs::read(cell.join("fold4").join(STAGE3_CKPT)).unwrap();
    fs::remove_dir_all(&cell).unwrap();
    let mut single = cfg.with_seed(0);
    single.artifact_root = cell.clone();
    run_pipeline(&single).unwrap();
    assert_eq!(fs::read(cell.join("fold4").join(STAGE3_CKPT)).unwrap(), before);

    let layers = run_ablation(&AblationGrid::layer_sweep(vec![0]), &tiny(&dir.path().join("layers"))).unwrap();
    let taps: Vec<&str> = layers.rows.iter().map(|r| r.setting("layer_id").unwrap()).collect();
    assert_eq!(taps, ["-1", "-2", "-3", "-4", "-5", "-6"]);
    assert!(matches!(run_ablation(&AblationGrid { axes: vec![], seeds: vec![0] }, &cfg), Err(Error::ConfigInvalid(_))));
}

#[test]
fn manifest_corpus_plugs_into_the_same_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let synth_cfg = tiny(&dir.path().join("synthetic"));
    let spec: SyntheticCorpusSpec = match &synth_cfg.corpus {
        gmptl::pipeline::CorpusSource::Synthetic(s) => s.clone(),
        _ => unreachable!(),
    };
    let manifest = write_corpus(&dir.path().join("features"), &generate_synthetic_corpus(&spec).unwrap()).unwrap();
    let mut from_files = tiny(&dir.path().join("manifest"));
    from_files.set("corpus.manifest", manifest.to_str().unwrap()).unwrap();
    run_pipeline(&synth_cfg).unwrap();
    run_pipeline(&from_files).unwrap();
    assert_eq!(summary(&dir.path().join("synthetic")), summary(&dir.path().join("manifest")));
}
