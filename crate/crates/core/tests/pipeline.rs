use std::path::{Path, PathBuf};

use proptest::prelude::*;
use sha2::{Digest, Sha256};
use tempfile::TempDir;
use vpseg_core::dataset::{
    decode_panoptic, encode_panoptic, load_panoptic_dir, write_sequence, ClassTable, PanopticMap, SequenceDataset,
    SyntheticConfig, PANOPTIC_DIR,
};
use vpseg_core::network::{ModelConfig, Network};
use vpseg_core::pipeline::{
    run_eval, run_infer, run_synth, run_train, RunConfig, TrainingLogRecord, CHECKPOINT_FILE, LEDGER_DIR, REPORT_FILE,
    TRAIN_LOG_FILE,
};
use vpseg_core::tensor::ParamStore;
use vpseg_core::tracker::is_valid_output;
use vpseg_core::Error;

fn tiny_synth() -> SyntheticConfig {
    SyntheticConfig { width: 16, height: 16, frames: 6, min_size: 4, max_size: 6, ..Default::default() }
}

fn tiny_config(root: &Path, out: &Path, seed: u64, iterations: usize) -> RunConfig {
    let classes = ClassTable::default();
    let mut cfg = RunConfig::new(root, out, &classes);
    cfg.model = ModelConfig { embed_dim: 8, heads: 2, ffn_dim: 16, free_queries: 6, ..cfg.model };
    cfg.optim.iterations = iterations;
    cfg.seed = seed;
    cfg
}

fn dataset(dir: &TempDir) -> PathBuf {
    let root = dir.path().join("data");
    run_synth(&tiny_synth(), &ClassTable::default(), &root).unwrap();
    root
}

/// Digest of every file under `dir`, visited in sorted path order.
fn tree_hash(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

#[test]
fn zero_iterations_saves_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let cfg = tiny_config(&root, &tmp.path().join("out"), 9, 0);
    let outcome = run_train(&cfg, |_| {}).unwrap();
    assert!(outcome.log.is_empty());
    let init = Network::new(cfg.model.clone(), 9).unwrap();
    assert_eq!(std::fs::read(&outcome.checkpoint).unwrap(), init.params.to_bytes());
    assert_eq!(std::fs::read_to_string(cfg.output_dir.join(TRAIN_LOG_FILE)).unwrap(), "");
}

#[test]
fn identical_seeds_reproduce_every_artifact() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let run = |name: &str, seed: u64| {
        let out = tmp.path().join(name);
        let cfg = tiny_config(&root, &out, seed, 4);
        let outcome = run_train(&cfg, |_| {}).unwrap();
        let inferred = run_infer(&cfg, &outcome.checkpoint, &root, &out.join("pred")).unwrap();
        let report = run_eval(&out.join("pred"), &root, &ClassTable::default(), Some(&out.join("eval"))).unwrap();
        (out, outcome, inferred, report)
    };
    let (a, ta, ia, ra) = run("a", 5);
    let (b, tb, ib, rb) = run("b", 5);
    let (c, ..) = run("c", 6);
    let ckpt = |d: &Path| std::fs::read(d.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt(&a), ckpt(&b));
    assert_ne!(ckpt(&a), ckpt(&c));
    assert_eq!(tree_hash(&a.join("pred")), tree_hash(&b.join("pred")));
    assert_eq!(
        std::fs::read(a.join("eval").join(REPORT_FILE)).unwrap(),
        std::fs::read(b.join("eval").join(REPORT_FILE)).unwrap()
    );
    assert_eq!(ia, ib);
    assert_eq!(ra, rb);
    // Losses match too; only wall-clock times differ between runs.
    let losses = |t: &vpseg_core::pipeline::TrainOutcome| {
        t.log.iter().map(|r| (r.iteration, r.k, r.l_sd, r.l_t, r.l_total)).collect::<Vec<_>>()
    };
    assert_eq!(losses(&ta), losses(&tb));
}

#[test]
fn training_log_has_one_parsable_line_per_iteration() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let cfg = tiny_config(&root, &tmp.path().join("out"), 1, 3);
    let mut streamed = Vec::new();
    let outcome = run_train(&cfg, |r| streamed.push(r.clone())).unwrap();
    let text = std::fs::read_to_string(cfg.output_dir.join(TRAIN_LOG_FILE)).unwrap();
    let parsed: Vec<TrainingLogRecord> = text.lines().map(|l| TrainingLogRecord::parse(l).unwrap()).collect();
    assert_eq!(parsed.len(), 3);
    assert_eq!(streamed, outcome.log);
    for (p, r) in parsed.iter().zip(&outcome.log) {
        assert_eq!((p.iteration, p.k, p.l_sd, p.l_t, p.l_total), (r.iteration, r.k, r.l_sd, r.l_t, r.l_total));
        assert!((2..=5).contains(&p.k));
    }
}

#[test]
fn inference_writes_one_valid_map_per_frame() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let cfg = tiny_config(&root, &tmp.path().join("out"), 2, 0);
    let outcome = run_train(&cfg, |_| {}).unwrap();
    let out = tmp.path().join("pred");
    let seqs = run_infer(&cfg, &outcome.checkpoint, &root, &out).unwrap();
    let classes = ClassTable::default();
    assert_eq!(seqs.len(), 2);
    for s in &seqs {
        let written = load_panoptic_dir(&out.join(PANOPTIC_DIR).join(&s.name)).unwrap();
        assert_eq!(written.len(), 6);
        assert_eq!(written, s.maps);
        assert!(s.maps.iter().all(|m| is_valid_output(m, &classes)));
        let ledger = std::fs::read_to_string(out.join(LEDGER_DIR).join(format!("{}.txt", s.name))).unwrap();
        assert_eq!(ledger, s.ledger.render(&classes));
    }
}

#[test]
fn single_frame_sequence() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let cfg = tiny_config(&root, &tmp.path().join("out"), 2, 0);
    let outcome = run_train(&cfg, |_| {}).unwrap();

    let classes = ClassTable::default();
    let seq = vpseg_core::dataset::generate_synthetic_sequence(
        &SyntheticConfig { frames: 1, ..tiny_synth() },
        &classes,
        0,
    )
    .unwrap();
    let single = tmp.path().join("single");
    write_sequence(&single, &seq).unwrap();
    let seqs = run_infer(&cfg, &outcome.checkpoint, &single, &tmp.path().join("pred1")).unwrap();
    assert_eq!(seqs[0].maps.len(), 1);
    for row in &seqs[0].ledger.rows {
        assert_eq!((row.birth, row.death), (0, None));
    }
    let text = seqs[0].ledger.render(&classes);
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        assert!(line.ends_with(" 0 0"), "{line}");
    }
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let report = run_eval(&root, &root, &ClassTable::default(), Some(tmp.path())).unwrap();
    assert_eq!(report.machine_line(), "STQ=1 AQ=1 SQ=1");
    let text = std::fs::read_to_string(tmp.path().join(REPORT_FILE)).unwrap();
    assert!(text.contains("STQ=1 AQ=1 SQ=1"));
}

#[test]
fn eval_rejects_misaligned_directories() {
    let tmp = TempDir::new().unwrap();
    let root = dataset(&tmp);
    let classes = ClassTable::default();

    // One frame short.
    let short = tmp.path().join("short");
    let names = ["0000", "0001"];
    for n in names {
        let maps = load_panoptic_dir(&root.join(PANOPTIC_DIR).join(n)).unwrap();
        let keep = if n == "0001" { 5 } else { 6 };
        for (i, m) in maps.iter().take(keep).enumerate() {
            let p = short.join(PANOPTIC_DIR).join(n).join(format!("{i:06}.png"));
            vpseg_core::dataset::write_panoptic_png(&p, m).unwrap();
        }
    }
    match run_eval(&short, &root, &classes, None) {
        Err(Error::Alignment(msg)) => assert!(msg.contains("0001"), "{msg}"),
        other => panic!("expected alignment error, got {other:?}"),
    }

    // A missing sequence.
    std::fs::remove_dir_all(short.join(PANOPTIC_DIR).join("0001")).unwrap();
    assert!(matches!(run_eval(&short, &root, &classes, None), Err(Error::Alignment(_))));
}

#[test]
fn config_file_round_trip() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(Path::new("/data/x"), Path::new("/out/y"), 4, 7);
    let path = tmp.path().join("run.cfg");
    std::fs::write(&path, cfg.render()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    std::fs::write(&path, format!("{}model.depth = 3\n", cfg.render())).unwrap();
    assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_and_shape_checks() {
    let net = Network::new(ModelConfig::default(), 1).unwrap();
    let bytes = net.params.to_bytes();
    assert_eq!(&bytes[..9], b"SIAINCKPT");
    let back = ParamStore::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    let mut other = Network::new(ModelConfig { embed_dim: 16, ..Default::default() }, 1).unwrap();
    assert!(other.params.load_matching(&bytes).is_err());
    assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(ParamStore::from_bytes(b"NOTACKPT!\x01\0\0\0").is_err());
}

#[test]
fn dataset_round_trips_through_disk() {
    let tmp = TempDir::new().unwrap();
    let classes = ClassTable::default();
    let data = run_synth(&tiny_synth(), &classes, tmp.path()).unwrap();
    let loaded = vpseg_core::pipeline::load_dataset(tmp.path(), &classes).unwrap();
    assert_eq!(loaded, data);
    let _: &SequenceDataset = &loaded[0];
}

proptest! {
    #[test]
    fn panoptic_png_round_trips(
        w in 1usize..12,
        h in 1usize..12,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = w * h;
        let semantic: Vec<u16> = (0..n).map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..255) }).collect();
        let instance: Vec<u32> = semantic.iter().map(|&s| if s == 255 { 0 } else { rng.random_range(0..65536) }).collect();
        let map = PanopticMap::new(w, h, semantic, instance).unwrap();
        prop_assert_eq!(&decode_panoptic(&encode_panoptic(&map).unwrap()), &map);

        let dir = TempDir::new().unwrap();
        let path = dir.path().join("000000.png");
        vpseg_core::dataset::write_panoptic_png(&path, &map).unwrap();
        prop_assert_eq!(vpseg_core::dataset::decode_panoptic_file(&path).unwrap(), map);
    }
}

#[test]
fn out_of_range_instance_ids_cannot_be_encoded() {
    let map = PanopticMap::new(1, 1, vec![3], vec![70_000]).unwrap();
    assert!(encode_panoptic(&map).is_err());
}
