//! Dataset loading, evaluation, inference and scheduling through the library API.

use std::path::Path;

use bokeh::ckpt::{load_checkpoint, save_checkpoint};
use bokeh::config::parse_config;
use bokeh::dataset::{load_pairs, read_image, write_image, write_pairs, DatasetSpec, Split};
use bokeh::eval::{evaluate, infer};
use bokeh::train::{build_extractor, history_path, run_train, TrainArgs};
use bokeh_core::data::{synth_bokeh_dataset, PairedSample, RgbImage};
use bokeh_core::glassnet::Generator;
use bokeh_core::metrics::psnr;
use bokeh_core::trainer::{Session, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TINY: &str = r#"
preset = "desk"
stage1_base_channels = 4
stage1_max_channels = 32
stage2_base_channels = 4
stage2_max_channels = 32
n_resblocks = 1
critic_depths = [2]
critic_base_channels = 4
crop_height = 32
crop_width = 32
stage1_epochs = 1
stage2_epochs = 1
critic_steps = 2
extractor = "identity"
checkpoint_every = 3
"#;

fn tiny() -> TrainConfig {
    parse_config(TINY, &TrainConfig::default()).unwrap()
}

fn synth(n: usize, h: usize, w: usize, seed: u64) -> Vec<PairedSample> {
    synth_bokeh_dataset(n, (h, w), seed).unwrap().into_iter().map(|s| s.pair).collect()
}

fn noise(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
}

fn tiny_checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = tiny();
    let fx = build_extractor(&cfg).unwrap();
    let session = Session::new(cfg, synth(1, 32, 32, 0), fx).unwrap();
    let path = dir.join("tiny.ckpt");
    save_checkpoint(&path, &session.checkpoint()).unwrap();
    path
}

#[test]
fn cleaning_and_mismatches_are_accounted_for() {
    let dir = tempfile::tempdir().unwrap();
    write_pairs(dir.path(), Split::Train, &synth(10, 16, 24, 1)).unwrap();
    let mut spec = DatasetSpec::new(dir.path(), Split::Train);
    spec.cleaning_list = Some(["synth_0003".to_string(), "synth_0007".to_string()].into());
    let (pairs, report) = load_pairs(&spec).unwrap();
    assert_eq!(pairs.len(), 8);
    assert_eq!(report.cleaned, ["synth_0003", "synth_0007"]);
    assert!(pairs.iter().all(|p| p.id != "synth_0003" && p.id != "synth_0007"));

    let train = dir.path().join("train");
    write_image(&train.join("target/synth_0001.png"), &RgbImage::filled(20, 16, [0, 0, 0])).unwrap();
    write_image(&train.join("source/lonely.png"), &RgbImage::filled(16, 16, [0, 0, 0])).unwrap();
    let (pairs, report) = load_pairs(&spec).unwrap();
    assert_eq!(pairs.len(), 7);
    let ids: Vec<&str> = report.skipped.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, ["lonely", "synth_0001"]);
    assert!(report.skipped[1].1.contains("20"), "{:?}", report.skipped[1]);
    assert_eq!(report.loaded.len() + report.skipped.len() + report.cleaned.len(), report.files);

    let again = load_pairs(&spec).unwrap().0;
    let order: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(order, again.iter().map(|p| p.id.as_str()).collect::<Vec<_>>());
    assert!(order.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn unknown_cleaning_ids_and_empty_sets_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_pairs(dir.path(), Split::Val, &synth(2, 16, 16, 2)).unwrap();
    let mut spec = DatasetSpec::new(dir.path(), Split::Val);
    spec.cleaning_list = Some(["nope".to_string()].into());
    assert!(load_pairs(&spec).is_err());
    spec.cleaning_list = Some(["synth_0000".to_string(), "synth_0001".to_string()].into());
    assert!(load_pairs(&spec).is_err());
}

#[test]
fn identity_generator_scores_the_raw_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synth(4, 24, 40, 3);
    write_pairs(dir.path(), Split::Test, &pairs).unwrap();
    let g = Generator::<f32>::passthrough(&tiny().generator);
    let report = evaluate(&g, &DatasetSpec::new(dir.path(), Split::Test)).unwrap();
    assert_eq!(report.count, 4);
    for (rec, p) in report.images.iter().zip(&pairs) {
        assert_eq!(rec.id, p.id);
        assert!((rec.psnr - psnr(&p.source, &p.target).unwrap()).abs() < 1e-9);
    }
    let mean = report.images.iter().map(|r| r.psnr).sum::<f64>() / 4.0;
    assert!((report.mean_psnr - mean).abs() < 1e-9);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["count"], 4);
}

#[test]
fn inference_keeps_size_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let input = dir.path().join("in.png");
    write_image(&input, &noise(1500, 1000, 4)).unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    infer(&ckpt, &input, &a).unwrap();
    infer(&ckpt, &input, &b).unwrap();
    let out = read_image(&a).unwrap();
    assert_eq!((out.width, out.height), (1500, 1000));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn odd_sizes_round_trip_through_padding() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    for (w, h) in [(1, 1), (7, 13), (33, 9)] {
        let input = dir.path().join(format!("in_{w}x{h}.png"));
        let output = dir.path().join(format!("out_{w}x{h}.png"));
        write_image(&input, &noise(w, h, 5)).unwrap();
        infer(&ckpt, &input, &output).unwrap();
        let out = read_image(&output).unwrap();
        assert_eq!((out.width, out.height), (w, h));
    }
}

#[test]
fn checkpoint_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let ckpt = load_checkpoint(&path).unwrap();
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&again, &ckpt).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(TrainConfig::from_checkpoint(&ckpt).unwrap(), tiny());
}

#[test]
fn history_length_matches_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    write_pairs(dir.path(), Split::Train, &synth(4, 32, 32, 6)).unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let out = dir.path().join("run/stage1.ckpt");
    let mut args = TrainArgs {
        stage: 1,
        config: Some(config),
        data: dir.path().into(),
        split: Split::Train,
        cleaning: None,
        resume: None,
        out: out.clone(),
    };
    let mut log = Vec::new();
    assert_eq!(run_train(&args, &mut log).unwrap(), 4);
    let lines = |p: &Path| std::fs::read_to_string(history_path(p)).unwrap().lines().count();
    assert_eq!(lines(&out), 4);

    let out2 = dir.path().join("run/stage2.ckpt");
    args.stage = 2;
    args.resume = Some(out);
    args.out = out2.clone();
    assert_eq!(run_train(&args, &mut log).unwrap(), 4);
    assert_eq!(lines(&out2), 4);
    let text = std::fs::read_to_string(history_path(&out2)).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["stage"], 2);
    assert_eq!(first["critic"].as_array().unwrap().len(), 2);
    let ckpt = load_checkpoint(&out2).unwrap();
    assert_eq!(ckpt.meta_str("stage").unwrap(), "2");
    assert!(String::from_utf8(log).unwrap().contains("--config ignored"));
}

#[test]
fn silent_adversary_matches_the_critic_free_ablation() {
    let run = |adversarial: bool| {
        let mut cfg = tiny();
        cfg.adversarial = adversarial;
        cfg.loss.w_adv = 0.0;
        cfg.critic.gp_lambda = 0.0;
        let fx = build_extractor(&cfg).unwrap();
        let mut s = Session::new(cfg, synth(2, 32, 32, 8), fx).unwrap();
        s.run(2).unwrap();
        s.begin_stage2();
        let hist = s.run(3).unwrap();
        let weights: Vec<Vec<f32>> = s.generator.params().iter().map(|p| p.value().to_vec()).collect();
        (hist.iter().map(|r| r.generator.total).collect::<Vec<_>>(), weights)
    };
    let (with, w_with) = run(true);
    let (without, w_without) = run(false);
    assert_eq!(with, without);
    assert_eq!(w_with, w_without);
}

#[test]
fn readme_config_example_is_the_full_preset() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let block = readme.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    assert_eq!(parse_config(block, &TrainConfig::desk()).unwrap(), TrainConfig::default());
}
