use std::path::{Path, PathBuf};
use std::process::Command;

use prunekit::checkpoint;
use prunekit::config::ExperimentConfig;
use prunekit::grid;
use prunekit::report::{ExperimentReport, TableFormat};
use prunekit_core::criteria::{prune_model, Criterion};
use prunekit_core::model::{MiniGptConfig, TaggedModel};
use prunekit_core::param::GroupTag;
use prunekit_core::retrain::{memory_audit, RetrainRecipe};
use prunekit_core::sparsity::MaskPattern;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("prunekit-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn cli(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_prunekit")).args(args).output().unwrap();
    assert!(out.status.success(), "prunekit {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY_GRID: &str = r#"
output_dir = "out"

[model]
context_length = 8
d_model = 16
n_heads = 2
n_layers = 2
d_ff = 32

[corpus]
synthetic_bytes = 30000

[pretrain]
steps = 40
lr = 0.01
checkpoint = "dense.perp"

[grid]
sparsities = [0.5, 0.7]
patterns = ["unstructured", "2:4"]
methods = ["none", "bias+ln", "masked-lora+bias+ln", "recon:masked-lora"]
seeds = [0, 1]
iters = 6
lr_grid = [1e-3, 1e-2]
reuse_lr_across_seeds = true
rank = 2
calibration_sequences = 4
recon_steps = 3
val_windows = 4
"#;

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("grid.toml");
    std::fs::write(&path, TINY_GRID).unwrap();
    path
}

#[test]
fn command_line_pipeline() {
    let dir = scratch("cli");
    let p = |f: &str| dir.join(f).to_string_lossy().into_owned();
    cli(&["synth", "--out", &p("text.txt"), "--bytes", "70000", "--seed", "1"]);
    assert_eq!(std::fs::metadata(p("text.txt")).unwrap().len(), 70000);
    let corpus = ["--corpus", &p("text.txt")];
    cli(&[&["pretrain", "--out", &p("dense.perp"), "--steps", "3"][..], &corpus].concat());
    cli(&["prune", "--checkpoint", &p("dense.perp"), "--out", &p("pruned.perp"), "--pattern", "2:4"]);
    let pruned: TaggedModel<f32> = checkpoint::load(p("pruned.perp")).unwrap();
    assert!(pruned.masks().iter().all(|m| m.as_ref().is_some_and(|m| m.satisfies_n_m(2, 4))));
    let out = cli(&[
        &["retrain", "--checkpoint", &p("pruned.perp"), "--out", &p("retrained.perp"), "--iters", "2", "--lr", "1e-3"][..],
        &["--val-windows", "4", "--trajectory", &p("traj.csv")],
        &corpus,
    ]
    .concat());
    assert!(out.contains("test perplexity"), "{out}");
    let traj = std::fs::read_to_string(p("traj.csv")).unwrap();
    assert!(traj.starts_with("iter,lr,train_loss,val_ppl"), "{traj}");
    let retrained: TaggedModel<f32> = checkpoint::load(p("retrained.perp")).unwrap();
    for l in 0..retrained.layers().len() {
        assert!(retrained.mask(l).unwrap().covers_support(retrained.weight(l).data()));
    }
    let ppl: f64 = cli(&[&["eval", "--checkpoint", &p("retrained.perp")][..], &corpus].concat()).trim().parse().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);
    cli(&[
        &["reconstruct", "--checkpoint", &p("dense.perp"), "--out", &p("recon.perp"), "--pattern", "0.5", "--criterion", "wanda"][..],
        &["--steps", "2", "--calibration-sequences", "2", "--oracle", "--log", &p("recon.csv")],
        &corpus,
    ]
    .concat());
    let log = std::fs::read_to_string(p("recon.csv")).unwrap();
    assert!(log.starts_with("layer,criterion,steps,obj_initial,obj_final,obj_oracle"));
    assert_eq!(log.lines().count(), 1 + 6);
    let bench = cli(&[&["bench", "--checkpoint", &p("pruned.perp"), "--method", "bias+ln", "--seconds", "5"][..], &corpus].concat());
    assert!(bench.contains("tokens/s"), "{bench}");
}

#[test]
fn grid_writes_complete_reports_and_is_deterministic() {
    let dir = scratch("grid");
    let cfg = ExperimentConfig::load(write_config(&dir)).unwrap();
    let data = grid::load_dataset(&cfg).unwrap();
    let dense = grid::dense_model(&cfg, &data, |_, _| {}).unwrap();
    assert!(dir.join("dense.perp").is_file());
    let report = grid::run_grid(&cfg, &dense, &data, Some(&cfg.output_dir), 2, |_| {}).unwrap();
    // 3 columns × 4 methods × 2 seeds.
    assert_eq!(report.results.len(), 24);
    assert!(report.results.iter().all(|r| r.error.is_none()), "{:#?}", report.results.iter().find(|r| r.error.is_some()));
    let files = report.emit(&cfg.output_dir, TableFormat::Markdown).unwrap();
    assert_eq!(files.len(), 3);
    let text = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(ExperimentReport::from_csv(&text).unwrap(), report);
    // Reused rates: every seed of a cell retrains at the first seed's rate.
    for r in report.results.iter().filter(|r| r.lr.is_some()) {
        let first = report.results.iter().find(|x| x.seed == 0 && x.method == r.method && x.pattern == r.pattern && x.sparsity == r.sparsity).unwrap();
        assert_eq!(r.lr, first.lr);
    }
    let audit = {
        let mut m = dense.clone();
        prune_model(&mut m, Criterion::Magnitude, MaskPattern::unstructured(0.5).unwrap(), None, 0.0).unwrap();
        memory_audit(&m, &RetrainRecipe::selective(&[GroupTag::Bias, GroupTag::Ln])).unwrap()
    };
    let bias_ln = report.results.iter().find(|r| r.method == "bias+ln").unwrap();
    assert_eq!(bias_ln.trainable_fraction, Some(audit.fraction));
    assert_eq!(bias_ln.optimizer_floats, Some(audit.optimizer_floats));

    // A second run from the saved dense checkpoint reproduces every
    // per-cell checkpoint bit for bit.
    let dense2 = grid::dense_model(&cfg, &data, |_, _| panic!("should load, not pretrain")).unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.output_dir = dir.join("out2");
    grid::run_grid(&cfg2, &dense2, &data, Some(&cfg2.output_dir), 1, |_| {}).unwrap();
    for r in &report.results {
        let key = r.key().slug();
        let a = std::fs::read(cfg.output_dir.join("checkpoints").join(format!("{key}.perp"))).unwrap();
        let b = std::fs::read(cfg2.output_dir.join("checkpoints").join(format!("{key}.perp"))).unwrap();
        assert!(a == b, "checkpoint {key} differs between runs");
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = scratch("ckpt");
    let cfg = MiniGptConfig { context_length: 8, d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, ..MiniGptConfig::default() };
    let mut m = TaggedModel::<f32>::init(cfg).unwrap();
    prune_model(&mut m, Criterion::Magnitude, MaskPattern::unstructured(0.6).unwrap(), None, 0.0).unwrap();
    checkpoint::save(&m, dir.join("a.perp")).unwrap();
    let back: TaggedModel<f32> = checkpoint::load(dir.join("a.perp")).unwrap();
    checkpoint::save(&back, dir.join("b.perp")).unwrap();
    assert_eq!(std::fs::read(dir.join("a.perp")).unwrap(), std::fs::read(dir.join("b.perp")).unwrap());
    assert!(checkpoint::load::<f32>(dir.join("missing.perp")).unwrap_err().to_string().contains("missing.perp"));
}
