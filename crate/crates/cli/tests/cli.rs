use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffusion_cli::commands::{self, Arm};
use diffusion_cli::{Checkpoint, RunConfig};
use diffusion_core::metrics::FeatureProjector;
use diffusion_core::{Denoiser, Tensor};
use tempfile::TempDir;

const TINY: &str = "\
image_size = 8
base_width = 4
depth = 1
embed_dim = 8
num_classes = 3
epochs = 1
batch_size = 4
steps = 10
per_class = 4
render_size = 8
samples_per_class = 2
feature_dim = 8
";

fn ddpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddpm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ddpm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr_of(args: &[&str]) -> String {
    let out = ddpm(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Setup {
    dir: TempDir,
}

impl Setup {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.cfg"), config).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).to_str().unwrap().to_string()
    }

    fn train(&self, out: &str) {
        ok(&["train", "--config", &self.s("run.cfg"), "--out", &self.s(out)]);
    }
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn training_is_byte_reproducible_and_logs_every_step() {
    let s = Setup::new(TINY);
    s.train("a.ckpt");
    s.train("b.ckpt");
    assert_eq!(fs::read(s.p("a.ckpt")).unwrap(), fs::read(s.p("b.ckpt")).unwrap());
    let log = fs::read_to_string(s.p("a.ckpt.loss.csv")).unwrap();
    // 2 classes x 4 images, batch 4, 1 epoch
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    for (i, line) in lines.iter().enumerate() {
        let (step, loss) = line.split_once(',').unwrap();
        assert_eq!(step.parse::<usize>().unwrap(), i + 1);
        assert!(loss.parse::<f64>().unwrap().is_finite());
    }
    let ckpt = Checkpoint::load(&s.p("a.ckpt")).unwrap();
    assert_eq!(ckpt.step_count, 2);
    assert_eq!(ckpt.config, TINY.parse::<RunConfig>().unwrap());
}

#[test]
fn zero_epochs_keeps_the_seeded_init() {
    let s = Setup::new(&TINY.replace("epochs = 1", "epochs = 0\nseed = 9"));
    s.train("z.ckpt");
    let ckpt = Checkpoint::load(&s.p("z.ckpt")).unwrap();
    let init = Denoiser::new(ckpt.config.denoiser).unwrap().init_params(9);
    assert_eq!(ckpt.params, init);
    assert_eq!(ckpt.ema, init);
    assert_eq!(ckpt.step_count, 0);
    assert_eq!(fs::read_to_string(s.p("z.ckpt.loss.csv")).unwrap(), "");
}

#[test]
fn sampling_writes_count_files_deterministically() {
    let s = Setup::new(TINY);
    s.train("m.ckpt");
    let ck = s.s("m.ckpt");
    let args = |dir: &str| {
        vec![
            "sample".to_string(), "--checkpoint".into(), ck.clone(), "--class".into(), "1".into(),
            "--w".into(), "2".into(), "--count".into(), "3".into(), "--seed".into(), "5".into(),
            "--out-dir".into(), s.s(dir),
        ]
    };
    let a: Vec<String> = args("one");
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let b: Vec<String> = args("two");
    ok(&b.iter().map(String::as_str).collect::<Vec<_>>());
    let one = files_in(&s.p("one"));
    assert_eq!(one, files_in(&s.p("two")));
    let names: Vec<&str> = one.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["sample_1_5_0.ppm", "sample_1_5_1.ppm", "sample_1_5_2.ppm"]);
    for (_, bytes) in &one {
        assert!(bytes.starts_with(b"P6\n8 8\n255\n"));
        assert_eq!(bytes.len(), 11 + 3 * 64);
    }
}

#[test]
fn zero_guidance_matches_conditional_only() {
    let s = Setup::new(TINY);
    s.train("m.ckpt");
    let ck = s.s("m.ckpt");
    let common = ["--checkpoint", &ck, "--class", "0", "--count", "2", "--seed", "3", "--raw"];
    let mut a = vec!["sample", "--w", "0", "--out-dir"];
    let da = s.s("w0");
    a.push(&da);
    a.extend(common);
    ok(&a);
    let db = s.s("cond");
    let mut b = vec!["sample", "--conditional-only", "--out-dir", &db];
    b.extend(common);
    ok(&b);
    assert_eq!(files_in(&s.p("w0")), files_in(&s.p("cond")));
}

#[test]
fn invalid_inputs_exit_nonzero_with_a_reason() {
    let s = Setup::new(&format!("{TINY}learning_rate = -1\n"));
    let err = stderr_of(&["train", "--config", &s.s("run.cfg"), "--out", &s.s("x.ckpt")]);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(!s.p("x.ckpt").exists());

    let s = Setup::new(&format!("{TINY}warmup = 3\n"));
    let err = stderr_of(&["train", "--config", &s.s("run.cfg"), "--out", &s.s("x.ckpt")]);
    assert!(err.contains("warmup"), "{err}");

    let s = Setup::new(TINY);
    s.train("m.ckpt");
    let err = stderr_of(&["sample", "--checkpoint", &s.s("m.ckpt"), "--class", "2", "--out-dir", &s.s("o")]);
    assert!(err.contains("class"), "{err}");

    fs::write(s.p("junk.ckpt"), b"not a checkpoint").unwrap();
    let err = stderr_of(&["sample", "--checkpoint", &s.s("junk.ckpt"), "--class", "0", "--out-dir", &s.s("o")]);
    assert!(err.contains("magic"), "{err}");

    let err = stderr_of(&["eval", "--checkpoint", &s.s("m.ckpt"), "--arm", "best", "--report", &s.s("r")]);
    assert!(err.contains("best"), "{err}");
}

#[test]
fn eval_report_is_one_reproducible_line() {
    let s = Setup::new(TINY);
    s.train("m.ckpt");
    for arm in ["baseline", "enhanced"] {
        let (ra, rb) = (s.s(&format!("{arm}.a")), s.s(&format!("{arm}.b")));
        ok(&["eval", "--checkpoint", &s.s("m.ckpt"), "--arm", arm, "--seed", "4", "--report", &ra]);
        ok(&["eval", "--checkpoint", &s.s("m.ckpt"), "--arm", arm, "--seed", "4", "--report", &rb]);
        let a = fs::read_to_string(&ra).unwrap();
        assert_eq!(a, fs::read_to_string(&rb).unwrap());
        let fields: Vec<&str> = a.trim_end().split(' ').collect();
        assert_eq!(fields.len(), 5, "{a}");
        assert_eq!(fields[0], format!("arm={arm}"));
        assert!(fields[1].strip_prefix("fid=").unwrap().parse::<f64>().unwrap() >= 0.0);
        assert_eq!(fields[2], "n_gen=4");
        assert_eq!(fields[3], "n_ref=8");
        assert_eq!(fields[4], "projector_seed=0");
    }
}

#[test]
fn eval_rejects_a_config_with_another_image_size() {
    let s = Setup::new(TINY);
    s.train("m.ckpt");
    fs::write(s.p("big.cfg"), TINY.replace("image_size = 8", "image_size = 16")).unwrap();
    let err = stderr_of(&[
        "eval", "--checkpoint", &s.s("m.ckpt"), "--config", &s.s("big.cfg"), "--arm", "baseline", "--report", &s.s("r"),
    ]);
    assert!(err.contains("image sizes differ"), "{err}");
}

#[test]
fn reference_against_itself_scores_zero() {
    let cfg: RunConfig = TINY.parse().unwrap();
    let (images, _) = commands::training_set(&cfg).unwrap();
    let stack = Tensor::stack(&images).unwrap();
    let projector = FeatureProjector::new(3 * 64, 8, 1).unwrap();
    let fid = commands::fid_between(&stack, &stack, &projector).unwrap();
    assert!(fid.abs() < 1e-9, "{fid}");
    let other = Tensor::stack(&images[..4]).unwrap();
    assert!(commands::fid_between(&other, &stack, &projector).unwrap() > 0.0);
}

#[test]
fn arms_parse_and_print() {
    for a in [Arm::Baseline, Arm::Enhanced] {
        assert_eq!(a.to_string().parse::<Arm>().unwrap(), a);
    }
}

#[test]
fn export_dataset_and_init_config() {
    let s = Setup::new(TINY);
    ok(&["export-dataset", "--config", &s.s("run.cfg"), "--out-dir", &s.s("data")]);
    let files = files_in(&s.p("data"));
    assert_eq!(files.len(), 8);
    assert!(files.iter().any(|(n, _)| n == "dataset_1_3.ppm"));
    let out = ok(&["init-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.parse::<RunConfig>().unwrap(), RunConfig::default());
}
