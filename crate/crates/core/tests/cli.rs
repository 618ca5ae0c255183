use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use onnkit::autograd::CustomBackward;
use onnkit::cli::cmd_gradcheck;
use onnkit::dataio::{make_synthetic_task, save_image_folder, TaskKind};
use onnkit::oplib::{register_builtin_library, NodalOp};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn onnkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_onnkit"))
        .args(args)
        .env_remove("ONNKIT_THREADS")
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn csv_column(path: &Path, column: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == column).unwrap();
    r.records().map(|row| row.unwrap()[idx].to_string()).collect()
}

const TINY: &str = "
[network]
tier_sizes = 1
kernel_sizes = 3
operators = mul/sum/identity

[trainer]
optimizer = adam
lr = 0.01
epochs = 4
batch_size = 4

[data]
task = blur-inverse
count = 8
size = 8
";

#[test]
fn train_writes_checkpoints_stats_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = configs().join("identity.ini");
    let o = onnkit(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--folds", "2"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("fold 1:") && stdout.contains("fold 2:"), "{stdout}");
    for f in ["fold_1", "fold_2"] {
        assert!(out.join(f).join("checkpoint.onn").is_file());
        for p in ["train", "val", "test"] {
            let path = out.join(f).join(format!("{p}.csv"));
            let head = fs::read_to_string(&path).unwrap();
            assert!(head.starts_with("run,epoch,loss,snr,per_image_time_s\n"), "{head}");
            assert_eq!(csv_column(&path, "epoch"), ["0", "1", "2", "3", "4"]);
        }
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(
        summary.starts_with("partition,metric,fold_1,fold_2,mean,per_image_time_s\n"),
        "{summary}"
    );
    assert_eq!(summary.lines().count(), 1 + 3 * 2);
}

#[test]
fn eval_reproduces_the_recorded_best_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = configs().join("identity.ini");
    let o = onnkit(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));

    let ckpt = out.join("fold_2").join("checkpoint.onn");
    let o = onnkit(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    let mut r = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    for row in r.records() {
        let row = row.unwrap();
        let line = format!("best {} {} {}", &row[0], &row[1], &row[3]);
        assert!(stdout.lines().any(|l| l == line), "missing '{line}' in\n{stdout}");
    }
    assert!(stdout.lines().any(|l| l.starts_with("final train loss ")), "{stdout}");
}

#[test]
fn eval_on_an_image_folder() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write(dir.path(), "tiny.ini", TINY);
    assert!(onnkit(&["train", "--config", &config, "--out", out.to_str().unwrap()]).status.success());
    let images = dir.path().join("images");
    save_image_folder(&images, &make_synthetic_task(TaskKind::BlurInverse, 4, 8, 1, 9).unwrap()).unwrap();
    let ckpt = out.join("fold_1").join("checkpoint.onn");
    let o = onnkit(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", images.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("final data loss ")), "{stdout}");
    assert!(stdout.lines().any(|l| l.starts_with("best snr/train data snr ")), "{stdout}");

    let incomplete = dir.path().join("small");
    save_image_folder(&incomplete, &make_synthetic_task(TaskKind::BlurInverse, 4, 8, 1, 9).unwrap()).unwrap();
    fs::remove_file(incomplete.join(fs::read_dir(&incomplete).unwrap().next().unwrap().unwrap().file_name())).unwrap();
    let o = onnkit(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", incomplete.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).starts_with("error: data: "), "{}", text(&o.stderr));
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write(dir.path(), "frozen.ini", &TINY.replace("lr = 0.01", "lr = 0"));
    let o = onnkit(&["train", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let losses = csv_column(&out.join("fold_1").join("train.csv"), "loss");
    assert_eq!(losses.len(), 4);
    assert!(losses.iter().all(|l| *l == losses[0]), "{losses:?}");
}

#[test]
fn linear_identity_reaches_high_snr() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let body = "
[network]
tier_sizes = 1
kernel_sizes = 1
operators = mul/sum/identity

[trainer]
optimizer = sgd
lr = 0.5
epochs = 60
batch_size = 4

[data]
task = identity
count = 8
size = 8
";
    let config = write(dir.path(), "identity.ini", body);
    let o = onnkit(&["train", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let snr: Vec<f64> = csv_column(&out.join("fold_1").join("train.csv"), "snr")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(*snr.last().unwrap() >= 40.0, "{snr:?}");
}

#[test]
fn missing_data_folder_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let body = TINY.replace("task = blur-inverse", "source = folder\npath = /nonexistent/images");
    let config = write(dir.path(), "folder.ini", &body);
    let o = onnkit(&["train", "--config", &config, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = text(&o.stderr);
    assert!(stderr.starts_with("error: data: ") && stderr.contains("/nonexistent/images"), "{stderr}");
}

#[test]
fn geometry_mismatch_names_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    save_image_folder(&images, &make_synthetic_task(TaskKind::Identity, 4, 8, 1, 1).unwrap()).unwrap();
    let body = format!(
        "[network]\ntier_sizes = 1\nkernel_sizes = 3\noperators = 0\nsampling_factors = 2\n\n[data]\nsource = folder\npath = {}\nsize = 8\n",
        images.display()
    );
    let config = write(dir.path(), "down.ini", &body);
    let o = onnkit(&["train", "--config", &config, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = text(&o.stderr);
    assert!(stderr.contains("1x4x4") && stderr.contains("1x8x8"), "{stderr}");
}

#[test]
fn config_errors_exit_with_one_and_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "bad.ini", "[network]\ntier_sizes = 1\nkernel_sizes = 4\noperators = 0\n");
    let o = onnkit(&["describe", "--config", &config]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = text(&o.stderr);
    assert!(stderr.starts_with("error: config: ") && stderr.contains("line 3"), "{stderr}");

    let o = onnkit(&["describe", "--config", dir.path().join("absent.ini").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("absent.ini"));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(onnkit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(onnkit(&["train"]).status.code(), Some(1));
    let o = onnkit(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o.stdout).contains("gradcheck"));
}

#[test]
fn describe_the_three_tier_network() {
    let config = configs().join("three_tier.ini");
    let o = onnkit(&["describe", "--config", config.to_str().unwrap(), "--size", "32"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    assert!(stdout.contains("parameters: 24441"), "{stdout}");
    assert!(stdout.contains("output=12x16x16") && stdout.contains("output=32x32x32"), "{stdout}");
    assert_eq!(onnkit(&["describe", "--config", config.to_str().unwrap(), "--size", "3x"]).status.code(), Some(1));
    let o = onnkit(&["describe", "--config", config.to_str().unwrap(), "--size", "31x32"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o.stderr));
}

#[test]
fn gradcheck_passes_for_builtin_sets() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[network]\ntier_sizes = 2, 1\nkernel_sizes = 3, 3\noperators = mul/sum/tanh, cubic/median/lincut; 36\n";
    let config = write(dir.path(), "check.ini", body);
    let o = onnkit(&["gradcheck", "--config", &config]);
    assert!(o.status.success(), "{}{}", text(&o.stdout), text(&o.stderr));
    let stdout = text(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.ends_with("PASS")).count(), 3, "{stdout}");
}

#[test]
fn gradcheck_reports_a_wrong_backward_rule() {
    let mut lib = register_builtin_library();
    let wrong = CustomBackward::binary(|w, x| w * x, |_, x| 2.0 * x, |w, _| w);
    lib.add_nodal(NodalOp::custom("bad", wrong)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let body = "[network]\ntier_sizes = 1\nkernel_sizes = 3\noperators = bad/sum/tanh\n";
    let config = write(dir.path(), "bad.ini", body);
    let mut out = Vec::new();
    let err = cmd_gradcheck(Path::new(&config), &lib, &mut out).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().starts_with("error: gradcheck: "), "{err}");
    let table = text(&out);
    assert!(table.lines().any(|l| l.contains("bad") && l.ends_with("FAIL")), "{table}");
}

#[test]
fn thread_count_from_the_environment() {
    let config = configs().join("identity.ini");
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, name: &str| {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_onnkit"))
            .args(["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("ONNKIT_THREADS", threads)
            .output()
            .unwrap();
        (o, out)
    };
    let (o, _) = run("zero", "a");
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("ONNKIT_THREADS"));
    let (o1, one) = run("1", "b");
    let (o3, three) = run("3", "c");
    assert!(o1.status.success() && o3.status.success());
    for p in ["train", "val", "test"] {
        let path = |d: &Path| d.join("fold_1").join(format!("{p}.csv"));
        assert_eq!(csv_column(&path(&one), "loss"), csv_column(&path(&three), "loss"));
    }
}
