use std::path::Path;

use zoo_cli::report::CampaignReport;
use zoo_cli::run;
use zoo_core::dataset::{parse_idx_tensor, synthetic_dataset};
use zoo_core::loss::{is_success, AttackGoal};
use zoo_core::model::{Layer, Network};
use zoo_core::numerics::Tensor;
use zoo_core::oracle::{NetworkOracle, Oracle};

fn zoo(args: &[&str]) -> (u8, String) {
    let mut out = Vec::new();
    let code = run(std::iter::once("zoo").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

const SYNTHETIC: &[&str] = &[
    "--dataset",
    "synthetic",
    "--classes",
    "4",
    "--synthetic-side",
    "12",
    "--synthetic-train",
    "400",
    "--synthetic-test",
    "40",
    "--hidden",
    "16",
    "--epochs",
    "8",
    "--learning-rate",
    "0.1",
    "--lr-decay",
    "1",
    "--max-shift",
    "0",
    "--train-batch",
    "16",
];

fn with(extra: &[&str]) -> Vec<String> {
    SYNTHETIC.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn args(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn train(dir: &Path) -> String {
    let model = dir.join("bars.zoo").display().to_string();
    let mut a = vec!["train".to_string()];
    a.extend(with(&["--model", &model]));
    let (code, out) = zoo(&args(&a));
    assert_eq!(code, 0, "{out}");
    let acc: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("test accuracy: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc >= 0.95, "{out}");
    model
}

fn attack(model: &str, out_dir: &Path, extra: &[&str]) -> CampaignReport {
    let out = out_dir.display().to_string();
    let mut a = vec!["attack".to_string()];
    a.extend(with(&["--model", model, "--output-dir", &out, "--batch", "16", "--iterations", "150", "--search-steps", "3", "--c0", "1"]));
    a.extend(extra.iter().map(|s| s.to_string()));
    let (code, text) = zoo(&args(&a));
    assert_eq!(code, 0, "{text}");
    serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn train_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = train(a.path());
    let mb = train(b.path());
    assert_eq!(std::fs::read(ma).unwrap(), std::fs::read(mb).unwrap());
}

#[test]
fn untargeted_campaign_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(dir.path());
    let out = dir.path().join("run");
    let report = attack(&model, &out, &["--n-images", "4"]);
    assert_eq!(report.attacks.len(), 4);
    let rate = report.summary.success_rate.unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert!(rate > 0.0);

    // Re-query every success from its lossless image file.
    let net = Network::load(Path::new(&model)).unwrap();
    let oracle = NetworkOracle::new(net);
    for row in &report.attacks {
        let q = &row.queries;
        assert_eq!(q.estimator, 2 * row.batch as u64 * row.iterations as u64);
        assert_eq!(q.total, q.oracle);
        for f in [&row.files.original, &row.files.noise, &row.files.adversarial, &row.files.trace] {
            assert!(out.join(f).is_file(), "{f}");
        }
        if row.success {
            let bytes = std::fs::read(out.join(&row.files.adversarial_tensor)).unwrap();
            let adv = parse_idx_tensor(&bytes).unwrap();
            let probs = oracle.query(&adv).unwrap();
            assert!(is_success(&probs, &AttackGoal::untargeted(row.original_label)));
        }
    }
    let ppm = std::fs::read(out.join(&report.attacks[0].files.original)).unwrap();
    assert!(ppm.starts_with(b"P6\n12 12\n255\n"));
    let trace = std::fs::read_to_string(out.join(&report.attacks[0].files.trace)).unwrap();
    assert!(trace.starts_with("iteration,total_loss,c_times_f,l2,queries\n"));

    // report.json round-trips byte for byte.
    let text = std::fs::read_to_string(out.join("report.json")).unwrap();
    let reparsed: CampaignReport = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string_pretty(&reparsed).unwrap(), text);

    let (code, table) = zoo(&["eval", &out.join("report.json").display().to_string()]);
    assert_eq!(code, 0);
    assert!(table.contains("success rate"), "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with('4'), "{table}");
}

#[test]
fn targeted_campaign_covers_every_other_class() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(dir.path());
    let report = attack(&model, &dir.path().join("t"), &["--n-images", "2", "--mode", "targeted"]);
    assert_eq!(report.attacks.len(), 2 * 3);
    for pair in report.attacks.chunks(3) {
        let label = pair[0].original_label;
        let mut targets: Vec<usize> = pair.iter().map(|r| r.target.unwrap()).collect();
        targets.sort();
        let expected: Vec<usize> = (0..4).filter(|&t| t != label).collect();
        assert_eq!(targets, expected);
    }
}

#[test]
fn output_dir_env_override_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(dir.path());
    let cfg = dir.path().join("campaign.cfg");
    let mut text = String::from("# campaign\n");
    for pair in with(&["--model", &model, "--n-images", "1", "--iterations", "20", "--search-steps", "1", "--batch", "8"]).chunks(2) {
        text.push_str(&format!("{} = {}\n", pair[0].trim_start_matches("--").replace('-', "_"), pair[1]));
    }
    std::fs::write(&cfg, text).unwrap();
    let env_out = dir.path().join("from-env");
    std::env::set_var("ZOO_OUTPUT_DIR", &env_out);
    let (code, out) = zoo(&["attack", "--config", &cfg.display().to_string()]);
    std::env::remove_var("ZOO_OUTPUT_DIR");
    assert_eq!(code, 0, "{out}");
    assert!(env_out.join("report.json").is_file());
}

#[test]
fn eval_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = r#"{"mode":"untargeted","config":{},"skipped_misclassified":0,"attacks":[],
        "summary":{"attacks":0,"successes":0,"success_rate":null,"mean_l2":null,"mean_queries":null}}"#;
    let path = dir.path().join("report.json");
    std::fs::write(&path, empty).unwrap();
    assert_eq!(zoo(&["eval", &path.display().to_string()]), (0, "no attacks\n".to_string()));

    std::fs::write(&path, "{not json").unwrap();
    assert_eq!(zoo(&["eval", &path.display().to_string()]).0, 2);

    let lying = empty.replace(r#""attacks":0"#, r#""attacks":3"#);
    std::fs::write(&path, lying).unwrap();
    assert_eq!(zoo(&["eval", &path.display().to_string()]).0, 2);
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(zoo(&["train", "--train-images", "/no/such/file"]).0, 2);
    let missing = dir.path().join("none.zoo").display().to_string();
    let mut a = vec!["attack".to_string()];
    a.extend(with(&["--model", &missing]));
    assert_eq!(zoo(&args(&a)).0, 2);
    assert_eq!(zoo(&["attack", "--dataset", "synthetic", "--n-images", "0"]).0, 2);
}

#[test]
fn no_correct_image_is_a_campaign_failure() {
    let dir = tempfile::tempdir().unwrap();
    // Default synthetic seed is 1; the test split uses seed 2.
    let label = synthetic_dataset(2, 1, 12, 4).unwrap()[0].label;
    let mut bias = vec![0.0; 4];
    bias[(label + 1) % 4] = 1.0;
    let net = Network::new(
        vec![12, 12, 1],
        vec![
            Layer::Flatten,
            Layer::Dense {
                weights: Tensor::zeros(&[4, 144]),
                bias: Tensor::from_slice(&bias),
            },
        ],
        4,
    )
    .unwrap();
    let model = dir.path().join("constant.zoo");
    net.save(&model).unwrap();
    let out = dir.path().join("o").display().to_string();
    let mut a = vec!["attack".to_string()];
    a.extend(with(&["--model", &model.display().to_string(), "--output-dir", &out]));
    let i = a.iter().position(|s| s == "--synthetic-test").unwrap();
    a[i + 1] = "1".into();
    assert_eq!(zoo(&args(&a)).0, 1);
}
