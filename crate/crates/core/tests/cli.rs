use std::path::Path;
use std::process::{Command, Output};

fn meff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meff")).args(args).env_remove("MEFF_SEED").output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn csv_rows(text: &str) -> Vec<csv::StringRecord> {
    csv::Reader::from_reader(text.as_bytes()).records().map(Result::unwrap).collect()
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema").join(name);
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&value).unwrap()
}

fn assert_valid(validator: &jsonschema::Validator, value: &serde_json::Value) {
    let errors: Vec<String> = validator.iter_errors(value).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn solve_compound_symmetry() {
    let out = meff(&["solve", "--structure", "cs", "--rho", "0.4", "--dim", "1000", "--alpha", "0.05"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&stdout(&out));
    assert_eq!(&rows[0][0], "exact");
    let alpha_loc: f64 = rows[0][2].parse().unwrap();
    assert!((alpha_loc - 1.05939e-4).abs() < 5e-10, "{alpha_loc}");
}

#[test]
fn galwey_on_identity() {
    let out = meff(&["meff", "--structure", "identity", "--dim", "100", "--method", "galwey"]);
    assert!(out.status.success());
    let rows = csv_rows(&stdout(&out));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "galwey");
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 100.0);
}

#[test]
fn reproduce_table3_matches_published_sums() {
    let out = meff(&["reproduce", "table3", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert_eq!(text.lines().next().unwrap(), meff::experiment::CSV_COLUMNS.join(","));
    let rows = csv_rows(&text);
    for (method, sum) in [("cheverud", 559.00), ("galwey", 582.38), ("liji", 400.0), ("gao", 1000.0)] {
        let row = rows.iter().find(|r| &r[3] == method).unwrap();
        assert!((row[4].parse::<f64>().unwrap() - sum).abs() <= 0.01, "{method}: {row:?}");
        assert_eq!(&row[8], "ok");
    }
}

#[test]
fn reports_are_deterministic_for_a_seed() {
    let args = ["reproduce", "table3", "--format", "json"];
    let a = Command::new(env!("CARGO_BIN_EXE_meff")).args(args).env("MEFF_SEED", "99").output().unwrap();
    let b = Command::new(env!("CARGO_BIN_EXE_meff")).args(args).arg("--seed").arg("99").output().unwrap();
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn json_outputs_follow_the_schemas() {
    let out = meff(&["reproduce", "table3", "--format", "json"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid(&schema("table_report.schema.json"), &report);

    let out = meff(&[
        "meff", "--structure", "ar1", "--rho", "0.5", "--dim", "50", "--method", "cheverud,nyholt,gao,liji,galwey,order2,exact",
        "--format", "json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 7);
    assert_valid(&schema("meff_result.schema.json"), &results);
}

#[test]
fn exit_codes_and_json_errors() {
    assert_eq!(meff(&["--help"]).status.code(), Some(0));
    assert_eq!(meff(&["solve", "--bogus"]).status.code(), Some(1));

    let out = meff(&["--format", "json", "solve", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["exit_code"], 1);

    let out = meff(&["meff", "--structure", "cs", "--rho", "1.5", "--dim", "10", "--format", "json"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["exit_code"], 2);
    assert!(err["error"]["message"].as_str().unwrap().contains("1.5"));

    let dir = tempfile::tempdir().unwrap();
    let singular = dir.path().join("singular.csv");
    std::fs::write(&singular, "1,1,0\n1,1,0\n0,0,1\n").unwrap();
    let out = meff(&["solve", "--matrix", singular.to_str().unwrap(), "--method", "qmc", "--format", "json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "not_positive_definite");

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let out = meff(&["meff", "--genotypes", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no data rows"));
}

#[test]
fn generated_matrix_feeds_back_in() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ar1.csv");
    let out = meff(&["gen", "--structure", "ar1", "--rho", "0.6", "--dim", "30", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    let from_file = meff(&["meff", "--matrix", path.to_str().unwrap(), "--method", "cheverud,liji"]);
    let direct = meff(&["meff", "--structure", "ar1", "--rho", "0.6", "--dim", "30", "--method", "cheverud,liji"]);
    assert!(from_file.status.success());
    assert_eq!(from_file.stdout, direct.stdout);
}

#[test]
fn block_wise_sums_per_block_estimates() {
    let out = meff(&[
        "meff", "--structure", "cs", "--rho", "0.7", "--dim", "10", "--blocks", "100", "--block-wise", "--method", "cheverud",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&stdout(&out));
    assert!((rows[0][1].parse::<f64>().unwrap() - 559.0).abs() < 1e-9);
}

#[test]
fn fwer_at_bonferroni_level_on_identity() {
    let out = meff(&["fwer", "--structure", "identity", "--dim", "20", "--meff", "20", "--alpha", "0.05"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&stdout(&out));
    assert!((rows[0][2].parse::<f64>().unwrap() - 0.05).abs() < 1e-12);
}

#[test]
fn score_command_runs_on_a_raw_file() {
    let dir = tempfile::tempdir().unwrap();
    let geno = dir.path().join("data.raw");
    let corr = dir.path().join("tcorr.csv");
    let mut text = String::from("IID PHENOTYPE rs1 rs2 rs3\n");
    for i in 0..40 {
        let y = (i as f64 * 0.7).sin() + 0.1 * (i % 3) as f64;
        text.push_str(&format!("s{i} {y} {} {} {}\n", i % 3, (i / 2) % 3, (i * 7 + 1) % 3));
    }
    std::fs::write(&geno, text).unwrap();
    let out = meff(&[
        "score", "--genotypes", geno.to_str().unwrap(), "--alpha-loc", "0.01", "--corr-out", corr.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&stdout(&out));
    assert_eq!(rows.len(), 3);
    let (r, names) = meff::io::read_correlation_matrix(&corr).unwrap();
    assert_eq!(r.dim(), 3);
    assert_eq!(names.unwrap(), vec!["rs1", "rs2", "rs3"]);
}
