use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_se-verif"));
    c.env_remove("SE_VERIF_CONFIG");
    c
}

fn program(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../programs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn se-verif")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

#[test]
fn typecheck_accepts_and_rejects() {
    let ok = run(&["typecheck", program("add.se").to_str().unwrap()]);
    assert_eq!(code(&ok), 0);
    assert!(stdout(&ok).contains("public prog"));

    let bad = run(&["typecheck", program("keyreg_misuse.se").to_str().unwrap()]);
    assert_eq!(code(&bad), 2);
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("type error") && err.contains("keyReg"), "{err}");
}

#[test]
fn missing_file_and_unknown_variant_are_errors() {
    assert_eq!(code(&run(&["typecheck", "/nonexistent.se"])), 2);
    assert_eq!(code(&run(&["hw-check", "no-such-variant"])), 2);
    assert_eq!(code(&run(&["bogus-subcommand"])), 2);
}

#[test]
fn run_reports_cycles_and_stuck() {
    let o = run(&[
        "run",
        program("add.se").to_str().unwrap(),
        "--set",
        "r1=3",
        "--set",
        "r2=5",
        "--json",
    ]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    assert_eq!(v["cycles"], 6);
    assert!(v["registers"]["regs"]["r1"]["cipher"].is_u64());

    // enc on a ciphertext has no rule
    let o = run(&["run", program("add.se").to_str().unwrap(), "--set", "r1=3:cipher"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("stuck"));
}

#[test]
fn run_reveals_max() {
    let o = run(&[
        "run",
        program("max.se").to_str().unwrap(),
        "--set",
        "r1=9",
        "--set",
        "r2=4",
        "--set",
        "r3=4",
        "--width",
        "4,4",
        "--reveal",
    ]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let r2 = text.lines().find(|l| l.starts_with("r2 =")).unwrap();
    assert!(r2.ends_with("(decrypts to 9)"), "{text}");
}

#[test]
fn ni_check_passes_typed_programs() {
    let o = run(&[
        "ni-check",
        program("max.se").to_str().unwrap(),
        "--width",
        "2,2",
        "--json",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)["pass"], true);
    let o = run(&["ni-check", program("keyreg_misuse.se").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn hw_list_has_seven_variants() {
    let o = run(&["hw-list", "--json"]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 7);
    let secure = rows.iter().filter(|r| r["expected"]["secure"] == true).count();
    assert_eq!(secure, 3);
}

#[test]
fn hw_dump_shows_declassification() {
    let plain = stdout(&run(&["hw-dump", "default"]));
    let declass = stdout(&run(&["hw-dump", "default", "--declassify", "on"]));
    assert!(plain.contains("output valid"));
    assert!(!plain.contains("cf_ct"));
    assert!(declass.contains("cf_ct"));
}

#[test]
fn declassification_off_is_a_false_alert() {
    let o = run(&["hw-check", "default", "--declassify", "off"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("functional"));
    let o = run(&["hw-check", "default"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn hw_check_json_has_schema_fields_and_is_deterministic() {
    let args = ["hw-check", "vuln-cache", "--checker", "two-trace", "--json"];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(code(&a), 1);
    assert_eq!(a.stdout, b.stdout);
    let v = json(&a);
    for k in ["variant", "params", "checker", "verdicts"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    let hit = v["verdicts"]
        .as_array()
        .unwrap()
        .iter()
        .find(|x| x["source"] == "plaintext" && x["sink"] == "Valid")
        .unwrap();
    assert_eq!(hit["class"], "timing");
    assert!(!hit["witness_cycles"].as_array().unwrap().is_empty());
}

#[test]
fn random_mode_finds_the_rsa_leak() {
    let o = run(&[
        "hw-check",
        "vuln-rsa",
        "--checker",
        "two-trace",
        "--mode",
        "random",
        "--trials",
        "200",
        "--seed",
        "9",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("key → Valid: timing"));
}

#[test]
fn attack_recovers_with_reused_salt() {
    let o = run(&["attack", "--width", "8", "--mode", "reused", "--trials", "20", "--json"]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    assert_eq!(v["successes"], 20);
    assert!(v["max_iterations"].as_u64().unwrap() <= 8);
}

#[test]
fn check_all_single_width() {
    let o = run(&["check-all", "--widths", "2,2", "--no-ni", "--no-attack"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.contains(" secure ")).count(), 3);
    assert_eq!(text.lines().filter(|l| l.contains(" insecure ")).count(), 4);

    let args = [
        "check-all",
        "--widths",
        "2,2",
        "--no-ni",
        "--no-attack",
        "--no-ablation",
        "--json",
    ];
    let a = run(&args);
    assert_eq!(a.stdout, run(&args).stdout);
    assert_eq!(json(&a)["pass"], true);
}

#[test]
fn config_file_and_env() {
    let dir = std::env::temp_dir().join(format!("se-verif-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let good = dir.join("good.conf");
    std::fs::write(&good, "# test\noutput = json\nhw.rounds = 5\n").unwrap();
    let bad = dir.join("bad.conf");
    std::fs::write(&bad, "hw.bogus = 1\n").unwrap();

    let o = run(&["hw-list", "--config", good.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)[0]["params"]["rounds"], 5);

    let o = bin().arg("hw-list").env("SE_VERIF_CONFIG", &good).output().unwrap();
    assert_eq!(json(&o)[0]["params"]["rounds"], 5);

    // flags override the file
    let o = run(&["hw-list", "--config", good.to_str().unwrap(), "--rounds", "6"]);
    assert_eq!(json(&o)[0]["params"]["rounds"], 6);

    let o = run(&["hw-list", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hw.bogus"));
    std::fs::remove_dir_all(&dir).unwrap();
}
