use std::path::PathBuf;
use std::process::Command;

const SUBCOMMANDS: [&str; 7] = ["", "gen-data", "train", "evaluate", "grid", "compare", "report"];

fn help(sub: &str) -> String {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ssl-lab"));
    if !sub.is_empty() {
        cmd.arg(sub);
    }
    let out = cmd.arg("--help").env_remove("SSL_LAB_SEED").output().unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap()
}

fn golden(sub: &str) -> PathBuf {
    let name = if sub.is_empty() { "ssl-lab" } else { sub };
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.help.txt"))
}

/// Set UPDATE_GOLDEN=1 to rewrite the expected files.
#[test]
fn help_output_matches_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for sub in SUBCOMMANDS {
        let actual = help(sub);
        let path = golden(sub);
        if update {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &actual).unwrap();
            continue;
        }
        let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(actual, expected, "help for '{sub}' changed");
    }
}

#[test]
fn every_option_documents_its_default() {
    for sub in &SUBCOMMANDS[1..] {
        let text = help(sub);
        let mut entries: Vec<String> = Vec::new();
        for line in text.lines().skip_while(|l| *l != "Options:").skip(1) {
            if line.trim_start().starts_with('-') {
                entries.push(line.to_string());
            } else if let Some(last) = entries.last_mut() {
                last.push_str(line);
            }
        }
        assert!(!entries.is_empty());
        for e in entries.iter().filter(|e| !e.contains("--help")) {
            assert!(e.contains("[default:") || e.contains("[required]"), "{sub}: {e}");
        }
    }
}
