//! The rendered --help output must document every advertised flag and
//! subcommand, so the CLI surface and the docs cannot drift apart.

use std::process::Command;

fn help_for(args: &[&str]) -> String {
    let output = Command::new(env!("CARGO_BIN_EXE_segfield"))
        .args(args)
        .arg("--help")
        .output()
        .expect("run segfield --help");
    assert!(output.status.success(), "help for {args:?} failed");
    String::from_utf8(output.stdout).expect("utf8 help")
}

#[test]
fn top_level_help_lists_every_subcommand_and_global_flag() {
    let help = help_for(&[]);
    for sub in [
        "gen-scene",
        "extract-features",
        "pseudo-label",
        "train",
        "render",
        "evaluate",
        "run",
    ] {
        assert!(help.contains(sub), "missing subcommand {sub}:\n{help}");
    }
    for flag in ["--config", "--seed", "--output", "--log-level"] {
        assert!(help.contains(flag), "missing global flag {flag}:\n{help}");
    }
}

#[test]
fn subcommand_help_documents_advertised_flags() {
    let expectations: &[(&str, &[&str])] = &[
        ("gen-scene", &["--spec", "--out"]),
        (
            "extract-features",
            &["--scene", "--backend", "--cache", "--sam-dir"],
        ),
        ("pseudo-label", &["--scene", "--backend", "--metric", "--cache"]),
        ("train", &["--stage", "--scene", "--resume", "--config"]),
        ("render", &["--checkpoint", "--view", "--samples", "--backend"]),
        ("evaluate", &["--checkpoint", "--scene", "--samples"]),
        ("run", &["--config", "--seed", "--output"]),
    ];
    for (sub, flags) in expectations {
        let help = help_for(&[sub]);
        for flag in *flags {
            assert!(help.contains(flag), "{sub} help missing {flag}:\n{help}");
        }
    }
}

#[test]
fn cache_env_var_is_documented() {
    let help = help_for(&["extract-features"]);
    assert!(
        help.contains("SEGFIELD_FEATURE_CACHE"),
        "cache env var undocumented:\n{help}"
    );
}

#[test]
fn backend_choices_include_stub_and_sam() {
    let help = help_for(&["extract-features"]);
    assert!(help.contains("stub"));
    assert!(help.contains("sam"));
}
