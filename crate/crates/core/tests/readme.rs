//! Executes the command and scenario examples in the top-level README.

use std::path::Path;

use edgeserve::cli::main_with_args;

fn blocks<'a>(text: &'a str, lang: &str) -> Vec<&'a str> {
    let fence = format!("```{lang}\n");
    text.split(fence.as_str()).skip(1).filter_map(|b| b.split("```").next()).collect()
}

#[test]
fn readme_examples_run() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let readme = std::fs::read_to_string(root.join("README.md")).unwrap();
    std::env::set_current_dir(&root).unwrap();
    let tmp = tempfile::tempdir().unwrap();

    let mut ran = 0;
    for line in blocks(&readme, "console").iter().flat_map(|b| b.lines()) {
        let Some(cmd) = line.strip_prefix("$ ") else { continue };
        let (cmd, expect) = match cmd.split_once("# exits ") {
            Some((c, code)) => (c, code.trim().parse::<i32>().unwrap()),
            None => (cmd, 0),
        };
        let mut args: Vec<String> = cmd.split_whitespace().map(String::from).collect();
        assert_eq!(args[0], "edgeserve");
        args.push("--out".into());
        args.push(tmp.path().join(ran.to_string()).display().to_string());
        assert_eq!(main_with_args(&args), expect, "{cmd}");
        ran += 1;
    }
    assert!(ran >= 5);

    let toml = blocks(&readme, "toml");
    assert_eq!(toml.len(), 1);
    let sc = edgeserve::load_scenario(toml[0]).unwrap();
    assert_eq!(sc.servers.len(), 2);
    assert!(!sc.trace.is_empty());
}
