use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dualkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualkv")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn record(prompt: &str, prompt_tokens: &[u32], response: &[u32], advantage: f64) -> String {
    serde_json::json!({
        "prompt_id": prompt,
        "prompt_tokens": prompt_tokens,
        "response_tokens": response,
        "advantage": advantage,
    })
    .to_string()
}

fn two_prompts_four_responses() -> Vec<String> {
    let mut lines = Vec::new();
    for i in 0..4u32 {
        lines.push(record("alpha", &[1, 2, 3, 4, 5], &[10 + i; 3], 0.25 * i as f64 - 0.5));
        lines.push(record("beta", &[7, 8], &vec![20 + i; 2 + i as usize], 1.0 - 0.5 * i as f64));
    }
    lines
}

fn manifests(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn verify_kernel_suite_passes() {
    let o = dualkv(&["verify", "--suite", "kernel", "--seed", "7", "--cases", "50"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS kernel.dualkv_fwd_f64") && out.contains("50/50"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn verify_layer_reports_gradient_deviation() {
    let o = dualkv(&["verify", "--suite", "layer"]);
    assert_eq!(o.status.code(), Some(0));
    let line = stdout(&o).lines().find(|l| l.contains("gradient_equivalence")).unwrap().to_string();
    assert!(line.starts_with("PASS"), "{line}");
}

#[test]
fn verify_records_are_self_describing() {
    let o = dualkv(&["verify", "--suite", "pipeline", "--cases", "2", "--format", "records"]);
    assert_eq!(o.status.code(), Some(0));
    for line in stdout(&o).lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["record"], "check");
        assert_eq!(v["check"]["suite"], "pipeline");
        assert_eq!(v["passed"], true);
    }
}

#[test]
fn verify_is_deterministic_given_seed() {
    let a = dualkv(&["verify", "--suite", "all", "--seed", "3", "--cases", "3"]);
    let b = dualkv(&["verify", "--suite", "all", "--seed", "3", "--cases", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["verify", "--suite", "bogus"][..],
        &["analyze", "--n", "-3", "--p", "4", "--r", "2"],
        &["analyze", "--n", "0", "--p", "4", "--r", "2"],
        &["analyze", "--n", "2", "--p", "4", "--r", "abc"],
        &["analyze", "--n", "2", "--p", "4", "--r", "1,2,3"],
        &["analyze", "--n", "2", "--p", "4", "--r", "2", "--dims", "gpt-9"],
        &["bench", "--n", "2", "--p", "-1", "--r", "2"],
        &["bench", "--n", "2", "--p", "4", "--r", "2", "--heads", "3", "--kvheads", "2"],
        &["pack", "--input", "x", "--mode", "packed", "--mb", "2", "--out", "y"],
    ] {
        assert_eq!(dualkv(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn analyze_reproduces_table_rows() {
    let o = dualkv(&["analyze", "--n", "32", "--p", "16384", "--r", "2048"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("rho               7.2 "));

    let o = dualkv(&["analyze", "--n", "1", "--p", "100", "--r", "100", "--format", "records"]);
    let recs: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let get = |name: &str| recs.iter().find(|r| r["record"] == name).unwrap().clone();
    assert_eq!(get("tokens")["rho"], 1.0);
    assert_eq!(get("kernel_memory_saved_per_layer")["total_bytes"], 0);

    let o = dualkv(&["analyze", "--n", "8", "--p", "16384", "--r", "2048", "--dims", "qwen3-8b", "--format", "records"]);
    let recs: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mem = recs.iter().find(|r| r["record"] == "kernel_memory_saved_per_layer").unwrap();
    assert!((mem["total_mb"].as_f64().unwrap() - 1423.0).abs() <= 1.0);
}

#[test]
fn analyze_flags_the_speedup_disagreement() {
    let o = dualkv(&["analyze", "--n", "16", "--p", "32768", "--r", "2048"]);
    let out = stdout(&o);
    assert!(out.contains("formula N*S^2/(P^2+N*R*S)=8.76"), "{out}");
    assert!(out.contains("exact pair ratio=5.90"));
    assert!(out.contains("disagrees"));
}

#[test]
fn pack_dualkv_one_group_per_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rollouts.jsonl");
    let out = dir.path().join("manifests.jsonl");
    fs::write(&input, two_prompts_four_responses().join("\n")).unwrap();
    let o = dualkv(&["pack", "--input", input.to_str().unwrap(), "--mode", "dualkv", "--mb", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).matches("rho=").count(), 2);
    let ms = manifests(&out);
    assert_eq!(ms.len(), 2);
    for (m, (id, p, sum_r)) in ms.iter().zip([("alpha", 5u64, 12u64), ("beta", 2, 14)]) {
        let groups = m["batch"]["groups"].as_array().unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0]["prompt_id"], id);
        assert_eq!(m["total_tokens"].as_u64().unwrap(), p + sum_r);
        let rho = m["rho"].as_f64().unwrap();
        assert_eq!(rho, (4 * p + sum_r) as f64 / (p + sum_r) as f64);
        assert_eq!(groups[0]["advantages"].as_array().unwrap().len(), 4);
    }
}

#[test]
fn pack_round_trips_the_multiset() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rollouts.jsonl");
    let lines = two_prompts_four_responses();
    fs::write(&input, lines.join("\n")).unwrap();
    let mut want: Vec<Value> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    want.sort_by_key(|v| v.to_string());
    for (mode, mb) in [("dualkv", "4"), ("dualkv", "9"), ("standard", "3")] {
        let out = dir.path().join(format!("{mode}{mb}.jsonl"));
        let o = dualkv(&["pack", "--input", input.to_str().unwrap(), "--mode", mode, "--mb", mb, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        let mut got = Vec::new();
        for m in manifests(&out) {
            let b = &m["batch"];
            let tokens: Vec<u64> = b["token_ids"].as_array().unwrap().iter().map(|t| t.as_u64().unwrap()).collect();
            for g in b["groups"].as_array().unwrap() {
                let off = g["token_offset"].as_u64().unwrap() as usize;
                let p = g["prompt_len"].as_u64().unwrap() as usize;
                let cu: Vec<usize> = g["cu_seqlens"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap() as usize).collect();
                let shared = !g["context_span"].is_null();
                for (i, w) in cu.windows(2).enumerate() {
                    let (prompt, resp) = if shared {
                        (&tokens[off..off + p], &tokens[off + p + w[0]..off + p + w[1]])
                    } else {
                        (&tokens[off + w[0]..off + w[0] + p], &tokens[off + w[0] + p..off + w[1]])
                    };
                    got.push(serde_json::json!({
                        "prompt_id": g["prompt_id"],
                        "prompt_tokens": prompt,
                        "response_tokens": resp,
                        "advantage": g["advantages"][i],
                    }));
                }
            }
        }
        got.sort_by_key(|v| v.to_string());
        assert_eq!(got, want, "{mode} mb={mb}");
    }
}

#[test]
fn pack_names_the_inconsistent_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rollouts.jsonl");
    let mut lines = two_prompts_four_responses();
    lines.push(record("beta", &[7, 9], &[1], 0.0));
    fs::write(&input, lines.join("\n")).unwrap();
    let out = dir.path().join("m.jsonl");
    let o = dualkv(&["pack", "--input", input.to_str().unwrap(), "--mode", "dualkv", "--mb", "8", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("beta"), "{}", stderr(&o));
}

#[test]
fn pack_refuses_to_split_an_oversized_group() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rollouts.jsonl");
    fs::write(&input, two_prompts_four_responses().join("\n")).unwrap();
    let out = dir.path().join("m.jsonl");
    let args = |mode| vec!["pack", "--input", input.to_str().unwrap(), "--mode", mode, "--mb", "3", "--out", out.to_str().unwrap()];
    let o = dualkv(&args("dualkv"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpha"));
    assert_eq!(dualkv(&args("standard")).status.code(), Some(0));
}

#[test]
fn pack_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rollouts.jsonl");
    fs::write(&input, format!("{}\n{{not json}}\n", record("a", &[1], &[2], 0.0))).unwrap();
    let out = dir.path().join("m.jsonl");
    let o = dualkv(&["pack", "--input", input.to_str().unwrap(), "--mode", "standard", "--mb", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"));
}

#[test]
fn bench_reports_speedups_and_ratios() {
    let o = dualkv(&["bench", "--n", "3", "--p", "64", "--r", "16", "--heads", "2", "--kvheads", "1", "--dim", "4", "--reps", "2", "--bn", "16", "--format", "records"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let r = &v["report"];
    assert!(r["speedup_total"].as_f64().unwrap() > 0.0);
    assert_eq!(r["predicted_tokens"].as_f64().unwrap(), 240.0 / 112.0);
    for k in ["fa2", "dualkv"] {
        assert!(r[k]["bwd"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn bench_refuses_oversized_configs() {
    let o = dualkv(&["bench", "--n", "100000", "--p", "100000", "--r", "100000"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("limit"));
}
