mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use regenforge::io;
use regenforge::run_manifest::RunManifest;
use regenforge_core::distance::EmbeddingSet;
use regenforge_core::{ReviewStatus, SampleRecord, Source};

fn run(args: &[&str]) -> Output {
    Command::new(common::bin())
        .args(args)
        .env_remove("REGENFORGE_CONFIG")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let help = ok(&["--help"]);
    for cmd in ["prompt", "extract", "stats", "eval", "distance", "folds", "mix", "pseudolabel", "review"] {
        assert!(help.contains(&format!("  {cmd} ")), "{cmd} missing from help");
    }
    assert!(!help.contains("plugin-stub"));
}

#[test]
fn usage_errors_exit_1() {
    let out = run(&["stats"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--manifest"));

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = run(&["mix", "--manifest", "m.jsonl", "--emit", "3", "--strategy", "clumped"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_2() {
    let out = run(&["stats", "--manifest", "/nonexistent/manifest.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn extract_stats_and_self_eval_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let fixtures = common::fixture_dir();
    ok(&["extract", "--in", s(&fixtures), "--out", s(&out), "--watermark", "bottom-right:24x12", "-j", "2"]);
    let qa: Vec<Value> = io::read_jsonl(&out.join("qa.jsonl")).unwrap();
    assert_eq!(qa.len(), 13);
    let manifest = io::read_manifest(&out.join("manifest.jsonl")).unwrap();
    assert!(manifest.records.iter().all(|r| r.source == Source::Synthetic));

    let stats_path = dir.path().join("stats.json");
    let table = ok(&["stats", "--manifest", s(&out.join("manifest.jsonl")), "--out", s(&stats_path)]);
    assert!(table.contains("mIPQ"));
    let stats = read_json(&stats_path);
    let kept = manifest.records.iter().filter(|r| r.review_status != ReviewStatus::Rejected).count();
    assert_eq!(stats["n_masks"], kept);
    let total: f64 = stats["class_distribution"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["percent"].as_f64().unwrap())
        .sum();
    assert!((total - 100.0).abs() < 1e-9);

    let eval_path = dir.path().join("eval.json");
    let masks = out.join("masks");
    ok(&["eval", "--pred", s(&masks), "--gt", s(&masks), "--out", s(&eval_path)]);
    let eval = read_json(&eval_path);
    for key in ["macro_f1", "miou", "pixel_accuracy"] {
        assert_eq!(eval["metrics"][key].as_f64().unwrap(), 100.0, "{key}");
    }

    let rm = |p: &Path| -> RunManifest { io::read_json(p).unwrap() };
    let first = rm(&out.join("run_manifest.json"));
    assert_eq!(first.command, "extract");
    assert_eq!(first.inputs.len(), 13);
    assert!(!first.reproduction);
    ok(&["extract", "--in", s(&fixtures), "--out", s(&out), "--watermark", "bottom-right:24x12"]);
    assert!(rm(&out.join("run_manifest.json")).reproduction);
    ok(&["--seed", "3", "extract", "--in", s(&fixtures), "--out", s(&out), "--watermark", "bottom-right:24x12"]);
    assert!(!rm(&out.join("run_manifest.json")).reproduction);
    assert!(rm(&dir.path().join("eval.json.run_manifest.json")).inputs.len() >= 2);
}

#[test]
fn prompt_plan_and_zeroshot() {
    let dir = tempfile::tempdir().unwrap();
    let quotas = dir.path().join("quotas.toml");
    std::fs::write(&quotas, "\"Fir\" = 70\n\"Red Maple\" = 40\n\"Lowbush Blueberry\" = 30\n").unwrap();
    let out = dir.path().join("plan");
    ok(&["--seed", "5", "prompt", "plan", "--quotas", s(&quotas), "--out", s(&out)]);
    let index: Vec<Value> = io::read_jsonl(&out.join("plan.jsonl")).unwrap();
    let tax = regenforge_core::ClassTaxonomy::forest_regeneration_generation();
    for (name, quota) in [("Fir", 70), ("Red Maple", 40), ("Lowbush Blueberry", 30)] {
        let id = tax.by_name(name).unwrap().id;
        let covered = index
            .iter()
            .filter(|e| e["expected_classes"].as_array().unwrap().iter().any(|c| c == id))
            .count();
        assert!(covered >= quota, "{name}: {covered} < {quota}");
    }
    for e in &index {
        let text = std::fs::read_to_string(out.join(e["file"].as_str().unwrap())).unwrap();
        assert!(!text.is_empty());
        assert!(e["assignment"]["species"].as_array().unwrap().len() <= 5);
    }
    let again = dir.path().join("again");
    ok(&["--seed", "5", "prompt", "plan", "--quotas", s(&quotas), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(out.join("plan.jsonl")).unwrap(),
        std::fs::read(again.join("plan.jsonl")).unwrap()
    );

    let text = ok(&["prompt", "zeroshot", "--classes", "full"]);
    let tax = regenforge_core::ClassTaxonomy::forest_regeneration();
    for c in tax.classes() {
        let [r, g, b] = c.colour.0;
        let line = format!("{}: ({r}, {g}, {b})", c.name);
        assert!(text.lines().any(|l| l == line), "{line}");
    }
    assert_eq!(run(&["prompt", "zeroshot"]).status.code(), Some(1));
}

#[test]
fn distance_reports_relative_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let rows = |shift: f64| -> Vec<Vec<f64>> {
        (0..60)
            .map(|i| (0..3).map(|j| ((i * 7 + j * 3) % 11) as f64 / 11.0 + shift).collect())
            .collect()
    };
    let write = |name: &str, shift: f64| {
        let p = dir.path().join(name);
        io::write_embeddings(&p, &EmbeddingSet::from_rows(name, &rows(shift)).unwrap()).unwrap();
        p
    };
    let (real, near, far) = (write("real.emb", 0.0), write("near.emb", 1.0), write("far.emb", 2.0));
    let report = dir.path().join("d.json");
    ok(&["distance", "--a", s(&real), "--b", s(&far), "--baseline", s(&near), "--bandwidth", "1", "--out", s(&report)]);
    let r = read_json(&report);
    // Mean shifts of 2 and 1 along three axes, identical covariance.
    assert!((r["fid"].as_f64().unwrap() - 12.0).abs() < 1e-3);
    assert!((r["baseline"]["fid"].as_f64().unwrap() - 3.0).abs() < 1e-3);
    assert_eq!(r["baseline"]["fid_relative"], "+300 pp");
}

fn labelled_manifest(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("out");
    common::extract_fixtures(&out);
    let path = out.join("manifest.jsonl");
    let mut m = io::read_manifest(&path).unwrap();
    let sites = ["a1", "a2", "b1", "b2", "c1", "c2"];
    let synthetic: Vec<SampleRecord> = m.records.clone();
    for (i, r) in synthetic.iter().enumerate() {
        let mut h = r.clone();
        h.id = format!("real-{}", r.id);
        h.source = Source::HandLabelled;
        h.review_status = ReviewStatus::Accepted;
        h.site_name = Some(sites[i % sites.len()].to_string());
        m.push(h).unwrap();
    }
    io::write_manifest(&path, &m).unwrap();
    path
}

#[test]
fn folds_keep_sites_apart() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = labelled_manifest(dir.path());
    let sites = dir.path().join("sites.csv");
    std::fs::write(
        &sites,
        "site_id,lat,lon\na1,46.0,-72.0\na2,46.05,-72.0\nb1,47.0,-71.0\nb2,47.05,-71.0\nc1,48.0,-70.0\nc2,48.05,-70.0\n",
    )
    .unwrap();
    let out = dir.path().join("folds");
    ok(&["folds", "--sites", s(&sites), "--manifest", s(&manifest), "--k", "3", "--separation-km", "20", "--out", s(&out)]);
    let report = read_json(&out.join("folds.json"));
    assert_eq!(report["verify"]["passed"], true);
    assert_eq!(report["clusters"].as_array().unwrap().len(), 3);
    let map: Vec<Value> = io::read_jsonl(&out.join("fold_map.jsonl")).unwrap();
    let fold_of = |id: &str| map.iter().find(|e| e["id"] == id).map(|e| e["fold"].as_u64().unwrap());
    let m = io::read_manifest(&manifest).unwrap();
    let by_site = |site: &str| {
        m.records
            .iter()
            .filter(|r| r.site_name.as_deref() == Some(site))
            .map(|r| fold_of(&r.id).unwrap())
            .collect::<std::collections::BTreeSet<_>>()
    };
    assert_eq!(by_site("a1"), by_site("a2"));
    assert_ne!(by_site("a1"), by_site("b1"));
}

#[test]
fn mix_emits_balanced_batches_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = labelled_manifest(dir.path());
    let plans = dir.path().join("plans.jsonl");
    ok(&[
        "mix", "--manifest", s(&manifest), "--ratio", "0.4", "--strategy", "balanced", "--batch", "10", "--emit", "30",
        "--out", s(&plans),
    ]);
    let plans: Vec<Value> = io::read_jsonl(&plans).unwrap();
    assert_eq!(plans.len(), 30);
    for p in &plans {
        let entries = p["entries"].as_array().unwrap();
        assert_eq!(entries.len(), 10);
        assert_eq!(entries.iter().filter(|e| e["source"] == "synthetic").count(), 4);
    }
    let stdout = ok(&["mix", "--manifest", s(&manifest), "--emit", "2"]);
    assert_eq!(stdout.lines().count(), 2);

    let report = dir.path().join("mix.json");
    let table = ok(&["mix", "report", "--manifest", s(&manifest), "--batches", "200", "--out", s(&report)]);
    assert!(table.contains("analytic"));
    let r = read_json(&report);
    let sum: f64 = r["rows"].as_array().unwrap().iter().map(|x| x["analytic_percent"].as_f64().unwrap()).sum();
    assert!((sum - 100.0).abs() < 1e-6);
}

#[test]
fn review_decide_and_export_headless() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let records = common::extract_fixtures(&out);
    let qa = out.join("qa.jsonl");
    let log = dir.path().join("review.log");
    let reviewable: Vec<_> = records
        .iter()
        .filter(|r| r.report.verdict != regenforge_core::pair::Verdict::AutoReject)
        .collect();
    let first = &reviewable[0].id;
    let second = &reviewable[1].id;
    ok(&["review", "decide", "--log", s(&log), "--manifest", s(&qa), "--id", first, "--verdict", "accept"]);
    let out_reject = run(&["review", "decide", "--log", s(&log), "--id", second, "--verdict", "reject"]);
    assert_eq!(out_reject.status.code(), Some(1), "reject without tags");
    ok(&["review", "decide", "--log", s(&log), "--id", second, "--verdict", "reject", "--tags", "misalignment,watermark"]);
    let again = run(&["review", "decide", "--log", s(&log), "--id", first, "--verdict", "accept"]);
    assert_eq!(again.status.code(), Some(1));

    let stats: Value = serde_json::from_str(&ok(&["review", "stats", "--log", s(&log)])).unwrap();
    assert_eq!(stats["accepted"], 1);
    assert_eq!(stats["rejected"], 1);
    assert_eq!(stats["pending"], reviewable.len() - 2);

    let accepted = dir.path().join("accepted.jsonl");
    ok(&["review", "export", "--log", s(&log), "--out", s(&accepted)]);
    let m = io::read_manifest(&accepted).unwrap();
    assert_eq!(m.records.len(), 1);
    assert_eq!(&m.records[0].id, first);
}
