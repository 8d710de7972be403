mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use regenforge::io;
use regenforge_core::{ClassTaxonomy, DatasetManifest, Rgb, RgbRaster, SampleRecord, Source};

const RULE: &str = "mean:128:9:6";

/// Three unlabelled images: dark, bright, and split down the middle.
fn setup(dir: &Path) -> PathBuf {
    let mut m = DatasetManifest::for_taxonomy(&ClassTaxonomy::forest_regeneration());
    let images: [(&str, usize, usize); 3] = [("dark", 300, 200), ("bright", 250, 250), ("split", 480, 180)];
    for (name, w, h) in images {
        let mut r = RgbRaster::filled(w, h, Rgb([40, 60, 30])).unwrap();
        for y in 0..h {
            for x in 0..w {
                let bright = name == "bright" || (name == "split" && x >= w / 2);
                if bright {
                    r.set(x, y, Rgb([220, 210, 200]));
                }
            }
        }
        let rel = format!("images/{name}.png");
        io::write_raster(&dir.join(&rel), &r).unwrap();
        let mut rec = SampleRecord::new(name, Source::Unlabelled, rel);
        rec.site_name = Some("s1".into());
        m.push(rec).unwrap();
    }
    let path = dir.join("manifest.jsonl");
    io::write_manifest(&path, &m).unwrap();
    path
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(common::bin())
        .args(args)
        .env_remove("REGENFORGE_CONFIG")
        .output()
        .unwrap()
}

fn plugin_cmd(fault: &str) -> String {
    format!("'{}' plugin-stub --classes 23 --rule {RULE} --fault {fault}", common::bin())
}

fn pseudolabel(manifest: &Path, classifier: &[&str]) -> serde_json::Value {
    let mut args = vec!["pseudolabel", "--manifest", manifest.to_str().unwrap(), "-j", "2"];
    args.extend_from_slice(classifier);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn masks(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    io::list_images(&dir.join("pseudo_masks"))
        .unwrap()
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect()
}

#[test]
fn plugin_labels_are_idempotent_and_match_in_process_stub() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let cmd = plugin_cmd("none");
    let summary = pseudolabel(&manifest, &["--classifier-cmd", &cmd, "--window", "224", "--stride", "112"]);
    assert_eq!(summary["written"].as_array().unwrap().len(), 3);
    let first = masks(dir.path());
    assert_eq!(first.len(), 3);

    let m = io::read_manifest(&manifest).unwrap();
    let pseudo: Vec<&SampleRecord> = m.by_source(Source::PseudoLabelled).collect();
    assert_eq!(pseudo.len(), 3);
    let split = m.records.iter().find(|r| r.id == "split:pseudo").unwrap();
    assert_eq!(split.site_name.as_deref(), Some("s1"));
    let mask = io::read_id_mask(&io::resolve(&manifest, split.mask_path.as_ref().unwrap()), 255).unwrap();
    assert_eq!((mask.width(), mask.height()), (480, 180));
    assert_eq!(mask.data()[0], 9);
    assert_eq!(mask.data()[479], 6);

    pseudolabel(&manifest, &["--classifier-cmd", &cmd]);
    assert_eq!(masks(dir.path()), first, "rerun is byte-identical");
    assert_eq!(io::read_manifest(&manifest).unwrap(), m, "rerun does not duplicate records");

    pseudolabel(&manifest, &["--stub-rule", RULE]);
    assert_eq!(masks(dir.path()), first, "plugin and in-process stub agree");

    pseudolabel(&manifest, &["--classifier-cmd", &plugin_cmd("stale-ids")]);
    assert_eq!(masks(dir.path()), first, "stale responses are skipped");
}

#[test]
fn misbehaving_plugins_quarantine_images() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    for (fault, extra) in [("bad-length", vec![]), ("silent", vec!["--timeout-s", "1"])] {
        let cmd = plugin_cmd(fault);
        let mut args = vec!["--classifier-cmd", cmd.as_str()];
        args.extend(extra);
        let summary = pseudolabel(&manifest, &args);
        assert_eq!(summary["written"].as_array().unwrap().len(), 0, "{fault}");
        assert_eq!(summary["quarantined"].as_array().unwrap().len(), 3, "{fault}");
    }
    assert_eq!(io::read_manifest(&manifest).unwrap().by_source(Source::PseudoLabelled).count(), 0);
}

#[test]
fn plugin_that_fails_to_start_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = setup(dir.path());
    let out = run(&[
        "pseudolabel",
        "--manifest",
        manifest.to_str().unwrap(),
        "--classifier-cmd",
        "exit 3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["pseudolabel", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--classifier-cmd"));
}
