use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wsimil::embedding::{read_wemb, write_wemb};
use wsimil::metrics::{read_metrics_csv, MetricsReport};
use wsimil::tiling::{PatchManifest, RasterImage};
use wsimil::Checkpoint;
use wsimil_cli::{cmd_report, EmbedConfig};

fn wsimil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsimil"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = wsimil(args);
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

/// Pink tissue over most of a white slide, with some texture.
fn tissue_image(path: &Path, w: usize, h: usize) {
    let mut img = RasterImage::filled(w, h, [250, 250, 250]).unwrap();
    for y in 0..h {
        for x in 0..w {
            if x >= 8 && y >= 8 {
                let shade = ((x * 7 + y * 13) % 40) as u8;
                img.set_pixel(x, y, [200 + shade / 2, 60 + shade, 140]);
            }
        }
    }
    img.save_png(path).unwrap();
}

fn small_synth(dir: &Path, seed: &str) -> PathBuf {
    let cfg = dir.join("synth.toml");
    std::fs::write(
        &cfg,
        "n_patients = 16\nmin_instances = 10\nmax_instances = 20\nsignal_rate = 0.4\noffset_norm = 4.0\n\
         [[extractors]]\nname = \"a\"\ndim = 6\n[[extractors]]\nname = \"b\"\ndim = 5\n",
    )
    .unwrap();
    let out = dir.join(format!("synth{seed}"));
    let printed = ok(&["synth", "--config", s(&cfg), "--seed", seed, "--out", s(&out)]);
    assert_eq!(printed.trim(), s(&out.join("dataset.json")));
    out.join("dataset.json")
}

fn train_toml(dir: &Path) -> PathBuf {
    let p = dir.join("train.toml");
    std::fs::write(&p, "epochs = 3\nlearning_rate = 1e-3\nattention_dim = 8\nhead_widths = [8]\n").unwrap();
    p
}

#[test]
fn tile_counts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("slide1.png");
    tissue_image(&img, 512, 512);
    let out = dir.path().join("tiles");
    let printed = ok(&["tile", s(&img), "--out", s(&out), "--write-patches"]);
    let manifest_path = out.join("slide1.patches.json");
    assert_eq!(printed.trim(), s(&manifest_path));
    let first = std::fs::read(&manifest_path).unwrap();
    let manifest = PatchManifest::load(&manifest_path).unwrap();
    assert_eq!(manifest.patches.len(), 4);
    assert_eq!(manifest.magnification, "20x");
    assert!(out.join("patches/slide1_1_1.png").exists());

    ok(&["tile", s(&img), "--out", s(&out)]);
    assert_eq!(std::fs::read(&manifest_path).unwrap(), first);
}

#[test]
fn tile_missing_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = wsimil(&["tile", s(&dir.path().join("nope.png")), "--out", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("wsimil: error["), "{err}");
    assert!(err.contains("nope.png"));
}

#[test]
fn embed_two_extractors_and_import() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("s1.png");
    tissue_image(&img, 512, 512);
    let tiles = dir.path().join("tiles");
    ok(&["tile", s(&img), "--out", s(&tiles)]);
    let manifest = tiles.join("s1.patches.json");

    let cfg = dir.path().join("extractors.toml");
    std::fs::write(
        &cfg,
        "[[extractors]]\nname = \"fa\"\ndim = 16\nkind = \"synthetic\"\nseed = 1\n\
         [[extractors]]\nname = \"fb\"\ndim = 8\nkind = \"synthetic\"\nseed = 2\n",
    )
    .unwrap();
    let labels = dir.path().join("labels.csv");
    std::fs::write(&labels, "slide_id,patient_id,label\ns1,p1,1\n").unwrap();
    let emb = dir.path().join("emb");
    ok(&["embed", s(&manifest), "--config", s(&cfg), "--out", s(&emb), "--labels", s(&labels)]);
    let fa = read_wemb(emb.join("s1.fa.wemb")).unwrap();
    let fb = read_wemb(emb.join("s1.fb.wemb")).unwrap();
    assert_eq!(fa.matrix.dim(), (4, 16));
    assert_eq!(fb.matrix.dim(), (4, 8));
    let bytes = std::fs::read(emb.join("s1.fa.wemb")).unwrap();
    let data = wsimil::load_dataset(emb.join("dataset.json"), &[]).unwrap();
    assert_eq!(data.bags[0].features.dim(), (4, 24));
    assert_eq!(data.bags[0].patient_id, "p1");

    ok(&["embed", s(&manifest), "--config", s(&cfg), "--out", s(&emb)]);
    assert_eq!(std::fs::read(emb.join("s1.fa.wemb")).unwrap(), bytes);

    // Re-import fa's output as an external extractor.
    let ext = dir.path().join("ext");
    std::fs::create_dir(&ext).unwrap();
    write_wemb(ext.join("s1.ext.wemb"), "ext", &fa.keys, fa.matrix.view()).unwrap();
    let imp = dir.path().join("imported.toml");
    std::fs::write(
        &imp,
        format!(
            "[[extractors]]\nname = \"ext\"\ndim = 16\nkind = \"imported\"\npath = \"{}/{{slide}}.ext.wemb\"\n",
            ext.display()
        ),
    )
    .unwrap();
    let emb2 = dir.path().join("emb2");
    ok(&["embed", s(&manifest), "--config", s(&imp), "--out", s(&emb2)]);
    assert_eq!(read_wemb(emb2.join("s1.ext.wemb")).unwrap().matrix, fa.matrix);
}

#[test]
fn embed_rejects_unknown_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[[extractors]]\nname = \"x\"\ndim = 4\nkind = \"resnet\"\n").unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(&manifest, "{}").unwrap();
    let out = wsimil(&["embed", s(&manifest), "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]"));
    assert!(EmbedConfig::from_toml_str("[[extractors]]\nname = \"x\"\ndim = 4\nkind = \"resnet\"\n").is_err());
}

#[test]
fn cv_writes_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_synth(dir.path(), "5");
    let cfg = train_toml(dir.path());
    let a = dir.path().join("cv_a");
    let b = dir.path().join("cv_b");
    ok(&["cv", s(&manifest), "--config", s(&cfg), "--out", s(&a)]);
    ok(&["cv", s(&manifest), "--config", s(&cfg), "--out", s(&b)]);
    for f in ["report.json", "report.csv", "fold0.wmil", "fold3.wmil"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let report = MetricsReport::load_json(a.join("report.json")).unwrap();
    assert_eq!(report.folds.len(), 4);
    assert_eq!(report.predictions.len(), 16);
    let (folds, aggregate) = read_metrics_csv(&std::fs::read_to_string(a.join("report.csv")).unwrap()).unwrap();
    assert_eq!(folds.len(), 4);
    assert_eq!(aggregate, report.aggregate);
    let ck = Checkpoint::load(a.join("fold0.wmil")).unwrap();
    assert_eq!(ck.layout.extractors, vec!["a", "b"]);
    assert_eq!(ck.config_hash.len(), 64);
}

#[test]
fn cv_flags_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_synth(dir.path(), "6");
    let cfg = train_toml(dir.path());
    let out = dir.path().join("cv");
    ok(&[
        "cv", s(&manifest), "--config", s(&cfg), "--out", s(&out), "--k", "3", "--cap", "12",
        "--fusion", "attention", "--extractors", "b", "--seed", "2",
    ]);
    let report = MetricsReport::load_json(out.join("report.json")).unwrap();
    assert_eq!(report.folds.len(), 3);
    assert_eq!(report.provenance["extractors"], serde_json::json!(["b"]));
    assert_eq!(report.provenance["config"]["patches_per_bag"], 12);

    let too_many = wsimil(&["cv", s(&manifest), "--config", s(&cfg), "--out", s(&out), "--k", "20"]);
    assert_eq!(too_many.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&too_many.stderr).contains("too-few-patients"));

    let unknown = wsimil(&["cv", s(&manifest), "--out", s(&out), "--extractors", "zz"]);
    assert!(!unknown.status.success());
}

#[test]
fn report_tabulates_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_synth(dir.path(), "7");
    let cfg = train_toml(dir.path());
    let mut reports = Vec::new();
    for (name, extractors) in [("both", "a,b"), ("only_a", "a"), ("only_b", "b")] {
        let out = dir.path().join(name);
        ok(&["cv", s(&manifest), "--config", s(&cfg), "--out", s(&out), "--extractors", extractors]);
        reports.push(out.join("report.json"));
    }
    let table_path = dir.path().join("table.csv");
    let args: Vec<&str> = ["report"]
        .into_iter()
        .chain(reports.iter().map(|p| s(p)))
        .chain(["--out", s(&table_path)])
        .collect();
    ok(&args);
    let table = std::fs::read_to_string(&table_path).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("configuration,extractors,fusion,n_folds,roc_auc,roc_auc_std"));
    assert!(lines[1].starts_with("both,a+b,concat,4,"));
    assert!(lines[3].starts_with("only_b,b,concat,4,"));

    let mut odd = MetricsReport::load_json(&reports[0]).unwrap();
    odd.aggregate.remove("accuracy");
    let odd_path = dir.path().join("odd.json");
    std::fs::write(&odd_path, odd.to_json().unwrap()).unwrap();
    assert!(cmd_report(&[reports[0].clone(), odd_path]).is_err());
    assert!(cmd_report(&[]).is_err());
}
