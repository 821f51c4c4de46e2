use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use stopline_core::analytics::{emit_report, ReportFormat};
use stopline_core::correspond::CorrespondenceSet;
use stopline_core::pipeline::{self, PipelineConfig};
use stopline_core::store::{SiteRecord, Store};
use stopline_core::synthkit::{gen_approach, Approach, ApproachOptions, ApproachProfile, SynthScene};

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn json(&self) -> Value {
        serde_json::from_str(self.stdout.trim()).unwrap_or_else(|e| panic!("{e}: {}", self.stdout))
    }

    fn error(&self) -> Value {
        serde_json::from_str(self.stderr.trim().lines().last().unwrap_or("")).unwrap_or_else(|e| panic!("{e}: {}", self.stderr))
    }
}

fn stopline(store: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_stopline"))
        .arg("--store")
        .arg(store)
        .args(args)
        .env_remove("STOPLINE_CONFIG")
        .env_remove("STOPLINE_STORE_DIR")
        .env_remove("STOPLINE_SEED")
        .env_remove("STOPLINE_A_TRIGGER")
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

struct Fixture {
    dir: tempfile::TempDir,
    scene: SynthScene,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let scene = SynthScene::standard();
        scene.render_ortho().save(dir.path().join("ortho.png")).unwrap();
        std::fs::write(dir.path().join("ortho.pgw"), scene.geotransform.to_world_file()).unwrap();
        let mut set = CorrespondenceSet::new(&scene.site_id, "camera.png", "ortho.png");
        set.pairs = scene.correspondences(12, 0.5, 3);
        std::fs::write(dir.path().join("pairs.json"), set.to_json()).unwrap();
        std::fs::write(dir.path().join("annotations.json"), serde_json::to_string(&scene.annotations).unwrap()).unwrap();
        Self { dir, scene }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn store(&self, name: &str) -> PathBuf {
        self.path(name)
    }

    /// A site with ortho, homography and annotations in the named store.
    fn ready(&self, store: &str) -> PathBuf {
        let store = self.store(store);
        let site = self.scene.site_id.as_str();
        let r = stopline(&store, &["fetch-ortho", "--site", site, "--image", &self.p("ortho.png")]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let r = stopline(&store, &["estimate", "--pairs", &self.p("pairs.json")]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let r = stopline(&store, &["annotate", "--site", site, "--file", &self.p("annotations.json")]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        store
    }

    /// Writes `n` braking approaches as separate videos and returns the
    /// `--detections/--meta` arguments for them.
    fn videos(&self, n: usize) -> (Vec<Approach>, Vec<String>) {
        let mut approaches = Vec::new();
        let mut args = Vec::new();
        for i in 0..n {
            let opts = ApproachOptions {
                video_id: format!("synth-{i:04}"),
                track_id: 10 + i as i64,
                noise_px: 0.5,
                seed: 100 + i as u64,
                ..Default::default()
            };
            let profile = ApproachProfile::braking(14.0 + i as f64, 2.5 + 0.5 * (i % 3) as f64, 40.0);
            let a = gen_approach(&self.scene, &profile, &opts).unwrap();
            let (d, m) = (format!("d{i}.ndjson"), format!("m{i}.json"));
            std::fs::write(self.path(&d), a.detections_ndjson()).unwrap();
            std::fs::write(self.path(&m), a.meta_json()).unwrap();
            args.extend(["--detections".to_string(), self.p(&d), "--meta".to_string(), self.p(&m)]);
            approaches.push(a);
        }
        (approaches, args)
    }
}

#[test]
fn estimate_is_deterministic_and_prints_its_seed() {
    let f = Fixture::new();
    let store = f.store("s");
    let pairs = f.p("pairs.json");
    let a = stopline(&store, &["estimate", "--pairs", &pairs, "--seed", "42"]);
    let b = stopline(&store, &["estimate", "--pairs", &pairs, "--seed", "42"]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(a.stdout, b.stdout);
    let v = a.json();
    assert_eq!(v["seed"], 42);
    assert_eq!(v["inliers"], 12);
    let default = stopline(&store, &["estimate", "--site", &f.scene.site_id]).json();
    assert_eq!(default["seed"], 42, "the default seed is fixed and reported");

    let site = Store::open_read_only(&store).unwrap().get_site(&f.scene.site_id).unwrap();
    assert_eq!(site.homographies.len(), 1, "re-estimating replaces the default record");

    let windowed = stopline(&store, &["estimate", "--site", &f.scene.site_id, "--window", "07:00-12:00"]);
    assert_eq!(windowed.code, 0, "{}", windowed.stderr);
    assert_eq!(windowed.json()["window"]["kind"], "time_of_day");
    let site = Store::open_read_only(&store).unwrap().get_site(&f.scene.site_id).unwrap();
    assert_eq!(site.homographies.len(), 2);
}

#[test]
fn ingest_counts_match_the_shared_pipeline() {
    let f = Fixture::new();
    let store = f.ready("s");
    let (approaches, args) = f.videos(1);
    let mut argv = vec!["ingest", "--site", f.scene.site_id.as_str()];
    argv.extend(args.iter().map(String::as_str));
    let r = stopline(&store, &argv);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report = r.json();

    let site: SiteRecord = Store::open_read_only(&store).unwrap().get_site(&f.scene.site_id).unwrap();
    let a = &approaches[0];
    let direct = pipeline::ingest_video(&site, &PipelineConfig::default(), &a.detections_ndjson(), &a.meta).unwrap();
    assert_eq!(report, serde_json::to_value(&direct.report).unwrap());
    assert_eq!(report["trajectories"], 1);
    assert_eq!(report["events"], 1);
}

#[test]
fn parallel_ingest_is_order_independent() {
    let f = Fixture::new();
    let (_, args) = f.videos(5);
    let mut exports = Vec::new();
    for (name, n) in [("one", "1"), ("four", "4")] {
        let store = f.ready(name);
        let mut argv = vec!["ingest", "--site", f.scene.site_id.as_str(), "--parallel", n];
        argv.extend(args.iter().map(String::as_str));
        let r = stopline(&store, &argv);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let ids: Vec<String> = r
            .stdout
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["video_id"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(ids, (0..5).map(|i| format!("synth-{i:04}")).collect::<Vec<_>>());
        let events = stopline(&store, &["export", "--table", "events"]);
        let tracks = stopline(&store, &["export", "--table", "trajectories", "--site", &f.scene.site_id]);
        assert_eq!(events.stdout.lines().count(), 5);
        exports.push((r.stdout, events.stdout, tracks.stdout));
    }
    assert_eq!(exports[0], exports[1]);
}

#[test]
fn report_csv_matches_emit_report() {
    let f = Fixture::new();
    let store = f.ready("s");
    let (_, args) = f.videos(3);
    let mut argv = vec!["ingest", "--site", f.scene.site_id.as_str()];
    argv.extend(args.iter().map(String::as_str));
    assert_eq!(stopline(&store, &argv).code, 0);

    let r = stopline(&store, &["report", "--site", &f.scene.site_id, "--product", "hourly-stats", "--format", "csv"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let out = f.path("expected");
    let products = pipeline::site_products(&Store::open_read_only(&store).unwrap(), &f.scene.site_id, &["hourly-stats"], None).unwrap();
    let paths = emit_report(&products, ReportFormat::Csv, &out).unwrap();
    assert_eq!(r.stdout, std::fs::read_to_string(&paths[0]).unwrap());
    assert!(r.stdout.starts_with("hour,"), "{}", r.stdout);

    let dir = f.path("reports");
    let r = stopline(&store, &["report", "--site", &f.scene.site_id, "--out", dir.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.json()["files"].as_array().unwrap().len(), 5);
    assert!(dir.join("rstart-ecdf.json").exists());
}

#[test]
fn detect_reruns_with_new_thresholds() {
    let f = Fixture::new();
    let store = f.ready("s");
    let (_, args) = f.videos(2);
    let mut argv = vec!["ingest", "--site", f.scene.site_id.as_str()];
    argv.extend(args.iter().map(String::as_str));
    assert_eq!(stopline(&store, &argv).code, 0);
    let before = stopline(&store, &["export", "--table", "events"]).stdout;

    let r = stopline(&store, &["detect", "--site", &f.scene.site_id]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.stdout.lines().count(), 2);
    assert_eq!(stopline(&store, &["export", "--table", "events"]).stdout, before);

    let r = stopline(&store, &["detect", "--site", &f.scene.site_id, "--video", "synth-0001", "--a-trigger", "20"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.json()["events"], 0);
    assert_eq!(stopline(&store, &["export", "--table", "events"]).stdout.lines().count(), 1);
}

#[test]
fn errors_are_json_with_documented_exit_codes() {
    let f = Fixture::new();
    let store = f.store("s");

    let r = stopline(&store, &["report", "--site", "nowhere"]);
    assert_eq!(r.code, 5);
    assert_eq!(r.error()["error"]["code"], "site_not_found");
    assert_eq!(r.error()["exit_code"], 5);

    std::fs::write(f.path("bad.json"), "{ not json").unwrap();
    let r = stopline(&store, &["estimate", "--pairs", &f.p("bad.json")]);
    assert_eq!(r.code, 4, "{}", r.stderr);
    assert_eq!(r.error()["error"]["code"], "invalid_pairs");

    let mut set = CorrespondenceSet::new("few", "c.png", "o.png");
    set.pairs = f.scene.correspondences(4, 0.0, 1);
    set.pairs.truncate(3);
    std::fs::write(f.path("few.json"), set.to_json()).unwrap();
    let r = stopline(&store, &["estimate", "--pairs", &f.p("few.json")]);
    assert!(r.code == 4, "{} {}", r.code, r.stderr);

    let r = stopline(&store, &["fetch-ortho", "--site", "x", "--bbox", "-81.1,29.1,-81.0,29.2"]);
    assert_eq!(r.code, 7);
    assert_eq!(r.error()["error"]["code"], "imagery_unreachable");

    // Ingest before any homography or annotations exist.
    let r = stopline(&store, &["fetch-ortho", "--site", "bare", "--image", &f.p("ortho.png")]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let (_, args) = f.videos(1);
    let mut argv = vec!["ingest", "--site", "bare"];
    argv.extend(args.iter().map(String::as_str));
    let r = stopline(&store, &argv);
    assert_eq!(r.code, 6, "{}", r.stderr);

    let r = stopline(&store, &["export", "--table", "pies"]);
    assert_eq!(r.code, 5);

    std::fs::write(f.path("broken.toml"), "listen = [").unwrap();
    let r = stopline(&store, &["--config", &f.p("broken.toml"), "export", "--table", "events"]);
    assert_eq!(r.code, 3);
    assert_eq!(r.error()["error"]["code"], "invalid_config");

    let r = stopline(&store, &["ingest", "--site", "bare"]);
    assert_eq!(r.code, 2);
    assert_eq!(r.error()["error"]["code"], "usage");
    assert!(r.error()["error"]["message"].as_str().unwrap().contains("--detections"), "{}", r.stderr);
}
