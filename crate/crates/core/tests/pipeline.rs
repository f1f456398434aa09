use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use gsrefine::mask::BinaryMask;
use gsrefine::metrics::psnr;
use gsrefine::pipeline::fixture::{fixture_views, write_fixture};
use gsrefine::pipeline::{
    composite, level_up, run_alg1, run_refine, Generator, GeneratorRequest, PipelineConfig,
    PipelineManifest, Reconstructor, StubGenerator, StubReconstructor, ViewStatus, EXIT_BACKEND,
    EXIT_OK, EXIT_PARTIAL, MANIFEST_FILE,
};
use gsrefine::render::{render, RenderOptions};
use gsrefine::scene::{load_scene_ply, TokenGrid, ViewImage};

fn fixture() -> (tempfile::TempDir, PipelineConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_fixture(&dir.path().join("fixture")).unwrap();
    let cfg = PipelineConfig::load(&cfg_path).unwrap();
    (dir, cfg)
}

/// Every file under `root` keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn manifest_without_stamps(dir: &Path) -> serde_json::Value {
    let m = PipelineManifest::load(dir.join(MANIFEST_FILE)).unwrap();
    let mut v = serde_json::to_value(m).unwrap();
    v.as_object_mut().unwrap().remove("stages");
    v
}

#[test]
fn composite_keeps_unmasked_pixels_and_takes_the_rest() {
    let coarse = ViewImage::new(6, 4, [0.1, 0.2, 0.3]);
    let gen = ViewImage::new(6, 4, [0.9, 0.8, 0.7]);
    let mask = BinaryMask::from_fn(6, 4, |x, y| x == y);
    let out = composite(&coarse, &gen, &mask).unwrap();
    for y in 0..4 {
        for x in 0..6 {
            assert_eq!(
                out.get(x, y),
                if x == y {
                    gen.get(x, y)
                } else {
                    coarse.get(x, y)
                }
            );
        }
    }
    assert!(composite(&coarse, &ViewImage::new(5, 4, [0.0; 3]), &mask).is_err());
}

#[test]
fn stub_reconstruction_reproduces_the_inputs() {
    let views = fixture_views();
    let scene = StubReconstructor::default().reconstruct(&views).unwrap();
    for v in &views {
        let out = render(&scene, &v.pose, &RenderOptions::default());
        let p = psnr(&out.color, &v.image, 1.0).unwrap();
        assert!(p > 30.0, "{}: {p:.2} dB", v.label);
    }
}

#[test]
fn level_up_without_refined_views_matches_the_inputs_alone() {
    let views = fixture_views();
    let recon = StubReconstructor::default();
    let (scene, stats) = level_up(&views, &[], &recon).unwrap();
    assert_eq!(scene, recon.reconstruct(&views).unwrap());
    assert_eq!(stats.dispatched, ["input:0", "input:1"]);
    // a repeated input is dispatched once
    let (_, stats) = level_up(&views, &views[..1], &recon).unwrap();
    assert_eq!(stats.duplicates_dropped, 1);
}

#[test]
fn full_run_composites_levels_up_and_raises_opacity() {
    let (tmp, cfg) = fixture();
    let out = tmp.path().join("run");
    let outcome = run_alg1(&cfg, &out).unwrap();
    assert_eq!(outcome.exit_code(), EXIT_OK);
    let m = &outcome.manifest;
    assert_eq!(m.extrapolated.len(), 6);
    assert!(m
        .extrapolated
        .iter()
        .all(|v| v.status == ViewStatus::Completed && !v.resumed));
    // at least the exterior views must have something to generate
    assert!(m.extrapolated[0].mask_fraction > 0.0 && m.extrapolated[5].mask_fraction > 0.0);

    for v in &m.extrapolated {
        let dir = out.join(&v.artifacts.dir);
        let coarse = ViewImage::load_png(dir.join("coarse.png")).unwrap();
        let refined = ViewImage::load_png(dir.join("refined.png")).unwrap();
        let mask = BinaryMask::load_png(dir.join("mask.png")).unwrap();
        let req = GeneratorRequest {
            request_id: v.request_id.clone(),
            coarse: coarse.clone(),
            mask: mask.clone(),
            reference: coarse.clone(),
            tokens: TokenGrid::zeros(1, 1, 8),
            pose: v.pose.to_pose(),
            seed: 0,
        };
        let generated = StubGenerator.generate(&req).unwrap().quantized();
        let (cb, rb, gb) = (coarse.to_rgb8(), refined.to_rgb8(), generated.to_rgb8());
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                let want = if mask.get(x, y) {
                    gb.get_pixel(x as u32, y as u32)
                } else {
                    cb.get_pixel(x as u32, y as u32)
                };
                assert_eq!(
                    rb.get_pixel(x as u32, y as u32),
                    want,
                    "view {} pixel ({x}, {y})",
                    v.index
                );
            }
        }
    }

    let lu = m.level_up.as_ref().unwrap();
    assert_eq!(lu.views_dispatched, 8);
    assert_eq!(&m.h_order[..2], ["input:0", "input:1"]);
    assert!(m.h_order[2..].iter().all(|h| h.starts_with("refined:")));
    assert!(out.join("scene_coarse.ply").exists());
    let leveled = load_scene_ply(out.join("scene_leveled.ply")).unwrap();
    assert_eq!(leveled.len(), lu.primitives);

    let eval = m.eval.as_ref().unwrap();
    for (b, a) in eval
        .mean_opacity_before
        .iter()
        .zip(&eval.mean_opacity_after)
    {
        assert!(a >= b, "mean opacity fell from {b} to {a}");
    }
    assert!(eval.inputs.iter().all(|e| e.psnr.unwrap() > 20.0));
}

#[test]
fn rerun_is_bit_identical() {
    let (tmp, cfg) = fixture();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_alg1(&cfg, &a).unwrap();
    run_alg1(&cfg, &b).unwrap();
    assert_eq!(manifest_without_stamps(&a), manifest_without_stamps(&b));
    let (mut sa, mut sb) = (snapshot(&a), snapshot(&b));
    sa.remove(Path::new(MANIFEST_FILE));
    sb.remove(Path::new(MANIFEST_FILE));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs", k.display());
    }
}

#[test]
fn seed_changes_request_ids() {
    let (tmp, mut cfg) = fixture();
    let a = run_refine(&cfg, &tmp.path().join("a")).unwrap().manifest;
    cfg.run.seed = 1;
    let b = run_refine(&cfg, &tmp.path().join("b")).unwrap().manifest;
    assert_ne!(a.config_key, b.config_key);
    assert!(a
        .extrapolated
        .iter()
        .zip(&b.extrapolated)
        .all(|(x, y)| x.request_id != y.request_id));
}

#[test]
fn resume_only_regenerates_missing_views() {
    let (tmp, cfg) = fixture();
    let out = tmp.path().join("run");
    let first = run_alg1(&cfg, &out).unwrap().manifest;
    let victim = &first.extrapolated[2];
    let victim_path = out.join(&victim.artifacts.refined);
    let original = std::fs::read(&victim_path).unwrap();
    std::fs::remove_file(&victim_path).unwrap();
    let mtimes: Vec<_> = first
        .extrapolated
        .iter()
        .filter(|v| v.index != 2)
        .map(|v| {
            std::fs::metadata(out.join(&v.artifacts.refined))
                .unwrap()
                .modified()
                .unwrap()
        })
        .collect();

    let second = run_alg1(&cfg, &out).unwrap().manifest;
    for v in &second.extrapolated {
        assert_eq!(v.resumed, v.index != 2, "view {}", v.index);
        assert_eq!(v.status, ViewStatus::Completed);
    }
    let after: Vec<_> = second
        .extrapolated
        .iter()
        .filter(|v| v.index != 2)
        .map(|v| {
            std::fs::metadata(out.join(&v.artifacts.refined))
                .unwrap()
                .modified()
                .unwrap()
        })
        .collect();
    assert_eq!(mtimes, after);
    assert_eq!(std::fs::read(&victim_path).unwrap(), original);
}

/// Answers generator POSTs by echoing the coarse view, failing request number `fail_at`.
fn flaky_generator_server(fail_at: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    let seen = Arc::new(AtomicUsize::new(0));
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut boundary = String::new();
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                let l = line.trim_end().to_string();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if let Some(b) = l.split("boundary=").nth(1) {
                    boundary = b.trim().to_string();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let n = seen.fetch_add(1, Ordering::SeqCst);
            let (status, payload) = if n == fail_at {
                (500, b"generator overloaded".to_vec())
            } else {
                (200, coarse_part(&body, &boundary))
            };
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                payload.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&payload);
        }
    });
    url
}

fn coarse_part(body: &[u8], boundary: &str) -> Vec<u8> {
    let text_start = body
        .windows(b"name=\"coarse\"".len())
        .position(|w| w == b"name=\"coarse\"")
        .unwrap();
    let data = text_start
        + body[text_start..]
            .windows(4)
            .position(|w| w == b"\r\n\r\n")
            .unwrap()
        + 4;
    let end_marker = format!("\r\n--{boundary}").into_bytes();
    let end = data
        + body[data..]
            .windows(end_marker.len())
            .position(|w| w == end_marker.as_slice())
            .unwrap();
    body[data..end].to_vec()
}

#[test]
fn one_failed_view_gives_a_partial_run() {
    let (tmp, mut cfg) = fixture();
    cfg.generator.kind = "http".into();
    cfg.generator.url = Some(flaky_generator_server(1));
    cfg.generator.timeout_secs = 30;
    let outcome = run_alg1(&cfg, &tmp.path().join("run")).unwrap();
    assert_eq!(outcome.exit_code(), EXIT_PARTIAL);
    let m = &outcome.manifest;
    assert_eq!(m.failed_views(), 1);
    let failed = m
        .extrapolated
        .iter()
        .find(|v| v.status == ViewStatus::Failed)
        .unwrap();
    assert!(failed
        .error
        .as_deref()
        .unwrap()
        .contains("generator overloaded"));
    assert!(!m.h_order.contains(&format!("refined:{}", failed.index)));
    assert_eq!(m.h_order.len(), 2 + 5);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gsrefine"))
}

#[test]
fn cli_run_then_split_stages() {
    let (tmp, _) = fixture();
    let cfg_path = tmp.path().join("fixture/config.toml");
    let out = tmp.path().join("cli");
    let status = bin()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "run",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_OK));
    let full = manifest_without_stamps(&out);

    let split = tmp.path().join("split");
    let s = bin()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--out-dir",
            split.to_str().unwrap(),
            "refine",
        ])
        .status()
        .unwrap();
    assert_eq!(s.code(), Some(EXIT_OK));
    assert!(!split.join("scene_leveled.ply").exists());
    let s = bin()
        .args(["--out-dir", split.to_str().unwrap(), "level-up"])
        .status()
        .unwrap();
    assert_eq!(s.code(), Some(EXIT_OK));
    assert_eq!(
        std::fs::read(out.join("scene_leveled.ply")).unwrap(),
        std::fs::read(split.join("scene_leveled.ply")).unwrap()
    );
    assert_eq!(full["h_order"], manifest_without_stamps(&split)["h_order"]);
}

#[test]
fn cli_reports_a_dead_reconstructor_as_backend_fatal() {
    let (tmp, mut cfg) = fixture();
    cfg.reconstructor.kind = "http".into();
    // nothing listens on the discard port
    cfg.reconstructor.url = Some("http://127.0.0.1:9/".into());
    cfg.reconstructor.timeout_secs = 5;
    let path = tmp.path().join("dead.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let out = bin()
        .args([
            "--config",
            path.to_str().unwrap(),
            "--out-dir",
            tmp.path().join("o").to_str().unwrap(),
            "run",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_BACKEND));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reconstruction failed"));
}

#[test]
fn cli_rejects_a_missing_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--out-dir", tmp.path().to_str().unwrap(), "run"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
