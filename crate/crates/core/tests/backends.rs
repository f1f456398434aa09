use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use gsrefine::error::Error;
use gsrefine::mask::BinaryMask;
use gsrefine::pipeline::{
    dedup_views, onion_peel_fill, read_generator_request, serve_pending_reconstructions,
    serve_pending_requests, BackendConfig, DirGenerator, DirReconstructor, Generator,
    GeneratorRequest, HttpGenerator, HttpReconstructor, PollSettings, ReconView, Reconstructor,
    StubGenerator, StubReconstructor, GENERATOR_URL_ENV, STUB_FILL, STUB_OPACITY,
};
use gsrefine::scene::{
    write_scene_ply, CameraPose, DepthMap, GaussianPrimitive, GaussianScene, TokenGrid, ViewImage,
};

fn fast_poll() -> PollSettings {
    PollSettings {
        timeout: Duration::from_secs(20),
        interval: Duration::from_millis(5),
    }
}

fn gradient(w: usize, h: usize) -> ViewImage {
    ViewImage::from_fn(w, h, |x, y| {
        [x as f32 / w as f32, y as f32 / h as f32, 0.25]
    })
    .quantized()
}

fn request(id: &str, mask: BinaryMask) -> GeneratorRequest {
    let (w, h) = mask.dims();
    GeneratorRequest {
        request_id: id.into(),
        coarse: gradient(w, h),
        mask,
        reference: ViewImage::new(w, h, [0.2, 0.4, 0.6]),
        tokens: TokenGrid::zeros(1, 1, 8),
        pose: CameraPose::looking_down_z(w, h, 30.0),
        seed: 7,
    }
}

fn recon_view(label: &str, offset: f32) -> ReconView {
    let pose = CameraPose::looking_down_z(16, 12, 20.0);
    ReconView {
        label: label.into(),
        image: ViewImage::from_fn(16, 12, |x, _| [offset, x as f32 / 16.0, 0.5]).quantized(),
        depth: Some(DepthMap::from_values(16, 12, vec![2.0; 16 * 12]).unwrap()),
        pose,
    }
}

/// Serves requests under `root` in the background until the returned flag is set.
fn spawn_dir_server(
    root: &Path,
    serve: impl Fn(&Path) -> usize + Send + 'static,
) -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let root = root.to_path_buf();
    std::thread::spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            serve(&root);
            std::thread::sleep(Duration::from_millis(2));
        }
    });
    stop
}

/// One multipart part: field name and raw bytes.
type Part = (String, Vec<u8>);

fn split_multipart(body: &[u8], boundary: &str) -> Vec<Part> {
    let delim = format!("--{boundary}").into_bytes();
    let mut starts = Vec::new();
    let mut i = 0;
    while i + delim.len() <= body.len() {
        if body[i..i + delim.len()] == delim[..] {
            starts.push(i);
            i += delim.len();
        } else {
            i += 1;
        }
    }
    let mut parts = Vec::new();
    for w in starts.windows(2) {
        let chunk = &body[w[0] + delim.len() + 2..w[1] - 2];
        let split = chunk.windows(4).position(|s| s == b"\r\n\r\n").unwrap();
        let head = String::from_utf8_lossy(&chunk[..split]).to_string();
        let name = head
            .split("name=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap()
            .to_string();
        parts.push((name, chunk[split + 4..].to_vec()));
    }
    parts
}

/// Minimal HTTP/1.1 server answering `count` POSTs with `respond(parts)`.
fn spawn_http_server(
    count: usize,
    respond: impl Fn(Vec<Part>) -> (u16, Vec<u8>) + Send + 'static,
) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming().take(count) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut len, mut boundary) = (0usize, String::new());
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("content-type:") {
                    boundary = l.split("boundary=").nth(1).unwrap_or("").trim().to_string();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let (status, payload) = respond(split_multipart(&body, &boundary));
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                payload.len()
            );
            stream.write_all(head.as_bytes()).unwrap();
            stream.write_all(&payload).unwrap();
        }
    });
    url
}

fn part<'a>(parts: &'a [Part], name: &str) -> &'a [u8] {
    &parts
        .iter()
        .find(|(n, _)| n == name)
        .unwrap_or_else(|| panic!("missing part {name}"))
        .1
}

#[test]
fn stub_generator_fills_only_masked_pixels() {
    let full = StubGenerator
        .generate(&request("a", BinaryMask::filled(12, 10, true)))
        .unwrap();
    assert!(full.pixels().iter().all(|p| *p == STUB_FILL));
    let req = request("b", BinaryMask::filled(12, 10, false));
    assert_eq!(StubGenerator.generate(&req).unwrap(), req.coarse);
    let half = request("c", BinaryMask::from_fn(12, 10, |x, _| x >= 6));
    let out = StubGenerator.generate(&half).unwrap();
    for y in 0..10 {
        for x in 0..6 {
            assert_eq!(out.get(x, y), half.coarse.get(x, y));
        }
        // the first peeled column averages its known neighbours
        let known: Vec<[f32; 3]> = [y.wrapping_sub(1), y, y + 1]
            .iter()
            .filter(|&&j| j < 10)
            .map(|&j| half.coarse.get(5, j))
            .collect();
        let mean = (0..3)
            .map(|c| known.iter().map(|p| p[c]).sum::<f32>() / known.len() as f32)
            .collect::<Vec<_>>();
        for (c, m) in mean.iter().enumerate() {
            assert!((out.get(6, y)[c] - m).abs() < 1e-6);
        }
    }
    let mut bad = request("d", BinaryMask::filled(12, 10, true));
    bad.mask = BinaryMask::filled(11, 10, true);
    assert!(StubGenerator.generate(&bad).is_err());
}

#[test]
fn onion_peel_reports_when_nothing_is_known() {
    let mut v = vec![0.0f32; 6];
    let mut known = vec![false; 6];
    assert!(!onion_peel_fill(&mut v, &mut known, 3, 2, 1));
    let mut v = vec![4.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut known = vec![true, false, false, false, false, false];
    assert!(onion_peel_fill(&mut v, &mut known, 3, 2, 1));
    assert!(known.iter().all(|k| *k));
    assert!(v.iter().all(|x| *x == 4.0));
}

#[test]
fn stub_reconstructor_back_projects_sampled_pixels() {
    let v = recon_view("input:0", 0.1);
    let scene = StubReconstructor { stride: 4 }
        .reconstruct(std::slice::from_ref(&v))
        .unwrap();
    assert_eq!(scene.len(), 4 * 3);
    let g = &scene.primitives[0];
    let want = v.pose.unproject(2.0, 2.0, 2.0);
    assert!((g.center - want).norm() < 1e-9);
    assert!((g.scale.x - 4.0 * 0.7 * 2.0 / 20.0).abs() < 1e-12);
    assert_eq!(g.opacity, STUB_OPACITY);
    let no_depth = ReconView {
        depth: None,
        ..v.clone()
    };
    assert!(StubReconstructor::default()
        .reconstruct(&[no_depth])
        .unwrap()
        .is_empty());
}

#[test]
fn dedup_drops_repeats_and_keeps_order() {
    let (a, b) = (recon_view("a", 0.1), recon_view("b", 0.7));
    let mut a2 = a.clone();
    a2.label = "a again".into();
    let kept = dedup_views(&[a.clone(), b.clone(), a2, b.clone()]);
    let labels: Vec<_> = kept.iter().map(|v| v.label.as_str()).collect();
    assert_eq!(labels, ["a", "b"]);
}

#[test]
fn directory_generator_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let stop = spawn_dir_server(root.path(), |r| {
        serve_pending_requests(r, &StubGenerator).unwrap()
    });
    let gen = DirGenerator {
        root: root.path().to_path_buf(),
        poll: fast_poll(),
    };
    let req = request(
        "0123456789abcdef",
        BinaryMask::from_fn(20, 16, |x, y| x > 12 && y > 4),
    );
    let got = gen.generate(&req).unwrap();
    stop.store(true, Ordering::SeqCst);
    assert_eq!(got, StubGenerator.generate(&req).unwrap().quantized());
    let dir = root.path().join("0123456789abcdef");
    assert!(dir.join("done").exists());
    let back = read_generator_request(&dir).unwrap();
    assert_eq!(
        (back.seed, back.mask, back.coarse),
        (7, req.mask, req.coarse)
    );
}

#[test]
fn directory_generator_surfaces_server_errors() {
    struct Failing;
    impl Generator for Failing {
        fn generate(&self, _: &GeneratorRequest) -> gsrefine::error::Result<ViewImage> {
            Err(Error::Backend("model crashed".into()))
        }
    }
    let root = tempfile::tempdir().unwrap();
    let stop = spawn_dir_server(root.path(), |r| {
        serve_pending_requests(r, &Failing).unwrap()
    });
    let gen = DirGenerator {
        root: root.path().to_path_buf(),
        poll: fast_poll(),
    };
    let err = gen
        .generate(&request("e", BinaryMask::filled(8, 8, true)))
        .unwrap_err();
    stop.store(true, Ordering::SeqCst);
    assert!(matches!(err, Error::Backend(_)));
    assert!(err.to_string().contains("model crashed"), "{err}");
}

#[test]
fn directory_generator_times_out() {
    let root = tempfile::tempdir().unwrap();
    let gen = DirGenerator {
        root: root.path().to_path_buf(),
        poll: PollSettings {
            timeout: Duration::from_millis(30),
            interval: Duration::from_millis(5),
        },
    };
    let err = gen
        .generate(&request("t", BinaryMask::filled(8, 8, true)))
        .unwrap_err();
    assert!(matches!(err, Error::Backend(_)));
}

#[test]
fn directory_reconstructor_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let stop = spawn_dir_server(root.path(), |r| {
        serve_pending_reconstructions(r, &StubReconstructor::default()).unwrap()
    });
    let views = [recon_view("input:0", 0.1), recon_view("refined:0", 0.6)];
    let recon = DirReconstructor {
        root: root.path().to_path_buf(),
        poll: fast_poll(),
    };
    let scene = recon.reconstruct(&views).unwrap();
    stop.store(true, Ordering::SeqCst);
    let direct = StubReconstructor::default().reconstruct(&views).unwrap();
    assert_eq!(scene.len(), direct.len());
    for (a, b) in scene.primitives.iter().zip(&direct.primitives) {
        assert!((a.center - b.center).norm() < 1e-5);
        assert!((a.opacity - b.opacity).abs() < 1e-5);
        assert!((0..3).all(|c| (a.color[c] - b.color[c]).abs() < 1e-5));
    }
}

#[test]
fn http_generator_posts_every_part() {
    let req = request(
        "feedfacecafebeef",
        BinaryMask::from_fn(14, 10, |x, _| x < 3),
    );
    let expected_coarse = req.coarse.encode_png().unwrap();
    let url = spawn_http_server(1, move |parts| {
        let names: Vec<&str> = parts.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["request", "coarse", "mask", "reference", "tokens"]);
        assert_eq!(part(&parts, "coarse"), expected_coarse.as_slice());
        let meta: serde_json::Value = serde_json::from_slice(part(&parts, "request")).unwrap();
        assert_eq!(meta["request_id"], "feedfacecafebeef");
        let mask = BinaryMask::decode_png(part(&parts, "mask")).unwrap();
        let mut out = ViewImage::decode_png(part(&parts, "coarse")).unwrap();
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(x, y) {
                    out.set(x, y, [1.0, 0.0, 0.0]);
                }
            }
        }
        (200, out.encode_png().unwrap())
    });
    let gen = HttpGenerator {
        url,
        timeout: Duration::from_secs(20),
    };
    let out = gen.generate(&req).unwrap();
    assert_eq!(out.get(0, 0), [1.0, 0.0, 0.0]);
    assert_eq!(out.get(5, 5), req.coarse.get(5, 5));
}

#[test]
fn http_errors_are_backend_errors() {
    let url = spawn_http_server(2, |_| (500, b"out of memory".to_vec()));
    let gen = HttpGenerator {
        url: url.clone(),
        timeout: Duration::from_secs(20),
    };
    let err = gen
        .generate(&request("x", BinaryMask::filled(8, 8, true)))
        .unwrap_err();
    assert!(
        matches!(err, Error::Backend(ref m) if m.contains("out of memory")),
        "{err}"
    );
    // wrong-size answer
    let small = spawn_http_server(1, |_| {
        (200, ViewImage::new(4, 4, [0.0; 3]).encode_png().unwrap())
    });
    let gen = HttpGenerator {
        url: small,
        timeout: Duration::from_secs(20),
    };
    assert!(matches!(
        gen.generate(&request("y", BinaryMask::filled(8, 8, true))),
        Err(Error::Backend(_))
    ));
    let recon = HttpReconstructor {
        url,
        timeout: Duration::from_secs(20),
    };
    assert!(matches!(
        recon.reconstruct(&[recon_view("a", 0.2)]),
        Err(Error::Backend(_))
    ));
}

#[test]
fn http_reconstructor_reads_the_returned_scene() {
    let url = spawn_http_server(1, |parts| {
        let names: Vec<&str> = parts.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "view000_image",
                "view000_camera",
                "view000_depth",
                "view001_image",
                "view001_camera",
                "request"
            ]
        );
        let scene = GaussianScene::new(
            "remote",
            vec![GaussianPrimitive::isotropic(
                [0.0, 0.0, 2.0],
                0.1,
                0.5,
                [0.2, 0.3, 0.4],
            )],
        );
        let mut body = Vec::new();
        write_scene_ply(&mut body, &scene).unwrap();
        (200, body)
    });
    let recon = HttpReconstructor {
        url,
        timeout: Duration::from_secs(20),
    };
    let no_depth = ReconView {
        depth: None,
        ..recon_view("refined:0", 0.9)
    };
    let scene = recon
        .reconstruct(&[recon_view("input:0", 0.1), no_depth])
        .unwrap();
    assert_eq!(scene.len(), 1);
    assert!((scene.primitives[0].opacity - 0.5).abs() < 1e-6);
}

#[test]
fn environment_url_overrides_the_config() {
    let url = spawn_http_server(1, |parts| (200, part(&parts, "coarse").to_vec()));
    let cfg = BackendConfig {
        kind: "http".into(),
        url: Some("http://127.0.0.1:9/unreachable".into()),
        timeout_secs: 20,
        ..Default::default()
    };
    // only this test touches the variable
    std::env::set_var(GENERATOR_URL_ENV, &url);
    let gen = cfg.generator(Path::new("."));
    std::env::remove_var(GENERATOR_URL_ENV);
    let req = request("env", BinaryMask::filled(8, 8, true));
    assert_eq!(gen.unwrap().generate(&req).unwrap(), req.coarse);
    let no_url = BackendConfig {
        kind: "http".into(),
        ..Default::default()
    };
    assert!(no_url.generator(Path::new(".")).is_err());
    let unknown = BackendConfig {
        kind: "carrier-pigeon".into(),
        ..Default::default()
    };
    assert!(unknown.reconstructor(Path::new(".")).is_err());
}
