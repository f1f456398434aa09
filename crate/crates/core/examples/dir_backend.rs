//! A generator living behind the directory exchange protocol. A thread plays
//! the external service by answering pending requests with the stub.
//!
//! cargo run --example dir_backend -- [out_dir]

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use gsrefine::mask::BinaryMask;
use gsrefine::pipeline::{
    serve_pending_requests, DirGenerator, Generator, GeneratorRequest, StubGenerator,
};
use gsrefine::scene::{CameraPose, TokenGrid, ViewImage, TOKEN_DIM};

fn main() -> gsrefine::Result<()> {
    let root = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "out/dir_backend".into()),
    );
    let exchange = root.join("exchange");
    std::fs::create_dir_all(&exchange).expect("create exchange dir");

    let stop = Arc::new(AtomicBool::new(false));
    let server = {
        let (stop, exchange) = (stop.clone(), exchange.clone());
        std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                serve_pending_requests(&exchange, &StubGenerator).expect("serve requests");
                std::thread::sleep(Duration::from_millis(10));
            }
        })
    };

    let coarse = ViewImage::from_fn(48, 32, |x, y| [x as f32 / 47.0, y as f32 / 31.0, 0.3]);
    let mask = BinaryMask::from_fn(48, 32, |x, y| {
        (18..30).contains(&x) && (10..22).contains(&y)
    });
    let req = GeneratorRequest {
        request_id: "demo-request".into(),
        coarse: coarse.clone(),
        mask: mask.clone(),
        reference: coarse.clone(),
        tokens: TokenGrid::zeros(1, 1, TOKEN_DIM),
        pose: CameraPose::looking_down_z(48, 32, 40.0),
        seed: 0,
    };
    let refined = DirGenerator::new(&exchange).generate(&req)?;
    stop.store(true, Ordering::Relaxed);
    server.join().expect("server thread");

    let changed = (0..32)
        .flat_map(|y| (0..48).map(move |x| (x, y)))
        .filter(|&(x, y)| refined.get(x, y) != coarse.quantized().get(x, y))
        .count();
    println!("{changed} pixels changed, {} were masked", mask.count());
    println!(
        "request and answer kept under {}",
        exchange.join("demo-request").display()
    );
    Ok(())
}
