//! Writes deterministic English-like text for quick training runs.
//!
//! `cargo run --release -p lavo-lm --example synth_corpus -- out.txt 1048576 7`

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "synthetic.txt".into());
    let len = args.next().map_or(1 << 20, |s| s.parse().expect("length in bytes"));
    let seed = args.next().map_or(7, |s| s.parse().expect("integer seed"));
    std::fs::write(&path, lavo_lm::synthetic_text(len, seed)).expect("writable output path");
    println!("wrote {len} bytes to {path}");
}
