//! Load a TOML configuration, build the model and write it back canonically.

use noarb::config::ConfigFile;

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/cev_bubble.toml").into());
    let cfg = ConfigFile::load(path.as_ref()).expect("readable config");
    let model = cfg.to_model().expect("valid model");
    println!("horizon {} on {}", model.horizon(), model.interval());
    print!("{}", cfg.canonicalize().unwrap().to_canonical());
}
