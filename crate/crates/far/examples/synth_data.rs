//! Writes the two-concept shapes dataset: `cargo run -p far --example synth_data -- DIR`.

use std::path::PathBuf;

use far::synth::{write_synthetic_dataset, SynthSpec};

fn main() {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("synth"));
    match write_synthetic_dataset(&dir, &SynthSpec::default()) {
        Ok(p) => println!("{}\n{}", p.train_manifest.display(), p.eval_manifest.display()),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    }
}
