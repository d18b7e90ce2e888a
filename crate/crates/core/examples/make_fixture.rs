//! Regenerates the bundled synthetic dataset under `fixtures/synthetic`.

use crossrec::synth::{write_fixture, SynthSpec};

fn main() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic");
    let spec = SynthSpec::default();
    write_fixture(&spec, &dir).expect("fixture written");
    println!("wrote {}", dir.display());
}
