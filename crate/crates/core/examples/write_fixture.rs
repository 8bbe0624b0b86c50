//! Regenerates the bundled toy corpus under `fixtures/toy`.

use emspeech_core::fixture::{bundled_dir, generate, FixtureSpec};

fn main() -> emspeech_core::Result<()> {
    let dir = bundled_dir();
    generate(&FixtureSpec::bundled()).write(&dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}
