//! Fixture builders shared by the benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skrefine_core::synth::{random_config, wide_config, Preset};
use skrefine_core::toolchain::{generate, Artifacts, GenOptions};

pub fn artifacts(preset: Preset, seed: u64) -> Artifacts {
    let c = random_config(preset, &mut ChaCha8Rng::seed_from_u64(seed));
    generate(&c.policy, c.resolver, &GenOptions::default()).expect("synthetic configs generate")
}

/// One subject with `pages` data pages.
pub fn wide(pages: u64) -> Artifacts {
    let c = wide_config(1, pages, &mut ChaCha8Rng::seed_from_u64(pages));
    generate(&c.policy, c.resolver, &GenOptions::default()).expect("wide config generates")
}
