//! Experiment orchestration over a run directory.
//!
//! A run is driven by a [`RunManifest`] and advances through the stages
//! prepare, invert, train, evaluate, analyze-phi and report. Every stage
//! reads only what earlier stages wrote, skips work that already carries a
//! completion marker, and derives its randomness from the manifest seed
//! through named streams, so two serialized runs of one manifest produce
//! identical files.
//!
//! Layout under the run directory:
//!
//! ```text
//! manifest.toml
//! data/{items.toml, train/<id>/, test/<id>/, prior_pool/<id>/}
//! priors/{model/, train/<id>/, test/<id>/}
//! checkpoints/{state/, history.toml}
//! eval/{metrics.tsv, records.toml, hallucination.tsv, <id>/}
//! plots/
//! report.md
//! ```

mod controlled;
mod manifest;
mod plot;
mod stages;
pub mod toy;

pub use controlled::{fidelity_bias_experiment, FidelityBiasConfig};
pub use manifest::{
    BackendKind, DatasetKind, DatasetSpec, GeneratorSpec, PhiNetSpec, PriorSpec, RunManifest, TaskKind,
    MANIFEST_PRESETS, SCHEMA_VERSION,
};
pub use plot::scatter_svg;
pub use stages::{
    cmd_analyze_phi, cmd_evaluate, cmd_invert, cmd_prepare, cmd_report, cmd_train, load_eval_records, load_items,
    run_all, EvalRecord, ItemRecord, RunDir, Split, Stage,
};

/// Seed of the named random stream `label` under the run seed.
pub fn stream_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
