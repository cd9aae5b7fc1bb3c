//! Fixtures shared by the benchmarks.

use flam_core::synthdata::{generate, split, SplitFractions};
use flam_core::{AttributeSchema, GenConfig};

pub use flam_core::synthdata::Split;

/// Default-config split; 2500 train, 500 query and about 2000 gallery rows.
pub fn default_split(seed: u64) -> Split {
    let data = generate(&GenConfig::default(), &AttributeSchema::default(), seed).expect("default config");
    split(&data, SplitFractions::default(), seed).expect("default split")
}
