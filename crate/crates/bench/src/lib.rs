//! Seeded fixtures shared by the criterion benches.

use sepdl_core::data::synth_separable;
use sepdl_core::{DictMode, DictionaryPair, PatchSet, SparseCode, SynthSpec};

/// Synthetic separable patches with their ground-truth dictionaries and codes.
pub struct Fixture {
    pub data: PatchSet,
    pub dict: DictionaryPair,
    pub codes: Vec<SparseCode>,
}

/// `count` patches of side `m`; general mode uses twice-redundant
/// dictionaries.
pub fn fixture(mode: DictMode, count: usize, m: usize, s: usize) -> Fixture {
    let n = match mode {
        DictMode::General => 2 * m,
        DictMode::Orthonormal => m,
    };
    let spec = SynthSpec { count, m, n1: n, n2: n, s, noise_sigma: 0.01, mode };
    let (data, dict, codes) = synth_separable(17, &spec).expect("valid fixture spec");
    Fixture { data, dict, codes }
}
