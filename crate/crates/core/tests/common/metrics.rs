//! Three-sample corpus whose CIDEr-D and BLEU were computed by independent
//! reference arithmetic and frozen here.

use capdiff::metrics::{bleu, RefCorpus};

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub const HAND_REFS: [[&str; 2]; 3] = [
    [
        "a red cube left of a blue ball",
        "the red cube near a blue ball",
    ],
    ["a green cone on the red box", "a green cone above the box"],
    [
        "the blue ball under a green cone",
        "a blue ball below the cone",
    ],
];

pub const HAND_CANDIDATES: [&str; 3] = [
    "a red cube near the blue ball",
    "a green cone on a box",
    "the blue ball under the cone",
];

/// CIDEr-D of the first candidate against sample 0.
pub const HAND_CIDER_D: f64 = 3.518_400_297_099_582;
/// Undamped CIDEr of the same pair.
pub const HAND_CIDER: f64 = 3.537_355_984_911_063;
/// Corpus BLEU@1–4 of the three candidates.
pub const HAND_BLEU: [f64; 4] = [
    0.894_736_842_105_263_2,
    0.784_303_244_254_012,
    0.657_241_997_664_387_2,
    0.488_147_960_516_319_65,
];

pub fn hand_corpus() -> RefCorpus<String> {
    RefCorpus::new(
        HAND_REFS
            .iter()
            .enumerate()
            .map(|(i, r)| (i as u64, r.iter().map(|s| toks(s)).collect())),
    )
    .unwrap()
}

pub fn hand_bleu() -> Vec<f64> {
    let cands: Vec<Vec<String>> = HAND_CANDIDATES.iter().map(|s| toks(s)).collect();
    let refs: Vec<Vec<Vec<String>>> = HAND_REFS
        .iter()
        .map(|r| r.iter().map(|s| toks(s)).collect())
        .collect();
    bleu(&cands, &refs, 4).unwrap()
}
