//! CIDEr-D and BLEU against values computed independently by hand-written
//! reference arithmetic and frozen here.

mod common;

use capdiff::metrics::{bleu, CiderVariant};
use common::metrics::*;

#[test]
fn cider_d_on_hand_corpus() {
    let s = hand_corpus().cider_d(&toks(HAND_CANDIDATES[0]), 0).unwrap();
    assert!((s - HAND_CIDER_D).abs() < 1e-6, "{s}");
}

#[test]
fn plain_cider_on_hand_corpus() {
    let s = hand_corpus()
        .cider(&toks(HAND_CANDIDATES[0]), 0, CiderVariant::Plain)
        .unwrap();
    assert!((s - HAND_CIDER).abs() < 1e-6, "{s}");
}

#[test]
fn bleu_on_hand_corpus() {
    let got = hand_bleu();
    for (g, w) in got.iter().zip(HAND_BLEU) {
        assert!((g - w).abs() < 1e-6, "{got:?}");
    }
}

const PAPINENI_REFS: [&str; 3] = [
    "It is a guide to action that ensures that the military will forever heed Party commands",
    "It is the guiding principle which guarantees the military forces always being under the command of the Party",
    "It is the practical guide for the army always to heed the directions of the party",
];
const PAPINENI_C1: &str =
    "It is a guide to action which ensures that the military always obeys the commands of the party";
const PAPINENI_C2: &str =
    "It is to insure the troops forever hearing the activity guidebook that party direction";

#[test]
fn classic_two_candidate_example() {
    let refs: Vec<Vec<String>> = PAPINENI_REFS.iter().map(|s| toks(s)).collect();
    let one = bleu(&[toks(PAPINENI_C1)], &[refs.clone()], 4).unwrap();
    let want1 = [
        0.944_444_444_444_444_4,
        0.745_355_992_499_929_9,
        0.624_072_698_934_875_6,
        0.504_566_684_005_848_5,
    ];
    let two = bleu(&[toks(PAPINENI_C2)], &[refs.clone()], 4).unwrap();
    let want2 = [0.495_358_799_857_246_7, 0.181_746_991_519_491_72, 0.0, 0.0];
    let both = bleu(
        &[toks(PAPINENI_C1), toks(PAPINENI_C2)],
        &[refs.clone(), refs],
        4,
    )
    .unwrap();
    let want_both = [
        0.733_916_455_323_028,
        0.502_790_803_303_135_4,
        0.390_112_995_681_918,
        0.304_353_726_130_556_1,
    ];
    for (got, want) in [(one, want1), (two, want2), (both, want_both)] {
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{got:?} vs {want:?}");
        }
    }
}
