//! CIDEr-D and BLEU for a few candidate captions against two references
//! each.

use capdiff::metrics::{bleu, CiderVariant, RefCorpus};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn main() -> capdiff::Result<()> {
    let refs = [
        [
            "a red cube left of a blue ball",
            "the red cube beside a blue ball",
        ],
        ["a green cone on the small box", "a green cone above a box"],
        [
            "two yellow balls near a cube",
            "a pair of yellow balls by the cube",
        ],
    ];
    let candidates = [
        "a red cube left of a blue ball",
        "a green cone on a box",
        "a cube",
    ];
    let corpus = RefCorpus::new(
        refs.iter()
            .enumerate()
            .map(|(i, r)| (i as u64, r.iter().map(|s| toks(s)).collect())),
    )?;
    for (i, c) in candidates.iter().enumerate() {
        let c = toks(c);
        println!(
            "{:<34} CIDEr-D {:.3}  CIDEr {:.3}",
            c.join(" "),
            corpus.cider_d(&c, i as u64)?,
            corpus.cider(&c, i as u64, CiderVariant::Plain)?
        );
    }
    let cands: Vec<_> = candidates.iter().map(|c| toks(c)).collect();
    let all: Vec<Vec<_>> = refs
        .iter()
        .map(|r| r.iter().map(|s| toks(s)).collect())
        .collect();
    let b = bleu(&cands, &all, 4)?;
    println!(
        "corpus BLEU@1-4: {:.3} {:.3} {:.3} {:.3}",
        b[0], b[1], b[2], b[3]
    );
    Ok(())
}
