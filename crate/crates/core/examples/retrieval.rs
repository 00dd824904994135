//! Nearest-neighbour sentence retrieval on the synthetic scenes, scored as
//! if the retrieved sentence were the caption.

use capdiff::harness::config::RunConfig;
use capdiff::harness::data::{generate_dataset, Split};
use capdiff::harness::eval::Report;

fn main() -> capdiff::Result<()> {
    let run = RunConfig {
        scenes: 600,
        ..RunConfig::default()
    };
    let (data, _) = generate_dataset(&run)?;
    let pool = data.pool()?;
    println!("pool of {} training sentences", pool.len());
    for s in data.split(Split::Test).iter().take(4) {
        let got = pool.retrieve(&s.feature_tensor::<f32>(), None)?;
        println!("scene {:>4}", s.id);
        println!("  reference: {}", data.vocab.decode(&s.captions[0]));
        println!("  retrieved: {}", data.vocab.decode(got));
    }
    for split in [Split::Val, Split::Test] {
        let retrieved = data.retrieved(&pool, split)?;
        let caps = data
            .split(split)
            .iter()
            .zip(retrieved)
            .map(|(s, c)| (s.id, c))
            .collect();
        let report = Report::score(split, caps, &data.references(split)?)?;
        println!(
            "{} CIDEr-D of retrieved sentences: {:.3}",
            split.name(),
            report.cider
        );
    }
    Ok(())
}
