//! End to end at small scale: generate scenes, train one stage with the
//! retrieved sentence, score the test split and show the reverse chain of
//! one caption.

use capdiff::cascade::cascade_sample;
use capdiff::harness::checkpoint;
use capdiff::harness::config::RunConfig;
use capdiff::harness::data::{generate_dataset, Split};
use capdiff::harness::eval::stream_rng;
use capdiff::harness::{evaluate, train_stage1};

fn main() -> capdiff::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let run = RunConfig {
        seed: Some(1),
        scenes: 600,
        classes: 10,
        attributes: 4,
        relations: 4,
        stages: 1,
        d_model: 32,
        lr: 3e-3,
        warmup: 200,
        stage1_steps: 800,
        eval_every: 200,
        eval_samples: 40,
        steps: 20,
        ..RunConfig::default()
    };
    let (data, _) = generate_dataset(&run)?;
    let out = std::env::temp_dir().join("capdiff-train-and-sample");
    let summary = train_stage1(&run, &data, &out, false)?;
    println!(
        "best validation CIDEr-D {:.3} at step {}",
        summary.best_cider, summary.best_step
    );

    let report = evaluate(&summary.best_path, &data, Split::Test, &run, 1)?;
    print!("{}", report.render(&data.vocab));

    let loaded = checkpoint::load(&summary.best_path)?;
    let model = loaded.model.cascade()?;
    let sample = &data.split(Split::Test)[0];
    let feats = sample.feature_tensor::<f32>();
    let retrieved = data.pool()?.retrieve(&feats, None)?.to_vec();
    let mut rng = stream_rng(1, sample.id);
    let chain = cascade_sample(
        model,
        &loaded.params,
        &feats,
        &retrieved,
        &run.sampler(),
        &run.schedule(),
        &mut rng,
    )?;
    println!("retrieved: {}", data.vocab.decode(&retrieved));
    for (k, words) in chain.path.iter().enumerate().step_by(4) {
        println!("step {:>2}: {}", k + 1, data.vocab.decode(words));
    }
    println!("caption: {}", data.vocab.decode(&chain.words));
    println!("reference: {}", data.vocab.decode(&sample.captions[0]));
    Ok(())
}
