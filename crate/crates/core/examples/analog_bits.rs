//! Words as analog bits: encode a caption, corrupt the bits with noise and
//! read it back by thresholding.

use capdiff::bitcodec::{bits_per_word, BitCodec, Vocabulary};
use capdiff::diffusion::gaussian;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> capdiff::Result<()> {
    let vocab = Vocabulary::new(
        [
            "a", "the", "red", "blue", "small", "cube", "ball", "cone", "left", "of", "on",
        ],
        8,
    )?;
    let codec = BitCodec::new(vocab.len(), 1.0)?;
    println!("{} words -> {} bits per word", vocab.len(), codec.bits());
    println!(
        "a 10199-word vocabulary needs {} bits",
        bits_per_word(10199)?
    );

    let words = vocab.pad(&vocab.encode("a red cube left of the blue ball"));
    let x = codec.encode::<f64>(&words)?;
    for (w, row) in words.iter().zip(x.data().chunks(codec.bits())) {
        let bits: String = row
            .iter()
            .map(|&b| if b > 0.0 { '+' } else { '-' })
            .collect();
        println!("{:>8} {bits}", vocab.word(*w).unwrap_or("?"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for std in [0.3, 0.8, 1.5] {
        let noise = gaussian::<f64>(&mut rng, x.shape());
        let noisy = x.zip_map(&noise, |a, e| a + std * e)?;
        let back = codec.quantize_decode(&noisy)?;
        let wrong = back.iter().zip(&words).filter(|(a, b)| a != b).count();
        println!(
            "noise {std:.1}: \"{}\" ({wrong} words wrong)",
            vocab.decode(&back)
        );
    }
    Ok(())
}
