//! Finite-difference check of one miniature stage: visual encoder,
//! semantic Transformer, decoder, word head and bit map, under the joint
//! loss.

use capdiff::captioner::{stage_loss, Conditioning, Stage, StageConfig};
use capdiff::diffusion::gaussian;
use capdiff::nn::no_dropout;
use capdiff_autodiff::gradcheck::check_params;
use capdiff_autodiff::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mini() -> StageConfig {
    StageConfig {
        encoder_blocks: 1,
        decoder_blocks: 1,
        semantic_blocks: 1,
        d_model: 16,
        heads: 2,
        feature_dim: 5,
        vocab_size: 9,
        max_len: 4,
        retrieval_len: 3,
        bit_scale: 1.0,
        dropout: 0.0,
    }
}

fn invalid(e: capdiff::Error) -> capdiff_autodiff::Error {
    capdiff_autodiff::Error::Invalid(e.to_string())
}

/// Relative error of every probed parameter of a miniature stage 1 and
/// stage 2 under the joint loss.
pub fn stage_gradient_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for index in [1, 2] {
        let mut store = ParamStore::<f64>::new();
        let stage = Stage::new(&mut store, index, mini(), &mut rng).unwrap();
        // Move norms and biases off their initial values so every path is
        // exercised with generic numbers.
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            let noise = gaussian::<f64>(&mut rng, &shape).map(|v| 0.1 * v);
            let p = store.get_mut(id);
            *p = p.zip_map(&noise, |a, b| a + b).unwrap();
        }
        let feats = gaussian::<f64>(&mut rng, &[3, 5]);
        let codec = stage.codec().clone();
        let targets = [3, 8, 1, 0];
        let x0: Tensor<f64> = codec.encode(&targets).unwrap();
        let x_t = gaussian::<f64>(&mut rng, &[4, 4]);
        let self_cond = gaussian::<f64>(&mut rng, &[4, 4]).map(|v| v.tanh());
        let prev = gaussian::<f64>(&mut rng, &[4, 4]).map(|v| v.tanh());
        let retrieved = [2, 5, 7];

        let probe = [
            "feat.w",
            "enc0.attn.q.w",
            "enc0.attn.v.b",
            "enc0.norm.gain",
            "enc0.ffn.fc1.w",
            "enc0.ffn.norm.bias",
            "time1.w",
            "time2.b",
            "bits.w",
            "word_emb",
            "pos_text",
            "pos_ret",
            "sem0.attn.v.w",
            "sem0.ffn.fc2.w",
            "dec0.self.o.w",
            "dec0.self_norm.gain",
            "dec0.cross.k.w",
            "dec0.cross_norm.bias",
            "dec0.ffn.fc1.b",
            "head.b",
        ];
        let ids: Vec<_> = probe
            .iter()
            .map(|n| store.id(&format!("stage{index}.{n}")).expect(n))
            .collect();

        let errs = check_params(&store, &ids, 1e-5, |g| {
            let mut d = no_dropout();
            let v = stage.encode_visual(g, &feats, &mut d).map_err(invalid)?;
            let cond = Conditioning {
                self_cond: &self_cond,
                prev_stage: (index > 1).then_some(&prev),
                retrieved: &retrieved,
            };
            let out = stage
                .forward(g, &x_t, -2.5, v, &cond, &mut d)
                .map_err(invalid)?;
            let l = stage_loss(g, &out, &x0, &targets, 0.1).map_err(invalid)?;
            Ok(l.total)
        })
        .unwrap();
        for (name, e) in probe.iter().zip(errs) {
            out.push((format!("stage{index}.{name}"), e));
        }
    }
    out
}
