//! A two-layer network learns XOR with the tape, the parameter store and
//! Adam.

use capdiff_autodiff::{
    adam_step, AdamConfig, AdamState, GradBuffer, Graph, ParamStore, Result, Tensor,
};

fn main() -> Result<()> {
    let mut params = ParamStore::<f64>::new();
    // Fixed small weights; any asymmetric start works.
    let w1 = params.add(
        "w1",
        Tensor::from_f64(&[2, 4], &[0.5, -0.4, 0.3, 0.8, -0.6, 0.7, 0.2, -0.9])?,
    )?;
    let b1 = params.add("b1", Tensor::zeros(&[4]))?;
    let w2 = params.add(
        "w2",
        Tensor::from_f64(&[4, 2], &[0.3, -0.2, -0.5, 0.4, 0.6, 0.1, -0.3, 0.7])?,
    )?;
    let b2 = params.add("b2", Tensor::zeros(&[2]))?;

    let x = Tensor::from_f64(&[4, 2], &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0])?;
    let y = [0, 1, 1, 0];
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
    );

    for step in 0..=300 {
        let mut g = Graph::new(&params, true);
        let input = g.constant(x.clone());
        let (p1, q1, p2, q2) = (g.param(w1), g.param(b1), g.param(w2), g.param(b2));
        let h = g.matmul(input, p1)?;
        let h = g.add_row(h, q1)?;
        let h = g.tanh(h);
        let logits = g.matmul(h, p2)?;
        let logits = g.add_row(logits, q2)?;
        let lp = g.log_softmax(logits);
        let picked = g.pick(lp, &y)?;
        let nll = g.mean(picked);
        let loss = g.scale(nll, -1.0);
        let value = g.value(loss).item();
        let probs = g.value(lp).map(f64::exp);

        let mut grads = GradBuffer::zeros_like(&params);
        grads.accumulate(&g.backward(loss)?);
        drop(g);
        adam_step(&mut params, &grads, &mut adam)?;

        if step % 100 == 0 {
            let p1: Vec<String> = (0..4).map(|r| format!("{:.3}", probs.get(r, 1))).collect();
            println!(
                "step {step:>3}  loss {value:.4}  p(1) = [{}]",
                p1.join(", ")
            );
        }
    }
    Ok(())
}
