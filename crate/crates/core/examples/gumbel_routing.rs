//! Hard Gumbel-Softmax draws reproduce the softmax distribution; a tiny
//! temperature with zero noise is the argmax.

use hicolora::numkit::{argmax, gumbel_softmax, gumbel_softmax_with_noise, softmax};
use hicolora::RngStream;

fn main() -> hicolora::Result<()> {
    let logits = [1.2, 0.3, -0.5, 0.0];
    let p = softmax(&logits, 1.0)?;
    let mut counts = [0usize; 4];
    let mut rng = RngStream::new(99);
    let draws = 10_000;
    for _ in 0..draws {
        let y = gumbel_softmax(&logits, 1.0, &mut rng, true)?;
        counts[argmax(&y)] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        println!("category {i}: softmax {:.4}  empirical {:.4}", p[i], *c as f64 / draws as f64);
    }
    let cold = gumbel_softmax_with_noise(&logits, 1e-3, &[0.0; 4], false)?;
    println!("temperature 1e-3, zero noise: {cold:?}");
    Ok(())
}
