//! Semantic SVD initialization against the PiSSA, MiLoRA and Kaiming baselines.
//!
//! Every SVD-family strategy leaves `base + B·A` equal to the original weight;
//! they differ only in which spectrum the trainable factors start from.

use hicolora::init::{kaiming_zero_init, milora_init, pissa_init, semsvd_init};
use hicolora::numkit::normalize;
use hicolora::{Matrix, RngStream};

fn main() -> hicolora::Result<()> {
    let mut rng = RngStream::new(7);
    let w0 = Matrix::random_normal(24, 16, 0.3, &mut rng);
    // Two unit "cluster centroids" in the input space.
    let raw = Matrix::random_normal(2, 16, 1.0, &mut rng);
    let centroids = Matrix::from_rows(&[normalize(raw.row(0))?, normalize(raw.row(1))?])?;
    let r = 4;

    for lambda in [0.0, 0.5, 3.0] {
        let (pair, f) = semsvd_init(&w0, r, lambda, &centroids)?;
        println!("semsvd λ={lambda:<4} residual {:.2e}", pair.residual_error(&w0)?);
        println!("  sigma_r   {:?}", rounded(&f.sigma_r));
        println!("  relevance {:?}", rounded(&f.relevance));
        println!("  s_e       {:?}", rounded(&f.s_e));
    }
    println!("pissa   residual {:.2e}", pissa_init(&w0, r)?.residual_error(&w0)?);
    println!("milora  residual {:.2e}", milora_init(&w0, r)?.residual_error(&w0)?);
    let k = kaiming_zero_init(&w0, r, &mut rng)?;
    println!("kaiming residual {:.2e} (B starts at zero: {})", k.residual_error(&w0)?, k.b.frobenius_norm() == 0.0);
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
