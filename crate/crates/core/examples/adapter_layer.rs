//! One dual-path adapted layer: domain-agnostic and prompt-conditioned paths,
//! similarity routing, adaptive fusion, and folding into a dense weight plus bias.

use hicolora::adapter::{
    assign_layer_modes, layer_forward, merge_for_inference, route, HiCoLayerParams, LayerMode, RoutePhase,
};
use hicolora::numkit::normalize;
use hicolora::{Matrix, RngStream};

fn main() -> hicolora::Result<()> {
    let mut rng = RngStream::new(5);
    println!("layer modes for 6 layers, alpha 0.5: {:?}", assign_layer_modes(6, 0.5, false)?);

    let (d, r, m, n) = (12, 3, 2, 3);
    let mut layer = HiCoLayerParams::random(d, d, r, m, n, LayerMode::HeuristicGrouping, &mut rng);
    layer.beta_logit = 0.4;
    let unit = |rng: &mut RngStream, k: usize| -> hicolora::Result<Matrix> {
        let raw = Matrix::random_normal(k, d, 1.0, rng);
        let rows = (0..k).map(|i| normalize(raw.row(i))).collect::<hicolora::Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    };
    let domain_centroids = unit(&mut rng, m)?;
    let slot_centroids = unit(&mut rng, n)?;

    let x = Matrix::random_normal(5, d, 1.0, &mut rng);
    let x_sa = Matrix::random_normal(1, d, 1.0, &mut rng);
    let summary = normalize(x_sa.row(0))?;

    let infer = route(&summary, &domain_centroids, &slot_centroids, RoutePhase::Infer, 1.0, false, &mut rng)?;
    println!("infer routing: domain {:?} slot {:?}", infer.domain_weights, infer.slot_weights);
    let train = route(&summary, &domain_centroids, &slot_centroids, RoutePhase::Train, 1.0, false, &mut rng)?;
    println!("train routing (hard Gumbel): domain {:?} slot {:?}", train.domain_weights, train.slot_weights);

    let h = layer_forward(&layer, &x, &x_sa, &infer)?;
    let merged = merge_for_inference(&layer, &x_sa, &infer)?;
    let gap = merged.forward(&x)?.max_abs_diff(&h)?;
    println!("beta = {:.4}; merged vs two-path max difference {gap:.2e}", layer.beta());
    match merge_for_inference(&layer, &x_sa, &train) {
        Err(e) => println!("merging stochastic routing is refused: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
