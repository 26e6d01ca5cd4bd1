//! Finite-difference check of the adapter gradients on a tiny model.

use adaptformer::gradcheck::check_params;
use adaptformer::rng::{Rng, Stream};
use adaptformer::{AdapterConfig, TuningMode, VitConfig, VitModel};

fn main() -> adaptformer::Result<()> {
    let vit = VitConfig { image_size: 8, patch_size: 4, embed_dim: 8, depth: 2, num_heads: 2, mlp_ratio: 2, num_classes: 3, ..VitConfig::default() };
    let mode = TuningMode::AdaptFormer(AdapterConfig { mid_dim: 2, ..Default::default() });
    let mut model = VitModel::new(vit, 1)?.with_tuning(mode, 1)?;
    let mut rng = Rng::stream(1, Stream::Test);
    // zero-initialised up projections would hide the down-projection gradients
    for p in model.params_mut().iter_mut().filter(|p| p.name.contains("adapter.up")) {
        p.tensor.data_mut().iter_mut().for_each(|x| *x = 0.5 * rng.normal());
    }
    let images: Vec<Vec<f64>> = (0..4).map(|_| (0..model.config().sample_len()).map(|_| rng.uniform()).collect()).collect();
    let images: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let report = check_params(&model, &images, &[0, 1, 2, 0], |n| n.contains("adapter"), 1e-5)?;
    println!("{} scalars checked, max relative error {:.2e}", report.entries.len(), report.max_rel_err());
    if let Some(w) = report.worst() {
        println!("worst: {}[{}] analytic {:.6e} numeric {:.6e}", w.name, w.index, w.analytic, w.numeric);
    }
    Ok(())
}
