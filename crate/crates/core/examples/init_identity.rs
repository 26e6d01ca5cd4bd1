//! A freshly attached adapter leaves the network's output unchanged, bit for bit.

use adaptformer::experiment::desk;
use adaptformer::rng::{Rng, Stream};
use adaptformer::{AdapterConfig, Insertion, TuningMode, VitModel};

fn main() -> adaptformer::Result<()> {
    let base = VitModel::new(desk::vit(), 7)?;
    let mut rng = Rng::stream(0, Stream::Test);
    let images: Vec<Vec<f64>> = (0..16).map(|_| (0..base.config().sample_len()).map(|_| rng.uniform()).collect()).collect();
    let images: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let before = base.predict(&images)?;
    for insertion in [Insertion::Parallel, Insertion::Sequential] {
        let mode = TuningMode::AdaptFormer(AdapterConfig { insertion, ..desk::adapter() });
        let tuned = base.clone().with_tuning(mode, 7)?;
        println!("{insertion}: {} tunable, logits identical: {}", tuned.tunable_param_count(), tuned.predict(&images)?.bit_eq(&before));
    }
    Ok(())
}
