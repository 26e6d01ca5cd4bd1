//! The synthetic source and target tasks, and their binary file format.

use adaptformer::data::{generate, Dataset, Shift, TaskSpec};

fn main() -> adaptformer::Result<()> {
    for shift in [Shift::None, Shift::HueRotation, Shift::TextureSwap, Shift::LabelRegroup] {
        let spec = TaskSpec { num_samples: 12, shift, ..Default::default() };
        let data = generate(&spec)?;
        println!("{shift:?}: {} classes, labels {:?}", spec.num_classes(), data.labels);
    }
    let path = std::env::temp_dir().join("adaptformer-example.afds");
    let data = generate(&TaskSpec { num_samples: 64, frames: 2, ..Default::default() })?;
    data.write_binary(&path)?;
    println!("round trip exact: {}", Dataset::read_binary(&path)? == data);
    Ok(())
}
