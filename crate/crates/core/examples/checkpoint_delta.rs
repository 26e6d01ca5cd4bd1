//! Ship a tuned model as a small delta on top of a shared backbone file.

use adaptformer::checkpoint::{Checkpoint, Subset};
use adaptformer::experiment::{backbone_checkpoint, datasets, delta_checkpoint, desk, finetune, load_tuned, pretrain};
use adaptformer::TuningMode;

fn main() -> adaptformer::Result<()> {
    let dir = std::env::temp_dir().join("adaptformer-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| adaptformer::Error::Io { path: dir.clone(), source: e })?;

    let pre = desk::pretrain();
    let (backbone, _) = pretrain(&pre)?;
    let backbone_path = dir.join("backbone.ckpt");
    println!("backbone sha256 {}", backbone_checkpoint(&backbone, &pre).save(&backbone_path)?);

    let cfg = desk::transfer(TuningMode::AdaptFormer(desk::adapter()));
    let (tuned, _) = finetune(&backbone, &cfg)?;
    let delta_path = dir.join("delta.ckpt");
    println!("delta sha256 {}", delta_checkpoint(&tuned, &cfg, &backbone_path).save(&delta_path)?);
    let delta = Checkpoint::load(&delta_path)?;
    println!("delta holds {} scalars in {} tensors, full model {}", delta.numel(), delta.entries.len(),
        Checkpoint::from_model(&tuned, Subset::All).numel());

    let (restored, _) = load_tuned(&delta_path)?;
    let (_, eval) = datasets(&cfg)?;
    let images: Vec<&[f64]> = eval.images.iter().map(Vec::as_slice).collect();
    println!("restored logits bit-identical: {}", restored.predict(&images)?.bit_eq(&tuned.predict(&images)?));
    Ok(())
}
