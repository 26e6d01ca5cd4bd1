//! Pre-train a small backbone, then tune only parallel adapters and a new head
//! on the shifted task.

use adaptformer::experiment::{backbone_digest, desk, finetune_with, pretrain};
use adaptformer::TuningMode;

fn main() -> adaptformer::Result<()> {
    let (backbone, source) = pretrain(&desk::pretrain())?;
    println!("source task top-1 {:.1}%", source.final_top1());

    let cfg = desk::transfer(TuningMode::AdaptFormer(desk::adapter()));
    let (tuned, report) = finetune_with(&backbone, &cfg, |row| {
        println!("epoch {:>2}  lr {:.4}  loss {:.4}  top-1 {:.1}%", row.epoch, row.lr, row.train_loss, row.eval_top1);
    })?;
    println!("{} tunable parameters, final top-1 {:.1}%", report.tunable_params(), report.final_top1());
    println!("backbone untouched: {}", backbone_digest(&tuned) == backbone_digest(&backbone));
    Ok(())
}
