//! Multi-frame inputs: the token count grows with frames and the adapter
//! recipe carries over unchanged.

use adaptformer::experiment::{desk, finetune, pretrain};
use adaptformer::TuningMode;

fn main() -> adaptformer::Result<()> {
    let (backbone, _) = pretrain(&desk::pretrain())?;
    for frames in adaptformer::data::FRAME_VARIANTS {
        let mut cfg = desk::transfer(TuningMode::AdaptFormer(desk::adapter()));
        cfg.vit.num_frames = frames;
        cfg.train.epochs = 5;
        cfg.train_samples = 256;
        let (model, report) = finetune(&backbone, &cfg)?;
        println!("{frames} frame(s): {} tokens, top-1 {:.1}%", model.config().num_tokens(), report.final_top1());
    }
    Ok(())
}
