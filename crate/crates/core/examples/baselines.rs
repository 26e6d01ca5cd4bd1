//! Linear probing, visual prompt tuning and full fine-tuning next to the adapter.

use adaptformer::experiment::{desk, finetune, pretrain};
use adaptformer::{PromptConfig, TuningMode};

fn main() -> adaptformer::Result<()> {
    let (backbone, _) = pretrain(&desk::pretrain())?;
    let modes = [
        TuningMode::Linear,
        TuningMode::Prompt(PromptConfig::default()),
        TuningMode::AdaptFormer(desk::adapter()),
        TuningMode::Full,
    ];
    for mode in modes {
        let (_, report) = finetune(&backbone, &desk::transfer(mode))?;
        println!("{:<12} tunable {:>6}  top-1 {:.1}%", report.mode, report.tunable_params(), report.final_top1());
    }
    Ok(())
}
