//! CLS features of a tuned model, one CSV row per sample.

use adaptformer::cli::features_csv;
use adaptformer::experiment::{datasets, desk, finetune, pretrain};
use adaptformer::TuningMode;

fn main() -> adaptformer::Result<()> {
    let (backbone, _) = pretrain(&desk::pretrain())?;
    let cfg = desk::transfer(TuningMode::AdaptFormer(desk::adapter()));
    let (tuned, _) = finetune(&backbone, &cfg)?;
    let (_, eval) = datasets(&cfg)?;
    let csv = features_csv(&tuned, &eval, 64)?;
    for line in csv.lines().take(4) {
        println!("{}", line.chars().take(100).collect::<String>());
    }
    println!("{} rows", csv.lines().count() - 1);
    Ok(())
}
