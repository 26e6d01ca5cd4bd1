//! Bottleneck width and scale sweeps, with per-epoch CSVs.

use adaptformer::config::SweepAxis;
use adaptformer::experiment::{desk, pretrain, sweep};
use adaptformer::TuningMode;

fn main() -> adaptformer::Result<()> {
    let dir = std::env::temp_dir().join("adaptformer-sweep-example");
    std::fs::create_dir_all(&dir).map_err(|e| adaptformer::Error::Io { path: dir.clone(), source: e })?;
    let (backbone, _) = pretrain(&desk::pretrain())?;
    let cfg = desk::transfer(TuningMode::AdaptFormer(desk::adapter()));
    for (axis, values) in [(SweepAxis::MidDim, ["1", "4", "16", "64"].as_slice()), (SweepAxis::Scale, ["0", "0.01", "0.1", "1"].as_slice())] {
        let values: Vec<String> = values.iter().map(ToString::to_string).collect();
        let points = sweep(&backbone, &cfg, axis, &values, |p| {
            println!("{} = {:<5} top-1 {:>5.1}%  last-10 range {:.1}", axis.name(), p.value, p.report.final_top1(), p.report.tail_range(10));
        })?;
        for p in points {
            p.report.write_csv(&dir.join(format!("{}_{}.csv", axis.name(), p.value)))?;
        }
    }
    println!("csv files in {}", dir.display());
    Ok(())
}
