//! Tunable-parameter counts for every tuning mode at ViT-B/16 scale.

use adaptformer::experiment::census;
use adaptformer::{AdapterConfig, PromptConfig, TuningMode, VitConfig};

fn main() {
    let vit = VitConfig::vit_base(174);
    println!("backbone {}, head {}", vit.backbone_param_count(), vit.head_param_count());
    let mut modes = vec![TuningMode::Linear, TuningMode::Full];
    for tokens in [1, 8, 32] {
        modes.push(TuningMode::Prompt(PromptConfig { num_tokens: tokens, ..Default::default() }));
    }
    for mid in [1, 16, 32, 64, 256] {
        modes.push(TuningMode::AdaptFormer(AdapterConfig { mid_dim: mid, ..Default::default() }));
    }
    for mode in &modes {
        let c = census(&vit, mode);
        let label = match mode {
            TuningMode::Prompt(p) => format!("vpt tokens={}", p.num_tokens),
            TuningMode::AdaptFormer(a) => format!("adaptformer mid_dim={}", a.mid_dim),
            m => m.name().to_string(),
        };
        let share = 100.0 * c.tunable as f64 / (c.backbone + c.head + c.extra) as f64;
        println!("{label:<24} extra {:>9}  tunable {:>10}  ({share:.2}%)", c.extra, c.tunable);
    }
}
