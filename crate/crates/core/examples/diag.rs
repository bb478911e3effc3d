// temporary diagnostic
use continual_core::data::{generate_synthetic_stream, SyntheticSpec};
use continual_core::trainer::{run_schedule, BaselineMode, TrainConfig};

fn main() {
    for (batch, spc) in [(16usize, 120usize), (10, 120), (10, 160)] {
        let spec = SyntheticSpec { samples_per_class: spc, ..SyntheticSpec::default() };
        println!("=== batch {batch} samples/class {spc}");
        let mut means = [0.0f64; 2];
        for seed in [7u64, 8, 9, 10, 11] {
            let stream = generate_synthetic_stream(&spec, seed).unwrap();
            let mut row = format!("seed {seed:2}:");
            for (i, mode) in [BaselineMode::Lcl, BaselineMode::LclNoMd].into_iter().enumerate() {
                let cfg = TrainConfig {
                    baseline_mode: mode,
                    batch_size: batch,
                    seed,
                    ..TrainConfig::default()
                };
                let (history, _) = run_schedule(&stream, &cfg).unwrap();
                let acc = history.final_report().accuracy;
                means[i] += acc / 5.0;
                row.push_str(&format!(" {:?}={:.3}", mode, acc));
            }
            println!("{row}");
        }
        println!("mean Lcl={:.4} NoMd={:.4} margin={:+.4}", means[0], means[1], means[0] - means[1]);
    }
}
