//! Transfer to a target city with 20 labelled sales and compare against the
//! simple baselines.

use metatransfer::bench::{AblationSpec, Baseline, ExperimentConfig, Experiment, Variant};
use metatransfer::synth::BenchmarkSpec;

fn main() {
    let bench = BenchmarkSpec::aligned(4).generate().unwrap().prepare(20).unwrap();
    let mut config = ExperimentConfig::default();
    config.trainer.epochs = 3;
    config.trainer.iterations_per_epoch = 4;
    config.trainer.query_batch_cap = 32;
    let ex = Experiment::new(&bench, &config);

    println!("{:<14} {:>8} {:>8} {:>8}", "model", "MAE", "MAPE%", "RMSE");
    for variant in [Variant::Full, Variant::NoTransfer] {
        let r = ex.run_ablation(&AblationSpec::variant(variant)).unwrap().report;
        println!("{:<14} {:>8.3} {:>8.2} {:>8.3}", variant.to_string(), r.mae, r.mape_percent, r.rmse);
    }
    for b in [Baseline::Ha, Baseline::Ridge] {
        let r = ex.run_baseline(b).unwrap().report;
        println!("{:<14} {:>8.3} {:>8.2} {:>8.3}", b.to_string(), r.mae, r.mape_percent, r.rmse);
    }
}
