//! Meta-train the network on three source cities, one of which follows a
//! conflicting price mechanism, and watch the per-city instance weights.

use metatransfer::bench::{AblationSpec, ExperimentConfig, Experiment};
use metatransfer::meta::mean_sd;
use metatransfer::synth::BenchmarkSpec;

fn main() {
    let bench = BenchmarkSpec::adversarial(2).generate().unwrap().prepare(20).unwrap();
    let mut config = ExperimentConfig::default();
    config.trainer.epochs = 3;
    config.trainer.iterations_per_epoch = 4;
    config.trainer.query_batch_cap = 32;
    let ex = Experiment::new(&bench, &config);

    let out = ex.pretrain(&AblationSpec::default()).unwrap();
    let mut iters: Vec<usize> = out.weight_log.iter().map(|r| r.iteration).collect();
    iters.dedup();
    for it in iters {
        let rows: Vec<_> = out.weight_log.iter().filter(|r| r.iteration == it).collect();
        let cells: Vec<String> = rows.iter().map(|r| format!("city {} {:.4}", r.city_id, r.mean_lambda)).collect();
        println!("iteration {it:>2}: {}", cells.join("  "));
    }
    let weights = out.city_mean_weights(&ex.sources(None), Default::default()).unwrap();
    println!("final mean weight per city {weights:?}");
    let (m, sd) = mean_sd(&weights.iter().map(|w| w.1).collect::<Vec<_>>());
    println!("across cities {m:.4} ± {sd:.4}; {} episodes skipped", out.skipped_episodes);
}
