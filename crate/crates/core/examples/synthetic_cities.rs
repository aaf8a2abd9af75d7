//! Generate the adversarial benchmark, write one city to CSV, read it back
//! and prepare the few-shot split.

use metatransfer::synth::{load_csv, write_csv, BenchmarkSpec, MechanismKind};

fn main() {
    let mut spec = BenchmarkSpec::adversarial(7);
    for c in &mut spec.sources {
        c.n_transactions = 400;
    }
    let bench = spec.generate().unwrap();
    for (cfg, city) in spec.sources.iter().zip(&bench.sources) {
        let mean = city.events.iter().map(|e| e.unit_price).sum::<f64>() / city.len() as f64;
        let tag = if cfg.mechanism == MechanismKind::Adversarial { " (adversarial)" } else { "" };
        println!("source {}{tag}: {} sales, mean price {mean:.2}", city.city_id, city.len());
    }
    println!("target {}: {} sales", bench.target.city_id, bench.target.len());

    let dir = std::env::temp_dir().join(format!("metatransfer-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (tx, comm) = (dir.join("transactions.csv"), dir.join("communities.csv"));
    write_csv(&bench.target, &tx, &comm).unwrap();
    let back = load_csv(&tx, &comm).unwrap();
    assert_eq!(back.events.len(), bench.target.events.len());
    println!("reloaded {} sales from {}", back.len(), tx.display());
    std::fs::remove_dir_all(&dir).unwrap();

    let prepared = bench.prepare(50).unwrap();
    println!(
        "prepared: target train {} / test {}, sources cut to {:?}",
        prepared.target.train().len(),
        prepared.target.test().len(),
        prepared.sources.iter().map(|c| c.train_len).collect::<Vec<_>>()
    );
}
