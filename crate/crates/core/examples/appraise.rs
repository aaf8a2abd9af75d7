//! Replay a city's history through an untrained network, appraise one new
//! listing and time single appraisals.

use metatransfer::bench::mttgn_latency;
use metatransfer::model::{Learner, Split};
use metatransfer::mttgn::{AppraisalQuery, Mttgn, MttgnConfig};
use metatransfer::synth::BenchmarkSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let bench = BenchmarkSpec::aligned(1).generate().unwrap().prepare(100).unwrap();
    let city = &bench.target;
    let g = &city.graph;
    let model = Mttgn::new(MttgnConfig::new(g.estate_dim().unwrap(), g.attr_dim(), bench.time_horizon_s));
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    println!("{} parameters", params.num_scalars());

    let history = city.train();
    let store = model.states_after(&params, g, history).unwrap();
    let query = AppraisalQuery::from(&city.test()[0]);
    let y = model.appraise(&params, &query, &store, g).unwrap();
    println!("appraisal for community {} at day {}: {y:.3}", query.community_id, query.time / 86_400);

    let preds = model.predict(&params, &Split::new(g, &city.test()[..20]).with_history(history)).unwrap();
    println!("first test predictions {:?}", &preds[..5]);

    let stats = mttgn_latency(&model, &params, g, history, city.test(), 200).unwrap();
    println!("latency mean {:.3} ms, sd {:.3}, max {:.3}", stats.mean_ms, stats.sd_ms, stats.max_ms);
}
