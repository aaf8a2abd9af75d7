//! Build a temporal event graph by hand and query its neighborhoods and
//! per-community history.

use metatransfer::geo::{haversine, Community, LatLon, TemporalEventGraph, TransactionEvent, SECONDS_PER_DAY};

fn main() {
    let communities = vec![
        Community { id: 1, location: LatLon::new(30.660, 104.060), attrs: vec![0.2, 1.0] },
        Community { id: 2, location: LatLon::new(30.668, 104.071), attrs: vec![-0.5, 0.3] },
        Community { id: 3, location: LatLon::new(30.700, 104.120), attrs: vec![1.4, -0.8] },
    ];
    let day = SECONDS_PER_DAY as i64;
    let sale = |community_id, days, price| TransactionEvent {
        estate_attrs: vec![0.0, 1.0],
        community_id,
        time: days * day,
        unit_price: price,
    };
    let events = vec![sale(1, 40, 11.2), sale(2, 3, 12.9), sale(1, 10, 10.8), sale(3, 25, 14.0)];

    let g = TemporalEventGraph::build(communities, events, 2_000.0).unwrap();
    println!("{} communities, {} community edges, epsilon {} m", g.num_communities(), g.num_cc_edges(), g.epsilon());
    for c in g.communities() {
        let nbrs = g.neighbors(c.id).unwrap();
        println!("community {} neighbors {:?}", c.id, nbrs);
    }
    let d12 = haversine(g.community(1).unwrap().location, g.community(2).unwrap().location);
    println!("distance 1-2: {d12:.0} m, edge: {}", g.has_edge(1, 2).unwrap());

    // events come back sorted by time
    let times: Vec<i64> = g.events().iter().map(|e| e.time / day).collect();
    println!("event days {times:?}");
    let before_day_30 = g.events_in_window(1, 30 * day);
    println!("community 1 sales before day 30: {}", before_day_30.len());
}
