//! Communities, transaction events, and the temporal event graph.
//!
//! Community-community edges connect every pair closer than `epsilon`
//! (great-circle distance) plus a self-loop on each node. Transaction edges
//! are the events themselves, kept in chronological order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("event {event_index} references unknown community {community_id}")]
    DanglingCommunity { event_index: usize, community_id: u32 },
    #[error("unknown community {0}")]
    UnknownCommunity(u32),
    #[error("duplicate community id {0}")]
    DuplicateCommunity(u32),
    #[error("community {id}: coordinate ({lat}, {lon}) out of range")]
    BadCoordinate { id: u32, lat: f64, lon: f64 },
    #[error("community {id}: expected {expected} attributes, found {found}")]
    AttrDimension { id: u32, expected: usize, found: usize },
    #[error("event {event_index}: expected {expected} estate attributes, found {found}")]
    EstateDimension {
        event_index: usize,
        expected: usize,
        found: usize,
    },
    #[error("event {event_index}: unit price must be positive, got {price}")]
    NonPositivePrice { event_index: usize, price: f64 },
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
}

/// Latitude / longitude in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// A residential community. `attrs` holds the (static) community attribute
/// vector: facility counts and nearest-facility distances.
#[derive(Clone, Debug, PartialEq)]
pub struct Community {
    pub id: u32,
    pub location: LatLon,
    pub attrs: Vec<f64>,
}

/// One completed sale. `time` is seconds since the dataset epoch and
/// `unit_price` is in thousands of currency units per square meter.
#[derive(Clone, Debug, PartialEq)]
pub struct TransactionEvent {
    pub estate_attrs: Vec<f64>,
    pub community_id: u32,
    pub time: i64,
    pub unit_price: f64,
}

/// Great-circle distance in meters (haversine formula).
pub fn haversine(a: LatLon, b: LatLon) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Clone, Debug)]
pub struct TemporalEventGraph {
    communities: Vec<Community>,
    index: HashMap<u32, usize>,
    /// Per community index: (neighbor index, distance m), ascending neighbor id,
    /// self included.
    adjacency: Vec<Vec<(usize, f64)>>,
    events: Vec<TransactionEvent>,
    /// Per community index: positions into `events`, chronological.
    by_community: Vec<Vec<usize>>,
    epsilon: f64,
}

impl TemporalEventGraph {
    /// Connect communities closer than `epsilon` meters, add self-loops, and
    /// sort events by (time, input position).
    pub fn build(
        communities: Vec<Community>,
        mut events: Vec<TransactionEvent>,
        epsilon: f64,
    ) -> Result<Self, GraphError> {
        if !(epsilon > 0.0) {
            return Err(GraphError::BadEpsilon(epsilon));
        }
        let mut index = HashMap::with_capacity(communities.len());
        let attr_dim = communities.first().map_or(0, |c| c.attrs.len());
        for (i, c) in communities.iter().enumerate() {
            if !c.location.is_valid() {
                return Err(GraphError::BadCoordinate {
                    id: c.id,
                    lat: c.location.lat,
                    lon: c.location.lon,
                });
            }
            if c.attrs.len() != attr_dim {
                return Err(GraphError::AttrDimension {
                    id: c.id,
                    expected: attr_dim,
                    found: c.attrs.len(),
                });
            }
            if index.insert(c.id, i).is_some() {
                return Err(GraphError::DuplicateCommunity(c.id));
            }
        }
        let estate_dim = events.first().map_or(0, |e| e.estate_attrs.len());
        for (k, e) in events.iter().enumerate() {
            if !index.contains_key(&e.community_id) {
                return Err(GraphError::DanglingCommunity {
                    event_index: k,
                    community_id: e.community_id,
                });
            }
            if e.estate_attrs.len() != estate_dim {
                return Err(GraphError::EstateDimension {
                    event_index: k,
                    expected: estate_dim,
                    found: e.estate_attrs.len(),
                });
            }
            if !(e.unit_price > 0.0) {
                return Err(GraphError::NonPositivePrice {
                    event_index: k,
                    price: e.unit_price,
                });
            }
        }
        // stable: ties keep input order
        events.sort_by_key(|e| e.time);

        let n = communities.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| communities[i].id);
        let mut adjacency = vec![Vec::new(); n];
        for &i in &order {
            for &j in &order {
                if i == j {
                    adjacency[i].push((j, 0.0));
                    continue;
                }
                let d = haversine(communities[i].location, communities[j].location);
                if d < epsilon {
                    adjacency[i].push((j, d));
                }
            }
        }

        let mut by_community = vec![Vec::new(); n];
        for (k, e) in events.iter().enumerate() {
            by_community[index[&e.community_id]].push(k);
        }

        Ok(Self {
            communities,
            index,
            adjacency,
            events,
            by_community,
            epsilon,
        })
    }

    pub fn communities(&self) -> &[Community] {
        &self.communities
    }

    pub fn events(&self) -> &[TransactionEvent] {
        &self.events
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn num_communities(&self) -> usize {
        self.communities.len()
    }

    pub fn estate_dim(&self) -> Option<usize> {
        self.events.first().map(|e| e.estate_attrs.len())
    }

    pub fn attr_dim(&self) -> usize {
        self.communities.first().map_or(0, |c| c.attrs.len())
    }

    /// Position of a community id in [`Self::communities`].
    pub fn index_of(&self, community_id: u32) -> Result<usize, GraphError> {
        self.index
            .get(&community_id)
            .copied()
            .ok_or(GraphError::UnknownCommunity(community_id))
    }

    pub fn community(&self, community_id: u32) -> Result<&Community, GraphError> {
        Ok(&self.communities[self.index_of(community_id)?])
    }

    /// Neighbors by position, self included, ascending id.
    pub fn neighbor_indices(&self, idx: usize) -> &[(usize, f64)] {
        &self.adjacency[idx]
    }

    /// `(neighbor id, distance in meters)`, self included with distance 0,
    /// ascending neighbor id.
    pub fn neighbors(&self, community_id: u32) -> Result<Vec<(u32, f64)>, GraphError> {
        let i = self.index_of(community_id)?;
        Ok(self.adjacency[i]
            .iter()
            .map(|&(j, d)| (self.communities[j].id, d))
            .collect())
    }

    pub fn has_edge(&self, a: u32, b: u32) -> Result<bool, GraphError> {
        let (i, j) = (self.index_of(a)?, self.index_of(b)?);
        Ok(self.adjacency[i].iter().any(|&(k, _)| k == j))
    }

    /// Events of one community with `time <= until`, chronological.
    pub fn events_in_window(&self, community_id: u32, until: i64) -> Vec<&TransactionEvent> {
        let Ok(i) = self.index_of(community_id) else {
            return Vec::new();
        };
        self.by_community[i]
            .iter()
            .map(|&k| &self.events[k])
            .take_while(|e| e.time <= until)
            .collect()
    }

    pub fn num_cc_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn community(id: u32, lat: f64, lon: f64) -> Community {
        Community {
            id,
            location: LatLon::new(lat, lon),
            attrs: vec![0.0; 2],
        }
    }

    fn event(cid: u32, time: i64, price: f64) -> TransactionEvent {
        TransactionEvent {
            estate_attrs: vec![1.0],
            community_id: cid,
            time,
            unit_price: price,
        }
    }

    /// Latitude offset in degrees that puts two points on one meridian `m`
    /// meters apart.
    fn lat_offset(m: f64) -> f64 {
        (m / EARTH_RADIUS_M).to_degrees()
    }

    #[test]
    fn haversine_identity_and_equator_degree() {
        let a = LatLon::new(30.5, 104.0);
        assert_eq!(haversine(a, a), 0.0);
        let d = haversine(LatLon::new(0.0, 0.0), LatLon::new(0.0, 1.0));
        let oracle = std::f64::consts::PI * EARTH_RADIUS_M / 180.0;
        assert!((d - oracle).abs() < 1e-6);
        assert!((d - 111_194.9).abs() < 1.0);
    }

    #[test]
    fn epsilon_threshold_two_kilometers() {
        for (sep, expect) in [(1_500.0, true), (2_500.0, false)] {
            let cs = vec![community(1, 30.0, 104.0), community(2, 30.0 + lat_offset(sep), 104.0)];
            let g = TemporalEventGraph::build(cs, vec![], 2_000.0).unwrap();
            assert_eq!(g.has_edge(1, 2).unwrap(), expect, "separation {sep}");
            assert_eq!(g.has_edge(2, 1).unwrap(), expect);
        }
    }

    #[test]
    fn single_community_has_only_self_loop() {
        let g = TemporalEventGraph::build(vec![community(7, 0.0, 0.0)], vec![], 2_000.0).unwrap();
        assert_eq!(g.neighbors(7).unwrap(), vec![(7, 0.0)]);
        assert_eq!(g.num_cc_edges(), 1);
        assert!(g.events().is_empty());
    }

    #[test]
    fn events_come_out_sorted_and_ties_keep_input_order() {
        let cs = vec![community(1, 0.0, 0.0)];
        let evs = vec![event(1, 30, 1.0), event(1, 10, 2.0), event(1, 30, 3.0), event(1, 20, 4.0)];
        let g = TemporalEventGraph::build(cs, evs, 2_000.0).unwrap();
        let prices: Vec<f64> = g.events().iter().map(|e| e.unit_price).collect();
        assert_eq!(prices, vec![2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn dangling_community_reports_event_index() {
        let cs = vec![community(1, 0.0, 0.0)];
        let evs = vec![event(1, 0, 1.0), event(9, 5, 1.0)];
        let err = TemporalEventGraph::build(cs, evs, 2_000.0).unwrap_err();
        assert_eq!(
            err,
            GraphError::DanglingCommunity {
                event_index: 1,
                community_id: 9
            }
        );
    }

    #[test]
    fn triangle_neighbors_and_distances() {
        let d = lat_offset(500.0);
        let cs = vec![
            community(3, 10.0, 20.0),
            community(1, 10.0 + d, 20.0),
            community(2, 10.0, 20.0 + d),
        ];
        let g = TemporalEventGraph::build(cs.clone(), vec![], 2_000.0).unwrap();
        for c in &cs {
            let ns = g.neighbors(c.id).unwrap();
            assert_eq!(ns.len(), 3);
            let ids: Vec<u32> = ns.iter().map(|n| n.0).collect();
            assert_eq!(ids, vec![1, 2, 3]);
            for (nid, dist) in ns {
                let other = g.community(nid).unwrap();
                assert_eq!(dist, if nid == c.id { 0.0 } else { haversine(c.location, other.location) });
            }
        }
        assert!(matches!(g.neighbors(99), Err(GraphError::UnknownCommunity(99))));
    }

    #[test]
    fn events_in_window_is_inclusive() {
        let cs = vec![community(1, 0.0, 0.0), community(2, 1.0, 1.0)];
        let evs = vec![event(1, 10, 1.0), event(2, 15, 1.0), event(1, 20, 2.0), event(1, 30, 3.0)];
        let g = TemporalEventGraph::build(cs, evs, 2_000.0).unwrap();
        assert!(g.events_in_window(1, 5).is_empty());
        let upto20: Vec<i64> = g.events_in_window(1, 20).iter().map(|e| e.time).collect();
        assert_eq!(upto20, vec![10, 20]);
        assert_eq!(g.events_in_window(1, i64::MAX).len(), 3);
    }

    fn arb_communities() -> impl Strategy<Value = Vec<Community>> {
        prop::collection::vec((29.9f64..30.1, 103.9f64..104.1), 1..25).prop_map(|pts| {
            pts.into_iter()
                .enumerate()
                .map(|(i, (lat, lon))| community(i as u32, lat, lon))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn haversine_symmetric_nonnegative(a in -89.0f64..89.0, b in -179.0f64..179.0,
                                           c in -89.0f64..89.0, d in -179.0f64..179.0) {
            let (p, q) = (LatLon::new(a, b), LatLon::new(c, d));
            prop_assert_eq!(haversine(p, q), haversine(q, p));
            prop_assert!(haversine(p, q) >= 0.0);
        }

        #[test]
        fn edges_symmetric_with_self_loops(cs in arb_communities(), eps in 100.0f64..10_000.0) {
            let g = TemporalEventGraph::build(cs.clone(), vec![], eps).unwrap();
            for a in &cs {
                prop_assert!(g.has_edge(a.id, a.id).unwrap());
                for b in &cs {
                    let e = g.has_edge(a.id, b.id).unwrap();
                    prop_assert_eq!(e, g.has_edge(b.id, a.id).unwrap());
                    if a.id != b.id {
                        prop_assert_eq!(e, haversine(a.location, b.location) < eps);
                    }
                }
            }
        }

        #[test]
        fn growing_epsilon_keeps_edges(cs in arb_communities(), eps in 100.0f64..5_000.0, grow in 0.0f64..5_000.0) {
            let small = TemporalEventGraph::build(cs.clone(), vec![], eps).unwrap();
            let large = TemporalEventGraph::build(cs.clone(), vec![], eps + grow).unwrap();
            for a in &cs {
                for b in &cs {
                    if small.has_edge(a.id, b.id).unwrap() {
                        prop_assert!(large.has_edge(a.id, b.id).unwrap());
                    }
                }
            }
        }

        #[test]
        fn replay_is_deterministic(times in prop::collection::vec(0i64..50, 0..40)) {
            let cs = vec![community(1, 0.0, 0.0)];
            let evs: Vec<_> = times.iter().enumerate().map(|(k, &t)| event(1, t, 1.0 + k as f64)).collect();
            let g = TemporalEventGraph::build(cs, evs, 2_000.0).unwrap();
            let first: Vec<_> = g.events().to_vec();
            let second: Vec<_> = g.events().to_vec();
            prop_assert_eq!(&first, &second);
            prop_assert!(first.windows(2).all(|w| w[0].time <= w[1].time));
        }
    }
}
