//! Synthetic multi-city transaction data with a known price mechanism, CSV
//! ingestion, chronological splits, and benchmark preparation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{
    haversine, Community, GraphError, LatLon, TemporalEventGraph, TransactionEvent, SECONDS_PER_DAY,
};

/// 2018-01-01T00:00:00Z, the epoch used by generated datasets.
pub const DEFAULT_EPOCH_UNIX: i64 = 1_514_764_800;

pub const ESTATE_DIM: usize = 12;
pub const COMMUNITY_DIM: usize = 16;
pub const DEFAULT_EPSILON_M: f64 = 2_000.0;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("{path}: row {row}, column `{column}`: cannot parse `{value}`")]
    Parse {
        path: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: non-positive unit price in rows {rows:?}")]
    NonPositivePrice { path: String, rows: Vec<usize> },
    #[error("{path}: row {row} references unknown community {community_id}")]
    DanglingCommunity {
        path: String,
        row: usize,
        community_id: u32,
    },
    #[error("{path}: rows belong to more than one city ({first} and {other})")]
    MixedCities { path: String, first: u32, other: u32 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("cannot take {n_train} training events from {n_events}")]
    SplitOutOfRange { n_train: usize, n_events: usize },
    #[error("invalid city config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    Aligned,
    /// Estate-attribute effect is negated.
    Adversarial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    /// Square box of side `km` centered on `center`.
    pub fn around(center: LatLon, km: f64) -> Self {
        let dlat = (km * 500.0 / crate::geo::EARTH_RADIUS_M).to_degrees();
        let dlon = dlat / center.lat.to_radians().cos();
        Self {
            lat_min: center.lat - dlat,
            lat_max: center.lat + dlat,
            lon_min: center.lon - dlon,
            lon_max: center.lon + dlon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityConfig {
    pub city_id: u32,
    pub n_communities: usize,
    pub n_transactions: usize,
    pub bbox: BBox,
    pub mechanism: MechanismKind,
    pub base_price: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Transaction times are uniform over `[start_day, end_day)` after the epoch.
    pub start_day: f64,
    pub end_day: f64,
    pub n_bumps: usize,
}

impl CityConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(format!("city {}: {m}", self.city_id)));
        if self.n_communities == 0 {
            return bad("n_communities must be >= 1");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.end_day > self.start_day) || self.start_day < 0.0 {
            return bad("time window must satisfy 0 <= start_day < end_day");
        }
        let b = &self.bbox;
        if !(b.lat_min < b.lat_max && b.lon_min < b.lon_max)
            || !LatLon::new(b.lat_min, b.lon_min).is_valid()
            || !LatLon::new(b.lat_max, b.lon_max).is_valid()
        {
            return bad("bounding box is empty or out of range");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialBump {
    pub center: LatLon,
    pub amplitude: f64,
    pub radius_m: f64,
}

/// Ground-truth unit price:
/// `base + w_x·x + w_z·z + A sin(2π t / P) + trend·t + Σ bumps(l) + noise`,
/// with `t` in days.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMechanism {
    pub w_x: Vec<f64>,
    pub w_z: Vec<f64>,
    pub seasonal_amplitude: f64,
    pub seasonal_period_days: f64,
    pub trend_per_day: f64,
    pub bumps: Vec<SpatialBump>,
}

impl GroundTruthMechanism {
    /// Weights shared by every city of one benchmark.
    pub fn shared(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let wx = Normal::new(0.0, 0.8).expect("valid sd");
        let wz = Normal::new(0.0, 0.4).expect("valid sd");
        Self {
            w_x: (0..ESTATE_DIM).map(|_| wx.sample(&mut rng)).collect(),
            w_z: (0..COMMUNITY_DIM).map(|_| wz.sample(&mut rng)).collect(),
            seasonal_amplitude: 0.8,
            seasonal_period_days: 365.0,
            trend_per_day: 0.002,
            bumps: Vec::new(),
        }
    }

    /// Purely linear mechanism: no seasonality, trend, or spatial field.
    pub fn linear(w_x: Vec<f64>, w_z: Vec<f64>) -> Self {
        Self {
            w_x,
            w_z,
            seasonal_amplitude: 0.0,
            seasonal_period_days: 365.0,
            trend_per_day: 0.0,
            bumps: Vec::new(),
        }
    }

    pub fn spatial_field(&self, loc: LatLon) -> f64 {
        self.bumps
            .iter()
            .map(|b| {
                let d = haversine(loc, b.center);
                b.amplitude * (-(d * d) / (2.0 * b.radius_m * b.radius_m)).exp()
            })
            .sum()
    }

    /// Noise-free price before clipping.
    pub fn price(&self, base: f64, x: &[f64], z: &[f64], time: i64, loc: LatLon) -> f64 {
        let days = time as f64 / SECONDS_PER_DAY;
        let lin = crate::tensor::dot(&self.w_x, x) + crate::tensor::dot(&self.w_z, z);
        let seasonal = self.seasonal_amplitude
            * (2.0 * std::f64::consts::PI * days / self.seasonal_period_days).sin();
        base + lin + seasonal + self.trend_per_day * days + self.spatial_field(loc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CityDataset {
    pub city_id: u32,
    pub communities: Vec<Community>,
    /// Chronological.
    pub events: Vec<TransactionEvent>,
    /// Unix seconds corresponding to `time == 0`.
    pub epoch_unix: i64,
    pub ground_truth: Option<GroundTruthMechanism>,
    pub base_price: Option<f64>,
}

impl CityDataset {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

pub const MIN_PRICE: f64 = 0.1;

/// Generate one city. The same config (and mechanism) always yields the same
/// dataset; the RNG stream is keyed by `(seed, city_id)`.
pub fn generate_city(
    config: &CityConfig,
    mech: &GroundTruthMechanism,
) -> Result<CityDataset, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::from(config.city_id));
    let b = config.bbox;

    let communities: Vec<Community> = (0..config.n_communities)
        .map(|i| Community {
            id: i as u32,
            location: LatLon::new(
                rng.random_range(b.lat_min..b.lat_max),
                rng.random_range(b.lon_min..b.lon_max),
            ),
            attrs: (0..mech.w_z.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        })
        .collect();

    let mut effective = mech.clone();
    if config.mechanism == MechanismKind::Adversarial {
        for w in &mut effective.w_x {
            *w = -*w;
        }
    }
    if effective.bumps.is_empty() {
        effective.bumps = (0..config.n_bumps)
            .map(|_| SpatialBump {
                center: LatLon::new(
                    rng.random_range(b.lat_min..b.lat_max),
                    rng.random_range(b.lon_min..b.lon_max),
                ),
                amplitude: rng.random_range(1.0..4.0),
                radius_m: rng.random_range(2_000.0..4_000.0),
            })
            .collect();
    }

    // uneven popularity across communities
    let pop = Exp::new(1.0).expect("valid rate");
    let weights: Vec<f64> = (0..config.n_communities).map(|_| pop.sample(&mut rng) + 0.05).collect();
    let total: f64 = weights.iter().sum();
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).expect("valid sd");
    let (t0, t1) = (
        (config.start_day * SECONDS_PER_DAY) as i64,
        (config.end_day * SECONDS_PER_DAY) as i64,
    );

    let mut events: Vec<TransactionEvent> = (0..config.n_transactions)
        .map(|_| {
            let mut u = rng.random_range(0.0..total);
            let mut ci = 0;
            while ci + 1 < weights.len() && u >= weights[ci] {
                u -= weights[ci];
                ci += 1;
            }
            let time = rng.random_range(t0..t1);
            let x: Vec<f64> = (0..effective.w_x.len())
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let c = &communities[ci];
            let clean = effective.price(config.base_price, &x, &c.attrs, time, c.location);
            let eps = if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            TransactionEvent {
                estate_attrs: x,
                community_id: c.id,
                time,
                unit_price: (clean + eps).max(MIN_PRICE),
            }
        })
        .collect();
    events.sort_by_key(|e| e.time);

    Ok(CityDataset {
        city_id: config.city_id,
        communities,
        events,
        epoch_unix: DEFAULT_EPOCH_UNIX,
        ground_truth: Some(effective),
        base_price: Some(config.base_price),
    })
}

/// First `n_train` events (by time) and the rest.
pub fn chronological_split(
    dataset: &CityDataset,
    n_train: usize,
) -> Result<(&[TransactionEvent], &[TransactionEvent]), SynthError> {
    if n_train > dataset.events.len() {
        return Err(SynthError::SplitOutOfRange {
            n_train,
            n_events: dataset.events.len(),
        });
    }
    Ok(dataset.events.split_at(n_train))
}

// ---- CSV ----------------------------------------------------------------

fn iso8601(epoch_unix: i64, time: i64) -> String {
    let dt: DateTime<Utc> = Utc
        .timestamp_opt(epoch_unix + time, 0)
        .single()
        .expect("timestamp in chrono range");
    dt.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> LoadError + '_ {
    move |source| LoadError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Write `transactions.csv` and `communities.csv` for one city. Floats use
/// the shortest representation that parses back to the same value.
pub fn write_csv(
    dataset: &CityDataset,
    transactions_path: &Path,
    communities_path: &Path,
) -> Result<(), LoadError> {
    let open = |p: &Path| {
        File::create(p).map(BufWriter::new).map_err(|source| LoadError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let x_dim = dataset.events.first().map_or(0, |e| e.estate_attrs.len());
    let mut w = csv::Writer::from_writer(open(transactions_path)?);
    let mut header: Vec<String> = ["city_id", "community_id", "timestamp_iso8601", "unit_price"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..x_dim).map(|k| format!("x_{k}")));
    w.write_record(&header).map_err(csv_err(transactions_path))?;
    for e in &dataset.events {
        let mut rec = vec![
            dataset.city_id.to_string(),
            e.community_id.to_string(),
            iso8601(dataset.epoch_unix, e.time),
            format!("{}", e.unit_price),
        ];
        rec.extend(e.estate_attrs.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(csv_err(transactions_path))?;
    }
    w.flush().map_err(|source| LoadError::Io {
        path: transactions_path.display().to_string(),
        source,
    })?;

    let z_dim = dataset.communities.first().map_or(0, |c| c.attrs.len());
    let mut w = csv::Writer::from_writer(open(communities_path)?);
    let mut header: Vec<String> = ["city_id", "community_id", "lat", "lon"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..z_dim).map(|k| format!("z_{k}")));
    w.write_record(&header).map_err(csv_err(communities_path))?;
    for c in &dataset.communities {
        let mut rec = vec![
            dataset.city_id.to_string(),
            c.id.to_string(),
            format!("{}", c.location.lat),
            format!("{}", c.location.lon),
        ];
        rec.extend(c.attrs.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(csv_err(communities_path))?;
    }
    let mut inner = w.into_inner().map_err(|e| LoadError::Io {
        path: communities_path.display().to_string(),
        source: e.into_error(),
    })?;
    inner.flush().map_err(|source| LoadError::Io {
        path: communities_path.display().to_string(),
        source,
    })
}

struct Table {
    path: String,
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, LoadError> {
        let f = File::open(path).map_err(|source| LoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut r = csv::Reader::from_reader(BufReader::new(f));
        let header = r
            .headers()
            .map_err(csv_err(path))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(csv_err(path))?;
        Ok(Self {
            path: path.display().to_string(),
            header,
            rows,
        })
    }

    fn col(&self, name: &str) -> Result<usize, LoadError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LoadError::MissingColumn {
                path: self.path.clone(),
                column: name.to_string(),
            })
    }

    /// Indices of `prefix_0, prefix_1, ...` in order.
    fn series(&self, prefix: &str) -> Vec<usize> {
        let mut out = Vec::new();
        while let Some(i) = self.header.iter().position(|h| *h == format!("{prefix}_{}", out.len())) {
            out.push(i);
        }
        out
    }

    /// `row` is the 1-based data row (header excluded).
    fn parse<T: std::str::FromStr>(&self, row: usize, col: usize) -> Result<T, LoadError> {
        let raw = self.rows[row - 1].get(col).unwrap_or("");
        raw.trim().parse().map_err(|_| LoadError::Parse {
            path: self.path.clone(),
            row,
            column: self.header[col].clone(),
            value: raw.to_string(),
        })
    }
}

/// Load one city from its two CSV files. Row numbers in errors are 1-based
/// data rows (the header is not counted).
pub fn load_csv(transactions_path: &Path, communities_path: &Path) -> Result<CityDataset, LoadError> {
    let ct = Table::read(communities_path)?;
    let (c_city, c_id, c_lat, c_lon) = (ct.col("city_id")?, ct.col("community_id")?, ct.col("lat")?, ct.col("lon")?);
    let zc = ct.series("z");
    let mut city: Option<u32> = None;
    let mut check_city = |path: &str, id: u32| -> Result<(), LoadError> {
        match city {
            None => {
                city = Some(id);
                Ok(())
            }
            Some(c) if c == id => Ok(()),
            Some(c) => Err(LoadError::MixedCities {
                path: path.to_string(),
                first: c,
                other: id,
            }),
        }
    };
    let mut communities = Vec::with_capacity(ct.rows.len());
    for row in 1..=ct.rows.len() {
        check_city(&ct.path, ct.parse(row, c_city)?)?;
        communities.push(Community {
            id: ct.parse(row, c_id)?,
            location: LatLon::new(ct.parse(row, c_lat)?, ct.parse(row, c_lon)?),
            attrs: zc.iter().map(|&k| ct.parse(row, k)).collect::<Result<_, _>>()?,
        });
    }
    let known: std::collections::HashSet<u32> = communities.iter().map(|c| c.id).collect();

    let tt = Table::read(transactions_path)?;
    let (t_city, t_cid, t_ts, t_price) = (
        tt.col("city_id")?,
        tt.col("community_id")?,
        tt.col("timestamp_iso8601")?,
        tt.col("unit_price")?,
    );
    let xc = tt.series("x");
    let mut raw = Vec::with_capacity(tt.rows.len());
    let mut bad_rows = Vec::new();
    for row in 1..=tt.rows.len() {
        check_city(&tt.path, tt.parse(row, t_city)?)?;
        let cid: u32 = tt.parse(row, t_cid)?;
        if !known.contains(&cid) {
            return Err(LoadError::DanglingCommunity {
                path: tt.path.clone(),
                row,
                community_id: cid,
            });
        }
        let ts_raw = tt.rows[row - 1].get(t_ts).unwrap_or("");
        let ts = DateTime::parse_from_rfc3339(ts_raw.trim())
            .map_err(|_| LoadError::Parse {
                path: tt.path.clone(),
                row,
                column: "timestamp_iso8601".into(),
                value: ts_raw.to_string(),
            })?
            .timestamp();
        let price: f64 = tt.parse(row, t_price)?;
        if !(price > 0.0) {
            bad_rows.push(row);
            continue;
        }
        let x = xc.iter().map(|&k| tt.parse(row, k)).collect::<Result<Vec<f64>, _>>()?;
        raw.push((ts, cid, price, x));
    }
    if !bad_rows.is_empty() {
        return Err(LoadError::NonPositivePrice {
            path: tt.path.clone(),
            rows: bad_rows,
        });
    }
    let first_ts = raw.iter().map(|r| r.0).min().unwrap_or(DEFAULT_EPOCH_UNIX);
    let epoch_unix = if first_ts >= DEFAULT_EPOCH_UNIX {
        DEFAULT_EPOCH_UNIX
    } else {
        first_ts.div_euclid(86_400) * 86_400
    };
    let mut events: Vec<TransactionEvent> = raw
        .into_iter()
        .map(|(ts, cid, price, x)| TransactionEvent {
            estate_attrs: x,
            community_id: cid,
            time: ts - epoch_unix,
            unit_price: price,
        })
        .collect();
    events.sort_by_key(|e| e.time);
    // validates coordinates, attribute dimensions, and duplicates
    TemporalEventGraph::build(communities.clone(), Vec::new(), DEFAULT_EPSILON_M)?;
    Ok(CityDataset {
        city_id: city.unwrap_or(0),
        communities,
        events,
        epoch_unix,
        ground_truth: None,
        base_price: None,
    })
}

// ---- standardization ----------------------------------------------------

/// Per-column mean and standard deviation; constant columns get sd 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let rows: Vec<&[f64]> = rows.collect();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v / n;
            }
        }
        let mut sd = vec![0.0; dim];
        for r in &rows {
            for ((s, v), m) in sd.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let sd = sd
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, sd }
    }

    pub fn apply(&self, v: &mut [f64]) {
        for ((x, m), s) in v.iter_mut().zip(&self.mean).zip(&self.sd) {
            *x = (*x - m) / s;
        }
    }
}

/// Z-score community attributes over the city's communities and estate
/// attributes over the first `train_len` events only.
pub fn standardize(dataset: &CityDataset, train_len: usize) -> CityDataset {
    let mut out = dataset.clone();
    let zd = dataset.communities.first().map_or(0, |c| c.attrs.len());
    let zs = Standardizer::fit(dataset.communities.iter().map(|c| c.attrs.as_slice()), zd);
    for c in &mut out.communities {
        zs.apply(&mut c.attrs);
    }
    let xd = dataset.events.first().map_or(0, |e| e.estate_attrs.len());
    let n = train_len.min(dataset.events.len());
    if n > 0 {
        let xs = Standardizer::fit(dataset.events[..n].iter().map(|e| e.estate_attrs.as_slice()), xd);
        for e in &mut out.events {
            xs.apply(&mut e.estate_attrs);
        }
    }
    out
}

// ---- benchmarks ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub epsilon_m: f64,
    pub sources: Vec<CityConfig>,
    pub target: CityConfig,
    /// Z-score attributes per city (on training data only).
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

const WINDOW_DAYS: f64 = 730.0;
const TARGET_START_DAY: f64 = 282.0;

fn source_config(city_id: u32, seed: u64, center: LatLon, base: f64, kind: MechanismKind) -> CityConfig {
    CityConfig {
        city_id,
        n_communities: 60,
        n_transactions: 2_000,
        bbox: BBox::around(center, 12.0),
        mechanism: kind,
        base_price: base,
        noise_sigma: 0.5,
        seed,
        start_day: 0.0,
        end_day: WINDOW_DAYS,
        n_bumps: 3,
    }
}

impl BenchmarkSpec {
    /// Three sources (two aligned, one adversarial) and an aligned target.
    pub fn adversarial(seed: u64) -> Self {
        let mut spec = Self::aligned(seed);
        spec.sources[2].mechanism = MechanismKind::Adversarial;
        spec
    }

    /// Three aligned sources and an aligned target.
    pub fn aligned(seed: u64) -> Self {
        Self {
            seed,
            epsilon_m: DEFAULT_EPSILON_M,
            sources: vec![
                source_config(1, seed, LatLon::new(30.66, 104.06), 12.0, MechanismKind::Aligned),
                source_config(2, seed, LatLon::new(30.59, 114.30), 12.0, MechanismKind::Aligned),
                source_config(3, seed, LatLon::new(23.13, 113.26), 12.0, MechanismKind::Aligned),
            ],
            target: CityConfig {
                city_id: 10,
                n_communities: 280,
                n_transactions: 1_500,
                bbox: BBox::around(LatLon::new(31.47, 104.68), 24.0),
                mechanism: MechanismKind::Aligned,
                base_price: 12.0,
                noise_sigma: 0.5,
                seed,
                start_day: TARGET_START_DAY,
                end_day: WINDOW_DAYS,
                n_bumps: 3,
            },
            standardize: true,
        }
    }

    /// Span from day 0 to the last day of any city, in seconds.
    pub fn time_horizon_s(&self) -> f64 {
        self.sources
            .iter()
            .chain(std::iter::once(&self.target))
            .map(|c| c.end_day)
            .fold(0.0, f64::max)
            * SECONDS_PER_DAY
    }

    pub fn generate(&self) -> Result<Benchmark, SynthError> {
        let mech = GroundTruthMechanism::shared(self.seed);
        let sources = self
            .sources
            .iter()
            .map(|c| generate_city(c, &mech))
            .collect::<Result<Vec<_>, _>>()?;
        let target = generate_city(&self.target, &mech)?;
        Ok(self.assemble(sources, target))
    }

    /// Wrap already generated or loaded cities with this spec's settings.
    pub fn assemble(&self, sources: Vec<CityDataset>, target: CityDataset) -> Benchmark {
        Benchmark {
            sources,
            target,
            epsilon_m: self.epsilon_m,
            time_horizon_s: self.time_horizon_s(),
            standardize: self.standardize,
        }
    }
}

/// Raw generated (or loaded) cities.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub sources: Vec<CityDataset>,
    pub target: CityDataset,
    pub epsilon_m: f64,
    /// Query times are normalized by this span.
    pub time_horizon_s: f64,
    pub standardize: bool,
}

/// One city ready for modeling: graph over all its events and the length of
/// the chronological training prefix.
#[derive(Clone, Debug)]
pub struct PreparedCity {
    pub city_id: u32,
    pub graph: TemporalEventGraph,
    pub train_len: usize,
}

impl PreparedCity {
    pub fn train(&self) -> &[TransactionEvent] {
        &self.graph.events()[..self.train_len]
    }

    pub fn test(&self) -> &[TransactionEvent] {
        &self.graph.events()[self.train_len..]
    }
}

#[derive(Clone, Debug)]
pub struct PreparedBenchmark {
    pub sources: Vec<PreparedCity>,
    pub target: PreparedCity,
    pub time_horizon_s: f64,
}

impl PreparedBenchmark {
    pub fn source(&self, city_id: u32) -> Option<&PreparedCity> {
        self.sources.iter().find(|c| c.city_id == city_id)
    }

    pub fn source_ids(&self) -> Vec<u32> {
        self.sources.iter().map(|c| c.city_id).collect()
    }
}

impl Benchmark {
    /// Split the target at `n_train`, drop source events later than the
    /// target's last training event, standardize, and build graphs.
    pub fn prepare(&self, n_train: usize) -> Result<PreparedBenchmark, PrepareError> {
        let (train, _) = chronological_split(&self.target, n_train)?;
        let cutoff_unix = train
            .last()
            .map_or(i64::MIN, |e| e.time + self.target.epoch_unix);
        let mut sources = Vec::with_capacity(self.sources.len());
        for src in &self.sources {
            let mut ds = src.clone();
            ds.events.retain(|e| e.time + ds.epoch_unix <= cutoff_unix);
            let n = ds.events.len();
            let ds = if self.standardize { standardize(&ds, n) } else { ds };
            sources.push(PreparedCity {
                city_id: ds.city_id,
                graph: TemporalEventGraph::build(ds.communities, ds.events, self.epsilon_m)?,
                train_len: n,
            });
        }
        let tgt = if self.standardize {
            standardize(&self.target, n_train)
        } else {
            self.target.clone()
        };
        Ok(PreparedBenchmark {
            sources,
            target: PreparedCity {
                city_id: tgt.city_id,
                graph: TemporalEventGraph::build(tgt.communities, tgt.events, self.epsilon_m)?,
                train_len: n_train,
            },
            time_horizon_s: self.time_horizon_s,
        })
    }
}

#[derive(Debug, Error)]
pub enum PrepareError {
    #[error(transparent)]
    Split(#[from] SynthError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Fit `price ≈ intercept + coef·features` by ridge regression (normal
/// equations, Cholesky). The intercept is not penalized.
pub(crate) fn ridge_fit(features: &[Vec<f64>], targets: &[f64], l2: f64) -> Option<(f64, Vec<f64>)> {
    let d = features.first().map_or(0, Vec::len);
    let n = features.len();
    if n == 0 {
        return None;
    }
    let p = d + 1;
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    let mut row = vec![0.0; p];
    for (f, &y) in features.iter().zip(targets) {
        row[0] = 1.0;
        row[1..].copy_from_slice(f);
        for i in 0..p {
            b[i] += row[i] * y;
            for j in 0..p {
                a[i * p + j] += row[i] * row[j];
            }
        }
    }
    for i in 1..p {
        a[i * p + i] += l2;
    }
    let sol = cholesky_solve(&mut a, &b, p)?;
    Some((sol[0], sol[1..].to_vec()))
}

fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(1.0);
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= a[j * n + k] * a[j * n + k];
        }
        if s <= 1e-12 * scale {
            return None;
        }
        let l = s.sqrt();
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / l;
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * y[k];
        }
        y[i] = s / a[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= a[k * n + i] * x[k];
        }
        x[i] = s / a[i * n + i];
    }
    Some(x)
}
