//! Zip-code enrichment, zip centroids and great-circle distance.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Latitude/longitude extent every zip centroid must fall inside.
pub const CITY_LAT_RANGE: (f64, f64) = (40.4, 41.0);
pub const CITY_LON_RANGE: (f64, f64) = (-74.3, -73.6);

/// A point in degrees. Serialized as `[lat, lon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub const fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }
}

impl From<[f64; 2]> for LatLon {
    fn from([lat, lon]: [f64; 2]) -> Self {
        Self { lat, lon }
    }
}

impl From<LatLon> for [f64; 2] {
    fn from(p: LatLon) -> Self {
        [p.lat, p.lon]
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();

    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    // rounding can push h a hair past 1 for antipodal points
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Borough {
    Bronx,
    Brooklyn,
    Manhattan,
    Queens,
    #[serde(rename = "Staten Island")]
    StatenIsland,
}

impl Borough {
    pub const ALL: [Borough; 5] = [
        Borough::Bronx,
        Borough::Brooklyn,
        Borough::Manhattan,
        Borough::Queens,
        Borough::StatenIsland,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Borough::Bronx => "Bronx",
            Borough::Brooklyn => "Brooklyn",
            Borough::Manhattan => "Manhattan",
            Borough::Queens => "Queens",
            Borough::StatenIsland => "Staten Island",
        }
    }
}

impl fmt::Display for Borough {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Borough {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "bronx" | "thebronx" => Ok(Borough::Bronx),
            "brooklyn" => Ok(Borough::Brooklyn),
            "manhattan" => Ok(Borough::Manhattan),
            "queens" => Ok(Borough::Queens),
            "statenisland" => Ok(Borough::StatenIsland),
            _ => Err(Error::Validation(format!("unknown borough {s:?}"))),
        }
    }
}

pub fn is_valid_zip(zip: &str) -> bool {
    zip.len() == 5 && zip.bytes().all(|b| b.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipInfo {
    pub zip: String,
    pub borough: Borough,
    pub centroid_lat: f64,
    pub centroid_lon: f64,
    pub population: u64,
}

impl ZipInfo {
    pub fn centroid(&self) -> LatLon {
        LatLon::new(self.centroid_lat, self.centroid_lon)
    }

    pub fn validate(&self) -> Result<()> {
        if !is_valid_zip(&self.zip) {
            return Err(Error::Validation(format!("zip {:?} is not five digits", self.zip)));
        }
        let (lat_lo, lat_hi) = CITY_LAT_RANGE;
        let (lon_lo, lon_hi) = CITY_LON_RANGE;
        if !(lat_lo..=lat_hi).contains(&self.centroid_lat)
            || !(lon_lo..=lon_hi).contains(&self.centroid_lon)
        {
            return Err(Error::Validation(format!(
                "centroid of zip {} ({}, {}) is outside the city extent",
                self.zip, self.centroid_lat, self.centroid_lon
            )));
        }
        Ok(())
    }
}

/// All known zips, keyed by zip code. Loaded from
/// `zip,borough,centroid_lat,centroid_lon,population`.
#[derive(Debug, Clone, Default)]
pub struct ZipTable {
    zips: BTreeMap<String, ZipInfo>,
}

#[derive(Deserialize)]
struct ZipCsvRow {
    zip: String,
    borough: String,
    centroid_lat: f64,
    centroid_lon: f64,
    population: u64,
}

impl ZipTable {
    pub fn new(rows: impl IntoIterator<Item = ZipInfo>) -> Result<Self> {
        let mut zips = BTreeMap::new();
        for info in rows {
            info.validate()?;
            if zips.contains_key(&info.zip) {
                return Err(Error::Validation(format!("duplicate zip {}", info.zip)));
            }
            zips.insert(info.zip.clone(), info);
        }
        Ok(Self { zips })
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<ZipCsvRow>().enumerate() {
            let row = rec.map_err(|e| Error::parse(format!("zip table row {}", i + 1), e))?;
            rows.push(ZipInfo {
                borough: row.borough.parse()?,
                zip: row.zip.trim().to_string(),
                centroid_lat: row.centroid_lat,
                centroid_lon: row.centroid_lon,
                population: row.population,
            });
        }
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(file)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["zip", "borough", "centroid_lat", "centroid_lon", "population"])
            .map_err(csv_write)?;
        for z in self.zips.values() {
            w.write_record([
                z.zip.clone(),
                z.borough.to_string(),
                z.centroid_lat.to_string(),
                z.centroid_lon.to_string(),
                z.population.to_string(),
            ])
            .map_err(csv_write)?;
        }
        w.into_inner().map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn get(&self, zip: &str) -> Option<&ZipInfo> {
        self.zips.get(zip)
    }

    pub fn len(&self) -> usize {
        self.zips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zips.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ZipInfo> {
        self.zips.values()
    }

    pub fn centroids(&self) -> BTreeMap<String, LatLon> {
        self.zips
            .values()
            .map(|z| (z.zip.clone(), z.centroid()))
            .collect()
    }

    pub fn borough_populations(&self) -> BTreeMap<Borough, u64> {
        let mut out = BTreeMap::new();
        for z in self.zips.values() {
            *out.entry(z.borough).or_insert(0) += z.population;
        }
        out
    }
}

fn csv_write(e: csv::Error) -> Error {
    Error::Validation(format!("csv write failed: {e}"))
}

/// Outcome of a successful geocoder round trip.
#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    Found(ZipInfo),
    NotFound,
}

/// Address to zip lookup.
///
/// Implementations must be deterministic for a fixed backing dataset.
/// `Err` is reserved for retryable backend failures; an unknown address is
/// `Ok(Resolution::NotFound)`.
pub trait Geocoder: Send + Sync {
    fn resolve(&self, address: &str) -> Result<Resolution>;
}

pub fn resolve_address(address: &str, geocoder: &dyn Geocoder) -> Result<Resolution> {
    if address.trim().is_empty() {
        return Err(Error::Validation("address must not be empty".into()));
    }
    geocoder.resolve(address)
}

/// Exact-match lookup backed by an `address,zip` CSV.
#[derive(Debug, Clone)]
pub struct OfflineGeocoder {
    by_address: HashMap<String, String>,
    zips: Arc<ZipTable>,
}

#[derive(Deserialize)]
struct GeocoderCsvRow {
    address: String,
    zip: String,
}

impl OfflineGeocoder {
    pub fn new(entries: impl IntoIterator<Item = (String, String)>, zips: Arc<ZipTable>) -> Result<Self> {
        let mut by_address = HashMap::new();
        for (address, zip) in entries {
            if zips.get(&zip).is_none() {
                return Err(Error::Validation(format!(
                    "geocoder entry {address:?} points at unknown zip {zip}"
                )));
            }
            by_address.insert(address.trim().to_string(), zip);
        }
        Ok(Self { by_address, zips })
    }

    pub fn from_csv<R: Read>(reader: R, zips: Arc<ZipTable>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for (i, rec) in rdr.deserialize::<GeocoderCsvRow>().enumerate() {
            let row = rec.map_err(|e| Error::parse(format!("geocoder row {}", i + 1), e))?;
            entries.push((row.address, row.zip.trim().to_string()));
        }
        Self::new(entries, zips)
    }

    pub fn load(path: &Path, zips: Arc<ZipTable>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(file, zips)
    }

    pub fn len(&self) -> usize {
        self.by_address.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_address.is_empty()
    }
}

impl Geocoder for OfflineGeocoder {
    fn resolve(&self, address: &str) -> Result<Resolution> {
        Ok(match self.by_address.get(address.trim()) {
            Some(zip) => self
                .zips
                .get(zip)
                .cloned()
                .map_or(Resolution::NotFound, Resolution::Found),
            None => Resolution::NotFound,
        })
    }
}

/// Remote geocoder: `GET <endpoint>?address=<addr>` answering `{"zip": "10001"}`.
/// A 404 or a zip missing from the local table is a not-found; transport errors
/// and other statuses are retryable.
#[derive(Debug, Clone)]
pub struct HttpGeocoder {
    endpoint: String,
    zips: Arc<ZipTable>,
    agent: ureq::Agent,
}

impl HttpGeocoder {
    pub fn new(endpoint: impl Into<String>, zips: Arc<ZipTable>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(10))
            .build();
        Self {
            endpoint: endpoint.into(),
            zips,
            agent,
        }
    }
}

impl Geocoder for HttpGeocoder {
    fn resolve(&self, address: &str) -> Result<Resolution> {
        let resp = match self.agent.get(&self.endpoint).query("address", address).call() {
            Ok(resp) => resp,
            Err(ureq::Error::Status(404, _)) => return Ok(Resolution::NotFound),
            Err(e) => return Err(Error::Backend(format!("geocoder request failed: {e}"))),
        };
        let body = resp
            .into_string()
            .map_err(|e| Error::Backend(format!("geocoder body unreadable: {e}")))?;
        let json: Value = serde_json::from_str(&body)
            .map_err(|e| Error::Backend(format!("geocoder returned invalid JSON: {e}")))?;
        let zip = match json.get("zip") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => format!("{n:0>5}"),
            _ => return Ok(Resolution::NotFound),
        };
        Ok(self
            .zips
            .get(&zip)
            .cloned()
            .map_or(Resolution::NotFound, Resolution::Found))
    }
}

/// Zip boundary polygons, flattened to their vertex lists.
#[derive(Debug, Clone, Default)]
pub struct BoundaryTable {
    vertices: BTreeMap<String, Vec<LatLon>>,
}

impl BoundaryTable {
    pub fn from_vertices(entries: impl IntoIterator<Item = (String, Vec<LatLon>)>) -> Self {
        Self {
            vertices: entries.into_iter().collect(),
        }
    }

    /// Reads a GeoJSON `FeatureCollection` whose features carry a `zip`
    /// property and `Polygon` or `MultiPolygon` geometry. The closing vertex
    /// of each ring (a repeat of its first vertex) is dropped.
    pub fn from_geojson(raw: &[u8]) -> Result<Self> {
        let doc: Value =
            serde_json::from_slice(raw).map_err(|e| Error::parse("boundary file", e))?;
        let features = doc
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::parse("boundary file", "missing features array"))?;

        let mut vertices: BTreeMap<String, Vec<LatLon>> = BTreeMap::new();
        for (i, feature) in features.iter().enumerate() {
            let record = format!("feature {i}");
            let zip = match feature.pointer("/properties/zip") {
                Some(Value::String(s)) => s.trim().to_string(),
                Some(Value::Number(n)) => format!("{n:0>5}"),
                _ => return Err(Error::parse(record, "missing zip property")),
            };
            let geometry = feature
                .get("geometry")
                .ok_or_else(|| Error::parse(record.clone(), "missing geometry"))?;
            let coords = geometry
                .get("coordinates")
                .ok_or_else(|| Error::parse(record.clone(), "missing coordinates"))?;
            let polygons: Vec<&Value> = match geometry.get("type").and_then(Value::as_str) {
                Some("Polygon") => vec![coords],
                Some("MultiPolygon") => coords
                    .as_array()
                    .ok_or_else(|| Error::parse(record.clone(), "bad MultiPolygon"))?
                    .iter()
                    .collect(),
                other => {
                    return Err(Error::parse(record, format!("unsupported geometry {other:?}")))
                }
            };
            let entry = vertices.entry(zip).or_default();
            for polygon in polygons {
                let rings = polygon
                    .as_array()
                    .ok_or_else(|| Error::parse(record.clone(), "bad polygon"))?;
                for ring in rings {
                    let mut pts = parse_ring(ring).ok_or_else(|| Error::parse(record.clone(), "bad ring"))?;
                    if pts.len() > 1 && pts.first() == pts.last() {
                        pts.pop();
                    }
                    entry.extend(pts);
                }
            }
        }
        Ok(Self { vertices })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_geojson(&raw)
    }

    pub fn zips(&self) -> impl Iterator<Item = &str> {
        self.vertices.keys().map(String::as_str)
    }
}

fn parse_ring(ring: &Value) -> Option<Vec<LatLon>> {
    ring.as_array()?
        .iter()
        .map(|pt| {
            let pt = pt.as_array()?;
            // GeoJSON positions are [lon, lat]
            Some(LatLon::new(pt.get(1)?.as_f64()?, pt.first()?.as_f64()?))
        })
        .collect()
}

/// Mean of the zip's boundary vertices (not the area centroid).
pub fn zip_centroid(zip: &str, boundaries: &BoundaryTable) -> Result<LatLon> {
    let pts = boundaries
        .vertices
        .get(zip)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| Error::NotFound(format!("zip {zip} has no boundary")))?;
    let n = pts.len() as f64;
    let (lat, lon) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.lat, b + p.lon));
    Ok(LatLon::new(lat / n, lon / n))
}
