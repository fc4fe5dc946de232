//! Electricity vulnerability index.
//!
//! Seven per-zip features are min-max normalised over all zips and summed
//! with equal weight. Sorting the sums gives the zip code ranking (ZCR,
//! 1 = most vulnerable); ordering the live outages by the ZCR of their zip
//! gives the overall severity ranking (OSR). Marker colours follow the ZCR
//! in bands of fifty.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geo::is_valid_zip;
use crate::time::Timestamp;
use crate::{Error, Result};

pub const FEATURE_COUNT: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    PctElderly,
    CoolingCenters,
    AffordableBuildings,
    AffordableUnits,
    PctBelowPoverty,
    ChildrenUnderFive,
    AvgCaregivers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FeatureKind {
    Fraction,
    Count,
    NonNegative,
}

impl Feature {
    pub const ALL: [Feature; FEATURE_COUNT] = [
        Feature::PctElderly,
        Feature::CoolingCenters,
        Feature::AffordableBuildings,
        Feature::AffordableUnits,
        Feature::PctBelowPoverty,
        Feature::ChildrenUnderFive,
        Feature::AvgCaregivers,
    ];

    pub fn column(self) -> &'static str {
        match self {
            Feature::PctElderly => "pct_elderly",
            Feature::CoolingCenters => "cooling_centers",
            Feature::AffordableBuildings => "affordable_buildings",
            Feature::AffordableUnits => "affordable_units",
            Feature::PctBelowPoverty => "pct_below_poverty",
            Feature::ChildrenUnderFive => "children_under_five",
            Feature::AvgCaregivers => "avg_caregivers",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn kind(self) -> FeatureKind {
        match self {
            Feature::PctElderly | Feature::PctBelowPoverty => FeatureKind::Fraction,
            Feature::AvgCaregivers => FeatureKind::NonNegative,
            _ => FeatureKind::Count,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

/// Raw features of one zip. `None` marks a missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipFeatureRow {
    pub zip: String,
    pub values: [Option<f64>; FEATURE_COUNT],
}

impl ZipFeatureRow {
    pub fn new(zip: impl Into<String>, values: [Option<f64>; FEATURE_COUNT]) -> Self {
        Self {
            zip: zip.into(),
            values,
        }
    }

    pub fn complete(zip: impl Into<String>, values: [f64; FEATURE_COUNT]) -> Self {
        Self::new(zip, values.map(Some))
    }

    pub fn get(&self, feature: Feature) -> Option<f64> {
        self.values[feature.index()]
    }

    pub fn missing(&self) -> Vec<Feature> {
        Feature::ALL
            .into_iter()
            .filter(|f| self.get(*f).is_none())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !is_valid_zip(&self.zip) {
            return Err(Error::Validation(format!("zip {:?} is not five digits", self.zip)));
        }
        for f in Feature::ALL {
            let Some(v) = self.get(f) else { continue };
            let ok = match f.kind() {
                FeatureKind::Fraction => (0.0..=1.0).contains(&v),
                FeatureKind::Count => v >= 0.0 && v.fract() == 0.0,
                FeatureKind::NonNegative => v >= 0.0 && v.is_finite(),
            };
            if !ok {
                return Err(Error::Validation(format!(
                    "zip {}: {} = {v} is out of range",
                    self.zip, f
                )));
            }
        }
        Ok(())
    }
}

/// Reads `zip,pct_elderly,cooling_centers,...,avg_caregivers`; empty cells
/// are missing values.
pub fn read_feature_csv<R: Read>(reader: R) -> Result<Vec<ZipFeatureRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::parse("feature header", e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::parse("feature header", format!("missing column {name}")))
    };
    let zip_col = find("zip")?;
    let cols = Feature::ALL
        .iter()
        .map(|f| find(f.column()))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(format!("feature row {}", i + 2), e))?;
        let zip = rec.get(zip_col).unwrap_or("").trim().to_string();
        let mut values = [None; FEATURE_COUNT];
        for (slot, (&col, f)) in values.iter_mut().zip(cols.iter().zip(Feature::ALL)) {
            let cell = rec.get(col).unwrap_or("").trim();
            if !cell.is_empty() {
                *slot = Some(cell.parse::<f64>().map_err(|e| {
                    Error::parse(format!("zip {zip}"), format!("{f}: {e}"))
                })?);
            }
        }
        let row = ZipFeatureRow { zip, values };
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_feature_csv(path: &Path) -> Result<Vec<ZipFeatureRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_feature_csv(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub zip: String,
    pub values: [f64; FEATURE_COUNT],
    /// Features that were missing and imputed with the column minimum.
    pub imputed: Vec<Feature>,
}

/// Min-max normalises every feature column to [0, 1].
///
/// Missing values take the column minimum (so they normalise to 0). A
/// column with no spread, or with no values at all, normalises to 0.
pub fn normalize_features(rows: &[ZipFeatureRow]) -> Result<Vec<NormalizedRow>> {
    if rows.is_empty() {
        return Err(Error::InsufficientData {
            what: "feature rows",
            required: 1,
            actual: 0,
        });
    }
    let mut lo = [f64::INFINITY; FEATURE_COUNT];
    let mut hi = [f64::NEG_INFINITY; FEATURE_COUNT];
    for row in rows {
        for (j, v) in row.values.iter().enumerate() {
            if let Some(v) = *v {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
    }

    Ok(rows
        .iter()
        .map(|row| {
            let mut values = [0.0; FEATURE_COUNT];
            for j in 0..FEATURE_COUNT {
                let range = hi[j] - lo[j];
                values[j] = match row.values[j] {
                    Some(v) if range > 0.0 => (v - lo[j]) / range,
                    _ => 0.0,
                };
            }
            NormalizedRow {
                zip: row.zip.clone(),
                values,
                imputed: row.missing(),
            }
        })
        .collect())
}

/// Score resolution. Each normalised feature is rounded to this grid and
/// summed as an integer, so equal feature sums give bit-equal scores no
/// matter how the inputs were scaled.
pub const SCORE_RESOLUTION: f64 = 1e-9;

/// Equally weighted sum of the normalised features, in [0, 7].
pub fn composite_score(values: &[f64; FEATURE_COUNT]) -> f64 {
    let units: i64 = values.iter().map(|v| (v / SCORE_RESOLUTION).round() as i64).sum();
    units as f64 * SCORE_RESOLUTION
}

/// Zip code ranking: 1 for the highest score, ties broken by ascending zip.
pub fn rank_zipcodes(scores: &BTreeMap<String, f64>) -> Result<BTreeMap<String, u32>> {
    if scores.is_empty() {
        return Err(Error::InsufficientData {
            what: "scored zips",
            required: 1,
            actual: 0,
        });
    }
    if let Some((zip, _)) = scores.iter().find(|(_, s)| s.is_nan()) {
        return Err(Error::Validation(format!("score of zip {zip} is NaN")));
    }
    let mut order: Vec<(&String, f64)> = scores.iter().map(|(z, s)| (z, *s)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, (zip, _))| (zip.clone(), i as u32 + 1))
        .collect())
}

/// A live outage as seen by the severity ranking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveOutage {
    pub id: i64,
    pub zip: String,
    pub reported_at: Timestamp,
}

/// Overall severity ranking of the live outages: by ascending ZCR of their
/// zip, then earlier reports first, then ascending id.
pub fn rank_current_outages(
    current: &[LiveOutage],
    zcr: &BTreeMap<String, u32>,
) -> Result<BTreeMap<i64, u32>> {
    let mut keyed = Vec::with_capacity(current.len());
    for o in current {
        let rank = zcr
            .get(&o.zip)
            .ok_or_else(|| Error::NotFound(format!("zip {} has no vulnerability ranking", o.zip)))?;
        keyed.push((*rank, o.reported_at, o.id));
    }
    keyed.sort();
    Ok(keyed
        .into_iter()
        .enumerate()
        .map(|(i, (_, _, id))| (id, i as u32 + 1))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Orange,
    Yellow,
    Green,
    Blue,
}

impl Color {
    pub fn as_str(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Orange => "orange",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
}

pub fn color_band(zcr: u32) -> Result<Color> {
    Ok(match zcr {
        0 => return Err(Error::Validation("zip code ranks start at 1".into())),
        1..=50 => Color::Red,
        51..=100 => Color::Orange,
        101..=150 => Color::Yellow,
        151..=200 => Color::Green,
        _ => Color::Blue,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityRanking {
    pub zip: String,
    pub score: f64,
    pub zcr: u32,
    pub color: Color,
    pub imputed: Vec<Feature>,
}

/// Rankings for every zip in a feature table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityIndex {
    pub zip_count: usize,
    /// Ordered by ZCR.
    pub rankings: Vec<VulnerabilityRanking>,
}

impl VulnerabilityIndex {
    pub fn build(rows: &[ZipFeatureRow]) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = rows.iter().find(|r| !seen.insert(r.zip.as_str())) {
            return Err(Error::Validation(format!("duplicate zip {} in feature table", dup.zip)));
        }
        let normalized = normalize_features(rows)?;
        let scores: BTreeMap<String, f64> = normalized
            .iter()
            .map(|r| (r.zip.clone(), composite_score(&r.values)))
            .collect();
        let ranks = rank_zipcodes(&scores)?;
        let mut rankings = normalized
            .into_iter()
            .map(|r| {
                let zcr = ranks[&r.zip];
                Ok(VulnerabilityRanking {
                    score: scores[&r.zip],
                    color: color_band(zcr)?,
                    zcr,
                    zip: r.zip,
                    imputed: r.imputed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rankings.sort_by_key(|r| r.zcr);
        Ok(Self {
            zip_count: rankings.len(),
            rankings,
        })
    }

    pub fn zcr_map(&self) -> BTreeMap<String, u32> {
        self.rankings.iter().map(|r| (r.zip.clone(), r.zcr)).collect()
    }

    pub fn get(&self, zip: &str) -> Option<&VulnerabilityRanking> {
        self.rankings.iter().find(|r| r.zip == zip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time;

    fn single_column(values: &[f64]) -> Vec<f64> {
        let rows: Vec<ZipFeatureRow> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut vals = [Some(0.0); FEATURE_COUNT];
                vals[1] = Some(*v);
                ZipFeatureRow::new(format!("{:05}", 10000 + i), vals)
            })
            .collect();
        normalize_features(&rows)
            .unwrap()
            .iter()
            .map(|r| r.values[1])
            .collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(single_column(&[10.0, 20.0, 30.0]), [0.0, 0.5, 1.0]);
        assert_eq!(single_column(&[5.0, 5.0, 5.0]), [0.0, 0.0, 0.0]);
        assert_eq!(single_column(&[2.0, 4.0, 6.0, 6.0]), [0.0, 0.5, 1.0, 1.0]);
        assert!(normalize_features(&[]).is_err());
    }

    #[test]
    fn missing_values_impute_to_zero_and_are_flagged() {
        let mut a = [Some(1.0); FEATURE_COUNT];
        a[0] = Some(0.2);
        let mut b = [Some(3.0); FEATURE_COUNT];
        b[0] = None;
        let rows = vec![ZipFeatureRow::new("10001", a), ZipFeatureRow::new("10002", b)];
        let n = normalize_features(&rows).unwrap();
        assert_eq!(n[1].values[0], 0.0);
        assert_eq!(n[1].imputed, vec![Feature::PctElderly]);
        assert!(n[0].imputed.is_empty());
        assert_eq!(n[1].values[1], 1.0);
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_score(&[0.0; 7]), 0.0);
        assert_eq!(composite_score(&[1.0; 7]), 7.0);
        assert_eq!(composite_score(&[0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]), 1.0);
    }

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(z, s)| (z.to_string(), *s)).collect()
    }

    #[test]
    fn rank_examples() {
        let r = rank_zipcodes(&scores(&[("A", 0.9), ("B", 0.5), ("C", 0.7)])).unwrap();
        assert_eq!((r["A"], r["C"], r["B"]), (1, 2, 3));
        let r = rank_zipcodes(&scores(&[("10002", 1.5), ("10001", 1.5)])).unwrap();
        assert_eq!((r["10001"], r["10002"]), (1, 2));
        let r = rank_zipcodes(&scores(&[("10001", 0.0)])).unwrap();
        assert_eq!(r["10001"], 1);
        assert!(rank_zipcodes(&BTreeMap::new()).is_err());
    }

    #[test]
    fn osr_examples() {
        let t = |s: &str| time::parse(s).unwrap();
        let zcr: BTreeMap<String, u32> = [("a", 5), ("b", 1), ("c", 100)]
            .iter()
            .map(|(z, r)| (z.to_string(), *r))
            .collect();
        let live = |id, zip: &str, at: &str| LiveOutage {
            id,
            zip: zip.into(),
            reported_at: t(at),
        };
        let osr = rank_current_outages(
            &[
                live(1, "a", "2021-01-01T00:00:00Z"),
                live(2, "b", "2021-01-01T00:00:00Z"),
                live(3, "c", "2021-01-01T00:00:00Z"),
            ],
            &zcr,
        )
        .unwrap();
        assert_eq!((osr[&1], osr[&2], osr[&3]), (2, 1, 3));

        let osr = rank_current_outages(&[live(7, "c", "2021-01-01T00:00:00Z")], &zcr).unwrap();
        assert_eq!(osr[&7], 1);

        let osr = rank_current_outages(
            &[live(1, "a", "2021-01-01T09:00:00Z"), live(2, "a", "2021-01-01T08:00:00Z")],
            &zcr,
        )
        .unwrap();
        assert_eq!((osr[&1], osr[&2]), (2, 1));

        let err = rank_current_outages(&[live(1, "zz", "2021-01-01T09:00:00Z")], &zcr).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn color_bands() {
        assert_eq!(color_band(1).unwrap(), Color::Red);
        assert_eq!(color_band(50).unwrap(), Color::Red);
        assert_eq!(color_band(51).unwrap(), Color::Orange);
        assert_eq!(color_band(100).unwrap(), Color::Orange);
        assert_eq!(color_band(101).unwrap(), Color::Yellow);
        assert_eq!(color_band(150).unwrap(), Color::Yellow);
        assert_eq!(color_band(151).unwrap(), Color::Green);
        assert_eq!(color_band(200).unwrap(), Color::Green);
        assert_eq!(color_band(201).unwrap(), Color::Blue);
        assert_eq!(color_band(u32::MAX).unwrap(), Color::Blue);
        assert!(color_band(0).is_err());
        assert_eq!(serde_json::to_string(&Color::Red).unwrap(), "\"red\"");
    }

    #[test]
    fn reads_csv_with_missing_cells() {
        let csv = "zip,pct_elderly,cooling_centers,affordable_buildings,affordable_units,pct_below_poverty,children_under_five,avg_caregivers\n\
                   10001,0.12,2,10,400,0.2,800,1.5\n\
                   10002,,0,3,,0.3,500,2.0\n";
        let rows = read_feature_csv(csv.as_bytes()).unwrap();
        assert_eq!(rows[1].missing(), vec![Feature::PctElderly, Feature::AffordableUnits]);
        let bad = csv.replace("0.12", "1.2");
        assert!(read_feature_csv(bad.as_bytes()).is_err());
        let frac_count = csv.replace(",2,10,", ",2.5,10,");
        assert!(read_feature_csv(frac_count.as_bytes()).is_err());
    }

    #[test]
    fn index_rejects_duplicate_zip() {
        let rows = vec![
            ZipFeatureRow::complete("10001", [0.1; 7]),
            ZipFeatureRow::complete("10001", [0.2; 7]),
        ];
        assert!(VulnerabilityIndex::build(&rows).is_err());
    }

    use proptest::prelude::*;

    fn table_strategy() -> impl Strategy<Value = Vec<ZipFeatureRow>> {
        prop::collection::vec(prop::array::uniform7(0.0f64..100.0), 1..30).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, v)| ZipFeatureRow::complete(format!("{:05}", 10000 + i * 7), v))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant(rows in table_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let base = VulnerabilityIndex::build(&rows).unwrap();
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let other = VulnerabilityIndex::build(&shuffled).unwrap();
            prop_assert_eq!(base, other);
        }

        #[test]
        fn zcr_is_bijection(rows in table_strategy()) {
            let idx = VulnerabilityIndex::build(&rows).unwrap();
            let mut ranks: Vec<u32> = idx.rankings.iter().map(|r| r.zcr).collect();
            ranks.sort_unstable();
            prop_assert_eq!(ranks, (1..=rows.len() as u32).collect::<Vec<_>>());
            for r in &idx.rankings {
                prop_assert!((0.0..=7.0).contains(&r.score));
                prop_assert_eq!(r.color, color_band(r.zcr).unwrap());
            }
        }

        #[test]
        fn raising_a_feature_never_lowers_the_score(
            rows in table_strategy(),
            pick in any::<prop::sample::Index>(),
            col in 0usize..FEATURE_COUNT,
            bump in 0.0f64..50.0,
        ) {
            let i = pick.index(rows.len());
            let max = rows.iter().filter_map(|r| r.values[col]).fold(f64::MIN, f64::max);
            let v = rows[i].values[col].unwrap();
            prop_assume!(v < max);
            let before = normalize_features(&rows).unwrap();
            let mut raised = rows.clone();
            raised[i].values[col] = Some(v + bump);
            let after = normalize_features(&raised).unwrap();
            prop_assert!(composite_score(&after[i].values) >= composite_score(&before[i].values) - 1e-12);
        }
    }
}
