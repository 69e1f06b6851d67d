//! Synthetic hourly visit data with category structure.
//!
//! Each POI follows its category's base profile (daily and weekly harmonics)
//! scaled by a POI amplitude. On top of that, and only when `noise > 0`:
//! day-level demand swings shared by a category (weight `category_share`) or
//! specific to one POI (the remainder), short event bumps hitting every POI in
//! a spatial cluster, and Poisson sampling. An optional regime shift rescales
//! every POI amplitude from a given day on.
//!
//! With `noise = 0` and no regime shift the series are exactly proportional to
//! their category profile and exactly periodic with a one-week period.

use std::fmt::Write as _;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::io::{format_timestamp, parse_timestamp};
use super::{PoiMetadata, VisitSeriesDataset};
use crate::error::{Error, Result};

const HOURS_PER_WEEK: usize = 168;
/// Day-to-day persistence of demand swings.
const DAY_PERSISTENCE: f64 = 0.7;
/// Log-scale standard deviation of demand swings at `noise = 1`.
const DAY_SWING: f64 = 0.3;
/// Expected event starts per cluster and hour at `noise > 0`.
const EVENT_RATE: f64 = 1.0 / 96.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_pois: usize,
    pub n_categories: usize,
    pub days: usize,
    pub clusters: usize,
    /// Overall stochasticity; 0 gives noiseless, weekly-periodic series.
    pub noise: f64,
    pub regime_shift_day: Option<usize>,
    /// Fraction of day-level demand swings shared across a category.
    pub category_share: f64,
    pub start: DateTime<Utc>,
    pub city: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_pois: 40,
            n_categories: 8,
            days: 90,
            clusters: 5,
            noise: 1.0,
            regime_shift_day: Some(45),
            category_share: 0.7,
            start: parse_timestamp("2020-01-01T00:00:00Z").expect("valid literal"),
            city: "Houston".into(),
        }
    }
}

impl SynthSpec {
    pub const KEYS: [&'static str; 9] = [
        "n_pois",
        "n_categories",
        "days",
        "clusters",
        "noise",
        "regime_shift_day",
        "category_share",
        "start",
        "city",
    ];

    /// Noiseless, shift-free spec: every series is weekly periodic.
    pub fn periodic() -> Self {
        Self {
            noise: 0.0,
            regime_shift_day: None,
            ..Self::default()
        }
    }

    pub fn hours(&self) -> usize {
        self.days * 24
    }

    /// Parses `key = value` lines; `#` starts a comment. Unspecified keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            spec.set(key.trim(), value.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
        }
        match key {
            "n_pois" => self.n_pois = num(key, value)?,
            "n_categories" => self.n_categories = num(key, value)?,
            "days" => self.days = num(key, value)?,
            "clusters" => self.clusters = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "regime_shift_day" => {
                self.regime_shift_day = match value {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "category_share" => self.category_share = num(key, value)?,
            "start" => self.start = parse_timestamp(value).map_err(Error::Config)?,
            "city" => self.city = value.to_string(),
            other => {
                return Err(Error::Config(format!(
                    "unknown synthetic spec key `{other}`; valid keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pois == 0 || self.n_categories == 0 || self.days == 0 || self.clusters == 0 {
            return Err(Error::Config(
                "n_pois, n_categories, days and clusters must be positive".into(),
            ));
        }
        if self.n_categories > self.n_pois {
            return Err(Error::Config(format!(
                "{} categories cannot all be populated by {} POIs",
                self.n_categories, self.n_pois
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.category_share) {
            return Err(Error::Config("category_share must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let shift = self
            .regime_shift_day
            .map_or_else(|| "none".to_string(), |d| d.to_string());
        let _ = writeln!(s, "n_pois = {}", self.n_pois);
        let _ = writeln!(s, "n_categories = {}", self.n_categories);
        let _ = writeln!(s, "days = {}", self.days);
        let _ = writeln!(s, "clusters = {}", self.clusters);
        let _ = writeln!(s, "noise = {}", self.noise);
        let _ = writeln!(s, "regime_shift_day = {shift}");
        let _ = writeln!(s, "category_share = {}", self.category_share);
        let _ = writeln!(s, "start = {}", format_timestamp(self.start));
        let _ = writeln!(s, "city = {}", self.city);
        s
    }
}

struct CategoryKind {
    top: &'static str,
    sub: &'static str,
    nouns: &'static [&'static str],
    hours: &'static str,
}

const CATALOG: &[CategoryKind] = &[
    CategoryKind {
        top: "Restaurants and Other Eating Places",
        sub: "Full-Service Restaurants",
        nouns: &["Grill", "Bistro", "Kitchen", "Diner"],
        hours: "Monday - Sunday: 11:00 - 22:00",
    },
    CategoryKind {
        top: "Gasoline Stations",
        sub: "Gasoline Stations with Convenience Stores",
        nouns: &["Fuel", "Gas", "Petro", "Express"],
        hours: "Monday - Sunday: 00:00 - 24:00",
    },
    CategoryKind {
        top: "Lessors of Real Estate",
        sub: "Malls",
        nouns: &["Mall", "Galleria", "Plaza", "Center"],
        hours: "Monday - Saturday: 10:00 - 21:00, Sunday: 12:00 - 18:00",
    },
    CategoryKind {
        top: "Spectator Sports",
        sub: "Sports Teams and Clubs",
        nouns: &["Stadium", "Arena", "Field", "Park"],
        hours: "Event days only",
    },
    CategoryKind {
        top: "Grocery Stores",
        sub: "Supermarkets and Other Grocery Stores",
        nouns: &["Market", "Grocers", "Foods", "Pantry"],
        hours: "Monday - Sunday: 07:00 - 23:00",
    },
    CategoryKind {
        top: "Elementary and Secondary Schools",
        sub: "Elementary and Secondary Schools",
        nouns: &["Elementary", "Academy", "High School", "Prep"],
        hours: "Monday - Friday: 07:30 - 16:00, closed on weekends",
    },
    CategoryKind {
        top: "Museums, Historical Sites, and Similar Institutions",
        sub: "Museums",
        nouns: &["Museum", "Gallery", "Exhibit", "Heritage Center"],
        hours: "Tuesday - Sunday: 10:00 - 17:00, closed on Monday",
    },
    CategoryKind {
        top: "Fitness and Recreational Sports Centers",
        sub: "Fitness Centers",
        nouns: &["Gym", "Fitness", "Athletic Club", "Studio"],
        hours: "Monday - Sunday: 05:00 - 23:00",
    },
    CategoryKind {
        top: "Coffee Shops",
        sub: "Snack and Nonalcoholic Beverage Bars",
        nouns: &["Coffee", "Espresso Bar", "Roasters", "Cafe"],
        hours: "Monday - Sunday: 06:00 - 18:00",
    },
    CategoryKind {
        top: "Hotels",
        sub: "Hotels and Motels",
        nouns: &["Inn", "Suites", "Hotel", "Lodge"],
        hours: "Monday - Sunday: 00:00 - 24:00",
    },
    CategoryKind {
        top: "Pharmacies and Drug Stores",
        sub: "Pharmacies and Drug Stores",
        nouns: &["Pharmacy", "Drugs", "Apothecary", "Health Mart"],
        hours: "Monday - Saturday: 08:00 - 21:00, Sunday: 10:00 - 18:00",
    },
    CategoryKind {
        top: "Religious Organizations",
        sub: "Religious Organizations",
        nouns: &["Church", "Chapel", "Temple", "Fellowship"],
        hours: "Sunday: 08:00 - 13:00",
    },
];

const PREFIXES: &[&str] = &[
    "Golden", "Maple", "Riverside", "Bayou", "Lone Star", "Heights", "Memorial", "Galleria",
    "Midtown", "Montrose", "Uptown", "Westchase", "Eastwood", "Sunset", "Cypress", "Oak",
];
const STREETS: &[&str] = &[
    "Westheimer Rd", "Main St", "Richmond Ave", "Kirby Dr", "Shepherd Dr", "Washington Ave",
    "Bellaire Blvd", "Montrose Blvd", "Memorial Dr", "Fannin St",
];

/// Mean-one log-harmonic profile of one category over a week.
struct Profile {
    daily: [(f64, f64); 2],
    weekly: (f64, f64),
    norm: f64,
}

impl Profile {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        use std::f64::consts::TAU;
        let daily = [
            (rng.random_range(0.5..0.9), rng.random_range(0.0..TAU)),
            (rng.random_range(0.1..0.35), rng.random_range(0.0..TAU)),
        ];
        let weekly = (rng.random_range(0.1..0.3), rng.random_range(0.0..TAU));
        let mut p = Self {
            daily,
            weekly,
            norm: 1.0,
        };
        p.norm = (0..HOURS_PER_WEEK).map(|h| p.raw(h)).sum::<f64>() / HOURS_PER_WEEK as f64;
        p
    }

    fn raw(&self, hour: usize) -> f64 {
        use std::f64::consts::TAU;
        let h = (hour % HOURS_PER_WEEK) as f64;
        let [(a1, p1), (a2, p2)] = self.daily;
        let (b, q) = self.weekly;
        (a1 * (TAU * h / 24.0 + p1).cos() + a2 * (2.0 * TAU * h / 24.0 + p2).cos()
            + b * (TAU * h / HOURS_PER_WEEK as f64 + q).cos())
        .exp()
    }

    fn at(&self, hour: usize) -> f64 {
        self.raw(hour) / self.norm
    }
}

/// AR(1) sequence of log-scale day factors.
fn day_swings(rng: &mut ChaCha8Rng, days: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; days];
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let innovation = (1.0 - DAY_PERSISTENCE * DAY_PERSISTENCE).sqrt();
    let mut out = Vec::with_capacity(days);
    let mut f = normal.sample(rng);
    for _ in 0..days {
        out.push(f);
        f = DAY_PERSISTENCE * f + innovation * normal.sample(rng);
    }
    out
}

/// Generates a dataset and matching metadata. Identical `(spec, seed)` pairs
/// give identical output.
pub fn generate_synthetic(
    spec: &SynthSpec,
    seed: u64,
) -> Result<(VisitSeriesDataset, Vec<PoiMetadata>)> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut layout_rng = ChaCha8Rng::from_rng(&mut master);
    let mut swing_rng = ChaCha8Rng::from_rng(&mut master);
    let mut event_rng = ChaCha8Rng::from_rng(&mut master);
    let mut sample_rng = ChaCha8Rng::from_rng(&mut master);

    let hours = spec.hours();
    let n = spec.n_pois;
    let kinds: Vec<usize> = (0..spec.n_categories).map(|k| k % CATALOG.len()).collect();
    let category_names: Vec<String> = (0..spec.n_categories)
        .map(|k| {
            let base = CATALOG[kinds[k]].top;
            match k / CATALOG.len() {
                0 => base.to_string(),
                r => format!("{base} {}", r + 1),
            }
        })
        .collect();
    let profiles: Vec<Profile> = (0..spec.n_categories)
        .map(|_| Profile::random(&mut layout_rng))
        .collect();

    // Spatial layout around the city centre (roughly central Houston).
    let (lat0, lon0) = (29.7604, -95.3698);
    let centers: Vec<(f64, f64)> = (0..spec.clusters)
        .map(|_| {
            (
                lat0 + layout_rng.random_range(-0.08..0.08),
                lon0 + layout_rng.random_range(-0.08..0.08),
            )
        })
        .collect();
    let spread = Normal::new(0.0, 0.004).expect("positive sigma");

    let mut category = Vec::with_capacity(n);
    let mut cluster = Vec::with_capacity(n);
    let mut amplitude = Vec::with_capacity(n);
    let mut metadata = Vec::with_capacity(n);
    let mut used_names = std::collections::HashSet::new();
    for i in 0..n {
        let k = if i < spec.n_categories {
            i
        } else {
            layout_rng.random_range(0..spec.n_categories)
        };
        let c = layout_rng.random_range(0..spec.clusters);
        let amp = (layout_rng.random_range(12f64.ln()..70f64.ln())).exp();
        let kind = &CATALOG[kinds[k]];
        let mut name = format!(
            "{} {}",
            PREFIXES[layout_rng.random_range(0..PREFIXES.len())],
            kind.nouns[layout_rng.random_range(0..kind.nouns.len())]
        );
        if !used_names.insert(name.clone()) {
            name = format!("{name} #{}", i + 1);
            used_names.insert(name.clone());
        }
        let address = format!(
            "{} {}, {}, TX, {}",
            layout_rng.random_range(100..9999),
            STREETS[layout_rng.random_range(0..STREETS.len())],
            spec.city,
            layout_rng.random_range(77001..77099)
        );
        let (clat, clon) = centers[c];
        metadata.push(PoiMetadata {
            poi_id: format!("poi_{i:03}"),
            name,
            address,
            hours: kind.hours.to_string(),
            phone: format!("(713)555-{:04}", layout_rng.random_range(0..10000)),
            top_category: category_names[k].clone(),
            sub_category: kind.sub.to_string(),
            latitude: clat + spread.sample(&mut layout_rng),
            longitude: clon + spread.sample(&mut layout_rng),
        });
        category.push(k);
        cluster.push(c);
        amplitude.push(amp);
    }
    let shift_factor: Vec<f64> = (0..n).map(|_| layout_rng.random_range(0.6..1.4)).collect();

    let sigma_shared = DAY_SWING * spec.noise * spec.category_share;
    let sigma_own = DAY_SWING * spec.noise * (1.0 - spec.category_share);
    let shared: Vec<Vec<f64>> = (0..spec.n_categories)
        .map(|_| day_swings(&mut swing_rng, spec.days, sigma_shared))
        .collect();
    let own: Vec<Vec<f64>> = (0..n)
        .map(|_| day_swings(&mut swing_rng, spec.days, sigma_own))
        .collect();

    // Event envelopes per cluster, in units of a POI's mean level.
    let mut events = vec![vec![0.0; hours]; spec.clusters];
    if spec.noise > 0.0 {
        for bumps in &mut events {
            for start in 0..hours {
                if event_rng.random::<f64>() >= EVENT_RATE {
                    continue;
                }
                let duration = event_rng.random_range(3..=8usize);
                let magnitude = event_rng.random_range(0.4..1.2) * spec.noise;
                for d in 0..duration {
                    if start + d >= hours {
                        break;
                    }
                    let phase = (d as f64 + 0.5) / duration as f64;
                    bumps[start + d] += magnitude * (std::f64::consts::PI * phase).sin();
                }
            }
        }
    }

    let mut visits = Vec::with_capacity(n);
    for i in 0..n {
        let profile = &profiles[category[i]];
        let mut series = Vec::with_capacity(hours);
        for t in 0..hours {
            let day = t / 24;
            let amp = match spec.regime_shift_day {
                Some(d) if day >= d => amplitude[i] * shift_factor[i],
                _ => amplitude[i],
            };
            let swing = (shared[category[i]][day] + own[i][day]).exp();
            let lambda = amp * profile.at(t) * swing + amp * events[cluster[i]][t];
            let value = if spec.noise == 0.0 {
                lambda
            } else {
                let draw = Poisson::new(lambda)
                    .map(|p| p.sample(&mut sample_rng))
                    .unwrap_or(0.0);
                (lambda + spec.noise * (draw - lambda)).round().max(0.0)
            };
            series.push(value);
        }
        visits.push(series);
    }
    let ids = metadata.iter().map(|m| m.poi_id.clone()).collect();
    let ds = VisitSeriesDataset::new(ids, spec.start, visits)?;
    Ok((ds, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let (ds, meta) = generate_synthetic(&SynthSpec::default(), 1).unwrap();
        assert_eq!(ds.n_pois(), 40);
        assert_eq!(ds.len(), 2160);
        assert_eq!(meta.len(), 40);
        let cats: std::collections::HashSet<_> = meta.iter().map(|m| &m.top_category).collect();
        assert_eq!(cats.len(), 8);
        assert!(meta.iter().all(|m| m.validate().is_ok()));
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SynthSpec {
            days: 10,
            ..Default::default()
        };
        assert_eq!(
            generate_synthetic(&spec, 9).unwrap(),
            generate_synthetic(&spec, 9).unwrap()
        );
        assert_ne!(
            generate_synthetic(&spec, 9).unwrap().0,
            generate_synthetic(&spec, 10).unwrap().0
        );
    }

    #[test]
    fn noiseless_is_proportional_and_weekly_periodic() {
        let spec = SynthSpec {
            days: 21,
            ..SynthSpec::periodic()
        };
        let (ds, meta) = generate_synthetic(&spec, 3).unwrap();
        for i in 0..ds.n_pois() {
            let s = ds.series(i);
            for t in HOURS_PER_WEEK..s.len() {
                assert!((s[t] - s[t - HOURS_PER_WEEK]).abs() < 1e-9);
            }
            for j in 0..ds.n_pois() {
                if meta[i].top_category != meta[j].top_category {
                    continue;
                }
                let ratio = ds.series(j)[0] / s[0];
                for t in 0..s.len() {
                    assert!((ds.series(j)[t] - ratio * s[t]).abs() < 1e-9 * s[t].max(1.0));
                }
            }
        }
    }

    #[test]
    fn noisy_counts_are_non_negative_integers() {
        let spec = SynthSpec {
            days: 14,
            ..Default::default()
        };
        let (ds, _) = generate_synthetic(&spec, 5).unwrap();
        assert!(ds.visits().iter().flatten().all(|v| *v >= 0.0 && v.fract() == 0.0));
    }

    #[test]
    fn parse_and_print() {
        let spec = SynthSpec::parse("n_pois = 12\n# comment\nregime_shift_day = none\nnoise=0.5").unwrap();
        assert_eq!(spec.n_pois, 12);
        assert_eq!(spec.regime_shift_day, None);
        assert_eq!(spec.noise, 0.5);
        assert_eq!(SynthSpec::parse(&spec.to_text()).unwrap(), spec);
        let err = SynthSpec::parse("n_poi = 3").unwrap_err().to_string();
        assert!(err.contains("valid keys") && err.contains("regime_shift_day"));
    }
}
