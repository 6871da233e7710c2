//! Day-ahead scenario data: renewable and load forecasts, prices, the
//! bundled three-microgrid test system and Gaussian forecast-error sampling.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BaParams, CgParams, GridError};

pub const HOURS: usize = 24;

pub type Series = [f64; HOURS];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("expected {HOURS} data rows, found {found}")]
    RowCount { found: usize },
    #[error("row {row}, column `{column}`: {message}")]
    Parse { row: usize, column: String, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("hour {hour}: negative power {value} in `{column}`")]
    NegativePower { hour: usize, column: String, value: f64 },
    #[error("hour {hour}: inter-MG price {price_mg} exceeds distribution price {price_dpn}")]
    PriceOrder { hour: usize, price_mg: f64, price_dpn: f64 },
    #[error("scenario has no microgrid loads")]
    NoLoads,
    #[error("negative noise standard deviation")]
    NegativeStd,
}

/// One day of hourly forecasts. Wind and PV are shared by every microgrid;
/// `loads[m]` is the demand of microgrid `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDay {
    pub wind: Series,
    pub pv: Series,
    pub loads: Vec<Series>,
    /// Price of trading with the distribution network, $/kW.
    pub price_dpn: Series,
    /// Price of trading between microgrids, $/kW.
    pub price_mg: Series,
}

impl ScenarioDay {
    pub fn n_mg(&self) -> usize {
        self.loads.len()
    }

    /// Renewable outputs at `hour` (0-based), in REG order (wind, PV).
    pub fn reg_at(&self, hour: usize) -> [f64; 2] {
        [self.wind[hour], self.pv[hour]]
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.loads.is_empty() {
            return Err(ScenarioError::NoLoads);
        }
        for h in 0..HOURS {
            let mut cols: Vec<(String, f64)> = vec![("wind".into(), self.wind[h]), ("pv".into(), self.pv[h])];
            for (m, load) in self.loads.iter().enumerate() {
                cols.push((format!("load_mg{}", m + 1), load[h]));
            }
            for (column, value) in cols {
                if !(value >= 0.0) {
                    return Err(ScenarioError::NegativePower { hour: h + 1, column, value });
                }
            }
            if !(self.price_mg[h] <= self.price_dpn[h]) {
                return Err(ScenarioError::PriceOrder {
                    hour: h + 1,
                    price_mg: self.price_mg[h],
                    price_dpn: self.price_dpn[h],
                });
            }
        }
        Ok(())
    }

    /// Same day with microgrid `mg`'s load profile multiplied by `factor`.
    pub fn with_scaled_load(&self, mg: usize, factor: f64) -> Self {
        let mut out = self.clone();
        for v in out.loads[mg].iter_mut() {
            *v *= factor;
        }
        out
    }
}

const WIND: Series = [
    51.48, 38.37, 43.56, 40.75, 27.74, 30.15, 28.65, 23.38, 21.75, 34.82, 27.17, 30.20, 23.52, 39.48, 35.74, 18.06,
    24.27, 26.26, 26.77, 26.22, 32.84, 36.02, 37.23, 44.12,
];
const PV: Series = [
    0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.16, 1.77, 5.30, 11.60, 36.64, 42.68, 35.22, 35.46, 34.83, 23.62, 14.18, 4.67,
    0.18, 0.00, 0.00, 0.00, 0.00, 0.00,
];
const PRICE_DPN: Series = [
    8.65, 8.11, 8.25, 8.10, 8.14, 8.13, 8.34, 9.35, 12.00, 9.19, 12.30, 20.70, 26.82, 27.35, 13.81, 17.31, 16.42, 9.83,
    8.63, 8.87, 8.35, 16.44, 16.19, 8.87,
];
const PRICE_MG: Series = [
    4.33, 4.06, 4.13, 4.05, 4.07, 4.07, 4.17, 4.68, 6.00, 4.60, 6.15, 10.35, 13.41, 13.68, 6.91, 8.66, 8.21, 4.92, 4.32,
    4.44, 4.18, 8.22, 8.10, 4.44,
];
const LOAD_MG1: Series = [
    457.70, 336.50, 274.90, 272.60, 245.30, 233.70, 274.60, 291.00, 315.70, 362.40, 320.00, 350.00, 345.20, 320.60,
    333.20, 316.80, 291.30, 413.80, 539.80, 557.20, 557.10, 535.00, 437.80, 447.30,
];
const LOAD_MG2: Series = [
    110.50, 109.85, 112.45, 110.50, 113.75, 120.25, 130.00, 157.95, 165.10, 169.00, 173.55, 168.35, 168.35, 165.75,
    170.30, 172.25, 165.75, 164.25, 162.50, 165.75, 169.00, 161.20, 148.00, 119.60,
];
const LOAD_MG3: Series = [
    124.71, 123.98, 126.91, 124.71, 128.38, 135.43, 146.72, 178.26, 186.33, 190.73, 195.87, 190.00, 190.00, 187.07,
    192.20, 194.40, 187.07, 185.60, 183.40, 187.07, 190.73, 181.93, 161.39, 134.98,
];

/// The bundled 24-hour forecast day for the three-microgrid test system.
pub fn default_scenario() -> ScenarioDay {
    ScenarioDay {
        wind: WIND,
        pv: PV,
        loads: vec![LOAD_MG1, LOAD_MG2, LOAD_MG3],
        price_dpn: PRICE_DPN,
        price_mg: PRICE_MG,
    }
}

/// Dispatchable devices of one microgrid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgDevices {
    pub cgs: Vec<CgParams>,
    pub bas: Vec<BaParams>,
}

impl MgDevices {
    pub fn validate(&self) -> Result<(), GridError> {
        self.cgs.iter().try_for_each(CgParams::validate)?;
        self.bas.iter().try_for_each(BaParams::validate)
    }

    pub fn action_dim(&self) -> usize {
        self.cgs.len() + self.bas.len()
    }

    /// Power bounds in action order: generators first, then batteries.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.cgs
            .iter()
            .map(|c| (c.p_min, c.p_max))
            .chain(self.bas.iter().map(|b| (b.p_min, b.p_max)))
            .collect()
    }

    /// Upper bound on dispatchable output (all generators and batteries at max).
    pub fn max_dispatchable(&self) -> f64 {
        self.cgs.iter().map(|c| c.p_max).sum::<f64>() + self.bas.iter().map(|b| b.p_max).sum::<f64>()
    }
}

/// Device parameters of the three bundled microgrids.
pub fn default_device_params() -> Vec<MgDevices> {
    let mg = |cg: (f64, f64, f64, f64, f64), ba: (f64, f64, f64, f64, f64)| MgDevices {
        cgs: vec![CgParams { a: cg.0, b: cg.1, c: cg.2, p_min: cg.3, p_max: cg.4 }],
        bas: vec![BaParams::with_costs(ba.0, ba.1, ba.2, ba.3, ba.4)],
    };
    vec![
        mg((0.0081, 5.72, 63.0, 0.0, 200.0), (0.0153, 5.54, 26.0, -50.0, 50.0)),
        mg((0.0076, 5.68, 365.0, 0.0, 280.0), (0.0163, 5.64, 32.0, -50.0, 50.0)),
        mg((0.0095, 5.81, 108.0, 0.0, 200.0), (0.0173, 5.74, 38.0, -50.0, 50.0)),
    ]
}

/// Relative Gaussian forecast errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub wind_pv_std: f64,
    pub load_std: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { wind_pv_std: 0.15, load_std: 0.03, seed: 0 }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self { wind_pv_std: 0.0, load_std: 0.0, seed: 0 }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

fn perturb(series: &mut Series, std: f64, rng: &mut ChaCha8Rng) {
    if std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite non-negative std");
    for v in series.iter_mut() {
        let eps: f64 = normal.sample(rng);
        *v = (*v * (1.0 + eps)).max(0.0);
    }
}

/// Draws a realized day: every forecast `x` becomes `max(0, x (1 + eps))`
/// with `eps ~ N(0, std^2)`. Prices are not perturbed.
pub fn sample_realization(day: &ScenarioDay, noise: &NoiseModel) -> Result<ScenarioDay, ScenarioError> {
    if !(noise.wind_pv_std >= 0.0 && noise.load_std >= 0.0) {
        return Err(ScenarioError::NegativeStd);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut out = day.clone();
    perturb(&mut out.wind, noise.wind_pv_std, &mut rng);
    perturb(&mut out.pv, noise.wind_pv_std, &mut rng);
    for load in out.loads.iter_mut() {
        perturb(load, noise.load_std, &mut rng);
    }
    Ok(out)
}

fn header(n_mg: usize) -> Vec<String> {
    let mut h: Vec<String> = ["hour", "wind", "pv", "price_dpn", "price_mg"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=n_mg).map(|m| format!("load_mg{m}")));
    h
}

/// Writes the scenario as CSV: a header row and 24 hourly rows.
pub fn save_scenario(day: &ScenarioDay, path: &Path) -> Result<(), ScenarioError> {
    let io = |source| ScenarioError::Io { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_writer(File::create(path).map_err(io)?);
    w.write_record(header(day.n_mg()))?;
    for h in 0..HOURS {
        let mut row = vec![
            (h + 1).to_string(),
            day.wind[h].to_string(),
            day.pv[h].to_string(),
            day.price_dpn[h].to_string(),
            day.price_mg[h].to_string(),
        ];
        row.extend(day.loads.iter().map(|l| l[h].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(io)?;
    w.into_inner().map_err(|e| io(e.into_error()))?.flush().map_err(io)
}

/// Reads and validates a scenario CSV written by [`save_scenario`] (or by hand).
pub fn load_scenario(path: &Path) -> Result<ScenarioDay, ScenarioError> {
    let file = File::open(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_scenario(file)
}

pub fn parse_scenario<R: std::io::Read>(reader: R) -> Result<ScenarioDay, ScenarioError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| ScenarioError::MissingColumn(name.to_string()))
    };
    let wind_c = col("wind")?;
    let pv_c = col("pv")?;
    let dpn_c = col("price_dpn")?;
    let mg_c = col("price_mg")?;
    let mut load_cols = Vec::new();
    while let Some(i) = headers.iter().position(|h| *h == format!("load_mg{}", load_cols.len() + 1)) {
        load_cols.push(i);
    }
    if load_cols.is_empty() {
        return Err(ScenarioError::MissingColumn("load_mg1".into()));
    }

    let records: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>()?;
    if records.len() != HOURS {
        return Err(ScenarioError::RowCount { found: records.len() });
    }
    let mut day = ScenarioDay {
        wind: [0.0; HOURS],
        pv: [0.0; HOURS],
        loads: vec![[0.0; HOURS]; load_cols.len()],
        price_dpn: [0.0; HOURS],
        price_mg: [0.0; HOURS],
    };
    for (h, rec) in records.iter().enumerate() {
        let get = |c: usize| -> Result<f64, ScenarioError> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| ScenarioError::Parse {
                row: h + 1,
                column: headers[c].clone(),
                message: format!("`{raw}` is not a finite number"),
            })
        };
        day.wind[h] = get(wind_c)?;
        day.pv[h] = get(pv_c)?;
        day.price_dpn[h] = get(dpn_c)?;
        day.price_mg[h] = get(mg_c)?;
        for (m, &c) in load_cols.iter().enumerate() {
            day.loads[m][h] = get(c)?;
        }
    }
    day.validate()?;
    Ok(day)
}
