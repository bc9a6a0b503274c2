use super::clean::{repair_series, RepairMode};
use crate::error::{Error, Result};

/// Open-ended age band as published in the county vaccination feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgeBand {
    Plus12,
    Plus18,
    Plus65,
}

impl AgeBand {
    pub fn from_age(age: u8) -> Option<AgeBand> {
        match age {
            12 => Some(AgeBand::Plus12),
            18 => Some(AgeBand::Plus18),
            65 => Some(AgeBand::Plus65),
            _ => None,
        }
    }

    fn label(self) -> &'static str {
        match self {
            AgeBand::Plus12 => "12+",
            AgeBand::Plus18 => "18+",
            AgeBand::Plus65 => "65+",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoseScheme {
    FirstDose,
    Complete,
}

/// Cumulative counts per open-ended band for one dose scheme. Missing days are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BandCounts {
    pub plus12: Vec<Option<f64>>,
    pub plus18: Vec<Option<f64>>,
    pub plus65: Vec<Option<f64>>,
}

impl BandCounts {
    fn band(&self, band: AgeBand) -> &[Option<f64>] {
        match band {
            AgeBand::Plus12 => &self.plus12,
            AgeBand::Plus18 => &self.plus18,
            AgeBand::Plus65 => &self.plus65,
        }
    }
}

/// Raw cumulative vaccination counts of one county plus census populations per band.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVaxCounts {
    pub first_dose: BandCounts,
    pub complete: BandCounts,
    /// Census population of the 12+, 18+ and 65+ bands.
    pub population: [f64; 3],
}

impl RawVaxCounts {
    fn population(&self, band: AgeBand) -> f64 {
        match band {
            AgeBand::Plus12 => self.population[0],
            AgeBand::Plus18 => self.population[1],
            AgeBand::Plus65 => self.population[2],
        }
    }
}

/// Vaccination rate (percent) for the band `[lb, ub)` derived from open-ended bands.
///
/// Each open-ended count series is repaired (gaps interpolated, running
/// maximum enforced) before the subtraction, so a reporting glitch in one
/// band does not leak into the derived band.
pub fn age_band_rate(raw: &RawVaxCounts, lb: u8, ub: Option<u8>, scheme: DoseScheme) -> Result<Vec<f64>> {
    let invalid = || Error::InvalidAgeBand { lb, ub };
    let lower = AgeBand::from_age(lb).ok_or_else(invalid)?;
    let upper = match ub {
        None => None,
        Some(u) if u > lb && u != 12 => Some(AgeBand::from_age(u).ok_or_else(invalid)?),
        Some(_) => return Err(invalid()),
    };
    let counts = match scheme {
        DoseScheme::FirstDose => &raw.first_dose,
        DoseScheme::Complete => &raw.complete,
    };
    let pop_lower = raw.population(lower);
    if !(pop_lower > 0.0) {
        return Err(Error::NonPositivePopulation(lower.label().into()));
    }
    let count_lower = repair_series(counts.band(lower), RepairMode::Both)?;
    let Some(upper) = upper else {
        return Ok(count_lower.iter().map(|c| 100.0 * c / pop_lower).collect());
    };
    let pop_upper = raw.population(upper);
    if !(pop_upper > 0.0) {
        return Err(Error::NonPositivePopulation(upper.label().into()));
    }
    let pop = pop_lower - pop_upper;
    if !(pop > 0.0) {
        return Err(Error::NonPositivePopulation(format!("{}-{}", lb, ub.unwrap())));
    }
    let count_upper = repair_series(counts.band(upper), RepairMode::Both)?;
    if count_upper.len() != count_lower.len() {
        return Err(Error::LengthMismatch { expected: count_lower.len(), got: count_upper.len() });
    }
    count_lower
        .iter()
        .zip(&count_upper)
        .enumerate()
        .map(|(day, (lo, hi))| {
            let derived = lo - hi;
            if derived < 0.0 {
                Err(Error::NegativeDerivedCount { day, value: derived })
            } else {
                Ok(100.0 * derived / pop)
            }
        })
        .collect()
}
