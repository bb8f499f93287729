//! Gleason reports and their condensation into image-level labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of prostate sextants in a biopsy report.
pub const SEXTANTS: usize = 6;

/// Smallest Gleason sum counted as clinically significant.
pub const SIGNIFICANT_SUM: u8 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Ok,
    Incomplete,
    Inconsistent,
}

/// Per-sextant (primary, secondary) grades; `None` where no grade was reported.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GleasonReport {
    pub study_id: String,
    pub sextants: Vec<Option<(u8, u8)>>,
    pub quality: Quality,
}

/// Why a study is dropped from the labeled dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Exclusion {
    Quality(Quality),
    SextantCount(usize),
    MissingSextants(Vec<usize>),
}

impl std::fmt::Display for Exclusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Exclusion::Quality(q) => write!(f, "quality flag {q:?}"),
            Exclusion::SextantCount(n) => write!(f, "{n} sextant entries instead of {SEXTANTS}"),
            Exclusion::MissingSextants(idx) => write!(f, "missing sextants {idx:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Condensed {
    Label(u8),
    Excluded(Exclusion),
}

fn check_grade(g: u8) -> Result<()> {
    if !(1..=5).contains(&g) {
        return Err(Error::Validation(format!("Gleason grade {g} outside 1..=5")));
    }
    Ok(())
}

/// 1 when `primary + secondary >= 7`.
pub fn gleason_significant(primary: u8, secondary: u8) -> Result<u8> {
    check_grade(primary)?;
    check_grade(secondary)?;
    Ok(u8::from(primary + secondary >= SIGNIFICANT_SUM))
}

/// Image-level label: 1 if any sextant is significant.
///
/// Reports with a non-ok quality flag or without six graded sextants are
/// excluded rather than labeled. Out-of-range grades are an error.
pub fn condense_report(report: &GleasonReport) -> Result<Condensed> {
    for (p, s) in report.sextants.iter().flatten() {
        check_grade(*p)?;
        check_grade(*s)?;
    }
    if report.quality != Quality::Ok {
        return Ok(Condensed::Excluded(Exclusion::Quality(report.quality)));
    }
    if report.sextants.len() != SEXTANTS {
        return Ok(Condensed::Excluded(Exclusion::SextantCount(report.sextants.len())));
    }
    let missing: Vec<usize> = (0..SEXTANTS).filter(|&i| report.sextants[i].is_none()).collect();
    if !missing.is_empty() {
        return Ok(Condensed::Excluded(Exclusion::MissingSextants(missing)));
    }
    let mut label = 0;
    for &(p, s) in report.sextants.iter().flatten() {
        label |= gleason_significant(p, s)?;
    }
    Ok(Condensed::Label(label))
}
