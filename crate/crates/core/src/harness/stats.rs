use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Critical value of the chi-square distribution with one degree of
/// freedom at the 95% level.
pub const CHI2_CRITICAL_95_DF1: f64 = 3.841459;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub significant_95: bool,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("2x2 table has a zero marginal")]
pub struct DegenerateTable;

/// Pearson's chi-square for the table `[[a, b], [c, d]]`, without Yates
/// correction.
pub fn chi_square_2x2(a: u64, b: u64, c: u64, d: u64) -> Result<ChiSquare, DegenerateTable> {
    let [a, b, c, d] = [a, b, c, d].map(|x| x as f64);
    let marginals = [a + b, c + d, a + c, b + d];
    if marginals.contains(&0.0) {
        return Err(DegenerateTable);
    }
    let n = a + b + c + d;
    let diff = a * d - b * c;
    let statistic = n * diff * diff / marginals.iter().product::<f64>();
    Ok(ChiSquare {
        statistic,
        significant_95: statistic > CHI2_CRITICAL_95_DF1,
    })
}
