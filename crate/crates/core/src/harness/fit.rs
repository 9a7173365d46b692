//! Least-squares rate fits of `log(F_k − F*)` against `log k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::methods::TraceRecord;

/// Where the reference optimal value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FStarSource {
    /// Closed-form optimum of the problem family.
    Known,
    /// Best value of a high-accuracy reference solve.
    ReferenceRun,
    /// Given explicitly by the user.
    Supplied,
    /// Smallest objective within the trace itself.
    TraceMinimum,
}

/// `(F_{k+1} − F*)/(F_{k−1} − F*)^{(p+1)/2}` at index `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRatio {
    pub k: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub requested_window: [usize; 2],
    /// Window actually fitted, after dropping plateau points.
    pub window: [usize; 2],
    pub points: usize,
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in natural-log units.
    pub residual: f64,
    pub truncation: Option<String>,
    pub order: u32,
    pub superlinear_ratios: Vec<TailRatio>,
    pub f_star: f64,
    pub f_star_source: FStarSource,
}

/// Gaps at or below this are rounding noise.
pub fn plateau_threshold(f_star: f64) -> f64 {
    64.0 * f64::EPSILON * f_star.abs().max(1.0)
}

/// Fits `objectives` (pairs `(k, F_k)`) on `window` (whole series when
/// `None`). The window is cut at the first gap at or below
/// [`plateau_threshold`].
pub fn fit_rate(
    objectives: &[(usize, f64)],
    f_star: f64,
    source: FStarSource,
    window: Option<(usize, usize)>,
    order: u32,
) -> Result<RateFit> {
    if !f_star.is_finite() {
        return Err(Error::contract(format!("F* must be finite, got {f_star}")));
    }
    let series: BTreeMap<usize, f64> = objectives.iter().map(|&(k, f)| (k, f - f_star)).collect();
    let last_k = series.keys().next_back().copied().unwrap_or(0);
    let (lo, hi) = window.unwrap_or((1, last_k));
    let lo = lo.max(1);
    if lo > hi {
        return Err(Error::contract(format!("empty fit window [{lo}, {hi}]")));
    }

    let threshold = plateau_threshold(f_star);
    let mut kept: Vec<(usize, f64)> = Vec::new();
    let mut truncation = None;
    for (&k, &gap) in series.range(lo..=hi) {
        if !(gap > threshold) {
            truncation = Some(format!(
                "gap {gap:e} at k = {k} is at the precision plateau ({threshold:e}); window cut to k < {k}"
            ));
            break;
        }
        kept.push((k, gap));
    }
    if kept.len() < 2 {
        return Err(Error::contract(format!(
            "need at least two points with F > F* in [{lo}, {hi}], found {}",
            kept.len()
        )));
    }

    let xs: Vec<f64> = kept.iter().map(|&(k, _)| (k as f64).ln()).collect();
    let ys: Vec<f64> = kept.iter().map(|&(_, g)| g.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();

    let exponent = (order as f64 + 1.0) / 2.0;
    let kept_map: BTreeMap<usize, f64> = kept.iter().copied().collect();
    let superlinear_ratios = kept
        .iter()
        .filter_map(|&(k, _)| {
            let before = *kept_map.get(&k.checked_sub(1)?)?;
            let after = *kept_map.get(&(k + 1))?;
            Some(TailRatio {
                k,
                ratio: after / before.powf(exponent),
            })
        })
        .collect();

    Ok(RateFit {
        requested_window: [lo, hi],
        window: [kept[0].0, kept[kept.len() - 1].0],
        points: kept.len(),
        slope,
        intercept,
        residual,
        truncation,
        order,
        superlinear_ratios,
        f_star,
        f_star_source: source,
    })
}

pub fn fit_rate_records(
    records: &[TraceRecord],
    f_star: f64,
    source: FStarSource,
    window: Option<(usize, usize)>,
    order: u32,
) -> Result<RateFit> {
    let series: Vec<(usize, f64)> = records.iter().map(|r| (r.k, r.objective)).collect();
    fit_rate(&series, f_star, source, window, order)
}
