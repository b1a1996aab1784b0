use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::factorized::FactorizedDensity;
use super::gmm::GmmConditional;
use crate::error::{Error, Result};

pub const MIN_PRECISION: u32 = 8;
pub const MAX_PRECISION: u32 = 16;

/// Fixed-point cumulative frequencies over the integer support
/// `[s_min, s_min + len − 1]`. `cdf[0] = 0`, `cdf[len] = 2^precision`, and
/// every symbol has a frequency of at least one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    s_min: i32,
    precision: u32,
    cdf: Vec<u32>,
}

/// Where a table's probabilities come from.
#[derive(Clone, Copy)]
pub enum PmfSource<'a> {
    Factorized {
        density: &'a FactorizedDensity,
        channel: usize,
    },
    Gmm {
        params: &'a GmmConditional,
        index: usize,
    },
}

impl PmfSource<'_> {
    /// Probabilities of every support symbol, with the mass below the support
    /// folded into the first bin and the mass above into the last.
    fn folded_pmf(&self, s_min: i32, s_max: i32) -> Vec<f64> {
        let n = (s_max - s_min + 1) as usize;
        let mut pmf = Vec::with_capacity(n);
        for s in s_min..=s_max {
            let x = s as f64;
            let p = if s == s_min && s == s_max {
                1.0
            } else if s == s_min {
                self.cdf(x + 0.5)
            } else if s == s_max {
                self.survival(x - 0.5)
            } else {
                self.interval(x)
            };
            pmf.push(p);
        }
        pmf
    }

    fn cdf(&self, t: f64) -> f64 {
        match *self {
            PmfSource::Factorized { density, channel } => density.cdf(channel, t),
            PmfSource::Gmm { params, index } => params.cdf(index, t),
        }
    }

    fn survival(&self, t: f64) -> f64 {
        match *self {
            PmfSource::Factorized { density, channel } => density.survival(channel, t),
            PmfSource::Gmm { params, index } => params.survival(index, t),
        }
    }

    fn interval(&self, x: f64) -> f64 {
        match *self {
            PmfSource::Factorized { density, channel } => density.pmf(channel, x),
            PmfSource::Gmm { params, index } => params.pmf(index, x),
        }
    }
}

/// Quantizes a model's probabilities over `[s_min, s_max]` into a table.
pub fn build_cdf_table(
    source: PmfSource<'_>,
    s_min: i32,
    s_max: i32,
    precision: u32,
) -> Result<CdfTable> {
    if s_min >= s_max {
        return Err(Error::InvalidArgument(format!(
            "support [{s_min}, {s_max}] must satisfy s_min < s_max"
        )));
    }
    check_precision(precision)?;
    let bins = s_max as i64 - s_min as i64 + 1;
    if bins > 1i64 << precision {
        return Err(Error::InvalidArgument(format!(
            "support of {bins} symbols exceeds {precision}-bit precision"
        )));
    }
    CdfTable::from_pmf(&source.folded_pmf(s_min, s_max), s_min, precision)
}

/// GMM conditional for a zero-mean Gaussian of the given scale, as used by
/// the scale hyperprior; handy for building single-Gaussian tables.
pub fn gaussian_table(scale: f64, s_min: i32, s_max: i32, precision: u32) -> Result<CdfTable> {
    let params = GmmConditional::new(1, vec![1.0], vec![0.0], vec![scale])?;
    build_cdf_table(PmfSource::Gmm { params: &params, index: 0 }, s_min, s_max, precision)
}

fn check_precision(precision: u32) -> Result<()> {
    if !(MIN_PRECISION..=MAX_PRECISION).contains(&precision) {
        return Err(Error::InvalidArgument(format!(
            "precision {precision} outside [{MIN_PRECISION}, {MAX_PRECISION}]"
        )));
    }
    Ok(())
}

struct Surplus {
    excess: f64,
    index: usize,
}

impl PartialEq for Surplus {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Surplus {}

impl PartialOrd for Surplus {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Surplus {
    // max-heap: largest over-allocation first, then lowest index
    fn cmp(&self, other: &Self) -> Ordering {
        self.excess
            .total_cmp(&other.excess)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl CdfTable {
    /// Quantizes a (not necessarily normalised) pmf to `2^precision` counts.
    ///
    /// Counts start at `max(1, floor(p·T))`; any shortfall goes one count at a
    /// time to the largest fractional remainders, any excess is taken from
    /// the most over-allocated symbols that still have more than one count.
    pub fn from_pmf(pmf: &[f64], s_min: i32, precision: u32) -> Result<Self> {
        check_precision(precision)?;
        let n = pmf.len();
        let total = 1u64 << precision;
        if n == 0 || n as u64 > total {
            return Err(Error::InvalidArgument(format!(
                "{n} symbols cannot be coded at {precision}-bit precision"
            )));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("pmf has negative or non-finite entries".into()));
        }
        let mass: f64 = pmf.iter().sum();
        let probs: Vec<f64> = if mass > 0.0 {
            pmf.iter().map(|p| p / mass).collect()
        } else {
            vec![1.0 / n as f64; n]
        };
        let target: Vec<f64> = probs.iter().map(|p| p * total as f64).collect();
        let mut counts: Vec<u64> = target.iter().map(|t| (t.floor() as u64).max(1)).collect();
        let assigned: u64 = counts.iter().sum();
        if assigned < total {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let ra = target[a] - counts[a] as f64;
                let rb = target[b] - counts[b] as f64;
                rb.total_cmp(&ra).then(a.cmp(&b))
            });
            let mut missing = total - assigned;
            for &i in order.iter().cycle() {
                if missing == 0 {
                    break;
                }
                counts[i] += 1;
                missing -= 1;
            }
        } else if assigned > total {
            let mut heap: BinaryHeap<Surplus> = (0..n)
                .filter(|&i| counts[i] > 1)
                .map(|i| Surplus {
                    excess: counts[i] as f64 - target[i],
                    index: i,
                })
                .collect();
            let mut excess = assigned - total;
            while excess > 0 {
                let top = heap.pop().expect("n <= total leaves a reducible count");
                counts[top.index] -= 1;
                excess -= 1;
                if counts[top.index] > 1 {
                    heap.push(Surplus {
                        excess: top.excess - 1.0,
                        index: top.index,
                    });
                }
            }
        }
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0u64;
        cdf.push(0);
        for c in counts {
            acc += c;
            cdf.push(acc as u32);
        }
        debug_assert_eq!(acc, total);
        Ok(Self {
            s_min,
            precision,
            cdf,
        })
    }

    /// Builds from raw cumulative counts, validating every invariant.
    pub fn from_cdf(s_min: i32, precision: u32, cdf: Vec<u32>) -> Result<Self> {
        check_precision(precision)?;
        if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().unwrap() as u64 != 1u64 << precision {
            return Err(Error::InvalidArgument(
                "cdf must start at 0 and end at 2^precision".into(),
            ));
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("cdf must be strictly increasing".into()));
        }
        Ok(Self {
            s_min,
            precision,
            cdf,
        })
    }

    pub fn s_min(&self) -> i32 {
        self.s_min
    }

    pub fn s_max(&self) -> i32 {
        self.s_min + self.len() as i32 - 1
    }

    /// Number of symbols in the support.
    pub fn len(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    /// Frequencies per support symbol.
    pub fn counts(&self) -> Vec<u32> {
        self.cdf.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `(cumulative start, frequency)` of `symbol`, if in support.
    pub fn interval(&self, symbol: i32) -> Option<(u32, u32)> {
        let i = symbol.checked_sub(self.s_min)?;
        if i < 0 || i as usize >= self.len() {
            return None;
        }
        let i = i as usize;
        Some((self.cdf[i], self.cdf[i + 1] - self.cdf[i]))
    }

    /// Index of the symbol whose interval contains `value` (< 2^precision).
    pub(crate) fn locate(&self, value: u32) -> usize {
        self.cdf.partition_point(|&c| c <= value) - 1
    }

    /// The probability the coder actually assigns to each support symbol.
    pub fn quantized_pmf(&self) -> Vec<f64> {
        let total = (1u64 << self.precision) as f64;
        self.counts().iter().map(|&c| c as f64 / total).collect()
    }

    /// Ideal code length of `symbol` under this table, in bits.
    pub fn bits(&self, symbol: i32) -> Option<f64> {
        self.interval(symbol)
            .map(|(_, f)| self.precision as f64 - (f as f64).log2())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_four_symbols_split_exactly() {
        let t = CdfTable::from_pmf(&[0.25; 4], -2, 16).unwrap();
        assert_eq!(t.counts(), vec![16384; 4]);
        assert_eq!(t.s_max(), 1);
    }

    #[test]
    fn every_symbol_keeps_a_count() {
        let mut pmf = vec![0.0; 100];
        pmf[50] = 1.0;
        let t = CdfTable::from_pmf(&pmf, 0, 8).unwrap();
        assert!(t.counts().iter().all(|&c| c >= 1));
        assert_eq!(*t.cdf().last().unwrap(), 256);
        assert_eq!(t.counts()[50], 256 - 99);
    }

    #[test]
    fn too_wide_support_rejected() {
        assert!(CdfTable::from_pmf(&vec![1.0; 257], 0, 8).is_err());
        assert!(gaussian_table(1.0, -200, 200, 8).is_err());
    }

    #[test]
    fn precision_bounds() {
        assert!(CdfTable::from_pmf(&[0.5, 0.5], 0, 7).is_err());
        assert!(CdfTable::from_pmf(&[0.5, 0.5], 0, 17).is_err());
        assert!(gaussian_table(1.0, 0, 0, 16).is_err());
    }

    #[test]
    fn locate_finds_interval() {
        let t = CdfTable::from_cdf(0, 8, vec![0, 10, 200, 256]).unwrap();
        assert_eq!(t.locate(0), 0);
        assert_eq!(t.locate(9), 0);
        assert_eq!(t.locate(10), 1);
        assert_eq!(t.locate(255), 2);
        assert!(CdfTable::from_cdf(0, 8, vec![0, 10, 10, 256]).is_err());
    }
}
