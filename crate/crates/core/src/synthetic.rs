//! Bars-test ground truth and dictionary recovery scoring.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::model::{BscParams, ModelKind, ModelParams, NoisyOrParams, SsscParams};
use crate::rng::StreamRng;
use crate::state::BinaryState;

/// Ground truth of a bars test on an `R × R` grid with `H = 2R` bars.
#[derive(Clone, Debug, PartialEq)]
pub struct BarsSpec {
    pub side: usize,
    pub kind: ModelKind,
    /// On-pixel value of each bar.
    pub amplitudes: Vec<f64>,
    pub background: f64,
    pub pi: f64,
    pub sigma2: f64,
    pub mu: f64,
}

impl BarsSpec {
    /// Standard setting: noisy-OR bars at 0.8 on a 0.1 background; BSC and
    /// SSSC bars at a random ±5 on a zero background; `π = 2/H`, `σ² = 1`,
    /// slab mean 0 and covariance `I`.
    pub fn standard(kind: ModelKind, side: usize, rng: &mut StreamRng) -> Result<Self> {
        if side < 2 {
            return Err(Error::InvalidParam("bars grid side must be at least 2".into()));
        }
        let h = 2 * side;
        let (amplitudes, background) = match kind {
            ModelKind::NoisyOr => (vec![0.8; h], 0.1),
            _ => (
                (0..h).map(|_| if rng.random::<bool>() { 5.0 } else { -5.0 }).collect(),
                0.0,
            ),
        };
        Ok(BarsSpec {
            side,
            kind,
            amplitudes,
            background,
            pi: 2.0 / h as f64,
            sigma2: 1.0,
            mu: 0.0,
        })
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.side
    }

    pub fn observed_dim(&self) -> usize {
        self.side * self.side
    }

    pub fn ground_truth(&self) -> Result<ModelParams> {
        let w = bars_dictionary(self)?;
        let h = self.latent_dim();
        Ok(match self.kind {
            ModelKind::NoisyOr => ModelParams::NoisyOr(NoisyOrParams::new(vec![self.pi; h], w)?),
            ModelKind::Bsc => ModelParams::Bsc(BscParams::new(self.pi, self.sigma2, w)?),
            ModelKind::Sssc => ModelParams::Sssc(SsscParams::new(
                vec![self.pi; h],
                self.sigma2,
                w,
                vec![self.mu; h],
                DMatrix::identity(h, h),
                false,
            )?),
        })
    }
}

/// `D × 2R` dictionary: columns `0..R` horizontal bars, `R..2R` vertical.
pub fn bars_dictionary(spec: &BarsSpec) -> Result<DMatrix<f64>> {
    let r = spec.side;
    if spec.amplitudes.len() != 2 * r {
        return Err(Error::Dimension(format!("{} amplitudes for {} bars", spec.amplitudes.len(), 2 * r)));
    }
    if spec.amplitudes.iter().any(|&a| a == spec.background) {
        return Err(Error::InvalidParam("bar amplitude equals the background".into()));
    }
    let mut w = DMatrix::from_element(r * r, 2 * r, spec.background);
    for i in 0..r {
        for j in 0..r {
            // pixel (row i, column j)
            w[(i * r + j, i)] = spec.amplitudes[i];
            w[(i * r + j, r + j)] = spec.amplitudes[r + j];
        }
    }
    Ok(w)
}

/// Sample `n` datapoints from the spec's ground truth.
pub fn generate_bars_dataset(spec: &BarsSpec, n: usize, rng: &mut StreamRng) -> Result<(DataSet, ModelParams, Vec<BinaryState>)> {
    let truth = spec.ground_truth()?;
    let (data, latents) = truth.sample(n, rng);
    Ok((data, truth, latents))
}

/// One matched (ground truth, learned) column pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedField {
    pub truth: usize,
    pub learned: usize,
    pub correlation: f64,
    pub prior_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryReport {
    pub matches: Vec<MatchedField>,
}

impl RecoveryReport {
    pub fn min_correlation(&self) -> f64 {
        self.matches.iter().map(|m| m.correlation).fold(f64::INFINITY, f64::min)
    }

    pub fn all_recovered(&self, threshold: f64) -> bool {
        self.matches.iter().all(|m| m.correlation >= threshold)
    }

    pub fn max_prior_error(&self) -> f64 {
        self.matches.iter().map(|m| m.prior_error).fold(0.0, f64::max)
    }

    pub fn mean_prior_error(&self) -> f64 {
        self.matches.iter().map(|m| m.prior_error).sum::<f64>() / self.matches.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth,learned,correlation,prior_error\n");
        for m in &self.matches {
            let _ = writeln!(out, "{},{},{:.17e},{:.17e}", m.truth, m.learned, m.correlation, m.prior_error);
        }
        out
    }
}

fn normalized_columns(w: &DMatrix<f64>) -> Vec<Option<DVector<f64>>> {
    w.column_iter()
        .map(|c| {
            let mean = c.mean();
            let centred = c.map(|v| v - mean);
            let norm = centred.norm();
            (norm > 0.0).then(|| centred / norm)
        })
        .collect()
}

/// Greedy injective matching of ground-truth columns to learned columns by
/// normalised cross-correlation of mean-free columns. For the real-valued
/// models the absolute correlation is used, so column signs do not matter.
pub fn score_recovery(learned: &ModelParams, truth: &ModelParams) -> Result<RecoveryReport> {
    let (lw, tw) = (learned.w(), truth.w());
    if lw.nrows() != tw.nrows() {
        return Err(Error::Dimension(format!("learned D={} vs truth D={}", lw.nrows(), tw.nrows())));
    }
    if lw.ncols() < tw.ncols() {
        return Err(Error::Dimension(format!("learned H={} below truth H={}", lw.ncols(), tw.ncols())));
    }
    let signless = truth.kind() != ModelKind::NoisyOr;
    let lc = normalized_columns(lw);
    let tc = normalized_columns(tw);
    let mut corr = DMatrix::zeros(tc.len(), lc.len());
    for (i, t) in tc.iter().enumerate() {
        for (j, l) in lc.iter().enumerate() {
            if let (Some(t), Some(l)) = (t, l) {
                let c = t.dot(l).clamp(-1.0, 1.0);
                corr[(i, j)] = if signless { c.abs() } else { c };
            }
        }
    }
    let (lp, tp) = (learned.priors(), truth.priors());
    let mut free_t = vec![true; tc.len()];
    let mut free_l = vec![true; lc.len()];
    let mut matches = Vec::with_capacity(tc.len());
    for _ in 0..tc.len() {
        let mut best = (usize::MAX, usize::MAX, f64::NEG_INFINITY);
        for i in (0..tc.len()).filter(|&i| free_t[i]) {
            for j in (0..lc.len()).filter(|&j| free_l[j]) {
                if corr[(i, j)] > best.2 {
                    best = (i, j, corr[(i, j)]);
                }
            }
        }
        let (i, j, c) = best;
        free_t[i] = false;
        free_l[j] = false;
        matches.push(MatchedField {
            truth: i,
            learned: j,
            correlation: c,
            prior_error: (lp[j] - tp[i]).abs(),
        });
    }
    matches.sort_by_key(|m| m.truth);
    Ok(RecoveryReport { matches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand_distr::{Distribution, Normal};

    fn rng() -> StreamRng {
        stream(4, Purpose::Test, 0, 0)
    }

    #[test]
    fn five_by_five_bars() {
        let spec = BarsSpec::standard(ModelKind::Bsc, 5, &mut rng()).unwrap();
        let w = bars_dictionary(&spec).unwrap();
        assert_eq!(w.shape(), (25, 10));
        for c in w.column_iter() {
            assert_eq!(c.iter().filter(|&&v| v != 0.0).count(), 5);
            assert!(c.iter().all(|&v| v == 0.0 || v.abs() == 5.0));
        }
    }

    #[test]
    fn two_by_two_bars_cover_rows_and_columns() {
        let spec = BarsSpec::standard(ModelKind::NoisyOr, 2, &mut rng()).unwrap();
        let w = bars_dictionary(&spec).unwrap();
        let on = w.map(|v| (v == 0.8) as u8);
        // each pixel lies on exactly one horizontal and one vertical bar
        for d in 0..4 {
            assert_eq!(on.row(d).iter().take(2).sum::<u8>(), 1);
            assert_eq!(on.row(d).iter().skip(2).sum::<u8>(), 1);
        }
        assert!(w.iter().all(|&v| v == 0.8 || v == 0.1));
    }

    #[test]
    fn ground_truth_settings() {
        let spec = BarsSpec::standard(ModelKind::Sssc, 5, &mut rng()).unwrap();
        let ModelParams::Sssc(p) = spec.ground_truth().unwrap() else { panic!() };
        assert_eq!(p.sigma2(), 1.0);
        assert!(p.mu().iter().all(|&m| m == 0.0));
        assert_eq!(p.psi(), &DMatrix::identity(10, 10));
        assert!(p.pi().iter().all(|&x| x == 0.2));
    }

    #[test]
    fn self_match_and_permutation_invariance() {
        let spec = BarsSpec::standard(ModelKind::Bsc, 5, &mut rng()).unwrap();
        let truth = spec.ground_truth().unwrap();
        let rep = score_recovery(&truth, &truth).unwrap();
        assert!(rep.matches.iter().all(|m| (m.correlation - 1.0).abs() < 1e-12));

        let w = truth.w();
        let perm = [3, 7, 0, 9, 1, 5, 2, 8, 6, 4];
        let mut shuffled = DMatrix::zeros(25, 10);
        for (j, &p) in perm.iter().enumerate() {
            let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
            shuffled.set_column(j, &(w.column(p) * sign));
        }
        let learned = ModelParams::Bsc(BscParams::new(0.2, 1.0, shuffled).unwrap());
        let rep = score_recovery(&learned, &truth).unwrap();
        for m in &rep.matches {
            assert!((m.correlation - 1.0).abs() < 1e-12);
            assert_eq!(perm[m.learned], m.truth);
        }
    }

    #[test]
    fn noisy_dictionary_still_matches() {
        let spec = BarsSpec::standard(ModelKind::Bsc, 5, &mut rng()).unwrap();
        let truth = spec.ground_truth().unwrap();
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut r = stream(8, Purpose::Test, 1, 0);
        let w = truth.w().map(|v| v + noise.sample(&mut r));
        let learned = ModelParams::Bsc(BscParams::new(0.2, 1.0, w).unwrap());
        assert!(score_recovery(&learned, &truth).unwrap().min_correlation() > 0.99);
    }

    #[test]
    fn bars_per_sample() {
        let spec = BarsSpec::standard(ModelKind::NoisyOr, 5, &mut rng()).unwrap();
        let n = 5000;
        let (_, _, latents) = generate_bars_dataset(&spec, n, &mut stream(2, Purpose::Test, 0, 0)).unwrap();
        let counts: Vec<f64> = latents.iter().map(|s| s.count_ones() as f64).collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 2.0).abs() < 3.0 * (var / n as f64).sqrt(), "{mean}");
    }
}
