use super::stft::Spectrogram;
use super::{FeatureError, FeatureKind, FeatureSequence};
use crate::scalar::Real;

/// Floor applied to mel power before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the one-sided DFT bins, each peak
/// normalized to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank<T> {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Mel breakpoints in Hz: `n_mels + 2` values, filter `i` peaks at
    /// `edges_hz[i + 1]`.
    pub edges_hz: Vec<f64>,
    pub weights: Vec<T>,
}

impl<T: Real> MelFilterbank<T> {
    pub fn row(&self, m: usize) -> &[T] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..=self.n_mels]
    }
}

pub fn mel_filterbank<T: Real>(
    n_mels: usize,
    dft: usize,
    fs: f64,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank<T>, FeatureError> {
    if n_mels == 0 {
        return Err(FeatureError::Geometry("n_mels must be positive".into()));
    }
    if !(fmin >= 0.0 && fmin < fmax) || fmax > fs / 2.0 {
        return Err(FeatureError::Geometry(format!(
            "degenerate band [{fmin}, {fmax}] Hz at fs = {fs}"
        )));
    }
    let n_bins = dft / 2 + 1;
    let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![T::zero(); n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, c, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let row: Vec<f64> = (0..n_bins)
            .map(|b| {
                let f = b as f64 * fs / dft as f64;
                ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0)
            })
            .collect();
        let peak = row.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(FeatureError::Geometry(format!(
                "mel filter {m} covers no DFT bin"
            )));
        }
        for (w, v) in weights[m * n_bins..(m + 1) * n_bins].iter_mut().zip(row) {
            *w = T::lit(v / peak);
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        edges_hz,
        weights,
    })
}

/// `ln(max(melmat . |X|^2, 1e-10))`, frames x mels.
pub fn log_mel<T: Real>(
    spec: &Spectrogram<T>,
    bank: &MelFilterbank<T>,
) -> Result<FeatureSequence<T>, FeatureError> {
    if spec.n_bins() != bank.n_bins {
        return Err(FeatureError::Shape {
            expected: format!("{} bins", bank.n_bins),
            got: format!("{} bins", spec.n_bins()),
        });
    }
    let floor = T::lit(LOG_FLOOR);
    let mut data = Vec::with_capacity(spec.n_frames * bank.n_mels);
    for t in 0..spec.n_frames {
        let power: Vec<T> = spec.frame(t).iter().map(|c| c.norm_sqr()).collect();
        for m in 0..bank.n_mels {
            let e: T = bank.row(m).iter().zip(&power).map(|(&w, &p)| w * p).sum();
            data.push(e.max(floor).ln());
        }
    }
    let frame_rate = spec.sample_rate as f64 / spec.config.hop as f64;
    FeatureSequence::new(FeatureKind::LogMel, 1, spec.n_frames, bank.n_mels, frame_rate, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AudioBuffer;
    use crate::features::stft::{stft, StftConfig};

    fn default_bank() -> MelFilterbank<f64> {
        mel_filterbank(80, 512, 16000.0, 0.0, 8000.0).unwrap()
    }

    #[test]
    fn weights_nonnegative_and_peak_normalized() {
        let bank = default_bank();
        assert_eq!(bank.weights.len(), 80 * 257);
        assert!(bank.weights.iter().all(|&w| w >= 0.0));
        for m in 0..80 {
            let row = bank.row(m);
            assert_eq!(row.iter().copied().fold(0.0, f64::max), 1.0);
            assert!(row.iter().any(|&w| w > 0.0));
        }
    }

    #[test]
    fn toy_bank_centres_follow_mel_grid() {
        // hand-computed grid for 4 mels over [0, 8000] Hz:
        // mel(8000) = 2595 log10(1 + 8000/700) = 2840.0230...
        // breakpoints at k * 2840.0230 / 5, first interior = 568.0046 mel,
        // i.e. 700 (10^(568.0046 / 2595) - 1) = 458.73 Hz
        let m1 = 2595.0 * (1.0 + 8000.0f64 / 700.0).log10() / 5.0;
        let f1 = 700.0 * (10f64.powf(m1 / 2595.0) - 1.0);
        assert!((m1 - 568.0046).abs() < 1e-3);
        let bank: MelFilterbank<f64> = mel_filterbank(4, 512, 16000.0, 0.0, 8000.0).unwrap();
        assert!((bank.centers_hz()[0] - f1).abs() < 1e-9);
        assert!((f1 - 458.73).abs() < 0.01, "f1 = {f1}");
    }

    #[test]
    fn degenerate_band_is_rejected() {
        assert!(mel_filterbank::<f64>(80, 512, 16000.0, 4000.0, 4000.0).is_err());
        assert!(mel_filterbank::<f64>(80, 512, 16000.0, 0.0, 9000.0).is_err());
        assert!(mel_filterbank::<f64>(400, 512, 16000.0, 0.0, 8000.0).is_err());
    }

    fn sine(freq: f64, amp: f64) -> AudioBuffer<f64> {
        AudioBuffer::new(
            (0..8000)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
                .collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn zero_input_hits_log_floor() {
        let spec = stft(&AudioBuffer::<f64>::silence(4000, 16000), &StftConfig::default()).unwrap();
        let lm = log_mel(&spec, &default_bank()).unwrap();
        assert_eq!((lm.frames, lm.dim), (23, 80));
        assert!(lm.data.iter().all(|&v| (v - LOG_FLOOR.ln()).abs() < 1e-12));
        assert!((LOG_FLOOR.ln() + 23.025_850_93).abs() < 1e-6);
    }

    #[test]
    fn doubling_amplitude_adds_ln4() {
        let bank = default_bank();
        let a = log_mel(&stft(&sine(700.0, 0.2), &StftConfig::default()).unwrap(), &bank).unwrap();
        let b = log_mel(&stft(&sine(700.0, 0.4), &StftConfig::default()).unwrap(), &bank).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            if *x > LOG_FLOOR.ln() + 1.0 {
                assert!((y - x - 4f64.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sine_lands_in_filter_covering_its_bin() {
        let bank = default_bank();
        let lm = log_mel(&stft(&sine(1000.0, 0.5), &StftConfig::default()).unwrap(), &bank).unwrap();
        for t in 0..lm.frames {
            let row = &lm.data[t * 80..(t + 1) * 80];
            let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(bank.row(argmax)[32] > 0.0, "frame {t}: channel {argmax}");
        }
    }
}
