//! Energy voice-activity detection and leading/trailing silence trimming.

use serde::{Deserialize, Serialize};

use super::DspError;
use crate::audio::AudioBuffer;
use crate::dsp::ms_to_samples;
use crate::scalar::Real;

const ENERGY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    /// Margin above the utterance's background level, dB.
    pub threshold_db: f64,
    /// Frames kept after the last active frame of a run.
    pub hangover_frames: usize,
    /// Frames quieter than this (dBFS) are never speech.
    pub abs_floor_db: f64,
    /// Percentile of frame energies taken as the background level.
    pub background_percentile: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            threshold_db: 6.0,
            hangover_frames: 10,
            abs_floor_db: -60.0,
            background_percentile: 0.1,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if !self.threshold_db.is_finite() || !self.abs_floor_db.is_finite() {
            return Err(DspError::InvalidConfig("VAD thresholds must be finite".into()));
        }
        if !(self.frame_ms > 0.0 && self.hop_ms > 0.0) {
            return Err(DspError::InvalidConfig("VAD frame and hop must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.background_percentile) {
            return Err(DspError::InvalidConfig(
                "background percentile must lie in [0, 0.5]".into(),
            ));
        }
        Ok(())
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Per-frame energies in dB and the frame geometry actually used.
fn frame_energies_db<T: Real>(x: &[T], win: usize, hop: usize) -> Vec<f64> {
    let n_frames = if x.len() <= win {
        1
    } else {
        1 + (x.len() - win).div_ceil(hop)
    };
    (0..n_frames)
        .map(|i| {
            let start = i * hop;
            let end = (start + win).min(x.len());
            let seg = &x[start..end];
            let e = seg.iter().map(|s| s.as_f64() * s.as_f64()).sum::<f64>() / seg.len() as f64;
            10.0 * (e + ENERGY_FLOOR).log10()
        })
        .collect()
}

/// Speech segments as sorted, disjoint half-open sample ranges.
///
/// A frame is active when it exceeds the background level (a low
/// percentile of frame energies) by `threshold_db` and the absolute floor.
/// When the whole utterance lies within `threshold_db` of its background
/// it is homogeneous: all active if above the absolute floor, otherwise
/// silent. Run edges are placed at hop resolution and extended by the
/// hangover.
pub fn energy_vad<T: Real>(
    audio: &AudioBuffer<T>,
    config: &VadConfig,
) -> Result<Vec<(usize, usize)>, DspError> {
    config.validate()?;
    let x = audio.samples();
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let win = ms_to_samples(config.frame_ms, audio.sample_rate()).max(1);
    let hop = ms_to_samples(config.hop_ms, audio.sample_rate()).max(1);
    let energies = frame_energies_db(x, win, hop);
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let background = percentile(&sorted, config.background_percentile);
    let top = percentile(&sorted, 1.0 - config.background_percentile);

    let active: Vec<bool> = if top - background <= config.threshold_db {
        let level = percentile(&sorted, 0.5);
        vec![level > config.abs_floor_db; energies.len()]
    } else {
        energies
            .iter()
            .map(|&e| e > background + config.threshold_db && e > config.abs_floor_db)
            .collect()
    };

    // Run edges are refined to hop-sized blocks so a frame that only
    // grazes the burst does not widen the segment by half a window.
    let homogeneous = top - background <= config.threshold_db;
    let threshold = background + config.threshold_db;
    let block_active = |j: usize| -> bool {
        if homogeneous {
            return true;
        }
        let start = j * hop;
        let end = ((j + 1) * hop).min(x.len());
        let e = x[start..end]
            .iter()
            .map(|s| s.as_f64() * s.as_f64())
            .sum::<f64>()
            / (end - start) as f64;
        let db = 10.0 * (e + ENERGY_FLOOR).log10();
        db > threshold && db > config.abs_floor_db
    };

    let hangover = config.hangover_frames * hop;
    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < active.len() {
        if !active[i] {
            i += 1;
            continue;
        }
        let first = i;
        while i + 1 < active.len() && active[i + 1] {
            i += 1;
        }
        let lo = first * hop;
        let hi = (i * hop + win).min(x.len());
        let blocks: Vec<usize> = (lo / hop..hi.div_ceil(hop))
            .filter(|&j| block_active(j))
            .collect();
        let (start, end) = match (blocks.first(), blocks.last()) {
            (Some(&a), Some(&b)) => (a * hop, ((b + 1) * hop).min(x.len())),
            _ => (lo, hi),
        };
        let end = (end + hangover).min(x.len());
        match segments.last_mut() {
            Some(last) if start <= last.1 => last.1 = last.1.max(end),
            _ => segments.push((start, end)),
        }
        i += 1;
    }
    Ok(segments)
}

/// Keeps the span from the first segment's start to the last segment's
/// end; internal pauses are preserved. No segments leaves the buffer as is.
pub fn trim_to_voiced<T: Real>(audio: &AudioBuffer<T>, segments: &[(usize, usize)]) -> AudioBuffer<T> {
    let (Some(first), Some(last)) = (segments.first(), segments.last()) else {
        return audio.clone();
    };
    let end = last.1.min(audio.len());
    let start = first.0.min(end);
    audio.with_samples(audio.samples()[start..end].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn burst(lead: f64, body: f64, tail: f64) -> AudioBuffer<f64> {
        let rate = 16000.0;
        let mut x = vec![0.0; (lead * rate) as usize];
        x.extend((0..(body * rate) as usize).map(|i| {
            0.5 * (2.0 * std::f64::consts::PI * 300.0 * i as f64 / rate).sin()
        }));
        x.extend(vec![0.0; (tail * rate) as usize]);
        AudioBuffer::new(x, 16000).unwrap()
    }

    #[test]
    fn silence_has_no_segments() {
        let cfg = VadConfig::default();
        assert!(energy_vad(&AudioBuffer::<f64>::silence(16000, 16000), &cfg)
            .unwrap()
            .is_empty());
        assert!(energy_vad(&AudioBuffer::<f64>::silence(0, 16000), &cfg)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn loud_buffer_is_one_segment() {
        let loud = burst(0.0, 1.0, 0.0);
        assert_eq!(
            energy_vad(&loud, &VadConfig::default()).unwrap(),
            vec![(0, loud.len())]
        );
    }

    #[test]
    fn centred_burst_is_found_within_hangover() {
        let cfg = VadConfig::default();
        let audio = burst(0.5, 1.0, 0.5);
        let segs = energy_vad(&audio, &cfg).unwrap();
        assert_eq!(segs.len(), 1, "{segs:?}");
        // tolerance: one hangover duration, in samples
        let tol = cfg.hangover_frames * 160;
        let (s, e) = segs[0];
        assert!(s.abs_diff(8000) <= tol, "start {s}");
        assert!(e.abs_diff(24000) <= tol, "end {e}");

        let trimmed = trim_to_voiced(&audio, &segs);
        assert!(trimmed.len().abs_diff(16000) <= 2 * tol);
    }

    #[test]
    fn internal_pause_is_kept() {
        let rate = 16000.0;
        let mut x = vec![0.0; 8000];
        let tone = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 250.0 * i as f64 / rate).sin())
                .collect()
        };
        x.extend(tone(8000));
        x.extend(vec![0.0; 8000]);
        x.extend(tone(8000));
        x.extend(vec![0.0; 8000]);
        let audio = AudioBuffer::new(x, 16000).unwrap();
        let segs = energy_vad(&audio, &VadConfig::default()).unwrap();
        assert_eq!(segs.len(), 2, "{segs:?}");
        assert!(segs[0].1 < segs[1].0);
        let trimmed = trim_to_voiced(&audio, &segs);
        assert_eq!(trimmed.len(), segs[1].1 - segs[0].0);
    }

    #[test]
    fn trim_identities() {
        let audio = burst(0.1, 0.2, 0.1);
        assert_eq!(trim_to_voiced(&audio, &[]), audio);
        assert_eq!(trim_to_voiced(&audio, &[(0, audio.len())]), audio);
    }
}
