//! Multi-view normalization of raw flows into fixed-shape vectors.
//!
//! Each flow yields three views:
//!
//! - **payload**: the first `L_pay` payload bytes, zero-padded, kept as raw
//!   byte values (no rescaling);
//! - **length**: the packet-length sequence truncated/zero-padded to `L_len`,
//!   plus its frequency-domain profile;
//! - **time**: the inter-arrival sequence truncated/zero-padded to `L_time`,
//!   plus its frequency-domain profile.
//!
//! The frequency-domain profile splits a padded sequence into consecutive
//! non-overlapping frames of `W_seg` samples (the last frame zero-padded),
//! takes the DFT amplitude spectrum of each frame, keeps the first
//! `W_seg / 2` bins (DC included), and averages bin-wise across frames.

use std::fmt;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::flow::FlowRecord;

/// The three normalized views of a flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Payload,
    Length,
    Time,
}

impl View {
    pub const ALL: [View; 3] = [View::Payload, View::Length, View::Time];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Payload => "payload",
            View::Length => "length",
            View::Time => "time",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Compact set of views, used to mark which raw inputs were present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSet(u8);

impl ViewSet {
    fn bit(view: View) -> u8 {
        match view {
            View::Payload => 1,
            View::Length => 2,
            View::Time => 4,
        }
    }

    pub fn insert(&mut self, view: View) {
        self.0 |= Self::bit(view);
    }

    pub fn contains(self, view: View) -> bool {
        self.0 & Self::bit(view) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = View> {
        View::ALL.into_iter().filter(move |&v| self.contains(v))
    }
}

impl FromIterator<View> for ViewSet {
    fn from_iter<T: IntoIterator<Item = View>>(iter: T) -> Self {
        let mut set = ViewSet::default();
        for v in iter {
            set.insert(v);
        }
        set
    }
}

/// Normalization shape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormConfig {
    /// Payload byte budget.
    pub l_pay: usize,
    /// Packet-length sequence budget.
    pub l_len: usize,
    /// Inter-arrival sequence budget.
    pub l_time: usize,
    /// Frame width for the frequency-domain profiles.
    pub w_seg: usize,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            l_pay: 256,
            l_len: 64,
            l_time: 64,
            w_seg: 16,
        }
    }
}

impl NormConfig {
    /// Frequency bins kept per frame: the first half of the spectrum,
    /// DC included.
    pub fn freq_bins(&self) -> usize {
        self.w_seg / 2
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.l_pay == 0 || self.l_len == 0 || self.l_time == 0 {
            return Err(ConfigError::Invalid(
                "L_pay, L_len and L_time must all be at least 1".into(),
            ));
        }
        if self.w_seg < 2 {
            return Err(ConfigError::Invalid("W_seg must be at least 2".into()));
        }
        Ok(())
    }
}

/// Fixed-shape vectors for one flow.
///
/// A view absent from `views_present` still has vectors of the configured
/// shape; they are all zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedViews {
    /// Raw byte values, length `l_pay`.
    pub payload_vec: Vec<u8>,
    /// Packet lengths, length `l_len`.
    pub len_time_vec: Vec<f64>,
    /// Inter-arrival gaps, length `l_time`.
    pub iat_time_vec: Vec<f64>,
    /// Mean per-frame amplitude spectrum of the length sequence,
    /// length `w_seg / 2`.
    pub len_freq_vec: Vec<f64>,
    /// Mean per-frame amplitude spectrum of the gap sequence,
    /// length `w_seg / 2`.
    pub iat_freq_vec: Vec<f64>,
    /// Views whose raw input was non-empty.
    pub views_present: ViewSet,
}

/// Truncates or zero-pads a payload to exactly `l_pay` bytes.
pub fn normalize_payload(payload: &[u8], l_pay: usize) -> Vec<u8> {
    let mut out = vec![0u8; l_pay];
    let n = payload.len().min(l_pay);
    out[..n].copy_from_slice(&payload[..n]);
    out
}

/// Truncates or zero-pads a numeric sequence to exactly `l` samples.
pub fn truncate_or_pad(seq: &[f64], l: usize) -> Vec<f64> {
    let mut out = vec![0.0; l];
    let n = seq.len().min(l);
    out[..n].copy_from_slice(&seq[..n]);
    out
}

/// Full amplitude spectrum of one frame: `|Σ_n f[n]·e^{-j2π n k / W}|` for
/// every bin `k`.
fn full_spectrum(frame: &[f64]) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(frame.len());
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft.process(&mut buf);
    buf.into_iter().map(|c| c.norm()).collect()
}

/// Amplitude spectrum of one frame, truncated to the first `len / 2` bins.
pub fn frame_dft_amplitudes(frame: &[f64]) -> Vec<f64> {
    assert!(frame.len() >= 2, "frame width must be at least 2");
    let mut amps = full_spectrum(frame);
    amps.truncate(frame.len() / 2);
    amps
}

/// Frequency-domain profile of a sequence: pad to `l`, split into
/// `ceil(l / w_seg)` frames (the last zero-padded to `w_seg`), take each
/// frame's truncated amplitude spectrum, and average the spectra bin-wise.
pub fn spectral_profile(seq: &[f64], l: usize, w_seg: usize) -> Vec<f64> {
    assert!(w_seg >= 2, "frame width must be at least 2");
    let padded = truncate_or_pad(seq, l);
    let n_frames = l.div_ceil(w_seg);
    let k_bins = w_seg / 2;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(w_seg);
    let mut acc = vec![0.0f64; k_bins];
    let mut buf = vec![Complex::new(0.0f64, 0.0); w_seg];

    for f in 0..n_frames {
        let start = f * w_seg;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = padded.get(start + i).copied().unwrap_or(0.0);
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (a, c) in acc.iter_mut().zip(buf.iter().take(k_bins)) {
            *a += c.norm();
        }
    }
    for a in &mut acc {
        *a /= n_frames as f64;
    }
    acc
}

/// Normalizes one flow into its three views.
///
/// A view is present when its raw input is non-empty: payload bytes for the
/// payload view, packet lengths for the length view, inter-arrival gaps for
/// the time view. Absent views keep all-zero vectors of the right shape.
pub fn normalize_flow(flow: &FlowRecord, cfg: &NormConfig) -> NormalizedViews {
    let mut views_present = ViewSet::default();
    if !flow.payload.is_empty() {
        views_present.insert(View::Payload);
    }
    if !flow.pkt_lengths.is_empty() {
        views_present.insert(View::Length);
    }
    if !flow.iat_seconds.is_empty() {
        views_present.insert(View::Time);
    }

    let len_seq: Vec<f64> = flow.pkt_lengths.iter().map(|&v| v as f64).collect();

    NormalizedViews {
        payload_vec: normalize_payload(&flow.payload, cfg.l_pay),
        len_time_vec: truncate_or_pad(&len_seq, cfg.l_len),
        iat_time_vec: truncate_or_pad(&flow.iat_seconds, cfg.l_time),
        len_freq_vec: spectral_profile(&len_seq, cfg.l_len, cfg.w_seg),
        iat_freq_vec: spectral_profile(&flow.iat_seconds, cfg.l_time, cfg.w_seg),
        views_present,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct-sum DFT amplitudes, the textbook definition; kept naive on
    /// purpose so it cannot share a bug with the production path.
    fn naive_amplitudes(frame: &[f64]) -> Vec<f64> {
        let w = frame.len();
        (0..w)
            .map(|k| {
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for (n, &x) in frame.iter().enumerate() {
                    let angle = -2.0 * std::f64::consts::PI * (n as f64) * (k as f64) / (w as f64);
                    re += x * angle.cos();
                    im += x * angle.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn payload_is_truncated_and_padded_without_rescaling() {
        assert_eq!(
            normalize_payload(&[1, 2, 3, 4, 5], 3),
            vec![1, 2, 3],
            "truncation keeps a prefix"
        );
        assert_eq!(normalize_payload(&[1, 2, 3], 5), vec![1, 2, 3, 0, 0]);
        assert_eq!(normalize_payload(&[], 4), vec![0, 0, 0, 0]);
    }

    #[test]
    fn empty_payload_is_marked_absent() {
        let flow = FlowRecord::new("a", None, "TCP", vec![], vec![60, 70], vec![0.1], vec![])
            .unwrap();
        let cfg = NormConfig {
            l_pay: 8,
            ..NormConfig::default()
        };
        let v = normalize_flow(&flow, &cfg);
        assert_eq!(v.payload_vec, vec![0u8; 8]);
        assert!(!v.views_present.contains(View::Payload));
        assert!(v.views_present.contains(View::Length));
        assert!(v.views_present.contains(View::Time));
    }

    #[test]
    fn dft_amplitudes_match_the_known_spectrum_of_a_pure_tone() {
        // sin at bin 1 over 4 samples: energy lands in bins 1 and 3 with
        // amplitude W/2 = 2; the kept half-spectrum is [0, 2].
        let amps = frame_dft_amplitudes(&[0.0, 1.0, 0.0, -1.0]);
        assert_eq!(amps.len(), 2);
        assert!((amps[0] - 0.0).abs() < 1e-12, "DC bin, got {}", amps[0]);
        assert!((amps[1] - 2.0).abs() < 1e-12, "bin 1, got {}", amps[1]);
    }

    #[test]
    fn dft_matches_the_naive_oracle() {
        let frame = [3.0, -1.0, 2.5, 0.0, 7.0, 7.0, -4.0, 1.25];
        let got = frame_dft_amplitudes(&frame);
        let want = naive_amplitudes(&frame);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "got {g}, want {w}");
        }
    }

    #[test]
    fn spectral_profile_averages_over_frames() {
        // Two frames of width 4: [1,0,0,0] has a flat unit spectrum and
        // [0,1,0,0] has unit amplitudes too (single impulse), so the mean
        // profile is exactly [1, 1].
        let seq = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let prof = spectral_profile(&seq, 8, 4);
        assert_eq!(prof.len(), 2);
        assert!((prof[0] - 1.0).abs() < 1e-12);
        assert!((prof[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn last_frame_is_zero_padded() {
        // l=6, w=4 -> two frames: [1,1,1,1] and [1,1,0,0].
        let seq = [1.0; 6];
        let prof = spectral_profile(&seq, 6, 4);
        let f1 = frame_dft_amplitudes(&[1.0, 1.0, 1.0, 1.0]);
        let f2 = frame_dft_amplitudes(&[1.0, 1.0, 0.0, 0.0]);
        for i in 0..2 {
            let want = (f1[i] + f2[i]) / 2.0;
            assert!((prof[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_sequence_has_an_all_zero_profile() {
        let prof = spectral_profile(&[], 64, 16);
        assert_eq!(prof, vec![0.0; 8]);
    }

    #[test]
    fn normalize_flow_shapes_follow_the_config() {
        let flow = FlowRecord::new(
            "a",
            None,
            "TCP|HTTP",
            vec![9; 300],
            vec![100; 80],
            vec![0.01; 79],
            vec![],
        )
        .unwrap();
        let cfg = NormConfig::default();
        let v = normalize_flow(&flow, &cfg);
        assert_eq!(v.payload_vec.len(), 256);
        assert_eq!(v.len_time_vec.len(), 64);
        assert_eq!(v.iat_time_vec.len(), 64);
        assert_eq!(v.len_freq_vec.len(), 8);
        assert_eq!(v.iat_freq_vec.len(), 8);
        assert!(v.views_present.contains(View::Payload));
    }

    #[test]
    fn config_validation_rejects_degenerate_shapes() {
        let bad = NormConfig {
            w_seg: 1,
            ..NormConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = NormConfig {
            l_pay: 0,
            ..NormConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn dft_agrees_with_the_naive_oracle_for_all_even_widths(
            frame in proptest::collection::vec(-1000.0f64..1000.0, 2..33),
        ) {
            let frame = if frame.len() % 2 == 0 { frame } else { frame[..frame.len() - 1].to_vec() };
            prop_assume!(frame.len() >= 2);
            let got = frame_dft_amplitudes(&frame);
            let want = naive_amplitudes(&frame);
            prop_assert_eq!(got.len(), frame.len() / 2);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() < 1e-9 * (1.0 + w.abs()), "got {}, want {}", g, w);
            }
        }

        #[test]
        fn linear_scaling_scales_the_profile(
            seq in proptest::collection::vec(0.0f64..1500.0, 1..64),
            scale in 0.0f64..8.0,
        ) {
            let base = spectral_profile(&seq, 64, 16);
            let scaled_seq: Vec<f64> = seq.iter().map(|v| v * scale).collect();
            let scaled = spectral_profile(&scaled_seq, 64, 16);
            for (b, s) in base.iter().zip(&scaled) {
                prop_assert!((b * scale - s).abs() < 1e-6 * (1.0 + b.abs() * scale));
            }
        }

        #[test]
        fn profile_shape_is_fixed_by_the_config(
            seq in proptest::collection::vec(0.0f64..1500.0, 0..200),
        ) {
            let prof = spectral_profile(&seq, 64, 16);
            prop_assert_eq!(prof.len(), 8);
            prop_assert!(prof.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
