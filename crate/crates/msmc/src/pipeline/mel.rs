//! Short-time mel analysis and the stub waveform decoder.
//!
//! Analysis: Hann-windowed power spectra, HTK-style triangular mel filters,
//! natural log with a floor. The decoder stub inverts the filterbank with a
//! regularized pseudo-inverse and runs a few rounds of iterative phase
//! reconstruction; its only contract is output length, not fidelity.

use crate::analyzer::FeatureSequence;
use crate::config::MelParams;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// Triangular mel filterbank, `n_mels x (fft_size/2 + 1)`, unit peaks.
pub fn mel_filterbank(params: &MelParams) -> Array2<f64> {
    let n_bins = params.fft_size / 2 + 1;
    let sr = params.sample_rate as f64;
    let mel_max = hz_to_mel(sr / 2.0);
    let points: Vec<f64> = (0..params.n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (params.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((params.n_mels, n_bins));
    for m in 0..params.n_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sr / params.fft_size as f64;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

fn frame_count(samples: usize, params: &MelParams) -> Result<usize> {
    let win = params.window_samples();
    if samples < win {
        return Err(Error::input(format!(
            "waveform of {samples} samples shorter than one window ({win})"
        )));
    }
    Ok((samples - win) / params.shift_samples() + 1)
}

/// Power spectra of Hann-windowed frames, `frames x (fft_size/2 + 1)`.
fn stft_power(waveform: &[f64], params: &MelParams) -> Result<Array2<f64>> {
    let frames = frame_count(waveform.len(), params)?;
    let win = params.window_samples();
    let shift = params.shift_samples();
    let n_bins = params.fft_size / 2 + 1;
    let window = hann_window(win);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(params.fft_size);
    let mut power = Array2::zeros((frames, n_bins));
    let mut buf = vec![Complex::new(0.0, 0.0); params.fft_size];
    for t in 0..frames {
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        for i in 0..win {
            buf[i] = Complex::new(waveform[t * shift + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[[t, k]] = buf[k].norm_sqr();
        }
    }
    Ok(power)
}

/// Waveform to log-mel features: STFT power, mel filterbank, `ln(max(e, floor))`.
pub fn mel_extract(waveform: &[f64], params: &MelParams) -> Result<FeatureSequence> {
    params.validate()?;
    if waveform.is_empty() {
        return Err(Error::input("empty waveform"));
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite samples"));
    }
    let power = stft_power(waveform, params)?;
    let fb = mel_filterbank(params);
    let energies = power.dot(&fb.t());
    Ok(energies.mapv(|e| e.max(params.log_floor).ln()))
}

/// A pluggable mel-to-waveform decoder.
pub trait WaveformDecoder {
    fn name(&self) -> &str;

    /// Must produce exactly `features.nrows() * shift_samples` samples.
    fn decode(&self, features: &FeatureSequence, params: &MelParams) -> Result<Vec<f64>>;
}

/// Default stub: filterbank pseudo-inverse plus iterative phase
/// reconstruction. Output length is the contract; fidelity is not.
pub struct GriffinLimStub {
    pub iterations: usize,
}

impl Default for GriffinLimStub {
    fn default() -> Self {
        GriffinLimStub { iterations: 8 }
    }
}

/// Solves the SPD system `G x = b` in place via Cholesky.
fn solve_spd(g: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = g.nrows();
    let mut l = g.clone();
    for j in 0..n {
        for k in 0..j {
            let ljk = l[[j, k]];
            for i in j..n {
                l[[i, j]] -= l[[i, k]] * ljk;
            }
        }
        let d = l[[j, j]];
        if d <= 0.0 {
            return Err(Error::input("filterbank Gram matrix not positive definite"));
        }
        let d = d.sqrt();
        for i in j..n {
            l[[i, j]] /= d;
        }
    }
    // forward then backward substitution
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let v = y[k];
            y[i] -= l[[i, k]] * v;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let v = y[k];
            y[i] -= l[[k, i]] * v;
        }
        y[i] /= l[[i, i]];
    }
    Ok(y)
}

/// Moore-Penrose pseudo-inverse of the (full row rank) filterbank via the
/// normal equations: `pinv(W) = W^T (W W^T + eps I)^{-1}`.
fn filterbank_pinv(fb: &Array2<f64>) -> Result<Array2<f64>> {
    let gram = fb.dot(&fb.t());
    let n = gram.nrows();
    let mut reg = gram;
    for i in 0..n {
        reg[[i, i]] += 1e-8;
    }
    let mut inv = Array2::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::zeros(n);
        e[j] = 1.0;
        let col = solve_spd(&reg, &e)?;
        for i in 0..n {
            inv[[i, j]] = col[i];
        }
    }
    Ok(fb.t().dot(&inv))
}

impl WaveformDecoder for GriffinLimStub {
    fn name(&self) -> &str {
        "griffin-lim-stub"
    }

    fn decode(&self, features: &FeatureSequence, params: &MelParams) -> Result<Vec<f64>> {
        params.validate()?;
        let (frames, dim) = features.dim();
        if frames == 0 {
            return Err(Error::input("empty feature sequence"));
        }
        // widths other than n_mels (e.g. stage-concatenated code vectors)
        // are column-resampled; only the length contract matters here
        let log_mel = if dim == params.n_mels {
            features.clone()
        } else {
            Array2::from_shape_fn((frames, params.n_mels), |(t, j)| {
                features[[t, j * dim / params.n_mels]]
            })
        };
        let fb = mel_filterbank(params);
        let pinv = filterbank_pinv(&fb)?;
        // the floor is the zero-point of the log scale; silence inverts to
        // exactly zero energy
        let energies = log_mel.mapv(|v| (v.exp() - params.log_floor).max(0.0));
        let power = energies.dot(&pinv.t()).mapv(|v| v.max(0.0));
        let magnitude = power.mapv(f64::sqrt);

        let shift = params.shift_samples();
        let win = params.window_samples();
        let total = frames * shift;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(params.fft_size);
        let ifft = planner.plan_fft_inverse(params.fft_size);
        let window = hann_window(win);
        let n_bins = params.fft_size / 2 + 1;

        // zero initial phase, then alternate between the time and frequency
        // domains keeping the target magnitudes
        let mut phase = Array2::zeros((frames, n_bins));
        let mut wave = vec![0.0; total + win];
        for round in 0..=self.iterations {
            // synthesis by weighted overlap-add
            let mut acc = vec![0.0; total + win];
            let mut norm = vec![0.0; total + win];
            let mut buf = vec![Complex::new(0.0, 0.0); params.fft_size];
            for t in 0..frames {
                for v in buf.iter_mut() {
                    *v = Complex::new(0.0, 0.0);
                }
                for k in 0..n_bins {
                    let c = Complex::from_polar(magnitude[[t, k]], phase[[t, k]]);
                    buf[k] = c;
                    if k > 0 && k < params.fft_size - k {
                        buf[params.fft_size - k] = c.conj();
                    }
                }
                ifft.process(&mut buf);
                for i in 0..win {
                    let sample = buf[i].re / params.fft_size as f64;
                    acc[t * shift + i] += window[i] * sample;
                    norm[t * shift + i] += window[i] * window[i];
                }
            }
            for i in 0..acc.len() {
                wave[i] = acc[i] / norm[i].max(1e-10);
            }
            if round == self.iterations {
                break;
            }
            // re-analysis: keep measured phase
            let mut buf = vec![Complex::new(0.0, 0.0); params.fft_size];
            for t in 0..frames {
                for v in buf.iter_mut() {
                    *v = Complex::new(0.0, 0.0);
                }
                for i in 0..win {
                    let s = wave.get(t * shift + i).copied().unwrap_or(0.0);
                    buf[i] = Complex::new(s * window[i], 0.0);
                }
                fft.process(&mut buf);
                for k in 0..n_bins {
                    phase[[t, k]] = buf[k].arg();
                }
            }
        }
        wave.truncate(total);
        Ok(wave)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MelParams;

    #[test]
    fn frame_count_formula() {
        let params = MelParams::default();
        assert_eq!(params.shift_samples(), 200);
        assert_eq!(params.window_samples(), 800);
        let features = mel_extract(&vec![0.0; 16_000], &params).unwrap();
        assert_eq!(features.nrows(), 77);
        assert_eq!(features.ncols(), 80);
    }

    #[test]
    fn silence_maps_to_the_log_floor() {
        let params = MelParams::default();
        let features = mel_extract(&vec![0.0; 16_000], &params).unwrap();
        let expect = params.log_floor.ln();
        assert!(features.iter().all(|v| *v == expect));
    }

    #[test]
    fn too_short_waveform_is_rejected() {
        let params = MelParams::default();
        assert!(matches!(
            mel_extract(&vec![0.0; 100], &params),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn pure_tone_peaks_in_a_constant_mel_bin() {
        let params = MelParams::default();
        let sr = params.sample_rate as f64;
        let wave: Vec<f64> = (0..16_000)
            .map(|i| (std::f64::consts::TAU * 1000.0 * i as f64 / sr).sin())
            .collect();
        let features = mel_extract(&wave, &params).unwrap();
        let argmax = |row: ndarray::ArrayView1<f64>| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let first_interior = argmax(features.row(5));
        for t in 5..features.nrows() - 5 {
            assert_eq!(argmax(features.row(t)), first_interior, "frame {t}");
        }
    }

    #[test]
    fn filterbank_pinv_is_a_right_inverse() {
        let params = MelParams::default();
        let fb = mel_filterbank(&params);
        let pinv = filterbank_pinv(&fb).unwrap();
        let id = fb.dot(&pinv);
        for i in 0..params.n_mels {
            for j in 0..params.n_mels {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (id[[i, j]] - expect).abs() < 1e-3,
                    "pinv residual at ({i},{j}): {}",
                    id[[i, j]]
                );
            }
        }
    }

    #[test]
    fn stub_decoder_honors_the_length_contract() {
        let params = MelParams::default();
        let silence = Array2::from_elem((20, 80), params.log_floor.ln());
        let wave = GriffinLimStub::default().decode(&silence, &params).unwrap();
        assert_eq!(wave.len(), 20 * params.shift_samples());
        let rms = (wave.iter().map(|v| v * v).sum::<f64>() / wave.len() as f64).sqrt();
        assert!(rms < 1e-3, "silence RMS too high: {rms}");
    }
}
