use fusionmil::accel::*;
use fusionmil::data::Placement;
use fusionmil::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stream(samples: Vec<[f64; 3]>) -> AccelStream {
    AccelStream {
        session: "u/d".into(),
        placement: Placement::Hips,
        rate_hz: 10.0,
        start_ms: 0,
        samples,
    }
}

fn random_samples(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            [
                rng.random_range(-12.0..12.0),
                rng.random_range(-12.0..12.0),
                rng.random_range(-12.0..12.0),
            ]
        })
        .collect()
}

fn window_of(magnitude: Vec<f64>, jerk: Vec<f64>) -> MagJerkWindow {
    MagJerkWindow {
        start: 0,
        magnitude,
        jerk,
    }
}

/// Power per DFT bin by direct summation.
fn dft_power(seg: &[f64], fs: f64) -> Vec<f64> {
    let n = seg.len();
    let w: Vec<f64> = (0..n)
        .map(|i| (std::f64::consts::PI * i as f64 / n as f64).sin().powi(2))
        .collect();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, (x, wi)) in seg.iter().zip(&w).enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                re += x * wi * ph.cos();
                im += x * wi * ph.sin();
            }
            let f = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            f * (re * re + im * im) / (fs * s2)
        })
        .collect()
}

#[test]
fn magnitude_and_jerk_match_per_sample_oracle() {
    let s = stream(random_samples(1800, 1));
    let w = magnitude_jerk(&s, 600).unwrap();
    assert_eq!(w.len(), 600);
    for n in 0..600 {
        let a = s.samples[600 + n];
        let p = s.samples[599 + n];
        let mag = (a[0].powi(2) + a[1].powi(2) + a[2].powi(2)).sqrt();
        let jerk = ((a[0] - p[0]).powi(2) + (a[1] - p[1]).powi(2) + (a[2] - p[2]).powi(2)).sqrt() * 10.0;
        assert!((w.magnitude[n] - mag).abs() < 1e-12);
        assert!((w.jerk[n] - jerk).abs() < 1e-12);
    }
    assert!(w.magnitude.iter().chain(&w.jerk).all(|v| *v >= 0.0));
}

#[test]
fn first_window_repeats_second_jerk() {
    let s = stream(random_samples(600, 2));
    let w = magnitude_jerk(&s, 0).unwrap();
    assert_eq!(w.jerk[0], w.jerk[1]);
}

#[test]
fn window_past_stream_end_is_rejected() {
    let s = stream(random_samples(900, 3));
    assert!(matches!(magnitude_jerk(&s, 600), Err(Error::Data(_))));
}

fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    let rz = [[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cc, -sc], [0.0, sc, cc]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        r
    };
    mul(mul(rz, ry), rx)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn magnitude_and_jerk_ignore_device_orientation(
        a in 0.0..6.3f64, b in 0.0..6.3f64, c in 0.0..6.3f64, seed in 0u64..1000
    ) {
        let raw = random_samples(600, seed);
        let r = rotation(a, b, c);
        let rotated: Vec<[f64; 3]> = raw
            .iter()
            .map(|v| {
                let mut o = [0.0; 3];
                for i in 0..3 {
                    o[i] = (0..3).map(|k| r[i][k] * v[k]).sum();
                }
                o
            })
            .collect();
        let w0 = magnitude_jerk(&stream(raw), 0).unwrap();
        let w1 = magnitude_jerk(&stream(rotated), 0).unwrap();
        for n in 0..600 {
            prop_assert!((w0.magnitude[n] - w1.magnitude[n]).abs() < 1e-9);
            prop_assert!((w0.jerk[n] - w1.jerk[n]).abs() < 1e-9);
        }
    }
}

#[test]
fn spectrogram_matches_direct_dft() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mag: Vec<f64> = (0..600).map(|_| rng.random_range(0.0..20.0)).collect();
    let jerk: Vec<f64> = (0..600).map(|_| rng.random_range(0.0..50.0)).collect();
    let spec = spectrogram(&window_of(mag.clone(), jerk.clone())).unwrap();
    let table = band_table(10.0, 100, 51).unwrap();
    for (ch, x) in [&mag, &jerk].into_iter().enumerate() {
        for s in 0..51 {
            let p = dft_power(&x[s * 10..s * 10 + 100], 10.0);
            for (b, &(lo, hi)) in table.bins.iter().enumerate() {
                let want = (p[lo..hi].iter().sum::<f64>() + 1e-7).ln();
                let got = spec.at(s, b, ch);
                assert!(
                    (got - want).abs() < 1e-9,
                    "segment {s} band {b} channel {ch}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn wide_window_uses_longer_hop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..1800).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sp = Spectrogrammer::new(SpectrogramConfig::default()).unwrap();
    assert_eq!(sp.hop_for(600).unwrap(), 10);
    assert_eq!(sp.hop_for(1800).unwrap(), 34);
    let spec = sp.spectrogram(&window_of(x.clone(), x.clone())).unwrap();
    let table = band_table(10.0, 100, 51).unwrap();
    let p = dft_power(&x[50 * 34..50 * 34 + 100], 10.0);
    let (lo, hi) = table.bins[7];
    let want = (p[lo..hi].iter().sum::<f64>() + 1e-7).ln();
    assert!((spec.at(50, 7, 0) - want).abs() < 1e-9);
    assert!(sp.hop_for(701).is_err());
}

#[test]
fn pure_tone_peaks_in_its_band() {
    let table = band_table(10.0, 100, 51).unwrap();
    for f in [0.5, 1.0, 2.0, 4.0] {
        let x: Vec<f64> = (0..600)
            .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / 10.0).sin())
            .collect();
        let spec = spectrogram(&window_of(x.clone(), x)).unwrap();
        let band = table.band_of_hz(f).unwrap();
        for s in 0..51 {
            let best = (0..51)
                .max_by(|&a, &b| spec.at(s, a, 0).total_cmp(&spec.at(s, b, 0)))
                .unwrap();
            assert_eq!(best, band, "{f} Hz, segment {s}");
        }
    }
}

#[test]
fn zero_input_is_log_eps_everywhere() {
    let spec = spectrogram(&window_of(vec![0.0; 600], vec![0.0; 600])).unwrap();
    assert!(spec.values.data().iter().all(|&v| v == 1e-7f64.ln()));
}

#[test]
fn noise_gives_fifty_one_by_fifty_one_by_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..600).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spec = spectrogram(&window_of(x.clone(), x)).unwrap();
    assert_eq!(spec.values.shape(), &[51, 51, 2]);
    assert!(spec.values.is_finite());
}

#[test]
fn spectrogram_rejects_short_window() {
    assert!(spectrogram(&window_of(vec![0.0; 599], vec![0.0; 599])).is_err());
}

fn check_table(t: &BandTable, n_bins: usize, nyquist: f64) {
    assert!(t.edges_hz.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(t.edges_hz[0], 0.0);
    assert_eq!(*t.edges_hz.last().unwrap(), nyquist);
    assert!(t.widths().windows(2).all(|w| w[1] >= w[0]));
    let mut owner = vec![0usize; n_bins];
    for &(a, b) in &t.bins {
        for o in &mut owner[a..b] {
            *o += 1;
        }
    }
    assert!(owner.iter().all(|&c| c == 1));
}

#[test]
fn band_tables_partition_the_bins() {
    let t = band_table(10.0, 100, 51).unwrap();
    assert_eq!(t.len(), 51);
    check_table(&t, 51, 5.0);
    for (nfft, bands) in [(256, 51), (512, 51), (200, 40), (100, 10), (1024, 20)] {
        let t = band_table(10.0, nfft, bands).unwrap();
        assert_eq!(t.len(), bands);
        check_table(&t, nfft / 2 + 1, 5.0);
        // past the single-bin run, each width doubles except the last one
        let w = t.widths();
        let first = w.iter().position(|&x| x > 1).unwrap_or(w.len());
        for i in first..w.len() - 1 {
            if i > first {
                assert_eq!(w[i], 2 * w[i - 1], "nfft {nfft}");
            }
        }
        assert!(w[w.len() - 1] >= w[w.len() - 2]);
    }
}

#[test]
fn too_many_bands_is_a_config_error() {
    assert!(matches!(band_table(10.0, 100, 52), Err(Error::Config(_))));
}

fn sample_spec(seed: u64) -> AccelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..600).map(|_| rng.random_range(-3.0..3.0)).collect();
    let j: Vec<f64> = (0..600).map(|_| rng.random_range(0.0..30.0)).collect();
    spectrogram(&window_of(x, j)).unwrap()
}

#[test]
fn empty_mask_is_identity() {
    let spec = sample_spec(7);
    assert_eq!(apply_masks(&spec, &MaskDraw::default()), spec);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let none = MaskConfig {
        max_stripes: 0,
        max_width: 5,
    };
    assert_eq!(mask_augment(&spec, &none, &mut rng), spec);
}

#[test]
fn widest_masks_change_at_most_two_stripes_of_cells() {
    let spec = sample_spec(8);
    let draw = MaskDraw {
        band_stripes: vec![(10, 5)],
        time_stripes: vec![(30, 5)],
    };
    let out = apply_masks(&spec, &draw);
    for ch in 0..2 {
        let changed = (0..51)
            .flat_map(|s| (0..51).map(move |b| (s, b)))
            .filter(|&(s, b)| out.at(s, b, ch) != spec.at(s, b, ch))
            .count();
        assert!(changed <= 5 * 51 + 5 * 51);
        assert!(changed > 0);
    }
    // both channels are masked on the same cells
    for s in 0..51 {
        for b in 0..51 {
            let in_mask = (10..15).contains(&b) || (30..35).contains(&s);
            let mean0 = spec.values.data().iter().step_by(2).sum::<f64>() / 2601.0;
            if in_mask {
                assert!((out.at(s, b, 0) - mean0).abs() < 1e-12);
            } else {
                assert_eq!(out.at(s, b, 1), spec.at(s, b, 1));
            }
        }
    }
}

#[test]
fn stripe_counts_and_widths_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = MaskConfig::default();
    let n = 100_000;
    let mut counts = [[0usize; 3]; 2];
    let mut widths = [0usize; 6];
    for _ in 0..n {
        let d = draw_masks(&mut rng, &cfg, 51, 51);
        counts[0][d.band_stripes.len()] += 1;
        counts[1][d.time_stripes.len()] += 1;
        for &(start, w) in d.band_stripes.iter().chain(&d.time_stripes) {
            assert!(start + w <= 51);
            widths[w] += 1;
        }
    }
    for c in counts {
        for k in c {
            let f = k as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.02 / 3.0, "stripe count frequency {f}");
        }
    }
    let total: usize = widths.iter().sum();
    for w in widths {
        let f = w as f64 / total as f64;
        assert!((f - 1.0 / 6.0).abs() < 0.02 / 6.0 * 1.5, "width frequency {f}");
    }
}

#[test]
fn masking_is_deterministic_for_a_seed() {
    let spec = sample_spec(10);
    let cfg = MaskConfig::default();
    let a = mask_augment(&spec, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let b = mask_augment(&spec, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(a, b);
    assert_eq!(
        spectrogram(&window_of(vec![1.0; 600], vec![2.0; 600])).unwrap(),
        spectrogram(&window_of(vec![1.0; 600], vec![2.0; 600])).unwrap()
    );
}

#[test]
fn decimation_tracks_a_slow_tone() {
    let hi: Vec<[f64; 3]> = (0..6000)
        .map(|n| {
            let t = n as f64 / 100.0;
            [
                (2.0 * std::f64::consts::PI * 0.7 * t).sin(),
                9.81,
                (2.0 * std::f64::consts::PI * 9.0 * t).sin(),
            ]
        })
        .collect();
    let lo = decimate(&hi, 10, 0.8);
    assert_eq!(lo.len(), 600);
    for n in 20..580 {
        let t = n as f64 / 10.0;
        let d = (lo[n][0] - (2.0 * std::f64::consts::PI * 0.7 * t).sin()).abs();
        assert!(d < 5e-3, "{n}: {d}");
        assert!((lo[n][1] - 9.81).abs() < 1e-9);
        assert!(lo[n][2].abs() < 5e-3);
    }
}
