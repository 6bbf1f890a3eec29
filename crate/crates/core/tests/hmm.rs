use fusionmil::data::Mode;
use fusionmil::hmm::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 8]> {
    (0..n)
        .map(|_| {
            let mut r = [0.0; 8];
            r.iter_mut().for_each(|v| *v = rng.random_range(0.01..1.0));
            let s: f64 = r.iter().sum();
            r.map(|v| v / s)
        })
        .collect()
}

fn random_transitions(rng: &mut ChaCha8Rng) -> TransitionMatrix {
    let mut p = [[0.0; 8]; 8];
    for row in p.iter_mut() {
        row.iter_mut().for_each(|v| *v = rng.random_range(0.01..1.0));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    TransitionMatrix::from_rows(p).unwrap()
}

fn argmax(r: &[f64; 8]) -> usize {
    (0..8).fold(0, |b, i| if r[i] > r[b] { i } else { b })
}

#[test]
fn constant_session_row_has_closed_form() {
    let l = 40;
    let t = estimate_transitions(&[vec![Some(Mode::Car); l]], 1.0).unwrap();
    let c = Mode::Car.index();
    let diag = (l - 1 + 1) as f64 / (l - 1 + 8) as f64;
    assert!((t.p[c][c] - diag).abs() < 1e-15);
    for j in (0..8).filter(|&j| j != c) {
        assert!((t.p[c][j] - 1.0 / (l - 1 + 8) as f64).abs() < 1e-15);
    }
    for i in (0..8).filter(|&i| i != c) {
        assert!(t.p[i].iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }
}

#[test]
fn random_labels_give_uniform_transitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seq: Vec<Option<Mode>> = (0..4_000_000)
        .map(|_| Some(Mode::ALL[rng.random_range(0..8)]))
        .collect();
    let t = estimate_transitions(&[seq], 1.0).unwrap();
    for row in &t.p {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for &v in row {
            assert!((v - 0.125).abs() < 0.02 * 0.125, "{v}");
        }
    }
}

#[test]
fn sessions_and_gaps_do_not_chain() {
    let a = vec![Some(Mode::Walk), Some(Mode::Walk)];
    let b = vec![Some(Mode::Bus), None, Some(Mode::Walk)];
    let t = estimate_transitions(&[a, b], 0.0).unwrap();
    let (w, bus) = (Mode::Walk.index(), Mode::Bus.index());
    assert_eq!(t.p[w][w], 1.0);
    // no bus -> anything bigram was observed
    assert!(t.p[bus].iter().all(|&v| v == 0.125));
    assert!(estimate_transitions(&[], 1.0).is_err());
    assert!(estimate_transitions(&[vec![None, None]], 1.0).is_err());
}

#[test]
fn uniform_model_is_per_step_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = random_rows(&mut rng, 50);
    let path = viterbi(&e, &TransitionMatrix::uniform());
    assert_eq!(path, e.iter().map(argmax).collect::<Vec<_>>());
}

#[test]
fn sticky_model_corrects_one_flip() {
    let eps = 1e-3;
    let t = TransitionMatrix::sticky(1.0 - 7.0 * eps);
    let mut e = vec![[0.02; 8]; 9];
    for r in &mut e {
        r[2] = 0.86;
    }
    e[4] = [0.02; 8];
    e[4][5] = 0.6;
    e[4][2] = 0.26;
    // the two candidate paths differ only at step 4
    let flat = vec![2; 9];
    let mut flipped = flat.clone();
    flipped[4] = 5;
    let gain = (0.6f64 / 0.26).ln();
    let cost = 2.0 * ((1.0 - 7.0 * eps) / eps).ln();
    assert!(cost > gain);
    assert!(path_log_score(&e, &t, &flat) > path_log_score(&e, &t, &flipped));
    assert_eq!(viterbi(&e, &t), flat);
}

fn brute_force(e: &[[f64; 8]], t: &TransitionMatrix) -> Vec<usize> {
    let n = e.len();
    let mut best = (f64::NEG_INFINITY, vec![]);
    for code in 0..8usize.pow(n as u32) {
        let mut path = vec![0; n];
        let mut c = code;
        for k in (0..n).rev() {
            path[k] = c % 8;
            c /= 8;
        }
        // direct product of probabilities
        let mut p = 0.125 * e[0][path[0]];
        for k in 1..n {
            p *= t.p[path[k - 1]][path[k]] * e[k][path[k]];
        }
        if p > best.0 {
            best = (p, path);
        }
    }
    best.1
}

#[test]
fn matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..100 {
        let n = 1 + trial % 6;
        let e = random_rows(&mut rng, n);
        let t = random_transitions(&mut rng);
        assert_eq!(viterbi(&e, &t), brute_force(&e, &t), "trial {trial}");
    }
}

#[test]
fn zero_rows_are_clamped() {
    let e = vec![[0.0; 8], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
    let path = viterbi(&e, &TransitionMatrix::sticky(0.9));
    assert_eq!(path, vec![2, 2]);
    assert!(viterbi(&[[0.0; 8]], &TransitionMatrix::uniform()) == vec![0]);
    assert!(viterbi(&[], &TransitionMatrix::uniform()).is_empty());
}

#[test]
fn text_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = random_transitions(&mut rng);
    let text = t.to_text();
    assert!(text.starts_with("from still walk run bike car bus train subway"));
    assert_eq!(TransitionMatrix::parse(&text).unwrap(), t);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.txt");
    t.save(&p).unwrap();
    assert_eq!(TransitionMatrix::load(&p).unwrap(), t);
    assert!(TransitionMatrix::parse("from still walk\nstill 1 0\n").is_err());
    let mut bad = t.p;
    bad[0][0] += 0.5;
    assert!(TransitionMatrix::from_rows(bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn viterbi_dominates_raw_argmax(seed in 0u64..100_000, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_rows(&mut rng, n);
        let t = random_transitions(&mut rng);
        let raw: Vec<usize> = e.iter().map(argmax).collect();
        let path = viterbi(&e, &t);
        prop_assert!(path_log_score(&e, &t, &path) >= path_log_score(&e, &t, &raw) - 1e-9);
    }

    #[test]
    fn scaling_emissions_keeps_the_path(seed in 0u64..100_000, scale in 0.01..100.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_rows(&mut rng, 20);
        let t = random_transitions(&mut rng);
        let scaled: Vec<[f64; 8]> = e.iter().map(|r| r.map(|v| v * scale)).collect();
        prop_assert_eq!(viterbi(&e, &t), viterbi(&scaled, &t));
    }

    #[test]
    fn sessions_decode_independently(seed in 0u64..100_000, a in 1usize..20, b in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ea, eb) = (random_rows(&mut rng, a), random_rows(&mut rng, b));
        let t = random_transitions(&mut rng);
        let both = smooth_sessions(&[ea.clone(), eb.clone()], &t);
        prop_assert_eq!(&both[0], &viterbi(&ea, &t));
        prop_assert_eq!(&both[1], &viterbi(&eb, &t));
    }
}
