use auditlm::bandit::{ArmStats, BanditState, Choice};
use proptest::prelude::*;

/// Direct evaluation of the Boltzmann weights without the max-shift, used
/// as an independent reference. Only valid while beta * loss stays small.
fn reference(means: &[f64], beta: f64) -> Vec<f64> {
    let l0 = if means.is_empty() {
        0.5
    } else {
        means.iter().sum::<f64>() / means.len() as f64
    };
    let w: Vec<f64> = means
        .iter()
        .chain(std::iter::once(&l0))
        .map(|l| (-beta * l).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

fn state(means: &[f64], beta: f64) -> BanditState<f64> {
    let arms = means
        .iter()
        .enumerate()
        .map(|(i, m)| ArmStats::with_mean(format!("a{i}").as_str(), *m))
        .collect();
    BanditState::with_arms("s", arms, beta).unwrap()
}

fn probs(s: &BanditState<f64>) -> Vec<f64> {
    let d = s.sample_distribution();
    s.arms
        .iter()
        .map(|a| d.probability(&Choice::Arm(a.arm_id.clone())))
        .chain(std::iter::once(d.explore_probability()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn normalised_and_positive(means in prop::collection::vec(0.0..=1.0f64, 0..50), beta in 0.0..100.0f64) {
        let p = probs(&state(&means, beta));
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn matches_direct_evaluation(means in prop::collection::vec(0.0..=1.0f64, 0..50), beta in 0.0..50.0f64) {
        let p = probs(&state(&means, beta));
        for (a, b) in p.iter().zip(reference(&means, beta)) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn uniform_at_zero(means in prop::collection::vec(0.0..=1.0f64, 0..50)) {
        let p = probs(&state(&means, 0.0));
        let u = 1.0 / (means.len() + 1) as f64;
        prop_assert!(p.iter().all(|x| (x - u).abs() <= 1e-12));
    }

    #[test]
    fn monotone_in_loss(means in prop::collection::vec(0.0..=1.0f64, 2..50), beta in 0.0..100.0f64) {
        let p = probs(&state(&means, beta));
        for i in 0..means.len() {
            for j in 0..means.len() {
                if means[i] < means[j] {
                    prop_assert!(p[i] >= p[j]);
                    if beta > 0.0 && beta * (means[j] - means[i]) > 1e-9 {
                        prop_assert!(p[i] > p[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn invariant_under_shift(means in prop::collection::vec(0.0..=0.5f64, 1..50), beta in 0.0..100.0f64, c in 0.0..=0.5f64) {
        let shifted: Vec<f64> = means.iter().map(|m| m + c).collect();
        let p = probs(&state(&means, beta));
        let q = probs(&state(&shifted, beta));
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn running_mean_matches_history(losses in prop::collection::vec(0.0..=1.0f64, 1..1000)) {
        let mut s = BanditState::<f64>::new("s");
        s.add_arm("x".into()).unwrap();
        for l in &losses {
            s.record_loss(&"x".into(), *l).unwrap();
        }
        let brute = losses.iter().sum::<f64>() / losses.len() as f64;
        let got = s.arm(&"x".into()).unwrap().mean_loss().unwrap();
        prop_assert!((got - brute).abs() <= 1e-9);
    }

    #[test]
    fn draw_is_deterministic(means in prop::collection::vec(0.0..=1.0f64, 0..10), beta in 0.0..10.0f64, seed: u64) {
        let s = state(&means, beta);
        prop_assert_eq!(s.draw(seed), s.draw(seed));
    }
}

#[test]
fn reference_values_at_beta_one() {
    let p = reference(&[0.2, 0.8], 1.0);
    for (a, b) in p.iter().zip([0.4368, 0.2397, 0.3236]) {
        assert!((a - b).abs() < 1e-4);
    }
    let q = probs(&state(&[0.2, 0.8], 1.0));
    for (a, b) in p.iter().zip(&q) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn monte_carlo_matches_distribution() {
    let s = state(&[0.1, 0.4, 0.9], 3.0);
    let p = probs(&s);
    let n = 20_000u64;
    let mut counts = [0u64; 4];
    for seed in 0..n {
        let idx = match s.draw(seed) {
            Choice::Arm(a) => a.as_str()[1..].parse::<usize>().unwrap(),
            Choice::Explore => 3,
        };
        counts[idx] += 1;
    }
    for (c, q) in counts.iter().zip(&p) {
        let freq = *c as f64 / n as f64;
        let sigma = (q * (1.0 - q) / n as f64).sqrt();
        assert!((freq - q).abs() < 4.0 * sigma, "{freq} vs {q}");
    }
}
