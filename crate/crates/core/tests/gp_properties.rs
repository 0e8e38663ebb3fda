use mpgpe::env::{self, EnvConfig, TransitionSample};
use mpgpe::gp::{self, GpHyper, GpHyperGrid, GpModel};
use mpgpe::{Purpose, Streams};
use proptest::prelude::*;
use statrs::distribution::{Continuous, MultivariateNormal};

fn chain_data(bimodal: bool, episodes: usize, seed: u64) -> Vec<TransitionSample> {
    let env = if bimodal { EnvConfig::chainwalk_bimodal() } else { EnvConfig::chainwalk_gaussian() };
    let mut rng = Streams::new(seed).stream(Purpose::Dataset, 0);
    env::collect_uniform_dataset(&env, episodes, &mut rng).unwrap()
}

#[test]
fn evidence_matches_multivariate_normal_log_pdf() {
    let data = chain_data(false, 3, 1);
    let hyper = GpHyper::isotropic(2.0, 1.5, 0.1, 2);
    let n = data.len();
    let x: Vec<Vec<f64>> = data.iter().map(|t| [t.s.clone(), t.a.clone()].concat()).collect();
    let y: Vec<f64> = data.iter().map(|t| t.s_next[0]).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let mut cov = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cov[i * n + j] = hyper.kernel(&x[i], &x[j]) + if i == j { hyper.noise_var } else { 0.0 };
        }
    }
    let mvn = MultivariateNormal::new(vec![mean; n], cov).unwrap();
    let oracle = mvn.ln_pdf(&nalgebra::DVector::from_vec(y));
    let ours = gp::log_evidence(&data, &hyper).unwrap();
    assert!((ours - oracle).abs() < 1e-8 * oracle.abs(), "{ours} vs {oracle}");
}

#[test]
fn bimodal_predictive_is_unimodal_everywhere() {
    let data = chain_data(true, 20, 2);
    let (model, _) = GpModel::fit(&data, &GpHyperGrid::default()).unwrap();
    for s in [0.5, 2.0, 5.0, 8.0, 9.5] {
        for a in [-4.0, -2.0, 0.0, 2.0, 4.0] {
            let d: Vec<f64> =
                (0..=400).map(|i| model.density(&[s], &[a], &[-5.0 + 0.05 * i as f64]).unwrap()).collect();
            let peaks = (1..d.len() - 1).filter(|&i| d[i] > d[i - 1] && d[i] >= d[i + 1]).count();
            assert_eq!(peaks, 1, "({s}, {a})");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predictive_variance_is_bounded(
        seed in 0u64..10_000,
        amp in 0.1f64..10.0,
        len in 0.2f64..4.0,
        noise in 1e-6f64..1.0,
        s in -2.0f64..12.0,
        a in -7.0f64..7.0,
    ) {
        let data = chain_data(true, 2, seed);
        let model = GpModel::with_hyper(&data, GpHyper::isotropic(amp, len, noise, 2)).unwrap();
        let (mean, var) = model.predict(&[s], &[a]).unwrap();
        prop_assert!(mean[0].is_finite());
        prop_assert!(var[0] >= 0.0 && var[0] <= amp * (1.0 + 1e-12));
    }

    #[test]
    fn posterior_mean_is_linear_in_targets(seed in 0u64..10_000, c in -5.0f64..5.0, s in 0.0f64..10.0, a in -5.0f64..5.0) {
        let data = chain_data(false, 2, seed);
        let model = GpModel::with_hyper(&data, GpHyper::isotropic(1.0, 1.0, 0.1, 2)).unwrap();
        let scaled = model.with_scaled_targets(c).unwrap();
        let m = model.predict(&[s], &[a]).unwrap().0[0];
        let ms = scaled.predict(&[s], &[a]).unwrap().0[0];
        prop_assert!((ms - c * m).abs() <= 1e-9 * (1.0 + (c * m).abs()));
    }
}
