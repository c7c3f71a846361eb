use rand::Rng as _;
use rand_distr::StandardNormal;
use reweight_core::colorlib::{self, Illuminant};
use reweight_core::datagen::{self, AugmentConfig};
use reweight_core::rewu::{self, AchromaticRegionSpec};
use reweight_core::rng;
use reweight_core::Tensor;

/// -E[min of K standard normals] by sampling.
fn tau_monte_carlo(k: usize, draws: usize, seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let mut acc = 0.0;
    for _ in 0..draws {
        let m = (0..k)
            .map(|_| r.sample::<f64, _>(StandardNormal))
            .fold(f64::INFINITY, f64::min);
        acc += m;
    }
    -acc / draws as f64
}

#[test]
fn tau_matches_sampling() {
    assert_eq!(rewu::tau_init(1).unwrap(), 0.0);
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    assert!((rewu::tau_init(2).unwrap() - inv_sqrt_pi).abs() < 1e-9);
    // 2e5 draws: standard error below 2e-3 for every K here
    for k in [2, 4, 8, 16] {
        let mc = tau_monte_carlo(k, 200_000, k as u64);
        let tau = rewu::tau_init(k).unwrap();
        assert!((mc - tau).abs() < 8e-3, "K={k}: {tau} vs {mc}");
    }
}

/// Fraction of non-zero entries of freshly initialized reweighting maps on
/// uniform input.
fn active_fraction(c: usize, k: usize, maps: usize) -> f64 {
    let mut active = 0usize;
    let mut total = 0usize;
    for s in 0..maps as u64 {
        let p = rewu::init_rewu(c, k, s).unwrap();
        let mut r = rng::stream(99, s);
        let m = Tensor::from_fn(&[16, 16, c], |_| r.random::<f64>());
        let w = rewu::rewu_forward(&m, &p).unwrap().weights;
        active += w.data().iter().filter(|&&v| v > 0.0).count();
        total += w.len();
    }
    active as f64 / total as f64
}

#[test]
fn initial_reweighting_keeps_about_half() {
    for (c, k) in [(3, 16), (32, 32), (64, 64)] {
        let f = active_fraction(c, k, 100);
        assert!((0.40..=0.60).contains(&f), "C={c} K={k}: {f}");
    }
}

#[test]
fn kernel_response_variance_is_c_over_3() {
    for c in [3, 16, 32] {
        let mut r = rng::seeded(c as u64);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let x: f64 = (0..c)
                .map(|_| r.sample::<f64, _>(StandardNormal) * r.random::<f64>())
                .sum();
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let expected = c as f64 / 3.0;
        assert!((var / expected - 1.0).abs() < 0.05, "C={c}: {var} vs {expected}");
    }
}

#[test]
fn achromatic_mask_matches_the_diamond_predicate() {
    // a neutral point and threshold that no grid point lands on exactly
    let spec = AchromaticRegionSpec::new(0.3271, 0.3389, 0.031_415_9).unwrap();
    let mut inside = 0;
    let mut min_margin = f64::INFINITY;
    for i in 0..=100 {
        for j in 0..=100 {
            let (u, v) = (i as f64 / 100.0, j as f64 / 100.0);
            let (du, dv) = (u - spec.u0, v - spec.v0);
            let margin = spec.threshold - (du - dv).abs().max((du + dv).abs());
            min_margin = min_margin.min(margin.abs());
            let predicate = margin >= 0.0;
            assert_eq!(rewu::achromatic_mask(u, v, &spec) > 0.0, predicate, "({u}, {v})");
            inside += predicate as usize;
        }
    }
    assert!(inside > 0);
    assert!(min_margin > 1e-9);
}

#[test]
fn gray_world_recovers_illuminant_on_gray_heavy_scenes() {
    let prior = datagen::IlluminantPrior::default();
    let cfg = datagen::MondrianConfig::new(160, 120, 48);
    let style = datagen::SceneStyle::mixed(0.5);
    let mut r = rng::seeded(5);
    let mut total = 0.0;
    for seed in 0..100 {
        let l = prior.sample(&mut r);
        let img = datagen::generate_scene(&cfg, &style, seed, l).unwrap();
        let gw = colorlib::baseline_gray_world(&img.pixels).unwrap();
        total += colorlib::angular_error(gw.rgb(), l.rgb()).unwrap();
    }
    let mean = total / 100.0;
    assert!(mean < 3.0, "mean Gray-World error {mean}");
}

#[test]
fn augmentation_bias_frequency() {
    let l = Illuminant::from_rgb([0.42, 0.33, 0.25]).unwrap();
    let img = datagen::generate_mondrian(3, 160, 120, 10, l).unwrap();
    let cfg = AugmentConfig {
        crop_min: 48,
        crop_max: 64,
        output_size: 16,
        ..AugmentConfig::desk()
    };
    let mut r = rng::seeded(17);
    let mut biased = 0;
    for _ in 0..10_000 {
        let a = datagen::augment(&img, &cfg, &mut r).unwrap();
        if a.bias_applied {
            assert!(colorlib::illuminant_jitter_valid(&l, &a.patch.illuminant));
            biased += 1;
        }
    }
    let f = biased as f64 / 10_000.0;
    assert!((0.47..=0.53).contains(&f), "bias frequency {f}");
}
