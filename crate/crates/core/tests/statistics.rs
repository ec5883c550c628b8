use dpwgrad::data::{generate_biased, partition, BiasedConfig, PartitionMode};
use dpwgrad::privacy::gaussian_mechanism;

#[test]
fn paper_configuration_matches_its_law() {
    let ds = generate_biased(&BiasedConfig {
        seed: 42,
        ..BiasedConfig::default()
    })
    .unwrap();
    let n = ds.len() as f64;
    assert_eq!(ds.len(), 30_000);
    let agree = ds.records.iter().filter(|r| r.a == r.y).count() as f64 / n;
    assert!((agree - 0.7).abs() < 0.01, "P(a = y) = {agree}");
    let se = (0.7f64 * 0.3 / n).sqrt();
    assert!((agree - 0.7).abs() < 3.0 * se);
    let ones = ds.records.iter().filter(|r| r.y == 1).count() as f64 / n;
    assert!((ones - 0.5).abs() < 0.01, "P(y = 1) = {ones}");

    let by_a = partition(&ds, PartitionMode::ByA).sizes();
    let half_se = (n * 0.25).sqrt();
    for s in by_a {
        assert!((s as f64 - n / 2.0).abs() < 3.0 * half_se);
    }
    // E n_{j,j} = pn/2 and E n_{j,1-j} = (1-p)n/2
    let t = partition(&ds, PartitionMode::ByAAndY).sizes();
    for (size, expected) in t.iter().zip([0.35, 0.15, 0.15, 0.35]) {
        let mean = expected * n;
        let sd = (n * expected * (1.0 - expected)).sqrt();
        assert!((*size as f64 - mean).abs() < 4.0 * sd, "{size} vs {mean}");
    }
}

#[test]
fn gaussian_noise_has_the_requested_moments() {
    let draws = 1_000_000;
    let sigma = 2.5;
    let noise = gaussian_mechanism(&vec![0.0; draws], sigma, 7, 0).unwrap();
    let mean = noise.iter().sum::<f64>() / draws as f64;
    let var = noise.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (draws - 1) as f64;
    // standard errors: sigma/sqrt(N) for the mean, sigma^2 sqrt(2/N) for the variance
    assert!(mean.abs() < 4.0 * sigma / (draws as f64).sqrt(), "mean {mean}");
    let var_se = sigma * sigma * (2.0 / draws as f64).sqrt();
    assert!((var - sigma * sigma).abs() < 4.0 * var_se, "variance {var}");
}
