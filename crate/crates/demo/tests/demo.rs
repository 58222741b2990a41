use splitvae_demo::{decomposition, fuse, tone};

#[test]
fn fusion_matches_precision_weighting() {
    let [m, lv] = fuse(&[1.0, 3.0], &[0.0, 0.0], true).unwrap();
    assert!((m - 4.0 / 3.0).abs() < 1e-12 && (lv + 3f64.ln()).abs() < 1e-12);
    let [m, lv] = fuse(&[2.0, -2.0], &[0.3, 0.3], false).unwrap();
    assert!(m.abs() < 1e-12 && (lv - (0.3 - 2f64.ln())).abs() < 1e-12);
    assert!(fuse(&[1.0], &[0.0, 0.0], true).is_err());
}

#[test]
fn decomposition_terms_average_to_the_analytic_kl() {
    let [mi, tc, dkl, kl] = decomposition(256, 1.0, 0.5, -1.0, 200, 3).unwrap();
    assert!(
        (mi + tc + dkl - kl).abs() / kl < 0.02,
        "{} vs {kl}",
        mi + tc + dkl
    );
}

#[test]
fn correlated_means_raise_total_correlation() {
    let tc = |rho| decomposition(256, 1.5, rho, -2.0, 20, 1).unwrap()[1];
    assert!(tc(0.95) > tc(0.0) + 0.3, "{} vs {}", tc(0.95), tc(0.0));
    assert!(decomposition(256, 1.0, 1.5, 0.0, 1, 0).is_err());
}

#[test]
fn tone_image_is_scaled_for_display() {
    let t = tone(2, 440.0, 100).unwrap();
    assert_eq!(t.waveform.len(), 100);
    assert_eq!(t.log_mel.len(), t.n_mels * t.n_frames);
    assert!(t.log_mel.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(tone(9, 440.0, 10).is_err());
    assert!(tone(0, 9000.0, 10).is_err());
}
