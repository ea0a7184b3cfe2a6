mod common;

use rand::Rng as _;

use hrhf_core::aggregation::{saa_pool, Planes};
use hrhf_core::distill::{kd_loss, probability_rearrange};
use hrhf_core::rng::stream;

#[test]
fn saa_bounds_monotonicity_and_shift() {
    println!("{}", common::saa_properties().unwrap());
}

#[test]
fn saa_of_constant_map_is_the_constant() {
    let mut rng = stream(11, "const", 0);
    for _ in 0..200 {
        let v = rng.gen_range(-2.0..2.0);
        let (h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let data = vec![v; h * w];
        for r in [0.5, 1.0, 5.0, 10.0, 20.0] {
            let y = saa_pool(Planes::new(&data, 1, h, w).unwrap(), r).unwrap().0[0];
            assert_eq!(y, v);
        }
    }
}

#[test]
fn saa_two_pixel_reference_values() {
    let data = [0.0, 1.0];
    let p = Planes::new(&data, 1, 1, 2).unwrap();
    let y1 = saa_pool(p, 1.0).unwrap().0[0];
    assert!((y1 - ((1.0 + 1f64.exp()) / 2.0).ln()).abs() < 1e-15);
    assert!((y1 - 0.620115).abs() < 1e-6);
    let y50 = saa_pool(p, 50.0).unwrap().0[0];
    assert!(1.0 - y50 <= 2f64.ln() / 50.0 && y50 <= 1.0);
}

#[test]
fn rearrange_conserves_mass() {
    println!("{}", common::rearrange_conserves_mass().unwrap());
}

#[test]
fn label_merge_matches_oracle() {
    println!("{}", common::merge_matches_oracle().unwrap());
}

#[test]
fn kd_loss_obeys_gibbs_inequality() {
    // cross-entropy H(t, q) >= H(t, t), with equality at q = t
    let mut rng = stream(7, "gibbs", 0);
    for _ in 0..300 {
        let old = rng.gen_range(1..5);
        let classes = old + rng.gen_range(0..3);
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let teacher = common::random_probs(&mut rng, old, h, w);
        let student = probability_rearrange(&common::random_probs(&mut rng, classes, h, w), old).unwrap();
        let entropy = kd_loss(&teacher, &teacher).unwrap();
        let cross = kd_loss(&teacher, &student).unwrap();
        assert!(cross >= entropy - 1e-12, "{cross} < {entropy}");
        assert!(entropy >= 0.0);
    }
}
