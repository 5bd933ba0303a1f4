mod common;

use common::{random_input, random_net};
use mutguard::attacks::{fgsm, jsma, AttackConfig};
use proptest::prelude::*;

fn setup() -> impl Strategy<Value = (Vec<usize>, u64)> {
    (2usize..12, 2usize..8, 2usize..5, any::<u64>()).prop_map(|(i, h, o, seed)| (vec![i, h, o], seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fgsm_stays_in_the_box(sizes_seed in setup(), eps in 0.0f64..1.0) {
        let (sizes, seed) = sizes_seed;
        let net = random_net(seed, &sizes);
        let x = random_input(seed, sizes[0]);
        let label = net.predict_label(&x).unwrap();
        let cfg = AttackConfig { epsilon: eps, ..AttackConfig::default() };
        let a = fgsm(&net, &x, label, &cfg).unwrap();
        prop_assert!(a.perturbed.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(a.perturbed.iter().zip(&x).all(|(p, o)| (p - o).abs() <= eps + 1e-15));
        let adv = net.predict_label(&a.perturbed).unwrap();
        prop_assert_eq!(a.adversarial_label, adv);
        prop_assert_eq!(a.success, adv != label);
        prop_assert_eq!(fgsm(&net, &x, label, &cfg).unwrap(), a);
    }

    #[test]
    fn jsma_respects_its_budget(sizes_seed in setup(), distortion in 0.05f64..0.6) {
        let (sizes, seed) = sizes_seed;
        let net = random_net(seed, &sizes);
        let x = random_input(seed, sizes[0]);
        let label = net.predict_label(&x).unwrap();
        let cfg = AttackConfig { max_distortion: distortion, ..AttackConfig::default() };
        let a = jsma(&net, &x, label, &cfg).unwrap();
        let budget = (distortion * sizes[0] as f64 - 1e-9).ceil() as usize;
        prop_assert!(a.modified_features() <= budget);
        prop_assert!(a.perturbed.iter().all(|v| (0.0..=1.0).contains(v)));
        let adv = net.predict_label(&a.perturbed).unwrap();
        prop_assert_eq!(a.original_label, net.predict_label(&x).unwrap());
        prop_assert_eq!(a.success, adv != a.original_label);
        prop_assert_eq!(jsma(&net, &x, label, &cfg).unwrap(), a);
    }
}
