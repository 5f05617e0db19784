use sckan_core::data::{gen_phantom, phantom_seed, random_crop, split_roles, Role, FG_FRACTION};
use sckan_core::numerics::Rng;
use sckan_core::ssd::principal_axis;

#[test]
fn hundred_phantoms_satisfy_fraction_and_axis_alignment() {
    let mut aligned = 0;
    for i in 0..100 {
        let p = gen_phantom(phantom_seed(42, i), [48, 48, 48]).unwrap();
        let frac = p.mask.count(1) as f64 / p.mask.data.len() as f64;
        assert!((FG_FRACTION.0..=FG_FRACTION.1).contains(&frac), "seed {i}: fraction {frac}");
        let axis = principal_axis(&p.mask.coords_of(1)).unwrap();
        let cos = (0..3).map(|a| axis[a] * p.gen_axis[a]).sum::<f64>().abs();
        if cos > 0.8 {
            aligned += 1;
        }
    }
    assert!(aligned >= 95, "only {aligned}/100 aligned");
}

#[test]
fn thousand_crops_contain_foreground() {
    let p = gen_phantom(phantom_seed(7, 0), [48, 48, 48]).unwrap();
    let mut rng = Rng::new(1);
    let mut corners = Vec::new();
    for _ in 0..1000 {
        let (_, m, c) = random_crop(&p, [32, 32, 32], &mut rng).unwrap();
        assert!(m.count(1) > 0);
        corners.push(c);
    }
    let mut rng = Rng::new(1);
    for c in corners.iter().take(20) {
        assert_eq!(random_crop(&p, [32, 32, 32], &mut rng).unwrap().2, *c);
    }
}

#[test]
fn phantom_depends_only_on_dataset_seed_and_index() {
    let forward: Vec<_> = (0..4).map(|i| gen_phantom(phantom_seed(3, i), [16, 16, 16]).unwrap()).collect();
    for i in (0..4).rev() {
        assert_eq!(gen_phantom(phantom_seed(3, i), [16, 16, 16]).unwrap(), forward[i]);
    }
}

#[test]
fn splits_are_disjoint_and_reproducible_for_all_ratios() {
    for frac in [0.05, 0.10, 0.20] {
        for seed in 0..10 {
            let roles = split_roles(40, seed, frac, 0.15).unwrap();
            assert_eq!(roles, split_roles(40, seed, frac, 0.15).unwrap());
            let l = roles.iter().filter(|&&r| r == Role::Labeled).count();
            assert_eq!(l, ((40.0 * frac) as f64).round() as usize);
            assert_eq!(roles.len(), 40);
        }
    }
}
