use proptest::prelude::*;

use pottsmg::dataio::{decode, decode_checkpoint, encode, encode_checkpoint, Pnm, Precision};
use pottsmg::mesh::Field;
use pottsmg::net::{ControlParams, NetConfig, Variant};
use pottsmg::potts::{activation_fixed_point, td_perimeter, PottsParams};

fn unit_field() -> impl Strategy<Value = Field> {
    (2usize..12, 2usize..12).prop_flat_map(|(r, c)| {
        prop::collection::vec(0.0f64..=1.0, r * c).prop_map(move |v| Field::from_vec(1, r, c, v).unwrap())
    })
}

proptest! {
    #[test]
    fn perimeter_is_nonnegative_and_swap_invariant(u in unit_field(), sigma in 0.3f64..3.0) {
        let a = td_perimeter(&u, sigma).unwrap();
        let b = td_perimeter(&u.map(|x| 1.0 - x), sigma).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
    }

    #[test]
    fn constant_phases_have_no_perimeter(rows in 1usize..20, cols in 1usize..20, one in any::<bool>(), sigma in 0.3f64..3.0) {
        let u = Field::constant(1, rows, cols, if one { 1.0 } else { 0.0 });
        prop_assert_eq!(td_perimeter(&u, sigma).unwrap(), 0.0);
    }

    #[test]
    fn activation_stays_in_the_open_interval(
        u in unit_field(),
        shift in -50.0f64..50.0,
        c1 in 0.05f64..5.0,
        c2 in 0.0f64..100.0,
        iters in 1usize..5,
    ) {
        let p = PottsParams::new(2.0, 80.0, 0.5, 0.5).unwrap().with_gaussian_radius(2);
        let ubar = u.map(|x| x + shift);
        let out = activation_fixed_point(&ubar, c1, c2, &p, iters).unwrap();
        prop_assert!(out.values().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn pnm_bytes_round_trip(w in 1usize..20, h in 1usize..20, colour in any::<bool>(), seed in any::<u8>()) {
        let channels = if colour { 3 } else { 1 };
        let data = (0..w * h * channels).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let p = Pnm { width: w, height: h, channels, data };
        prop_assert_eq!(decode(&encode(&p)).unwrap(), p);
    }

    #[test]
    fn checkpoints_round_trip_for_any_small_config(
        shape in prop::collection::vec((1usize..3, 1usize..4), 1..4),
        steps in 0usize..3,
        variant in 0u8..3,
        tie in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let (substeps, widths): (Vec<_>, Vec<_>) = shape.into_iter().unzip();
        let mut cfg = NetConfig::with_shape(substeps, widths, steps);
        cfg.variant = [Variant::PottsMG, Variant::UNetSkip, Variant::SegNet][variant as usize];
        cfg.tie_weights = tie;
        let theta = ControlParams::init(&cfg, seed).unwrap();
        let bytes = encode_checkpoint(&theta, &cfg, Precision::F64).unwrap();
        let (back, cfg2, _) = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(cfg2, cfg);
        prop_assert_eq!(back, theta);
    }
}
