use cvgl_numerics::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, vals in prop::collection::vec(-500.0f64..500.0, 1..40)) {
        let cols = vals.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| vals.iter().map(move |v| v * (r as f64 + 1.0) / 3.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn same_padding_preserves_spatial_extents(h in 1usize..9, w in 1usize..9, half in 0usize..4) {
        let k = 2 * half + 1;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, h, w], 0.5));
        let kern = tape.constant(Tensor::full(&[2, k, k], 0.1));
        let y = tape.conv_depthwise(x, kern, None).unwrap();
        prop_assert_eq!(tape.shape(y), &[1, 2, h, w]);
        let p = tape.maxpool3x3(x).unwrap();
        prop_assert_eq!(tape.shape(p), &[1, 2, h, w]);
    }

    #[test]
    fn eval_dropout_is_bit_identical(vals in prop::collection::vec(-1e6f64..1e6, 1..64), p in 0.0f64..0.99, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![vals.len()], vals.clone()).unwrap());
        let y = tape.dropout(x, p, false, &mut rng).unwrap();
        let bits: Vec<u64> = tape.value(y).data().iter().map(|v| v.to_bits()).collect();
        let expected: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, expected);
    }
}
