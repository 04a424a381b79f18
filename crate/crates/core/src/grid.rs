//! Conversions between token sequences and `1×C×H×W` feature maps.

use cvgl_numerics::{Tape, Var};

use crate::backbone::TokenGrid;
use crate::error::{ModelError, Result};

/// Drops the CLS token and lays the patch tokens out as `[1 × D × H × W]`.
pub fn tokens_to_grid(tape: &mut Tape, z: TokenGrid) -> Result<Var> {
    let shape = tape.shape(z.tokens).to_vec();
    let cells = z.grid_h * z.grid_w;
    let skip = usize::from(z.has_cls);
    if shape.len() != 2 || shape[0] != cells + skip {
        return Err(ModelError::Shape(format!(
            "{} tokens cannot form a {}x{} grid (cls: {})",
            shape.first().copied().unwrap_or(0),
            z.grid_h,
            z.grid_w,
            z.has_cls
        )));
    }
    let patches = if z.has_cls {
        tape.slice_rows(z.tokens, 1, cells)?
    } else {
        z.tokens
    };
    let t = tape.transpose(patches)?;
    Ok(tape.reshape(t, &[1, shape[1], z.grid_h, z.grid_w])?)
}

/// Inverse of [`tokens_to_grid`] on the patch tokens: `[1×D×H×W] → [H·W × D]`.
pub fn grid_to_tokens(tape: &mut Tape, grid: Var) -> Result<Var> {
    let shape = tape.shape(grid).to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(ModelError::Shape(format!("expected a [1, C, H, W] map, got {shape:?}")));
    }
    let flat = tape.reshape(grid, &[shape[1], shape[2] * shape[3]])?;
    Ok(tape.transpose(flat)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cvgl_numerics::{gradcheck, Tensor};

    #[test]
    fn cls_grid_of_65_tokens_is_8x8() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[65, 4], |i| i as f64));
        let z = TokenGrid::new(&tape, x, 8, 8, true).unwrap();
        let g = tokens_to_grid(&mut tape, z).unwrap();
        assert_eq!(tape.shape(g), &[1, 4, 8, 8]);
        // Channel 2 at cell (1, 3) is token 1 + 11, column 2.
        assert_eq!(tape.value(g).at(&[0, 2, 1, 3]), ((1 + 11) * 4 + 2) as f64);
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let mut tape = Tape::new();
        let data = Tensor::from_fn(&[13, 3], |i| (i as f64 * 0.37).sin());
        let x = tape.constant(data.clone());
        let z = TokenGrid::new(&tape, x, 3, 4, true).unwrap();
        let g = tokens_to_grid(&mut tape, z).unwrap();
        let back = grid_to_tokens(&mut tape, g).unwrap();
        assert_eq!(tape.value(back).data(), &data.data()[3..]);
    }

    #[test]
    fn bad_token_count_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[10, 2]));
        let z = TokenGrid {
            tokens: x,
            grid_h: 3,
            grid_w: 3,
            has_cls: false,
        };
        assert!(matches!(tokens_to_grid(&mut tape, z), Err(ModelError::Shape(_))));
    }

    #[test]
    fn gradient_flows_through_reshape() {
        let point = Tensor::from_fn(&[7, 2], |i| (i as f64 * 1.3).cos());
        let w = Tensor::from_fn(&[6, 2], |i| 0.5 + i as f64 * 0.1);
        let err = gradcheck(
            |tape, x| {
                let z = TokenGrid::new(tape, x, 2, 3, true).expect("grid");
                let g = tokens_to_grid(tape, z).expect("grid");
                let t = grid_to_tokens(tape, g).expect("tokens");
                let wv = tape.constant(w.clone());
                let p = tape.mul(t, wv)?;
                Ok(tape.sum(p))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }
}
