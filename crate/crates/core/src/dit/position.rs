//! Fixed sinusoidal encodings for token positions and flow time.
//!
//! Positions are absolute grid indices, so a token at `(t, h, w)` gets the
//! same vector whatever the size of the grid it sits in. Each axis owns a
//! block of `2·⌊D/6⌋` dims holding interleaved `(sin, cos)` pairs with
//! frequencies `10000^(-2k/B)`; the `D mod 6` trailing dims stay zero.

use crate::numerics::Tensor;

const BASE: f64 = 10000.0;
/// Flow time in `[0,1]` is stretched before the frequency ladder.
const TIME_SCALE: f64 = 1000.0;

pub fn axis_block(d: usize) -> usize {
    2 * (d / 6)
}

pub fn position_encoding(t: usize, h: usize, w: usize, d: usize) -> Vec<f64> {
    let block = axis_block(d);
    let mut out = vec![0.0; d];
    for (axis, idx) in [t, h, w].into_iter().enumerate() {
        let off = axis * block;
        for k in 0..block / 2 {
            let freq = BASE.powf(-((2 * k) as f64) / block as f64);
            let arg = idx as f64 * freq;
            out[off + 2 * k] = arg.sin();
            out[off + 2 * k + 1] = arg.cos();
        }
    }
    out
}

/// `[N, D]` encodings for a token grid in time-major, row-major order.
pub fn position_table(grid: [usize; 3], d: usize) -> Tensor {
    position_table_from([0; 3], grid, d)
}

/// [`position_table`] for a grid whose first token sits at `origin`.
pub fn position_table_from(origin: [usize; 3], grid: [usize; 3], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(grid.iter().product::<usize>() * d);
    for t in 0..grid[0] {
        for h in 0..grid[1] {
            for w in 0..grid[2] {
                data.extend(position_encoding(origin[0] + t, origin[1] + h, origin[2] + w, d));
            }
        }
    }
    Tensor::new(vec![grid.iter().product(), d], data).expect("position table shape")
}

/// `[1, D]` embedding of flow time: `D/2` cosines then `D/2` sines.
pub fn timestep_embedding(t: f64, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; d];
    for k in 0..half {
        let freq = (-(BASE.ln()) * k as f64 / half as f64).exp();
        let arg = TIME_SCALE * t * freq;
        data[k] = arg.cos();
        data[half + k] = arg.sin();
    }
    Tensor::new(vec![1, d], data).expect("timestep embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_alternates_zero_one() {
        let e = position_encoding(0, 0, 0, 64);
        for (i, &v) in e[..60].iter().enumerate() {
            assert_eq!(v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(e[60..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn table_entries_are_absolute() {
        let small = position_table([2, 2, 2], 64);
        let large = position_table([3, 5, 7], 64);
        let row = |t: &Tensor, i: usize| t.data()[i * 64..(i + 1) * 64].to_vec();
        assert_eq!(row(&small, 1 * 4 + 1 * 2 + 1), row(&large, 1 * 35 + 1 * 7 + 1));
        assert_eq!(row(&large, 2 * 35 + 4 * 7 + 6), position_encoding(2, 4, 6, 64));
        let shifted = position_table_from([1, 3, 5], [2, 2, 2], 64);
        assert_eq!(row(&shifted, 0), row(&large, 1 * 35 + 3 * 7 + 5));
    }

    #[test]
    fn time_embedding_endpoints() {
        let e = timestep_embedding(0.0, 8);
        assert_eq!(e.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(timestep_embedding(1.0, 64).is_finite());
    }
}
