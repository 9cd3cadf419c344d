//! Small layers shared by the embedder, encoder and task heads.

use rand::Rng;

use crate::numerics::{ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Uniform Glorot initialization for a `fan_in × fan_out` matrix.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), glorot(rng, d_in, d_out))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Width-3 convolution over the token axis with a residual connection:
/// `y_t = x_t + tanh([x_{t-1}; x_t; x_{t+1}] · W + b)`, zero-padded at the
/// edges. Weights start at zero, so a fresh layer is an exact identity.
#[derive(Clone, Copy, Debug)]
pub struct Conv3 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv3 {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Conv3 {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[3 * dim, dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let t = tape.value(x).rows();
        let prev: Vec<Option<usize>> = (0..t).map(|i| i.checked_sub(1)).collect();
        let next: Vec<Option<usize>> = (0..t).map(|i| (i + 1 < t).then_some(i + 1)).collect();
        let left = tape.gather_rows(x, &prev)?;
        let right = tape.gather_rows(x, &next)?;
        let window = tape.concat_cols(&[left, x, right])?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let z = tape.matmul(window, w)?;
        let z = tape.add_row(z, b)?;
        let z = tape.tanh(z);
        tape.add(x, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_sliding_window() {
        // 3 tokens, d = 2, hand-set filter taps
        let mut store = ParamStore::new();
        let conv = Conv3::new(&mut store, "c", 2).unwrap();
        let taps = [
            [0.5, -0.25], // left tap, input dim 0
            [0.0, 1.0],   // left tap, input dim 1
            [1.0, 0.5],   // centre, dim 0
            [-0.5, 0.25], // centre, dim 1
            [0.2, 0.0],   // right, dim 0
            [0.1, -1.0],  // right, dim 1
        ];
        store.get_mut(conv.weight).value = Tensor::from_rows(&taps).unwrap();
        store.get_mut(conv.bias).value = Tensor::from_rows(&[[0.1, -0.2]]).unwrap();
        let x = [[1.0, 2.0], [-1.0, 0.5], [0.25, -3.0]];

        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from_rows(&x).unwrap());
        let y = conv.forward(&mut tape, &store, xv).unwrap();

        for t in 0..3 {
            for o in 0..2 {
                let mut z = [0.1, -0.2][o];
                for (k, offset) in [-1i64, 0, 1].iter().enumerate() {
                    let src = t as i64 + offset;
                    if !(0..3).contains(&src) {
                        continue;
                    }
                    for i in 0..2 {
                        z += x[src as usize][i] * taps[2 * k + i][o];
                    }
                }
                let expect = x[t][o] + z.tanh();
                assert!((tape.value(y).get(t, o) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fresh_conv_is_identity() {
        let mut store = ParamStore::new();
        let conv = Conv3::new(&mut store, "c", 3).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.25, 9.0]]).unwrap();
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }
}
