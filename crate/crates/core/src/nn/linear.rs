use crate::error::{Error, Result};
use crate::nn::{Init, LayerCost, ParamId, Session};
use crate::tape::Var;
use crate::tensor::Scalar;

/// Frame-wise fully connected layer, `y[:, t] = W·x[:, t] + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = init.he_uniform(&format!("{name}.weight"), &[out_dim, in_dim], in_dim)?;
        let bias = init.constant(&format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    /// `x: [in, T] -> [out, T]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 2 || shape[0] != self.in_dim {
            return Err(Error::shape(
                "linear",
                format!("{}: input {shape:?}, expected [{}, T]", self.name, self.in_dim),
            ));
        }
        let before = s.tape.macs();
        let (w, b) = (s.var(self.weight), s.var(self.bias));
        let y = s.tape.matmul(w, x)?;
        let b = s.tape.reshape(b, &[self.out_dim, 1])?;
        let y = s.tape.add(y, b)?;
        s.record_macs(&self.name, before);
        Ok(y)
    }

    /// `x: [in] -> [out]`, a single frame.
    pub fn forward_vec<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let col = s.tape.reshape(x, &[self.in_dim, 1])?;
        let y = self.forward(s, col)?;
        s.tape.reshape(y, &[self.out_dim])
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn cost(&self, frames: usize) -> LayerCost {
        LayerCost::new(&self.name, self.num_params(), 0, self.in_dim * self.out_dim * frames)
    }
}

/// 1-D convolution layer with "same" padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1dLayer {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || dilation == 0 {
            return Err(Error::config(format!(
                "{name}: kernel must be odd and dilation >= 1 (k={kernel}, d={dilation})"
            )));
        }
        let weight =
            init.he_uniform(&format!("{name}.weight"), &[c_out, c_in, kernel], c_in * kernel)?;
        let bias = init.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self {
            name: name.to_string(),
            c_in,
            c_out,
            kernel,
            dilation,
            weight,
            bias,
        })
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let before = s.tape.macs();
        let (w, b) = (s.var(self.weight), s.var(self.bias));
        let y = s.tape.conv1d(x, w, Some(b), self.padding(), self.dilation)?;
        s.record_macs(&self.name, before);
        Ok(y)
    }

    /// Convolution without the bias term.
    pub fn forward_linear<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let before = s.tape.macs();
        let w = s.var(self.weight);
        let y = s.tape.conv1d(x, w, None, self.padding(), self.dilation)?;
        s.record_macs(&self.name, before);
        Ok(y)
    }

    /// Adds the bias to a `[c_out, T]` tensor.
    pub fn add_bias<T: Scalar>(&self, s: &mut Session<'_, T>, y: Var) -> Result<Var> {
        let b = s.tape.reshape(s.var(self.bias), &[self.c_out, 1])?;
        s.tape.add(y, b)
    }

    pub fn num_params(&self) -> usize {
        self.c_out * self.c_in * self.kernel + self.c_out
    }

    /// Cost at `frames` output frames, with the kernel applied `applications` times.
    pub fn cost(&self, frames: usize, applications: usize) -> LayerCost {
        LayerCost::new(
            &self.name,
            self.num_params(),
            0,
            self.c_out * self.c_in * self.kernel * frames * applications,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn dr_layer_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        let l = Linear::new(&mut Init { store: &mut store, seed: 0 }, "dr", 1024, 128).unwrap();
        assert_eq!(l.num_params(), 131_200);
        assert_eq!(store.num_trainable(), 131_200);
        assert_eq!(l.cost(200).macs, 26_214_400);
    }

    #[test]
    fn identity_linear_passes_input() {
        let mut store = ParamStore::<f64>::new();
        let l = Linear::new(&mut Init { store: &mut store, seed: 0 }, "fc", 3, 3).unwrap();
        let eye = Tensor::from_f64([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        store.set(l.weight, eye).unwrap();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let xt = Tensor::from_f64([3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let x = s.tape.constant(xt.clone());
        let y = l.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.value(y), &xt);
        assert!(l.forward(&mut s, y).is_ok());
        let bad = s.tape.constant(Tensor::zeros([2, 2]));
        assert!(l.forward(&mut s, bad).is_err());
    }

    #[test]
    fn conv_layer_counts() {
        let mut store = ParamStore::<f64>::new();
        let c = Conv1dLayer::new(&mut Init { store: &mut store, seed: 0 }, "c", 16, 16, 3, 1).unwrap();
        assert_eq!(c.num_params(), 784);
        assert_eq!(c.padding(), 1);
        let pointwise =
            Conv1dLayer::new(&mut Init { store: &mut store, seed: 0 }, "p", 8, 8, 1, 1).unwrap();
        assert_eq!(pointwise.cost(1, 1).macs, 64);
        assert!(Conv1dLayer::new(&mut Init { store: &mut store, seed: 0 }, "e", 2, 2, 2, 1).is_err());
    }
}
