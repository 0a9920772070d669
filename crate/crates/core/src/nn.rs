//! Parameterized layers over the tape.
//!
//! Weights use Kaiming-uniform fan-in initialization, `U(−√(6/fan_in),
//! √(6/fan_in))`; biases and batchnorm shifts start at zero, batchnorm
//! scales at one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnParams, Mode, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;

pub fn kaiming_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), kaiming_uniform(rng, &[din, dout], din))?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[dout]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub params: BnParams,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add(&format!("{name}.scale"), Tensor::full(&[channels], T::one()))?,
            shift: store.add(&format!("{name}.shift"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store
                .add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], T::one()))?,
            params: BnParams::default(),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let scale = tape.param(store, self.scale);
        let shift = tape.param(store, self.shift);
        let mut mean = store.value(self.running_mean).clone();
        let mut var = store.value(self.running_var).clone();
        let out = tape.batchnorm(
            x,
            scale,
            shift,
            mean.data_mut(),
            var.data_mut(),
            mode,
            self.params,
        )?;
        if mode == Mode::Train {
            *store.value_mut(self.running_mean) = mean;
            *store.value_mut(self.running_var) = var;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let shape = [cout, cin, kernel, kernel];
        let weight = store.add(
            &format!("{name}.weight"),
            kaiming_uniform(rng, &shape, cin * kernel * kernel),
        )?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // Each output pixel receives about cin·k²/stride² contributions.
        let fan_in = (cin * kernel * kernel / (stride * stride)).max(1);
        let weight = store.add(
            &format!("{name}.weight"),
            kaiming_uniform(rng, &[cin, cout, kernel, kernel], fan_in),
        )?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}
