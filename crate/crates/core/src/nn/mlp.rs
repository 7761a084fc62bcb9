use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tape::{Graph, ParamVars, Var};
use super::{NnError, Params, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputTransform {
    Identity,
    Tanh,
    Sigmoid,
}

/// Layer widths including input and output, e.g. `[29, 128, 128, 64, 4]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub output: OutputTransform,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self {
            widths,
            activation: Activation::Relu,
            output: OutputTransform::Identity,
        }
    }

    pub fn with_output(mut self, output: OutputTransform) -> Self {
        self.output = output;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.widths.len() < 3 {
            return Err(NnError::Invalid(format!(
                "an MLP needs at least one hidden layer, got widths {:?}",
                self.widths
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(NnError::Invalid(format!("zero width in {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// An [`MlpSpec`] bound to a parameter-name prefix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub prefix: String,
}

impl Mlp {
    pub fn new(spec: MlpSpec, prefix: impl Into<String>) -> Result<Self, NnError> {
        spec.validate()?;
        Ok(Self {
            spec,
            prefix: prefix.into(),
        })
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    /// Uniform fan-in initialisation; the last layer is scaled by `out_scale`.
    pub fn init<R: Rng + ?Sized>(
        &self,
        params: &mut Params<f32>,
        rng: &mut R,
        out_scale: f32,
    ) -> Result<(), NnError> {
        let n = self.spec.n_layers();
        for l in 0..n {
            let (fan_in, fan_out) = (self.spec.widths[l], self.spec.widths[l + 1]);
            let bound = (6.0 / fan_in as f32).sqrt() * if l + 1 == n { out_scale } else { 1.0 };
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng));
            params.insert(self.weight_name(l), w)?;
            params.insert(self.bias_name(l), Array2::zeros((1, fan_out)))?;
        }
        Ok(())
    }

    fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<(), NnError> {
        for l in 0..self.spec.n_layers() {
            let expect_w = (self.spec.widths[l], self.spec.widths[l + 1]);
            let w = params
                .get(&self.weight_name(l))
                .ok_or_else(|| NnError::Invalid(format!("missing `{}`", self.weight_name(l))))?;
            if w.dim() != expect_w {
                return Err(NnError::Shape(format!(
                    "`{}` is {:?}, expected {:?}",
                    self.weight_name(l),
                    w.dim(),
                    expect_w
                )));
            }
            let b = params
                .get(&self.bias_name(l))
                .ok_or_else(|| NnError::Invalid(format!("missing `{}`", self.bias_name(l))))?;
            if b.dim() != (1, expect_w.1) {
                return Err(NnError::Shape(format!(
                    "`{}` is {:?}, expected {:?}",
                    self.bias_name(l),
                    b.dim(),
                    (1, expect_w.1)
                )));
            }
        }
        Ok(())
    }

    /// Batched inference without recording a tape.
    pub fn forward_batch<T: Scalar>(
        &self,
        params: &Params<T>,
        x: ArrayView2<T>,
    ) -> Result<Array2<T>, NnError> {
        if x.ncols() != self.spec.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.spec.input_dim()
            )));
        }
        self.check_params(params)?;
        let n = self.spec.n_layers();
        let mut h = x.to_owned();
        for l in 0..n {
            let w = params.get(&self.weight_name(l)).unwrap();
            let b = params.get(&self.bias_name(l)).unwrap();
            h = h.dot(w);
            h += b;
            if l + 1 < n {
                h.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
            }
        }
        apply_output(&mut h, self.spec.output);
        Ok(h)
    }

    /// Records the forward pass on `g`.
    pub fn graph<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, x: Var) -> Var {
        let n = self.spec.n_layers();
        let mut h = x;
        for l in 0..n {
            let w = pv.get(&self.weight_name(l));
            let b = pv.get(&self.bias_name(l));
            let z = g.matmul(h, w);
            h = g.add_row(z, b);
            if l + 1 < n {
                h = g.relu(h);
            }
        }
        match self.spec.output {
            OutputTransform::Identity => h,
            OutputTransform::Tanh => g.tanh(h),
            OutputTransform::Sigmoid => g.sigmoid(h),
        }
    }

    /// Records the pre-transform output `f(x)` (B×1) and its input gradient
    /// `∂f/∂x` (B×in) as differentiable graph expressions, so that penalties
    /// on the input gradient can themselves be differentiated with respect to
    /// the weights. Rectifier masks are treated as constants (their
    /// derivative is zero almost everywhere).
    pub fn graph_with_input_grad<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        x: Var,
    ) -> (Var, Var) {
        debug_assert_eq!(self.spec.output_dim(), 1);
        let n = self.spec.n_layers();
        let rows = g.shape(x).0;
        let mut h = x;
        let mut masks = Vec::with_capacity(n - 1);
        for l in 0..n {
            let w = pv.get(&self.weight_name(l));
            let b = pv.get(&self.bias_name(l));
            let z = g.matmul(h, w);
            let pre = g.add_row(z, b);
            if l + 1 < n {
                let mask = g
                    .value(pre)
                    .mapv(|v| if v > T::zero() { T::one() } else { T::zero() });
                masks.push(g.input(mask));
                h = g.relu(pre);
            } else {
                h = pre;
            }
        }
        // δ at the last hidden layer: ones(B,1) · w_lastᵀ
        let ones = g.input(Array2::from_elem((rows, 1), T::one()));
        let w_last = pv.get(&self.weight_name(n - 1));
        let mut delta = g.matmul_t(ones, w_last);
        for l in (0..n - 1).rev() {
            let masked = g.mul(delta, masks[l]);
            let w = pv.get(&self.weight_name(l));
            delta = g.matmul_t(masked, w);
        }
        (h, delta)
    }
}

fn apply_output<T: Scalar>(h: &mut Array2<T>, out: OutputTransform) {
    match out {
        OutputTransform::Identity => {}
        OutputTransform::Tanh => h.mapv_inplace(|v| v.tanh()),
        OutputTransform::Sigmoid => h.mapv_inplace(super::tape::sigmoid),
    }
}

/// Single-sample forward pass.
pub fn mlp_forward(mlp: &Mlp, params: &Params<f32>, input: &[f32]) -> Result<Vec<f32>, NnError> {
    let x = ArrayView2::from_shape((1, input.len()), input)
        .map_err(|e| NnError::Shape(e.to_string()))?;
    let y = mlp.forward_batch(params, x)?;
    Ok(y.index_axis(Axis(0), 0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(widths: &[usize]) -> (Mlp, Params<f32>) {
        let spec = MlpSpec {
            widths: widths.to_vec(),
            activation: Activation::Relu,
            output: OutputTransform::Identity,
        };
        let mlp = Mlp::new(spec, "net").unwrap();
        let mut p = Params::new();
        mlp.init(&mut p, &mut ChaCha8Rng::seed_from_u64(0), 1.0).unwrap();
        (mlp, p)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let (mlp, p) = net(&[3, 5, 2]);
        let zero = p.zeros_like();
        let y = mlp_forward(&mlp, &zero, &[0.3, -2.0, 7.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_network_passes_positive_input() {
        // One hidden layer of width 2 with identity weights; positive inputs
        // survive the rectifier unchanged.
        let (mlp, mut p) = net(&[2, 2, 2]);
        for l in 0..2 {
            let w = p.get_mut(&mlp.weight_name(l)).unwrap();
            w.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            p.get_mut(&mlp.bias_name(l)).unwrap().fill(0.0);
        }
        assert_eq!(mlp_forward(&mlp, &p, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn seeded_net_matches_hand_rolled_matmul() {
        let (mlp, p) = net(&[2, 2, 2]);
        let w0 = p.get("net.w0").unwrap();
        let w1 = p.get("net.w1").unwrap();
        let x = [1.0f32, 0.0];
        // Oracle: explicit loops, no ndarray products.
        let mut h = [0.0f32; 2];
        for j in 0..2 {
            let mut s = 0.0;
            for i in 0..2 {
                s += x[i] * w0[[i, j]];
            }
            h[j] = s.max(0.0);
        }
        let mut y = [0.0f32; 2];
        for j in 0..2 {
            let mut s = 0.0;
            for i in 0..2 {
                s += h[i] * w1[[i, j]];
            }
            y[j] = s;
        }
        let got = mlp_forward(&mlp, &p, &x).unwrap();
        for j in 0..2 {
            assert!((got[j] - y[j]).abs() < 1e-6, "{got:?} vs {y:?}");
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let (mlp, p) = net(&[3, 4, 1]);
        let err = mlp_forward(&mlp, &p, &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, NnError::Shape(ref m) if m.contains("2 columns") && m.contains("expects 3")));
    }

    #[test]
    fn spec_without_hidden_layer_is_rejected() {
        let spec = MlpSpec {
            widths: vec![3, 1],
            activation: Activation::Relu,
            output: OutputTransform::Identity,
        };
        assert!(Mlp::new(spec, "x").is_err());
    }

    #[test]
    fn forward_is_bit_identical_across_calls() {
        let (mlp, p) = net(&[4, 16, 16, 3]);
        let x = [0.1, -0.4, 2.0, 0.5];
        let a = mlp_forward(&mlp, &p, &x).unwrap();
        let b = mlp_forward(&mlp, &p, &x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn tape_and_batch_paths_agree() {
        let (mlp, p) = net(&[4, 8, 3]);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f32 - 2.0) * 0.3 + j as f32 * 0.1);
        let fast = mlp.forward_batch(&p, x.view()).unwrap();
        let mut g = Graph::new();
        let pv = g.params(&p);
        let xv = g.input(x);
        let y = mlp.graph(&mut g, &pv, xv);
        assert_eq!(g.value(y), &fast);
    }
}
