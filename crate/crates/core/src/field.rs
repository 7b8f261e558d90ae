//! Fully connected tanh network used as the learned dynamics.
//!
//! In scalar-potential mode the network is a potential `G(y)` and the
//! dynamics are `-∇G(y)`; in vector-field mode the network output is the
//! drift itself. Every derivative operator the adjoint method needs is
//! computed analytically by forward/reverse propagation through the layers:
//!
//! * `drift`: first derivative of `G` (scalar mode)
//! * `drift_jacobian_apply`: `(∂_y drift) v`
//! * `drift_jacobian_transpose_apply`: `(∂_y drift)ᵀ v`
//! * `drift_param_grad_apply`: `(∂_θ drift)ᵀ v`
//!
//! Weights of layer `l` are stored as an `n_l × n_{l+1}` row-major matrix,
//! so a layer computes `z = Wᵀ a + b`. The output layer is linear.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, OcnError, Result};
use crate::solver::Drift;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldMode {
    /// Network is a scalar potential; dynamics are its negative gradient.
    Scalar,
    /// Network output is the vector field.
    Vector,
}

impl FieldMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldMode::Scalar => "scalar",
            FieldMode::Vector => "vector",
        }
    }
}

impl std::str::FromStr for FieldMode {
    type Err = OcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(FieldMode::Scalar),
            "vector" => Ok(FieldMode::Vector),
            other => config(format!("unknown field mode '{other}'")),
        }
    }
}

/// Flat parameter vector: layer-major, each layer's weights in row-major
/// order followed by its biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|x| alpha * x).collect())
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSlot {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

/// Parameterized surrogate `G(·, θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    dims: Vec<usize>,
    mode: FieldMode,
    params: Vec<f64>,
    layers: Vec<LayerSlot>,
}

/// Per-layer buffers reused across evaluations.
#[derive(Debug, Clone)]
pub struct Scratch {
    act: Vec<Vec<f64>>,
    tan: Vec<Vec<f64>>,
    ztan: Vec<Vec<f64>>,
    bar: Vec<Vec<f64>>,
    tbar: Vec<Vec<f64>>,
    zbar: Vec<f64>,
    ztbar: Vec<f64>,
}

/// Total parameter count `Σ (n_l + 1) n_{l+1}`.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn validate_dims(dims: &[usize], mode: FieldMode) -> Result<()> {
    if dims.len() < 2 {
        return config(format!("need at least 2 layer widths, got {}", dims.len()));
    }
    if dims.contains(&0) {
        return config("layer widths must be positive");
    }
    let d = dims[0];
    let out = *dims.last().unwrap();
    match mode {
        FieldMode::Scalar if out != 1 => {
            config(format!("scalar mode needs output width 1, got {out}"))
        }
        FieldMode::Vector if out != d => {
            config(format!("vector mode needs output width {d}, got {out}"))
        }
        _ => Ok(()),
    }
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(OcnError::NumericInput(format!("{what} contains non-finite values")))
    }
}

impl MlpField {
    /// Gaussian weights with standard deviation `1/√fan_in`, zero biases.
    pub fn init(dims: &[usize], mode: FieldMode, seed: u64) -> Result<Self> {
        let mut field = Self::zeros(dims, mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in field.layers.clone() {
            let normal = Normal::new(0.0, 1.0 / (slot.n_in as f64).sqrt())
                .expect("positive standard deviation");
            for w in &mut field.params[slot.w..slot.b] {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(field)
    }

    /// All-zero parameters.
    pub fn zeros(dims: &[usize], mode: FieldMode) -> Result<Self> {
        validate_dims(dims, mode)?;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for w in dims.windows(2) {
            let slot = LayerSlot {
                n_in: w[0],
                n_out: w[1],
                w: off,
                b: off + w[0] * w[1],
            };
            off = slot.b + w[1];
            layers.push(slot);
        }
        Ok(MlpField {
            dims: dims.to_vec(),
            mode,
            params: vec![0.0; off],
            layers,
        })
    }

    pub fn from_params(dims: &[usize], mode: FieldMode, params: ParamVector) -> Result<Self> {
        let mut field = Self::zeros(dims, mode)?;
        field.set_params(params)?;
        Ok(field)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn mode(&self) -> FieldMode {
        self.mode
    }

    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn get_params(&self) -> ParamVector {
        ParamVector(self.params.clone())
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if params.len() != self.params.len() {
            return config(format!(
                "parameter vector has length {}, field expects {}",
                params.len(),
                self.params.len()
            ));
        }
        check_finite("parameter vector", params.as_slice())?;
        self.params = params.0;
        Ok(())
    }

    /// `(weight_range, bias_range)` of layer `l` inside the flat parameter vector.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let s = self.layers[l];
        (s.w..s.b, s.b..s.b + s.n_out)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Flat index of the output bias (the constant gauge slot in scalar mode).
    pub fn output_bias_index(&self) -> usize {
        self.layers.last().unwrap().b
    }

    pub fn scratch(&self) -> Scratch {
        let lev = |n: &usize| vec![0.0; *n];
        let widest = *self.dims.iter().max().unwrap();
        Scratch {
            act: self.dims.iter().map(lev).collect(),
            tan: self.dims.iter().map(lev).collect(),
            ztan: self.dims.iter().map(lev).collect(),
            bar: self.dims.iter().map(lev).collect(),
            tbar: self.dims.iter().map(lev).collect(),
            zbar: vec![0.0; widest],
            ztbar: vec![0.0; widest],
        }
    }

    fn check_state(&self, what: &str, y: &[f64]) -> Result<()> {
        if y.len() != self.dim() {
            return config(format!("{what} has length {}, expected {}", y.len(), self.dim()));
        }
        check_finite(what, y)
    }

    // ----- public evaluation API -----

    /// Scalar potential `G(y, θ)`.
    pub fn potential(&self, y: &[f64]) -> Result<f64> {
        if self.mode != FieldMode::Scalar {
            return Err(OcnError::Mode("potential requires scalar mode".into()));
        }
        self.check_state("y", y)?;
        let mut s = self.scratch();
        self.forward(y, &mut s);
        Ok(s.act[self.layers.len()][0])
    }

    /// Raw network output (length 1 in scalar mode, `d` in vector mode).
    pub fn output(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_state("y", y)?;
        let mut s = self.scratch();
        self.forward(y, &mut s);
        Ok(s.act[self.layers.len()].clone())
    }

    /// `-∂_y G` in scalar mode, `G` in vector mode.
    pub fn drift(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_state("y", y)?;
        let mut s = self.scratch();
        let mut out = vec![0.0; self.dim()];
        self.drift_into(y, &mut out, &mut s);
        Ok(out)
    }

    /// `(∂_y drift(y)) v`.
    pub fn drift_jacobian_apply(&self, y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_state("y", y)?;
        self.check_state("v", v)?;
        let mut s = self.scratch();
        let mut out = vec![0.0; self.dim()];
        self.jvp_into(y, v, &mut out, &mut s);
        Ok(out)
    }

    /// `(∂_y drift(y))ᵀ v`; in scalar mode this is `-(∂²_y G) v`.
    pub fn drift_jacobian_transpose_apply(&self, y: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_state("y", y)?;
        self.check_state("v", v)?;
        let mut s = self.scratch();
        let mut out = vec![0.0; self.dim()];
        self.vjp_and_param_grad(y, v, 0.0, None, &mut out, &mut s);
        Ok(out)
    }

    /// `(∂_θ drift(y, θ))ᵀ v`, the gradient in θ of `⟨drift(y; θ), v⟩`.
    pub fn drift_param_grad_apply(&self, y: &[f64], v: &[f64]) -> Result<ParamVector> {
        self.check_state("y", y)?;
        self.check_state("v", v)?;
        let mut s = self.scratch();
        let mut grad = vec![0.0; self.num_params()];
        let mut out = vec![0.0; self.dim()];
        self.vjp_and_param_grad(y, v, 1.0, Some(&mut grad), &mut out, &mut s);
        Ok(ParamVector(grad))
    }

    // ----- kernels -----

    /// Forward pass; fills `s.act[l]` for every level, output in `s.act[K]`.
    fn forward(&self, y: &[f64], s: &mut Scratch) {
        s.act[0].copy_from_slice(y);
        let last = self.layers.len() - 1;
        for (l, slot) in self.layers.iter().enumerate() {
            let (lo, hi) = s.act.split_at_mut(l + 1);
            let a_in = &lo[l];
            let z = &mut hi[0];
            z.copy_from_slice(&self.params[slot.b..slot.b + slot.n_out]);
            for (i, &ai) in a_in.iter().enumerate() {
                let row = &self.params[slot.w + i * slot.n_out..slot.w + (i + 1) * slot.n_out];
                axpy(ai, row, z);
            }
            if l < last {
                for zk in z.iter_mut() {
                    *zk = zk.tanh();
                }
            }
        }
    }

    /// Forward tangent along `v`; requires `forward` first. Fills `s.tan`
    /// (activation tangents) and `s.ztan` (pre-activation tangents).
    fn forward_tangent(&self, v: &[f64], s: &mut Scratch) {
        s.tan[0].copy_from_slice(v);
        let last = self.layers.len() - 1;
        for (l, slot) in self.layers.iter().enumerate() {
            let zt = &mut s.ztan[l + 1];
            zt.fill(0.0);
            for (i, &ti) in s.tan[l].iter().enumerate() {
                let row = &self.params[slot.w + i * slot.n_out..slot.w + (i + 1) * slot.n_out];
                axpy(ti, row, zt);
            }
            let (act, tan) = (&s.act[l + 1], &mut s.tan[l + 1]);
            if l < last {
                for k in 0..slot.n_out {
                    tan[k] = (1.0 - act[k] * act[k]) * zt[k];
                }
            } else {
                tan.copy_from_slice(zt);
            }
        }
    }

    pub(crate) fn drift_into(&self, y: &[f64], out: &mut [f64], s: &mut Scratch) {
        self.forward(y, s);
        match self.mode {
            FieldMode::Vector => out.copy_from_slice(&s.act[self.layers.len()]),
            FieldMode::Scalar => {
                let k = self.layers.len();
                // g at level K-1 is the output weight column
                let slot = self.layers[k - 1];
                s.bar[k - 1].copy_from_slice(&self.params[slot.w..slot.b]);
                for l in (1..k).rev() {
                    let slot = self.layers[l - 1];
                    let (lo, hi) = s.bar.split_at_mut(l);
                    let g = &mut hi[0];
                    for (gk, ak) in g.iter_mut().zip(&s.act[l]) {
                        *gk *= 1.0 - ak * ak;
                    }
                    let gprev = &mut lo[l - 1];
                    for (i, gi) in gprev.iter_mut().enumerate() {
                        let row =
                            &self.params[slot.w + i * slot.n_out..slot.w + (i + 1) * slot.n_out];
                        *gi = dot(row, g);
                    }
                }
                for (o, g) in out.iter_mut().zip(&s.bar[0]) {
                    *o = -g;
                }
            }
        }
    }

    pub(crate) fn jvp_into(&self, y: &[f64], v: &[f64], out: &mut [f64], s: &mut Scratch) {
        match self.mode {
            FieldMode::Vector => {
                self.forward(y, s);
                self.forward_tangent(v, s);
                out.copy_from_slice(&s.tan[self.layers.len()]);
            }
            // Hessian of G is symmetric, so Jv = Jᵀv.
            FieldMode::Scalar => self.vjp_and_param_grad(y, v, 0.0, None, out, s),
        }
    }

    /// Fused reverse sweep at `y` with cotangent `v`: writes `(∂_y drift)ᵀ v`
    /// into `out` and, when `grad` is given, accumulates
    /// `scale · (∂_θ drift)ᵀ v` into it.
    pub(crate) fn vjp_and_param_grad(
        &self,
        y: &[f64],
        v: &[f64],
        scale: f64,
        grad: Option<&mut [f64]>,
        out: &mut [f64],
        s: &mut Scratch,
    ) {
        self.forward(y, s);
        match self.mode {
            FieldMode::Vector => self.reverse_vector(v, scale, grad, out, s),
            FieldMode::Scalar => {
                self.forward_tangent(v, s);
                self.reverse_scalar(-scale, grad, out, s);
            }
        }
    }

    /// Backprop of `⟨G(y), v⟩` (vector mode).
    fn reverse_vector(
        &self,
        v: &[f64],
        scale: f64,
        mut grad: Option<&mut [f64]>,
        out: &mut [f64],
        s: &mut Scratch,
    ) {
        let k = self.layers.len();
        s.bar[k].copy_from_slice(v);
        for l in (0..k).rev() {
            let slot = self.layers[l];
            // cotangent of the pre-activation at level l+1
            let zbar = &mut s.zbar[..slot.n_out];
            zbar.copy_from_slice(&s.bar[l + 1]);
            if l + 1 < k {
                for (zb, a) in zbar.iter_mut().zip(&s.act[l + 1]) {
                    *zb *= 1.0 - a * a;
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for (i, &ai) in s.act[l].iter().enumerate() {
                    let row = &mut g[slot.w + i * slot.n_out..slot.w + (i + 1) * slot.n_out];
                    axpy(scale * ai, zbar, row);
                }
                axpy(scale, zbar, &mut g[slot.b..slot.b + slot.n_out]);
            }
            let prev = &mut s.bar[l];
            for (i, pi) in prev.iter_mut().enumerate() {
                let row = &self.params[slot.w + i * slot.n_out..slot.w + (i + 1) * slot.n_out];
                *pi = dot(row, zbar);
            }
        }
        out.copy_from_slice(&s.bar[0]);
    }

    /// Reverse sweep over the tangent-augmented forward pass of a scalar
    /// network. With seeds `ǡ_{K-1} = w_out`, `ā_{K-1} = 0` it yields
    /// `ā_0 = (∂²_y G) v` while accumulating `gscale · ∂_θ (∂_y G · v)`.
    /// Writes `-(∂²_y G) v` into `out`.
    fn reverse_scalar(
        &self,
        gscale: f64,
        mut grad: Option<&mut [f64]>,
        out: &mut [f64],
        s: &mut Scratch,
    ) {
        let k = self.layers.len();
        let top = self.layers[k - 1];
        if let Some(g) = grad.as_deref_mut() {
            // d(w_outᵀ ȧ_{K-1})/dw_out = ȧ_{K-1}; the output bias never enters drift.
            axpy(gscale, &s.tan[k - 1], &mut g[top.w..top.b]);
        }
        s.tbar[k - 1].copy_from_slice(&self.params[top.w..top.b]);
        s.bar[k - 1].fill(0.0);
        for l in (1..k).rev() {
            let slot = self.layers[l - 1];
            let n = slot.n_out;
            let (act, ztan) = (&s.act[l], &s.ztan[l]);
            let (tb, ab) = (&s.tbar[l], &mut s.bar[l]);
            let ztbar = &mut s.ztbar[..n];
            let zbar = &mut s.zbar[..n];
            for j in 0..n {
                let sj = 1.0 - act[j] * act[j];
                ztbar[j] = sj * tb[j];
                // s = 1 - a², so ∂s/∂a = -2a
                ab[j] -= 2.0 * act[j] * ztan[j] * tb[j];
                zbar[j] = sj * ab[j];
            }
            if let Some(g) = grad.as_deref_mut() {
                let (a_in, t_in) = (&s.act[l - 1], &s.tan[l - 1]);
                for i in 0..slot.n_in {
                    let row = &mut g[slot.w + i * n..slot.w + (i + 1) * n];
                    axpy(gscale * a_in[i], zbar, row);
                    axpy(gscale * t_in[i], ztbar, row);
                }
                axpy(gscale, zbar, &mut g[slot.b..slot.b + n]);
            }
            let (lo_b, _) = s.bar.split_at_mut(l);
            let (lo_t, _) = s.tbar.split_at_mut(l);
            let (ab_prev, tb_prev) = (&mut lo_b[l - 1], &mut lo_t[l - 1]);
            for i in 0..slot.n_in {
                let row = &self.params[slot.w + i * n..slot.w + (i + 1) * n];
                ab_prev[i] = dot(row, zbar);
                tb_prev[i] = dot(row, ztbar);
            }
        }
        if k == 1 {
            // linear potential: zero Hessian
            out.fill(0.0);
        } else {
            for (o, a) in out.iter_mut().zip(&s.bar[0]) {
                *o = -a;
            }
        }
    }
}

impl Drift for MlpField {
    type Work = Scratch;

    fn dim(&self) -> usize {
        self.dims[0]
    }

    fn work(&self) -> Scratch {
        self.scratch()
    }

    fn eval(&self, y: &[f64], out: &mut [f64], work: &mut Scratch) {
        self.drift_into(y, out, work);
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one_one_one() -> MlpField {
        // W1 = 1, b1 = 0, W2 = 1, b2 = 0
        MlpField::from_params(&[1, 1, 1], FieldMode::Scalar, ParamVector(vec![1.0, 0.0, 1.0, 0.0]))
            .unwrap()
    }

    fn linear_potential(w: &[f64], b: f64) -> MlpField {
        let mut p = w.to_vec();
        p.push(b);
        MlpField::from_params(&[w.len(), 1], FieldMode::Scalar, ParamVector(p)).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        num / den
    }

    #[test]
    fn init_counts_and_zero_biases() {
        let f = MlpField::init(&[2, 50, 50, 1], FieldMode::Scalar, 0).unwrap();
        assert_eq!(f.num_params(), 2751);
        for l in 0..f.num_layers() {
            let (_, b) = f.layer_ranges(l);
            assert!(f.params()[b].iter().all(|&x| x == 0.0));
        }
        let g = MlpField::init(&[2, 50, 50, 1], FieldMode::Scalar, 0).unwrap();
        assert_eq!(f.get_params(), g.get_params());
        assert_eq!(param_count(&[3, 300, 300, 300, 3]), 4 * 300 + 301 * 300 + 301 * 300 + 301 * 3);
        assert_eq!(param_count(&[3, 300, 300, 300, 3]), 182_703);
    }

    #[test]
    fn init_weight_scale_follows_fan_in() {
        let f = MlpField::init(&[2, 400, 1], FieldMode::Scalar, 3).unwrap();
        let (w, _) = f.layer_ranges(1);
        let ws = &f.params()[w];
        let var = ws.iter().map(|x| x * x).sum::<f64>() / ws.len() as f64;
        assert!((var * 400.0 - 1.0).abs() < 0.25, "var*fan_in = {}", var * 400.0);
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(MlpField::init(&[2], FieldMode::Scalar, 0).is_err());
        assert!(MlpField::init(&[2, 0, 1], FieldMode::Scalar, 0).is_err());
        assert!(MlpField::init(&[2, 5, 2], FieldMode::Scalar, 0).is_err());
        assert!(MlpField::init(&[2, 5, 3], FieldMode::Vector, 0).is_err());
    }

    #[test]
    fn potential_examples() {
        let z = MlpField::zeros(&[2, 4, 1], FieldMode::Scalar).unwrap();
        assert_eq!(z.potential(&[0.3, -2.0]).unwrap(), 0.0);
        let f = one_one_one();
        assert_eq!(f.potential(&[0.0]).unwrap(), 0.0);
        assert_relative_eq!(f.potential(&[1.0]).unwrap(), 0.761_594_155_955_764_9, epsilon = 1e-15);
        let v = MlpField::zeros(&[2, 4, 2], FieldMode::Vector).unwrap();
        assert!(matches!(v.potential(&[0.0, 0.0]), Err(OcnError::Mode(_))));
    }

    #[test]
    fn drift_examples() {
        let lin = linear_potential(&[0.5, -2.0], 3.0);
        assert_eq!(lin.drift(&[7.0, 1.0]).unwrap(), vec![-0.5, 2.0]);
        let f = one_one_one();
        assert_relative_eq!(f.drift(&[0.0]).unwrap()[0], -1.0, epsilon = 1e-15);
        let t = 1f64.tanh();
        assert_relative_eq!(f.drift(&[1.0]).unwrap()[0], -(1.0 - t * t), epsilon = 1e-15);
        assert_relative_eq!(f.drift(&[1.0]).unwrap()[0], -0.419_974_341_614_026_2, epsilon = 1e-12);
        assert!(matches!(f.drift(&[f64::NAN]), Err(OcnError::NumericInput(_))));
    }

    #[test]
    fn jacobian_transpose_examples() {
        let lin = linear_potential(&[0.5, -2.0], 3.0);
        assert_eq!(lin.drift_jacobian_transpose_apply(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![0.0, 0.0]);
        let f = one_one_one();
        assert_eq!(f.drift_jacobian_transpose_apply(&[0.0], &[1.0]).unwrap()[0], 0.0);
        let t = 1f64.tanh();
        let expect = -2.0 * (-2.0 * t * (1.0 - t * t));
        let got = f.drift_jacobian_transpose_apply(&[1.0], &[2.0]).unwrap()[0];
        assert_relative_eq!(got, expect, epsilon = 1e-14);
        assert_relative_eq!(got, 1.279_400_016_898_449, epsilon = 1e-12);
    }

    #[test]
    fn param_grad_examples() {
        let lin = linear_potential(&[0.5, -2.0], 3.0);
        let g = lin.drift_param_grad_apply(&[1.0, 2.0], &[3.0, -4.0]).unwrap();
        assert_eq!(g.as_slice(), &[-3.0, 4.0, 0.0]);
        let f = MlpField::init(&[2, 8, 1], FieldMode::Scalar, 5).unwrap();
        let z = f.drift_param_grad_apply(&[0.3, -0.7], &[0.0, 0.0]).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn param_roundtrip_and_length_check() {
        let mut f = MlpField::init(&[2, 8, 1], FieldMode::Scalar, 1).unwrap();
        let p = f.get_params();
        let before = f.clone();
        f.set_params(p.clone()).unwrap();
        assert_eq!(f, before);
        assert!(f.set_params(ParamVector(vec![0.0; 3])).is_err());
        let mut bad = p.clone();
        bad.0[0] = f64::INFINITY;
        assert!(f.set_params(bad).is_err());
    }

    // ----- finite-difference oracles (independent of the analytic operators) -----

    fn fd_drift(f: &MlpField, y: &[f64], h: f64) -> Vec<f64> {
        // drift = -∇G in scalar mode
        (0..y.len())
            .map(|i| {
                let mut yp = y.to_vec();
                let mut ym = y.to_vec();
                yp[i] += h;
                ym[i] -= h;
                -(f.potential(&yp).unwrap() - f.potential(&ym).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    fn fd_jt(f: &MlpField, y: &[f64], v: &[f64], h: f64) -> Vec<f64> {
        // (∂_y drift)ᵀ v via central differences of ⟨drift(y), v⟩
        (0..y.len())
            .map(|i| {
                let mut yp = y.to_vec();
                let mut ym = y.to_vec();
                yp[i] += h;
                ym[i] -= h;
                let dp: f64 = f.drift(&yp).unwrap().iter().zip(v).map(|(a, b)| a * b).sum();
                let dm: f64 = f.drift(&ym).unwrap().iter().zip(v).map(|(a, b)| a * b).sum();
                (dp - dm) / (2.0 * h)
            })
            .collect()
    }

    fn fd_jv(f: &MlpField, y: &[f64], v: &[f64], h: f64) -> Vec<f64> {
        let yp: Vec<f64> = y.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let ym: Vec<f64> = y.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let dp = f.drift(&yp).unwrap();
        let dm = f.drift(&ym).unwrap();
        dp.iter().zip(&dm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    fn fd_param(f: &MlpField, y: &[f64], v: &[f64], h: f64) -> Vec<f64> {
        let base = f.get_params();
        (0..base.len())
            .map(|k| {
                let mut pp = base.clone();
                let mut pm = base.clone();
                pp.0[k] += h;
                pm.0[k] -= h;
                let fp = MlpField::from_params(f.dims(), f.mode(), pp).unwrap();
                let fm = MlpField::from_params(f.dims(), f.mode(), pm).unwrap();
                let dp: f64 = fp.drift(y).unwrap().iter().zip(v).map(|(a, b)| a * b).sum();
                let dm: f64 = fm.drift(y).unwrap().iter().zip(v).map(|(a, b)| a * b).sum();
                (dp - dm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn param_grad_matches_finite_differences_2_8_1() {
        let f = MlpField::init(&[2, 8, 1], FieldMode::Scalar, 11).unwrap();
        let (y, v) = ([0.3, -0.7], [1.0, 2.0]);
        let got = f.drift_param_grad_apply(&y, &v).unwrap();
        let fd = fd_param(&f, &y, &v, 1e-5);
        assert!(rel_err(got.as_slice(), &fd) <= 1e-6, "rel err {}", rel_err(got.as_slice(), &fd));
    }

    #[test]
    fn derivative_consistency_both_modes() {
        for (seed, dims, mode) in [
            (1u64, vec![2, 8, 1], FieldMode::Scalar),
            (2, vec![3, 6, 5, 1], FieldMode::Scalar),
            (3, vec![2, 7, 2], FieldMode::Vector),
            (4, vec![3, 5, 4, 3], FieldMode::Vector),
            (5, vec![1, 8, 1], FieldMode::Scalar),
        ] {
            let f = MlpField::init(&dims, mode, seed).unwrap();
            let d = dims[0];
            let y: Vec<f64> = (0..d).map(|i| 0.4 - 0.3 * i as f64).collect();
            let v: Vec<f64> = (0..d).map(|i| 1.0 + 0.5 * i as f64).collect();
            if mode == FieldMode::Scalar {
                let e = rel_err(&f.drift(&y).unwrap(), &fd_drift(&f, &y, 1e-5));
                assert!(e <= 1e-6, "drift {dims:?}: {e}");
            }
            let e = rel_err(&f.drift_jacobian_transpose_apply(&y, &v).unwrap(), &fd_jt(&f, &y, &v, 1e-5));
            assert!(e <= 1e-6, "jt {dims:?}: {e}");
            let e = rel_err(&f.drift_jacobian_apply(&y, &v).unwrap(), &fd_jv(&f, &y, &v, 1e-5));
            assert!(e <= 1e-6, "jv {dims:?}: {e}");
            let e = rel_err(f.drift_param_grad_apply(&y, &v).unwrap().as_slice(), &fd_param(&f, &y, &v, 1e-5));
            assert!(e <= 1e-6, "param {dims:?}: {e}");
        }
    }

    #[test]
    fn scalar_jacobian_is_symmetric() {
        let f = MlpField::init(&[3, 9, 7, 1], FieldMode::Scalar, 21).unwrap();
        let y = [0.2, -0.5, 0.9];
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                let mut e = [0.0; 3];
                e[j] = 1.0;
                f.drift_jacobian_transpose_apply(&y, &e).unwrap()
            })
            .collect();
        let scale = cols.iter().flatten().fold(0f64, |m, x| m.max(x.abs()));
        for i in 0..3 {
            for j in 0..3 {
                assert!((cols[i][j] - cols[j][i]).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn jacobian_is_continuous_in_y() {
        let f = MlpField::init(&[2, 16, 16, 1], FieldMode::Scalar, 8).unwrap();
        let v = [0.6, -0.8];
        let mut k_max = 0f64;
        for i in 0..50 {
            let y = [-2.0 + 0.08 * i as f64, 1.5 - 0.06 * i as f64];
            let yp = [y[0] + 7e-7, y[1] - 7e-7];
            let a = f.drift_jacobian_transpose_apply(&y, &v).unwrap();
            let b = f.drift_jacobian_transpose_apply(&yp, &v).unwrap();
            let dy = ((7e-7f64).powi(2) * 2.0).sqrt();
            let k = rel_err(&a, &b) * a.iter().map(|x| x * x).sum::<f64>().sqrt() / dy;
            k_max = k_max.max(k);
        }
        // empirical Lipschitz bound of the Hessian-vector map
        assert!(k_max.is_finite() && k_max < 100.0, "K = {k_max}");
    }

    proptest! {
        #[test]
        fn operators_are_linear_in_v(
            seed in 0u64..1000,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            u in proptest::collection::vec(-2.0f64..2.0, 2),
            w in proptest::collection::vec(-2.0f64..2.0, 2),
            vector in any::<bool>(),
        ) {
            let (dims, mode) = if vector { (vec![2, 6, 2], FieldMode::Vector) } else { (vec![2, 6, 1], FieldMode::Scalar) };
            let f = MlpField::init(&dims, mode, seed).unwrap();
            let y = [0.1, -0.4];
            let comb: Vec<f64> = u.iter().zip(&w).map(|(x, z)| a * x + b * z).collect();
            let lhs = f.drift_jacobian_transpose_apply(&y, &comb).unwrap();
            let ju = f.drift_jacobian_transpose_apply(&y, &u).unwrap();
            let jw = f.drift_jacobian_transpose_apply(&y, &w).unwrap();
            for i in 0..2 {
                let rhs = a * ju[i] + b * jw[i];
                prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
            let lhs = f.drift_param_grad_apply(&y, &comb).unwrap();
            let pu = f.drift_param_grad_apply(&y, &u).unwrap();
            let pw = f.drift_param_grad_apply(&y, &w).unwrap();
            for k in 0..lhs.len() {
                let rhs = a * pu[k] + b * pw[k];
                prop_assert!((lhs[k] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn flatten_restore_is_identity(seed in 0u64..10_000) {
            let f = MlpField::init(&[3, 5, 4, 3], FieldMode::Vector, seed).unwrap();
            let g = MlpField::from_params(f.dims(), f.mode(), f.get_params()).unwrap();
            prop_assert_eq!(f, g);
        }
    }
}
