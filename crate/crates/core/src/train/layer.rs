//! Linear layers: dense reference, double-pruned sparse, and the
//! dynamic-mask baseline.

use crate::dense::DenseMatrix;
use crate::error::{shape_err, Error, Result};
use crate::nm::{magnitude_mask, NmCompressed, NmMask, NmPattern, Orientation};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::sparse::{
    fused_sparse_lowrank_forward, prune_and_compress, sparse_add, spmm, update_sparse_values, AdapterPair,
};
use crate::train::optim::{Moments, Optimizer};

fn add_bias<T: Scalar>(y: &mut DenseMatrix<T>, bias: &Option<Vec<T>>) -> Result<()> {
    if let Some(b) = bias {
        y.add_row_vector(b)?;
    }
    Ok(())
}

fn check_cols<T: Scalar>(m: &DenseMatrix<T>, cols: usize, op: &'static str) -> Result<()> {
    if m.cols() != cols {
        return Err(shape_err(op, format!("{cols} columns"), format!("{}x{}", m.rows(), m.cols())));
    }
    Ok(())
}

fn check_pair<T: Scalar>(x: &DenseMatrix<T>, dy: &DenseMatrix<T>, d_in: usize, d_out: usize) -> Result<()> {
    check_cols(x, d_in, "backward_weight")?;
    check_cols(dy, d_out, "backward_weight")?;
    if x.rows() != dy.rows() {
        return Err(shape_err("backward_weight", format!("{} rows in dY", x.rows()), dy.rows()));
    }
    Ok(())
}

fn step_bias<T: Scalar>(
    bias: &mut Option<Vec<T>>,
    grad: &Option<Vec<T>>,
    state: &mut Moments<T>,
    opt: &Optimizer<T>,
) -> Result<()> {
    match (bias, grad) {
        (Some(b), Some(g)) => {
            let g = opt.combine(g, b, false);
            opt.update(state, b, &g)
        }
        (None, None) => Ok(()),
        _ => Err(Error::InvalidArgument("bias gradient does not match layer".into())),
    }
}

/// Plain `Y = X W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLinear<T = f32> {
    weight: DenseMatrix<T>,
    bias: Option<Vec<T>>,
    state_w: Moments<T>,
    state_b: Moments<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T> {
    pub weight: DenseMatrix<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> DenseLinear<T> {
    pub fn new(weight: DenseMatrix<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(shape_err("DenseLinear::new", weight.rows(), b.len()));
            }
        }
        Ok(Self {
            weight,
            bias,
            state_w: Moments::default(),
            state_b: Moments::default(),
        })
    }

    pub fn weight(&self) -> &DenseMatrix<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut DenseMatrix<T> {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<T>> {
        self.bias.as_mut()
    }

    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let mut y = x.matmul_nt(&self.weight)?;
        add_bias(&mut y, &self.bias)?;
        Ok(y)
    }

    pub fn backward_input(&self, dy: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        dy.matmul(&self.weight)
    }

    pub fn backward_weight(&self, x: &DenseMatrix<T>, dy: &DenseMatrix<T>) -> Result<DenseGrads<T>> {
        check_pair(x, dy, self.weight.cols(), self.weight.rows())?;
        Ok(DenseGrads {
            weight: dy.matmul_tn(x)?,
            bias: self.bias.as_ref().map(|_| dy.column_sums()),
        })
    }

    pub fn optimizer_step(&mut self, grads: &DenseGrads<T>, opt: &Optimizer<T>) -> Result<()> {
        if grads.weight.shape() != self.weight.shape() {
            return Err(shape_err(
                "DenseLinear::optimizer_step",
                format!("{:?}", self.weight.shape()),
                format!("{:?}", grads.weight.shape()),
            ));
        }
        let g = opt.combine(grads.weight.as_slice(), self.weight.as_slice(), true);
        opt.update(&mut self.state_w, self.weight.as_mut_slice(), &g)?;
        step_bias(&mut self.bias, &grads.bias, &mut self.state_b, opt)
    }
}

/// The trainable double-pruned unit.
///
/// `w_fwd` is the row-pruned weight (`d_out x d_in`, groups along `d_in`).
/// `w_bwd` stores the double-pruned weight transposed (`d_in x d_out`, groups
/// along `d_out`) so the input gradient is one more SpMM. The row mask never
/// changes; the column pass is re-run on the new values after every update.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLinearLayer<T = f32> {
    w_fwd: NmCompressed<T>,
    w_bwd: NmCompressed<T>,
    mask: NmMask,
    bwd_mask: NmMask,
    bias: Option<Vec<T>>,
    adapters: AdapterPair<T>,
    adapter_active: bool,
    adapter_decay: bool,
    state_w: Moments<T>,
    state_b: Moments<T>,
    state_up: Moments<T>,
    state_down: Moments<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrads<T> {
    /// `dY^T X` masked by the row mask, same codes as `w_fwd`.
    pub weight: NmCompressed<T>,
    pub bias: Option<Vec<T>>,
    /// `(dL, dR)` when adapters are active.
    pub adapters: Option<(DenseMatrix<T>, DenseMatrix<T>)>,
}

impl<T: Scalar> SparseLinearLayer<T> {
    /// Prunes `weight` with a row-grouped `mask` and builds both copies.
    pub fn new(weight: &DenseMatrix<T>, mask: NmMask, bias: Option<Vec<T>>) -> Result<Self> {
        if mask.orientation() != Orientation::Rows {
            return Err(Error::InvalidArgument("sparse layer needs a row-grouped mask".into()));
        }
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(shape_err("SparseLinearLayer::new", weight.rows(), b.len()));
            }
        }
        weight.ensure_finite("SparseLinearLayer::new")?;
        let w_fwd = NmCompressed::compress(weight, &mask)?;
        let (w_bwd, bwd_mask) = Self::extract_backward(&w_fwd, &mask)?;
        let (d_out, d_in) = weight.shape();
        Ok(Self {
            w_fwd,
            w_bwd,
            mask,
            bwd_mask,
            bias,
            adapters: AdapterPair::absent(d_out, d_in),
            adapter_active: false,
            adapter_decay: false,
            state_w: Moments::default(),
            state_b: Moments::default(),
            state_up: Moments::default(),
            state_down: Moments::default(),
        })
    }

    /// `compress(W_R^T, double_prune(W_R)^T)`, fused into one pass.
    fn extract_backward(w_fwd: &NmCompressed<T>, mask: &NmMask) -> Result<(NmCompressed<T>, NmMask)> {
        w_fwd.double_pruned_transpose(mask)
    }

    pub fn d_out(&self) -> usize {
        self.w_fwd.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w_fwd.cols()
    }

    pub fn pattern(&self) -> NmPattern {
        self.mask.pattern()
    }

    pub fn w_fwd(&self) -> &NmCompressed<T> {
        &self.w_fwd
    }

    pub fn w_bwd(&self) -> &NmCompressed<T> {
        &self.w_bwd
    }

    /// Row mask used by the forward pass and the weight gradient.
    pub fn mask(&self) -> &NmMask {
        &self.mask
    }

    /// Double-pruned mask in `d_out x d_in` orientation.
    pub fn backward_mask(&self) -> &NmMask {
        &self.bwd_mask
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<T>> {
        self.bias.as_mut()
    }

    pub fn adapters(&self) -> &AdapterPair<T> {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut AdapterPair<T> {
        &mut self.adapters
    }

    pub fn adapter_active(&self) -> bool {
        self.adapter_active
    }

    /// Whether adapter factors receive weight decay (off by default).
    pub fn set_adapter_decay(&mut self, on: bool) {
        self.adapter_decay = on;
    }

    /// Installs zero-product adapters of `rank` and turns the adapter path on.
    pub fn activate_adapters(&mut self, rank: usize, rng: &mut SeededRng) -> Result<()> {
        let adapters = AdapterPair::zero_product_init(self.d_out(), self.d_in(), rank, rng)?;
        self.set_adapters(adapters, true)
    }

    pub fn set_adapters(&mut self, adapters: AdapterPair<T>, active: bool) -> Result<()> {
        if adapters.d_out() != self.d_out() || adapters.d_in() != self.d_in() {
            return Err(shape_err(
                "set_adapters",
                format!("{}x{}", self.d_out(), self.d_in()),
                format!("{}x{}", adapters.d_out(), adapters.d_in()),
            ));
        }
        self.adapters = adapters;
        self.adapter_active = active && self.adapters.rank() > 0;
        self.state_up = Moments::default();
        self.state_down = Moments::default();
        Ok(())
    }

    /// Replaces the kept values from a dense matrix and re-derives `w_bwd`.
    pub fn set_weight_values(&mut self, w_new: &DenseMatrix<T>) -> Result<()> {
        update_sparse_values(&mut self.w_fwd, w_new)?;
        self.refresh_backward()
    }

    fn refresh_backward(&mut self) -> Result<()> {
        let (w_bwd, bwd_mask) = Self::extract_backward(&self.w_fwd, &self.mask)?;
        self.w_bwd = w_bwd;
        self.bwd_mask = bwd_mask;
        Ok(())
    }

    /// Effective dense weight `W^R + L R` (adapter term only when active).
    pub fn effective_weight(&self) -> DenseMatrix<T> {
        let w = self.w_fwd.decompress();
        if self.adapter_active {
            w.add(&self.adapters.product()).expect("adapter shape checked")
        } else {
            w
        }
    }

    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let mut y = if self.adapter_active {
            fused_sparse_lowrank_forward(x, &self.w_fwd, &self.adapters)?
        } else {
            spmm(x, &self.w_fwd)?
        };
        add_bias(&mut y, &self.bias)?;
        Ok(y)
    }

    /// `dY W^{R,C}`, plus `(dY L) R` with adapters.
    pub fn backward_input(&self, dy: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let mut dx = spmm(dy, &self.w_bwd)?;
        if self.adapter_active {
            let t = dy.matmul(self.adapters.up())?;
            dx.axpy(T::one(), &t.matmul(self.adapters.down())?)?;
        }
        Ok(dx)
    }

    pub fn backward_weight(&self, x: &DenseMatrix<T>, dy: &DenseMatrix<T>) -> Result<SparseGrads<T>> {
        check_pair(x, dy, self.d_in(), self.d_out())?;
        let dense = dy.matmul_tn(x)?;
        let weight = self.compress_gradient(&dense)?;
        let adapters = if self.adapter_active {
            let xr = x.matmul_nt(self.adapters.down())?;
            let d_up = dy.matmul_tn(&xr)?;
            let dyl = dy.matmul(self.adapters.up())?;
            let d_down = dyl.matmul_tn(x)?;
            Some((d_up, d_down))
        } else {
            None
        };
        Ok(SparseGrads {
            weight,
            bias: self.bias.as_ref().map(|_| dy.column_sums()),
            adapters,
        })
    }

    /// `prune_and_compress(g, mask)`. When every group keeps exactly `n`
    /// entries the forward codes already name the kept positions, so a gather
    /// is enough.
    fn compress_gradient(&self, g: &DenseMatrix<T>) -> Result<NmCompressed<T>> {
        let mut out = self.w_fwd.clone();
        update_sparse_values(&mut out, g)?;
        if self.mask.kept_count() != out.values().len() {
            return prune_and_compress(g, &self.mask);
        }
        Ok(out)
    }

    /// One update: `g = sparse_add(grad, W, 1/gamma, alpha)`, optimizer rule
    /// on the kept values, then both compressed copies are refreshed.
    pub fn optimizer_step(&mut self, grads: &SparseGrads<T>, opt: &Optimizer<T>) -> Result<()> {
        let g = sparse_add(&grads.weight, &self.w_fwd, T::one() / opt.grad_scale, opt.weight_decay)?;
        let mut values = self.w_fwd.values().to_vec();
        opt.update(&mut self.state_w, &mut values, g.values())?;
        // same result as update_sparse_values with the decompressed update,
        // without the dense round trip
        self.w_fwd.set_values(values)?;
        self.refresh_backward()?;
        step_bias(&mut self.bias, &grads.bias, &mut self.state_b, opt)?;
        match (&grads.adapters, self.adapter_active) {
            (Some((d_up, d_down)), true) => {
                let decay = self.adapter_decay;
                let up = self.adapters.up_mut();
                let g = opt.combine(d_up.as_slice(), up.as_slice(), decay);
                opt.update(&mut self.state_up, up.as_mut_slice(), &g)?;
                let down = self.adapters.down_mut();
                let g = opt.combine(d_down.as_slice(), down.as_slice(), decay);
                opt.update(&mut self.state_down, down.as_mut_slice(), &g)
            }
            (None, false) => Ok(()),
            _ => Err(Error::InvalidArgument("adapter gradients do not match layer state".into())),
        }
    }

    /// Number of optimizer moment entries held for the weight.
    pub fn weight_state_len(&self) -> usize {
        self.state_w.len()
    }
}

/// Dynamic-mask baseline: dense shadow weight, magnitude mask recomputed
/// after every step, straight-through gradient to all weights and a decay
/// pulling pruned weights toward zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSparseLinear<T = f32> {
    weight: DenseMatrix<T>,
    mask: NmMask,
    bias: Option<Vec<T>>,
    decay_factor: T,
    state_w: Moments<T>,
    state_b: Moments<T>,
}

impl<T: Scalar> DynamicSparseLinear<T> {
    pub fn new(weight: DenseMatrix<T>, pattern: NmPattern, bias: Option<Vec<T>>, decay_factor: f64) -> Result<Self> {
        let mask = magnitude_mask(&weight, pattern)?;
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(shape_err("DynamicSparseLinear::new", weight.rows(), b.len()));
            }
        }
        Ok(Self {
            weight,
            mask,
            bias,
            decay_factor: T::lit(decay_factor),
            state_w: Moments::default(),
            state_b: Moments::default(),
        })
    }

    pub fn weight(&self) -> &DenseMatrix<T> {
        &self.weight
    }

    pub fn mask(&self) -> &NmMask {
        &self.mask
    }

    pub fn decay_factor(&self) -> T {
        self.decay_factor
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn masked_weight(&self) -> DenseMatrix<T> {
        self.mask.apply(&self.weight).expect("mask shape fixed at construction")
    }

    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let mut y = x.matmul_nt(&self.masked_weight())?;
        add_bias(&mut y, &self.bias)?;
        Ok(y)
    }

    pub fn backward_input(&self, dy: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        dy.matmul(&self.masked_weight())
    }

    pub fn backward_weight(&self, x: &DenseMatrix<T>, dy: &DenseMatrix<T>) -> Result<DenseGrads<T>> {
        check_pair(x, dy, self.weight.cols(), self.weight.rows())?;
        Ok(DenseGrads {
            weight: dy.matmul_tn(x)?,
            bias: self.bias.as_ref().map(|_| dy.column_sums()),
        })
    }

    /// Adds `decay * (1 - mask) * W` to the gradient, updates the dense
    /// weight, recomputes the magnitude mask and returns the fraction of
    /// mask entries that changed.
    pub fn dynamic_baseline_step(&mut self, grads: &DenseGrads<T>, decay_factor: T, opt: &Optimizer<T>) -> Result<f64> {
        if grads.weight.shape() != self.weight.shape() {
            return Err(shape_err(
                "dynamic_baseline_step",
                format!("{:?}", self.weight.shape()),
                format!("{:?}", grads.weight.shape()),
            ));
        }
        let keep = self.mask.keep();
        let raw: Vec<T> = grads
            .weight
            .as_slice()
            .iter()
            .zip(self.weight.as_slice())
            .zip(keep)
            .map(|((&g, &w), &k)| if k { g } else { g + decay_factor * w })
            .collect();
        let g = opt.combine(&raw, self.weight.as_slice(), true);
        opt.update(&mut self.state_w, self.weight.as_mut_slice(), &g)?;
        step_bias(&mut self.bias, &grads.bias, &mut self.state_b, opt)?;
        let next = magnitude_mask(&self.weight, self.mask.pattern())?;
        let diff = next.hamming_fraction(&self.mask)?;
        self.mask = next;
        Ok(diff)
    }
}

/// Any linear layer of a toy model.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Linear<T = f32> {
    Dense(DenseLinear<T>),
    Sparse(SparseLinearLayer<T>),
    Dynamic(DynamicSparseLinear<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearGrads<T> {
    Dense(DenseGrads<T>),
    Sparse(SparseGrads<T>),
}

impl<T: Scalar> LinearGrads<T> {
    /// Dense view of the weight gradient (zeros at pruned positions for sparse).
    pub fn weight_dense(&self) -> DenseMatrix<T> {
        match self {
            LinearGrads::Dense(g) => g.weight.clone(),
            LinearGrads::Sparse(g) => g.weight.decompress(),
        }
    }

    pub fn bias(&self) -> Option<&[T]> {
        match self {
            LinearGrads::Dense(g) => g.bias.as_deref(),
            LinearGrads::Sparse(g) => g.bias.as_deref(),
        }
    }
}

impl<T: Scalar> Linear<T> {
    pub fn d_out(&self) -> usize {
        match self {
            Linear::Dense(l) => l.weight.rows(),
            Linear::Sparse(l) => l.d_out(),
            Linear::Dynamic(l) => l.weight.rows(),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Linear::Dense(l) => l.weight.cols(),
            Linear::Sparse(l) => l.d_in(),
            Linear::Dynamic(l) => l.weight.cols(),
        }
    }

    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        match self {
            Linear::Dense(l) => l.forward(x),
            Linear::Sparse(l) => l.forward(x),
            Linear::Dynamic(l) => l.forward(x),
        }
    }

    /// Input gradient and parameter gradients for one layer.
    pub fn backward(&self, x: &DenseMatrix<T>, dy: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, LinearGrads<T>)> {
        Ok(match self {
            Linear::Dense(l) => (l.backward_input(dy)?, LinearGrads::Dense(l.backward_weight(x, dy)?)),
            Linear::Sparse(l) => (l.backward_input(dy)?, LinearGrads::Sparse(l.backward_weight(x, dy)?)),
            Linear::Dynamic(l) => (l.backward_input(dy)?, LinearGrads::Dense(l.backward_weight(x, dy)?)),
        })
    }

    pub fn step(&mut self, grads: &LinearGrads<T>, opt: &Optimizer<T>) -> Result<()> {
        match (self, grads) {
            (Linear::Dense(l), LinearGrads::Dense(g)) => l.optimizer_step(g, opt),
            (Linear::Sparse(l), LinearGrads::Sparse(g)) => l.optimizer_step(g, opt),
            (Linear::Dynamic(l), LinearGrads::Dense(g)) => {
                let decay = l.decay_factor;
                l.dynamic_baseline_step(g, decay, opt).map(|_| ())
            }
            _ => Err(Error::InvalidArgument("gradient kind does not match layer kind".into())),
        }
    }

    /// Only valid for the dynamic baseline.
    pub fn dynamic_baseline_step(&mut self, grads: &LinearGrads<T>, decay_factor: T, opt: &Optimizer<T>) -> Result<f64> {
        match (self, grads) {
            (Linear::Dynamic(l), LinearGrads::Dense(g)) => l.dynamic_baseline_step(g, decay_factor, opt),
            (Linear::Dynamic(_), _) => Err(Error::InvalidArgument("dynamic layer needs a dense gradient".into())),
            _ => Err(Error::InvalidArgument("dynamic_baseline_step requires a dynamic-mask layer".into())),
        }
    }

    pub fn bias(&self) -> Option<&[T]> {
        match self {
            Linear::Dense(l) => l.bias(),
            Linear::Sparse(l) => l.bias(),
            Linear::Dynamic(l) => l.bias(),
        }
    }

    /// Current forward mask, if the layer is pruned.
    pub fn mask(&self) -> Option<&NmMask> {
        match self {
            Linear::Dense(_) => None,
            Linear::Sparse(l) => Some(l.mask()),
            Linear::Dynamic(l) => Some(l.mask()),
        }
    }

    pub fn as_sparse(&self) -> Option<&SparseLinearLayer<T>> {
        match self {
            Linear::Sparse(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_sparse_mut(&mut self) -> Option<&mut SparseLinearLayer<T>> {
        match self {
            Linear::Sparse(l) => Some(l),
            _ => None,
        }
    }

    /// Dense weight seen by the forward pass.
    pub fn effective_weight(&self) -> DenseMatrix<T> {
        match self {
            Linear::Dense(l) => l.weight.clone(),
            Linear::Sparse(l) => l.effective_weight(),
            Linear::Dynamic(l) => l.masked_weight(),
        }
    }

    /// Stored parameter count (values only, no index metadata).
    pub fn parameter_count(&self) -> usize {
        let bias = |b: &Option<Vec<T>>| b.as_ref().map_or(0, Vec::len);
        match self {
            Linear::Dense(l) => l.weight.len() + bias(&l.bias),
            Linear::Sparse(l) => {
                let a = if l.adapter_active { l.adapters.up().len() + l.adapters.down().len() } else { 0 };
                l.w_fwd.values().len() + bias(&l.bias) + a
            }
            Linear::Dynamic(l) => l.weight.len() + bias(&l.bias),
        }
    }
}
