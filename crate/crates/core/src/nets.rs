//! Perceptrons, the hypernetwork `g1(C; Θ) → W`, the per-interval network
//! `g2(μ, vec Σ; W)`, the state prior and the constraint heads that turn raw
//! network outputs into valid dynamics.
//!
//! Flat parameter vectors are laid out layer by layer, each layer as its
//! weight matrix (row-major, `out × in`) followed by its bias.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esde::GaussianBelief;
use crate::linalg::Mat;
use crate::real::{inv_softplus_f64, Real};
use crate::spectral::{normalize_basis, EigenBasis, Spectrum};

/// Floor added to the softplus imaginary-part head.
pub const IMAG_FLOOR: f64 = 1e-3;
/// Floor added to observation-noise variances.
pub const NOISE_FLOOR: f64 = 1e-4;
/// Isotropic floor added to the prior covariance.
pub const PRIOR_FLOOR: f64 = 1e-4;
/// Condition number above which the basis penalty activates.
pub const PENALTY_COND: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths from input to output; hidden layers use `activation`, the
/// output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

/// Activations of every layer from one f64 forward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Self {
        let mut layer_sizes = vec![input];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(output);
        MlpSpec { layer_sizes, activation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes[1..].contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {:?}", self.layer_sizes)));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check(&self, n_params: usize, n_in: usize) -> Result<()> {
        if n_params != self.n_params() || n_in != self.input_size() {
            return Err(Error::Dimension(format!(
                "network expects {} parameters and input {}, got {} and {}",
                self.n_params(),
                self.input_size(),
                n_params,
                n_in
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T]) -> Result<Vec<T>> {
        self.check(params.len(), x.len())?;
        let layers = self.layer_sizes.len() - 1;
        let mut h = x.to_vec();
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let mut next = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let mut acc = b[o];
                for (i, &hi) in h.iter().enumerate() {
                    acc = acc + w[o * n_in + i] * hi;
                }
                next.push(if l + 1 < layers { self.activation.apply(acc) } else { acc });
            }
            h = next;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, params: &[f64], x: &[f64]) -> Result<MlpTrace> {
        self.check(params.len(), x.len())?;
        let layers = self.layer_sizes.len() - 1;
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let h = &acts[l];
            let mut next = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &params[off + o * n_in..off + (o + 1) * n_in];
                let mut acc = params[off + n_in * n_out + o];
                for (wi, hi) in row.iter().zip(h) {
                    acc += wi * hi;
                }
                next.push(if l + 1 < layers { self.activation.apply(acc) } else { acc });
            }
            off += n_in * n_out + n_out;
            acts.push(next);
        }
        Ok(MlpTrace { acts })
    }

    /// Pull `grad_out` back through a traced pass. Returns gradients with
    /// respect to the parameters and to the input.
    pub fn backward(&self, params: &[f64], trace: &MlpTrace, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let layers = self.layer_sizes.len() - 1;
        let mut grad = vec![0.0; params.len()];
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.layer_sizes[l] * self.layer_sizes[l + 1] + self.layer_sizes[l + 1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            if l + 1 < layers {
                for (d, &y) in delta.iter_mut().zip(&trace.acts[l + 1]) {
                    *d *= self.activation.slope(y);
                }
            }
            let off = offsets[l];
            let h = &trace.acts[l];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[off + n_in * n_out + o] += d;
                let row = off + o * n_in;
                for i in 0..n_in {
                    grad[row + i] += d * h[i];
                    prev[i] += d * params[row + i];
                }
            }
            delta = prev;
        }
        (grad, delta)
    }

    /// Glorot-uniform weights and zero biases; the last layer's weights are
    /// further multiplied by `last_scale`.
    pub fn init_params<R: Rng>(&self, rng: &mut R, last_scale: f64) -> Vec<f64> {
        let layers = self.layer_sizes.len() - 1;
        let mut out = Vec::with_capacity(self.n_params());
        for l in 0..layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let mut bound = libm::sqrt(6.0 / (n_in + n_out) as f64);
            if l + 1 == layers {
                bound *= last_scale;
            }
            for _ in 0..n_in * n_out {
                out.push(if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 });
            }
            out.extend(core::iter::repeat_n(0.0, n_out));
        }
        out
    }

    /// Offset of the output layer's bias inside the parameter vector.
    pub fn output_bias_offset(&self) -> usize {
        self.n_params() - self.output_size()
    }
}

/// Shape and constraint settings shared by every head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Latent dimension.
    pub n: usize,
    /// Observed leading coordinates.
    pub m: usize,
    /// Control dimension.
    pub k: usize,
    pub context_dim: usize,
    pub n_complex_pairs: usize,
    pub stable: bool,
    pub hypernet_disabled: bool,
    /// Period of dynamics refreshes between observations.
    pub interval_dt: f64,
}

impl HeadConfig {
    pub fn n_real(&self) -> usize {
        self.n - 2 * self.n_complex_pairs
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || 2 * self.n_complex_pairs > self.n || self.m == 0 || self.m > self.n {
            return Err(Error::Config(format!(
                "inconsistent sizes n = {}, m = {}, complex pairs = {}",
                self.n, self.m, self.n_complex_pairs
            )));
        }
        if !(self.interval_dt > 0.0 && self.interval_dt.is_finite()) {
            return Err(Error::Config(format!("interval_dt must be positive, got {}", self.interval_dt)));
        }
        Ok(())
    }

    /// `(μ, vec Σ)`.
    pub fn g2_input_size(&self) -> usize {
        self.n + self.n * self.n
    }

    /// `[real eig raws][pair (a, b) raws][V n×n][Q Cholesky n(n+1)/2]`.
    pub fn g2_output_size(&self) -> usize {
        self.n_real() + 2 * self.n_complex_pairs + self.n * self.n + tri(self.n)
    }

    /// `[μ0 n][L0 n(n+1)/2][α n][R raws m]`.
    pub fn prior_output_size(&self) -> usize {
        self.n + tri(self.n) + self.n + self.m
    }

    /// Raw g2 outputs giving moderate decay, unit rotation, identity basis and
    /// diffusion variances of `q_var`.
    pub fn default_dynamics_raw(&self, q_var: f64) -> Vec<f64> {
        let decay = if self.stable { inv_softplus_f64(0.5) } else { -0.5 };
        let mut raw = vec![decay; self.n_real()];
        for _ in 0..self.n_complex_pairs {
            raw.push(decay);
            raw.push(inv_softplus_f64(1.0 - IMAG_FLOOR));
        }
        for i in 0..self.n {
            for j in 0..self.n {
                raw.push(if i == j { 1.0 } else { 0.0 });
            }
        }
        let diag = inv_softplus_f64(libm::sqrt(q_var));
        for i in 0..self.n {
            for j in 0..=i {
                raw.push(if i == j { diag } else { 0.0 });
            }
        }
        raw
    }

    /// Raw prior outputs: zero mean, unit covariance, zero offset and
    /// observation variances of `r_var`.
    pub fn default_prior_raw(&self, r_var: f64) -> Vec<f64> {
        let mut raw = vec![0.0; self.n];
        for i in 0..self.n {
            for j in 0..=i {
                raw.push(if i == j { inv_softplus_f64(1.0) } else { 0.0 });
            }
        }
        raw.extend(core::iter::repeat_n(0.0, self.n));
        raw.extend(core::iter::repeat_n(inv_softplus_f64(r_var - NOISE_FLOOR), self.m));
        raw
    }
}

fn tri(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Hidden widths and activation of the three networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub g1_hidden: Vec<usize>,
    pub g2_hidden: Vec<usize>,
    pub prior_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            g1_hidden: vec![64, 64],
            g2_hidden: vec![32],
            prior_hidden: vec![32],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperModel {
    pub head_config: HeadConfig,
    pub g1_spec: MlpSpec,
    pub g2_spec: MlpSpec,
    pub prior_spec: MlpSpec,
    pub theta: Vec<f64>,
    pub prior_params: Vec<f64>,
    pub b_global: Mat<f64>,
    /// `true` marks a free row of `B`.
    pub b_mask: Vec<bool>,
}

impl HyperModel {
    /// Fresh model. The output layers start near a fixed, well-conditioned
    /// regime so that early training sees finite losses.
    pub fn new<R: Rng>(head_config: HeadConfig, arch: &Architecture, b_mask: Vec<bool>, rng: &mut R) -> Result<Self> {
        head_config.validate()?;
        let cfg = &head_config;
        let g2_spec = MlpSpec::new(cfg.g2_input_size(), &arch.g2_hidden, cfg.g2_output_size(), arch.activation);
        let g1_spec = MlpSpec::new(cfg.context_dim, &arch.g1_hidden, g2_spec.n_params(), arch.activation);
        let prior_spec = MlpSpec::new(cfg.context_dim, &arch.prior_hidden, cfg.prior_output_size(), arch.activation);

        let mut w0 = g2_spec.init_params(rng, 0.1);
        let off = g2_spec.output_bias_offset();
        w0[off..].copy_from_slice(&cfg.default_dynamics_raw(0.3));

        let mut theta = g1_spec.init_params(rng, 0.01);
        let off = g1_spec.output_bias_offset();
        theta[off..].copy_from_slice(&w0);

        let mut prior_params = prior_spec.init_params(rng, 0.1);
        let off = prior_spec.output_bias_offset();
        prior_params[off..].copy_from_slice(&cfg.default_prior_raw(0.1));

        let mut b_global = Mat::zeros(cfg.n, cfg.k);
        for (i, &free) in b_mask.iter().enumerate() {
            for j in 0..cfg.k {
                if free {
                    b_global[(i, j)] = rng.random_range(-0.1..0.1);
                }
            }
        }
        let model = HyperModel {
            head_config,
            g1_spec,
            g2_spec,
            prior_spec,
            theta,
            prior_params,
            b_global,
            b_mask,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.head_config;
        cfg.validate()?;
        for spec in [&self.g1_spec, &self.g2_spec, &self.prior_spec] {
            spec.validate()?;
        }
        let ok = self.g1_spec.input_size() == cfg.context_dim
            && self.g1_spec.output_size() == self.g2_spec.n_params()
            && self.g2_spec.input_size() == cfg.g2_input_size()
            && self.g2_spec.output_size() == cfg.g2_output_size()
            && self.prior_spec.input_size() == cfg.context_dim
            && self.prior_spec.output_size() == cfg.prior_output_size()
            && self.theta.len() == self.g1_spec.n_params()
            && self.prior_params.len() == self.prior_spec.n_params()
            && self.b_global.rows() == cfg.n
            && self.b_global.cols() == cfg.k
            && self.b_mask.len() == cfg.n;
        if !ok {
            return Err(Error::Config("network shapes do not match the head configuration".into()));
        }
        for (i, &free) in self.b_mask.iter().enumerate() {
            if !free && (0..cfg.k).any(|j| self.b_global[(i, j)] != 0.0) {
                return Err(Error::Config(format!("masked row {i} of B is not zero")));
            }
        }
        Ok(())
    }

    /// Length of the flat vector `[Θ, prior parameters, B row-major]`.
    pub fn n_params(&self) -> usize {
        self.theta.len() + self.prior_params.len() + self.b_global.rows() * self.b_global.cols()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.theta.clone();
        p.extend_from_slice(&self.prior_params);
        p.extend_from_slice(self.b_global.as_slice());
        p
    }

    /// Inverse of [`HyperModel::params`]; masked rows of `B` are forced to zero.
    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Dimension(format!("{} parameters for a model of {}", p.len(), self.n_params())));
        }
        let (t, rest) = p.split_at(self.theta.len());
        let (pr, b) = rest.split_at(self.prior_params.len());
        self.theta.copy_from_slice(t);
        self.prior_params.copy_from_slice(pr);
        let (n, k) = (self.b_global.rows(), self.b_global.cols());
        self.b_global = Mat::from_fn(n, k, |i, j| if self.b_mask[i] { b[i * k + j] } else { 0.0 });
        Ok(())
    }

    /// The context seen by the networks: all ones under the ablation.
    pub fn network_input(&self, context: &[f64]) -> Result<Vec<f64>> {
        if context.len() != self.head_config.context_dim {
            return Err(Error::Dimension(format!(
                "context of size {} for a model expecting {}",
                context.len(),
                self.head_config.context_dim
            )));
        }
        Ok(if self.head_config.hypernet_disabled {
            vec![1.0; context.len()]
        } else {
            context.to_vec()
        })
    }

    /// `W = g1(C; Θ)`, the weights of g2.
    pub fn hyper_forward(&self, context: &[f64]) -> Result<Vec<f64>> {
        self.g1_spec.forward(&self.theta, &self.network_input(context)?)
    }

    pub fn hyper_forward_generic<T: Real>(&self, theta: &[T], context: &[f64]) -> Result<Vec<T>> {
        let c: Vec<T> = self.network_input(context)?.into_iter().map(T::cst).collect();
        self.g1_spec.forward(theta, &c)
    }

    pub fn prior_raw_generic<T: Real>(&self, prior_params: &[T], context: &[f64]) -> Result<Vec<T>> {
        let c: Vec<T> = self.network_input(context)?.into_iter().map(T::cst).collect();
        self.prior_spec.forward(prior_params, &c)
    }
}

/// One interval's dynamics emitted by the heads, with the basis-conditioning
/// penalty.
#[derive(Clone, Debug)]
pub struct DynamicsHeads<T> {
    pub spectrum: Spectrum<T>,
    pub basis: EigenBasis<T>,
    pub q: Mat<T>,
    pub penalty: T,
}

/// Run g2 with weights `w` on the detached belief summary and map its outputs
/// through the heads.
pub fn dynamics_heads<T: Real>(model: &HyperModel, w: &[T], mu: &[f64], sigma: &Mat<f64>) -> Result<DynamicsHeads<T>> {
    let n = model.head_config.n;
    if mu.len() != n || sigma.rows() != n || sigma.cols() != n {
        return Err(Error::Dimension(format!("belief summary does not match n = {n}")));
    }
    let input: Vec<T> = mu.iter().chain(sigma.as_slice()).map(|&x| T::cst(x)).collect();
    let raw = model.g2_spec.forward(w, &input)?;
    map_dynamics_raw(&model.head_config, &raw)
}

/// Heads applied to raw g2 outputs.
pub fn map_dynamics_raw<T: Real>(cfg: &HeadConfig, raw: &[T]) -> Result<DynamicsHeads<T>> {
    if raw.len() != cfg.g2_output_size() {
        return Err(Error::Dimension(format!("{} raw outputs, expected {}", raw.len(), cfg.g2_output_size())));
    }
    let n = cfg.n;
    let decay = |x: T| if cfg.stable { -x.softplus() } else { x };
    let mut it = raw.iter().copied();
    let mut next = || it.next().unwrap_or_else(T::zero);
    let real: Vec<T> = (0..cfg.n_real()).map(|_| decay(next())).collect();
    let pairs: Vec<(T, T)> = (0..cfg.n_complex_pairs)
        .map(|_| {
            let a = decay(next());
            let b = next().softplus() + IMAG_FLOOR;
            (a, b)
        })
        .collect();
    let v_raw = Mat::from_fn(n, n, |_, _| next());
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let x = next();
            l[(i, j)] = if i == j { x.softplus() } else { x };
        }
    }
    let v = normalize_basis((cfg.n_real(), cfg.n_complex_pairs), &v_raw);
    let penalty = basis_penalty(&v)?;
    Ok(DynamicsHeads {
        spectrum: Spectrum::new(real, pairs),
        basis: EigenBasis::new(v),
        q: l.matmul(&l.transpose()).symmetrize(),
        penalty,
    })
}

/// `max(0, log κ(V) − log 1e6)` with the Frobenius condition number
/// `κ(V) = ‖V‖_F·‖V⁻¹‖_F`.
pub fn basis_penalty<T: Real>(v: &Mat<T>) -> Result<T> {
    let vinv = v.inverse()?;
    let log_cond = (v.frobenius_sq() * vinv.frobenius_sq()).ln() * 0.5;
    let excess = log_cond - libm::log(PENALTY_COND);
    Ok(if excess.val() > 0.0 { excess } else { T::zero() })
}

/// `(α, R)` from the tail of the prior outputs; computed once per sequence.
pub fn sequence_heads<T: Real>(cfg: &HeadConfig, prior_raw: &[T]) -> Result<(Vec<T>, Mat<T>)> {
    check_prior_raw(cfg, prior_raw)?;
    let n = cfg.n;
    let off = n + tri(n);
    let alpha = prior_raw[off..off + n].to_vec();
    let r_diag: Vec<T> = prior_raw[off + n..off + n + cfg.m].iter().map(|&x| x.softplus() + NOISE_FLOOR).collect();
    Ok((alpha, Mat::diag(&r_diag)))
}

/// Initial belief `N(μ0, L0L0ᵀ + 1e-4·I)` at `t = 0` with `(α, R)`.
pub fn prior_heads<T: Real>(cfg: &HeadConfig, prior_raw: &[T]) -> Result<(GaussianBelief<T>, Vec<T>, Mat<T>)> {
    check_prior_raw(cfg, prior_raw)?;
    let n = cfg.n;
    let mu = prior_raw[..n].to_vec();
    let mut l = Mat::zeros(n, n);
    let mut k = n;
    for i in 0..n {
        for j in 0..=i {
            let x = prior_raw[k];
            l[(i, j)] = if i == j { x.softplus() } else { x };
            k += 1;
        }
    }
    let mut sigma = l.matmul(&l.transpose()).symmetrize();
    for i in 0..n {
        sigma[(i, i)] = sigma[(i, i)] + PRIOR_FLOOR;
    }
    let (alpha, r) = sequence_heads(cfg, prior_raw)?;
    Ok((GaussianBelief::new(mu, sigma, 0.0), alpha, r))
}

fn check_prior_raw<T>(cfg: &HeadConfig, raw: &[T]) -> Result<()> {
    if raw.len() != cfg.prior_output_size() {
        return Err(Error::Dimension(format!(
            "{} prior outputs, expected {}",
            raw.len(),
            cfg.prior_output_size()
        )));
    }
    Ok(())
}

/// Prior of a model for one context.
pub fn prior(model: &HyperModel, context: &[f64]) -> Result<(GaussianBelief<f64>, Vec<f64>, Mat<f64>)> {
    let raw = model.prior_raw_generic(&model.prior_params, context)?;
    prior_heads(&model.head_config, &raw)
}

/// Serialized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub format_version: u32,
    pub head_config: HeadConfig,
    pub g1_spec: MlpSpec,
    pub g2_spec: MlpSpec,
    pub prior_spec: MlpSpec,
    pub theta: Vec<f64>,
    pub prior_params: Vec<f64>,
    #[serde(rename = "B_global")]
    pub b_global: Vec<Vec<f64>>,
    #[serde(rename = "B_mask")]
    pub b_mask: Vec<bool>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl From<&HyperModel> for CheckpointRecord {
    fn from(m: &HyperModel) -> Self {
        CheckpointRecord {
            format_version: CHECKPOINT_VERSION,
            head_config: m.head_config.clone(),
            g1_spec: m.g1_spec.clone(),
            g2_spec: m.g2_spec.clone(),
            prior_spec: m.prior_spec.clone(),
            theta: m.theta.clone(),
            prior_params: m.prior_params.clone(),
            b_global: m.b_global.to_rows(),
            b_mask: m.b_mask.clone(),
        }
    }
}

impl TryFrom<CheckpointRecord> for HyperModel {
    type Error = Error;

    fn try_from(r: CheckpointRecord) -> Result<Self> {
        if r.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", r.format_version)));
        }
        let n = r.head_config.n;
        let k = r.head_config.k;
        if r.b_global.len() != n || r.b_global.iter().any(|row| row.len() != k) {
            return Err(Error::Dimension(format!("B_global must be {n}×{k}")));
        }
        let b_global = if k == 0 { Mat::zeros(n, 0) } else { Mat::try_from_rows(&r.b_global)? };
        let model = HyperModel {
            head_config: r.head_config,
            g1_spec: r.g1_spec,
            g2_spec: r.g2_spec,
            prior_spec: r.prior_spec,
            theta: r.theta,
            prior_params: r.prior_params,
            b_global,
            b_mask: r.b_mask,
        };
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(pairs: usize, stable: bool) -> HeadConfig {
        HeadConfig {
            n: 4,
            m: 1,
            k: 1,
            context_dim: 3,
            n_complex_pairs: pairs,
            stable,
            hypernet_disabled: false,
            interval_dt: 1.0,
        }
    }

    fn model(pairs: usize) -> HyperModel {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = Architecture {
            g1_hidden: vec![8],
            g2_hidden: vec![5],
            prior_hidden: vec![4],
            activation: Activation::Tanh,
        };
        HyperModel::new(cfg(pairs, true), &arch, vec![false, true, true, true], &mut rng).unwrap()
    }

    #[test]
    fn parameter_counts_are_consistent() {
        let m = model(1);
        assert_eq!(m.hyper_forward(&[0.1, 0.2, 0.3]).unwrap().len(), m.g2_spec.n_params());
        assert_eq!(m.g2_spec.output_size(), 2 + 2 + 16 + 10);
        assert_eq!(m.prior_spec.output_size(), 4 + 10 + 4 + 1);
    }

    #[test]
    fn backward_matches_tape() {
        let spec = MlpSpec::new(3, &[4, 2], 2, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = spec.init_params(&mut rng, 1.0);
        let x = [0.3, -0.7, 1.1];
        let trace = spec.forward_trace(&p, &x).unwrap();
        let (gp, gx) = spec.backward(&p, &trace, &[1.0, -2.0]);

        let tape = Tape::new();
        let pv = tape.vars(&p);
        let xv = tape.vars(&x);
        let out = spec.forward(&pv, &xv).unwrap();
        let loss = out[0] - out[1] * 2.0;
        let g = tape.gradient(loss);
        for (a, b) in gp.iter().zip(g.wrt_all(&pv)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in gx.iter().zip(g.wrt_all(&xv)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((trace.output()[0] - out[0].value()).abs() < 1e-15);
    }

    #[test]
    fn relu_backward_matches_tape() {
        let spec = MlpSpec::new(2, &[6], 1, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = spec.init_params(&mut rng, 1.0);
        let trace = spec.forward_trace(&p, &[0.5, -0.25]).unwrap();
        let (gp, _) = spec.backward(&p, &trace, &[1.0]);
        let tape = Tape::new();
        let pv = tape.vars(&p);
        let out = spec.forward(&pv, &[Real::cst(0.5), Real::cst(-0.25)]).unwrap();
        let g = tape.gradient(out[0]);
        assert_eq!(gp, g.wrt_all(&pv));
    }

    #[test]
    fn disabled_hypernet_ignores_context() {
        let mut m = model(1);
        m.head_config.hypernet_disabled = true;
        assert_eq!(m.hyper_forward(&[0.1, 0.2, 0.3]).unwrap(), m.hyper_forward(&[-5.0, 2.0, 9.0]).unwrap());
        m.head_config.hypernet_disabled = false;
        assert_ne!(m.hyper_forward(&[0.1, 0.2, 0.3]).unwrap(), m.hyper_forward(&[-5.0, 2.0, 9.0]).unwrap());
    }

    #[test]
    fn default_raw_heads() {
        let c = cfg(1, true);
        let h = map_dynamics_raw(&c, &c.default_dynamics_raw(0.3)).unwrap();
        assert!((h.spectrum.real[0] + 0.5).abs() < 1e-12);
        assert!((h.spectrum.pairs[0].1 - 1.0).abs() < 1e-12);
        assert!(h.basis.v.max_abs_diff(&Mat::identity(4)) < 1e-12);
        assert!((h.q[(2, 2)] - 0.3).abs() < 1e-12);
        assert_eq!(h.penalty, 0.0);
        let (b, alpha, r) = prior_heads(&c, &c.default_prior_raw(0.1)).unwrap();
        assert!((b.sigma[(0, 0)] - 1.0 - PRIOR_FLOOR).abs() < 1e-12);
        assert_eq!(alpha, vec![0.0; 4]);
        assert!((r[(0, 0)] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn unstable_mode_passes_raw_real_parts() {
        let c = cfg(0, false);
        let mut raw = c.default_dynamics_raw(0.3);
        raw[0] = 0.7;
        let h = map_dynamics_raw(&c, &raw).unwrap();
        assert_eq!(h.spectrum.real[0], 0.7);
    }

    #[test]
    fn ill_conditioned_basis_is_penalized() {
        let v = Mat::from_rows(&[vec![1.0, 1.0], vec![0.0, 1e-8]]);
        assert!(basis_penalty(&v).unwrap() > 0.0);
        assert_eq!(basis_penalty(&Mat::<f64>::identity(2)).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(1);
        let back = HyperModel::try_from(CheckpointRecord::from(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn set_params_keeps_masked_rows_zero() {
        let mut m = model(0);
        let p = vec![0.5; m.n_params()];
        m.set_params(&p).unwrap();
        assert_eq!(m.b_global[(0, 0)], 0.0);
        assert_eq!(m.b_global[(1, 0)], 0.5);
    }
}
