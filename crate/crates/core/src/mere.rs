//! Endogenous view generation: each view is a learned temporal convolution of
//! the input channels followed by batch normalization and GELU.

use crate::config::{ModelConfig, ViewGrouping};
use crate::error::{Error, Result};
use crate::numerics::{BatchNormState, Mode, Module, Padding, Param, ParamKind, Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

/// Views stacked on the tape with shape `[B, N_v, S, V_d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EndogenousViews {
    pub var: Var,
}

#[derive(Clone, Debug)]
pub struct MereLayer<T> {
    d_in: usize,
    view_dim: usize,
    kernel: usize,
    /// Input channels read by each view.
    channels: Vec<Vec<usize>>,
    kernels: Vec<Param<T>>,
    gammas: Vec<Param<T>>,
    betas: Vec<Param<T>>,
    norms: Vec<BatchNormState<T>>,
}

fn view_channels(grouping: ViewGrouping, n_views: usize, d_in: usize) -> Vec<Vec<usize>> {
    match grouping {
        ViewGrouping::FullWidth => vec![(0..d_in).collect(); n_views],
        ViewGrouping::ChannelGroups => {
            let m = n_views.min(d_in);
            (0..n_views)
                .map(|g| (0..d_in).filter(|c| c % m == g % m).collect())
                .collect()
        }
    }
}

impl<T: Scalar> MereLayer<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, &mut rng::from_seed(seed))
    }

    /// Kernels uniform on `±sqrt(1 / (fan_in * k))`, BN identity. The
    /// convolutions carry no bias of their own: train-mode batch norm would
    /// cancel it exactly, and the BN shift already acts as the per-view bias.
    pub fn init_with(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let channels = view_channels(config.view_grouping, config.n_views, config.d_in);
        let (vd, k) = (config.view_dim, config.k);
        let mut layer = Self {
            d_in: config.d_in,
            view_dim: vd,
            kernel: k,
            channels: channels.clone(),
            kernels: Vec::new(),
            gammas: Vec::new(),
            betas: Vec::new(),
            norms: Vec::new(),
        };
        for (g, ch) in channels.iter().enumerate() {
            let bound = (1.0 / (ch.len() * k) as f64).sqrt();
            layer.kernels.push(Param::uniform(
                format!("mere.view{g}.kernel"),
                ParamKind::Weight,
                &[vd, ch.len(), k],
                bound,
                rng,
            ));
            layer.gammas.push(Param::constant(
                format!("mere.view{g}.bn_gamma"),
                ParamKind::Norm,
                &[vd],
                1.0,
            ));
            layer
                .betas
                .push(Param::zeros(format!("mere.view{g}.bn_beta"), ParamKind::Norm, &[vd]));
            layer.norms.push(BatchNormState::new(vd));
        }
        Ok(layer)
    }

    pub fn n_views(&self) -> usize {
        self.kernels.len()
    }

    pub fn view_dim(&self) -> usize {
        self.view_dim
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel
    }

    pub fn kernels(&self) -> &[Param<T>] {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut [Param<T>] {
        &mut self.kernels
    }

    pub fn gammas_mut(&mut self) -> &mut [Param<T>] {
        &mut self.gammas
    }

    pub fn betas_mut(&mut self) -> &mut [Param<T>] {
        &mut self.betas
    }

    pub fn norms(&self) -> &[BatchNormState<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.norms
    }

    /// Reorders views so that new view `i` is old view `order[i]`.
    pub fn reorder_views(&mut self, order: &[usize]) -> Result<()> {
        let n = self.n_views();
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!(
                "{order:?} is not a permutation of {n} views"
            )));
        }
        fn pick<X: Clone>(v: &[X], order: &[usize]) -> Vec<X> {
            order.iter().map(|&i| v[i].clone()).collect()
        }
        self.channels = pick(&self.channels, order);
        self.kernels = pick(&self.kernels, order);
        self.gammas = pick(&self.gammas, order);
        self.betas = pick(&self.betas, order);
        self.norms = pick(&self.norms, order);
        Ok(())
    }

    /// `x[B, D_in, S] -> [B, N_v, S, V_d]`. Train mode updates each view's
    /// running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<EndogenousViews> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.d_in {
            return Err(Error::dim(format!(
                "view generator expects [B, {}, S], got {shape:?}",
                self.d_in
            )));
        }
        let mut gathered: Vec<(Vec<usize>, Var)> = Vec::new();
        let mut views = Vec::with_capacity(self.n_views());
        let no_bias = tape.constant(Tensor::zeros(&[self.view_dim]))?;
        for g in 0..self.n_views() {
            let input = if self.channels[g].len() == self.d_in {
                x
            } else if let Some((_, v)) = gathered.iter().find(|(c, _)| *c == self.channels[g]) {
                *v
            } else {
                let rows = self.channels[g]
                    .iter()
                    .map(|&c| tape.select(x, 1, c))
                    .collect::<Result<Vec<_>>>()?;
                let v = tape.stack(&rows, 1)?;
                gathered.push((self.channels[g].clone(), v));
                v
            };
            let w = tape.param(&self.kernels[g])?;
            let gamma = tape.param(&self.gammas[g])?;
            let beta = tape.param(&self.betas[g])?;
            let y = tape.conv1d(input, w, no_bias, Padding::Same)?;
            let y = tape.batchnorm1d(y, gamma, beta, mode, &mut self.norms[g])?;
            views.push(tape.gelu(y)?);
        }
        let stacked = tape.stack(&views, 1)?;
        let var = tape.permute(stacked, &[0, 1, 3, 2])?;
        Ok(EndogenousViews { var })
    }
}

/// Parameter-free stand-in: the raw input as a single view, `[B, 1, S, D_in]`.
pub fn mere_bypass<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<EndogenousViews> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("expected [B, D_in, S], got {shape:?}")));
    }
    let t = tape.permute(x, &[0, 2, 1])?;
    let var = tape.reshape(t, &[shape[0], 1, shape[2], shape[1]])?;
    Ok(EndogenousViews { var })
}

impl<T: Scalar> Module<T> for MereLayer<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for g in 0..self.kernels.len() {
            f(&self.kernels[g]);
            f(&self.gammas[g]);
            f(&self.betas[g]);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for g in 0..self.kernels.len() {
            f(&mut self.kernels[g]);
            f(&mut self.gammas[g]);
            f(&mut self.betas[g]);
        }
    }
}
