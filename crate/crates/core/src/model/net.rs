//! The two-branch network: shared feature-layer layout, optional BiGRU, task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{SeldConfig, POOL_FACTOR};
use crate::autodiff::{glorot, BatchStats, Bound, Graph, GruVars, ParamSet, Real, Tensor, Var};
use crate::error::{ensure, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
const GROUPS: usize = 4;
const LAYERS_PER_GROUP: usize = 2;

/// Which heads a network carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Sed,
    Doa,
    /// One trunk with both heads.
    Joint,
}

impl BranchKind {
    pub fn has_sed(self) -> bool {
        matches!(self, Self::Sed | Self::Joint)
    }

    pub fn has_doa(self) -> bool {
        matches!(self, Self::Doa | Self::Joint)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sed => "sed",
            Self::Doa => "doa",
            Self::Joint => "joint",
        }
    }
}

/// Batch-norm parameter indices of one layer.
#[derive(Debug, Clone, Copy)]
struct BnSlots {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvSlots {
    weight: usize,
    bias: usize,
    bn: BnSlots,
}

#[derive(Debug, Clone, Copy)]
struct GruSlots {
    fwd: [usize; 4],
    bwd: [usize; 4],
}

#[derive(Debug, Clone, Copy)]
struct HeadSlots {
    weight: usize,
    bias: usize,
}

/// Graph handles of one forward pass.
pub struct Forward<S> {
    /// `[B, T, N]` probabilities.
    pub sed: Option<Var>,
    /// `[B, T, N, 2]` radians.
    pub doa: Option<Var>,
    /// `[B, T', C_out]` output of the recurrent (or feature) stage.
    pub trunk: Var,
    /// Batch statistics from training-mode batch norm, by layer.
    stats: Vec<(BnSlots, BatchStats<S>)>,
    /// `(stage, shape)` in evaluation order.
    pub trace: Vec<(String, Vec<usize>)>,
}

/// A SED, DOA or joint network with its parameters.
#[derive(Debug, Clone)]
pub struct SeldNet<S> {
    cfg: SeldConfig,
    kind: BranchKind,
    params: ParamSet<S>,
    convs: Vec<ConvSlots>,
    gru: Option<GruSlots>,
    sed_head: Option<HeadSlots>,
    doa_head: Option<HeadSlots>,
}

/// True for names of the transferable convolution and batch-norm parameters.
pub fn is_feature_param(name: &str) -> bool {
    name.starts_with("conv") || name.starts_with("bn")
}

impl<S: Real> SeldNet<S> {
    /// Fresh network. Parameters are drawn in a fixed order (feature layers, GRU, SED head,
    /// DOA head), so two branches built from one seed share their feature-layer init.
    pub fn new(cfg: SeldConfig, kind: BranchKind, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut convs = Vec::new();
        let mut c_in = cfg.input_channels;
        for (g, &c_out) in cfg.conv_channels.iter().enumerate() {
            for l in 0..LAYERS_PER_GROUP {
                let fan_in = c_in * 9;
                let fan_out = c_out * 9;
                let weight = ps.insert(
                    format!("conv{g}.{l}.weight"),
                    glorot(&[c_out, c_in, 3, 3], fan_in, fan_out, &mut rng),
                    true,
                )?;
                let bias = ps.insert(format!("conv{g}.{l}.bias"), Tensor::zeros(&[c_out]), true)?;
                let bn = BnSlots {
                    gamma: ps.insert(
                        format!("bn{g}.{l}.gamma"),
                        Tensor::full(&[c_out], S::one()),
                        true,
                    )?,
                    beta: ps.insert(format!("bn{g}.{l}.beta"), Tensor::zeros(&[c_out]), true)?,
                    mean: ps.insert(
                        format!("bn{g}.{l}.running_mean"),
                        Tensor::zeros(&[c_out]),
                        false,
                    )?,
                    var: ps.insert(
                        format!("bn{g}.{l}.running_var"),
                        Tensor::full(&[c_out], S::one()),
                        false,
                    )?,
                };
                convs.push(ConvSlots { weight, bias, bn });
                c_in = c_out;
            }
        }
        let d = cfg.c_out();
        let gru = if cfg.use_gru {
            let h = d / 2;
            let bound = 1.0 / (h as f64).sqrt();
            let mut dir = |name: &str| -> Result<[usize; 4]> {
                Ok([
                    ps.insert(
                        format!("gru.{name}.w_ih"),
                        Tensor::uniform(&[3 * h, d], bound, &mut rng),
                        true,
                    )?,
                    ps.insert(
                        format!("gru.{name}.w_hh"),
                        Tensor::uniform(&[3 * h, h], bound, &mut rng),
                        true,
                    )?,
                    ps.insert(
                        format!("gru.{name}.b_ih"),
                        Tensor::uniform(&[3 * h], bound, &mut rng),
                        true,
                    )?,
                    ps.insert(
                        format!("gru.{name}.b_hh"),
                        Tensor::uniform(&[3 * h], bound, &mut rng),
                        true,
                    )?,
                ])
            };
            let fwd = dir("fwd")?;
            let bwd = dir("bwd")?;
            Some(GruSlots { fwd, bwd })
        } else {
            None
        };
        let mut head = |name: &str, k: usize| -> Result<HeadSlots> {
            Ok(HeadSlots {
                weight: ps.insert(
                    format!("{name}.weight"),
                    glorot(&[k, d], d, k, &mut rng),
                    true,
                )?,
                bias: ps.insert(format!("{name}.bias"), Tensor::zeros(&[k]), true)?,
            })
        };
        let sed_head = kind
            .has_sed()
            .then(|| head("head_sed", cfg.n_classes))
            .transpose()?;
        let doa_head = kind
            .has_doa()
            .then(|| head("head_doa", 2 * cfg.n_classes))
            .transpose()?;
        Ok(Self {
            cfg,
            kind,
            params: ps,
            convs,
            gru,
            sed_head,
            doa_head,
        })
    }

    /// Rebuilds a network and loads named values, checking every name and shape.
    pub fn from_values(
        cfg: SeldConfig,
        kind: BranchKind,
        values: Vec<(String, Tensor<S>)>,
    ) -> Result<Self> {
        let mut net = Self::new(cfg, kind, 0)?;
        ensure!(
            values.len() == net.params.len(),
            Incompatible,
            "expected {} parameters, got {}",
            net.params.len(),
            values.len()
        );
        for (name, t) in values {
            ensure!(
                net.params.get(&name).is_some(),
                Incompatible,
                "unknown parameter {name}"
            );
            net.params
                .set(&name, t)
                .map_err(|e| Error::Incompatible(e.to_string()))?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &SeldConfig {
        &self.cfg
    }

    pub fn kind(&self) -> BranchKind {
        self.kind
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Same network in another precision (fresh optimizer state).
    pub fn cast<T: Real>(&self) -> SeldNet<T> {
        SeldNet {
            cfg: self.cfg.clone(),
            kind: self.kind,
            params: self.params.cast(),
            convs: self.convs.clone(),
            gru: self.gru,
            sed_head: self.sed_head,
            doa_head: self.doa_head,
        }
    }

    /// Runs the network on `x: [B, C, T, F]`. Training mode uses batch statistics.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        x: Var,
        train: bool,
    ) -> Result<Forward<S>> {
        let shape = g.shape(x).to_vec();
        ensure!(
            shape.len() == 4,
            Shape,
            "network input must be [B, C, T, F], got {shape:?}"
        );
        ensure!(
            shape[1] == self.cfg.input_channels,
            Shape,
            "network expects {} input channels, got {}",
            self.cfg.input_channels,
            shape[1]
        );
        ensure!(
            shape[3] == self.cfg.n_mels,
            Shape,
            "network expects {} frequency bins, got {}",
            self.cfg.n_mels,
            shape[3]
        );
        ensure!(
            shape[0] >= 1 && shape[2] >= 1,
            Shape,
            "empty batch or sequence"
        );
        let (batch, frames) = (shape[0], shape[2]);
        let padded = frames.div_ceil(POOL_FACTOR) * POOL_FACTOR;

        let mut trace = vec![("input".to_string(), shape.clone())];
        let mut stats = Vec::new();
        let mut h = g.pad_edge(x, 2, padded - frames)?;
        trace.push(("padded".into(), g.shape(h).to_vec()));
        for grp in 0..GROUPS {
            for l in 0..LAYERS_PER_GROUP {
                let s = self.convs[grp * LAYERS_PER_GROUP + l];
                h = g.conv2d(h, bound.var(s.weight), bound.var(s.bias))?;
                let (gamma, beta) = (bound.var(s.bn.gamma), bound.var(s.bn.beta));
                h = if train {
                    let (y, st) = g.batch_norm_train(h, gamma, beta, BN_EPS)?;
                    stats.push((s.bn, st));
                    y
                } else {
                    let mean = self.params.at(s.bn.mean).value.data();
                    let var = self.params.at(s.bn.var).value.data();
                    g.batch_norm_eval(h, gamma, beta, mean, var, BN_EPS)?
                };
                h = g.relu(h);
            }
            h = g.avg_pool_2x2(h)?;
            trace.push((format!("group{grp}"), g.shape(h).to_vec()));
        }
        h = g.mean_last(h)?;
        trace.push(("freq_pool".into(), g.shape(h).to_vec()));
        h = g.swap_last2(h)?;
        trace.push(("sequence".into(), g.shape(h).to_vec()));
        if let Some(gs) = self.gru {
            let dir = |ix: [usize; 4]| GruVars {
                w_ih: bound.var(ix[0]),
                w_hh: bound.var(ix[1]),
                b_ih: bound.var(ix[2]),
                b_hh: bound.var(ix[3]),
            };
            h = g.bigru(h, dir(gs.fwd), dir(gs.bwd))?;
            trace.push(("gru".into(), g.shape(h).to_vec()));
        }
        let trunk = h;

        let mut head =
            |g: &mut Graph<S>, slots: HeadSlots, sigmoid: bool, label: &str| -> Result<Var> {
                let mut y = g.dense(trunk, bound.var(slots.weight), bound.var(slots.bias))?;
                if sigmoid {
                    y = g.sigmoid(y);
                }
                trace.push((format!("{label}_head"), g.shape(y).to_vec()));
                y = g.repeat_axis1(y, POOL_FACTOR)?;
                trace.push((format!("{label}_upsampled"), g.shape(y).to_vec()));
                y = g.narrow(y, 1, 0, frames)?;
                trace.push((format!("{label}_output"), g.shape(y).to_vec()));
                Ok(y)
            };
        let sed = self.sed_head.map(|s| head(g, s, true, "sed")).transpose()?;
        let doa = match self.doa_head {
            Some(s) => {
                let y = head(g, s, false, "doa")?;
                Some(g.reshape(y, &[batch, frames, self.cfg.n_classes, 2])?)
            }
            None => None,
        };
        Ok(Forward {
            sed,
            doa,
            trunk,
            stats,
            trace,
        })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, fwd: &Forward<S>) {
        let m = S::of(BN_MOMENTUM);
        for (slots, st) in &fwd.stats {
            for (idx, batch) in [(slots.mean, &st.mean), (slots.var, &st.var)] {
                let run = self.params.at_mut(idx).value.data_mut();
                for (r, &b) in run.iter_mut().zip(batch.iter()) {
                    *r = m * *r + (S::one() - m) * b;
                }
            }
        }
    }

    /// Eval-mode predictions for `x: [B, C, T, F]` without tracking gradients.
    pub fn predict(&self, x: Tensor<S>) -> Result<Predictions> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.leaf(x, false);
        let out = self.forward(&mut g, &bound, xv, false)?;
        let shape = g.shape(xv).to_vec();
        let to_vec = |v: Option<Var>| v.map(|v| g.value(v).to_f32_vec());
        let p = Predictions {
            batch: shape[0],
            n_frames: shape[2],
            n_classes: self.cfg.n_classes,
            sed: to_vec(out.sed),
            doa: to_vec(out.doa),
        };
        for v in [&p.sed, &p.doa].into_iter().flatten() {
            ensure!(v.iter().all(|x| x.is_finite()), NonFinite, "network output");
        }
        Ok(p)
    }
}

/// Output of [`SeldNet::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub batch: usize,
    pub n_frames: usize,
    pub n_classes: usize,
    /// `B x T x N` probabilities.
    pub sed: Option<Vec<f32>>,
    /// `B x T x N x 2` radians.
    pub doa: Option<Vec<f32>>,
}

/// Copies every feature-layer parameter and running statistic from `src` into `dst`.
/// Heads and recurrent weights of `dst` are left alone.
pub fn transfer_cnn<S: Real>(src: &SeldNet<S>, dst: &mut SeldNet<S>) -> Result<()> {
    ensure!(
        src.cfg.feature_fingerprint() == dst.cfg.feature_fingerprint(),
        Incompatible,
        "feature layers differ: {:?} vs {:?}",
        src.cfg.conv_channels,
        dst.cfg.conv_channels
    );
    for p in src.params.iter().filter(|p| is_feature_param(&p.name)) {
        dst.params
            .set(&p.name, p.value.clone())
            .map_err(|e| Error::Incompatible(e.to_string()))?;
    }
    Ok(())
}

/// `score >= threshold` per cell.
pub fn sed_mask(scores: &[f32], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s as f64 >= threshold).collect()
}

/// DOA pairs of `T x N x 2` predictions kept where `mask` (`T x N`) is set.
pub fn apply_sed_mask(doa: &[f32], mask: &[bool]) -> Result<Vec<Option<[f32; 2]>>> {
    ensure!(
        doa.len() == 2 * mask.len(),
        Shape,
        "DOA has {} values for a mask of {}",
        doa.len(),
        mask.len()
    );
    Ok(mask
        .iter()
        .enumerate()
        .map(|(k, &m)| m.then(|| [doa[2 * k], doa[2 * k + 1]]))
        .collect())
}

/// Loss of a forward pass: BCE for SED, masked MAE for DOA, `bce + weight * mae` for joint.
/// The DOA mask is the ground-truth activity `sed_target`.
pub fn branch_loss<S: Real>(
    g: &mut Graph<S>,
    net: &SeldNet<S>,
    fwd: &Forward<S>,
    sed_target: &[S],
    doa_target: &[S],
) -> Result<Var> {
    let sed_loss = |g: &mut Graph<S>| -> Result<Var> {
        let p = fwd
            .sed
            .ok_or_else(|| Error::InvalidArgument("network has no SED head".into()))?;
        g.bce_loss(p, sed_target)
    };
    let doa_loss = |g: &mut Graph<S>| -> Result<Var> {
        let p = fwd
            .doa
            .ok_or_else(|| Error::InvalidArgument("network has no DOA head".into()))?;
        g.masked_mae_loss(p, doa_target, sed_target)
    };
    match net.kind {
        BranchKind::Sed => sed_loss(g),
        BranchKind::Doa => doa_loss(g),
        BranchKind::Joint => {
            let (s, d) = (sed_loss(g)?, doa_loss(g)?);
            joint_loss(g, s, d, net.cfg.joint_loss_weight)
        }
    }
}

/// `sed + weight * doa`.
pub fn joint_loss<S: Real>(g: &mut Graph<S>, sed: Var, doa: Var, weight: f64) -> Result<Var> {
    ensure!(
        weight >= 0.0,
        InvalidArgument,
        "joint loss weight must be non-negative, got {weight}"
    );
    let w = g.scale(doa, S::of(weight));
    g.add(sed, w)
}
