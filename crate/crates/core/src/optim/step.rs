use super::{adam_step, AdamState, Gradients, ModelState};
use crate::data::{Interaction, NormalizedAdjacency, TripleBatch};
use crate::linalg::argmax_rows;
use crate::objectives::{
    assemble_total, bpr_loss_and_grad, infonce_loss_and_grad, l2_reg_and_grad, LossParts, LossReport,
    LossWeights, Mode, Reduction,
};
use crate::propagation::{gather_rows, make_view, propagate, propagate_adjoint, scatter_add_rows, Augmentation, LayerStack};
use crate::prototypes::{
    alignment_loss_and_grad, compute_scores, swapped_loss_with_targets, swapped_targets, uniformity_loss_and_grad,
    PrototypeBank, SwapParams, UniformityOptions,
};
use crate::rng::{derive_seed, keys};
use crate::{Real, Result};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Everything a single optimization step needs besides parameters and data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub layers: usize,
    pub mode: Mode,
    pub weights: LossWeights,
    pub swap: SwapParams,
    pub alpha: f64,
    pub beta: f64,
    pub uniformity: UniformityOptions,
    pub reg_weight: f64,
    pub bpr_reduction: Reduction,
    pub drop_rate: f64,
    pub augmentation: Augmentation,
    pub lr: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            mode: Mode::Full,
            weights: LossWeights::default(),
            swap: SwapParams::default(),
            alpha: 2.0,
            beta: 2.0,
            uniformity: UniformityOptions::default(),
            reg_weight: 1e-4,
            bpr_reduction: Reduction::Sum,
            drop_rate: 0.1,
            augmentation: Augmentation::EdgeDropout,
            lr: 1e-3,
        }
    }
}

impl StepConfig {
    fn effective(&self) -> LossWeights {
        self.mode.effective(self.weights)
    }

    fn contrastive_active(&self) -> bool {
        self.effective().lambda1 != 0.0
    }

    fn align_active(&self) -> bool {
        self.effective().lambda2 != 0.0
    }

    fn uniform_active(&self) -> bool {
        self.effective().lambda3 != 0.0
    }

    /// Whether augmented views enter the step at all.
    pub fn needs_views(&self) -> bool {
        self.mode.uses_views() && (self.contrastive_active() || self.align_active())
    }

    fn swapped_active(&self) -> bool {
        matches!(self.mode, Mode::Full | Mode::WoAu) && self.contrastive_active()
    }

    fn infonce_active(&self) -> bool {
        self.mode == Mode::WoProto && self.contrastive_active()
    }
}

/// Training graph shared by every step.
#[derive(Clone, Copy, Debug)]
pub struct TrainContext<'a> {
    pub train: &'a [Interaction],
    pub adjacency: &'a NormalizedAdjacency,
    pub seed: u64,
}

/// Quantities held constant under differentiation: transport targets and
/// hard prototype assignments, per side and view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frozen<T> {
    pub users: SideFrozen<T>,
    pub items: SideFrozen<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SideFrozen<T> {
    pub q_t: Option<Array2<T>>,
    pub q_s: Option<Array2<T>>,
    pub assign_t: Vec<usize>,
    pub assign_s: Vec<usize>,
}

struct ViewBatch<T> {
    users: Vec<usize>,
    items: Vec<usize>,
    zu_t: Array2<T>,
    zu_s: Array2<T>,
    zi_t: Array2<T>,
    zi_s: Array2<T>,
}

fn view_batch<T: Real>(st: &LayerStack<T>, ss: &LayerStack<T>, batch: &TripleBatch) -> ViewBatch<T> {
    let nu = st.num_users();
    let users = batch.unique_users();
    let items: Vec<usize> = batch.unique_pos_items().into_iter().map(|i| nu + i).collect();
    ViewBatch {
        zu_t: gather_rows(st.final_embeddings(), &users),
        zu_s: gather_rows(ss.final_embeddings(), &users),
        zi_t: gather_rows(st.final_embeddings(), &items),
        zi_s: gather_rows(ss.final_embeddings(), &items),
        users,
        items,
    }
}

fn freeze_side<T: Real>(
    z_t: ArrayView2<'_, T>,
    z_s: ArrayView2<'_, T>,
    bank: &PrototypeBank<T>,
    config: &StepConfig,
) -> Result<SideFrozen<T>> {
    let mut out = SideFrozen::default();
    if config.swapped_active() {
        let (qt, qs) = swapped_targets(z_t, z_s, bank, &config.swap)?;
        out.q_t = Some(qt);
        out.q_s = Some(qs);
    }
    if config.align_active() {
        let norm = config.swap.normalize_inputs;
        out.assign_t = argmax_rows(compute_scores(z_t, bank, norm)?.view());
        out.assign_s = argmax_rows(compute_scores(z_s, bank, norm)?.view());
    }
    Ok(out)
}

fn propagate_views<T: Real>(
    params: &ModelState<T>,
    views: Option<(&NormalizedAdjacency, &NormalizedAdjacency)>,
    layers: usize,
) -> Result<Option<(LayerStack<T>, LayerStack<T>)>> {
    match views {
        Some((vt, vs)) => Ok(Some((propagate(vt, &params.embeddings, layers)?, propagate(vs, &params.embeddings, layers)?))),
        None => Ok(None),
    }
}

/// Transport targets and hard assignments at the current parameters.
pub fn freeze<T: Real>(
    params: &ModelState<T>,
    batch: &TripleBatch,
    views: Option<(&NormalizedAdjacency, &NormalizedAdjacency)>,
    config: &StepConfig,
) -> Result<Frozen<T>> {
    if !config.needs_views() {
        return Ok(Frozen::default());
    }
    let Some((st, ss)) = propagate_views(params, views, config.layers)? else {
        return Err(super::OptimError::Invalid("mode requires two graph views".into()).into());
    };
    let vb = view_batch(&st, &ss, batch);
    Ok(Frozen {
        users: freeze_side(vb.zu_t.view(), vb.zu_s.view(), &params.user_bank, config)?,
        items: freeze_side(vb.zi_t.view(), vb.zi_s.view(), &params.item_bank, config)?,
    })
}

struct SideGrads<T> {
    z_t: Array2<T>,
    z_s: Array2<T>,
    bank: Array2<T>,
}

#[derive(Default)]
struct SideLosses {
    proto: f64,
    infonce: f64,
    align: f64,
}

fn side_terms<T: Real>(
    z_t: ArrayView2<'_, T>,
    z_s: ArrayView2<'_, T>,
    bank: &PrototypeBank<T>,
    frozen: &SideFrozen<T>,
    config: &StepConfig,
) -> Result<(SideLosses, SideGrads<T>)> {
    let w = config.effective();
    let mut losses = SideLosses::default();
    let mut g = SideGrads { z_t: Array2::zeros(z_t.raw_dim()), z_s: Array2::zeros(z_s.raw_dim()), bank: Array2::zeros(bank.matrix().raw_dim()) };
    let l1 = T::of(w.lambda1);
    if config.swapped_active() {
        let (qt, qs) = match (&frozen.q_t, &frozen.q_s) {
            (Some(qt), Some(qs)) => (qt.view(), qs.view()),
            _ => unreachable!("targets frozen whenever the swapped loss is active"),
        };
        let out = swapped_loss_with_targets(z_t, z_s, bank, qt, qs, &config.swap)?;
        losses.proto = out.loss;
        g.z_t.scaled_add(l1, &out.grad_z_t);
        g.z_s.scaled_add(l1, &out.grad_z_s);
        g.bank.scaled_add(l1, &out.grad_bank);
    }
    // a single row has no in-batch negatives, so the term is identically zero
    if config.infonce_active() && z_t.nrows() > 1 {
        let out = infonce_loss_and_grad(z_t, z_s, config.swap.tau)?;
        losses.infonce = out.loss;
        g.z_t.scaled_add(l1, &out.grad_z_t);
        g.z_s.scaled_add(l1, &out.grad_z_s);
    }
    if config.align_active() {
        let (loss, grad) = alignment_loss_and_grad(bank, &frozen.assign_t, &frozen.assign_s, config.alpha)?;
        losses.align = loss;
        g.bank.scaled_add(T::of(w.lambda2), &grad);
    }
    Ok((losses, g))
}

/// Total loss and its gradient on every parameter block for fixed views and
/// frozen targets. This is the function the optimizer step differentiates.
pub fn loss_and_gradients<T: Real>(
    params: &ModelState<T>,
    batch: &TripleBatch,
    adjacency: &NormalizedAdjacency,
    views: Option<(&NormalizedAdjacency, &NormalizedAdjacency)>,
    frozen: &Frozen<T>,
    config: &StepConfig,
) -> Result<(LossReport, Gradients<T>)> {
    let n = params.num_users() + params.num_items();
    let nu = params.num_users();
    let base = params.embeddings.matrix();
    let w = config.effective();
    let mut parts = LossParts::default();

    let clean = propagate(adjacency, &params.embeddings, config.layers)?;
    let (bpr, bpr_grad) = bpr_loss_and_grad(&clean, batch, config.bpr_reduction)?;
    parts.bpr = bpr;
    let mut grad_e = propagate_adjoint(adjacency, bpr_grad.to_dense(n).view(), config.layers)?;
    let (reg, reg_grad) = l2_reg_and_grad(base, nu, batch, config.reg_weight)?;
    parts.reg = reg;
    reg_grad.add_to(&mut grad_e);

    let mut grad_ub: Option<Array2<T>> = None;
    let mut grad_ib: Option<Array2<T>> = None;

    if config.needs_views() {
        let (vt, vs) = views.ok_or_else(|| super::OptimError::Invalid("mode requires two graph views".into()))?;
        let st = propagate(vt, &params.embeddings, config.layers)?;
        let ss = propagate(vs, &params.embeddings, config.layers)?;
        let vb = view_batch(&st, &ss, batch);
        let (lu, gu) = side_terms(vb.zu_t.view(), vb.zu_s.view(), &params.user_bank, &frozen.users, config)?;
        let (li, gi) = side_terms(vb.zi_t.view(), vb.zi_s.view(), &params.item_bank, &frozen.items, config)?;
        parts.proto = lu.proto + li.proto;
        parts.align = lu.align + li.align;
        if config.infonce_active() {
            parts.infonce = Some(lu.infonce + li.infonce);
        }
        if config.contrastive_active() {
            let mut gt = Array2::<T>::zeros((n, params.dim()));
            let mut gs = Array2::<T>::zeros((n, params.dim()));
            scatter_add_rows(&mut gt, &vb.users, gu.z_t.view());
            scatter_add_rows(&mut gs, &vb.users, gu.z_s.view());
            scatter_add_rows(&mut gt, &vb.items, gi.z_t.view());
            scatter_add_rows(&mut gs, &vb.items, gi.z_s.view());
            grad_e += &propagate_adjoint(vt, gt.view(), config.layers)?;
            grad_e += &propagate_adjoint(vs, gs.view(), config.layers)?;
        }
        if config.mode.uses_prototypes() && (config.swapped_active() || config.align_active()) {
            grad_ub = Some(gu.bank);
            grad_ib = Some(gi.bank);
        }
    }

    if config.mode.uses_prototypes() && config.uniform_active() {
        let (uu, gu) = uniformity_loss_and_grad(&params.user_bank, config.beta, &config.uniformity)?;
        let (ui, gi) = uniformity_loss_and_grad(&params.item_bank, config.beta, &config.uniformity)?;
        parts.uniform = uu + ui;
        let l3 = T::of(w.lambda3);
        let add = |slot: &mut Option<Array2<T>>, g: Array2<T>| match slot {
            Some(acc) => acc.scaled_add(l3, &g),
            None => *slot = Some(g.mapv(|v| v * l3)),
        };
        add(&mut grad_ub, gu);
        add(&mut grad_ib, gi);
    }

    let report = assemble_total(&parts, config.weights, config.mode)?;
    Ok((report, Gradients { embeddings: grad_e, user_bank: grad_ub, item_bank: grad_ib }))
}

/// One optimizer step on `batch`: two fresh views, frozen targets, every
/// active loss, one Adam update, and bank renormalization.
pub fn train_step<T: Real>(
    params: &mut ModelState<T>,
    opt: &mut AdamState<T>,
    batch: &TripleBatch,
    ctx: &TrainContext<'_>,
    config: &StepConfig,
) -> Result<LossReport> {
    let views = if config.needs_views() {
        let (nu, ni) = (params.num_users(), params.num_items());
        let draw = |stream| {
            let seed = derive_seed(ctx.seed, keys::VIEW, opt.step, stream);
            make_view(ctx.train, nu, ni, config.drop_rate, seed, config.augmentation)
        };
        Some((draw(1)?, draw(2)?))
    } else {
        None
    };
    let view_adj = views.as_ref().map(|(a, b)| (&a.adjacency, &b.adjacency));
    let frozen = freeze(params, batch, view_adj, config)?;
    let (report, grads) = loss_and_gradients(params, batch, ctx.adjacency, view_adj, &frozen, config)?;
    if !report.total.is_finite() {
        return Err(super::OptimError::Invalid(format!("non-finite total loss at step {}", opt.step)).into());
    }
    adam_step(opt, params, &grads, config.lr)?;
    params.renormalize_banks()?;
    Ok(report)
}
