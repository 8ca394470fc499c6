use super::step::{freeze, loss_and_gradients, StepConfig};
use super::{ModelState, OptimError};
use crate::data::{build_adjacency, Interaction, NormalizedAdjacency, TripleBatch};
use crate::objectives::{bpr_loss_and_grad, infonce_loss_and_grad, l2_reg_and_grad, Mode};
use crate::propagation::{make_view, propagate, propagate_adjoint, EmbeddingTable};
use crate::prototypes::{
    alignment_loss_and_grad, swapped_loss_with_targets, swapped_targets, uniformity_loss_and_grad, EntityKind,
    PrototypeBank,
};
use crate::rng::{derive_seed, keyed_rng, keys};
use crate::Result;
use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Size and behavior of the randomized audit instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub k: usize,
    pub batch: usize,
    /// Hold transport targets and assignments fixed inside the finite
    /// differences. Turning this off makes the numerical side differentiate
    /// through Sinkhorn, which the analytic side never does.
    pub severed: bool,
    pub step_size: f64,
    /// Absolute floor in the relative-error denominator.
    pub floor: f64,
    pub step: StepConfig,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            num_users: 5,
            num_items: 7,
            dim: 6,
            k: 5,
            batch: 6,
            severed: true,
            step_size: 1e-4,
            floor: 1e-6,
            step: StepConfig { drop_rate: 0.2, ..StepConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAudit {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub mode: Mode,
    pub severed: bool,
    pub blocks: Vec<BlockAudit>,
}

impl AuditReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failing(&self, tol: f64) -> Vec<&BlockAudit> {
        self.blocks.iter().filter(|b| !(b.max_rel_error < tol)).collect()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.failing(tol).is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&BlockAudit> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Five-point central differences of `f` at `x`.
fn numeric_grad(x: &Array2<f64>, h: f64, f: &mut dyn FnMut(&Array2<f64>) -> Result<f64>) -> Result<Array2<f64>> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let x0 = x[idx];
        let mut at = |d: f64, probe: &mut Array2<f64>| -> Result<f64> {
            probe[idx] = x0 + d;
            let v = f(probe);
            probe[idx] = x0;
            v
        };
        let fp2 = at(2.0 * h, &mut probe)?;
        let fp1 = at(h, &mut probe)?;
        let fm1 = at(-h, &mut probe)?;
        let fm2 = at(-2.0 * h, &mut probe)?;
        g[idx] = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h);
    }
    Ok(g)
}

fn max_rel_error(analytic: &Array2<f64>, numeric: &Array2<f64>, floor: f64) -> f64 {
    Zip::from(analytic).and(numeric).fold(0.0, |m: f64, &a, &n| {
        let denom = a.abs().max(n.abs()).max(floor);
        m.max((a - n).abs() / denom)
    })
}

struct Instance {
    num_users: usize,
    num_items: usize,
    adjacency: NormalizedAdjacency,
    view_t: NormalizedAdjacency,
    view_s: NormalizedAdjacency,
    batch: TripleBatch,
    params: ModelState<f64>,
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

fn build_instance(cfg: &AuditConfig, seed: u64) -> Result<Instance> {
    let (nu, ni) = (cfg.num_users, cfg.num_items);
    if nu + ni > 12 || cfg.dim > 8 || cfg.k > 6 || cfg.batch > 6 || nu == 0 || ni < 2 || cfg.k < 2 || cfg.batch < 2 {
        return Err(OptimError::Invalid(format!(
            "audit instance too large or degenerate: {nu} users, {ni} items, D={}, K={}, B={}",
            cfg.dim, cfg.k, cfg.batch
        ))
        .into());
    }
    let mut rng = keyed_rng(seed, keys::INIT, 100, 0);
    // each user keeps at least one observed and one unobserved item
    let mut train = Vec::new();
    for u in 0..nu {
        let mut items: Vec<usize> = (0..ni).collect();
        items.shuffle(&mut rng);
        let n = rng.random_range(1..ni);
        train.extend(items[..n].iter().map(|&i| Interaction { user: u, item: i }));
    }
    for i in 0..ni {
        if !train.iter().any(|it| it.item == i) {
            let u = rng.random_range(0..nu);
            if train.iter().filter(|it| it.user == u).count() < ni - 1 {
                train.push(Interaction { user: u, item: i });
            }
        }
    }
    let adjacency = build_adjacency(&train, nu, ni)?;
    let view = |stream| {
        make_view(&train, nu, ni, cfg.step.drop_rate, derive_seed(seed, keys::VIEW, 0, stream), cfg.step.augmentation)
            .map(|v| v.adjacency)
    };
    let (view_t, view_s) = (view(1)?, view(2)?);

    let mut batch = TripleBatch::default();
    for _ in 0..cfg.batch {
        let it = train[rng.random_range(0..train.len())];
        let negatives: Vec<usize> =
            (0..ni).filter(|&j| !train.contains(&Interaction { user: it.user, item: j })).collect();
        batch.users.push(it.user);
        batch.pos_items.push(it.item);
        batch.neg_items.push(negatives[rng.random_range(0..negatives.len())]);
    }

    let embeddings = EmbeddingTable::new(gaussian(nu + ni, cfg.dim, &mut rng).mapv(|v| 0.5 * v), nu)?;
    let user_bank = PrototypeBank::random(cfg.k, cfg.dim, EntityKind::User, &mut rng)?;
    let item_bank = PrototypeBank::random(cfg.k, cfg.dim, EntityKind::Item, &mut rng)?;
    let params = ModelState::from_parts(embeddings, user_bank, item_bank)?;
    Ok(Instance { num_users: nu, num_items: ni, adjacency, view_t, view_s, batch, params })
}

struct Auditor<'a> {
    cfg: &'a AuditConfig,
    blocks: Vec<BlockAudit>,
}

impl Auditor<'_> {
    fn check(
        &mut self,
        name: &str,
        x: &Array2<f64>,
        analytic: &Array2<f64>,
        mut f: impl FnMut(&Array2<f64>) -> Result<f64>,
    ) -> Result<()> {
        let numeric = numeric_grad(x, self.cfg.step_size, &mut f)?;
        self.blocks.push(BlockAudit {
            name: name.to_string(),
            entries: x.len(),
            max_rel_error: max_rel_error(analytic, &numeric, self.cfg.floor),
        });
        Ok(())
    }
}

fn bank_from(m: &Array2<f64>, kind: EntityKind) -> Result<PrototypeBank<f64>> {
    Ok(PrototypeBank::new(m.clone(), kind)?)
}

/// Builds a random tiny instance from `seed` and compares every analytic
/// gradient block against finite differences.
pub fn gradient_audit(cfg: &AuditConfig, seed: u64) -> Result<AuditReport> {
    let inst = build_instance(cfg, seed)?;
    let step = &cfg.step;
    let (nu, n) = (inst.num_users, inst.num_users + inst.num_items);
    let mut a = Auditor { cfg, blocks: Vec::new() };
    let mut rng = keyed_rng(seed, keys::INIT, 101, 0);

    // ranking loss on layer-mean embeddings
    let fin = gaussian(n, cfg.dim, &mut rng);
    let as_stack = |m: &Array2<f64>| -> Result<_> {
        let table = EmbeddingTable::new(m.clone(), nu)?;
        let flat = build_adjacency(&[], nu, inst.num_items)?;
        Ok(propagate(&flat, &table, 0)?)
    };
    let (_, g) = bpr_loss_and_grad(&as_stack(&fin)?, &inst.batch, step.bpr_reduction)?;
    a.check("bpr", &fin, &g.to_dense(n), |m| Ok(bpr_loss_and_grad(&as_stack(m)?, &inst.batch, step.bpr_reduction)?.0))?;

    // adjoint of propagation through <G, final(E)>
    let e0 = inst.params.embeddings.matrix().clone();
    let probe = gaussian(n, cfg.dim, &mut rng);
    let adj_grad = propagate_adjoint(&inst.adjacency, probe.view(), step.layers)?;
    a.check("propagation_adjoint", &e0, &adj_grad, |m| {
        let s = propagate(&inst.adjacency, &EmbeddingTable::new(m.clone(), nu)?, step.layers)?;
        Ok((s.final_embeddings() * &probe).sum())
    })?;

    let (_, g) = l2_reg_and_grad(&e0, nu, &inst.batch, step.reg_weight.max(1e-2))?;
    a.check("l2_reg", &e0, &g.to_dense(n), |m| Ok(l2_reg_and_grad(m, nu, &inst.batch, step.reg_weight.max(1e-2))?.0))?;

    if step.mode != Mode::BackboneOnly {
        audit_prototype_blocks(&mut a, &inst, &mut rng)?;
    }
    audit_total(&mut a, &inst)?;
    Ok(AuditReport { mode: step.mode, severed: cfg.severed, blocks: a.blocks })
}

fn audit_prototype_blocks(a: &mut Auditor<'_>, inst: &Instance, rng: &mut impl Rng) -> Result<()> {
    let cfg = a.cfg;
    let step = &cfg.step;
    let b = cfg.batch;
    let bank = inst.params.user_bank.clone();
    let c0 = bank.matrix().clone();
    let z_t = gaussian(b, cfg.dim, rng);
    let z_s = gaussian(b, cfg.dim, rng);
    let swap = step.swap;
    let (qt, qs) = swapped_targets(z_t.view(), z_s.view(), &bank, &swap)?;
    let out = swapped_loss_with_targets(z_t.view(), z_s.view(), &bank, qt.view(), qs.view(), &swap)?;
    let severed = cfg.severed;
    let swapped_at = |zt: &Array2<f64>, zs: &Array2<f64>, c: &PrototypeBank<f64>| -> Result<f64> {
        let (qt2, qs2) = if severed { (qt.clone(), qs.clone()) } else { swapped_targets(zt.view(), zs.view(), c, &swap)? };
        Ok(swapped_loss_with_targets(zt.view(), zs.view(), c, qt2.view(), qs2.view(), &swap)?.loss)
    };
    a.check("swapped.z_t", &z_t, &out.grad_z_t, |m| swapped_at(m, &z_s, &bank))?;
    a.check("swapped.z_s", &z_s, &out.grad_z_s, |m| swapped_at(&z_t, m, &bank))?;
    a.check("swapped.bank", &c0, &out.grad_bank, |m| swapped_at(&z_t, &z_s, &bank_from(m, EntityKind::User)?))?;

    let k = cfg.k;
    let assign_t: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let assign_s: Vec<usize> = assign_t.iter().map(|&t| (t + rng.random_range(1..k)) % k).collect();
    let (_, g) = alignment_loss_and_grad(&bank, &assign_t, &assign_s, step.alpha)?;
    a.check("alignment.bank", &c0, &g, |m| {
        Ok(alignment_loss_and_grad(&bank_from(m, EntityKind::User)?, &assign_t, &assign_s, step.alpha)?.0)
    })?;

    let (_, g) = uniformity_loss_and_grad(&bank, step.beta, &step.uniformity)?;
    a.check("uniformity.bank", &c0, &g, |m| {
        Ok(uniformity_loss_and_grad(&bank_from(m, EntityKind::User)?, step.beta, &step.uniformity)?.0)
    })?;

    let out = infonce_loss_and_grad(z_t.view(), z_s.view(), swap.tau)?;
    a.check("infonce.z_t", &z_t, &out.grad_z_t, |m| Ok(infonce_loss_and_grad(m.view(), z_s.view(), swap.tau)?.loss))?;
    a.check("infonce.z_s", &z_s, &out.grad_z_s, |m| Ok(infonce_loss_and_grad(z_t.view(), m.view(), swap.tau)?.loss))?;
    Ok(())
}

fn audit_total(a: &mut Auditor<'_>, inst: &Instance) -> Result<()> {
    let cfg = a.cfg;
    let step = &cfg.step;
    let views = step.needs_views().then_some((&inst.view_t, &inst.view_s));
    let base = &inst.params;
    let frozen = freeze(base, &inst.batch, views, step)?;
    let (_, grads) = loss_and_gradients(base, &inst.batch, &inst.adjacency, views, &frozen, step)?;
    let total_at = |p: &ModelState<f64>| -> Result<f64> {
        let fz = if cfg.severed { frozen.clone() } else { freeze(p, &inst.batch, views, step)? };
        Ok(loss_and_gradients(p, &inst.batch, &inst.adjacency, views, &fz, step)?.0.total)
    };
    let nu = inst.num_users;
    a.check("total.embeddings", base.embeddings.matrix(), &grads.embeddings, |m| {
        let mut p = base.clone();
        p.embeddings = EmbeddingTable::new(m.clone(), nu)?;
        total_at(&p)
    })?;
    if let Some(g) = &grads.user_bank {
        a.check("total.user_bank", base.user_bank.matrix(), g, |m| {
            let mut p = base.clone();
            p.user_bank = bank_from(m, EntityKind::User)?;
            total_at(&p)
        })?;
    }
    if let Some(g) = &grads.item_bank {
        a.check("total.item_bank", base.item_bank.matrix(), g, |m| {
            let mut p = base.clone();
            p.item_bank = bank_from(m, EntityKind::Item)?;
            total_at(&p)
        })?;
    }
    Ok(())
}
