use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

use super::strategy::{RoutingStrategy, Scoring};

pub const ROUTER_INIT_STD: f64 = 0.02;
pub const TAU_INIT: f64 = 0.07;
pub const TAU_FLOOR: f64 = 1e-3;

/// Router parameters for every layer of a stack, laid out per strategy.
///
/// Parameter names: `slot{s}.w` for linear slots, `lowrank{l}.u` /
/// `lowrank{l}.v` for per-layer corrections, and `slot{s}.proj`,
/// `slot{s}.emb`, `slot{s}.tau` for cosine slots.
#[derive(Clone, Debug)]
pub struct RouterBank<T> {
    strategy: RoutingStrategy,
    n_layers: usize,
    n_experts: usize,
    d_model: usize,
    params: ParamStore<T>,
}

/// Handles of a bank's parameters on one tape.
pub struct BoundRouter<'a, T> {
    bank: &'a RouterBank<T>,
    vars: Vec<Var>,
}

impl<T: Real> RouterBank<T> {
    pub fn init<R: Rng>(strategy: RoutingStrategy, n_layers: usize, n_experts: usize, d_model: usize, rng: &mut R) -> Result<Self> {
        strategy.validate(n_layers, d_model)?;
        if n_experts == 0 {
            return Err(Error::config("n_experts", "must be positive"));
        }
        let trainable = !strategy.frozen();
        let mut params = ParamStore::new();
        let n_slots = strategy.n_slots(n_layers);
        match strategy.scoring() {
            Scoring::Linear | Scoring::LowRank => {
                for s in 0..n_slots {
                    params.push(format!("slot{s}.w"), truncated_normal(rng, &[n_experts, d_model], ROUTER_INIT_STD), trainable, true);
                }
            }
            Scoring::Cosine => {
                let p = strategy.proj_dim;
                for s in 0..n_slots {
                    params.push(format!("slot{s}.proj"), truncated_normal(rng, &[p, d_model], ROUTER_INIT_STD), trainable, true);
                    params.push(format!("slot{s}.emb"), truncated_normal(rng, &[n_experts, p], ROUTER_INIT_STD), trainable, false);
                    params.push(format!("slot{s}.tau"), Tensor::scalar(T::of(TAU_INIT)), trainable, false);
                }
            }
        }
        if strategy.scoring() == Scoring::LowRank && strategy.rank > 0 {
            let r = strategy.rank;
            for l in 0..n_layers {
                // zero U: every layer starts exactly at the shared router
                params.push(format!("lowrank{l}.u"), Tensor::zeros([n_experts, r]), trainable, true);
                params.push(format!("lowrank{l}.v"), truncated_normal(rng, &[r, d_model], ROUTER_INIT_STD), trainable, true);
            }
        }
        Ok(Self { strategy, n_layers, n_experts, d_model, params })
    }

    /// Rebuilds a bank around existing parameters (checkpoint load).
    pub fn from_params(strategy: RoutingStrategy, n_layers: usize, n_experts: usize, d_model: usize, params: ParamStore<T>) -> Result<Self> {
        strategy.validate(n_layers, d_model)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Self::init(strategy.clone(), n_layers, n_experts, d_model, &mut rng)?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!("router expects {} tensors, found {}", template.params.len(), params.len())));
        }
        for (want, got) in template.params.entries().iter().zip(params.entries()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::Format(format!(
                    "router tensor `{}` {:?} does not match expected `{}` {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        let mut bank = template;
        for (dst, src) in bank.params.entries_mut().iter_mut().zip(params.entries()) {
            dst.tensor = src.tensor.clone();
        }
        Ok(bank)
    }

    pub fn strategy(&self) -> &RoutingStrategy {
        &self.strategy
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of scalars in the `W` matrices; zero for cosine scoring.
    pub fn weight_count(&self) -> usize {
        self.params.entries().iter().filter(|e| e.name.ends_with(".w")).map(|e| e.tensor.numel()).sum()
    }

    /// Keeps learnable temperatures at or above the floor.
    pub fn clamp_temperatures(&mut self) {
        for e in self.params.entries_mut() {
            if e.name.ends_with(".tau") {
                let v = &mut e.tensor.data_mut()[0];
                if v.as_f64() < TAU_FLOOR {
                    *v = T::of(TAU_FLOOR);
                }
            }
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<T>) -> Result<BoundRouter<'a, T>> {
        Ok(BoundRouter { bank: self, vars: self.params.bind(tape)? })
    }

    /// Expert probabilities for a single representation at zero-based `layer`.
    pub fn route_probs(&self, x: &[T], layer: usize) -> Result<Vec<T>> {
        if x.len() != self.d_model {
            return Err(Error::shape("route_probs", format!("input of length {} vs d_model {}", x.len(), self.d_model)));
        }
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape)?;
        let xv = tape.constant(Tensor::new([1, self.d_model], x.to_vec())?)?;
        let p = bound.route_probs(&mut tape, xv, layer)?;
        Ok(tape.data(p).to_vec())
    }
}

impl<T: Real> BoundRouter<'_, T> {
    pub fn bank(&self) -> &RouterBank<T> {
        self.bank
    }

    /// Variables of this bank on the tape, in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn replace_var(&mut self, i: usize, var: Var) {
        self.vars[i] = var;
    }

    fn var(&self, name: &str) -> Var {
        let i = self.bank.params.index_of(name).unwrap_or_else(|| panic!("router parameter `{name}` missing"));
        self.vars[i]
    }

    /// Strategy-specific logits for rows of `x (n x d)` at zero-based `layer`.
    pub fn route_logits(&self, tape: &mut Tape<T>, x: Var, layer: usize) -> Result<Var> {
        let bank = self.bank;
        if layer >= bank.n_layers {
            return Err(Error::invalid(format!("layer {layer} out of range for {} layers", bank.n_layers)));
        }
        let slot = bank.strategy.slot_of(layer);
        match bank.strategy.scoring() {
            Scoring::Linear => tape.linear(x, self.var(&format!("slot{slot}.w"))),
            Scoring::LowRank => {
                let base = tape.linear(x, self.var("slot0.w"))?;
                if bank.strategy.rank == 0 {
                    return Ok(base);
                }
                let down = tape.linear(x, self.var(&format!("lowrank{layer}.v")))?;
                let delta = tape.linear(down, self.var(&format!("lowrank{layer}.u")))?;
                tape.add(base, delta)
            }
            Scoring::Cosine => {
                let tau = self.var(&format!("slot{slot}.tau"));
                if tape.data(tau)[0] <= T::zero() {
                    return Err(Error::invalid("router temperature must be positive"));
                }
                let h = tape.linear(x, self.var(&format!("slot{slot}.proj")))?;
                let h = tape.l2_normalize_rows(h)?;
                let e = tape.l2_normalize_rows(self.var(&format!("slot{slot}.emb")))?;
                let cos = tape.linear(h, e)?;
                tape.div_scalar(cos, tau)
            }
        }
    }

    /// Row-wise softmax of [`Self::route_logits`], shaped `(n x N)`.
    pub fn route_probs(&self, tape: &mut Tape<T>, x: Var, layer: usize) -> Result<Var> {
        let logits = self.route_logits(tape, x, layer)?;
        tape.softmax(logits)
    }
}
