//! Decoder-only transformer whose feed-forward sublayers are all MoE layers.

mod checkpoint;
mod config;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamStore};
use crate::router::{BoundRouter, RouterBank};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Positions};
pub use forward::{Eval, Forward, ForwardOptions, LayerRouting, Loss};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
struct LayerIdx {
    ln1: (usize, usize),
    wqkv: usize,
    wo: usize,
    ln2: (usize, usize),
    experts: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct BodyIdx {
    tok_emb: usize,
    pos_emb: Option<usize>,
    layers: Vec<LayerIdx>,
    ln_f: (usize, usize),
    head: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    body: ParamStore<T>,
    router: RouterBank<T>,
    idx: BodyIdx,
}

/// A model's parameters recorded on one tape.
pub struct BoundModel<'a, T> {
    model: &'a Model<T>,
    body: Vec<Var>,
    router: BoundRouter<'a, T>,
}

fn ones<T: Real>(n: usize) -> Tensor<T> {
    Tensor::from_parts(vec![n], vec![T::one(); n])
}

impl<T: Real> Model<T> {
    /// Fresh parameters. The body and the router draw from separate streams
    /// of the same seed, so strategies compared at one seed share the body
    /// initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_std = INIT_STD / (2.0 * c.n_layers.max(1) as f64).sqrt();
        let mut body = ParamStore::new();
        body.push("tok_emb", truncated_normal(&mut rng, &[c.vocab_size, c.d_model], INIT_STD), true, false);
        if c.positions == Positions::Learned {
            body.push("pos_emb", truncated_normal(&mut rng, &[c.seq_len, c.d_model], INIT_STD), true, false);
        }
        for l in 0..c.n_layers {
            body.push(format!("layers.{l}.ln1.gain"), ones(c.d_model), true, false);
            body.push(format!("layers.{l}.ln1.bias"), Tensor::zeros([c.d_model]), true, false);
            body.push(format!("layers.{l}.attn.wqkv"), truncated_normal(&mut rng, &[3 * c.d_model, c.d_model], INIT_STD), true, true);
            body.push(format!("layers.{l}.attn.wo"), truncated_normal(&mut rng, &[c.d_model, c.d_model], out_std), true, true);
            body.push(format!("layers.{l}.ln2.gain"), ones(c.d_model), true, false);
            body.push(format!("layers.{l}.ln2.bias"), Tensor::zeros([c.d_model]), true, false);
            for e in 0..c.n_experts {
                body.push(format!("layers.{l}.experts.{e}.w1"), truncated_normal(&mut rng, &[c.d_ffn, c.d_model], INIT_STD), true, true);
                body.push(format!("layers.{l}.experts.{e}.w2"), truncated_normal(&mut rng, &[c.d_model, c.d_ffn], out_std), true, true);
            }
        }
        body.push("ln_f.gain", ones(c.d_model), true, false);
        body.push("ln_f.bias", Tensor::zeros([c.d_model]), true, false);
        body.push("head", truncated_normal(&mut rng, &[c.vocab_size, c.d_model], INIT_STD), true, true);

        let mut router_rng = ChaCha8Rng::seed_from_u64(seed);
        router_rng.set_stream(1);
        let router = RouterBank::init(c.strategy.clone(), c.n_layers, c.n_experts, c.d_model, &mut router_rng)?;
        let idx = Self::index(&config, &body)?;
        Ok(Self { config, body, router, idx })
    }

    /// Reassembles a model from named tensors; `router.`-prefixed names go
    /// to the router bank.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let template = Self::init(config.clone(), 0)?;
        let mut body = template.body.clone();
        let mut router = ParamStore::new();
        let mut seen = vec![false; body.len()];
        for (name, t) in named {
            if let Some(rest) = name.strip_prefix("router.") {
                let entry = template
                    .router
                    .params()
                    .entries()
                    .iter()
                    .find(|e| e.name == rest)
                    .ok_or_else(|| Error::Format(format!("unexpected router tensor `{rest}`")))?;
                router.push(rest, t, entry.trainable, entry.decay);
            } else {
                let i = body.index_of(&name).ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
                body.set(&name, t).map_err(|e| Error::Format(e.to_string()))?;
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::Format(format!("missing tensor `{}`", body.entries()[i].name)));
        }
        // restore the template's order so parameter indices line up
        let mut ordered = ParamStore::new();
        for want in template.router.params().entries() {
            let got = router
                .entries()
                .iter()
                .find(|e| e.name == want.name)
                .ok_or_else(|| Error::Format(format!("missing router tensor `{}`", want.name)))?;
            ordered.push(got.name.clone(), got.tensor.clone(), got.trainable, got.decay);
        }
        let router = RouterBank::from_params(config.strategy.clone(), config.n_layers, config.n_experts, config.d_model, ordered)?;
        let idx = Self::index(&config, &body)?;
        Ok(Self { config, body, router, idx })
    }

    fn index(c: &ModelConfig, body: &ParamStore<T>) -> Result<BodyIdx> {
        let at = |name: String| body.index_of(&name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")));
        let layers = (0..c.n_layers)
            .map(|l| {
                Ok(LayerIdx {
                    ln1: (at(format!("layers.{l}.ln1.gain"))?, at(format!("layers.{l}.ln1.bias"))?),
                    wqkv: at(format!("layers.{l}.attn.wqkv"))?,
                    wo: at(format!("layers.{l}.attn.wo"))?,
                    ln2: (at(format!("layers.{l}.ln2.gain"))?, at(format!("layers.{l}.ln2.bias"))?),
                    experts: (0..c.n_experts)
                        .map(|e| Ok((at(format!("layers.{l}.experts.{e}.w1"))?, at(format!("layers.{l}.experts.{e}.w2"))?)))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(BodyIdx {
            tok_emb: at("tok_emb".into())?,
            pos_emb: body.index_of("pos_emb"),
            layers,
            ln_f: (at("ln_f.gain".into())?, at("ln_f.bias".into())?),
            head: at("head".into())?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn body(&self) -> &ParamStore<T> {
        &self.body
    }

    pub fn body_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.body
    }

    pub fn router(&self) -> &RouterBank<T> {
        &self.router
    }

    pub fn router_mut(&mut self) -> &mut RouterBank<T> {
        &mut self.router
    }

    pub fn n_params(&self) -> usize {
        self.body.numel() + self.router.params().numel()
    }

    /// All tensors with router names prefixed by `router.`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let body = self.body.entries().iter().map(|e| (e.name.clone(), &e.tensor));
        let router = self.router.params().entries().iter().map(|e| (format!("router.{}", e.name), &e.tensor));
        body.chain(router).collect()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let named = self.named_tensors().into_iter().map(|(n, t)| (n, t.cast::<U>())).collect();
        Model::from_named(self.config.clone(), named).expect("cast preserves layout")
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<T>) -> Result<BoundModel<'a, T>> {
        Ok(BoundModel { model: self, body: self.body.bind(tape)?, router: self.router.bind(tape)? })
    }
}

impl<'a, T: Real> BoundModel<'a, T> {
    pub fn model(&self) -> &'a Model<T> {
        self.model
    }

    pub fn body_vars(&self) -> &[Var] {
        &self.body
    }

    pub fn router(&self) -> &BoundRouter<'a, T> {
        &self.router
    }

    /// Swaps the variable used for the named parameter, e.g. to probe one
    /// tensor in a gradient check. Router names carry the `router.` prefix.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        if let Some(rest) = name.strip_prefix("router.") {
            let i = self.model.router.params().index_of(rest);
            let i = i.ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
            self.router.replace_var(i, var);
        } else {
            let i = self.model.body.index_of(name).ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
            self.body[i] = var;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
