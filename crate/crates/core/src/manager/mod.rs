//! Context encoder and K-way worker classifier.

pub mod attention;
pub mod loss;
pub mod target;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::context::{ContextSpec, EmbeddingTables, EncodedContext};
use crate::error::{CatpError, Result};
use crate::nn::{sinusoidal_positions, Bound, EncoderBlock, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::{argmax, Scalar};
use crate::tensor::Tensor;

pub use attention::{extract_attention, AttentionMaps};
pub use loss::{cross_entropy_loss, total_variation, wasserstein_loss, wasserstein_loss_with, ManagerLoss, WassersteinGround};
pub use target::{
    target_distribution_regularized, target_distribution_simple, target_distribution_unnormalized, TargetDistribution,
    TargetRule, LOSS_FLOOR,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManagerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    /// Number of workers `K`.
    pub workers: usize,
    /// Context window length `LC`.
    pub lc: usize,
    pub schema: ContextSpec,
}

impl ManagerConfig {
    pub fn new(schema: ContextSpec, workers: usize, lc: usize) -> Self {
        Self {
            d_model: 32,
            heads: 4,
            layers: 2,
            ff_hidden: 64,
            workers,
            lc,
            schema,
        }
    }
}

/// Tape handles of one manager evaluation.
#[derive(Clone, Debug)]
pub struct ManagerOutput {
    /// `1 × K` selection distribution.
    pub probs: Var,
    /// `layers × heads` attention matrices, each `LC × LC`.
    pub attention: Vec<Vec<Var>>,
}

/// Attention encoder over the context frames, global average pooling and a
/// softmax over workers.
#[derive(Clone, Debug, PartialEq)]
pub struct ManagerModel<T> {
    config: ManagerConfig,
    store: ParamStore<T>,
    tables: Vec<(String, ParamId)>,
    input_proj: Linear,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    head: Linear,
    positions: Tensor<T>,
}

impl<T: Scalar> ManagerModel<T> {
    pub fn new(config: ManagerConfig, seed: u64) -> Result<Self> {
        if config.workers == 0 {
            return Err(CatpError::config("manager needs at least one worker"));
        }
        if config.lc == 0 || config.d_model == 0 {
            return Err(CatpError::config("manager context length and width must be positive"));
        }
        config.schema.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tables = config
            .schema
            .trainable_tables()
            .into_iter()
            .map(|t| {
                let id = store.add_xavier(&format!("embed.{}", t.state), t.rows, t.cols, &mut rng);
                (t.state, id)
            })
            .collect();
        let d = config.d_model;
        let input_proj = Linear::new(&mut store, "input", config.schema.encoded_width(), d, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(&mut store, &format!("enc.{i}"), d, config.heads, config.ff_hidden, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut store, "norm", d);
        let head = Linear::new(&mut store, "head", d, config.workers, &mut rng);
        Ok(Self {
            positions: sinusoidal_positions(config.lc, d),
            config,
            store,
            tables,
            input_proj,
            blocks,
            norm,
            head,
        })
    }

    pub fn from_parts(config: ManagerConfig, params: ParamStore<T>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        crate::workers::check_layout(&m.store, &params)?;
        m.store = params;
        Ok(m)
    }

    /// Zeroes the output layer so the untrained manager is exactly uniform.
    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn workers(&self) -> usize {
        self.config.workers
    }

    /// Current values of the trainable embedding tables.
    pub fn embedding_tables(&self) -> EmbeddingTables<T> {
        EmbeddingTables {
            tables: self
                .tables
                .iter()
                .map(|(name, id)| (name.clone(), self.store.get(*id).clone()))
                .collect(),
        }
    }

    fn check(&self, ctx: &EncodedContext<T>) -> Result<()> {
        let width = self.config.schema.encoded_width();
        if ctx.width() != width {
            return Err(CatpError::invalid(format!(
                "context width {} does not match the trained schema width {width}",
                ctx.width()
            )));
        }
        if ctx.frames() != self.config.lc {
            return Err(CatpError::invalid(format!(
                "context has {} frames, manager expects {}",
                ctx.frames(),
                self.config.lc
            )));
        }
        if ctx.lookups.len() != self.tables.len() {
            return Err(CatpError::invalid("context lookups do not match the schema's embedding tables"));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, ctx: &EncodedContext<T>) -> Result<ManagerOutput> {
        self.check(ctx)?;
        let mut x = tape.constant(ctx.dense.clone());
        for ((name, slots), (table_name, id)) in ctx.lookups.iter().zip(&self.tables) {
            if name != table_name {
                return Err(CatpError::invalid(format!("lookup for '{name}' where '{table_name}' was expected")));
            }
            x = tape.embed_into(x, p.var(*id), slots);
        }
        let x = self.input_proj.forward(tape, p, x);
        let pos = tape.constant(self.positions.clone());
        let mut h = tape.add(x, pos);
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, weights) = block.forward(tape, p, h);
            h = out;
            attention.push(weights);
        }
        let h = self.norm.forward(tape, p, h);
        let pooled = tape.mean_rows(h);
        let logits = self.head.forward(tape, p, pooled);
        Ok(ManagerOutput {
            probs: tape.softmax_rows(logits, false),
            attention,
        })
    }
}

/// Selection distribution `P̂` over the workers for one encoded context.
pub fn manager_forward<T: Scalar>(manager: &ManagerModel<T>, ctx: &EncodedContext<T>) -> Result<Vec<T>> {
    let mut tape = Tape::inference();
    let p = manager.params().bind(&mut tape);
    let out = manager.forward(&mut tape, &p, ctx)?;
    Ok(tape.value(out.probs).data().to_vec())
}

/// Index of the selected worker; ties go to the lowest index.
pub fn select_worker<T: Scalar>(manager: &ManagerModel<T>, ctx: &EncodedContext<T>) -> Result<usize> {
    Ok(argmax(&manager_forward(manager, ctx)?))
}
