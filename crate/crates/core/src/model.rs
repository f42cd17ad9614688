//! Model hyperparameters and the full set of trainable components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemata_numerics::{Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::params::{Forward, ParamStore};
use crate::schema::{InjectionNet, SchemaBank};
use crate::srg::PredicateInitNet;
use crate::transformer::TransformerStack;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub injection_hidden: usize,
    pub predicate_hidden: usize,
    pub object_dropout: f64,
    pub predicate_dropout: f64,
    pub slope: f64,
    /// Separate attention projections for incoming and outgoing neighbours.
    pub directional_projections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            layers: 4,
            heads: 5,
            ffn_hidden: 2048,
            injection_hidden: 512,
            predicate_hidden: 512,
            object_dropout: 0.8,
            predicate_dropout: 0.1,
            slope: 0.2,
            directional_projections: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("injection_hidden", self.injection_hidden),
            ("predicate_hidden", self.predicate_hidden),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        for (name, rate) in [
            ("object_dropout", self.object_dropout),
            ("predicate_dropout", self.predicate_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1), got {rate}"
                )));
            }
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::invalid(format!(
                "slope must lie in (0, 1), got {}",
                self.slope
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub n_object_classes: usize,
    pub n_predicate_classes: usize,
    pub params: ParamStore<F>,
    pub predicate_init: PredicateInitNet,
    pub stack: TransformerStack,
    pub injection: InjectionNet,
    pub schemata: SchemaBank,
}

impl<F: Real> Model<F> {
    pub fn new(
        config: ModelConfig,
        n_object_classes: usize,
        n_predicate_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if n_object_classes == 0 || n_predicate_classes == 0 {
            return Err(Error::invalid(
                "vocabulary needs at least one object and one predicate class",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let c = &config;
        let predicate_init = PredicateInitNet::new(
            &mut params,
            c.predicate_hidden,
            c.dim,
            c.predicate_dropout,
            c.slope,
            &mut rng,
        )?;
        let stack = TransformerStack::new(
            &mut params,
            c.layers,
            c.dim,
            c.heads,
            c.ffn_hidden,
            c.slope,
            c.directional_projections,
            &mut rng,
        )?;
        let injection =
            InjectionNet::new(&mut params, c.dim, c.injection_hidden, c.slope, &mut rng)?;
        let schemata = SchemaBank::new(
            &mut params,
            n_object_classes,
            n_predicate_classes,
            c.dim,
            &mut rng,
        )?;
        Ok(Self {
            config,
            n_object_classes,
            n_predicate_classes,
            params,
            predicate_init,
            stack,
            injection,
            schemata,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            n_object_classes: self.n_object_classes,
            n_predicate_classes: self.n_predicate_classes,
            params: self.params.cast(),
            predicate_init: self.predicate_init.clone(),
            stack: self.stack.clone(),
            injection: self.injection.clone(),
            schemata: self.schemata.clone(),
        }
    }

    /// Step-0 node features `[x_o; x_p]`: ingested object features (with
    /// input dropout in training) followed by predicate features computed
    /// from relational geometry.
    pub fn node_inputs(
        &self,
        fx: &mut Forward<'_, F>,
        object_features: &Tensor<F>,
        rel_positions: &Tensor<F>,
    ) -> Result<Var> {
        let d = self.dim();
        if object_features.cols() != d && object_features.rows() > 0 {
            return Err(Error::invalid(format!(
                "object features have width {}, model width is {d}",
                object_features.cols()
            )));
        }
        let xo = fx.tape.constant(object_features.clone());
        let xo = fx.dropout(xo, self.config.object_dropout)?;
        let rel = fx.tape.constant(rel_positions.clone());
        let xp = self.predicate_init.forward(fx, rel)?;
        Ok(fx.tape.concat_rows(&[xo, xp])?)
    }
}
