//! Multi-head graph attention over scene representation graphs.

use rand_chacha::ChaCha8Rng;
use schemata_numerics::{cst, Real, Tensor, Var};

use crate::params::{FeedForward, Forward, LayerNormParams, ParamId, ParamStore};
use crate::srg::EdgeIndex;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct AttentionHead {
    /// `W`, `d × d`; applied as `z·W`.
    pub projection: ParamId,
    /// Separate `W` for outgoing neighbours; `projection` then serves
    /// incoming neighbours only.
    pub projection_out: Option<ParamId>,
    /// `h`, `2d × 1`; the first `d` entries score the receiver, the rest the projected neighbour.
    pub attention: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub heads: Vec<AttentionHead>,
    pub ffn: FeedForward,
    pub norm_message: LayerNormParams,
    pub norm_output: LayerNormParams,
    pub slope: f64,
    pub dim: usize,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        slope: f64,
        directional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::invalid(
                "a transformer layer needs at least one head",
            ));
        }
        let heads = (0..heads)
            .map(|k| {
                let projection = store.glorot(format!("{name}.head{k}.w"), &[dim, dim], rng)?;
                let projection_out = if directional {
                    Some(store.glorot(format!("{name}.head{k}.w_out"), &[dim, dim], rng)?)
                } else {
                    None
                };
                Ok(AttentionHead {
                    projection,
                    projection_out,
                    attention: store.glorot(format!("{name}.head{k}.h"), &[2 * dim, 1], rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads,
            ffn: FeedForward::new(
                store,
                &format!("{name}.ffn"),
                [dim, ffn_hidden, dim],
                slope,
                rng,
            )?,
            norm_message: LayerNormParams::new(store, &format!("{name}.ln0"), dim),
            norm_output: LayerNormParams::new(store, &format!("{name}.ln1"), dim),
            slope,
            dim,
        })
    }

    /// Per-edge attention coefficients and per-edge projected neighbour states for one head.
    fn head_attention<F: Real>(
        &self,
        fx: &mut Forward<'_, F>,
        head: &AttentionHead,
        z: Var,
        edges: &EdgeIndex,
    ) -> Result<(Var, Var)> {
        let w = fx.param(head.projection);
        let h = fx.param(head.attention);
        let h_self = fx.tape.slice_rows(h, 0, self.dim)?;
        let h_nbr = fx.tape.slice_rows(h, self.dim, 2 * self.dim)?;
        let (projected, rows) = match head.projection_out {
            None => (fx.tape.matmul(z, w)?, edges.neighbors.clone()),
            Some(w_out) => {
                let w_out = fx.param(w_out);
                let p_in = fx.tape.matmul(z, w)?;
                let p_out = fx.tape.matmul(z, w_out)?;
                (
                    fx.tape.concat_rows(&[p_in, p_out])?,
                    edges.directed_neighbors.clone(),
                )
            }
        };
        let nbr = fx.tape.gather_rows(projected, rows)?;
        let score_self = fx.tape.matmul(z, h_self)?;
        let e_self = fx.tape.gather_rows(score_self, edges.receivers.clone())?;
        let e_nbr = fx.tape.matmul(nbr, h_nbr)?;
        let e = fx.tape.add(e_self, e_nbr)?;
        let e = fx.tape.leaky_relu(e, cst(self.slope))?;
        let alpha = fx
            .tape
            .segment_softmax(e, edges.segments.clone(), edges.n_segments)?;
        Ok((alpha, nbr))
    }

    /// `m_in + m_out` for every node: head-averaged, attention-weighted sums
    /// of projected neighbour states.
    pub fn messages<F: Real>(
        &self,
        fx: &mut Forward<'_, F>,
        z: Var,
        edges: &EdgeIndex,
        mut attention_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for head in &self.heads {
            let (alpha, nbr) = self.head_attention(fx, head, z, edges)?;
            if let Some(out) = attention_out.as_deref_mut() {
                out.push(alpha);
            }
            let weighted = fx.tape.scale_rows(nbr, alpha)?;
            let m = fx
                .tape
                .scatter_add_rows(weighted, edges.receivers.clone(), edges.n_nodes)?;
            total = Some(match total {
                Some(t) => fx.tape.add(t, m)?,
                None => m,
            });
        }
        let total = total.expect("at least one head");
        Ok(fx.tape.scale(total, cst(1.0 / self.heads.len() as f64))?)
    }

    pub fn forward<F: Real>(
        &self,
        fx: &mut Forward<'_, F>,
        z: Var,
        edges: &EdgeIndex,
        attention_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let m = self.messages(fx, z, edges, attention_out)?;
        let r = fx.tape.add(z, m)?;
        let z1 = self.norm_message.forward(fx, r)?;
        let f = self.ffn.forward(fx, z1)?;
        let r = fx.tape.add(z1, f)?;
        self.norm_output.forward(fx, r)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        slope: f64,
        directional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                TransformerLayer::new(
                    store,
                    &format!("transformer.{l}"),
                    dim,
                    heads,
                    ffn_hidden,
                    slope,
                    directional,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// Applies every layer in order; with zero layers this is the identity.
    pub fn contextualize<F: Real>(
        &self,
        fx: &mut Forward<'_, F>,
        z: Var,
        edges: &EdgeIndex,
        mut attention_out: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        self.layers.iter().try_fold(z, |z, layer| {
            layer.forward(fx, z, edges, attention_out.as_deref_mut())
        })
    }
}

/// Attention of node `z_i` over a set of incoming neighbours under one head.
pub fn attention_coefficients<F: Real>(
    layer: &TransformerLayer,
    params: &ParamStore<F>,
    head: usize,
    z_i: &[F],
    neighbors: &Tensor<F>,
) -> Result<Vec<F>> {
    let k = neighbors.rows();
    if k == 0 {
        return Err(Error::invalid("attention over an empty neighbour set"));
    }
    let head = layer
        .heads
        .get(head)
        .ok_or_else(|| Error::invalid(format!("head {head} out of range")))?;
    let (mut fx, z, edges) = star(params, z_i, neighbors, layer.dim)?;
    let (alpha, _) = layer.head_attention(&mut fx, head, z, &edges)?;
    Ok(fx.tape.value(alpha).data().to_vec())
}

/// `(1/K) Σ_k Σ_j α_j W_k z_j` over a single set of incoming neighbours (zero when empty).
pub fn neighborhood_message<F: Real>(
    layer: &TransformerLayer,
    params: &ParamStore<F>,
    z_i: &[F],
    neighbors: &Tensor<F>,
) -> Result<Vec<F>> {
    if neighbors.rows() == 0 {
        return Ok(vec![F::zero(); layer.dim]);
    }
    let (mut fx, z, edges) = star(params, z_i, neighbors, layer.dim)?;
    let m = layer.messages(&mut fx, z, &edges, None)?;
    Ok(fx.tape.value(m).row(0).to_vec())
}

/// Node 0 receiving from nodes `1..=k`, all in one direction.
fn star<'a, F: Real>(
    params: &'a ParamStore<F>,
    z_i: &[F],
    neighbors: &Tensor<F>,
    dim: usize,
) -> Result<(Forward<'a, F>, Var, EdgeIndex)> {
    if z_i.len() != dim || neighbors.cols() != dim {
        return Err(Error::invalid(format!(
            "state width {} / neighbour width {} for model width {dim}",
            z_i.len(),
            neighbors.cols()
        )));
    }
    let k = neighbors.rows();
    let mut data = z_i.to_vec();
    data.extend_from_slice(neighbors.data());
    let mut fx = Forward::eval(params);
    let z = fx.tape.constant(Tensor::new(vec![k + 1, dim], data)?);
    let edges = EdgeIndex {
        receivers: vec![0; k].into(),
        neighbors: (1..=k).collect::<Vec<_>>().into(),
        directed_neighbors: (1..=k).collect::<Vec<_>>().into(),
        segments: vec![0; k].into(),
        n_segments: 2 * (k + 1),
        n_nodes: k + 1,
    };
    Ok((fx, z, edges))
}
