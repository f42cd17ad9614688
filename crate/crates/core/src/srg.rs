//! Scene representation graphs: object and predicate nodes, bipartite
//! neighbourhoods, and the relational geometry that seeds predicate nodes.
//!
//! Node layout is fixed: the `n` object nodes come first, followed by the
//! `m` predicate nodes. Edges point from a head object to its predicate
//! node and from the predicate node to its tail object, so a predicate's
//! incoming neighbour is its head and its outgoing neighbour is its tail.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use schemata_numerics::{cst, Real, Tensor, Var};

use crate::data::{SceneRecord, Vocabulary};
use crate::params::{Forward, Linear, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "box [{x}, {y}, {w}, {h}] needs positive finite extents"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_array(b: [f64; 4]) -> Result<Self> {
        Self::new(b[0], b[1], b[2], b[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Position of a head box relative to a tail box, in tail-box units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelPositionVector {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RelPositionVector {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}

pub fn rel_position_vector(head: &BoundingBox, tail: &BoundingBox) -> Result<RelPositionVector> {
    for b in [head, tail] {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::invalid(format!("nonpositive box extent in {b:?}")));
        }
    }
    Ok(RelPositionVector {
        tx: (head.x - tail.x) / tail.w,
        ty: (head.y - tail.y) / tail.h,
        tw: (head.w / tail.w).ln(),
        th: (head.h / tail.h).ln(),
    })
}

/// Per-node attention edges: entry `e` lets `receivers[e]` attend to
/// `neighbors[e]` within softmax group `segments[e]` (`2·node + direction`,
/// direction 0 = incoming, 1 = outgoing).
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub receivers: Rc<[usize]>,
    pub neighbors: Rc<[usize]>,
    /// `neighbors[e] + direction · n_nodes`: row of the neighbour in a
    /// `[incoming; outgoing]` stack of per-direction projections.
    pub directed_neighbors: Rc<[usize]>,
    pub segments: Rc<[usize]>,
    pub n_segments: usize,
    pub n_nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    n_objects: usize,
    pairs: Vec<(usize, usize)>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
}

impl Topology {
    /// `pairs[p] = (head, tail)` object indices of predicate node `p`.
    pub fn new(n_objects: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let n_nodes = n_objects + pairs.len();
        let mut incoming = vec![Vec::new(); n_nodes];
        let mut outgoing = vec![Vec::new(); n_nodes];
        for (p, &(h, t)) in pairs.iter().enumerate() {
            if h >= n_objects || t >= n_objects {
                return Err(Error::invalid(format!(
                    "relation {p}: dangling index ({h}, {t}) for {n_objects} objects"
                )));
            }
            if h == t {
                return Err(Error::invalid(format!(
                    "relation {p}: self-relation on object {h}"
                )));
            }
            let node = n_objects + p;
            outgoing[h].push(node);
            incoming[node].push(h);
            outgoing[node].push(t);
            incoming[t].push(node);
        }
        Ok(Self {
            n_objects,
            pairs,
            incoming,
            outgoing,
        })
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn n_predicates(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_objects + self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn predicate_node(&self, p: usize) -> usize {
        self.n_objects + p
    }

    pub fn is_object(&self, node: usize) -> bool {
        node < self.n_objects
    }

    /// `N_in(node)`
    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    /// `N_out(node)`
    pub fn outgoing(&self, node: usize) -> &[usize] {
        &self.outgoing[node]
    }

    /// Directed edges `(source, target)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n_nodes())
            .flat_map(|s| self.outgoing[s].iter().map(move |&t| (s, t)))
            .collect()
    }

    pub fn edge_index(&self) -> EdgeIndex {
        let mut receivers = Vec::new();
        let mut neighbors = Vec::new();
        let mut directed = Vec::new();
        let mut segments = Vec::new();
        let n = self.n_nodes();
        for node in 0..n {
            for (dir, list) in [&self.incoming[node], &self.outgoing[node]]
                .into_iter()
                .enumerate()
            {
                for &j in list {
                    receivers.push(node);
                    neighbors.push(j);
                    directed.push(j + dir * n);
                    segments.push(2 * node + dir);
                }
            }
        }
        EdgeIndex {
            receivers: receivers.into(),
            neighbors: neighbors.into(),
            directed_neighbors: directed.into(),
            segments: segments.into(),
            n_segments: 2 * self.n_nodes(),
            n_nodes: self.n_nodes(),
        }
    }

    /// Disjoint union: all objects of all parts first, then all predicates,
    /// each group in part order.
    pub fn disjoint_union(parts: &[&Topology]) -> Topology {
        let mut offset = 0;
        let mut pairs = Vec::new();
        for part in parts {
            pairs.extend(part.pairs.iter().map(|&(h, t)| (h + offset, t + offset)));
            offset += part.n_objects;
        }
        Topology::new(offset, pairs).expect("union of valid topologies is valid")
    }
}

/// Ingested, index-resolved inputs of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInput<F> {
    pub id: String,
    pub topology: Topology,
    pub boxes: Vec<BoundingBox>,
    /// `n × d`; objects without a feature are zero rows.
    pub object_features: Tensor<F>,
    /// `m × 4` relational position vectors.
    pub rel_positions: Tensor<F>,
    pub object_labels: Vec<usize>,
    pub predicate_labels: Vec<usize>,
}

impl<F: Real> SceneInput<F> {
    pub fn from_record(record: &SceneRecord, vocab: &Vocabulary, dim: usize) -> Result<Self> {
        record
            .validate(vocab, Some(dim))
            .map_err(|e| Error::invalid(format!("record {:?}: {e}", record.id)))?;
        let n = record.objects.len();
        let boxes = record
            .objects
            .iter()
            .map(|o| BoundingBox::from_array(o.bbox))
            .collect::<Result<Vec<_>>>()?;
        let mut object_features = Tensor::zeros(&[n, dim]);
        for (i, o) in record.objects.iter().enumerate() {
            if let Some(f) = &o.feature {
                for (dst, &v) in object_features.row_mut(i).iter_mut().zip(f) {
                    *dst = cst(v as f64);
                }
            }
        }
        let pairs: Vec<(usize, usize)> =
            record.relations.iter().map(|r| (r.head, r.tail)).collect();
        let topology = Topology::new(n, pairs)?;
        let mut rel = Vec::with_capacity(4 * record.relations.len());
        for r in &record.relations {
            let t = rel_position_vector(&boxes[r.head], &boxes[r.tail])?;
            rel.extend(t.to_array().iter().map(|&v| cst::<F>(v)));
        }
        let rel_positions = Tensor::new(vec![record.relations.len(), 4], rel)?;
        let object_labels = record
            .objects
            .iter()
            .map(|o| vocab.object_index(&o.label).expect("validated"))
            .collect();
        let predicate_labels = record
            .relations
            .iter()
            .map(|r| vocab.predicate_index(&r.predicate).expect("validated"))
            .collect();
        Ok(Self {
            id: record.id.clone(),
            topology,
            boxes,
            object_features,
            rel_positions,
            object_labels,
            predicate_labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.object_features.cols()
    }
}

/// Several scenes merged into one disjoint graph for a single forward pass.
#[derive(Clone, Debug)]
pub struct SceneBatch<F> {
    pub topology: Topology,
    pub object_features: Tensor<F>,
    pub rel_positions: Tensor<F>,
    pub object_labels: Vec<usize>,
    pub predicate_labels: Vec<usize>,
    /// Scene `s` owns objects `object_offsets[s]..object_offsets[s+1]`.
    pub object_offsets: Vec<usize>,
    pub predicate_offsets: Vec<usize>,
}

impl<F: Real> SceneBatch<F> {
    pub fn collate(scenes: &[&SceneInput<F>]) -> Result<Self> {
        let dim = scenes.first().map_or(0, |s| s.dim());
        if scenes.iter().any(|s| s.dim() != dim) {
            return Err(Error::invalid(
                "scenes in a batch disagree on feature width",
            ));
        }
        let topology =
            Topology::disjoint_union(&scenes.iter().map(|s| &s.topology).collect::<Vec<_>>());
        let mut obj = Vec::new();
        let mut rel = Vec::new();
        let mut object_labels = Vec::new();
        let mut predicate_labels = Vec::new();
        let mut object_offsets = vec![0];
        let mut predicate_offsets = vec![0];
        for s in scenes {
            obj.extend_from_slice(s.object_features.data());
            rel.extend_from_slice(s.rel_positions.data());
            object_labels.extend_from_slice(&s.object_labels);
            predicate_labels.extend_from_slice(&s.predicate_labels);
            object_offsets.push(object_labels.len());
            predicate_offsets.push(predicate_labels.len());
        }
        Ok(Self {
            object_features: Tensor::new(vec![topology.n_objects(), dim], obj)?,
            rel_positions: Tensor::new(vec![topology.n_predicates(), 4], rel)?,
            topology,
            object_labels,
            predicate_labels,
            object_offsets,
            predicate_offsets,
        })
    }

    pub fn n_scenes(&self) -> usize {
        self.object_offsets.len() - 1
    }
}

/// Two affine layers (4 → hidden → d) with leaky-ReLU and dropout between.
#[derive(Clone, Debug)]
pub struct PredicateInitNet {
    pub hidden: Linear,
    pub output: Linear,
    pub dropout: f64,
    pub slope: f64,
}

impl PredicateInitNet {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        hidden: usize,
        dim: usize,
        dropout: f64,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, "predicate_init.0", 4, hidden, rng)?,
            output: Linear::new(store, "predicate_init.1", hidden, dim, rng)?,
            dropout,
            slope,
        })
    }

    /// Maps an `m × 4` block of relational position vectors to `m × d` features.
    pub fn forward<F: Real>(&self, fx: &mut Forward<'_, F>, rel: Var) -> Result<Var> {
        let h = self.hidden.forward(fx, rel)?;
        let h = fx.tape.leaky_relu(h, cst(self.slope))?;
        let h = fx.dropout(h, self.dropout)?;
        self.output.forward(fx, h)
    }
}

/// Predicate feature of a single relational position vector. Dropout is
/// active when `dropout_seed` is given.
pub fn init_predicate_feature<F: Real>(
    t: &RelPositionVector,
    net: &PredicateInitNet,
    params: &ParamStore<F>,
    dropout_seed: Option<u64>,
) -> Result<Vec<F>> {
    let mut fx = match dropout_seed {
        Some(seed) => Forward::train(params, seed),
        None => Forward::eval(params),
    };
    let input = Tensor::new(vec![1, 4], t.to_array().iter().map(|&v| cst(v)).collect())?;
    let x = fx.tape.constant(input);
    let y = net.forward(&mut fx, x)?;
    Ok(fx.tape.value(y).data().to_vec())
}

/// A scene graph with its predicate features materialised.
#[derive(Clone, Debug)]
pub struct SceneRepGraph<F> {
    pub input: SceneInput<F>,
    /// `m × d`
    pub predicate_features: Tensor<F>,
}

impl<F: Real> SceneRepGraph<F> {
    /// `(n + m) × d` node features in node order.
    pub fn node_features(&self) -> Tensor<F> {
        let d = self.input.dim();
        let mut data = self.input.object_features.data().to_vec();
        data.extend_from_slice(self.predicate_features.data());
        Tensor::new(vec![self.input.topology.n_nodes(), d], data).expect("consistent widths")
    }
}

pub fn build_srg<F: Real>(
    record: &SceneRecord,
    net: &PredicateInitNet,
    params: &ParamStore<F>,
    vocab: &Vocabulary,
    dim: usize,
) -> Result<SceneRepGraph<F>> {
    let input = SceneInput::from_record(record, vocab, dim)?;
    let mut fx = Forward::eval(params);
    let rel = fx.tape.constant(input.rel_positions.clone());
    let x = net.forward(&mut fx, rel)?;
    let predicate_features = fx.tape.value(x).clone();
    if predicate_features.cols() != dim {
        return Err(Error::invalid(format!(
            "predicate net emits width {}, model width is {dim}",
            predicate_features.cols()
        )));
    }
    Ok(SceneRepGraph {
        input,
        predicate_features,
    })
}
