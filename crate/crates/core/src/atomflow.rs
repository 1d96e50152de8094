//! Graph conditional flow over atom matrices given a fixed bond tensor:
//! graphnorm once, then `L` steps of row actnorm → graph coupling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::nn::{gaussian, BatchNorm, Mlp};
use crate::layers::{affine_coupling_inverse, ActNorm, FlowLayer, LogDetRule};
use crate::molgraph::{resolve_bond_channels, VIRTUAL_BOND};
use crate::numerics::{Ctx, ParamId, ParamStore, Tensor, Var};

/// Which bond tensor feeds graphnorm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphNormSource {
    /// Argmax-resolved one-hot structure.
    #[default]
    Discrete,
    /// The continuous (dequantized) tensor as given.
    Dequantized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphNormConfig {
    #[serde(default)]
    pub source: GraphNormSource,
    /// Let the virtual channel take part in messages and degrees.
    #[serde(default)]
    pub include_virtual: bool,
}

impl GraphNormConfig {
    pub fn relation_channels(&self, c: usize) -> usize {
        if self.include_virtual {
            c
        } else {
            c - 1
        }
    }
}

/// Row-normalized adjacency `B̂_l = D⁻¹ B_l` with `D_i = Σ_{l,j} B(l,i,j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphNormed {
    /// `[b, r, n, n]` over the relation channels in use.
    pub b_hat: Tensor,
    /// `[b, n]`.
    pub degree: Tensor,
}

/// Compute graphnorm for a batch `[b, c, n, n]`. Isolated nodes keep zero rows.
pub fn graphnorm(bonds: &Tensor, cfg: &GraphNormConfig) -> Result<GraphNormed> {
    let s = bonds.shape();
    if s.len() != 4 || s[2] != s[3] || s[1] <= VIRTUAL_BOND {
        return Err(Error::shape("graphnorm", format!("expected [b, c, n, n], got {s:?}")));
    }
    let (batch, c, n) = (s[0], s[1], s[2]);
    let r = cfg.relation_channels(c);
    let mut adj = vec![0.0; batch * r * n * n];
    for bi in 0..batch {
        let item = &bonds.data()[bi * c * n * n..(bi + 1) * c * n * n];
        match cfg.source {
            GraphNormSource::Discrete => {
                let resolved = resolve_bond_channels(item, c, n);
                for i in 0..n {
                    for j in 0..n {
                        let ch = resolved[i * n + j];
                        if ch < r && (i != j || cfg.include_virtual) {
                            adj[((bi * r + ch) * n + i) * n + j] = 1.0;
                        }
                    }
                }
            }
            GraphNormSource::Dequantized => {
                adj[bi * r * n * n..(bi + 1) * r * n * n].copy_from_slice(&item[..r * n * n]);
            }
        }
    }
    let mut degree = vec![0.0; batch * n];
    for bi in 0..batch {
        for l in 0..r {
            for i in 0..n {
                let row = &adj[((bi * r + l) * n + i) * n..((bi * r + l) * n + i + 1) * n];
                degree[bi * n + i] += row.iter().sum::<f64>();
            }
        }
    }
    for bi in 0..batch {
        for l in 0..r {
            for i in 0..n {
                let d = degree[bi * n + i];
                let row = &mut adj[((bi * r + l) * n + i) * n..((bi * r + l) * n + i + 1) * n];
                if d > 0.0 {
                    row.iter_mut().for_each(|v| *v /= d);
                } else {
                    row.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    Ok(GraphNormed { b_hat: Tensor::new(vec![batch, r, n, n], adj)?, degree: Tensor::new(vec![batch, n], degree)? })
}

/// Per-relation `[b, n, n]` constants bound into the tape.
pub struct BoundGraph {
    pub relations: Vec<Var>,
}

impl BoundGraph {
    pub fn bind(ctx: &mut Ctx, g: &GraphNormed) -> Result<Self> {
        let s = g.b_hat.shape();
        let (batch, r, n) = (s[0], s[1], s[2]);
        let relations = (0..r)
            .map(|l| {
                let mut t = Vec::with_capacity(batch * n * n);
                for bi in 0..batch {
                    let base = (bi * r + l) * n * n;
                    t.extend_from_slice(&g.b_hat.data()[base..base + n * n]);
                }
                Tensor::new(vec![batch, n, n], t).map(|t| ctx.constant(t))
            })
            .collect::<Result<_>>()?;
        Ok(Self { relations })
    }
}

/// Relational graph convolution `Σ_l B̂_l X W_l + X W_0` with the weights
/// stacked as one `[(r + 1)·k, d]` matrix (`W_0` first).
#[derive(Clone, Debug)]
pub struct GraphConv {
    pub weight: ParamId,
    pub relations: usize,
}

impl GraphConv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, relations: usize, k: usize, d: usize, rng: &mut R) -> Self {
        let fan_in = (relations + 1) * k;
        let w = gaussian(rng, &[fan_in, d], (2.0 / fan_in as f64).sqrt());
        Self { weight: store.param(format!("{name}.weight"), w), relations }
    }

    /// `x: [b, n, k]` (already masked) → `[b, n, d]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, graph: &BoundGraph) -> Result<Var> {
        if graph.relations.len() != self.relations {
            return Err(Error::shape(
                "graphconv",
                format!("{} relations bound, layer expects {}", graph.relations.len(), self.relations),
            ));
        }
        let mut features = x;
        for &rel in &graph.relations {
            let msg = ctx.g.bmm(rel, x)?;
            features = ctx.g.concat(features, msg, 2)?;
        }
        let w = ctx.param(self.weight);
        ctx.g.matmul(features, w)
    }
}

/// Binary row partition of an `n × k` atom matrix. Rows with mask 1 form the
/// conditioning part `A₁`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowMask {
    pub n: usize,
    pub k: usize,
    /// `true`: `A₁` = rows `0..⌈n/2⌉`; `false`: the complement.
    pub leading: bool,
}

impl RowMask {
    pub fn for_layer(n: usize, k: usize, layer: usize) -> Self {
        Self { n, k, leading: layer % 2 == 0 }
    }

    pub fn is_conditioning(&self, row: usize) -> bool {
        (row < self.n.div_ceil(2)) == self.leading
    }

    /// `[b, n, k]` mask tensor.
    pub fn tensor(&self, batch: usize) -> Tensor {
        let mut t = Tensor::zeros(&[batch, self.n, self.k]);
        let d = t.data_mut();
        for bi in 0..batch {
            for row in (0..self.n).filter(|&r| self.is_conditioning(r)) {
                d[(bi * self.n + row) * self.k..(bi * self.n + row + 1) * self.k].fill(1.0);
            }
        }
        t
    }
}

/// Graph coupling: `Z = M⊙A + (1−M)⊙(A⊙σ(S) + T)` with `S, T` computed from
/// `M⊙A` by graphconv → batch-norm → ReLU → perceptron.
#[derive(Clone, Debug)]
pub struct GraphCoupling {
    pub mask: RowMask,
    pub conv: GraphConv,
    pub norm: BatchNorm,
    pub mlp: Mlp,
}

impl GraphCoupling {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        mask: RowMask,
        relations: usize,
        gconv_dim: usize,
        mlp_hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let conv = GraphConv::new(store, &format!("{name}.graphconv"), relations, mask.k, gconv_dim, rng);
        let norm = BatchNorm::new(store, &format!("{name}.bn"), gconv_dim, 2);
        let mut dims = vec![gconv_dim];
        dims.extend_from_slice(mlp_hidden);
        dims.push(2 * mask.k);
        let mlp = Mlp::new(store, &format!("{name}.mlp"), &dims, true, rng);
        Self { mask, conv, norm, mlp }
    }

    fn masks(&self, ctx: &mut Ctx, batch: usize) -> (Var, Var) {
        let m = self.mask.tensor(batch);
        let inv = m.map(|v| 1.0 - v);
        (ctx.constant(m), ctx.constant(inv))
    }

    fn scale_shift(&self, ctx: &mut Ctx, masked: Var, graph: &BoundGraph) -> Result<(Var, Var)> {
        let h = self.conv.forward(ctx, masked, graph)?;
        let h = self.norm.forward(ctx, h)?;
        let h = ctx.g.relu(h);
        let out = self.mlp.forward(ctx, h)?;
        let k = self.mask.k;
        Ok((ctx.g.slice(out, 2, 0, k)?, ctx.g.slice(out, 2, k, k)?))
    }

    fn check(&self, ctx: &Ctx, x: Var) -> Result<usize> {
        let s = ctx.g.shape(x);
        if s.len() != 3 || s[1] != self.mask.n || s[2] != self.mask.k {
            return Err(Error::shape("graph coupling", format!("expected [b, {}, {}], got {s:?}", self.mask.n, self.mask.k)));
        }
        Ok(s[0])
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, graph: &BoundGraph) -> Result<(Var, Var)> {
        let batch = self.check(ctx, x)?;
        let (m, inv) = self.masks(ctx, batch);
        let masked = ctx.g.mul(x, m)?;
        let (s, t) = self.scale_shift(ctx, masked, graph)?;
        let sig = ctx.g.sigmoid(s);
        let scaled = ctx.g.mul(x, sig)?;
        let moved = ctx.g.add(scaled, t)?;
        let moved = ctx.g.mul(moved, inv)?;
        let z = ctx.g.add(masked, moved)?;
        let log_sig = ctx.g.log_sigmoid(s);
        let log_sig = ctx.g.mul(log_sig, inv)?;
        Ok((z, ctx.g.sum_per_item(log_sig)))
    }

    pub fn inverse(&self, ctx: &mut Ctx, z: Var, graph: &BoundGraph) -> Result<Var> {
        let batch = self.check(ctx, z)?;
        let (m, inv) = self.masks(ctx, batch);
        let masked = ctx.g.mul(z, m)?;
        let (s, t) = self.scale_shift(ctx, masked, graph)?;
        let x = affine_coupling_inverse(&mut ctx.g, z, s, t)?;
        let x = ctx.g.mul(x, inv)?;
        ctx.g.add(masked, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomFlowConfig {
    pub n_coupling_layers: usize,
    pub gconv_dim: usize,
    pub mlp_hidden_dims: Vec<usize>,
    #[serde(default)]
    pub graphnorm: GraphNormConfig,
}

impl AtomFlowConfig {
    pub fn qm9() -> Self {
        Self { n_coupling_layers: 27, gconv_dim: 64, mlp_hidden_dims: vec![128, 64], graphnorm: GraphNormConfig::default() }
    }

    pub fn zinc250k() -> Self {
        Self { n_coupling_layers: 38, gconv_dim: 256, mlp_hidden_dims: vec![512, 64], graphnorm: GraphNormConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coupling_layers == 0 {
            return Err(Error::Config("atom.n_coupling_layers must be at least 1".into()));
        }
        if self.gconv_dim == 0 {
            return Err(Error::Config("atom.gconv_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// The conditional atom flow `f_{A|B}` over `[b, n, k]`.
pub struct AtomFlow {
    pub config: AtomFlowConfig,
    pub n: usize,
    pub k: usize,
    pub steps: Vec<(ActNorm, GraphCoupling)>,
}

impl AtomFlow {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &AtomFlowConfig,
        n: usize,
        k: usize,
        bond_channels: usize,
        rule: LogDetRule,
        rng: &mut R,
    ) -> Self {
        let relations = config.graphnorm.relation_channels(bond_channels);
        let steps = (0..config.n_coupling_layers)
            .map(|l| {
                let name = format!("atom.{l}");
                let an = ActNorm::new(store, &format!("{name}.actnorm"), n, rule);
                let gc = GraphCoupling::new(
                    store,
                    &format!("{name}.coupling"),
                    RowMask::for_layer(n, k, l),
                    relations,
                    config.gconv_dim,
                    &config.mlp_hidden_dims,
                    rng,
                );
                (an, gc)
            })
            .collect();
        Self { config: config.clone(), n, k, steps }
    }

    pub fn latent_dim(&self) -> usize {
        self.n * self.k
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: Var, graph: &BoundGraph) -> Result<(Var, Var)> {
        let batch = ctx.g.shape(x)[0];
        let mut total = ctx.constant(Tensor::zeros(&[batch]));
        for (l, (an, gc)) in self.steps.iter().enumerate() {
            let (y, ld) = an.forward(ctx, x)?;
            ctx.trace(format!("atom layer {l} actnorm"), y);
            total = ctx.g.add(total, ld)?;
            let (y, ld) = gc.forward(ctx, y, graph)?;
            ctx.trace(format!("atom layer {l} coupling"), y);
            total = ctx.g.add(total, ld)?;
            x = y;
        }
        Ok((x, total))
    }

    pub fn inverse(&self, ctx: &mut Ctx, mut z: Var, graph: &BoundGraph) -> Result<Var> {
        for (an, gc) in self.steps.iter().rev() {
            z = gc.inverse(ctx, z, graph)?;
            z = an.inverse(ctx, z)?;
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::randomize_parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `[1, 4, n, n]` one-hot bond tensor with the given single bonds.
    fn bonds(n: usize, edges: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(&[1, 4, n, n]);
        for i in 0..n {
            for j in 0..n {
                t.set(&[0, 3, i, j], 1.0);
            }
        }
        for &(i, j) in edges {
            for (a, b) in [(i, j), (j, i)] {
                t.set(&[0, 3, a, b], 0.0);
                t.set(&[0, 0, a, b], 1.0);
            }
        }
        t
    }

    #[test]
    fn graphnorm_single_bond() {
        let g = graphnorm(&bonds(2, &[(0, 1)]), &GraphNormConfig::default()).unwrap();
        assert_eq!(g.degree.data(), &[1.0, 1.0]);
        assert_eq!(g.b_hat.shape(), &[1, 3, 2, 2]);
        assert_eq!(g.b_hat.get(&[0, 0, 0, 1]), 1.0);
        assert_eq!(g.b_hat.get(&[0, 0, 1, 0]), 1.0);
        assert_eq!(g.b_hat.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn graphnorm_isolated_and_triangle() {
        let g = graphnorm(&bonds(3, &[(0, 1)]), &GraphNormConfig::default()).unwrap();
        assert_eq!(g.degree.data(), &[1.0, 1.0, 0.0]);
        for l in 0..3 {
            for j in 0..3 {
                assert_eq!(g.b_hat.get(&[0, l, 2, j]), 0.0);
            }
        }
        let g = graphnorm(&bonds(3, &[(0, 1), (1, 2), (0, 2)]), &GraphNormConfig::default()).unwrap();
        assert_eq!(g.degree.data(), &[2.0, 2.0, 2.0]);
        assert!(g.b_hat.data().iter().all(|&v| v == 0.0 || v == 0.5));
    }

    #[test]
    fn graphconv_without_edges_is_self_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let conv = GraphConv::new(&mut store, "gc", 3, 2, 2, &mut rng);
        // W_0 = I, W_l = 0
        let mut w = Tensor::zeros(&[8, 2]);
        w.set(&[0, 0], 1.0);
        w.set(&[1, 1], 1.0);
        store.set(conv.weight, w);
        let x = Tensor::new(vec![1, 2, 2], vec![0.3, -0.4, 1.5, 2.0]).unwrap();
        for edges in [&[][..], &[(0, 1)][..]] {
            let g = graphnorm(&bonds(2, edges), &GraphNormConfig::default()).unwrap();
            let mut ctx = Ctx::frozen(&store);
            let bound = BoundGraph::bind(&mut ctx, &g).unwrap();
            let xv = ctx.g.input(x.clone());
            let y = conv.forward(&mut ctx, xv, &bound).unwrap();
            assert_eq!(ctx.g.value(y), &x);
        }
    }

    #[test]
    fn graphconv_two_node_hand_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let conv = GraphConv::new(&mut store, "gc", 3, 1, 1, &mut rng);
        // W_0 = 0.1, W_single = 0.2, others 0
        store.set(conv.weight, Tensor::new(vec![4, 1], vec![0.1, 0.2, 0.0, 0.0]).unwrap());
        let g = graphnorm(&bonds(2, &[(0, 1)]), &GraphNormConfig::default()).unwrap();
        let mut ctx = Ctx::frozen(&store);
        let bound = BoundGraph::bind(&mut ctx, &g).unwrap();
        let xv = ctx.g.input(Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap());
        let y = conv.forward(&mut ctx, xv, &bound).unwrap();
        // node 0: 0.1·1 + 0.2·3; node 1: 0.1·3 + 0.2·1
        let v = ctx.g.value(y).data();
        assert!((v[0] - 0.7).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn masks_alternate_and_cover() {
        let a = RowMask::for_layer(5, 2, 0);
        let b = RowMask::for_layer(5, 2, 1);
        for r in 0..5 {
            assert_ne!(a.is_conditioning(r), b.is_conditioning(r));
        }
        assert!((0..3).all(|r| a.is_conditioning(r)));
    }

    #[test]
    fn zero_init_coupling_halves_moved_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let gc = GraphCoupling::new(&mut store, "gc", RowMask::for_layer(4, 3, 0), 3, 8, &[8], &mut rng);
        let x = gaussian(&mut rng, &[1, 4, 3], 1.0);
        let g = graphnorm(&bonds(4, &[(0, 1), (2, 3)]), &GraphNormConfig::default()).unwrap();
        let mut ctx = Ctx::frozen(&store);
        let bound = BoundGraph::bind(&mut ctx, &g).unwrap();
        let xv = ctx.g.input(x.clone());
        let (z, ld) = gc.forward(&mut ctx, xv, &bound).unwrap();
        let zv = ctx.g.value(z);
        for i in 0..12 {
            let expect = if i < 6 { x.data()[i] } else { 0.5 * x.data()[i] };
            assert!((zv.data()[i] - expect).abs() < 1e-12);
        }
        assert!((ctx.g.value(ld).data()[0] - 6.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn conditional_round_trip_at_depth_27() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let cfg = AtomFlowConfig { n_coupling_layers: 27, gconv_dim: 16, mlp_hidden_dims: vec![16, 8], graphnorm: GraphNormConfig::default() };
        let flow = AtomFlow::new(&mut store, &cfg, 9, 5, 4, LogDetRule::Exact, &mut rng);
        randomize_parameters(&mut store, &mut rng, 0.2);
        let x = gaussian(&mut rng, &[2, 9, 5], 1.0);
        let b = Tensor::stack(&[bonds(9, &[(0, 1), (1, 2), (4, 7)]).index_first(0), bonds(9, &[(3, 8)]).index_first(0)]).unwrap();
        let g = graphnorm(&b, &GraphNormConfig::default()).unwrap();
        let mut ctx = Ctx::frozen(&store);
        let bound = BoundGraph::bind(&mut ctx, &g).unwrap();
        let xv = ctx.g.input(x.clone());
        let (z, _) = flow.forward(&mut ctx, xv, &bound).unwrap();
        let back = flow.inverse(&mut ctx, z, &bound).unwrap();
        assert!(ctx.g.value(back).max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn bonds_condition_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let cfg = AtomFlowConfig { n_coupling_layers: 2, gconv_dim: 8, mlp_hidden_dims: vec![8], graphnorm: GraphNormConfig::default() };
        let flow = AtomFlow::new(&mut store, &cfg, 4, 3, 4, LogDetRule::Exact, &mut rng);
        randomize_parameters(&mut store, &mut rng, 0.2);
        let x = gaussian(&mut rng, &[1, 4, 3], 1.0);
        let mut outs = Vec::new();
        for edges in [[(0, 2)], [(1, 3)]] {
            let g = graphnorm(&bonds(4, &edges), &GraphNormConfig::default()).unwrap();
            let mut ctx = Ctx::frozen(&store);
            let bound = BoundGraph::bind(&mut ctx, &g).unwrap();
            let xv = ctx.g.input(x.clone());
            let (z, _) = flow.forward(&mut ctx, xv, &bound).unwrap();
            outs.push(ctx.g.value(z).clone());
        }
        assert!(outs[0].max_abs_diff(&outs[1]) > 1e-6);
    }
}
