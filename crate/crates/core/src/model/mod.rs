//! The composite model: factorized likelihood `log P(B) + log P(A|B)`,
//! encoding, one-pass decoding, temperature sampling, training and
//! checkpoints.

mod checkpoint;
mod train;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, EpochReport, TrainConfig};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::atomflow::{graphnorm, AtomFlow, AtomFlowConfig, BoundGraph};
use crate::bondflow::{crop_bonds, pad_bonds, BondFlow, BondFlowConfig};
use crate::error::{Error, Result};
use crate::layers::{FlowLayer, LogDetRule};
use crate::molgraph::{argmax, dequantize, discretize, encode_onehot, GraphTensorPair, Molecule, VocabularyConfig, BOND_CHANNELS};
use crate::numerics::{Ctx, ParamId, ParamStore, Tensor, Var};
use crate::validity::correct;

/// Default sampling temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.85;

/// Rows decoded per tape; bounds memory on large sample counts.
const DECODE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: VocabularyConfig,
    pub bond: BondFlowConfig,
    pub atom: AtomFlowConfig,
    #[serde(default)]
    pub actnorm_logdet: LogDetRule,
}

impl ModelConfig {
    pub fn qm9() -> Self {
        Self {
            vocab: VocabularyConfig::qm9(),
            bond: BondFlowConfig::qm9(),
            atom: AtomFlowConfig::qm9(),
            actnorm_logdet: LogDetRule::Exact,
        }
    }

    pub fn zinc250k() -> Self {
        Self {
            vocab: VocabularyConfig::zinc250k(),
            bond: BondFlowConfig::zinc250k(),
            atom: AtomFlowConfig::zinc250k(),
            actnorm_logdet: LogDetRule::Exact,
        }
    }

    /// Reduced model with every hidden width set to `width`.
    pub fn small(vocab: VocabularyConfig, bond_layers: usize, atom_layers: usize, width: usize) -> Self {
        Self {
            vocab,
            bond: BondFlowConfig { n_coupling_layers: bond_layers, squeeze_factor: None, conv_hidden_dims: vec![width, width] },
            atom: AtomFlowConfig {
                n_coupling_layers: atom_layers,
                gconv_dim: width,
                mlp_hidden_dims: vec![width, width],
                graphnorm: Default::default(),
            },
            actnorm_logdet: LogDetRule::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        self.bond.validate()?;
        self.atom.validate()
    }
}

/// Flattened latent pair `(Z_{A|B}, Z_B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub atom: Vec<f64>,
    pub bond: Vec<f64>,
}

impl LatentVector {
    pub fn zeros(atom_dim: usize, bond_dim: usize) -> Self {
        Self { atom: vec![0.0; atom_dim], bond: vec![0.0; bond_dim] }
    }

    pub fn len(&self) -> usize {
        self.atom.len() + self.bond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Atom part followed by bond part.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.atom.clone();
        v.extend_from_slice(&self.bond);
        v
    }

    pub fn from_flat(flat: &[f64], atom_dim: usize) -> Self {
        Self { atom: flat[..atom_dim].to_vec(), bond: flat[atom_dim..].to_vec() }
    }

    pub fn all_finite(&self) -> bool {
        self.atom.iter().chain(&self.bond).all(|v| v.is_finite())
    }

    /// `self + Σ cᵢ·dᵢ` over flat directions.
    pub fn offset(&self, terms: &[(f64, &[f64])]) -> Self {
        let mut flat = self.to_flat();
        for (c, d) in terms {
            for (f, x) in flat.iter_mut().zip(d.iter()) {
                *f += c * x;
            }
        }
        Self::from_flat(&flat, self.atom.len())
    }
}

/// Batched unpadded inputs: atoms `[b, n, k]`, bonds `[b, c, n, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub atoms: Tensor,
    pub bonds: Tensor,
}

impl GraphBatch {
    pub fn from_pairs(pairs: &[GraphTensorPair]) -> Result<Self> {
        let atoms: Vec<Tensor> = pairs.iter().map(|p| p.atoms.clone()).collect();
        let bonds: Vec<Tensor> = pairs.iter().map(|p| p.bonds.clone()).collect();
        Ok(Self { atoms: Tensor::stack(&atoms)?, bonds: Tensor::stack(&bonds)? })
    }

    /// One-hot batch, optionally dequantized with fresh noise.
    pub fn from_molecules<R: Rng + ?Sized>(
        mols: &[Molecule],
        vocab: &VocabularyConfig,
        noise: Option<&mut R>,
    ) -> Result<Self> {
        let mut pairs = mols.iter().map(|m| encode_onehot(m, vocab)).collect::<Result<Vec<_>>>()?;
        if let Some(rng) = noise {
            pairs = pairs.iter().map(|p| dequantize(p, rng)).collect();
        }
        Self::from_pairs(&pairs)
    }

    pub fn len(&self) -> usize {
        self.atoms.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-item likelihood terms recorded on a tape.
pub struct Likelihood {
    pub z_atom: Var,
    pub z_bond: Var,
    /// `log P_{A|B}(A|B)`, `[b]`.
    pub atom: Var,
    /// `log P_B(B)`, `[b]`.
    pub bond: Var,
}

/// One encoded molecule.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub z: LatentVector,
    pub log_likelihood: f64,
    pub bond_term: f64,
    pub atom_term: f64,
}

/// Layers and prior parameter handles; parameter values live in a
/// [`ParamStore`].
pub struct Network {
    pub bond: BondFlow,
    pub atom: AtomFlow,
    pub prior_atom: ParamId,
    pub prior_bond: ParamId,
    pub config: ModelConfig,
}

/// Gaussian log-density `Σ[−log σ − ½ log 2π − z²/(2σ²)]` per item of `z: [b, ...]`.
pub fn prior_log_density(ctx: &mut Ctx, z: Var, log_sigma: ParamId) -> Result<Var> {
    let shape = ctx.g.shape(z).to_vec();
    let b = shape[0];
    let d: usize = shape[1..].iter().product();
    let flat = ctx.g.reshape(z, &[b, d])?;
    let ls = ctx.param(log_sigma);
    let neg = ctx.g.scale(ls, -1.0);
    let inv_sigma = ctx.g.exp(neg);
    let u = ctx.g.bcast_mul(flat, inv_sigma, 1)?;
    let sq = ctx.g.mul(u, u)?;
    let quad = ctx.g.sum_per_item(sq);
    let quad = ctx.g.scale(quad, -0.5);
    let norm = ctx.g.sum(ls);
    let norm = ctx.g.add_const(norm, 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln());
    let norm = ctx.g.expand(norm, &[b])?;
    ctx.g.sub(quad, norm)
}

impl Network {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n = config.vocab.n_max;
        let k = config.vocab.num_atom_channels();
        let rule = config.actnorm_logdet;
        let bond = BondFlow::new(store, &config.bond, BOND_CHANNELS, n, rule, rng)?;
        let atom = AtomFlow::new(store, &config.atom, n, k, BOND_CHANNELS, rule, rng);
        let prior_atom = store.param("prior.atom.log_sigma", Tensor::zeros(&[atom.latent_dim()]));
        let prior_bond = store.param("prior.bond.log_sigma", Tensor::zeros(&[bond.latent_dim()]));
        Ok(Self { bond, atom, prior_atom, prior_bond, config: config.clone() })
    }

    pub fn atom_dim(&self) -> usize {
        self.atom.latent_dim()
    }

    pub fn bond_dim(&self) -> usize {
        self.bond.latent_dim()
    }

    fn check_batch(&self, batch: &GraphBatch) -> Result<()> {
        let (n, k) = (self.atom.n, self.atom.k);
        let a = batch.atoms.shape();
        let b = batch.bonds.shape();
        if a.len() != 3 || a[1] != n || a[2] != k || b != [a[0], BOND_CHANNELS, n, n] {
            return Err(Error::shape("model input", format!("atoms {a:?}, bonds {b:?} for n={n}, k={k}")));
        }
        Ok(())
    }

    /// Record both likelihood terms for a batch on `ctx`.
    pub fn log_likelihood(&self, ctx: &mut Ctx, batch: &GraphBatch) -> Result<Likelihood> {
        self.check_batch(batch)?;
        let padded = pad_bonds(&batch.bonds, self.bond.padded);
        let xb = ctx.constant(padded);
        let (z_bond, ld_bond) = self.bond.forward(ctx, xb)?;
        let prior_b = prior_log_density(ctx, z_bond, self.prior_bond)?;
        let bond = ctx.g.add(prior_b, ld_bond)?;

        let normed = graphnorm(&batch.bonds, &self.config.atom.graphnorm)?;
        let graph = BoundGraph::bind(ctx, &normed)?;
        let xa = ctx.constant(batch.atoms.clone());
        let (z_atom, ld_atom) = self.atom.forward(ctx, xa, &graph)?;
        let prior_a = prior_log_density(ctx, z_atom, self.prior_atom)?;
        let atom = ctx.g.add(prior_a, ld_atom)?;
        Ok(Likelihood { z_atom, z_bond, atom, bond })
    }

    /// Mean negative log-likelihood (nats per molecule) as a scalar node.
    pub fn nll(&self, ctx: &mut Ctx, batch: &GraphBatch) -> Result<Var> {
        let ll = self.log_likelihood(ctx, batch)?;
        let total = ctx.g.add(ll.atom, ll.bond)?;
        let mean = ctx.g.mean(total);
        Ok(ctx.g.scale(mean, -1.0))
    }

    pub fn encode(&self, store: &ParamStore, batch: &GraphBatch) -> Result<Vec<Encoded>> {
        let mut ctx = Ctx::frozen(store);
        let ll = self.log_likelihood(&mut ctx, batch)?;
        let (za, zb) = (ctx.g.value(ll.z_atom).data(), ctx.g.value(ll.z_bond).data());
        let (la, lb) = (ctx.g.value(ll.atom).data(), ctx.g.value(ll.bond).data());
        let (da, db) = (self.atom_dim(), self.bond_dim());
        Ok((0..batch.len())
            .map(|i| Encoded {
                z: LatentVector { atom: za[i * da..(i + 1) * da].to_vec(), bond: zb[i * db..(i + 1) * db].to_vec() },
                log_likelihood: la[i] + lb[i],
                bond_term: lb[i],
                atom_term: la[i],
            })
            .collect())
    }

    /// Invert both flows: bonds first, then atoms conditioned on the
    /// recovered bond structure.
    pub fn decode_tensors(&self, store: &ParamStore, zs: &[LatentVector]) -> Result<Vec<GraphTensorPair>> {
        let (n, k, p) = (self.atom.n, self.atom.k, self.bond.padded);
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(DECODE_CHUNK) {
            let b = chunk.len();
            let mut zb = Vec::with_capacity(b * self.bond_dim());
            let mut za = Vec::with_capacity(b * self.atom_dim());
            for z in chunk {
                if z.atom.len() != self.atom_dim() || z.bond.len() != self.bond_dim() {
                    return Err(Error::shape(
                        "decode",
                        format!("latent ({}, {}) vs model ({}, {})", z.atom.len(), z.bond.len(), self.atom_dim(), self.bond_dim()),
                    ));
                }
                zb.extend_from_slice(&z.bond);
                za.extend_from_slice(&z.atom);
            }
            let mut ctx = Ctx::frozen(store);
            let zbv = ctx.constant(Tensor::new(vec![b, BOND_CHANNELS, p, p], zb)?);
            let bonds = self.bond.inverse(&mut ctx, zbv)?;
            let bonds = crop_bonds(ctx.g.value(bonds), n);
            let normed = graphnorm(&bonds, &self.config.atom.graphnorm)?;
            let graph = BoundGraph::bind(&mut ctx, &normed)?;
            let zav = ctx.constant(Tensor::new(vec![b, n, k], za)?);
            let atoms = self.atom.inverse(&mut ctx, zav, &graph)?;
            let atoms = ctx.g.value(atoms);
            for i in 0..b {
                let atoms = atoms.index_first(i);
                let n_actual = atoms.data().chunks(k).filter(|row| argmax(row) != k - 1).count();
                out.push(GraphTensorPair { atoms, bonds: bonds.index_first(i), n_actual });
            }
        }
        Ok(out)
    }
}

/// Trained or freshly initialized model: configuration, layers and values.
pub struct MoFlow {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

/// Uncorrected and corrected decodes of the same latents.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub raw: Vec<Molecule>,
    pub corrected: Vec<Molecule>,
}

impl MoFlow {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, &config, rng)?;
        Ok(Self { config, store, net })
    }

    pub fn vocab(&self) -> &VocabularyConfig {
        &self.config.vocab
    }

    pub fn latent_dims(&self) -> (usize, usize) {
        (self.net.atom_dim(), self.net.bond_dim())
    }

    pub fn encode(&self, batch: &GraphBatch) -> Result<Vec<Encoded>> {
        let mut out = Vec::with_capacity(batch.len());
        for start in (0..batch.len()).step_by(DECODE_CHUNK) {
            let end = (start + DECODE_CHUNK).min(batch.len());
            let sub = GraphBatch {
                atoms: slice_items(&batch.atoms, start, end)?,
                bonds: slice_items(&batch.bonds, start, end)?,
            };
            out.extend(self.net.encode(&self.store, &sub)?);
        }
        Ok(out)
    }

    /// Encode molecules from their exact one-hot tensors.
    pub fn encode_molecules(&self, mols: &[Molecule]) -> Result<Vec<Encoded>> {
        let batch = GraphBatch::from_molecules::<rand_chacha::ChaCha8Rng>(mols, self.vocab(), None)?;
        self.encode(&batch)
    }

    pub fn decode_tensors(&self, zs: &[LatentVector]) -> Result<Vec<GraphTensorPair>> {
        self.net.decode_tensors(&self.store, zs)
    }

    pub fn decode_both(&self, zs: &[LatentVector]) -> Result<Decoded> {
        let raw: Vec<Molecule> = self.decode_tensors(zs)?.iter().map(|t| discretize(t, self.vocab())).collect();
        let corrected = raw.iter().map(|m| correct(m, self.vocab())).collect();
        Ok(Decoded { raw, corrected })
    }

    /// Decode latents to molecules, applying validity correction when asked.
    pub fn decode(&self, zs: &[LatentVector], apply_correction: bool) -> Result<Vec<Molecule>> {
        let d = self.decode_both(zs)?;
        Ok(if apply_correction { d.corrected } else { d.raw })
    }

    /// Draw latents from `N(0, (t·σ)²)` per coordinate.
    pub fn sample_prior<R: Rng + ?Sized>(&self, count: usize, temperature: f64, rng: &mut R) -> Vec<LatentVector> {
        let sa = self.store.get(self.net.prior_atom).map(f64::exp);
        let sb = self.store.get(self.net.prior_bond).map(f64::exp);
        (0..count)
            .map(|_| {
                let mut draw = |sig: &Tensor| -> Vec<f64> {
                    sig.data()
                        .iter()
                        .map(|s| {
                            let e: f64 = rng.sample(StandardNormal);
                            temperature * s * e
                        })
                        .collect()
                };
                let atom = draw(&sa);
                let bond = draw(&sb);
                LatentVector { atom, bond }
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_size()
    }
}

fn slice_items(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let items: Vec<Tensor> = (start..end).map(|i| t.index_first(i)).collect();
    Tensor::stack(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemio::parse_smiles;
    use crate::layers::randomize_parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> MoFlow {
        let cfg = ModelConfig::small(VocabularyConfig::qm9(), 2, 2, 8);
        MoFlow::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn identity_flows_give_gaussian_mode_density() {
        let mut store = ParamStore::new();
        let p = store.param("p", Tensor::zeros(&[6]));
        let mut ctx = Ctx::frozen(&store);
        let z = ctx.constant(Tensor::zeros(&[1, 2, 3]));
        let lp = prior_log_density(&mut ctx, z, p).unwrap();
        let expect = -3.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((ctx.g.value(lp).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn likelihood_decomposes_and_dimensions_match() {
        let model = tiny();
        let mols: Vec<Molecule> = ["CCO", "C=O", "N#CC"].iter().map(|s| parse_smiles(s).unwrap()).collect();
        let enc = model.encode_molecules(&mols).unwrap();
        let (da, db) = model.latent_dims();
        assert_eq!(da + db, 9 * 5 + 4 * 9 * 9);
        for e in &enc {
            assert_eq!(e.log_likelihood, e.atom_term + e.bond_term);
            assert_eq!(e.z.len(), da + db);
        }
    }

    #[test]
    fn decode_inverts_encode() {
        let mut model = tiny();
        randomize_parameters(&mut model.store, &mut ChaCha8Rng::seed_from_u64(1), 0.2);
        let mols: Vec<Molecule> = ["CCO", "C1CC1", "OC(F)C#N"].iter().map(|s| parse_smiles(s).unwrap()).collect();
        let enc = model.encode_molecules(&mols).unwrap();
        let zs: Vec<LatentVector> = enc.into_iter().map(|e| e.z).collect();
        let back = model.decode(&zs, false).unwrap();
        assert_eq!(back, mols);
    }

    #[test]
    fn zero_temperature_samples_are_zero() {
        let model = tiny();
        let zs = model.sample_prior(3, 0.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(zs.iter().all(|z| z.to_flat().iter().all(|&v| v == 0.0)));
        let a = model.decode(&zs[..1], true).unwrap();
        let b = model.decode(&zs[1..2], true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_spread_matches_temperature() {
        let mut model = tiny();
        let sigma = model.store.get(model.net.prior_atom).map(|_| 0.4f64.ln());
        model.store.set(model.net.prior_atom, sigma);
        let zs = model.sample_prior(20_000, 0.85, &mut ChaCha8Rng::seed_from_u64(3));
        for d in [0, 7] {
            let var = zs.iter().map(|z| z.atom[d].powi(2)).sum::<f64>() / zs.len() as f64;
            assert!((var.sqrt() / (0.85 * 0.4) - 1.0).abs() < 0.02);
            let var = zs.iter().map(|z| z.bond[d].powi(2)).sum::<f64>() / zs.len() as f64;
            assert!((var.sqrt() / 0.85 - 1.0).abs() < 0.02);
        }
    }
}
