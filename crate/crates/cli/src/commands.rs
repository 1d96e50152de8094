//! Command implementations. Each returns the files it wrote so the caller can
//! record them in the manifest.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use moflow_core::chemio::synth::synthesize_for;
use moflow_core::chemio::{canonical_key, parse_smiles, read_smiles_lines, write_smiles, CanonicalKey};
use moflow_core::eval::{
    constrained_optimize, generate_to_dir, grid_neighborhood, grid_steps, heatmap_csv, interpolate, metrics,
    optimize_property, reconstruct_count, similarity_to, smiles_line, Fraction, GenerateOptions, Property,
    PropertyRegressor, REGRESSOR_HIDDEN,
};
use moflow_core::model::{train, MoFlow, TrainConfig};
use moflow_core::molgraph::{encode_onehot, Molecule};
use moflow_core::selfcheck;
use moflow_core::validity::is_valid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::Flags;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub struct Context {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub flags: Flags,
}

impl Context {
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }

    fn correction(&self) -> bool {
        self.cfg.generate.correction && !self.flags.no_correction
    }

    fn model(&self) -> CliResult<MoFlow> {
        match &self.cfg.checkpoint {
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::Data(format!("checkpoint {} does not exist", p.display())));
                }
                Ok(MoFlow::load(p)?)
            }
            None => Ok(MoFlow::new(self.cfg.model.clone(), &mut self.rng(0))?),
        }
    }

    fn dataset_path(&self) -> CliResult<&Path> {
        self.cfg.dataset.as_deref().ok_or_else(|| CliError::Usage("this command needs --dataset".into()))
    }

    fn dataset(&self) -> CliResult<Vec<Molecule>> {
        let path = self.dataset_path()?;
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read dataset {}: {e}", path.display())))?;
        let mols = read_smiles_lines(&text)
            .into_iter()
            .map(|(no, s)| {
                parse_smiles(s).map_err(|e| CliError::Data(format!("{}:{no}: {e}", path.display())))
            })
            .collect::<CliResult<Vec<_>>>()?;
        if mols.is_empty() {
            return Err(CliError::Data(format!("dataset {} has no molecules", path.display())));
        }
        Ok(mols)
    }

    fn optional_dataset(&self) -> CliResult<Vec<Molecule>> {
        if self.cfg.dataset.is_some() {
            self.dataset()
        } else {
            Ok(Vec::new())
        }
    }

    /// Molecules from `--smiles`, or else the first `want` dataset entries.
    fn seeds(&self, want: usize) -> CliResult<Vec<Molecule>> {
        if !self.flags.smiles.is_empty() {
            return self
                .flags
                .smiles
                .iter()
                .map(|s| parse_smiles(s).map_err(|e| CliError::Data(format!("--smiles {s}: {e}"))))
                .collect();
        }
        let mut d = self.dataset()?;
        d.truncate(want);
        Ok(d)
    }

    fn property(&self) -> CliResult<Property> {
        match &self.flags.property {
            Some(p) => p.parse().map_err(|e| CliError::Usage(format!("--property: {e}"))),
            None => Ok(self.cfg.optimize.property),
        }
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.out.join(name);
        fs::write(&p, contents)?;
        Ok(p)
    }
}

pub fn preprocess(ctx: &Context, synthesize: Option<usize>) -> CliResult<Vec<PathBuf>> {
    let vocab = &ctx.cfg.model.vocab;
    let (candidates, source) = match synthesize {
        Some(n) => (synthesize_for(&mut ctx.rng(1), n, vocab)?, "synthetic".to_string()),
        None => (ctx.dataset()?, ctx.dataset_path()?.display().to_string()),
    };
    let mut kept = String::new();
    let (mut n_kept, mut invalid, mut unencodable) = (0usize, 0usize, 0usize);
    for m in &candidates {
        if encode_onehot(m, vocab).is_err() {
            unencodable += 1;
        } else if !is_valid(m, vocab) {
            invalid += 1;
        } else {
            kept.push_str(&write_smiles(m)?);
            kept.push('\n');
            n_kept += 1;
        }
    }
    let summary = format!(
        "source={source}\ntotal={}\nkept={n_kept}\ninvalid={invalid}\noutside_vocabulary={unencodable}\n",
        candidates.len()
    );
    print!("{summary}");
    Ok(vec![ctx.write("dataset.smi", kept)?, ctx.write("preprocess.txt", summary)?])
}

pub fn train_cmd(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let data = ctx.dataset()?;
    let mut model = ctx.model()?;
    let mut rng = ctx.rng(2);
    let one = TrainConfig { epochs: 1, ..ctx.cfg.train.clone() };
    let ckpt = ctx.out.join("model.ckpt");
    let mut log = String::from("epoch\tmean_nll\tbatches\n");
    for epoch in 0..ctx.cfg.train.epochs {
        let report = train(&mut model, &data, &one, &mut rng, |_| {})?.remove(0);
        writeln!(log, "{}\t{:.6}\t{}", epoch + 1, report.mean_nll, report.batches).unwrap();
        println!("epoch {} mean_nll {:.6}", epoch + 1, report.mean_nll);
        model.save(&ckpt)?;
    }
    if ctx.cfg.train.epochs == 0 {
        model.save(&ckpt)?;
    }
    Ok(vec![ckpt, ctx.write("train_log.tsv", log)?])
}

pub fn generate(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let model = ctx.model()?;
    let train = ctx.optional_dataset()?;
    let opts = GenerateOptions {
        count: ctx.cfg.generate.count,
        temperature: ctx.cfg.generate.temperature,
        seed: ctx.seed,
        apply_correction: ctx.correction(),
    };
    let report = generate_to_dir(&model, &opts, &train, &ctx.out)?;
    print!("{}", report.to_key_value());
    Ok(["generated.smi", "metrics.txt", "metrics.json"].iter().map(|n| ctx.out.join(n)).collect())
}

pub fn reconstruct(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let model = ctx.model()?;
    let data = ctx.dataset()?;
    let ok = reconstruct_count(&model, &data)?;
    let f = Fraction::new(ok, data.len());
    let text = format!("reconstruction={:.6}\nreconstruction_count={f}\n", f.value());
    print!("{text}");
    Ok(vec![ctx.write("reconstruct.txt", text)?])
}

pub fn encode(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let model = ctx.model()?;
    let mols = ctx.seeds(usize::MAX)?;
    let mut out = String::new();
    for (m, e) in mols.iter().zip(model.encode_molecules(&mols)?) {
        let line = serde_json::json!({
            "smiles": smiles_line(m),
            "log_likelihood": e.log_likelihood,
            "bond_term": e.bond_term,
            "atom_term": e.atom_term,
            "z_atom": e.z.atom,
            "z_bond": e.z.bond,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    println!("encoded {} molecules", mols.len());
    Ok(vec![ctx.write("encoded.jsonl", out)?])
}

pub fn interpolate_cmd(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let model = ctx.model()?;
    let ends = ctx.seeds(2)?;
    if ends.len() != 2 {
        return Err(CliError::Usage(format!("interpolation needs exactly two molecules, got {}", ends.len())));
    }
    let zs = model.encode_molecules(&ends)?;
    let mols = interpolate(&model, &zs[0].z, &zs[1].z, ctx.cfg.explore.interpolation_count, ctx.correction())?;
    let sims = similarity_to(&ends[0], &mols);
    Ok(vec![
        ctx.write("interpolation.smi", smiles_block(&mols))?,
        ctx.write("interpolation_similarity.csv", heatmap_csv(&sims, sims.len()))?,
    ])
}

pub fn grid(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let model = ctx.model()?;
    let seed = ctx.seeds(1)?.into_iter().next().ok_or_else(|| CliError::Usage("grid needs a seed molecule".into()))?;
    let z = model.encode_molecules(std::slice::from_ref(&seed))?.remove(0).z;
    let per_side = ctx.cfg.explore.grid_per_side;
    let steps = grid_steps(ctx.cfg.explore.grid_extent, per_side);
    let mols = grid_neighborhood(&model, &z, &steps, &mut ctx.rng(3), ctx.correction())?;
    let sims = similarity_to(&seed, &mols);
    Ok(vec![
        ctx.write("grid.smi", smiles_block(&mols))?,
        ctx.write("grid_similarity.csv", heatmap_csv(&sims, per_side))?,
    ])
}

/// Regressor from dataset latents to `property`.
fn fit_regressor(ctx: &Context, model: &MoFlow, property: Property) -> CliResult<PropertyRegressor> {
    let data = ctx.dataset()?;
    let xs: Vec<Vec<f64>> = model.encode_molecules(&data)?.into_iter().map(|e| e.z.to_flat()).collect();
    let ys: Vec<f64> = data.iter().map(|m| property.evaluate(m)).collect();
    let mut rng = ctx.rng(4);
    let mut reg = PropertyRegressor::new(xs[0].len(), REGRESSOR_HIDDEN, &mut rng);
    let losses = reg.fit(&xs, &ys, &ctx.cfg.optimize.regressor, &mut rng)?;
    if let Some(l) = losses.last() {
        println!("regressor final mse {l:.6}");
    }
    Ok(reg)
}

pub fn optimize(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let model = ctx.model()?;
    let property = ctx.property()?;
    let reg = fit_regressor(ctx, &model, property)?;
    let seed = ctx.seeds(1)?.into_iter().next().ok_or_else(|| CliError::Usage("optimize needs a seed molecule".into()))?;
    let z = model.encode_molecules(std::slice::from_ref(&seed))?.remove(0).z;
    let lambda = ctx.flags.lambda.unwrap_or(ctx.cfg.optimize.lambda);
    let steps = ctx.flags.steps.unwrap_or(ctx.cfg.optimize.steps);
    let traj = optimize_property(&model, &z, &reg, lambda, steps, ctx.correction())?;
    let mut out = format!("step\tstep_size\tpredicted\t{}\tsmiles\n", property.name());
    for (i, p) in traj.iter().enumerate() {
        writeln!(
            out,
            "{i}\t{}\t{:.6}\t{}\t{}",
            p.step.step_size,
            p.step.score,
            property.evaluate(&p.molecule),
            smiles_line(&p.molecule)
        )
        .unwrap();
    }
    Ok(vec![ctx.write("trajectory.tsv", out)?])
}

pub fn constrained(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let model = ctx.model()?;
    let property = ctx.property()?;
    let reg = fit_regressor(ctx, &model, property)?;
    let seeds = ctx.seeds(ctx.cfg.optimize.seeds)?;
    let deltas = if ctx.flags.delta.is_empty() { ctx.cfg.optimize.deltas.clone() } else { ctx.flags.delta.clone() };
    let lambda = ctx.flags.lambda.unwrap_or(ctx.cfg.optimize.lambda);
    let steps = ctx.flags.steps.unwrap_or(ctx.cfg.optimize.steps);
    let mut table = String::from("seed\tdelta\tseed_value\tsuccess\tstep\timprovement\tsimilarity\tsmiles\n");
    let mut summary = String::from("delta\tsuccess\tmean_improvement\tmean_similarity\n");
    for &delta in &deltas {
        let (mut wins, mut imp, mut sim) = (0usize, 0.0, 0.0);
        for s in &seeds {
            let r = constrained_optimize(&model, s, property, &reg, delta, lambda, steps)?;
            match &r.best {
                Some(b) => {
                    wins += 1;
                    imp += b.improvement;
                    sim += b.similarity;
                    writeln!(
                        table,
                        "{}\t{delta}\t{}\ttrue\t{}\t{}\t{:.4}\t{}",
                        smiles_line(s),
                        r.seed_property,
                        b.step,
                        b.improvement,
                        b.similarity,
                        smiles_line(&b.molecule)
                    )
                    .unwrap();
                }
                None => writeln!(table, "{}\t{delta}\t{}\tfalse\t\t\t\t", smiles_line(s), r.seed_property).unwrap(),
            }
        }
        let mean = |x: f64| if wins == 0 { 0.0 } else { x / wins as f64 };
        writeln!(summary, "{delta}\t{}\t{:.4}\t{:.4}", Fraction::new(wins, seeds.len()), mean(imp), mean(sim)).unwrap();
    }
    print!("{summary}");
    Ok(vec![ctx.write("constrained.tsv", table)?, ctx.write("summary.txt", summary)?])
}

pub fn metrics_cmd(ctx: &Context, input: &Path) -> CliResult<Vec<PathBuf>> {
    let text = fs::read_to_string(input)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", input.display())))?;
    // Unparseable or blank lines stand for failed decodes and count as invalid.
    let generated: Vec<Molecule> = text
        .lines()
        .map(|l| l.split_whitespace().next().and_then(|s| parse_smiles(s).ok()).unwrap_or_else(Molecule::empty))
        .collect();
    let train: HashSet<CanonicalKey> = ctx.optional_dataset()?.iter().map(canonical_key).collect();
    let report = metrics(&generated, &train, &ctx.cfg.model.vocab)?;
    print!("{}", report.to_key_value());
    Ok(vec![ctx.write("metrics.txt", report.to_key_value())?, ctx.write("metrics.json", report.to_json())?])
}

/// Returns the outputs and whether every check passed.
pub fn selfcheck_cmd(ctx: &Context) -> CliResult<(Vec<PathBuf>, bool)> {
    let outcomes = selfcheck::run_all(&ctx.cfg.model, ctx.cfg.selfcheck.trials, &mut ctx.rng(5))?;
    let mut text = String::new();
    for o in &outcomes {
        writeln!(
            text,
            "{}\t{}\t{:.3e}\t{:.0e}\t{}",
            o.suite,
            o.case,
            o.error,
            o.tolerance,
            if o.passed() { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    print!("{text}");
    let ok = outcomes.iter().all(|o| o.passed());
    Ok((vec![ctx.write("selfcheck.txt", text)?], ok))
}

fn smiles_block(mols: &[Molecule]) -> String {
    mols.iter().map(|m| smiles_line(m) + "\n").collect()
}
