use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use crate::chemio::{canonical_key, CanonicalKey};
use crate::error::{Error, Result};
use crate::molgraph::{Molecule, VocabularyConfig};
use crate::validity::is_valid;

/// Exact ratio of two counts; equality compares cross products.
#[derive(Clone, Copy, Debug, Eq, Serialize)]
pub struct Fraction {
    pub num: usize,
    pub den: usize,
}

impl Fraction {
    pub fn new(num: usize, den: usize) -> Self {
        Self { num, den }
    }

    /// Zero when the denominator is zero.
    pub fn value(&self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }
}

impl PartialEq for Fraction {
    fn eq(&self, other: &Self) -> bool {
        (self.num as u128) * (other.den as u128) == (other.num as u128) * (self.den as u128)
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub total: usize,
    /// valid / total.
    pub validity: Fraction,
    /// Validity of the uncorrected decodes, when supplied.
    pub validity_wo_check: Option<Fraction>,
    /// distinct valid / valid.
    pub uniqueness: Fraction,
    /// distinct valid / total.
    pub uniqueness_of_all: Fraction,
    /// valid and outside the training set / valid.
    pub novelty: Fraction,
    /// distinct, novel and valid / total.
    pub nuv: Fraction,
    pub reconstruction: Option<Fraction>,
}

/// Generation metrics over a nonempty list of (corrected) decodes.
pub fn metrics(
    generated: &[Molecule],
    train_keys: &HashSet<CanonicalKey>,
    vocab: &VocabularyConfig,
) -> Result<MetricsReport> {
    if generated.is_empty() {
        return Err(Error::Empty("generated set"));
    }
    let total = generated.len();
    let valid: Vec<CanonicalKey> =
        generated.iter().filter(|m| is_valid(m, vocab)).map(canonical_key).collect();
    let distinct: HashSet<&CanonicalKey> = valid.iter().collect();
    let novel = valid.iter().filter(|k| !train_keys.contains(*k)).count();
    let nuv = distinct.iter().filter(|k| !train_keys.contains(**k)).count();
    Ok(MetricsReport {
        total,
        validity: Fraction::new(valid.len(), total),
        validity_wo_check: None,
        uniqueness: Fraction::new(distinct.len(), valid.len()),
        uniqueness_of_all: Fraction::new(distinct.len(), total),
        novelty: Fraction::new(novel, valid.len()),
        nuv: Fraction::new(nuv, total),
        reconstruction: None,
    })
}

impl MetricsReport {
    pub fn with_uncorrected(mut self, raw: &[Molecule], vocab: &VocabularyConfig) -> Self {
        let ok = raw.iter().filter(|m| is_valid(m, vocab)).count();
        self.validity_wo_check = Some(Fraction::new(ok, raw.len()));
        self
    }

    pub fn with_reconstruction(mut self, ok: usize, dataset_size: usize) -> Self {
        self.reconstruction = Some(Fraction::new(ok, dataset_size));
        self
    }

    fn rows(&self) -> Vec<(&'static str, Option<Fraction>)> {
        vec![
            ("validity", Some(self.validity)),
            ("validity_wo_check", self.validity_wo_check),
            ("uniqueness", Some(self.uniqueness)),
            ("uniqueness_of_all", Some(self.uniqueness_of_all)),
            ("novelty", Some(self.novelty)),
            ("nuv", Some(self.nuv)),
            ("reconstruction", self.reconstruction),
        ]
    }

    /// Flat `key=value` lines; absent metrics are omitted.
    pub fn to_key_value(&self) -> String {
        let mut out = format!("total={}\n", self.total);
        for (k, f) in self.rows() {
            if let Some(f) = f {
                out.push_str(&format!("{k}={:.6}\n{k}_count={f}\n", f.value()));
            }
        }
        out
    }

    /// JSON object mapping each metric to `{value, num, den}`.
    pub fn to_json(&self) -> String {
        let mut map = serde_json::Map::new();
        map.insert("total".into(), self.total.into());
        for (k, f) in self.rows() {
            if let Some(f) = f {
                map.insert(k.into(), serde_json::json!({ "value": f.value(), "num": f.num, "den": f.den }));
            }
        }
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("plain JSON") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemio::parse_smiles;

    #[test]
    fn fraction_equality_is_exact() {
        assert_eq!(Fraction::new(2, 3), Fraction::new(4, 6));
        assert_ne!(Fraction::new(2, 3), Fraction::new(667, 1000));
    }

    #[test]
    fn empty_generation_is_an_error() {
        assert!(metrics(&[], &HashSet::new(), &VocabularyConfig::qm9()).is_err());
    }

    #[test]
    fn all_training_copies_have_zero_novelty() {
        let m = parse_smiles("CCO").unwrap();
        let train: HashSet<_> = [canonical_key(&m)].into();
        let r = metrics(&[m.clone(), m], &train, &VocabularyConfig::qm9()).unwrap();
        assert_eq!(r.novelty, Fraction::new(0, 1));
        assert_eq!(r.uniqueness, Fraction::new(1, 2));
    }

    #[test]
    fn reports_render_counts() {
        let m = parse_smiles("CCO").unwrap();
        let r = metrics(&[m], &HashSet::new(), &VocabularyConfig::qm9()).unwrap().with_reconstruction(3, 4);
        let kv = r.to_key_value();
        assert!(kv.contains("validity=1.000000\n"));
        assert!(kv.contains("reconstruction_count=3/4\n"));
        assert!(!kv.contains("validity_wo_check"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["reconstruction"]["value"], 0.75);
    }
}
