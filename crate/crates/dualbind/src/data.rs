//! Protein-ligand complex records, dataset/manifest file I/O, and the
//! ligand-overlap exclusion rule for splits.
//!
//! Dataset files are JSON-lines, one complex per line:
//! `{"id":…, "ligand_key":…, "affinity": number|null, "atoms":[{"element":"C","ligand":true,"pos":[x,y,z]},…]}`

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Fixed element vocabulary: {C, N, O, S, other}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Element {
    C,
    N,
    O,
    S,
    #[serde(rename = "other")]
    Other,
}

pub const ELEMENT_VOCAB: usize = 5;

/// Feature width: one-hot element + ligand flag.
pub const FEATURE_DIM: usize = ELEMENT_VOCAB + 1;

impl Element {
    pub fn code(self) -> usize {
        match self {
            Element::C => 0,
            Element::N => 1,
            Element::O => 2,
            Element::S => 3,
            Element::Other => 4,
        }
    }

    pub fn from_code(code: usize) -> Option<Element> {
        Some(match code {
            0 => Element::C,
            1 => Element::N,
            2 => Element::O,
            3 => Element::S,
            4 => Element::Other,
            _ => return None,
        })
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::S => "S",
            Element::Other => "other",
        };
        f.write_str(s)
    }
}

/// One protein-ligand structure. Affinity labels are pK-like: higher means
/// stronger binding.
#[derive(Debug, Clone, PartialEq)]
pub struct Complex {
    pub id: String,
    pub ligand_key: String,
    pub elements: Vec<Element>,
    pub is_ligand: Vec<bool>,
    pub coords: Vec<[f64; 3]>,
    pub affinity: Option<f64>,
}

impl Complex {
    pub fn n_atoms(&self) -> usize {
        self.elements.len()
    }

    pub fn ligand_indices(&self) -> Vec<usize> {
        self.is_ligand
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| l.then_some(i))
            .collect()
    }

    pub fn protein_indices(&self) -> Vec<usize> {
        self.is_ligand
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (!l).then_some(i))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_atoms();
        let fail = |msg: String| Err(Error::Data(format!("complex {}: {}", self.id, msg)));
        if n < 2 {
            return fail("fewer than 2 atoms".into());
        }
        if self.is_ligand.len() != n || self.coords.len() != n {
            return fail("inconsistent per-atom field lengths".into());
        }
        if !self.is_ligand.iter().any(|&l| l) {
            return fail("no ligand atoms".into());
        }
        if !self.is_ligand.iter().any(|&l| !l) {
            return fail("no protein atoms".into());
        }
        for (i, c) in self.coords.iter().enumerate() {
            if !c.iter().all(|v| v.is_finite()) {
                return fail(format!("non-finite coordinate at atom {i}"));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if self.coords[i] == self.coords[j] {
                    return fail(format!("atoms {i} and {j} exactly coincident"));
                }
            }
        }
        if let Some(y) = self.affinity {
            if !y.is_finite() {
                return fail("non-finite affinity".into());
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct AtomRecord {
    element: Element,
    ligand: bool,
    pos: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct ComplexRecord {
    id: String,
    ligand_key: String,
    affinity: Option<f64>,
    atoms: Vec<AtomRecord>,
}

impl From<&Complex> for ComplexRecord {
    fn from(c: &Complex) -> Self {
        ComplexRecord {
            id: c.id.clone(),
            ligand_key: c.ligand_key.clone(),
            affinity: c.affinity,
            atoms: (0..c.n_atoms())
                .map(|i| AtomRecord {
                    element: c.elements[i],
                    ligand: c.is_ligand[i],
                    pos: c.coords[i],
                })
                .collect(),
        }
    }
}

impl From<ComplexRecord> for Complex {
    fn from(r: ComplexRecord) -> Self {
        Complex {
            id: r.id,
            ligand_key: r.ligand_key,
            elements: r.atoms.iter().map(|a| a.element).collect(),
            is_ligand: r.atoms.iter().map(|a| a.ligand).collect(),
            coords: r.atoms.iter().map(|a| a.pos).collect(),
            affinity: r.affinity,
        }
    }
}

/// Loads a JSON-lines dataset file, validating every record.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Complex>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ComplexRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: malformed complex record: {e}", path.display(), lineno + 1))
        })?;
        let c: Complex = rec.into();
        c.validate()?;
        out.push(c);
    }
    Ok(out)
}

/// Writes complexes as JSON-lines, one record per line, in input order.
pub fn save_dataset(path: impl AsRef<Path>, complexes: &[Complex]) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for c in complexes {
        let rec = ComplexRecord::from(c);
        let line = serde_json::to_string(&rec).expect("complex record serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Featurizes a complex: A row i = one-hot(element) ++ [is_ligand], X copies
/// coordinates. Returns (A, X, ligand index list).
pub fn featurize(c: &Complex) -> (Tensor, Tensor, Vec<usize>) {
    let n = c.n_atoms();
    let mut a = vec![0.0; n * FEATURE_DIM];
    for i in 0..n {
        a[i * FEATURE_DIM + c.elements[i].code()] = 1.0;
        if c.is_ligand[i] {
            a[i * FEATURE_DIM + ELEMENT_VOCAB] = 1.0;
        }
    }
    let mut x = Vec::with_capacity(n * 3);
    for p in &c.coords {
        x.extend_from_slice(p);
    }
    (
        Tensor::constant(&[n, FEATURE_DIM], a),
        Tensor::constant(&[n, 3], x),
        c.ligand_indices(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub labeled: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: malformed manifest: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn ids_in_split(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }
}

/// One manifest-invariant violation, human readable.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Checks manifest invariants against the dataset: disjoint splits, labeled
/// val/test entries, and no train ligand_key shared with val or test.
pub fn validate_manifest(m: &Manifest, data: &[Complex]) -> Result<Vec<Violation>> {
    let by_id: BTreeMap<&str, &Complex> = data.iter().map(|c| (c.id.as_str(), c)).collect();
    for e in &m.entries {
        if !by_id.contains_key(e.id.as_str()) {
            return Err(Error::Data(format!("manifest id {} not present in dataset", e.id)));
        }
    }

    let mut violations = Vec::new();
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for e in &m.entries {
        if let Some(prev) = seen.insert(e.id.as_str(), e.split) {
            if prev != e.split {
                violations.push(Violation(format!(
                    "id {} assigned to both {} and {}",
                    e.id, prev, e.split
                )));
            } else {
                violations.push(Violation(format!("id {} listed twice", e.id)));
            }
        }
        if e.split != Split::Train && !e.labeled {
            violations.push(Violation(format!("unlabeled entry {} in {} split", e.id, e.split)));
        }
    }

    // ligand overlap: no train ligand_key may appear in val/test
    let mut holdout_keys: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in &m.entries {
        if e.split != Split::Train {
            let c = by_id[e.id.as_str()];
            holdout_keys.entry(c.ligand_key.as_str()).or_default().push(e.id.as_str());
        }
    }
    for e in &m.entries {
        if e.split == Split::Train {
            let c = by_id[e.id.as_str()];
            if let Some(others) = holdout_keys.get(c.ligand_key.as_str()) {
                violations.push(Violation(format!(
                    "train complex {} shares ligand_key {} with held-out {}",
                    e.id,
                    c.ligand_key,
                    others.join(", ")
                )));
            }
        }
    }
    Ok(violations)
}

/// Ids of manifest entries resolved against the dataset for one split.
pub fn split_complexes<'a>(m: &Manifest, data: &'a [Complex], split: Split) -> Result<Vec<&'a Complex>> {
    let by_id: BTreeMap<&str, &Complex> = data.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut out = Vec::new();
    for e in &m.entries {
        if e.split == split {
            let c = by_id
                .get(e.id.as_str())
                .ok_or_else(|| Error::Data(format!("manifest id {} not present in dataset", e.id)))?;
            out.push(*c);
        }
    }
    Ok(out)
}

/// Labeled flags by id, for the trainer.
pub fn labeled_ids(m: &Manifest) -> BTreeSet<&str> {
    m.entries
        .iter()
        .filter(|e| e.labeled)
        .map(|e| e.id.as_str())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_complex(id: &str, key: &str, affinity: Option<f64>) -> Complex {
        Complex {
            id: id.into(),
            ligand_key: key.into(),
            elements: vec![Element::C, Element::O, Element::N],
            is_ligand: vec![true, false, false],
            coords: vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.5]],
            affinity,
        }
    }

    #[test]
    fn load_two_line_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let cs = vec![sample_complex("a", "k1", Some(1.5)), sample_complex("b", "k2", None)];
        save_dataset(&path, &cs).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[1].affinity, None);
        assert_eq!(loaded, cs, "round trip is the identity");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let good = serde_json::to_string(&ComplexRecord::from(&sample_complex("a", "k", None))).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn single_atom_complex_is_rejected() {
        let mut c = sample_complex("tiny", "k", None);
        c.elements.truncate(1);
        c.is_ligand.truncate(1);
        c.coords.truncate(1);
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("fewer than 2 atoms"), "{err}");
    }

    #[test]
    fn coincident_atoms_are_rejected() {
        let mut c = sample_complex("dup", "k", None);
        c.coords[1] = c.coords[0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn featurize_rows() {
        let c = sample_complex("a", "k", None);
        let (a, x, lig) = featurize(&c);
        assert_eq!(a.shape(), &[3, 6]);
        // ligand carbon
        assert_eq!(&a.data()[0..6], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        // protein oxygen
        assert_eq!(&a.data()[6..12], &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(x.shape(), &[3, 3]);
        assert_eq!(lig, vec![0]);
    }

    fn manifest(entries: &[(&str, Split, bool)]) -> Manifest {
        Manifest {
            entries: entries
                .iter()
                .map(|(id, split, labeled)| ManifestEntry {
                    id: (*id).into(),
                    split: *split,
                    labeled: *labeled,
                })
                .collect(),
        }
    }

    #[test]
    fn manifest_ok_when_keys_disjoint() {
        let data = vec![
            sample_complex("a", "k1", Some(1.0)),
            sample_complex("b", "k2", Some(2.0)),
        ];
        let m = manifest(&[("a", Split::Train, true), ("b", Split::Test, true)]);
        assert!(validate_manifest(&m, &data).unwrap().is_empty());
    }

    #[test]
    fn ligand_overlap_is_a_violation() {
        let data = vec![
            sample_complex("a", "shared", Some(1.0)),
            sample_complex("b", "shared", Some(2.0)),
        ];
        let m = manifest(&[("a", Split::Train, true), ("b", Split::Test, true)]);
        let v = validate_manifest(&m, &data).unwrap();
        assert_eq!(v.len(), 1);
        assert!(v[0].0.contains("a") && v[0].0.contains("b"), "{}", v[0]);
    }

    #[test]
    fn unlabeled_test_entry_is_a_violation() {
        let data = vec![sample_complex("a", "k1", Some(1.0)), sample_complex("b", "k2", None)];
        let m = manifest(&[("a", Split::Train, true), ("b", Split::Test, false)]);
        let v = validate_manifest(&m, &data).unwrap();
        assert_eq!(v.len(), 1);
        assert!(v[0].0.contains("unlabeled"), "{}", v[0]);
    }

    #[test]
    fn unresolved_manifest_id_is_an_error() {
        let data = vec![sample_complex("a", "k1", Some(1.0))];
        let m = manifest(&[("ghost", Split::Train, true)]);
        assert!(validate_manifest(&m, &data).is_err());
    }

    proptest! {
        #[test]
        fn featurize_is_permutation_equivariant(perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let c = Complex {
                id: "p".into(),
                ligand_key: "k".into(),
                elements: vec![Element::C, Element::N, Element::O, Element::S, Element::Other],
                is_ligand: vec![true, true, false, false, false],
                coords: vec![
                    [0.0, 0.0, 0.0],
                    [1.0, 0.0, 0.0],
                    [0.0, 2.0, 0.0],
                    [0.0, 0.0, 3.0],
                    [1.0, 1.0, 1.0],
                ],
                affinity: None,
            };
            let mut order: Vec<usize> = (0..5).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
            order.shuffle(&mut rng);
            let permuted = Complex {
                id: c.id.clone(),
                ligand_key: c.ligand_key.clone(),
                elements: order.iter().map(|&i| c.elements[i]).collect(),
                is_ligand: order.iter().map(|&i| c.is_ligand[i]).collect(),
                coords: order.iter().map(|&i| c.coords[i]).collect(),
                affinity: None,
            };
            let (a0, x0, _) = featurize(&c);
            let (a1, x1, _) = featurize(&permuted);
            for (new_row, &old_row) in order.iter().enumerate() {
                prop_assert_eq!(&a1.data()[new_row*6..new_row*6+6], &a0.data()[old_row*6..old_row*6+6]);
                prop_assert_eq!(&x1.data()[new_row*3..new_row*3+3], &x0.data()[old_row*3..old_row*3+3]);
            }
        }
    }
}
