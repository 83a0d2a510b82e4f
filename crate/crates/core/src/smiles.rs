//! Practical-subset SMILES parsing and extended-connectivity fingerprints.
//!
//! The parser covers the organic subset (upper and lowercase aromatic),
//! bracket atoms with charge and H-count, explicit bonds, branches, ring
//! closures (digits and `%NN`), `.` separators, and `*` wildcards. Valence
//! checking, stereochemistry, and isotope semantics are out of scope; the
//! graph only needs to feed the fingerprint comparison.
//!
//! Fingerprints follow the iterative Morgan neighborhood-hashing scheme with
//! a fixed FNV-based 64-bit hash so bit patterns are stable across platforms.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::util::fnv1a64;

#[derive(Debug, Error)]
pub enum SmilesError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("fingerprint file {path}: {reason}")]
    BadFpFile { path: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

fn parse_err(offset: usize, message: impl Into<String>) -> SmilesError {
    SmilesError::Parse {
        offset,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Atom {
    pub element: String,
    pub charge: i32,
    pub aromatic: bool,
    pub is_wildcard: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

#[derive(Debug, Clone, Default)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

impl MolGraph {
    pub fn neighbors(&self, atom: usize) -> impl Iterator<Item = (usize, BondOrder)> + '_ {
        self.bonds.iter().filter_map(move |b| {
            if b.a == atom {
                Some((b.b, b.order))
            } else if b.b == atom {
                Some((b.a, b.order))
            } else {
                None
            }
        })
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.neighbors(atom).count()
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    graph: MolGraph,
    /// Attachment point; `None` right after `.` or at the start.
    prev: Option<usize>,
    branch_stack: Vec<Option<usize>>,
    pending_bond: Option<BondOrder>,
    /// Open ring closures: number -> (atom, bond at opening, byte offset).
    rings: HashMap<u32, (usize, Option<BondOrder>, usize)>,
}

impl<'a> Parser<'a> {
    fn new(s: &'a str) -> Self {
        Parser {
            bytes: s.as_bytes(),
            pos: 0,
            graph: MolGraph::default(),
            prev: None,
            branch_stack: Vec::new(),
            pending_bond: None,
            rings: HashMap::new(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn add_bond(&mut self, a: usize, b: usize, order: BondOrder, offset: usize) -> Result<(), SmilesError> {
        if a == b {
            return Err(parse_err(offset, "ring closure bonds an atom to itself"));
        }
        if self
            .graph
            .bonds
            .iter()
            .any(|e| (e.a == a && e.b == b) || (e.a == b && e.b == a))
        {
            return Err(parse_err(offset, "duplicate bond between the same atoms"));
        }
        self.graph.bonds.push(Bond { a, b, order });
        Ok(())
    }

    fn default_order(&self, a: usize, b: usize) -> BondOrder {
        if self.graph.atoms[a].aromatic && self.graph.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn attach(&mut self, atom: usize, offset: usize) -> Result<(), SmilesError> {
        if let Some(prev) = self.prev {
            let order = self
                .pending_bond
                .take()
                .unwrap_or_else(|| self.default_order(prev, atom));
            self.add_bond(prev, atom, order, offset)?;
        } else if self.pending_bond.is_some() {
            return Err(parse_err(offset, "bond symbol with no preceding atom"));
        }
        self.prev = Some(atom);
        Ok(())
    }

    fn push_atom(&mut self, atom: Atom, offset: usize) -> Result<(), SmilesError> {
        self.graph.atoms.push(atom);
        let idx = self.graph.atoms.len() - 1;
        self.attach(idx, offset)
    }

    fn ring_closure(&mut self, number: u32, offset: usize) -> Result<(), SmilesError> {
        let here = self
            .prev
            .ok_or_else(|| parse_err(offset, "ring closure digit with no preceding atom"))?;
        let pending = self.pending_bond.take();
        match self.rings.remove(&number) {
            Some((other, open_bond, _)) => {
                let order = open_bond
                    .or(pending)
                    .unwrap_or_else(|| self.default_order(other, here));
                self.add_bond(other, here, order, offset)?;
            }
            None => {
                self.rings.insert(number, (here, pending, offset));
            }
        }
        Ok(())
    }

    fn parse_bracket(&mut self) -> Result<(), SmilesError> {
        let start = self.pos;
        self.pos += 1; // consume '['
        // Isotope digits, parsed and ignored.
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        let (element, aromatic, wildcard) = match self.peek() {
            Some(b'*') => {
                self.pos += 1;
                ("*".to_string(), false, true)
            }
            Some(c1 @ b'A'..=b'Z') => {
                self.pos += 1;
                let mut el = (c1 as char).to_string();
                if let Some(c2 @ b'a'..=b'z') = self.peek() {
                    // Two-letter element; 'H' after a symbol is a hydrogen
                    // count, which never lowercases, so this is unambiguous.
                    el.push(c2 as char);
                    self.pos += 1;
                }
                (el, false, false)
            }
            Some(c1 @ b'a'..=b'z') => {
                self.pos += 1;
                let mut el = (c1 as char).to_string();
                // Aromatic two-letter atoms (se, te, as).
                if (el == "s" || el == "t" || el == "a")
                    && matches!(self.peek(), Some(b'e') | Some(b's'))
                {
                    el.push(self.bytes[self.pos] as char);
                    self.pos += 1;
                }
                (el.to_uppercase(), true, false)
            }
            _ => return Err(parse_err(start, "bracket atom without element symbol")),
        };
        // Chirality markers, ignored.
        while matches!(self.peek(), Some(b'@')) {
            self.pos += 1;
        }
        // Explicit hydrogen count, ignored for the graph.
        if matches!(self.peek(), Some(b'H')) {
            self.pos += 1;
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
            }
        }
        // Formal charge.
        let mut charge = 0i32;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            let mut magnitude = 1;
            if matches!(self.peek(), Some(b'0'..=b'9')) {
                magnitude = 0;
                while let Some(d @ b'0'..=b'9') = self.peek() {
                    magnitude = magnitude * 10 + (d - b'0') as i32;
                    self.pos += 1;
                }
            } else {
                while self.peek() == Some(sign) {
                    magnitude += 1;
                    self.pos += 1;
                }
            }
            charge = unit * magnitude;
        }
        // Atom class, ignored.
        if matches!(self.peek(), Some(b':')) {
            self.pos += 1;
            while matches!(self.peek(), Some(b'0'..=b'9')) {
                self.pos += 1;
            }
        }
        if self.peek() != Some(b']') {
            return Err(parse_err(self.pos.min(self.bytes.len()), "unterminated bracket atom"));
        }
        self.pos += 1;
        self.push_atom(
            Atom {
                element,
                charge,
                aromatic,
                is_wildcard: wildcard,
            },
            start,
        )
    }

    fn run(mut self) -> Result<MolGraph, SmilesError> {
        while let Some(c) = self.peek() {
            let offset = self.pos;
            match c {
                b'[' => self.parse_bracket()?,
                b'*' => {
                    self.pos += 1;
                    self.push_atom(
                        Atom {
                            element: "*".into(),
                            charge: 0,
                            aromatic: false,
                            is_wildcard: true,
                        },
                        offset,
                    )?;
                }
                b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' => {
                    self.pos += 1;
                    let mut el = (c as char).to_string();
                    if (c == b'C' && self.peek() == Some(b'l'))
                        || (c == b'B' && self.peek() == Some(b'r'))
                    {
                        el.push(self.bytes[self.pos] as char);
                        self.pos += 1;
                    }
                    self.push_atom(
                        Atom {
                            element: el,
                            charge: 0,
                            aromatic: false,
                            is_wildcard: false,
                        },
                        offset,
                    )?;
                }
                b'b' | b'c' | b'n' | b'o' | b'p' | b's' => {
                    self.pos += 1;
                    self.push_atom(
                        Atom {
                            element: (c as char).to_uppercase().to_string(),
                            charge: 0,
                            aromatic: true,
                            is_wildcard: false,
                        },
                        offset,
                    )?;
                }
                b'-' | b'/' | b'\\' => {
                    self.pos += 1;
                    self.pending_bond = Some(BondOrder::Single);
                }
                b'=' => {
                    self.pos += 1;
                    self.pending_bond = Some(BondOrder::Double);
                }
                b'#' => {
                    self.pos += 1;
                    self.pending_bond = Some(BondOrder::Triple);
                }
                b':' => {
                    self.pos += 1;
                    self.pending_bond = Some(BondOrder::Aromatic);
                }
                b'0'..=b'9' => {
                    self.pos += 1;
                    self.ring_closure((c - b'0') as u32, offset)?;
                }
                b'%' => {
                    self.pos += 1;
                    let d1 = self.peek();
                    self.pos += 1;
                    let d2 = self.peek();
                    match (d1, d2) {
                        (Some(a @ b'0'..=b'9'), Some(b @ b'0'..=b'9')) => {
                            self.pos += 1;
                            let number = (a - b'0') as u32 * 10 + (b - b'0') as u32;
                            self.ring_closure(number, offset)?;
                        }
                        _ => return Err(parse_err(offset, "'%' needs two ring-closure digits")),
                    }
                }
                b'(' => {
                    self.pos += 1;
                    if self.prev.is_none() {
                        return Err(parse_err(offset, "branch with no preceding atom"));
                    }
                    self.branch_stack.push(self.prev);
                }
                b')' => {
                    self.pos += 1;
                    match self.branch_stack.pop() {
                        Some(saved) => self.prev = saved,
                        None => return Err(parse_err(offset, "unbalanced ')'")),
                    }
                }
                b'.' => {
                    self.pos += 1;
                    self.prev = None;
                    self.pending_bond = None;
                }
                other => {
                    return Err(parse_err(
                        offset,
                        format!("unknown glyph {:?}", other as char),
                    ));
                }
            }
        }
        if !self.branch_stack.is_empty() {
            return Err(parse_err(self.bytes.len(), "unbalanced '(': branch never closed"));
        }
        if let Some((&num, &(_, _, offset))) = self.rings.iter().min_by_key(|(_, v)| v.2) {
            return Err(parse_err(offset, format!("dangling ring closure {num}")));
        }
        if self.pending_bond.is_some() {
            return Err(parse_err(self.bytes.len(), "trailing bond symbol"));
        }
        if self.graph.atoms.is_empty() {
            return Err(parse_err(0, "no atoms"));
        }
        Ok(self.graph)
    }
}

/// Parses a practical subset of SMILES into a molecular graph.
pub fn parse_smiles(smiles: &str) -> Result<MolGraph, SmilesError> {
    let s = smiles.trim();
    if s.is_empty() {
        return Err(parse_err(0, "empty input"));
    }
    Parser::new(s).run()
}

/// Fixed-length hashed fingerprint of iteratively grown atom neighborhoods.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    pub bits: Vec<bool>,
    pub nbits: usize,
    pub radius: usize,
}

impl Fingerprint {
    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Packs bits LSB-first into bytes.
    pub fn packed(&self) -> Vec<u8> {
        pack_bits(&self.bits)
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &bit) in bits.iter().enumerate() {
        if bit {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn hash_words(words: &[u64]) -> u64 {
    let mut buf = Vec::with_capacity(words.len() * 8);
    for w in words {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    fnv1a64(&buf)
}

/// Initial per-atom invariant from local properties only, so equivalent
/// writings of the same molecule hash identically.
fn atom_invariant(graph: &MolGraph, idx: usize) -> u64 {
    let atom = &graph.atoms[idx];
    let mut buf = Vec::new();
    buf.extend_from_slice(atom.element.as_bytes());
    buf.push(0xfe);
    buf.extend_from_slice(&(graph.degree(idx) as u64).to_le_bytes());
    buf.extend_from_slice(&(atom.charge as i64).to_le_bytes());
    buf.push(atom.aromatic as u8);
    buf.push(atom.is_wildcard as u8);
    fnv1a64(&buf)
}

/// Extended-connectivity fingerprint by `radius` rounds of order-independent
/// neighbor-hash aggregation, each round's identifiers folded modulo `nbits`.
pub fn ecfp(graph: &MolGraph, radius: usize, nbits: usize) -> Fingerprint {
    let n = graph.atoms.len();
    let mut ids: Vec<u64> = (0..n).map(|i| atom_invariant(graph, i)).collect();
    let mut emitted: Vec<u64> = ids.clone();
    for round in 1..=radius {
        let mut next = Vec::with_capacity(n);
        for atom in 0..n {
            let mut neighborhood: Vec<(u8, u64)> = graph
                .neighbors(atom)
                .map(|(nbr, order)| (order.code(), ids[nbr]))
                .collect();
            neighborhood.sort_unstable();
            let mut words = vec![round as u64, ids[atom]];
            for (code, id) in neighborhood {
                words.push(code as u64);
                words.push(id);
            }
            next.push(hash_words(&words));
        }
        emitted.extend_from_slice(&next);
        ids = next;
    }
    let mut bits = vec![false; nbits];
    for id in emitted {
        bits[(id % nbits as u64) as usize] = true;
    }
    Fingerprint {
        bits,
        nbits,
        radius,
    }
}

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_NBITS: usize = 1024;

/// Packed binary fingerprint matrix plus the SMILES each row came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FingerprintMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, each row padded to a whole byte, bits LSB-first.
    pub packed: Vec<u8>,
    pub smiles: Vec<String>,
    pub skipped: usize,
}

impl FingerprintMatrix {
    pub fn row_stride(&self) -> usize {
        self.cols.div_ceil(8)
    }

    pub fn bit(&self, row: usize, col: usize) -> bool {
        let byte = self.packed[row * self.row_stride() + col / 8];
        byte & (1 << (col % 8)) != 0
    }

    /// Expands into a dense real-valued matrix (0.0/1.0), row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.bit(r, c) {
                    out[r * self.cols + c] = 1.0;
                }
            }
        }
        out
    }
}

/// Seeded uniform sample (without replacement) of fingerprints over a corpus.
/// Unparseable lines are skipped and counted; if fewer valid lines than
/// `sample_size` exist the full valid set is used with a warning. Row order
/// follows corpus order of the sampled lines.
pub fn fingerprint_matrix<I, S>(
    corpus: I,
    sample_size: usize,
    seed: u64,
    radius: usize,
    nbits: usize,
) -> FingerprintMatrix
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<(usize, String, Fingerprint)> = Vec::with_capacity(sample_size);
    let mut skipped = 0usize;
    let mut seen_valid = 0usize;
    for (idx, line) in corpus.into_iter().enumerate() {
        let line = line.as_ref().trim();
        if line.is_empty() {
            continue;
        }
        let graph = match parse_smiles(line) {
            Ok(g) => g,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let fp = ecfp(&graph, radius, nbits);
        seen_valid += 1;
        if sample_size == 0 {
            continue;
        }
        if reservoir.len() < sample_size {
            reservoir.push((idx, line.to_string(), fp));
        } else {
            let j = rng.gen_range(0..seen_valid);
            if j < sample_size {
                reservoir[j] = (idx, line.to_string(), fp);
            }
        }
    }
    if seen_valid < sample_size {
        log::warn!(
            "corpus has only {seen_valid} parseable lines; sampling fell back to the full corpus \
             (requested {sample_size}, skipped {skipped})"
        );
    }
    reservoir.sort_by_key(|(idx, _, _)| *idx);

    let stride = nbits.div_ceil(8);
    let mut packed = Vec::with_capacity(reservoir.len() * stride);
    let mut smiles = Vec::with_capacity(reservoir.len());
    for (_, line, fp) in &reservoir {
        packed.extend_from_slice(&fp.packed());
        smiles.push(line.clone());
    }
    FingerprintMatrix {
        rows: reservoir.len(),
        cols: nbits,
        packed,
        smiles,
        skipped,
    }
}

const FP_MAGIC: &[u8; 8] = b"PPFPMTX1";

/// Writes the documented binary matrix (magic, version, row/col/skip counts,
/// packed bits) plus a sidecar `<path>.smiles` text file of the sampled rows.
pub fn save_fp_matrix(m: &FingerprintMatrix, path: &Path) -> Result<(), SmilesError> {
    let mut f = fs::File::create(path)?;
    f.write_all(FP_MAGIC)?;
    f.write_all(&1u32.to_le_bytes())?;
    f.write_all(&(m.rows as u64).to_le_bytes())?;
    f.write_all(&(m.cols as u64).to_le_bytes())?;
    f.write_all(&(m.skipped as u64).to_le_bytes())?;
    f.write_all(&m.packed)?;
    let sidecar = sidecar_path(path);
    fs::write(&sidecar, m.smiles.join("\n") + "\n")?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".smiles");
    std::path::PathBuf::from(os)
}

pub fn load_fp_matrix(path: &Path) -> Result<FingerprintMatrix, SmilesError> {
    let bad = |reason: &str| SmilesError::BadFpFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != FP_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let mut w32 = [0u8; 4];
    f.read_exact(&mut w32)?;
    if u32::from_le_bytes(w32) != 1 {
        return Err(bad("unsupported version"));
    }
    let mut w64 = [0u8; 8];
    f.read_exact(&mut w64)?;
    let rows = u64::from_le_bytes(w64) as usize;
    f.read_exact(&mut w64)?;
    let cols = u64::from_le_bytes(w64) as usize;
    f.read_exact(&mut w64)?;
    let skipped = u64::from_le_bytes(w64) as usize;
    let stride = cols.div_ceil(8);
    let mut packed = vec![0u8; rows * stride];
    f.read_exact(&mut packed).map_err(|_| bad("truncated bit data"))?;
    let smiles = match fs::read_to_string(sidecar_path(path)) {
        Ok(text) => text.lines().map(str::to_string).collect(),
        Err(_) => Vec::new(),
    };
    Ok(FingerprintMatrix {
        rows,
        cols,
        packed,
        smiles,
        skipped,
    })
}
