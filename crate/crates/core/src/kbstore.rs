//! Knowledge-base storage: vocabularies, triples, embeddings and the triple
//! matrix `K` whose row `t` for `r(x, y)` is `[e_r; e_x; e_y]`.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KbqError, Result};
use crate::mips::{ExactScan, Matrix};

/// A stored fact `rel(subj, obj)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub rel: usize,
    pub subj: usize,
    pub obj: usize,
}

impl Triple {
    pub fn new(rel: usize, subj: usize, obj: usize) -> Self {
        Self { rel, subj, obj }
    }
}

/// Bijective name <-> dense id table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NameTable {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl NameTable {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Entity and relation vocabularies, ids assigned in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    pub entities: NameTable,
    pub relations: NameTable,
}

impl Vocab {
    pub fn entity_id(&self, name: &str) -> Result<usize> {
        self.entities
            .id(name)
            .ok_or_else(|| KbqError::UnknownEntity(name.to_owned()))
    }

    pub fn relation_id(&self, name: &str) -> Result<usize> {
        self.relations
            .id(name)
            .ok_or_else(|| KbqError::UnknownRelation(name.to_owned()))
    }

    pub fn entity_name(&self, id: usize) -> &str {
        self.entities.name(id).unwrap_or("<unknown>")
    }

    pub fn relation_name(&self, id: usize) -> &str {
        self.relations.name(id).unwrap_or("<unknown>")
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }
}

/// Options applied while ingesting a triple file.
#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Drop every `(subject, relation)` group with more objects than this.
    pub max_fanout: Option<usize>,
    pub add_inverse: bool,
}

/// Suffix used to name inverse relations.
pub const INVERSE_SUFFIX: &str = "_inv";

/// Split one line into its three fields; `None` for blank lines.
fn split_line(lineno: usize, line: std::io::Result<String>) -> Result<Option<[String; 3]>> {
    let line = line.map_err(|e| KbqError::Parse {
        line: lineno,
        message: e.to_string(),
    })?;
    let line = line.trim_end_matches('\r');
    if line.trim().is_empty() {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(KbqError::Parse {
            line: lineno,
            message: format!("expected 3 tab-separated fields, found {}", fields.len()),
        });
    }
    if fields.iter().any(|f| f.contains('\r')) {
        return Err(KbqError::Parse {
            line: lineno,
            message: "carriage return inside a field".into(),
        });
    }
    if let Some(empty) = fields.iter().position(|f| f.is_empty()) {
        return Err(KbqError::Parse {
            line: lineno,
            message: format!("field {} is empty", empty + 1),
        });
    }
    Ok(Some([fields[0].to_owned(), fields[1].to_owned(), fields[2].to_owned()]))
}

/// Parse `subject\trelation\tobject` lines. Blank lines are skipped.
pub fn parse_kb<R: BufRead>(reader: R, options: &IngestOptions) -> Result<(Vocab, Vec<Triple>)> {
    let mut vocab = Vocab::default();
    let mut seen = HashSet::new();
    let mut triples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let Some([s, r, o]) = split_line(idx + 1, line)? else { continue };
        let subj = vocab.entities.intern(&s);
        let rel = vocab.relations.intern(&r);
        let obj = vocab.entities.intern(&o);
        let t = Triple::new(rel, subj, obj);
        if seen.insert(t) {
            triples.push(t);
        }
    }
    if triples.is_empty() {
        return Err(KbqError::EmptyKb);
    }
    if let Some(cap) = options.max_fanout {
        triples = filter_fanout(triples, cap);
    }
    if options.add_inverse {
        triples = add_inverse_relations(&mut vocab, &triples);
    }
    Ok((vocab, triples))
}

/// Parse a triple file whose names must all exist in `vocab`, such as a
/// split of a KB that was already ingested. Duplicates are dropped.
pub fn parse_kb_with<R: BufRead>(reader: R, vocab: &Vocab) -> Result<Vec<Triple>> {
    let mut seen = HashSet::new();
    let mut triples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let Some([s, r, o]) = split_line(lineno, line)? else { continue };
        let resolve = |res: Result<usize>| {
            res.map_err(|e| KbqError::Parse {
                line: lineno,
                message: e.to_string(),
            })
        };
        let t = Triple::new(
            resolve(vocab.relation_id(&r))?,
            resolve(vocab.entity_id(&s))?,
            resolve(vocab.entity_id(&o))?,
        );
        if seen.insert(t) {
            triples.push(t);
        }
    }
    Ok(triples)
}

/// Read a triple file from disk.
pub fn load_kb(path: &Path, options: &IngestOptions) -> Result<(Vocab, TripleStore)> {
    let file = std::fs::File::open(path)?;
    let (vocab, triples) = parse_kb(std::io::BufReader::new(file), options)?;
    let store = TripleStore::new(triples, vocab.num_entities(), vocab.num_relations())?;
    log::info!(
        "loaded {}: {} triples, {} entities, {} relations",
        path.display(),
        store.num_triples(),
        store.num_entities(),
        store.num_relations()
    );
    Ok((vocab, store))
}

/// Write triples in the ingest format.
pub fn write_kb<W: std::io::Write>(mut out: W, vocab: &Vocab, triples: &[Triple]) -> Result<()> {
    for t in triples {
        writeln!(
            out,
            "{}\t{}\t{}",
            vocab.entity_name(t.subj),
            vocab.relation_name(t.rel),
            vocab.entity_name(t.obj)
        )?;
    }
    Ok(())
}

/// Drop every `(subject, relation)` group with more than `cap` objects.
pub fn filter_fanout(triples: Vec<Triple>, cap: usize) -> Vec<Triple> {
    let mut fanout: HashMap<(usize, usize), usize> = HashMap::new();
    for t in &triples {
        *fanout.entry((t.subj, t.rel)).or_default() += 1;
    }
    triples
        .into_iter()
        .filter(|t| fanout[&(t.subj, t.rel)] <= cap)
        .collect()
}

/// For every relation `r` add `r_inv` with `r_inv(y, x)` for each `r(x, y)`.
/// Inverse of relation `r` gets id `r + n_relations`. If `r_inv` is already
/// taken the suffix is repeated until the name is new.
pub fn add_inverse_relations(vocab: &mut Vocab, triples: &[Triple]) -> Vec<Triple> {
    let n = vocab.relations.len();
    for r in 0..n {
        let mut name = format!("{}{INVERSE_SUFFIX}", vocab.relations.names()[r]);
        while vocab.relations.id(&name).is_some() {
            name.push_str(INVERSE_SUFFIX);
        }
        vocab.relations.intern(&name);
    }
    let mut out = triples.to_vec();
    out.extend(triples.iter().map(|t| Triple::new(t.rel + n, t.obj, t.subj)));
    out
}

/// Entity and relation embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub entity: Matrix,
    pub relation: Matrix,
    pub seed: u64,
}

const CKPT_MAGIC: &[u8; 4] = b"KBQE";
const CKPT_VERSION: u32 = 1;
const CKPT_HEADER_LEN: usize = 4 + 4 + 8 * 4;

impl Embeddings {
    /// Uniform in `[-1/sqrt(d), 1/sqrt(d)]`, entities first then relations.
    pub fn random(num_entities: usize, num_relations: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f32).sqrt();
        let mut draw = |n: usize| {
            let data = (0..n * dim).map(|_| rng.gen_range(-bound..=bound)).collect();
            Matrix::from_vec(n, dim, data).expect("shape")
        };
        let entity = draw(num_entities);
        let relation = draw(num_relations);
        Self {
            entity,
            relation,
            seed,
        }
    }

    /// One-hot entity embeddings (`d = N`) and one-hot relation embeddings
    /// zero-padded to `d`. Makes retrieval an exact symbolic evaluator.
    pub fn localist(num_entities: usize, num_relations: usize) -> Result<Self> {
        let dim = num_entities.max(num_relations);
        let mut entity = Matrix::zeros(num_entities, dim);
        for i in 0..num_entities {
            entity.row_mut(i)[i] = 1.0;
        }
        let mut relation = Matrix::zeros(num_relations, dim);
        for r in 0..num_relations {
            relation.row_mut(r)[r] = 1.0;
        }
        Ok(Self {
            entity,
            relation,
            seed: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.entity.cols()
    }

    pub fn num_entities(&self) -> usize {
        self.entity.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relation.rows()
    }

    /// Header (magic, version, N, N_R, d, seed) then little-endian `f32`
    /// entity rows followed by relation rows.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.entity.as_slice().len() + self.relation.as_slice().len();
        let mut out = Vec::with_capacity(CKPT_HEADER_LEN + 4 * n);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        for v in [
            self.num_entities() as u64,
            self.num_relations() as u64,
            self.dim() as u64,
            self.seed,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for x in self.entity.as_slice().iter().chain(self.relation.as_slice()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CKPT_HEADER_LEN {
            return Err(KbqError::Decode("checkpoint header truncated".into()));
        }
        if &bytes[..4] != CKPT_MAGIC {
            return Err(KbqError::Decode("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(KbqError::Decode(format!("unsupported checkpoint version {version}")));
        }
        let field = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let to_usize = |v: u64| {
            usize::try_from(v).map_err(|_| KbqError::Decode("dimension does not fit in usize".into()))
        };
        let (n, nr, d, seed) = (to_usize(field(0))?, to_usize(field(1))?, to_usize(field(2))?, field(3));
        let floats = n
            .checked_add(nr)
            .and_then(|rows| rows.checked_mul(d))
            .ok_or_else(|| KbqError::Decode("checkpoint dimensions overflow".into()))?;
        let payload = &bytes[CKPT_HEADER_LEN..];
        if floats.checked_mul(4) != Some(payload.len()) {
            return Err(KbqError::Decode(format!(
                "expected {floats} floats, payload has {} bytes",
                payload.len()
            )));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KbqError::Decode("non-finite embedding value".into()));
        }
        let (e, r) = values.split_at(n * d);
        Ok(Self {
            entity: Matrix::from_vec(n, d, e.to_vec())?,
            relation: Matrix::from_vec(nr, d, r.to_vec())?,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Triples plus the embeddings and triple matrix used for retrieval.
///
/// Every mutable borrow of the embeddings bumps a version counter; reading
/// the triple matrix after such a borrow without rebuilding is an error.
#[derive(Debug, Clone)]
pub struct TripleStore {
    triples: Vec<Triple>,
    num_entities: usize,
    num_relations: usize,
    embeddings: Option<Embeddings>,
    embeddings_version: u64,
    triple_matrix: Option<(Matrix, u64)>,
}

impl TripleStore {
    pub fn new(triples: Vec<Triple>, num_entities: usize, num_relations: usize) -> Result<Self> {
        if let Some(t) = triples
            .iter()
            .find(|t| t.subj >= num_entities || t.obj >= num_entities || t.rel >= num_relations)
        {
            return Err(KbqError::Shape(format!(
                "triple {t:?} outside {num_entities} entities / {num_relations} relations"
            )));
        }
        Ok(Self {
            triples,
            num_entities,
            num_relations,
            embeddings: None,
            embeddings_version: 0,
            triple_matrix: None,
        })
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// Install embeddings and rebuild `K`.
    pub fn set_embeddings(&mut self, embeddings: Embeddings) -> Result<()> {
        if embeddings.num_entities() != self.num_entities
            || embeddings.num_relations() != self.num_relations
            || embeddings.relation.cols() != embeddings.entity.cols()
        {
            return Err(KbqError::Shape(format!(
                "embeddings {}x{} / {}x{} do not fit {} entities and {} relations",
                embeddings.entity.rows(),
                embeddings.entity.cols(),
                embeddings.relation.rows(),
                embeddings.relation.cols(),
                self.num_entities,
                self.num_relations
            )));
        }
        self.embeddings = Some(embeddings);
        self.embeddings_version += 1;
        self.build_triple_matrix()
    }

    pub fn embeddings(&self) -> Result<&Embeddings> {
        self.embeddings.as_ref().ok_or(KbqError::UninitializedEmbeddings)
    }

    /// Mutable access; invalidates `K` until [`Self::build_triple_matrix`].
    pub fn embeddings_mut(&mut self) -> Result<&mut Embeddings> {
        self.embeddings_version += 1;
        self.embeddings.as_mut().ok_or(KbqError::UninitializedEmbeddings)
    }

    pub fn take_embeddings(&mut self) -> Option<Embeddings> {
        self.triple_matrix = None;
        self.embeddings.take()
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.embeddings()?.dim())
    }

    /// Rebuild `K` from the current embeddings.
    pub fn build_triple_matrix(&mut self) -> Result<()> {
        let emb = self.embeddings.as_ref().ok_or(KbqError::UninitializedEmbeddings)?;
        let d = emb.dim();
        let mut k = Matrix::zeros(self.triples.len(), 3 * d);
        for (t, triple) in self.triples.iter().enumerate() {
            let row = k.row_mut(t);
            row[..d].copy_from_slice(emb.relation.row(triple.rel));
            row[d..2 * d].copy_from_slice(emb.entity.row(triple.subj));
            row[2 * d..].copy_from_slice(emb.entity.row(triple.obj));
        }
        self.triple_matrix = Some((k, self.embeddings_version));
        Ok(())
    }

    pub fn triple_matrix(&self) -> Result<&Matrix> {
        match &self.triple_matrix {
            None => Err(KbqError::UninitializedEmbeddings),
            Some((_, v)) if *v != self.embeddings_version => Err(KbqError::StaleTripleMatrix),
            Some((k, _)) => Ok(k),
        }
    }

    pub fn triple_index(&self) -> Result<ExactScan<'_>> {
        Ok(ExactScan::new(self.triple_matrix()?))
    }
}

/// Training KB and full KB. Held-out triples are `full - training`.
#[derive(Debug, Clone, PartialEq)]
pub struct KbSplit {
    pub full: Vec<Triple>,
    pub training: Vec<Triple>,
}

impl KbSplit {
    pub fn entailment(full: Vec<Triple>) -> Self {
        Self {
            training: full.clone(),
            full,
        }
    }

    pub fn held_out(&self) -> Vec<Triple> {
        let train: HashSet<_> = self.training.iter().collect();
        self.full.iter().filter(|t| !train.contains(t)).copied().collect()
    }

    /// `training` is a subset of `full`.
    pub fn is_sound(&self) -> bool {
        let full: HashSet<_> = self.full.iter().collect();
        self.training.iter().all(|t| full.contains(t))
    }
}

/// Adjacency index for symbolic evaluation and example generation.
#[derive(Debug, Clone)]
pub struct KbIndex {
    num_entities: usize,
    num_relations: usize,
    /// Per subject: `(rel, obj)` pairs in insertion order.
    outgoing: Vec<Vec<(usize, usize)>>,
    /// Per object: `(rel, subj)` pairs in insertion order.
    incoming: Vec<Vec<(usize, usize)>>,
    facts: HashSet<Triple>,
}

impl KbIndex {
    pub fn new(triples: &[Triple], num_entities: usize, num_relations: usize) -> Self {
        let mut outgoing = vec![Vec::new(); num_entities];
        let mut incoming = vec![Vec::new(); num_entities];
        let mut facts = HashSet::with_capacity(triples.len());
        for t in triples {
            if facts.insert(*t) {
                outgoing[t.subj].push((t.rel, t.obj));
                incoming[t.obj].push((t.rel, t.subj));
            }
        }
        Self {
            num_entities,
            num_relations,
            outgoing,
            incoming,
            facts,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn outgoing(&self, subj: usize) -> &[(usize, usize)] {
        &self.outgoing[subj]
    }

    pub fn incoming(&self, obj: usize) -> &[(usize, usize)] {
        &self.incoming[obj]
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.facts.contains(t)
    }

    pub fn num_triples(&self) -> usize {
        self.facts.len()
    }
}
