//! Graph-convolutional classifier and line locator. A trainable embedding
//! table stands in for the pretrained encoder.
//!
//! Layout (features as rows, one row per token):
//!
//! ```text
//! H⁰      = E[ids]                       (n × embed_dim)
//! H¹      = H⁰ · W_in                    (n × gcn_dim)
//! Hᵏ⁺¹    = Hᵏ + ReLU(Â · Hᵏ · Wᵏ)
//! F_R     = mean(H⁰) · W_in
//! F_GCN   = mean(Hᴺ)
//! F_E     = κ·F_R + λ·F_GCN
//! logits  = F_E · W_cls + b_cls
//! loc     = sigmoid(F_E · W_loc + b_loc)
//! ```
//!
//! Means run over non-PAD rows. Computation is restricted to the non-PAD
//! block since PAD rows of `Â` are zero and never reach the pooled vectors.

use std::fs;
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use crate::corpus::{CweCatalog, FunctionRecord, BINARY_VULN_LABEL};
use crate::error::{Error, Result};
use crate::kv;
use crate::lexer::{encode, tokenize, TokenStream, Vocabulary, MAX_TOKENS, PAD_ID};
use crate::svg::{build_graph_with, EdgeFamilies, SparseAdjacency};
use crate::tensor::{fuse_values, init, softmax, Matrix, NodeId, ParamId, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Benign plus one class per catalog CWE.
    Multiclass,
    /// Benign versus vulnerable; class 1 is vulnerable.
    Binary,
}

impl LabelMode {
    pub fn num_classes(self) -> usize {
        match self {
            LabelMode::Multiclass => CweCatalog::standard().len() + 1,
            LabelMode::Binary => 2,
        }
    }

    pub fn from_num_classes(n: usize) -> Result<Self> {
        match n {
            2 => Ok(LabelMode::Binary),
            n if n == LabelMode::Multiclass.num_classes() => Ok(LabelMode::Multiclass),
            _ => Err(Error::Config(format!("num_classes must be 2 or 11, got {n}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::Multiclass => "multiclass",
            LabelMode::Binary => "binary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(LabelMode::Multiclass),
            "binary" => Ok(LabelMode::Binary),
            _ => Err(Error::Config(format!(
                "label_mode must be multiclass or binary, got `{s}`"
            ))),
        }
    }

    pub fn class_of(self, record: &FunctionRecord) -> Result<usize> {
        let Some(cwe) = &record.cwe else { return Ok(0) };
        match self {
            LabelMode::Binary => Ok(1),
            LabelMode::Multiclass => {
                let catalog = CweCatalog::standard();
                catalog.class_index(cwe).ok_or_else(|| Error::UnknownCwe {
                    id: cwe.clone(),
                    valid: catalog.entries().iter().map(|e| e.id).collect::<Vec<_>>().join(", "),
                })
            }
        }
    }

    /// CWE identifier (or the binary label) of a class; `None` for benign.
    pub fn label(self, class: usize) -> Option<&'static str> {
        match (self, class) {
            (_, 0) => None,
            (LabelMode::Binary, _) => Some(BINARY_VULN_LABEL),
            (LabelMode::Multiclass, c) => CweCatalog::standard().by_class(c).map(|e| e.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub gcn_dim: usize,
    pub gcn_layers: usize,
    pub num_classes: usize,
    pub kappa: f64,
    pub lambda: f64,
    pub edges: EdgeFamilies,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 4,
            embed_dim: 768,
            gcn_dim: 512,
            gcn_layers: 2,
            num_classes: LabelMode::Multiclass.num_classes(),
            kappa: 0.5,
            lambda: 0.5,
            edges: EdgeFamilies::default(),
        }
    }
}

pub fn check_ensemble(kappa: f64, lambda: f64) -> Result<()> {
    let ok = kappa >= 0.0 && lambda >= 0.0 && (kappa + lambda - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(Error::EnsembleWeights { kappa, lambda })
    }
}

impl ModelConfig {
    pub fn label_mode(&self) -> LabelMode {
        LabelMode::from_num_classes(self.num_classes).unwrap_or(LabelMode::Multiclass)
    }

    pub fn validate(&self) -> Result<()> {
        check_ensemble(self.kappa, self.lambda)?;
        LabelMode::from_num_classes(self.num_classes)?;
        if self.gcn_layers == 0 {
            return Err(Error::Config("gcn_layers must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.gcn_dim == 0 {
            return Err(Error::Config("embed_dim and gcn_dim must be positive".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the reserved tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "vocab_size={}\nembed_dim={}\ngcn_dim={}\ngcn_layers={}\nnum_classes={}\nkappa={}\nlambda={}\n\
             edge_sequential={}\nedge_control={}\nedge_data={}\nedge_poacher={}\n",
            self.vocab_size,
            self.embed_dim,
            self.gcn_dim,
            self.gcn_layers,
            self.num_classes,
            self.kappa,
            self.lambda,
            self.edges.sequential,
            self.edges.control,
            self.edges.data,
            self.edges.poacher,
        )
    }

    /// Applies one `key=value` setting; returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        match key {
            "vocab_size" => self.vocab_size = kv::value(key, raw)?,
            "embed_dim" => self.embed_dim = kv::value(key, raw)?,
            "gcn_dim" => self.gcn_dim = kv::value(key, raw)?,
            "gcn_layers" => self.gcn_layers = kv::value(key, raw)?,
            "num_classes" => self.num_classes = kv::value(key, raw)?,
            "kappa" => self.kappa = kv::value(key, raw)?,
            "lambda" => self.lambda = kv::value(key, raw)?,
            "edge_sequential" => self.edges.sequential = kv::flag(key, raw)?,
            "edge_control" => self.edges.control = kv::flag(key, raw)?,
            "edge_data" => self.edges.data = kv::flag(key, raw)?,
            "edge_poacher" => self.edges.poacher = kv::flag(key, raw)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in kv::parse(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!("unknown model key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A function prepared for the network: encoded ids, graph operator, labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub stream: TokenStream,
    /// Full 512-long id sequence.
    pub ids: Vec<usize>,
    pub adjacency: Arc<SparseAdjacency>,
    pub line_count: usize,
    pub class: usize,
    pub vul_lines: Option<(usize, usize)>,
}

impl Sample {
    pub fn from_source(id: &str, source: &str, vocab: &Vocabulary, edges: EdgeFamilies) -> Result<Self> {
        let stream = tokenize(source)?;
        let graph = build_graph_with(&stream, edges)?;
        Ok(Sample {
            id: id.to_string(),
            ids: encode(&stream, vocab),
            adjacency: graph.shared_adjacency(),
            line_count: crate::corpus::line_count(source).max(1),
            stream,
            class: 0,
            vul_lines: None,
        })
    }

    pub fn from_record(
        record: &FunctionRecord,
        vocab: &Vocabulary,
        mode: LabelMode,
        edges: EdgeFamilies,
    ) -> Result<Self> {
        let mut s = Self::from_source(&record.id, &record.source, vocab, edges)?;
        s.class = mode.class_of(record)?;
        s.vul_lines = record.vul_lines();
        Ok(s)
    }

    pub fn content_len(&self) -> usize {
        self.stream.content_len()
    }

    /// Normalized `(start, end)` fractions, `(line − 0.5) / line_count`.
    pub fn loc_target(&self) -> Option<[f64; 2]> {
        let lc = self.line_count as f64;
        self.vul_lines
            .map(|(s, e)| [(s as f64 - 0.5) / lc, (e as f64 - 0.5) / lc])
    }
}

pub fn prepare_samples(records: &[&FunctionRecord], vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let mode = cfg.label_mode();
    records
        .iter()
        .map(|r| Sample::from_record(r, vocab, mode, cfg.edges))
        .collect()
}

/// Maps fractions back to 1-based lines: `round(f·lc + 0.5)` with ties to
/// even, clamped to `[1, lc]`, swapped if reversed.
pub fn denormalize_lines(loc: [f64; 2], line_count: usize) -> (usize, usize) {
    let lc = line_count.max(1);
    let to_line = |f: f64| {
        let v = (f * lc as f64 + 0.5).round_ties_even();
        if v.is_nan() || v < 1.0 {
            1
        } else if v > lc as f64 {
            lc
        } else {
            v as usize
        }
    };
    let (s, e) = (to_line(loc[0]), to_line(loc[1]));
    if s > e {
        (e, s)
    } else {
        (s, e)
    }
}

/// `κ·F_R + λ·F_GCN`; errors unless κ, λ ≥ 0 and κ + λ = 1.
pub fn fuse(f_r: &[f64], f_gcn: &[f64], kappa: f64, lambda: f64) -> Result<Vec<f64>> {
    check_ensemble(kappa, lambda)?;
    if f_r.len() != f_gcn.len() {
        return Err(Error::Shape {
            op: "fuse",
            left: (1, f_r.len()),
            right: (1, f_gcn.len()),
        });
    }
    Ok(fuse_values(f_r, f_gcn, kappa, lambda))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub class_logits: Vec<f64>,
    pub loc_pred: [f64; 2],
    pub f_r: Vec<f64>,
    pub f_gcn: Vec<f64>,
    pub f_e: Vec<f64>,
}

impl ForwardOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.class_logits)
    }

    /// Argmax class, lowest index on ties; `0` means no vulnerability.
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.class_logits.iter().enumerate() {
            if v > self.class_logits[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub f_r: NodeId,
    pub f_gcn: NodeId,
    pub f_e: NodeId,
    pub logits: NodeId,
    pub loc: NodeId,
}

/// What an occluded token's embedding row becomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Baseline {
    /// The PAD token's embedding.
    #[default]
    Pad,
    /// An all-zero vector.
    Zero,
}

impl Baseline {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pad" => Ok(Baseline::Pad),
            "zero" => Ok(Baseline::Zero),
            _ => Err(Error::Config(format!("baseline must be pad or zero, got `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Pad => "pad",
            Baseline::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamIds {
    embedding: ParamId,
    w_in: ParamId,
    gcn: Vec<ParamId>,
    w_cls: ParamId,
    b_cls: ParamId,
    w_loc: ParamId,
    b_loc: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    ids: ParamIds,
}

fn gcn_name(layer: usize) -> String {
    format!("gcn.{layer}.weight")
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init::rng(seed);
        let mut store = ParamStore::new();
        store.add("embedding", init::normal(&mut rng, cfg.vocab_size, cfg.embed_dim, 0.02));
        store.add("w_in", init::xavier_uniform(&mut rng, cfg.embed_dim, cfg.gcn_dim));
        for layer in 0..cfg.gcn_layers {
            store.add(
                gcn_name(layer),
                init::xavier_uniform(&mut rng, cfg.gcn_dim, cfg.gcn_dim),
            );
        }
        store.add(
            "cls.weight",
            init::xavier_uniform(&mut rng, cfg.gcn_dim, cfg.num_classes),
        );
        store.add("cls.bias", Matrix::zeros(1, cfg.num_classes));
        store.add("loc.weight", init::xavier_uniform(&mut rng, cfg.gcn_dim, 2));
        store.add("loc.bias", Matrix::zeros(1, 2));
        Self::from_store(cfg, store)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let lookup = |name: &str, shape: (usize, usize)| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let got = store.value(id).shape();
            if got != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {got:?}, expected {shape:?}"
                )));
            }
            Ok(id)
        };
        let ids = ParamIds {
            embedding: lookup("embedding", (cfg.vocab_size, cfg.embed_dim))?,
            w_in: lookup("w_in", (cfg.embed_dim, cfg.gcn_dim))?,
            gcn: (0..cfg.gcn_layers)
                .map(|l| lookup(&gcn_name(l), (cfg.gcn_dim, cfg.gcn_dim)))
                .collect::<Result<_>>()?,
            w_cls: lookup("cls.weight", (cfg.gcn_dim, cfg.num_classes))?,
            b_cls: lookup("cls.bias", (1, cfg.num_classes))?,
            w_loc: lookup("loc.weight", (cfg.gcn_dim, 2))?,
            b_loc: lookup("loc.bias", (1, 2))?,
        };
        let expected = 6 + cfg.gcn_layers;
        if store.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameters, found {}",
                store.len()
            )));
        }
        Ok(Model { cfg, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn gcn_weights(&self) -> &[ParamId] {
        &self.ids.gcn
    }

    pub fn embedding_id(&self) -> ParamId {
        self.ids.embedding
    }

    pub fn loc_weight_ids(&self) -> [ParamId; 2] {
        [self.ids.w_loc, self.ids.b_loc]
    }

    pub fn set_ensemble(&mut self, kappa: f64, lambda: f64) -> Result<()> {
        check_ensemble(kappa, lambda)?;
        self.cfg.kappa = kappa;
        self.cfg.lambda = lambda;
        Ok(())
    }

    pub fn freeze(self) -> FrozenModel {
        FrozenModel { inner: Arc::new(self) }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: self.cfg.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Records the forward pass over the non-PAD block. `rows[i]` selects
    /// the embedding row for position `i` (`None` = zero vector).
    pub fn record(
        &self,
        tape: &mut Tape<'_>,
        rows: Vec<Option<usize>>,
        adjacency: &Arc<SparseAdjacency>,
    ) -> Result<ForwardNodes> {
        let n = rows.len();
        if adjacency.dim() != n {
            return Err(Error::Shape {
                op: "forward (adjacency vs active tokens)",
                left: (adjacency.dim(), adjacency.dim()),
                right: (n, self.cfg.embed_dim),
            });
        }
        let mask = vec![true; n];
        let h0 = tape.gather(self.ids.embedding, rows)?;
        let w_in = tape.param(self.ids.w_in);
        let pooled0 = tape.mean_rows(h0, mask.clone())?;
        let f_r = tape.matmul(pooled0, w_in)?;
        let mut h = tape.matmul(h0, w_in)?;
        for &w in &self.ids.gcn {
            h = self.gcn_layer(tape, h, w, adjacency)?;
        }
        let f_gcn = tape.mean_rows(h, mask)?;
        let f_e = tape.fuse(f_r, f_gcn, self.cfg.kappa, self.cfg.lambda)?;
        let (logits, loc) = self.record_heads(tape, f_e)?;
        Ok(ForwardNodes {
            f_r,
            f_gcn,
            f_e,
            logits,
            loc,
        })
    }

    fn gcn_layer(
        &self,
        tape: &mut Tape<'_>,
        h: NodeId,
        w: ParamId,
        adjacency: &Arc<SparseAdjacency>,
    ) -> Result<NodeId> {
        let w = tape.param(w);
        let ah = tape.spmm(Arc::clone(adjacency), h)?;
        let z = tape.matmul(ah, w)?;
        let r = tape.relu(z);
        tape.add(h, r)
    }

    fn record_heads(&self, tape: &mut Tape<'_>, f_e: NodeId) -> Result<(NodeId, NodeId)> {
        let w_cls = tape.param(self.ids.w_cls);
        let b_cls = tape.param(self.ids.b_cls);
        let z = tape.matmul(f_e, w_cls)?;
        let logits = tape.add_row(z, b_cls)?;
        let w_loc = tape.param(self.ids.w_loc);
        let b_loc = tape.param(self.ids.b_loc);
        let z = tape.matmul(f_e, w_loc)?;
        let z = tape.add_row(z, b_loc)?;
        Ok((logits, tape.sigmoid(z)))
    }

    fn output(tape: &Tape<'_>, nodes: &ForwardNodes) -> ForwardOutput {
        let row = |n: NodeId| tape.value(n).row(0).to_vec();
        let loc = tape.value(nodes.loc);
        ForwardOutput {
            class_logits: row(nodes.logits),
            loc_pred: [loc.get(0, 0), loc.get(0, 1)],
            f_r: row(nodes.f_r),
            f_gcn: row(nodes.f_gcn),
            f_e: row(nodes.f_e),
        }
    }

    fn active_rows(&self, sample: &Sample) -> Result<Vec<Option<usize>>> {
        let active = &sample.ids[..sample.content_len()];
        self.check_ids(active)?;
        Ok(active.iter().map(|&id| Some(id)).collect())
    }

    pub fn forward(&self, sample: &Sample) -> Result<ForwardOutput> {
        let rows = self.active_rows(sample)?;
        let mut tape = Tape::new(&self.store);
        let nodes = self.record(&mut tape, rows, &sample.adjacency)?;
        Ok(Self::output(&tape, &nodes))
    }

    /// Forward pass with the positions flagged in `occluded` (indexed over
    /// the non-PAD block) replaced by `baseline`.
    pub fn forward_occluded(&self, sample: &Sample, occluded: &[bool], baseline: Baseline) -> Result<ForwardOutput> {
        let mut rows = self.active_rows(sample)?;
        if occluded.len() != rows.len() {
            return Err(Error::Shape {
                op: "forward_occluded",
                left: (rows.len(), 1),
                right: (occluded.len(), 1),
            });
        }
        for (row, &off) in rows.iter_mut().zip(occluded) {
            if off {
                *row = match baseline {
                    Baseline::Pad => Some(PAD_ID),
                    Baseline::Zero => None,
                };
            }
        }
        let mut tape = Tape::new(&self.store);
        let nodes = self.record(&mut tape, rows, &sample.adjacency)?;
        Ok(Self::output(&tape, &nodes))
    }

    /// `MAX_TOKENS × embed_dim` lookup of a full id sequence.
    pub fn embed(&self, ids: &[usize]) -> Result<Matrix> {
        if ids.len() != MAX_TOKENS {
            return Err(Error::Shape {
                op: "embed",
                left: (ids.len(), 1),
                right: (MAX_TOKENS, 1),
            });
        }
        self.check_ids(ids)?;
        let table = self.store.value(self.ids.embedding);
        let mut out = Matrix::zeros(MAX_TOKENS, self.cfg.embed_dim);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(id));
        }
        Ok(out)
    }

    /// Masked mean of `h0` projected through `W_in`.
    pub fn f_r_path(&self, h0: &Matrix, mask: &[bool]) -> Result<Vec<f64>> {
        let pooled = h0.mean_rows(mask)?;
        Ok(pooled.matmul(self.store.value(self.ids.w_in))?.into_data())
    }

    /// Runs projection and GCN layers over a full `h0`. Rows beyond the
    /// operator's block are PAD positions: their `Â` rows are zero, so they
    /// keep the projected embedding. Returns `(Hᴺ, F_GCN)`.
    pub fn gcn_forward(&self, h0: &Matrix, adjacency: &Arc<SparseAdjacency>) -> Result<(Matrix, Vec<f64>)> {
        let n = adjacency.dim();
        if h0.cols() != self.cfg.embed_dim || h0.rows() < n {
            return Err(Error::Shape {
                op: "gcn_forward",
                left: h0.shape(),
                right: (n, self.cfg.embed_dim),
            });
        }
        let projected = h0.matmul(self.store.value(self.ids.w_in))?;
        let active = Matrix::new(n, self.cfg.gcn_dim, projected.data()[..n * self.cfg.gcn_dim].to_vec())?;
        let mut tape = Tape::new(&self.store);
        let mut h = tape.constant(active);
        for &w in &self.ids.gcn {
            h = self.gcn_layer(&mut tape, h, w, adjacency)?;
        }
        let f_gcn = tape.value(h).mean_rows(&vec![true; n])?.into_data();
        let mut full = projected;
        full.data_mut()[..n * self.cfg.gcn_dim].copy_from_slice(tape.value(h).data());
        Ok((full, f_gcn))
    }

    /// `(class_logits, loc_pred)` for a fused feature vector.
    pub fn heads(&self, f_e: &[f64]) -> Result<(Vec<f64>, [f64; 2])> {
        let mut tape = Tape::new(&self.store);
        let f = tape.constant(Matrix::row_vector(f_e.to_vec()));
        let (logits, loc) = self.record_heads(&mut tape, f)?;
        let l = tape.value(loc);
        Ok((tape.value(logits).row(0).to_vec(), [l.get(0, 0), l.get(0, 1)]))
    }
}

/// Read-only, cheaply clonable snapshot used for inference and attribution.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    inner: Arc<Model>,
}

impl Deref for FrozenModel {
    type Target = Model;

    fn deref(&self) -> &Model {
        &self.inner
    }
}

impl FrozenModel {
    /// Back to a trainable model (copies if other snapshots are alive).
    pub fn thaw(self) -> Model {
        Arc::try_unwrap(self.inner).unwrap_or_else(|arc| (*arc).clone())
    }
}

pub const PARAMS_FILE: &str = "params.txt";
pub const MODEL_CFG_FILE: &str = "model.cfg";
pub const VOCAB_FILE: &str = "vocab.tsv";

/// Writes a self-describing checkpoint directory.
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &Model, vocab: &Vocabulary) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.store.save(dir.join(PARAMS_FILE))?;
    let cfg_path = dir.join(MODEL_CFG_FILE);
    fs::write(&cfg_path, model.cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    vocab.save(dir.join(VOCAB_FILE))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model, Vocabulary)> {
    let dir = dir.as_ref();
    let cfg_path = dir.join(MODEL_CFG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = ModelConfig::from_text(&text)?;
    let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries but model expects {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let store = ParamStore::load(dir.join(PARAMS_FILE))?;
    Ok((Model::from_store(cfg, store)?, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Language;
    use crate::lexer::build_vocab;

    fn toy() -> (Model, Vocabulary, Sample) {
        let rec = FunctionRecord::vulnerable(
            "t",
            "int f(char *s) {\n  char b[4];\n  strcpy(b, s);\n  return 0;\n}\n",
            Language::C,
            "CWE-119",
            (3, 3),
        );
        let vocab = build_vocab([&rec], 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 8,
            gcn_dim: 6,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg.clone(), 7).unwrap();
        let sample = Sample::from_record(&rec, &vocab, cfg.label_mode(), cfg.edges).unwrap();
        (model, vocab, sample)
    }

    #[test]
    fn denormalize_examples() {
        assert_eq!(denormalize_lines([1e-9, 1.0 - 1e-9], 10), (1, 10));
        assert_eq!(denormalize_lines([0.5, 0.5], 1), (1, 1));
        assert_eq!(denormalize_lines([0.74, 0.25], 8), (2, 6));
        assert_eq!(denormalize_lines([f64::NAN, 2.0], 5), (1, 5));
    }

    #[test]
    fn targets_round_trip_through_denormalize() {
        for lc in 1..40 {
            for s in 1..=lc {
                let f = (s as f64 - 0.5) / lc as f64;
                assert_eq!(denormalize_lines([f, f], lc), (s, s));
            }
        }
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse(&[2.0, 0.0], &[0.0, 2.0], 0.5, 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(
            fuse(&[-0.0, 3.0], &[9.0, 9.0], 1.0, 0.0).unwrap()[0].to_bits(),
            (-0.0f64).to_bits()
        );
        assert!(fuse(&[1.0], &[1.0], 0.5, 0.6).is_err());
        assert!(fuse(&[1.0], &[1.0], -0.5, 1.5).is_err());
        assert!(fuse(&[1.0], &[1.0, 2.0], 0.5, 0.5).is_err());
    }

    #[test]
    fn model_config_text_round_trip() {
        let cfg = ModelConfig {
            vocab_size: 99,
            kappa: 0.2,
            lambda: 0.8,
            num_classes: 2,
            ..ModelConfig::default()
        };
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ModelConfig::from_text("bogus=1").is_err());
        assert!(ModelConfig::from_text("kappa=0.7\nlambda=0.7").is_err());
        assert!(ModelConfig::from_text("gcn_layers=0").is_err());
    }

    #[test]
    fn zero_heads_give_uniform_and_center() {
        let (mut model, _, sample) = toy();
        for id in [model.ids.w_cls, model.ids.b_cls, model.ids.w_loc, model.ids.b_loc] {
            model.store_mut().value_mut(id).data_mut().fill(0.0);
        }
        let out = model.forward(&sample).unwrap();
        let p = out.probabilities();
        assert!(p.iter().all(|&v| (v - 1.0 / 11.0).abs() < 1e-15));
        assert_eq!(out.loc_pred, [0.5, 0.5]);
        assert_eq!(out.predicted_class(), 0);
    }

    #[test]
    fn spec_level_api_matches_tape_forward() {
        let (model, _, sample) = toy();
        let out = model.forward(&sample).unwrap();
        let h0 = model.embed(&sample.ids).unwrap();
        assert_eq!(h0.shape(), (MAX_TOKENS, 8));
        let mask: Vec<bool> = (0..MAX_TOKENS).map(|i| i < sample.content_len()).collect();
        let f_r = model.f_r_path(&h0, &mask).unwrap();
        let (h, f_gcn) = model.gcn_forward(&h0, &sample.adjacency).unwrap();
        assert_eq!(h.shape(), (MAX_TOKENS, 6));
        for (a, b) in f_r.iter().zip(&out.f_r) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(f_gcn, out.f_gcn);
        let f_e = fuse(&f_r, &f_gcn, 0.5, 0.5).unwrap();
        let (logits, _) = model.heads(&f_e).unwrap();
        for (a, b) in logits.iter().zip(&out.class_logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gcn_weights_are_identity() {
        let (mut model, _, sample) = toy();
        for id in model.gcn_weights().to_vec() {
            model.store_mut().value_mut(id).data_mut().fill(0.0);
        }
        let h0 = model.embed(&sample.ids).unwrap();
        let (h, _) = model.gcn_forward(&h0, &sample.adjacency).unwrap();
        assert_eq!(h, h0.matmul(model.store().value(model.ids.w_in)).unwrap());
    }

    #[test]
    fn pad_embedding_does_not_leak() {
        let (mut model, _, sample) = toy();
        let before = model.forward(&sample).unwrap();
        let emb = model.embedding_id();
        model.store_mut().value_mut(emb).row_mut(PAD_ID).fill(42.0);
        assert_eq!(model.forward(&sample).unwrap(), before);
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let (model, _, mut sample) = toy();
        sample.ids[1] = 10_000;
        assert!(matches!(model.forward(&sample), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (model, vocab, sample) = toy();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &vocab).unwrap();
        let (back, v2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(v2, vocab);
        assert_eq!(back.forward(&sample).unwrap(), model.forward(&sample).unwrap());
    }

    #[test]
    fn label_modes() {
        let rec = FunctionRecord::vulnerable("x", "a;\n", Language::C, "CWE-476", (1, 1));
        assert_eq!(LabelMode::Multiclass.class_of(&rec).unwrap(), 8);
        assert_eq!(LabelMode::Binary.class_of(&rec).unwrap(), 1);
        assert_eq!(LabelMode::Binary.label(1), Some("VULN"));
        assert_eq!(LabelMode::Multiclass.label(0), None);
        let v = FunctionRecord::vulnerable("x", "a;\n", Language::C, "VULN", (1, 1));
        assert!(LabelMode::Multiclass.class_of(&v).is_err());
    }
}
