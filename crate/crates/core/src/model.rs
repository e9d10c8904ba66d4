//! The joint model: backbone, segment graph and both heads.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::docmodel::{render_glyph_image, Document, PageImage, Vocabulary, OTHER_LABEL};
use crate::error::{Error, Result};
use crate::graphnet::{self, GraphConfig};
use crate::heads::{self, BinaryLossWeights, CrfParams, MatchMatrix, Span, TagScheme};
use crate::inference::{
    match_pairs, merge_predictions, BiLstmEncoder, CategoryMapper, ExtractionResult, InferenceConfig, LookupTable,
    MapperMode,
};
use crate::docmodel::KEY_LABEL;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub graph: GraphConfig,
    /// Off: no graph, no pair head, no pair predictions.
    pub use_kv_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            graph: GraphConfig::default(),
            use_kv_branch: true,
        }
    }
}

/// Entity categories of a corpus: every segment label except `other`,
/// sorted.
pub fn categories_from(docs: &[Document]) -> Vec<String> {
    let mut cats: Vec<String> = docs
        .iter()
        .flat_map(|d| d.segments.iter().map(|s| s.label.clone()))
        .filter(|l| l != OTHER_LABEL)
        .collect();
    cats.sort();
    cats.dedup();
    cats
}

/// Everything about a document the forward pass needs, computed once.
#[derive(Debug, Clone)]
pub struct PreparedDoc {
    pub token_ids: Vec<usize>,
    pub boxes: Array2<f64>,
    pub token_boxes: Vec<[f64; 4]>,
    pub spans: Vec<(usize, usize)>,
    pub image: Option<PageImage>,
    /// `[N*N, edge_input_dim]`, empty when the pair branch is off.
    pub edge_inputs: Array2<f64>,
    /// `labels[[k, v]] = 1` for every annotated link.
    pub pair_labels: Array2<f64>,
    pub gold_tags: Vec<usize>,
}

impl PreparedDoc {
    pub fn num_segments(&self) -> usize {
        self.spans.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.token_ids.len()
    }
}

/// Gold tags: each labelled segment is one span over all of its tokens.
pub fn gold_tags(doc: &Document, scheme: &TagScheme) -> Result<Vec<usize>> {
    let mut tags = Vec::with_capacity(doc.num_tokens());
    for seg in &doc.segments {
        let len = seg.tokens.len();
        if seg.label == OTHER_LABEL || len == 0 {
            tags.extend(std::iter::repeat_n(heads::OUTSIDE, len));
            continue;
        }
        let category = scheme.category_index(&seg.label).ok_or_else(|| Error::InvalidSegment {
            segment_id: seg.id as i64,
            reason: format!("label `{}` is not a model category", seg.label),
        })?;
        tags.extend(scheme.encode(len, &[Span { category, start: 0, end: len }])?);
    }
    Ok(tags)
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutputs {
    pub emissions: Var,
    /// `[N*N, 1]` positive-class probabilities.
    pub match_probs: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct BranchLosses {
    pub entity: Var,
    pub pair: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub matches: Option<MatchMatrix>,
    pub segment_tags: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub scheme: TagScheme,
    pub lookup: LookupTable,
    pub params: ParamStore,
}

impl Model {
    /// Initializes parameters from `seed` in a fixed order: backbone, graph,
    /// heads.
    pub fn new(config: ModelConfig, vocab: Vocabulary, scheme: TagScheme, lookup: LookupTable, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        if config.use_kv_branch {
            config.graph.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&config.backbone, vocab.len(), &mut rng, &mut params);
        let d = config.backbone.embed_dim;
        if config.use_kv_branch {
            graphnet::init_params(&config.graph, d, &mut rng, &mut params);
        }
        heads::init_params(d, config.graph.d_edge, scheme.num_tags(), &mut rng, &mut params);
        if !config.use_kv_branch {
            for name in ["heads/match/w1", "heads/match/b1", "heads/match/w2", "heads/match/b2"] {
                params.remove(name);
            }
        }
        Ok(Self {
            config,
            vocab,
            scheme,
            lookup,
            params,
        })
    }

    /// Vocabulary, categories and key lookup table all taken from `docs`.
    pub fn from_corpus(config: ModelConfig, docs: &[Document], seed: u64) -> Result<Self> {
        let vocab = Vocabulary::build(docs, config.backbone.min_freq)?;
        let scheme = TagScheme::new(categories_from(docs));
        Self::new(config, vocab, scheme, LookupTable::from_documents(docs), seed)
    }

    pub fn prepare(&self, doc: &Document) -> Result<PreparedDoc> {
        let n = doc.segments.len();
        let image = match (&doc.image, self.config.backbone.use_visual) {
            (_, false) => None,
            (Some(img), true) => Some(img.clone()),
            (None, true) => Some(render_glyph_image(doc, self.config.backbone.image_scale)),
        };
        let edge_inputs = if self.config.use_kv_branch {
            graphnet::edge_inputs(doc, self.config.graph.use_num2vec)?
        } else {
            Array2::zeros((0, 0))
        };
        let mut pair_labels = Array2::zeros((n, n));
        for link in doc.links() {
            pair_labels[[link.key, link.value]] = 1.0;
        }
        Ok(PreparedDoc {
            token_ids: self.vocab.ids(doc),
            boxes: backbone::normalized_boxes(doc),
            token_boxes: doc.tokens().map(|t| t.bbox.as_array()).collect(),
            spans: doc.token_spans(),
            image,
            edge_inputs,
            pair_labels,
            gold_tags: gold_tags(doc, &self.scheme)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, prep: &PreparedDoc) -> Result<ForwardOutputs> {
        let cfg = &self.config.backbone;
        let text = backbone::embed_tokens(tape, params, &prep.token_ids);
        let pos = backbone::embed_positions(tape, params, &prep.boxes);
        let visual = backbone::embed_visual(tape, params, cfg, prep.image.as_ref(), &prep.token_boxes)?;
        let fused = backbone::fuse_qkv(tape, params, text, pos, visual)?;
        let ctx = backbone::self_attention_context(tape, params, cfg, fused, &prep.spans);
        let emissions = heads::bioes_logits(tape, params, ctx.features);
        let match_probs = if self.config.use_kv_branch {
            let graph = graphnet::init_graph(tape, params, &ctx, &prep.edge_inputs)?;
            let graph = graphnet::run_gnn(tape, params, &self.config.graph, graph);
            let logits = heads::edge_logits(tape, params, graph.edges);
            Some(heads::match_probabilities(tape, logits))
        } else {
            None
        };
        Ok(ForwardOutputs {
            emissions,
            match_probs,
        })
    }

    pub fn losses(
        &self,
        tape: &mut Tape,
        params: &Bound,
        prep: &PreparedDoc,
        out: &ForwardOutputs,
        weights: BinaryLossWeights,
    ) -> Result<BranchLosses> {
        let entity = heads::crf_nll_node(tape, params, out.emissions, &prep.spans, &prep.gold_tags)?;
        let pair = match out.match_probs {
            Some(p) => Some(heads::pair_loss_node(tape, p, &prep.pair_labels, weights)?),
            None => None,
        };
        Ok(BranchLosses { entity, pair })
    }

    pub fn predict(&self, prep: &PreparedDoc) -> Result<Prediction> {
        let n = prep.num_segments();
        if prep.num_tokens() == 0 {
            return Ok(Prediction {
                matches: self
                    .config
                    .use_kv_branch
                    .then(|| MatchMatrix::new(Array2::zeros((n, n))))
                    .transpose()?,
                segment_tags: vec![Vec::new(); n],
            });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, prep)?;
        let crf = CrfParams::from_store(&self.params);
        let segment_tags = heads::decode_tags(tape.value(out.emissions), &prep.spans, &crf)?;
        let matches = match out.match_probs {
            Some(p) => Some(MatchMatrix::from_pair_column(tape.value(p), n)?),
            None => None,
        };
        Ok(Prediction {
            matches,
            segment_tags,
        })
    }
}

/// Merged output of both branches for one document.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub prediction: Prediction,
    pub result: ExtractionResult,
}

impl Model {
    /// Key mapper for `cfg.mapper`. The semantic mapper compares against
    /// every category except the key role, encoding with this model's
    /// token embeddings.
    pub fn mapper(&self, cfg: &InferenceConfig) -> Result<CategoryMapper> {
        Ok(match cfg.mapper {
            MapperMode::Lookup => CategoryMapper::Lookup(self.lookup.clone()),
            MapperMode::Semantic => {
                let categories: Vec<String> = self
                    .scheme
                    .categories()
                    .iter()
                    .filter(|c| c.as_str() != KEY_LABEL)
                    .cloned()
                    .collect();
                let encoder = BiLstmEncoder::new(
                    self.vocab.clone(),
                    self.params.expect("backbone/token_table").clone(),
                    cfg.semantic_hidden,
                    cfg.semantic_seed,
                )?;
                CategoryMapper::Semantic {
                    categories,
                    encoder: Box::new(encoder),
                }
            }
        })
    }

    /// Predicts, thresholds pairs and merges both branches.
    pub fn extract(&self, doc: &Document, cfg: &InferenceConfig, mapper: &CategoryMapper) -> Result<Extraction> {
        let prep = self.prepare_for_inference(doc)?;
        let prediction = self.predict(&prep)?;
        let pairs = match &prediction.matches {
            Some(m) => match_pairs(m, cfg.threshold)?,
            None => Vec::new(),
        };
        let result = merge_predictions(doc, &pairs, &prediction.segment_tags, &self.scheme, mapper, cfg.label_scheme)?;
        Ok(Extraction { prediction, result })
    }

    /// Like [`Model::prepare`] but tolerates labels outside the model's
    /// categories, which only affect training targets.
    pub fn prepare_for_inference(&self, doc: &Document) -> Result<PreparedDoc> {
        let mut unlabelled = doc.clone();
        for seg in &mut unlabelled.segments {
            seg.label = OTHER_LABEL.into();
        }
        self.prepare(&unlabelled)
    }
}
