//! Class-aware query composition and the two baseline query modes.
//!
//! Class-aware queries are `W · Q^b`: a weak per-dataset basis obtained by
//! an MLP over the calibrated classifier rows, mixed by image-conditioned
//! weights regressed from the max-pooled encoder tokens.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Detector;
use crate::semantic::CalibratedClassifier;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    #[default]
    ClassAware,
    Learnable,
    TopkPixel,
}

impl QueryMode {
    pub const ALL: [QueryMode; 3] = [QueryMode::ClassAware, QueryMode::Learnable, QueryMode::TopkPixel];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::ClassAware => "class-aware",
            QueryMode::Learnable => "learnable",
            QueryMode::TopkPixel => "topk-pixel",
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QueryMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown query mode `{s}`")))
    }
}

/// `m × d_model` weak query embedding of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBasis {
    pub basis: Array2<f64>,
}

/// `k × m` image-conditioned mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixWeights {
    pub weights: Array2<f64>,
}

/// `k × d_model` queries fed to the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAwareQueries {
    pub queries: Array2<f64>,
    pub mode: QueryMode,
}

impl Detector {
    pub(crate) fn basis_on(&self, tape: &mut Tape, classifier: &CalibratedClassifier) -> Var {
        let w = tape.input(classifier.matrix.clone());
        self.mlp(tape, w, self.layout.basis_mlp)
    }

    pub(crate) fn mix_on(&self, tape: &mut Tape, tokens: Var, num_classes: usize) -> Result<Var> {
        let k = self.config.num_queries;
        let max_m = self.config.max_classes;
        if num_classes == 0 || num_classes > max_m {
            return Err(Error::Shape(format!(
                "label space of {num_classes} classes exceeds the mix-weight capacity of {max_m}"
            )));
        }
        let pooled = tape.column_max(tokens);
        let flat = self.mlp(tape, pooled, self.layout.mix_mlp);
        let grid = tape.reshape(flat, k, max_m);
        Ok(if num_classes == max_m {
            grid
        } else {
            tape.slice_cols(grid, 0, num_classes)
        })
    }

    pub(crate) fn queries_on(
        &self,
        tape: &mut Tape,
        tokens: Var,
        classifier: &CalibratedClassifier,
        mode: QueryMode,
    ) -> Result<Var> {
        match mode {
            QueryMode::ClassAware => {
                let basis = self.basis_on(tape, classifier);
                let mix = self.mix_on(tape, tokens, classifier.num_classes())?;
                Ok(tape.matmul(mix, basis))
            }
            QueryMode::Learnable => Ok(tape.param(&self.params, self.layout.learnable_queries)),
            QueryMode::TopkPixel => {
                let scores = self.token_scores(tape.value(tokens), classifier)?;
                let picked = top_k_indices(&scores, self.config.num_queries)?;
                Ok(tape.gather_rows(tokens, &picked))
            }
        }
    }

    /// `Q^b = MLP(Ŵ)`, applied row-wise.
    pub fn query_basis(&self, classifier: &CalibratedClassifier) -> Result<QueryBasis> {
        if classifier.dim() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "classifier width {} differs from embed_dim {}",
                classifier.dim(),
                self.config.embed_dim
            )));
        }
        let mut tape = Tape::new();
        let b = self.basis_on(&mut tape, classifier);
        Ok(QueryBasis {
            basis: tape.value(b).clone(),
        })
    }

    /// `W = MLP(max-pool(tokens))` reshaped to `k × m`.
    pub fn image_mix_weights(&self, tokens: &Array2<f64>, num_classes: usize) -> Result<MixWeights> {
        if tokens.nrows() == 0 {
            return Err(Error::Shape("empty feature map".into()));
        }
        if tokens.ncols() != self.config.d_model {
            return Err(Error::Shape("token width differs from d_model".into()));
        }
        let mut tape = Tape::new();
        let t = tape.input(tokens.clone());
        let w = self.mix_on(&mut tape, t, num_classes)?;
        Ok(MixWeights {
            weights: tape.value(w).clone(),
        })
    }

    /// Queries that do not come from the class-aware compositor.
    pub fn baseline_queries(
        &self,
        mode: QueryMode,
        tokens: &Array2<f64>,
        classifier: &CalibratedClassifier,
    ) -> Result<ClassAwareQueries> {
        if mode == QueryMode::ClassAware {
            return Err(Error::Config("class-aware is not a baseline query mode".into()));
        }
        let mut tape = Tape::new();
        let t = tape.input(tokens.clone());
        let q = self.queries_on(&mut tape, t, classifier, mode)?;
        Ok(ClassAwareQueries {
            queries: tape.value(q).clone(),
            mode,
        })
    }

    /// Queries for `mode` on one image's tokens.
    pub fn make_queries(
        &self,
        mode: QueryMode,
        tokens: &Array2<f64>,
        classifier: &CalibratedClassifier,
    ) -> Result<ClassAwareQueries> {
        match mode {
            QueryMode::ClassAware => {
                let basis = self.query_basis(classifier)?;
                let mix = self.image_mix_weights(tokens, classifier.num_classes())?;
                compose(&basis, &mix)
            }
            _ => self.baseline_queries(mode, tokens, classifier),
        }
    }

    /// Highest calibrated-class cosine of every token, through the class projection.
    pub fn token_scores(&self, tokens: &Array2<f64>, classifier: &CalibratedClassifier) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let t = tape.input(tokens.clone());
        let logits = self.classify_on(&mut tape, t, classifier)?;
        Ok(tape
            .value(logits)
            .rows()
            .into_iter()
            .map(|r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
            .collect())
    }
}

/// `Q^c = W · Q^b`.
pub fn compose(basis: &QueryBasis, mix: &MixWeights) -> Result<ClassAwareQueries> {
    if mix.weights.ncols() != basis.basis.nrows() {
        return Err(Error::Shape(format!(
            "mix weights have {} columns but the basis has {} rows",
            mix.weights.ncols(),
            basis.basis.nrows()
        )));
    }
    Ok(ClassAwareQueries {
        queries: mix.weights.dot(&basis.basis),
        mode: QueryMode::ClassAware,
    })
}

/// Indices of the `k` largest scores, returned in ascending index order.
/// Equal scores prefer the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Shape(format!("cannot pick {k} of {} tokens", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}
