//! The spam-detection network and its losses.
//!
//! Reviews are encoded twice by multi-attention units, once conditioned
//! on the author and once on the product. Each sentence vector is split
//! into components parallel and orthogonal to the entity embedding; the
//! parallel parts average into entity representations, the orthogonal
//! parts fuse into a review vector that feeds the classifier. A
//! translation-on-hyperplane ranking loss ties the user, review, and
//! product representations together.

mod loss;
mod network;

pub use loss::{
    classification_loss, overall_loss, sample_negatives, transh_distance, transh_loss,
    LossTerms, Triplet,
};
pub use network::{
    classify, entity_representations, fau_fuse, forward, mau_sentence, orthogonal_decompose,
    ForwardTrace, WindowAttention,
};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{DenseTensor, Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid hyperparameter: {reason}")]
    BadHyper { reason: String },
    #[error("hyperplane normal must be unit length, got norm {norm}")]
    NonUnitHyperplane { norm: f64 },
    #[error("sentence has no unmasked tokens")]
    EmptySentence,
    #[error("review has no unmasked sentences")]
    NoSentences,
    #[error("ranking loss needs at least one negative triplet")]
    EmptyNegatives,
    #[error("loss over an empty batch")]
    EmptyBatch,
    #[error("unknown parameter {name:?}")]
    MissingParam { name: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which entity conditions an encoding pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Product,
}

impl Side {
    fn tag(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Product => "prod",
        }
    }
}

/// Architecture-shaping settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    /// Embedding width.
    pub d: usize,
    /// Attention units per side.
    pub m: usize,
    /// Context radius: each word attends over 2r+1 neighbours.
    pub r: usize,
    /// Weight of the ranking loss in the training objective.
    pub beta: f64,
    /// Sentence rows per review grid.
    pub l: usize,
    /// Token columns per sentence row.
    pub t: usize,
}

impl HyperParams {
    pub fn new(d: usize, m: usize, r: usize, beta: f64, l: usize, t: usize) -> Result<Self> {
        let fail = |reason: &str| {
            Err(ModelError::BadHyper {
                reason: reason.to_string(),
            })
        };
        if d < 2 {
            return fail("d must be at least 2");
        }
        if m < 1 {
            return fail("m must be at least 1");
        }
        if r < 1 {
            return fail("r must be at least 1");
        }
        if !(beta >= 0.0) {
            return fail("beta must be nonnegative");
        }
        if l < 1 || t < 1 {
            return fail("grid bounds L and T must be at least 1");
        }
        Ok(HyperParams { d, m, r, beta, l, t })
    }
}

/// Embedding table row counts, fixed by the training vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabSizes {
    pub n_tokens: usize,
    pub n_users: usize,
    pub n_products: usize,
}

/// Every learnable tensor, keyed by a stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, DenseTensor>,
    d: usize,
    m: usize,
    sizes: VocabSizes,
}

impl ModelParams {
    /// Fresh parameters: weight matrices get uniform Glorot draws, biases
    /// start at zero, embeddings are small Gaussians, and the hyperplane
    /// normal is unit length. Deterministic given `seed`.
    pub fn init(hp: &HyperParams, sizes: VocabSizes, seed: u64) -> Result<Self> {
        if sizes.n_tokens < 2 || sizes.n_users < 1 || sizes.n_products < 1 {
            return Err(ModelError::BadHyper {
                reason: "vocabulary sizes must be positive".to_string(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid stddev");
        let d = hp.d;

        let mut tensors = BTreeMap::new();
        let embed = |tensors: &mut BTreeMap<String, DenseTensor>,
                         rng: &mut ChaCha8Rng,
                         name: &str,
                         rows: usize| {
            let data: Vec<f64> = (0..rows * d).map(|_| normal.sample(rng)).collect();
            tensors.insert(
                name.to_string(),
                DenseTensor::new(vec![rows, d], data).expect("shape/data agree"),
            );
        };
        let glorot = |tensors: &mut BTreeMap<String, DenseTensor>,
                          rng: &mut ChaCha8Rng,
                          name: &str,
                          rows: usize,
                          cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
            tensors.insert(
                name.to_string(),
                DenseTensor::new(vec![rows, cols], data).expect("shape/data agree"),
            );
        };

        embed(&mut tensors, &mut rng, "word_emb", sizes.n_tokens);
        embed(&mut tensors, &mut rng, "user_emb", sizes.n_users);
        embed(&mut tensors, &mut rng, "prod_emb", sizes.n_products);
        for side in [Side::User, Side::Product] {
            for k in 0..hp.m {
                glorot(&mut tensors, &mut rng, &format!("mau_Wx.{}.{k}", side.tag()), d, d);
                glorot(&mut tensors, &mut rng, &format!("mau_We.{}.{k}", side.tag()), d, d);
            }
            glorot(&mut tensors, &mut rng, &format!("sent_Wv.{}", side.tag()), 2 * d, d);
            tensors.insert(format!("sent_b.{}", side.tag()), DenseTensor::zeros(1, d));
        }
        glorot(&mut tensors, &mut rng, "fau_Wu", d, d);
        glorot(&mut tensors, &mut rng, "fau_Wp", d, d);
        glorot(&mut tensors, &mut rng, "fuse_W", 2 * d, d);
        glorot(&mut tensors, &mut rng, "cls_Wd", d, d);
        tensors.insert("cls_bd".to_string(), DenseTensor::zeros(1, d));
        glorot(&mut tensors, &mut rng, "cls_Wc", d, 2);

        let mut w: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            w[0] = 1.0;
        } else {
            for x in &mut w {
                *x /= norm;
            }
        }
        tensors.insert(
            "transh_wd".to_string(),
            DenseTensor::new(vec![1, d], w).expect("shape/data agree"),
        );

        Ok(ModelParams {
            tensors,
            d,
            m: hp.m,
            sizes,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sizes(&self) -> VocabSizes {
        self.sizes
    }

    pub fn get(&self, name: &str) -> Result<&DenseTensor> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingParam {
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseTensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam {
                name: name.to_string(),
            })
    }

    /// Name-sorted view of all tensors.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|n| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Rebuilds a parameter set from named tensors (checkpoint loading).
    pub fn from_tensors(
        tensors: BTreeMap<String, DenseTensor>,
        d: usize,
        m: usize,
        sizes: VocabSizes,
    ) -> Self {
        ModelParams { tensors, d, m, sizes }
    }

    /// Zeroes both entity embedding tables. With frozen entity tables
    /// this ablates every identity-dependent pathway.
    pub fn zero_entities(&mut self) {
        for name in ["user_emb", "prod_emb"] {
            if let Some(t) = self.tensors.get_mut(name) {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// True if every coordinate of every tensor is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    /// Registers every tensor on a fresh tape, in name order.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.tensors {
            let id = tape.param(name, tensor.clone())?;
            ids.insert(name.clone(), id);
        }
        Ok(BoundParams { ids, m: self.m })
    }

    /// Registers every tensor as a constant instead of a parameter.
    /// Forward passes work as usual but nothing feeds the backward sweep,
    /// which keeps inference-only tapes cheap.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.tensors {
            ids.insert(name.clone(), tape.constant(tensor.clone()));
        }
        BoundParams { ids, m: self.m }
    }

    /// Wraps already-registered tape handles in this parameter set's
    /// layout, for harnesses that manage tape registration themselves.
    pub fn rebind(&self, ids: &BTreeMap<String, TensorId>) -> BoundParams {
        BoundParams { ids: ids.clone(), m: self.m }
    }
}

/// Tape handles for one bound parameter set.
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
    m: usize,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam {
                name: name.to_string(),
            })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn word_emb(&self) -> Result<TensorId> {
        self.id("word_emb")
    }

    pub fn entity_emb(&self, side: Side) -> Result<TensorId> {
        match side {
            Side::User => self.id("user_emb"),
            Side::Product => self.id("prod_emb"),
        }
    }

    pub fn mau_wx(&self, side: Side, unit: usize) -> Result<TensorId> {
        self.id(&format!("mau_Wx.{}.{unit}", side.tag()))
    }

    pub fn mau_we(&self, side: Side, unit: usize) -> Result<TensorId> {
        self.id(&format!("mau_We.{}.{unit}", side.tag()))
    }

    pub fn sent_wv(&self, side: Side) -> Result<TensorId> {
        self.id(&format!("sent_Wv.{}", side.tag()))
    }

    pub fn sent_b(&self, side: Side) -> Result<TensorId> {
        self.id(&format!("sent_b.{}", side.tag()))
    }

    pub fn fau_wu(&self) -> Result<TensorId> {
        self.id("fau_Wu")
    }

    pub fn fau_wp(&self) -> Result<TensorId> {
        self.id("fau_Wp")
    }

    pub fn fuse_w(&self) -> Result<TensorId> {
        self.id("fuse_W")
    }

    pub fn cls_wd(&self) -> Result<TensorId> {
        self.id("cls_Wd")
    }

    pub fn cls_bd(&self) -> Result<TensorId> {
        self.id("cls_bd")
    }

    pub fn cls_wc(&self) -> Result<TensorId> {
        self.id("cls_Wc")
    }

    pub fn transh_wd(&self) -> Result<TensorId> {
        self.id("transh_wd")
    }
}
