//! Semantic supervisors: embeddings of rendered frames.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::render::RenderedFrame;
use crate::tensor::Tensor;

/// Pooled grid side per view for the mock embedder.
pub const MOCK_POOL: usize = 8;
pub const MOCK_VIEWS: usize = 3;
pub const MOCK_WIDTH: usize = MOCK_VIEWS * MOCK_POOL * MOCK_POOL;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticEmbedding {
    pub vector: Vec<f64>,
    pub backend_id: String,
}

impl SemanticEmbedding {
    pub fn width(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub q1: String,
    /// Second question; `[answer1]` is replaced by the first answer.
    pub q2_template: String,
}

pub const ANSWER_SLOT: &str = "[answer1]";

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            q1: "Where are the hands of the character?".into(),
            q2_template: "[answer1] What is the character in the image doing?".into(),
        }
    }
}

impl PromptTemplate {
    pub fn second_question(&self, answer1: &str) -> String {
        self.q2_template.replace(ANSWER_SLOT, answer1)
    }
}

/// Anything that maps a rendered frame to a fixed-width embedding.
pub trait SemanticBackend: Send + Sync {
    fn backend_id(&self) -> String;

    fn embed(&self, frame: &RenderedFrame) -> Result<SemanticEmbedding>;

    /// Backends usable inside training expose a tape op.
    fn as_differentiable(&self) -> Option<&dyn DifferentiableEmbedder> {
        None
    }
}

pub trait DifferentiableEmbedder: Send + Sync {
    /// Images `[F, C, H, W]` → embeddings `[F, K]`.
    fn embed_op(&self, g: &mut Graph, images: Var) -> Result<Var>;
}

/// Deterministic stand-in: each view average-pooled to 8×8, views concatenated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MockEmbedder;

impl MockEmbedder {
    fn check(shape: &[usize]) -> Result<(usize, usize, usize)> {
        let [f, c, h, w] = shape else {
            return Err(Error::ShapeMismatch(format!("mock embedder needs [F, C, H, W], got {shape:?}")));
        };
        if *c != MOCK_VIEWS {
            return Err(Error::ShapeMismatch(format!("mock embedder needs {MOCK_VIEWS} views, got {c}")));
        }
        if h % MOCK_POOL != 0 || w % MOCK_POOL != 0 {
            return Err(Error::ShapeMismatch(format!("image size {h}×{w} is not divisible by {MOCK_POOL}")));
        }
        Ok((*f, *h, *w))
    }
}

impl DifferentiableEmbedder for MockEmbedder {
    fn embed_op(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let v = g.value(images);
        let (frames, h, w) = Self::check(v.shape())?;
        let (bh, bw) = (h / MOCK_POOL, w / MOCK_POOL);
        let inv = 1.0 / (bh * bw) as f64;
        let cell = move |py: usize, px: usize| (py / bh) * MOCK_POOL + px / bw;
        let mut out = vec![0.0; frames * MOCK_WIDTH];
        for (img_idx, img) in v.data().chunks_exact(h * w).enumerate() {
            let base = img_idx * MOCK_POOL * MOCK_POOL;
            for py in 0..h {
                for px in 0..w {
                    out[base + cell(py, px)] += img[py * w + px] * inv;
                }
            }
        }
        Ok(g.custom(
            Tensor::new([frames, MOCK_WIDTH], out),
            &[images],
            Box::new(move |grad, p, _| {
                let mut d = vec![0.0; p[0].len()];
                for (img_idx, img) in d.chunks_exact_mut(h * w).enumerate() {
                    let base = img_idx * MOCK_POOL * MOCK_POOL;
                    for py in 0..h {
                        for px in 0..w {
                            img[py * w + px] = grad.data()[base + cell(py, px)] * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(p[0].shape().to_vec(), d))]
            }),
        ))
    }
}

impl SemanticBackend for MockEmbedder {
    fn backend_id(&self) -> String {
        "mock-pool8".into()
    }

    fn embed(&self, frame: &RenderedFrame) -> Result<SemanticEmbedding> {
        let images = stack_views(frame)?;
        let mut g = Graph::new();
        let x = g.constant(images);
        let e = self.embed_op(&mut g, x)?;
        Ok(SemanticEmbedding {
            vector: g.value(e).data().to_vec(),
            backend_id: self.backend_id(),
        })
    }

    fn as_differentiable(&self) -> Option<&dyn DifferentiableEmbedder> {
        Some(self)
    }
}

/// `[1, C, H, W]` from a rendered frame.
pub fn stack_views(frame: &RenderedFrame) -> Result<Tensor> {
    let first = frame
        .images
        .first()
        .ok_or_else(|| Error::ShapeMismatch("rendered frame has no views".into()))?;
    let s = first.shape().to_vec();
    let mut data = Vec::with_capacity(frame.images.len() * first.len());
    for img in &frame.images {
        if img.shape() != s {
            return Err(Error::ShapeMismatch("views differ in image size".into()));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new([1, frame.images.len(), s[0], s[1]], data))
}
