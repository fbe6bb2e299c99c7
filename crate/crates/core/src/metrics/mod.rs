//! Evaluation: FID on toy embeddings, identity similarity, BRISQUE-style
//! quality, diffusion-loss probes, and perturbation statistics.

pub mod brisque;
mod embed;
mod fid;
mod hist;
mod probe;

pub use brisque::{
    brisque_features, brisque_score, mscn, pairwise_products, CorpusStats, MscnField, PairProducts,
    Plane,
};
pub use embed::{
    ism, ism_from_embeddings, train_embedder, EmbedderConfig, EmbeddingModel, IsmScore, EMBED_DIM,
};
pub use fid::{fid, FeatureStats};
pub use hist::{
    chi_square_homogeneity, excess_kurtosis, paired_t_greater, perturbation_histogram, Histogram,
};
pub use probe::{diffusion_loss_probe, probe_grid, ProbeCurve};

use crate::diffusion::ImageBatch;
use crate::error::Result;

/// FID between two image sets in the embedder's feature space.
pub fn fid_images(gen: &ImageBatch, refs: &ImageBatch, emb: &EmbeddingModel) -> Result<f64> {
    let rows = |t: crate::numerics::Tensor| -> Vec<Vec<f64>> {
        (0..t.batch())
            .map(|i| t.item_slice(i).iter().map(|&v| v as f64).collect())
            .collect()
    };
    let g = FeatureStats::from_features(&rows(emb.embed(gen)?))?;
    let r = FeatureStats::from_features(&rows(emb.embed(refs)?))?;
    fid(&g, &r)
}

/// BRISQUE features of every image in a batch.
pub fn batch_brisque_features(images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
    let r = images.res();
    (0..images.len())
        .map(|i| brisque_features(&Plane::from_signed(r, r, images.images().item_slice(i))?))
        .collect()
}
