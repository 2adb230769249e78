//! Contrastive scoring against the 30 captions of a driving context: the
//! noisier the image embedding, the flatter the distribution and the more
//! often the top caption is a near-synonym of the true one.

use mentor_drive::env::{Command, SpeedBin};
use mentor_drive::mentor::EmbeddingModel;
use mentor_drive::shaping::{margin, score, Context, Lateral, Longitudinal, NeighborSets, PromptLibrary, SemanticAction};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let embedder = EmbeddingModel::new(64, 0.7, 0)?;
    let library = PromptLibrary::build(&embedder)?;
    let neighbors = NeighborSets::intensity_variants();
    let ctx = Context::new(Command::TurnLeft, SpeedBin::Moderate);
    let truth = SemanticAction::new(Longitudinal::Braking, Lateral::TurningLeft);
    println!("{} captions, dim {}", library.entries().len(), library.dim());
    println!("true caption: \"{}\"", library.entry(ctx, truth).text);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for sigma in [0.0, 1.0, 1.5, 1.75, 2.0, 2.5] {
        let img = embedder.embed_image(ctx, truth, sigma, &mut rng);
        let p = score(&library, &img, ctx, 100.0)?;
        let mut ranked: Vec<usize> = (0..p.len()).collect();
        ranked.sort_by(|a, b| p[*b].total_cmp(&p[*a]));
        println!("\nsigma {sigma}: p(true) {:.3}, margin {:.3}", p[truth.index()], margin(&p, truth, &neighbors)?);
        for &i in ranked.iter().take(3) {
            let a = SemanticAction::from_index(i);
            let tag = if a == truth { "true" } else if neighbors.contains(truth, a) { "neighbor" } else { "" };
            println!("  {:.3}  {:<44} {tag}", p[i], library.entry(ctx, a).text);
        }
    }
    Ok(())
}
