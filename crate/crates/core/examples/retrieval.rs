//! Prototype retrieval over a small synthetic corpus: TF-IDF index, the
//! prototype and similar-document hops, negative sampling, and a JSON round
//! trip of the index.

use dahg::retrieval::TfIdfIndex;
use dahg::synthetic::desk_fixture;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn main() -> dahg::error::Result<()> {
    let pairs = desk_fixture();
    let index = TfIdfIndex::build(&pairs)?;
    println!("indexed {} pairs", index.len());

    for pair in pairs.iter().take(3) {
        let proto = index.retrieve_prototype(pair)?;
        let similar = index.retrieve_similar_document(proto)?;
        println!("{} -> prototype {} -> similar {}", pair.id, proto.id, similar.id);
        println!("  prototype headline: {}", proto.headline.join(" "));
        // at generation time only the document is known
        let doc_only = index.retrieve_prototype_for_document(&pair.id, &pair.document)?;
        println!("  document-only query picks {}", doc_only.id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let neg = index.sample_negatives(&pairs[0].id, &mut rng)?;
    println!(
        "negatives for {}: attractive {}, unattractive {}, random doc {}",
        pairs[0].id, neg.attractive.id, neg.unattractive.id, neg.random_doc.id
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("index.json");
    index.save(&path)?;
    assert_eq!(TfIdfIndex::load(&path)?, index);
    println!("index round-trips through {}", path.display());
    Ok(())
}
