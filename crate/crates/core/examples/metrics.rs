//! Ranking metrics on hand-made embeddings: mAP, CMC and the expected mAP of
//! a random ranking.
//!
//! ```text
//! cargo run --example metrics
//! ```

use vtbr::eval::{evaluate_embeddings, ImageMeta, Protocol};

fn main() -> vtbr::Result<()> {
    let meta = |identity, camera| ImageMeta { identity, camera };
    // three identities on a line; identity 2 sits close to identity 1
    let query = vec![vec![0.0], vec![1.0], vec![1.2]];
    let query_meta = vec![meta(0, 0), meta(1, 0), meta(2, 0)];
    let gallery = vec![
        vec![0.1],
        vec![-0.2],
        vec![1.1],
        vec![0.9],
        vec![1.15],
        vec![1.3],
        vec![0.0],
    ];
    let gallery_meta = vec![
        meta(0, 1),
        meta(0, 2),
        meta(1, 1),
        meta(1, 2),
        meta(2, 1),
        meta(2, 2),
        meta(0, 0),
    ];
    let report = evaluate_embeddings(&query, &query_meta, &gallery, &gallery_meta, Protocol::default())?;
    println!("mAP {:.4} (random ranking {:.4})", report.map, report.random_map);
    for (rank, value) in &report.cmc {
        println!("CMC@{rank}: {value:.4}");
    }
    println!("the same-camera gallery image of identity 0 is excluded as junk");
    Ok(())
}
