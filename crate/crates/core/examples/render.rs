//! Splits one toy domain into identity roles and renders a few images of
//! one identity as PPM files.
//!
//! ```text
//! cargo run --example render -- /tmp/vtbr-render
//! ```

use std::path::PathBuf;

use vtbr::scene::{category_regions, make_split, render_image, ImageTensor, RenderConfig, SplitConfig};
use vtbr::toy::{generate_population, toy_schema, PopulationConfig};

fn to_ppm(image: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                out.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "render-out".into()));
    std::fs::create_dir_all(&dir)?;
    let schema = toy_schema();
    let render = RenderConfig::default();
    let (domain, records) = generate_population(&schema, &PopulationConfig::default(), 0)?.remove(0);
    let split = SplitConfig {
        pretrain_fraction: 0.5,
        ..Default::default()
    };
    let manifest = make_split(&records, &split, 0, &domain)?;
    println!(
        "identities: {} pretraining, {} training, {} test",
        manifest.pretrain_identities(&records).len(),
        manifest.train_identities(&records).len(),
        manifest.test_identities(&records).len()
    );
    println!(
        "images: {} pretraining, {} training, {} query, {} gallery",
        manifest.pretrain.len(),
        manifest.train.len(),
        manifest.query.len(),
        manifest.gallery.len()
    );
    for (name, rect) in category_regions(&schema, &render) {
        println!("  region {name:<13} {rect:?}");
    }

    let first = manifest.query[0];
    let id = records[first.record].identity_id;
    for r in manifest.all_refs().filter(|r| records[r.record].identity_id == id) {
        let image = render_image(&records[r.record], r.render_seed(0), &schema, &render)?;
        let path = dir.join(format!("id{id}_cam{}_{}.ppm", records[r.record].camera_id, r.seed));
        std::fs::write(&path, to_ppm(&image))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
