//! Applies every transform of the default space and every corruption at
//! severities 1, 3 and 5 to one synthetic image, writes them as PPM files,
//! and prints how far each moves the pixels.
//!
//! ```text
//! cargo run --release --example transforms_and_corruptions -- [out_dir]
//! ```

use std::fs;
use std::path::PathBuf;

use instance_tta::corruptions::{apply_corruption, CorruptionKind, CorruptionSpec};
use instance_tta::dataio::gen_synthetic;
use instance_tta::imgcore::{apply_transform, default_space, ppm};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| PathBuf::from("tta-gallery"), PathBuf::from);
    fs::create_dir_all(&out)?;
    let data = gen_synthetic(1, 10, 32, 3)?;
    let img = &data.images()[0];
    ppm::write_ppm(img, &out.join("original.ppm"))?;

    println!("{:<16} mean |Δ|", "transform");
    for t in default_space().transforms() {
        let moved = apply_transform(img, t)?;
        println!("{:<16} {:.4}", t.to_string(), img.mean_abs_diff(&moved)?);
        ppm::write_ppm(
            &moved,
            &out.join(format!("t_{}.ppm", t.to_string().replace(':', "_"))),
        )?;
    }

    println!(
        "\n{:<16} {:>7} {:>7} {:>7}",
        "corruption", "s=1", "s=3", "s=5"
    );
    for kind in CorruptionKind::ALL {
        let mut row = format!("{:<16}", kind.name());
        for severity in [1, 3, 5] {
            let c = apply_corruption(img, &CorruptionSpec::new(kind, severity, 11)?)?;
            row += &format!(" {:>7.4}", img.mean_abs_diff(&c)?);
            ppm::write_ppm(&c, &out.join(format!("c_{}_{severity}.ppm", kind.name())))?;
        }
        println!("{row}");
    }
    println!("\nimages written to {}", out.display());
    Ok(())
}
