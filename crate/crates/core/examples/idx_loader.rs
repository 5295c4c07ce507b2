// Writes a tiny IDX image/label pair, loads it back as a dataset in [-1, 1]
// and shows the errors raised for malformed headers.

use std::path::Path;

use sdit::data::{load_idx, parse_idx_images, unit_to_pixel, write_idx_images};
use sdit::Result;

pub fn run_example(dir: &Path) -> Result<usize> {
    let pixels: Vec<u8> = (0..3 * 4 * 4).map(|i| (i * 17 % 256) as u8).collect();
    let images = dir.join("tiny-images.idx3-ubyte");
    let labels = dir.join("tiny-labels.idx1-ubyte");
    std::fs::write(&images, write_idx_images(3, 4, &pixels)).map_err(|e| sdit::Error::io(&images, e))?;
    let mut lab = vec![0, 0, 8, 1, 0, 0, 0, 3];
    lab.extend([4, 1, 9]);
    std::fs::write(&labels, lab).map_err(|e| sdit::Error::io(&labels, e))?;

    let ds = load_idx::<f32>(&images, Some(&labels))?;
    let back: Vec<u8> = ds.images.data().iter().map(|&x| unit_to_pixel(x)).collect();
    println!(
        "{} images of {}x{}, labels {:?}, pixels round-trip: {}",
        ds.len(),
        ds.image_size(),
        ds.image_size(),
        ds.labels,
        back == pixels
    );

    let mut bad = write_idx_images(3, 4, &pixels);
    bad[2] = 0x0d;
    println!("wrong dtype byte: {}", parse_idx_images::<f32>(&bad).unwrap_err());
    let short = &write_idx_images(3, 4, &pixels)[..20];
    println!("truncated file: {}", parse_idx_images::<f32>(short).unwrap_err());
    Ok(ds.len())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example(&std::env::temp_dir())
        .map(|_| ())
}
