// SPDX-License-Identifier: MIT OR Apache-2.0

//! Blends the noise half of a K/V tensor toward its source half and shows the
//! distance to the source shrinking by exactly `1 - alpha`.

use attnedit::hook::{Band, ProjKind, ProjSite};
use attnedit::numerics::TensorF;
use attnedit::ops::{kv_inject, KvInject};
use attnedit::text::gaussian_vec;

fn main() -> attnedit::Result<()> {
    let (half, d) = (4, 8);
    let x = TensorF::new([1, 2 * half, d], gaussian_vec(7, 2 * half * d, 1.0))?;
    let site = ProjSite::new(0, ProjKind::ImgK);
    let dist = |t: &TensorF| -> f64 {
        let (noise, source) = t.data().split_at(half * d);
        noise.iter().zip(source).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>().sqrt()
    };
    println!("alpha  dist_to_source  ratio");
    for alpha in [0.0, 0.3, 0.5, 0.75, 1.0] {
        let spec = KvInject { alpha, band: Band::new(0..1, 0..1) };
        let out = kv_inject(site, 0, x.clone(), &spec, half)?;
        println!("{alpha:<5}  {:<14.6}  {:.4}", dist(&out), dist(&out) / dist(&x));
    }
    Ok(())
}
