//! Separable Gaussian point-spread blur.

use crate::volume::Dims3;

/// Kernel for a sigma given in voxels, truncated at 4σ (unnormalized).
fn kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (4.0 * sigma_vox).ceil() as usize;
    (0..=2 * radius)
        .map(|i| {
            let k = i as f64 - radius as f64;
            (-0.5 * k * k / (sigma_vox * sigma_vox)).exp()
        })
        .collect()
}

/// Convolves one line in place through `scratch`. Taps falling outside the
/// grid are dropped and the remaining weights renormalized to sum 1.
fn blur_line(line: &mut [f64], scratch: &mut Vec<f64>, k: &[f64]) {
    let n = line.len() as isize;
    let r = (k.len() / 2) as isize;
    scratch.clear();
    scratch.extend_from_slice(line);
    for i in 0..n {
        let (mut acc, mut wsum) = (0.0, 0.0);
        let lo = (i - r).max(0);
        let hi = (i + r).min(n - 1);
        for j in lo..=hi {
            let w = k[(j - i + r) as usize];
            acc += w * scratch[j as usize];
            wsum += w;
        }
        line[i as usize] = acc / wsum;
    }
}

/// Gaussian blur of a single 3D frame, `sigma_mm` per axis in mm; `sigma_mm = 0`
/// returns the input unchanged.
pub fn gaussian_blur(data: &[f64], dims: Dims3, voxel_mm: [f64; 3], sigma_mm: f64) -> Vec<f64> {
    let mut out = data.to_vec();
    if sigma_mm <= 0.0 {
        return out;
    }
    let [nx, ny, nz] = dims.as_array();
    let mut line = Vec::new();
    let mut scratch = Vec::new();
    for axis in 0..3 {
        let k = kernel(sigma_mm / voxel_mm[axis]);
        if k.len() == 1 {
            continue;
        }
        let (n, stride, outer): (usize, usize, Vec<usize>) = match axis {
            0 => (nx, 1, (0..ny * nz).map(|yz| yz * nx).collect()),
            1 => (
                ny,
                nx,
                (0..nz)
                    .flat_map(|z| (0..nx).map(move |x| x + nx * ny * z))
                    .collect(),
            ),
            _ => (nz, nx * ny, (0..nx * ny).collect()),
        };
        for start in outer {
            line.clear();
            line.extend((0..n).map(|i| out[start + i * stride]));
            blur_line(&mut line, &mut scratch, &k);
            for (i, v) in line.iter().enumerate() {
                out[start + i * stride] = *v;
            }
        }
    }
    out
}
