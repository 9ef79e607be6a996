//! Grad-CAM saliency for the captioning model: the forward caption
//! log-probability is differentiated with respect to the final feature map,
//! channels are weighted by their mean gradient, and the rectified sum is
//! normalized and upsampled to image size.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CaptionModel, Direction};
use crate::scene::{ImageTensor, Rect};
use crate::tape::{Graph, Mat};

/// Row-major heat map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Mean value inside `rect` and mean value outside it.
    pub fn region_means(&self, rect: Rect) -> (f64, f64) {
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if rect.contains(y, x) {
                    inside += self.get(y, x);
                    n_in += 1;
                } else {
                    outside += self.get(y, x);
                    n_out += 1;
                }
            }
        }
        (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64)
    }

    /// Mean inside `rect` divided by mean outside it.
    pub fn region_ratio(&self, rect: Rect) -> f64 {
        let (inside, outside) = self.region_means(rect);
        inside / outside
    }

    /// Binary 8-bit PGM.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    /// Writes `<stem>.pgm` and the raw little-endian f32 values as `<stem>.f32`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let pgm = dir.join(format!("{stem}.pgm"));
        fs::write(&pgm, self.to_pgm()).map_err(|e| Error::io(&pgm, e))?;
        let raw = dir.join(format!("{stem}.f32"));
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
    }
}

/// Bilinear resize of a `gh × gw` grid (row-major) to `h × w`, sampling at
/// pixel centres.
pub fn upsample_bilinear(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, gh);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, gw);
            let top = grid[y0 * gw + x0] * (1.0 - fx) + grid[y0 * gw + x1] * fx;
            let bottom = grid[y1 * gw + x0] * (1.0 - fx) + grid[y1 * gw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Grad-CAM combination of a `channels × cells` feature map and its gradient.
pub fn grad_cam_grid(features: &Mat, grad: &Mat) -> Vec<f64> {
    let weights = grad.mean_axis(ndarray::Axis(1)).expect("non-empty cells");
    features
        .columns()
        .into_iter()
        .map(|col| col.dot(&weights).max(0.0))
        .collect()
}

/// Saliency of `image` for the summed forward log-probability of `tokens`.
/// A map without positive evidence comes back all zero.
pub fn saliency_map(model: &CaptionModel, image: &ImageTensor, tokens: &[usize]) -> Result<SaliencyMap> {
    let positions: Vec<usize> = (1..tokens.len()).collect();
    saliency_map_for(model, image, tokens, &positions)
}

/// Like [`saliency_map`], with the target restricted to the summed
/// log-probabilities of `tokens[p]` (given everything before it) for `p` in
/// `positions`.
pub fn saliency_map_for(
    model: &CaptionModel,
    image: &ImageTensor,
    tokens: &[usize],
    positions: &[usize],
) -> Result<SaliencyMap> {
    if positions.is_empty() {
        return Err(Error::Range("no target positions".into()));
    }
    if let Some(&p) = positions.iter().find(|&&p| p == 0 || p >= tokens.len()) {
        return Err(Error::Range(format!(
            "target position {p} outside the predicted positions 1..{}",
            tokens.len()
        )));
    }
    let mut g = Graph::new(&model.params);
    let x = g.input(image.to_mat());
    let (features, gh, gw) = model.backbone.forward(&mut g, x)?;
    let memory = model.project_var(&mut g, features);
    let (logits, targets) = model.decode_var(&mut g, memory, tokens, Direction::Forward)?;
    // row i of the logits predicts tokens[i + 1]
    let mut nll = None;
    for &p in positions {
        let row = g.rows(logits, p - 1, 1);
        let term = g.cross_entropy(row, &targets[p - 1..p]);
        nll = Some(match nll {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let nll = nll.expect("positions checked non-empty");
    let grads = g.backward(&[(nll, Mat::from_elem((1, 1), -1.0))]);
    let grad = grads
        .wrt(features)
        .cloned()
        .unwrap_or_else(|| Mat::zeros(g.value(features).dim()));
    let mut cells = grad_cam_grid(g.value(features), &grad);
    let peak = cells.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        cells.iter_mut().for_each(|v| *v /= peak);
    } else {
        log::warn!("saliency target has no positive evidence; returning a zero map");
    }
    let (h, w) = (image.height, image.width);
    let mut values = upsample_bilinear(&cells, gh, gw, h, w);
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(SaliencyMap {
        height: h,
        width: w,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampling_constant_grid_is_constant() {
        let up = upsample_bilinear(&[0.5; 8], 4, 2, 16, 8);
        assert!(up.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn upsampling_keeps_the_grid_range() {
        let grid = [0.0, 1.0, 0.25, 0.75];
        let up = upsample_bilinear(&grid, 2, 2, 8, 8);
        assert!(up.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(up[0], 0.0);
        assert_eq!(up[7], 1.0);
    }

    #[test]
    fn cam_rectifies_negative_evidence() {
        let f = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = Mat::from_shape_vec((2, 2), vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        assert_eq!(grad_cam_grid(&f, &g), vec![1.0, 0.0]);
    }

    #[test]
    fn pgm_header_and_size() {
        let m = SaliencyMap {
            height: 2,
            width: 3,
            values: vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0],
        };
        let pgm = m.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[0, 128, 255, 255, 128, 0]);
    }
}
