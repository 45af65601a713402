//! Bilinear UV-space grids.
//!
//! Node `(0, 0)` sits at uv `(0, 0)` and node `(W-1, H-1)` at `(1, 1)`.
//! A field holds a base grid and optionally `F` per-frame residual grids of
//! the same shape; a query at frame `f` adds the residual's interpolant to
//! the base before the optional range clamp.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::Vec2;

const MAGIC: &[u8; 4] = b"UVFD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct UVField {
    width: usize,
    height: usize,
    channels: usize,
    frames: usize,
    clamp: Option<(f64, f64)>,
    /// Base grid followed by the residual grids; each grid row-major with
    /// channels innermost.
    pub data: Vec<f64>,
}

/// Four grid nodes touched by a query and their bilinear weights.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    nodes: [usize; 4],
    weights: [f64; 4],
}

impl UVField {
    /// Every node of the base grid set to `constant`; residuals start at zero.
    pub fn new(width: usize, height: usize, constant: &[f64], clamp: Option<(f64, f64)>, frames: usize) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::arg(format!("field resolution {width}x{height} is below 2x2")));
        }
        if constant.is_empty() {
            return Err(Error::arg("field needs at least one channel"));
        }
        if let Some((lo, hi)) = clamp {
            if !(lo <= hi) {
                return Err(Error::arg(format!("invalid clamp range [{lo}, {hi}]")));
            }
        }
        if constant.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("field constant must be finite"));
        }
        let c = constant.len();
        let grid = width * height * c;
        let mut data = vec![0.0; grid * (1 + frames)];
        for node in data[..grid].chunks_mut(c) {
            node.copy_from_slice(constant);
        }
        Ok(UVField {
            width,
            height,
            channels: c,
            frames,
            clamp,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn clamp_range(&self) -> Option<(f64, f64)> {
        self.clamp
    }

    pub fn grid_len(&self) -> usize {
        self.width * self.height * self.channels
    }

    /// Offset into `data` of grid `g` (0 = base), node `(x, y)`, channel 0.
    #[inline]
    pub fn node_index(&self, g: usize, x: usize, y: usize) -> usize {
        ((g * self.height + y) * self.width + x) * self.channels
    }

    fn check_frame(&self, frame: usize) -> Result<Option<usize>> {
        if self.frames == 0 {
            return Ok(None);
        }
        if frame >= self.frames {
            return Err(Error::arg(format!("frame {frame} out of range for field with {} residual frames", self.frames)));
        }
        Ok(Some(frame + 1))
    }

    fn stencil(&self, uv: &Vec2, grid: usize) -> Stencil {
        let axis = |t: f64, n: usize| {
            let g = t.clamp(0.0, 1.0) * (n - 1) as f64;
            let i = (g.floor() as usize).min(n - 2);
            (i, g - i as f64)
        };
        let (x0, fx) = axis(uv.x, self.width);
        let (y0, fy) = axis(uv.y, self.height);
        Stencil {
            nodes: [
                self.node_index(grid, x0, y0),
                self.node_index(grid, x0 + 1, y0),
                self.node_index(grid, x0, y0 + 1),
                self.node_index(grid, x0 + 1, y0 + 1),
            ],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        }
    }

    fn raw_into(&self, uv: &Vec2, residual: Option<usize>, out: &mut [f64]) {
        out.fill(0.0);
        for g in std::iter::once(0).chain(residual) {
            let s = self.stencil(uv, g);
            for k in 0..4 {
                let node = &self.data[s.nodes[k]..s.nodes[k] + self.channels];
                for c in 0..self.channels {
                    out[c] += s.weights[k] * node[c];
                }
            }
        }
    }

    /// Interpolated value at `uv` (clamped to the unit square) for `frame`.
    pub fn query_into(&self, uv: &Vec2, frame: usize, out: &mut [f64]) -> Result<()> {
        if out.len() != self.channels {
            return Err(Error::arg("query output length does not match channel count"));
        }
        let residual = self.check_frame(frame)?;
        self.raw_into(uv, residual, out);
        if let Some((lo, hi)) = self.clamp {
            for v in out.iter_mut() {
                *v = v.clamp(lo, hi);
            }
        }
        Ok(())
    }

    pub fn query(&self, uv: &Vec2, frame: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.query_into(uv, frame, &mut out)?;
        Ok(out)
    }

    /// Scalar query of a one-channel field.
    pub fn query1(&self, uv: &Vec2, frame: usize) -> Result<f64> {
        let mut out = [0.0];
        self.query_into(uv, frame, &mut out)?;
        Ok(out[0])
    }

    /// Accumulate `grad_out` (one value per channel) into `grad`, a buffer
    /// shaped like `data`. Channels whose unclamped value lies strictly
    /// outside the range contribute nothing; values on the bound still pass
    /// gradient so projected nodes can move back inside.
    pub fn backward_into(&self, uv: &Vec2, frame: usize, grad_out: &[f64], grad: &mut [f64]) -> Result<()> {
        if grad_out.len() != self.channels || grad.len() != self.data.len() {
            return Err(Error::arg("field gradient shape mismatch"));
        }
        let residual = self.check_frame(frame)?;
        let mut live = [true; 8];
        let mut live_vec;
        let live: &mut [bool] = if self.channels <= 8 {
            &mut live[..self.channels]
        } else {
            live_vec = vec![true; self.channels];
            &mut live_vec
        };
        if let Some((lo, hi)) = self.clamp {
            let mut raw = vec![0.0; self.channels];
            self.raw_into(uv, residual, &mut raw);
            for c in 0..self.channels {
                live[c] = raw[c] >= lo && raw[c] <= hi;
            }
        }
        for g in std::iter::once(0).chain(residual) {
            let s = self.stencil(uv, g);
            for k in 0..4 {
                for c in 0..self.channels {
                    if live[c] {
                        grad[s.nodes[k] + c] += s.weights[k] * grad_out[c];
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    /// Clamp stored node values into the range (projection after an update).
    /// Residual grids are left alone; the query-time clamp bounds the sum.
    pub fn project(&mut self) {
        if let Some((lo, hi)) = self.clamp {
            let n = self.grid_len();
            for v in &mut self.data[..n] {
                *v = v.clamp(lo, hi);
            }
        }
    }

    /// One channel of one grid as a `W x H` single-channel image
    /// (image row `y` holds nodes with grid row `y`).
    pub fn channel_image(&self, grid: usize, channel: usize) -> Result<Image> {
        if grid > self.frames || channel >= self.channels {
            return Err(Error::arg(format!("no grid {grid} channel {channel}")));
        }
        let mut img = Image::new(self.width, self.height, 1);
        for y in 0..self.height {
            for x in 0..self.width {
                img.data[y * self.width + x] = self.data[self.node_index(grid, x, y) + channel];
            }
        }
        Ok(img)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.width as u32, self.height as u32, self.channels as u32, self.frames as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let (flag, lo, hi) = match self.clamp {
            Some((lo, hi)) => (1u8, lo, hi),
            None => (0u8, 0.0, 0.0),
        };
        w.write_all(&[flag])?;
        w.write_all(&lo.to_le_bytes())?;
        w.write_all(&hi.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let fail = |r: &[u8], msg: &str| Error::Format {
            what: "field file",
            offset: bytes.len() - r.len(),
            msg: msg.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fail(r, "truncated header"))?;
        if &magic != MAGIC {
            return Err(Error::Format {
                what: "field file",
                offset: 0,
                msg: "bad magic".into(),
            });
        }
        let mut u32s = [0u32; 5];
        for v in &mut u32s {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| fail(r, "truncated header"))?;
            *v = u32::from_le_bytes(b);
        }
        let [version, w, h, c, f] = u32s.map(|v| v as usize);
        if version != VERSION as usize {
            return Err(fail(r, &format!("unsupported version {version}")));
        }
        let mut flag = [0u8];
        r.read_exact(&mut flag).map_err(|_| fail(r, "truncated header"))?;
        let mut f64s = [0.0f64; 2];
        for v in &mut f64s {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| fail(r, "truncated header"))?;
            *v = f64::from_le_bytes(b);
        }
        let clamp = match flag[0] {
            0 => None,
            1 => Some((f64s[0], f64s[1])),
            _ => return Err(fail(r, "bad clamp flag")),
        };
        let mut field = UVField::new(w, h, &vec![0.0; c.max(1)], clamp, f).map_err(|e| fail(r, &e.to_string()))?;
        if c == 0 {
            return Err(fail(r, "zero channels"));
        }
        let n = field.data.len();
        if r.len() != n * 4 {
            return Err(fail(r, &format!("expected {} bytes of node data, found {}", n * 4, r.len())));
        }
        for (i, chunk) in r.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(fail(&r[i * 4..], "non-finite node value"));
            }
            field.data[i] = v;
        }
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        UVField::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(w: usize, h: usize, c: usize, frames: usize, seed: u64) -> UVField {
        let mut f = UVField::new(w, h, &vec![0.0; c], None, frames).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut f.data {
            *v = rng.random_range(-1.0..1.0);
        }
        f
    }

    #[test]
    fn node_and_cell_center() {
        let mut f = UVField::new(2, 2, &[0.0], None, 0).unwrap();
        f.data.copy_from_slice(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(f.query1(&Vec2::new(0.0, 0.0), 0).unwrap(), 0.0);
        assert_eq!(f.query1(&Vec2::new(1.0, 0.0), 0).unwrap(), 1.0);
        assert_eq!(f.query1(&Vec2::new(0.0, 1.0), 0).unwrap(), 2.0);
        assert_eq!(f.query1(&Vec2::new(0.5, 0.5), 0).unwrap(), 1.5);
    }

    #[test]
    fn out_of_range_uv_clamps() {
        let f = random_field(5, 4, 2, 0, 1);
        assert_eq!(f.query(&Vec2::new(-0.2, 0.5), 0).unwrap(), f.query(&Vec2::new(0.0, 0.5), 0).unwrap());
        assert_eq!(f.query(&Vec2::new(1.7, 2.0), 0).unwrap(), f.query(&Vec2::new(1.0, 1.0), 0).unwrap());
    }

    #[test]
    fn constant_init() {
        let f = UVField::new(4, 4, &[0.5], Some((0.0, 1.0)), 0).unwrap();
        assert_eq!(f.query1(&Vec2::new(0.3, 0.9), 0).unwrap(), 0.5);
        let z = UVField::new(3, 3, &[0.0, 0.0], None, 0).unwrap();
        assert_eq!(z.query(&Vec2::new(0.1, 0.2), 0).unwrap(), vec![0.0, 0.0]);
        assert!(UVField::new(1, 4, &[0.0], None, 0).is_err());
    }

    #[test]
    fn frames_and_residuals() {
        let mut f = UVField::new(3, 3, &[1.0], None, 2).unwrap();
        let g = f.grid_len();
        for v in &mut f.data[2 * g..] {
            *v = 0.25;
        }
        assert_eq!(f.query1(&Vec2::new(0.4, 0.4), 0).unwrap(), 1.0);
        assert_eq!(f.query1(&Vec2::new(0.4, 0.4), 1).unwrap(), 1.25);
        assert!(f.query1(&Vec2::new(0.4, 0.4), 2).is_err());
        let mut grad = f.zero_grad();
        assert!(f.backward_into(&Vec2::new(0.4, 0.4), 5, &[1.0], &mut grad).is_err());
    }

    #[test]
    fn backward_at_node_hits_only_that_node() {
        let f = random_field(4, 4, 1, 0, 2);
        let mut grad = f.zero_grad();
        f.backward_into(&Vec2::new(1.0 / 3.0, 2.0 / 3.0), 0, &[2.5], &mut grad).unwrap();
        let idx = f.node_index(0, 1, 2);
        for (i, g) in grad.iter().enumerate() {
            let want = if i == idx { 2.5 } else { 0.0 };
            assert!((g - want).abs() < 1e-12, "node {i}: {g}");
        }
        let mut zero = f.zero_grad();
        f.backward_into(&Vec2::new(0.3, 0.6), 0, &[0.0], &mut zero).unwrap();
        assert!(zero.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let f = random_field(8, 8, 3, 0, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let queries: Vec<Vec2> = (0..20).map(|_| Vec2::new(rng.random(), rng.random())).collect();
        let loss = |f: &UVField| -> f64 { queries.iter().map(|q| f.query(q, 0).unwrap().iter().sum::<f64>()).sum() };
        let mut grad = f.zero_grad();
        for q in &queries {
            f.backward_into(q, 0, &[1.0; 3], &mut grad).unwrap();
        }
        let h = 1e-6;
        for i in 0..f.data.len() {
            let mut p = f.clone();
            p.data[i] += h;
            let mut m = f.clone();
            m.data[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-6, "node {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn saturation_zeroes_gradient() {
        let f = UVField::new(3, 3, &[2.0, 0.5], Some((0.0, 1.0)), 0).unwrap();
        let out = f.query(&Vec2::new(0.2, 0.7), 0).unwrap();
        assert_eq!(out, vec![1.0, 0.5]);
        let mut grad = f.zero_grad();
        f.backward_into(&Vec2::new(0.2, 0.7), 0, &[1.0, 1.0], &mut grad).unwrap();
        let sat: f64 = grad.iter().step_by(2).map(|g| g.abs()).sum();
        let live: f64 = grad.iter().skip(1).step_by(2).sum();
        assert_eq!(sat, 0.0);
        assert!((live - 1.0).abs() < 1e-15);
        let edge = UVField::new(3, 3, &[1.0], Some((0.0, 1.0)), 0).unwrap();
        let mut grad = edge.zero_grad();
        edge.backward_into(&Vec2::new(0.2, 0.7), 0, &[1.0], &mut grad).unwrap();
        assert!((grad.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn file_round_trip() {
        let f = UVField::new(5, 3, &[0.2, 0.4, 0.6], Some((0.0, 1.0)), 1).unwrap();
        let mut f = f;
        // f32-representable values survive bit-exactly.
        for v in &mut f.data {
            *v = *v as f32 as f64;
        }
        let back = UVField::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(back, f);

        let mut bad = f.to_bytes();
        bad[0] = b'X';
        assert!(UVField::from_bytes(&bad).is_err());
        let short = &f.to_bytes()[..20];
        assert!(matches!(UVField::from_bytes(short), Err(Error::Format { .. })));
    }

    #[test]
    fn channel_export() {
        let f = random_field(4, 3, 2, 0, 5);
        let img = f.channel_image(0, 1).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert_eq!(img.data[2 * 4 + 3], f.data[f.node_index(0, 3, 2) + 1]);
        assert!(f.channel_image(1, 0).is_err());
    }
}
