//! Tile-parallel perspective rasterizer producing G-buffers.
//!
//! Coverage is hard: a pixel belongs to the nearest triangle whose interior
//! (top-left rule on edges) contains the pixel center. Attributes are
//! interpolated with perspective-correct barycentrics. The adjoint treats
//! coverage and barycentrics as constants and scatters pixel gradients to
//! the covering triangle's vertices.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::TriangleMesh;
use crate::image::Image;
use crate::{RigidTransform, Vec2, Vec3};

/// Triangles with any vertex closer than this (camera z) are dropped.
pub const NEAR_PLANE: f64 = 1e-3;
/// Depths within this distance tie; the smaller triangle id wins.
pub const DEPTH_TIE: f64 = 1e-9;
pub const NO_TRIANGLE: u32 = u32::MAX;
const TILE: usize = 16;

/// Pinhole camera. Camera space is x right, y down, z forward; pixel
/// `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: RigidTransform,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, world_to_camera: RigidTransform, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::arg("focal lengths must be positive"));
        }
        if width == 0 || height == 0 {
            return Err(Error::arg("camera resolution must be at least 1x1"));
        }
        world_to_camera.validate()?;
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            world_to_camera,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`; `up` picks the roll. Vertical
    /// field of view in degrees, principal point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y_deg: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::arg("look_at: up is parallel to the view direction"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = crate::Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Camera::new(f, f, 0.5 * width as f64, 0.5 * height as f64, RigidTransform { rotation, translation }, width, height)
    }

    pub fn center(&self) -> Vec3 {
        self.world_to_camera.inverse().translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera-space point of a world point.
    #[inline]
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.world_to_camera.apply(p)
    }

    /// Continuous pixel coordinates of a camera-space point.
    #[inline]
    pub fn project_camera(&self, q: &Vec3) -> Vec2 {
        Vec2::new(self.fx * q.x / q.z + self.cx, self.fy * q.y / q.z + self.cy)
    }

    /// World-space unit direction of the ray through a continuous pixel position.
    pub fn ray_direction(&self, px: f64, py: f64) -> Vec3 {
        let d = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        (self.world_to_camera.rotation.transpose() * d).normalize()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RasterOptions {
    pub cull_backfaces: bool,
}

impl Default for RasterOptions {
    fn default() -> Self {
        RasterOptions { cull_backfaces: true }
    }
}

/// Per-pixel rasterized attributes. Unmasked pixels hold zeros, triangle id
/// [`NO_TRIANGLE`] and infinite depth.
#[derive(Debug, Clone, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub camera_center: Vec3,
    pub mask: Vec<bool>,
    pub triangle_id: Vec<u32>,
    pub barycentrics: Vec<[f64; 3]>,
    pub uv: Vec<Vec2>,
    pub position: Vec<Vec3>,
    pub normal: Vec<Vec3>,
    pub depth: Vec<f64>,
    /// Length of the interpolated (unnormalized) normal, kept for the adjoint.
    pub normal_length: Vec<f64>,
}

impl GBuffer {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn position_image(&self) -> Image {
        Image::from_vec3(self.width, self.height, &self.position)
    }

    pub fn normal_image(&self) -> Image {
        Image::from_vec3(self.width, self.height, &self.normal)
    }

    pub fn depth_image(&self) -> Image {
        let data = self.depth.iter().map(|d| if d.is_finite() { *d } else { 0.0 }).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn mask_image(&self) -> Image {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Copy with every pixel outside `keep` unmasked.
    pub fn restricted(&self, keep: &[bool]) -> GBuffer {
        let mut g = self.clone();
        for p in 0..g.pixel_count() {
            if !keep[p] && g.mask[p] {
                g.clear_pixel(p);
            }
        }
        g
    }

    fn clear_pixel(&mut self, p: usize) {
        self.mask[p] = false;
        self.triangle_id[p] = NO_TRIANGLE;
        self.barycentrics[p] = [0.0; 3];
        self.uv[p] = Vec2::zeros();
        self.position[p] = Vec3::zeros();
        self.normal[p] = Vec3::zeros();
        self.depth[p] = f64::INFINITY;
        self.normal_length[p] = 0.0;
    }

    fn empty(width: usize, height: usize, camera_center: Vec3) -> GBuffer {
        let n = width * height;
        GBuffer {
            width,
            height,
            camera_center,
            mask: vec![false; n],
            triangle_id: vec![NO_TRIANGLE; n],
            barycentrics: vec![[0.0; 3]; n],
            uv: vec![Vec2::zeros(); n],
            position: vec![Vec3::zeros(); n],
            normal: vec![Vec3::zeros(); n],
            depth: vec![f64::INFINITY; n],
            normal_length: vec![0.0; n],
        }
    }
}

struct ScreenTri {
    id: u32,
    s: [Vec2; 3],
    inv_z: [f64; 3],
    inv_area: f64,
    // Slot of the original vertex stored at each position (orientation fix).
    order: [usize; 3],
    owned: [bool; 3],
}

#[inline]
fn edge(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

// With positive area in y-down screen space, the top edge runs +x and left
// edges run -y.
#[inline]
fn owns_boundary(a: &Vec2, b: &Vec2) -> bool {
    let d = b - a;
    d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)
}

fn setup_triangles(mesh: &TriangleMesh, camera: &Camera, opts: RasterOptions) -> Vec<ScreenTri> {
    mesh.faces
        .iter()
        .enumerate()
        .filter_map(|(f, face)| {
            let q = face.map(|v| camera.to_camera(&mesh.positions[v as usize]));
            if q.iter().any(|p| !(p.z >= NEAR_PLANE)) {
                return None;
            }
            if opts.cull_backfaces {
                let n = (q[1] - q[0]).cross(&(q[2] - q[0]));
                if q[0].dot(&n) >= 0.0 {
                    return None;
                }
            }
            let mut s = q.map(|p| camera.project_camera(&p));
            let mut inv_z = q.map(|p| 1.0 / p.z);
            let mut order = [0, 1, 2];
            let mut area = edge(&s[0], &s[1], &s[2]);
            if area == 0.0 || !area.is_finite() {
                return None;
            }
            if area < 0.0 {
                s.swap(1, 2);
                inv_z.swap(1, 2);
                order.swap(1, 2);
                area = -area;
            }
            let owned = [
                owns_boundary(&s[1], &s[2]),
                owns_boundary(&s[2], &s[0]),
                owns_boundary(&s[0], &s[1]),
            ];
            Some(ScreenTri {
                id: f as u32,
                s,
                inv_z,
                inv_area: 1.0 / area,
                order,
                owned,
            })
        })
        .collect()
}

/// Z-buffered coverage plus perspective-correct interpolation of uv,
/// position and normal.
pub fn rasterize(mesh: &TriangleMesh, camera: &Camera) -> GBuffer {
    rasterize_with(mesh, camera, RasterOptions::default())
}

pub fn rasterize_with(mesh: &TriangleMesh, camera: &Camera, opts: RasterOptions) -> GBuffer {
    let (w, h) = (camera.width, camera.height);
    let tris = setup_triangles(mesh, camera, opts);
    let (tx, ty) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tx * ty];
    for (k, t) in tris.iter().enumerate() {
        let lo_x = t.s.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let hi_x = t.s.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let lo_y = t.s.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let hi_y = t.s.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        if hi_x < 0.0 || hi_y < 0.0 || lo_x > w as f64 || lo_y > h as f64 {
            continue;
        }
        let px0 = (lo_x - 0.5).ceil().max(0.0) as usize;
        let py0 = (lo_y - 0.5).ceil().max(0.0) as usize;
        let px1 = ((hi_x - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let py1 = ((hi_y - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if px1 < px0 as f64 || py1 < py0 as f64 {
            continue;
        }
        for by in py0 / TILE..=(py1 as usize) / TILE {
            for bx in px0 / TILE..=(px1 as usize) / TILE {
                bins[by * tx + bx].push(k as u32);
            }
        }
    }

    // Per tile: (triangle index into `tris`, perspective barycentrics, depth) per pixel.
    type Hit = Option<(u32, [f64; 3], f64)>;
    let tiles: Vec<Vec<Hit>> = (0..tx * ty)
        .into_par_iter()
        .map(|b| {
            let (bx, by) = (b % tx, b / tx);
            let x0 = bx * TILE;
            let y0 = by * TILE;
            let x1 = (x0 + TILE).min(w);
            let y1 = (y0 + TILE).min(h);
            let mut out: Vec<Hit> = vec![None; (x1 - x0) * (y1 - y0)];
            for &k in &bins[b] {
                let t = &tris[k as usize];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = Vec2::new(x as f64 + 0.5, y as f64 + 0.5);
                        let e = [edge(&t.s[1], &t.s[2], &p), edge(&t.s[2], &t.s[0], &p), edge(&t.s[0], &t.s[1], &p)];
                        if !(0..3).all(|i| e[i] > 0.0 || (e[i] == 0.0 && t.owned[i])) {
                            continue;
                        }
                        let lam = e.map(|v| v * t.inv_area);
                        let wsum: f64 = (0..3).map(|i| lam[i] * t.inv_z[i]).sum();
                        let depth = 1.0 / wsum;
                        let slot = &mut out[(y - y0) * (x1 - x0) + (x - x0)];
                        let better = match slot {
                            None => true,
                            Some((id, _, d)) => {
                                depth < *d - DEPTH_TIE || ((depth - *d).abs() <= DEPTH_TIE && t.id < tris[*id as usize].id)
                            }
                        };
                        if better {
                            let mut bary = [0.0; 3];
                            for i in 0..3 {
                                bary[t.order[i]] = lam[i] * t.inv_z[i] * depth;
                            }
                            *slot = Some((k, bary, depth));
                        }
                    }
                }
            }
            out
        })
        .collect();

    let mut coverage = GBuffer::empty(w, h, camera.center());
    for (b, tile) in tiles.into_iter().enumerate() {
        let (bx, by) = (b % tx, b / tx);
        let x0 = bx * TILE;
        let y0 = by * TILE;
        let x1 = (x0 + TILE).min(w);
        for (i, hit) in tile.into_iter().enumerate() {
            if let Some((k, bary, depth)) = hit {
                let p = (y0 + i / (x1 - x0)) * w + x0 + i % (x1 - x0);
                coverage.mask[p] = true;
                coverage.triangle_id[p] = tris[k as usize].id;
                coverage.barycentrics[p] = bary;
                coverage.depth[p] = depth;
            }
        }
    }
    interpolate(&coverage, mesh)
}

/// Re-interpolate uv, position and normal from `mesh` using the frozen
/// coverage (mask, triangle ids, barycentrics, depth) of `coverage`.
pub fn interpolate(coverage: &GBuffer, mesh: &TriangleMesh) -> GBuffer {
    let mut g = coverage.clone();
    let attrs: Vec<Option<(Vec2, Vec3, Vec3, f64)>> = (0..g.pixel_count())
        .into_par_iter()
        .map(|p| {
            if !coverage.mask[p] {
                return None;
            }
            let face = mesh.faces[coverage.triangle_id[p] as usize];
            let b = coverage.barycentrics[p];
            let [v0, v1, v2] = face.map(|v| v as usize);
            // Written as a0 + b1 (a1 - a0) + b2 (a2 - a0) so a constant
            // attribute interpolates to itself exactly.
            let uv = mesh.uvs[v0] + (mesh.uvs[v1] - mesh.uvs[v0]) * b[1] + (mesh.uvs[v2] - mesh.uvs[v0]) * b[2];
            let x = mesh.positions[v0] + (mesh.positions[v1] - mesh.positions[v0]) * b[1] + (mesh.positions[v2] - mesh.positions[v0]) * b[2];
            let n = mesh.normals[v0] + (mesh.normals[v1] - mesh.normals[v0]) * b[1] + (mesh.normals[v2] - mesh.normals[v0]) * b[2];
            let len = n.norm();
            let unit = if len > 0.0 {
                n / len
            } else {
                let [a, bb, c] = face.map(|v| mesh.positions[v as usize]);
                (bb - a).cross(&(c - a)).normalize()
            };
            Some((uv, x, unit, len))
        })
        .collect();
    for (p, a) in attrs.into_iter().enumerate() {
        if let Some((uv, x, n, len)) = a {
            g.uv[p] = uv;
            g.position[p] = x;
            g.normal[p] = n;
            g.normal_length[p] = len;
        }
    }
    g
}

/// Vertex-attribute gradients produced by [`rasterize_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct VertexGrads {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

/// Adjoint of the attribute interpolation with coverage frozen: each masked
/// pixel's position gradient goes to its triangle's vertices weighted by the
/// perspective-correct barycentrics; normal gradients additionally pass
/// through the normalization.
pub fn rasterize_backward(gbuffer: &GBuffer, mesh: &TriangleMesh, grad_position: &[Vec3], grad_normal: &[Vec3]) -> Result<VertexGrads> {
    let n = gbuffer.pixel_count();
    if grad_position.len() != n || grad_normal.len() != n {
        return Err(Error::arg(format!(
            "gradient maps have {} / {} pixels, G-buffer has {n}",
            grad_position.len(),
            grad_normal.len()
        )));
    }
    let mut out = VertexGrads {
        positions: vec![Vec3::zeros(); mesh.vertex_count()],
        normals: vec![Vec3::zeros(); mesh.vertex_count()],
    };
    for p in 0..n {
        if !gbuffer.mask[p] {
            continue;
        }
        let t = gbuffer.triangle_id[p] as usize;
        if t >= mesh.face_count() {
            return Err(Error::arg("G-buffer does not match mesh"));
        }
        let face = mesh.faces[t];
        let b = gbuffer.barycentrics[p];
        let gx = grad_position[p];
        let len = gbuffer.normal_length[p];
        let gm = if len > 0.0 {
            let u = gbuffer.normal[p];
            let g = grad_normal[p];
            (g - u * u.dot(&g)) / len
        } else {
            Vec3::zeros()
        };
        for i in 0..3 {
            let v = face[i] as usize;
            if gx != Vec3::zeros() {
                out.positions[v] += gx * b[i];
            }
            if gm != Vec3::zeros() {
                out.normals[v] += gm * b[i];
            }
        }
    }
    Ok(out)
}
