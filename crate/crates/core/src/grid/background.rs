use super::GridError;
use crate::geometry::{Ray, Vec3};
use std::f64::consts::PI;

/// Texel channels: RGB followed by density.
pub const TEXEL_CHANNELS: usize = 4;

/// Layered spherical background. Concentric spheres around the foreground,
/// each carrying an equirectangular RGB + density texture, composited front
/// to back; light passing all layers picks up a constant `brightness`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    n_layers: usize,
    height: usize,
    center: Vec3,
    radii: Vec<f64>,
    texels: Vec<f64>,
    pub brightness: f64,
}

/// One layer crossing: bilinear texel corners and activated values.
#[derive(Debug, Clone, Copy)]
pub struct LayerHit {
    /// Base index (into `texels`) of each bilinear corner, with its weight.
    pub corners: [(usize, f64); 4],
    pub raw_rgb: [f64; 3],
    pub rgb: [f64; 3],
    pub raw_sigma: f64,
    pub alpha: f64,
    /// Transmittance in front of this layer (relative to the background entry).
    pub transmittance: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BackgroundTrace {
    pub hits: Vec<LayerHit>,
    /// Transmittance left after every layer.
    pub residual: f64,
    /// Radiance for unit incoming transmittance.
    pub radiance: [f64; 3],
}

impl BackgroundModel {
    /// Builds a model with transparent mid-gray layers. Radii are spaced
    /// evenly in inverse depth between 1.01× and 8× `fg_radius`.
    pub fn new(
        n_layers: usize,
        layer_resolution: usize,
        brightness: f64,
        center: Vec3,
        fg_radius: f64,
    ) -> Result<Self, GridError> {
        let radii = Self::default_radii(n_layers, fg_radius)?;
        let texel_count = n_layers * layer_resolution * 2 * layer_resolution;
        let mut texels = vec![0.0; texel_count * TEXEL_CHANNELS];
        for t in texels.chunks_exact_mut(TEXEL_CHANNELS) {
            t[..3].fill(0.5);
        }
        Self::from_parts(layer_resolution, center, radii, texels, brightness)
    }

    pub fn default_radii(n_layers: usize, fg_radius: f64) -> Result<Vec<f64>, GridError> {
        if n_layers == 0 || !(fg_radius > 0.0 && fg_radius.is_finite()) {
            return Err(GridError::BadBounds);
        }
        let (inner, outer) = (1.01 * fg_radius, 8.0 * fg_radius);
        if n_layers == 1 {
            return Ok(vec![inner]);
        }
        Ok((0..n_layers)
            .map(|l| {
                let f = l as f64 / (n_layers - 1) as f64;
                1.0 / ((1.0 - f) / inner + f / outer)
            })
            .collect())
    }

    pub fn from_parts(
        layer_resolution: usize,
        center: Vec3,
        radii: Vec<f64>,
        texels: Vec<f64>,
        brightness: f64,
    ) -> Result<Self, GridError> {
        let n_layers = radii.len();
        if n_layers == 0 || layer_resolution == 0 || radii.windows(2).any(|w| !(w[0] < w[1])) || !(radii[0] > 0.0) {
            return Err(GridError::BadBounds);
        }
        let expected = n_layers * layer_resolution * 2 * layer_resolution * TEXEL_CHANNELS;
        if texels.len() != expected {
            return Err(GridError::ShLength { expected, got: texels.len() });
        }
        Ok(BackgroundModel { n_layers, height: layer_resolution, center, radii, texels, brightness })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Equirectangular height; the width is twice this.
    pub fn layer_resolution(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        2 * self.height
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn texels(&self) -> &[f64] {
        &self.texels
    }

    pub fn texels_mut(&mut self) -> &mut [f64] {
        &mut self.texels
    }

    pub fn texel_count(&self) -> usize {
        self.texels.len() / TEXEL_CHANNELS
    }

    /// Base index of texel `(layer, row, col)` in [`Self::texels`].
    pub fn texel_index(&self, layer: usize, row: usize, col: usize) -> usize {
        ((layer * self.height + row) * self.width() + col) * TEXEL_CHANNELS
    }

    /// Sets every texel of one layer.
    pub fn fill_layer(&mut self, layer: usize, rgb: [f64; 3], sigma: f64) {
        let per_layer = self.height * self.width() * TEXEL_CHANNELS;
        for t in self.texels[layer * per_layer..(layer + 1) * per_layer].chunks_exact_mut(TEXEL_CHANNELS) {
            t[..3].copy_from_slice(&rgb);
            t[3] = sigma;
        }
    }

    fn far_hit(&self, ray: &Ray, radius: f64) -> Option<f64> {
        let oc = ray.origin - self.center;
        let b = oc.dot(&ray.direction);
        let c = oc.norm_squared() - radius * radius;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let t = -b + disc.sqrt();
        (t > 0.0).then_some(t)
    }

    fn lookup(&self, layer: usize, dir: &Vec3) -> [(usize, f64); 4] {
        let (w, h) = (self.width(), self.height);
        let u = ((dir.y.atan2(dir.x) / (2.0 * PI)) + 0.5) * w as f64 - 0.5;
        let v = dir.z.clamp(-1.0, 1.0).acos() / PI * h as f64 - 0.5;
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        let wrap = |c: i64| c.rem_euclid(w as i64) as usize;
        let clampv = |r: i64| r.clamp(0, h as i64 - 1) as usize;
        let (ua, ub) = (wrap(u0 as i64), wrap(u0 as i64 + 1));
        let (va, vb) = (clampv(v0 as i64), clampv(v0 as i64 + 1));
        [
            (self.texel_index(layer, va, ua), (1.0 - fu) * (1.0 - fv)),
            (self.texel_index(layer, va, ub), fu * (1.0 - fv)),
            (self.texel_index(layer, vb, ua), (1.0 - fu) * fv),
            (self.texel_index(layer, vb, ub), fu * fv),
        ]
    }

    /// Front-to-back composite of every layer the ray exits through.
    pub fn trace(&self, ray: &Ray) -> BackgroundTrace {
        let mut trace = BackgroundTrace { hits: Vec::with_capacity(self.n_layers), ..Default::default() };
        let mut transmittance = 1.0;
        let mut color = [0.0; 3];
        for (layer, &radius) in self.radii.iter().enumerate() {
            let Some(t) = self.far_hit(ray, radius) else { continue };
            let dir = (ray.at(t) - self.center) / radius;
            let corners = self.lookup(layer, &dir);
            let mut raw = [0.0; TEXEL_CHANNELS];
            for &(base, w) in &corners {
                for (c, r) in raw.iter_mut().enumerate() {
                    *r += w * self.texels[base + c];
                }
            }
            let raw_rgb = [raw[0], raw[1], raw[2]];
            let rgb = raw_rgb.map(|v| v.clamp(0.0, 1.0));
            let alpha = 1.0 - (-raw[3].max(0.0)).exp();
            for c in 0..3 {
                color[c] += transmittance * alpha * rgb[c];
            }
            trace.hits.push(LayerHit { corners, raw_rgb, rgb, raw_sigma: raw[3], alpha, transmittance });
            transmittance *= 1.0 - alpha;
        }
        for c in color.iter_mut() {
            *c += transmittance * self.brightness;
        }
        trace.residual = transmittance;
        trace.radiance = color;
        trace
    }

    /// Background light reaching the eye through foreground transmittance `t_in`.
    pub fn background_radiance(&self, ray: &Ray, t_in: f64) -> [f64; 3] {
        self.trace(ray).radiance.map(|c| t_in * c)
    }

    /// Accumulates `∂L/∂texel` given `∂L/∂radiance` for a traced ray.
    pub fn backward(&self, trace: &BackgroundTrace, d_radiance: [f64; 3], d_texels: &mut [f64]) {
        // suffix = light arriving from behind the current layer
        let mut suffix = [0.0; 3];
        for c in 0..3 {
            suffix[c] = trace.residual * self.brightness;
        }
        for hit in trace.hits.iter().rev() {
            let weight = hit.transmittance * hit.alpha;
            let t_next = hit.transmittance * (1.0 - hit.alpha);
            let mut d_sigma = 0.0;
            let mut d_raw = [0.0; TEXEL_CHANNELS];
            for c in 0..3 {
                if hit.raw_rgb[c] > 0.0 && hit.raw_rgb[c] < 1.0 {
                    d_raw[c] = d_radiance[c] * weight;
                }
                d_sigma += d_radiance[c] * (t_next * hit.rgb[c] - suffix[c]);
            }
            if hit.raw_sigma > 0.0 {
                d_raw[3] = d_sigma;
            }
            for &(base, w) in &hit.corners {
                for (c, d) in d_raw.iter().enumerate() {
                    d_texels[base + c] += w * d;
                }
            }
            for c in 0..3 {
                suffix[c] += weight * hit.rgb[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> BackgroundModel {
        BackgroundModel::new(4, 8, 0.5, Vec3::zeros(), 1.0).unwrap()
    }

    #[test]
    fn radii_increase_in_inverse_depth() {
        let bg = model();
        let r = bg.radii();
        assert!((r[0] - 1.01).abs() < 1e-12);
        assert!((r[3] - 8.0).abs() < 1e-12);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        let inv: Vec<f64> = r.iter().map(|x| 1.0 / x).collect();
        let step = inv[1] - inv[0];
        assert!(inv.windows(2).all(|w| ((w[1] - w[0]) - step).abs() < 1e-12));
    }

    #[test]
    fn transparent_layers_give_brightness() {
        let mut bg = model();
        for l in 0..4 {
            bg.fill_layer(l, [0.9, 0.1, 0.3], 0.0);
        }
        let ray = Ray::new(Vec3::zeros(), Vec3::new(0.3, -0.4, 0.5));
        let c = bg.background_radiance(&ray, 0.8);
        for v in c {
            assert!((v - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn occluded_ray_gets_nothing() {
        let bg = model();
        let ray = Ray::new(Vec3::zeros(), Vec3::x());
        assert_eq!(bg.background_radiance(&ray, 0.0), [0.0; 3]);
    }

    #[test]
    fn opaque_red_layer_saturates() {
        let mut bg = model();
        bg.fill_layer(0, [1.0, 0.0, 0.0], 1e3);
        bg.brightness = 0.9;
        let ray = Ray::new(Vec3::new(0.1, 0.2, 0.0), Vec3::new(-1.0, 0.5, 0.2));
        let c = bg.background_radiance(&ray, 0.6);
        assert!((c[0] - 0.6).abs() < 1e-12);
        assert!(c[1].abs() < 1e-12 && c[2].abs() < 1e-12);
    }

    #[test]
    fn ray_leaving_all_spheres_gets_brightness() {
        let bg = model();
        let ray = Ray::new(Vec3::new(20.0, 0.0, 0.0), Vec3::x());
        let trace = bg.trace(&ray);
        assert!(trace.hits.is_empty());
        assert_eq!(bg.background_radiance(&ray, 0.5), [0.25; 3]);
    }

    #[test]
    fn layers_hit_in_radius_order() {
        let bg = model();
        let trace = bg.trace(&Ray::new(Vec3::new(0.2, 0.1, -0.3), Vec3::new(0.1, 1.0, 0.3)));
        assert_eq!(trace.hits.len(), 4);
        assert!(trace.hits.windows(2).all(|w| w[0].transmittance >= w[1].transmittance));
    }

    #[test]
    fn bilinear_weights_sum_to_one() {
        let bg = model();
        for d in [Vec3::x(), Vec3::z(), -Vec3::z(), Vec3::new(-1.0, -1e-9, 0.0).normalize()] {
            let c = bg.lookup(2, &d);
            let s: f64 = c.iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(c.iter().all(|(i, _)| *i < bg.texels().len()));
        }
    }
}
