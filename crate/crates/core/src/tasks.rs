//! Procedural scenes, analytic condition extractors, task registry, episodes
//! and fine-tuning splits.

use std::collections::VecDeque;

use fsc_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::descriptor_id;
use crate::error::{CoreError, Result};
use crate::image::{grayscale, quantize, to_rgb};

pub const MIN_SHAPES: usize = 1;
pub const MAX_SHAPES: usize = 4;
pub const SIZE_RANGE: (f64, f64) = (0.08, 0.22);
pub const SUPERSAMPLE: usize = 4;
pub const EDGE_THRESHOLD: f32 = 0.2;
pub const BLOB_SIGMA: f64 = 0.05;
/// Segmentation colors for background, circle, rect, triangle.
pub const PALETTE: [[f32; 3]; 4] = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rect,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Rect, ShapeKind::Triangle];

    pub fn class(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    /// `(x, y)` in canvas units, y pointing down.
    pub center: [f64; 2],
    /// Circle radius, half side of the square, or circumradius of the triangle.
    pub size: f64,
    pub color: [f64; 3],
    pub z_order: usize,
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let s = self.size;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Rect => dx.abs() <= s && dy.abs() <= s,
            ShapeKind::Triangle => {
                // Apex up; edges at distance s/2 from the centroid.
                let h = s / 2.0;
                dy <= h && (SQRT3 * dx - dy) <= 2.0 * h && (-SQRT3 * dx - dy) <= 2.0 * h
            }
        }
    }

    pub fn area(&self) -> f64 {
        let s = self.size;
        match self.kind {
            ShapeKind::Circle => std::f64::consts::PI * s * s,
            ShapeKind::Rect => 4.0 * s * s,
            ShapeKind::Triangle => 3.0 * SQRT3 / 4.0 * s * s,
        }
    }

    /// `[x_min, y_min, x_max, y_max]`.
    pub fn bbox(&self) -> [f64; 4] {
        let [cx, cy] = self.center;
        let s = self.size;
        match self.kind {
            ShapeKind::Circle | ShapeKind::Rect => [cx - s, cy - s, cx + s, cy + s],
            ShapeKind::Triangle => [cx - s * SQRT3 / 2.0, cy - s, cx + s * SQRT3 / 2.0, cy + s / 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    /// 0 horizontal, 1 vertical, 2 diagonal, 3 anti-diagonal.
    pub direction: u8,
    pub from: [f64; 3],
    pub to: [f64; 3],
}

impl Background {
    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let t = match self.direction {
            0 => x,
            1 => y,
            2 => (x + y) / 2.0,
            _ => (x + 1.0 - y) / 2.0,
        };
        std::array::from_fn(|c| self.from[c] + t * (self.to[c] - self.from[c]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub background: Background,
    pub shapes: Vec<Shape>,
}

impl SceneSpec {
    /// Shape drawn at `(x, y)`, if any: the one with the largest `z_order`.
    pub fn topmost(&self, x: f64, y: f64) -> Option<&Shape> {
        self.shapes.iter().filter(|s| s.contains(x, y)).max_by_key(|s| s.z_order)
    }

    pub fn descriptor(&self) -> usize {
        let classes: Vec<usize> = self.shapes.iter().map(|s| s.kind.class()).collect();
        descriptor_id(&classes)
    }
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Draws the scene description for `seed`.
pub fn sample_scene_spec(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(MIN_SHAPES..=MAX_SHAPES);
    let background = Background {
        direction: rng.gen_range(0..4),
        from: std::array::from_fn(|_| rng.gen_range(0.2..0.8)),
        to: std::array::from_fn(|_| rng.gen_range(0.2..0.8)),
    };
    let mut z: Vec<usize> = (0..n).collect();
    z.shuffle(&mut rng);
    let shapes = z
        .into_iter()
        .map(|z_order| {
            let kind = ShapeKind::ALL[rng.gen_range(0..3)];
            let size = rng.gen_range(SIZE_RANGE.0..SIZE_RANGE.1);
            let center = [rng.gen_range(size..1.0 - size), rng.gen_range(size..1.0 - size)];
            let bg = luma(background.color(center[0], center[1]));
            let mut color = [0.0; 3];
            for attempt in 0..64 {
                color = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
                if (luma(color) - bg).abs() >= 0.3 {
                    break;
                }
                if attempt == 63 {
                    color = if bg > 0.5 { [0.0; 3] } else { [1.0; 3] };
                }
            }
            Shape { kind, center, size, color, z_order }
        })
        .collect();
    SceneSpec { seed, background, shapes }
}

/// Anti-aliased render of a scene, quantized to the 8-bit grid.
pub fn render(spec: &SceneSpec, size: usize) -> Tensor<f32> {
    let mut data = vec![0f32; 3 * size * size];
    let ss = SUPERSAMPLE as f64;
    let plane = size * size;
    for i in 0..size {
        for j in 0..size {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (j as f64 + (sx as f64 + 0.5) / ss) / size as f64;
                    let y = (i as f64 + (sy as f64 + 0.5) / ss) / size as f64;
                    let c = spec.topmost(x, y).map(|s| s.color).unwrap_or_else(|| spec.background.color(x, y));
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                data[k * plane + i * size + j] = (acc[k] / (ss * ss)) as f32;
            }
        }
    }
    quantize(&Tensor::new(&[3, size, size], data).expect("sized"))
}

/// Deterministic `(image, spec)` for a seed.
pub fn generate_scene(seed: u64, size: usize) -> (Tensor<f32>, SceneSpec) {
    let spec = sample_scene_spec(seed);
    (render(&spec, size), spec)
}

/// Pixel-center coverage of one shape.
pub fn shape_mask(shape: &Shape, size: usize) -> Vec<bool> {
    let mut m = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            m[i * size + j] = shape.contains((j as f64 + 0.5) / size as f64, (i as f64 + 0.5) / size as f64);
        }
    }
    m
}

/// Per-pixel class labels (0 background, 1 + shape class) from pixel centers.
pub fn seg_labels(spec: &SceneSpec, size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size * size];
    for i in 0..size {
        for j in 0..size {
            let (x, y) = ((j as f64 + 0.5) / size as f64, (i as f64 + 0.5) / size as f64);
            if let Some(s) = spec.topmost(x, y) {
                out[i * size + j] = 1 + s.kind.class() as u8;
            }
        }
    }
    out
}

/// Inverse of the segmentation palette: nearest palette color per pixel.
pub fn labels_from_seg(cond: &Tensor<f32>) -> Vec<u8> {
    let n = cond.numel() / 3;
    let d = cond.data();
    (0..n)
        .map(|p| {
            let px = [d[p], d[n + p], d[2 * n + p]];
            (0..PALETTE.len())
                .min_by(|&a, &b| {
                    let da: f32 = (0..3).map(|c| (px[c] - PALETTE[a][c]).powi(2)).sum();
                    let db: f32 = (0..3).map(|c| (px[c] - PALETTE[b][c]).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap() as u8
        })
        .collect()
}

/// Binary map: Sobel magnitude (replicate padding) at least 0.2 of its maximum.
pub fn edge_map(gray: &[f32], h: usize, w: usize) -> Vec<f32> {
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        gray[i * w + j]
    };
    let mut mag = vec![0f32; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let gx = at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - 2.0 * at(i, j - 1)
                - at(i + 1, j - 1);
            let gy = at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1)
                - at(i - 1, j - 1)
                - 2.0 * at(i - 1, j)
                - at(i - 1, j + 1);
            mag[i as usize * w + j as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().copied().fold(0.0f32, f32::max);
    if max < 1e-6 {
        return vec![0.0; h * w];
    }
    let thr = EDGE_THRESHOLD * max;
    mag.iter().map(|&m| if m >= thr { 1.0 } else { 0.0 }).collect()
}

/// 3x3 binary dilation; out-of-canvas neighbours are ignored.
pub fn dilate(map: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut m = 0f32;
            for di in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                for dj in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                    m = m.max(map[di * w + dj]);
                }
            }
            out[i * w + j] = m;
        }
    }
    out
}

pub fn depth_map(spec: &SceneSpec, size: usize) -> Vec<f32> {
    let n = spec.shapes.len().max(1) as f32;
    let mut out = vec![0f32; size * size];
    for i in 0..size {
        for j in 0..size {
            let (x, y) = ((j as f64 + 0.5) / size as f64, (i as f64 + 0.5) / size as f64);
            if let Some(s) = spec.topmost(x, y) {
                out[i * size + j] = (s.z_order as f32 + 1.0) / n;
            }
        }
    }
    out
}

pub fn blob_map(spec: &SceneSpec, size: usize) -> Vec<f32> {
    let sigma = BLOB_SIGMA * size as f64;
    let mut out = vec![0f32; size * size];
    for i in 0..size {
        for j in 0..size {
            let v: f64 = spec
                .shapes
                .iter()
                .map(|s| {
                    let dx = j as f64 + 0.5 - s.center[0] * size as f64;
                    let dy = i as f64 + 0.5 - s.center[1] * size as f64;
                    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            out[i * size + j] = v.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ssim,
    Miou,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    Novel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Edge,
    Seg,
    Depth,
    Blob,
    InvEdge,
    DilatedEdge,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] =
        [TaskKind::Edge, TaskKind::Seg, TaskKind::Depth, TaskKind::Blob, TaskKind::InvEdge, TaskKind::DilatedEdge];

    pub fn id(self) -> &'static str {
        match self {
            TaskKind::Edge => "edge",
            TaskKind::Seg => "seg",
            TaskKind::Depth => "depth",
            TaskKind::Blob => "blob",
            TaskKind::InvEdge => "inv_edge",
            TaskKind::DilatedEdge => "dilated_edge",
        }
    }

    pub fn parse(id: &str) -> Result<TaskKind> {
        TaskKind::ALL.into_iter().find(|t| t.id() == id).ok_or_else(|| CoreError::UnknownTask(id.to_string()))
    }

    pub fn metric(self) -> Metric {
        match self {
            TaskKind::Edge | TaskKind::InvEdge | TaskKind::DilatedEdge => Metric::Ssim,
            TaskKind::Seg => Metric::Miou,
            TaskKind::Depth | TaskKind::Blob => Metric::Mse,
        }
    }

    pub fn default_split(self) -> Split {
        match self {
            TaskKind::Edge | TaskKind::Seg | TaskKind::Depth => Split::MetaTrain,
            _ => Split::Novel,
        }
    }

    /// Whether the condition is a function of the pixels alone.
    pub fn image_only(self) -> bool {
        matches!(self, TaskKind::Edge | TaskKind::InvEdge | TaskKind::DilatedEdge)
    }
}

/// Condition image `[3, H, W]` for `task`, from a rendered image and its spec.
pub fn extract_condition(image: &Tensor<f32>, spec: &SceneSpec, task: TaskKind) -> Result<Tensor<f32>> {
    let [c, h, w] = image.shape() else {
        return Err(CoreError::Shape(format!("expected [3, H, W], got {:?}", image.shape())));
    };
    if *c != 3 || h != w {
        return Err(CoreError::Shape(format!("expected a square RGB image, got {:?}", image.shape())));
    }
    let (h, w) = (*h, *w);
    let edges = || edge_map(&grayscale(image), h, w);
    let map = match task {
        TaskKind::Edge => edges(),
        TaskKind::InvEdge => edges().iter().map(|v| 1.0 - v).collect(),
        TaskKind::DilatedEdge => dilate(&edges(), h, w),
        TaskKind::Depth => depth_map(spec, h),
        TaskKind::Blob => blob_map(spec, h),
        TaskKind::Seg => {
            let labels = seg_labels(spec, h);
            let mut data = vec![0f32; 3 * h * w];
            for (p, &l) in labels.iter().enumerate() {
                for ch in 0..3 {
                    data[ch * h * w + p] = PALETTE[l as usize][ch];
                }
            }
            return Ok(Tensor::new(&[3, h, w], data)?);
        }
    };
    Ok(quantize(&to_rgb(&map, h, w)))
}

/// Estimates a scene description from pixels: a planar background fitted on
/// the border, then one shape per connected foreground component. Overlapping
/// shapes merge into one component.
pub fn recover_scene(image: &Tensor<f32>) -> Result<SceneSpec> {
    let [c, h, w] = image.shape() else {
        return Err(CoreError::Shape(format!("expected [3, H, W], got {:?}", image.shape())));
    };
    if *c != 3 || h != w || *h < 3 {
        return Err(CoreError::Shape(format!("expected a square RGB image, got {:?}", image.shape())));
    }
    let n = *h;
    let d = image.data();
    let plane = n * n;
    let coord = |k: usize| (k as f64 + 0.5) / n as f64;
    let border: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i == 0 || j == 0 || i == n - 1 || j == n - 1)
        .collect();
    let mut coef = [[0.0f64; 3]; 3];
    let mut inliers = border.clone();
    for _ in 0..3 {
        for (ch, cf) in coef.iter_mut().enumerate() {
            *cf = fit_plane(inliers.iter().map(|&(i, j)| (coord(j), coord(i), d[ch * plane + i * n + j] as f64)));
        }
        // Shapes touching the border pull the fit; refit on the points that agree with it.
        let residual = |&(i, j): &(usize, usize)| {
            (0..3)
                .map(|ch| {
                    let c = coef[ch];
                    (d[ch * plane + i * n + j] as f64 - (c[0] + c[1] * coord(j) + c[2] * coord(i))).abs()
                })
                .fold(0.0, f64::max)
        };
        let mut scored: Vec<(f64, (usize, usize))> = border.iter().map(|p| (residual(p), *p)).collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        let keep = scored.iter().filter(|(r, _)| *r < 0.06).count().max(border.len() / 2);
        inliers = scored[..keep].iter().map(|&(_, p)| p).collect();
    }
    let bg_at = |ch: usize, x: f64, y: f64| coef[ch][0] + coef[ch][1] * x + coef[ch][2] * y;
    let fg: Vec<bool> = (0..plane)
        .map(|p| {
            let (x, y) = (coord(p % n), coord(p / n));
            (0..3).any(|ch| (d[ch * plane + p] as f64 - bg_at(ch, x, y)).abs() > 0.12)
        })
        .collect();
    let mut seen = vec![false; plane];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for start in 0..plane {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (i, j) = (p / n, p % n);
            let mut nb = Vec::with_capacity(4);
            if i > 0 {
                nb.push(p - n);
            }
            if i + 1 < n {
                nb.push(p + n);
            }
            if j > 0 {
                nb.push(p - 1);
            }
            if j + 1 < n {
                nb.push(p + 1);
            }
            for q in nb {
                if fg[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        if comp.len() >= 3 {
            comps.push(comp);
        }
    }
    comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
    comps.truncate(MAX_SHAPES);
    let shapes = comps
        .iter()
        .enumerate()
        .map(|(rank, comp)| {
            let area = comp.len() as f64;
            let (mut sx, mut sy) = (0.0, 0.0);
            let (mut imin, mut imax, mut jmin, mut jmax) = (n, 0, n, 0);
            let mut color = [0.0; 3];
            for &p in comp {
                let (i, j) = (p / n, p % n);
                sx += coord(j);
                sy += coord(i);
                imin = imin.min(i);
                imax = imax.max(i);
                jmin = jmin.min(j);
                jmax = jmax.max(j);
                for (ch, col) in color.iter_mut().enumerate() {
                    *col += d[ch * plane + p] as f64 / area;
                }
            }
            let fill = area / ((imax - imin + 1) * (jmax - jmin + 1)) as f64;
            let a = area / plane as f64;
            let (kind, size) = if fill > 0.88 {
                (ShapeKind::Rect, a.sqrt() / 2.0)
            } else if fill > 0.62 {
                (ShapeKind::Circle, (a / std::f64::consts::PI).sqrt())
            } else {
                (ShapeKind::Triangle, (a / (3.0 * SQRT3 / 4.0)).sqrt())
            };
            Shape { kind, center: [sx / area, sy / area], size, color, z_order: comps.len() - 1 - rank }
        })
        .collect();
    let corner = |x: f64, y: f64| std::array::from_fn(|ch| bg_at(ch, x, y).clamp(0.0, 1.0));
    Ok(SceneSpec {
        seed: 0,
        background: Background { direction: 2, from: corner(0.0, 0.0), to: corner(1.0, 1.0) },
        shapes,
    })
}

/// Least-squares `v ≈ a + b x + c y`.
fn fit_plane(points: impl Iterator<Item = (f64, f64, f64)>) -> [f64; 3] {
    let mut m = [[0.0f64; 4]; 3];
    for (x, y, v) in points {
        let f = [1.0, x, y];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += f[r] * f[c];
            }
            m[r][3] += f[r] * v;
        }
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        m.swap(col, piv);
        if m[col][col].abs() < 1e-12 {
            return [0.0; 3];
        }
        for r in 0..3 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..4 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]]
}

/// Which tasks are meta-trained on and which are held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub meta_train: Vec<TaskKind>,
    pub novel: Vec<TaskKind>,
    /// Seed namespace for every scene pool.
    pub dataset_seed: u64,
    pub train_scenes: usize,
    pub support_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            meta_train: vec![TaskKind::Edge, TaskKind::Seg, TaskKind::Depth],
            novel: vec![TaskKind::Blob, TaskKind::InvEdge, TaskKind::DilatedEdge],
            dataset_seed: 0,
            train_scenes: 2000,
            support_scenes: 30,
            eval_scenes: 64,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_train.is_empty() {
            return Err(CoreError::config("tasks.meta_train", "must name at least one task"));
        }
        if let Some(t) = self.meta_train.iter().find(|t| self.novel.contains(t)) {
            return Err(CoreError::config("tasks.novel", format!("`{}` is also a meta-train task", t.id())));
        }
        if self.dataset_seed >= 1 << 29 {
            return Err(CoreError::config("tasks.dataset_seed", "must be below 2^29"));
        }
        for (name, v) in [
            ("train_scenes", self.train_scenes),
            ("support_scenes", self.support_scenes),
            ("eval_scenes", self.eval_scenes),
        ] {
            if v == 0 || v >= 1 << 32 {
                return Err(CoreError::config(format!("tasks.{name}"), "must be in 1..2^32"));
            }
        }
        Ok(())
    }

    pub fn tasks(&self, split: Split) -> &[TaskKind] {
        match split {
            Split::MetaTrain => &self.meta_train,
            Split::Novel => &self.novel,
        }
    }

    pub fn all(&self) -> Vec<TaskKind> {
        self.meta_train.iter().chain(&self.novel).copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Train,
    Support,
    Eval,
}

impl PoolKind {
    pub const ALL: [PoolKind; 3] = [PoolKind::Train, PoolKind::Support, PoolKind::Eval];

    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Train => "train",
            PoolKind::Support => "support",
            PoolKind::Eval => "eval",
        }
    }
}

/// Scene seeds of a pool; pools never share a seed.
pub fn pool_seeds(dataset_seed: u64, kind: PoolKind, count: usize) -> Vec<u64> {
    let base = (dataset_seed * 3 + kind as u64) << 32;
    (0..count as u64).map(|i| base | i).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub image: Tensor<f32>,
    pub spec: SceneSpec,
}

/// Rendered scenes held in memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScenePool {
    pub scenes: Vec<Scene>,
}

impl ScenePool {
    pub fn render(seeds: &[u64], size: usize) -> Self {
        let scenes = seeds
            .iter()
            .map(|&seed| {
                let (image, spec) = generate_scene(seed, size);
                Scene { seed, image, spec }
            })
            .collect();
        ScenePool { scenes }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn pair(&self, index: usize, task: TaskKind) -> Result<Pair> {
        let s = self.scenes.get(index).ok_or_else(|| CoreError::Data(format!("scene index {index} out of range")))?;
        Ok(Pair {
            seed: s.seed,
            condition: extract_condition(&s.image, &s.spec, task)?,
            image: s.image.clone(),
            descriptor: s.spec.descriptor(),
        })
    }
}

/// One image with its condition for a given task.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub seed: u64,
    pub image: Tensor<f32>,
    pub condition: Tensor<f32>,
    pub descriptor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub task: TaskKind,
    pub pairs: Vec<Pair>,
}

impl SupportSet {
    pub fn from_pool(pool: &ScenePool, task: TaskKind, indices: &[usize]) -> Result<Self> {
        let pairs = indices.iter().map(|&i| pool.pair(i, task)).collect::<Result<_>>()?;
        Ok(SupportSet { task, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> SupportSet {
        SupportSet { task: self.task, pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: TaskKind,
    pub support: SupportSet,
    pub query: Vec<Pair>,
}

/// Uniform task from `tasks`, then `n + qn` distinct scenes from `pool`.
pub fn sample_episode<R: Rng + ?Sized>(
    tasks: &[TaskKind],
    pool: &ScenePool,
    rng: &mut R,
    n: usize,
    qn: usize,
) -> Result<Episode> {
    if tasks.is_empty() {
        return Err(CoreError::Data("cannot sample an episode from an empty split".into()));
    }
    if n == 0 {
        return Err(CoreError::EmptySupport);
    }
    if pool.len() < n + qn {
        return Err(CoreError::Data(format!("pool of {} scenes cannot supply {} distinct pairs", pool.len(), n + qn)));
    }
    let task = tasks[rng.gen_range(0..tasks.len())];
    let idx = rand::seq::index::sample(rng, pool.len(), n + qn).into_vec();
    let support = SupportSet::from_pool(pool, task, &idx[..n])?;
    let query = idx[n..].iter().map(|&i| pool.pair(i, task)).collect::<Result<_>>()?;
    Ok(Episode { task, support, query })
}

/// Partition of support indices for fine-tuning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinetuneSplit {
    pub pseudo_support: Vec<usize>,
    pub pseudo_query: Vec<usize>,
    pub validation: usize,
}

pub fn pseudo_support_size(support_len: usize) -> usize {
    5.min(support_len / 3)
}

/// Holds out one validation pair and splits the rest.
pub fn make_finetune_split<R: Rng + ?Sized>(support_len: usize, rng: &mut R) -> Result<FinetuneSplit> {
    if support_len < 3 {
        return Err(CoreError::SupportTooSmall { got: support_len, need: 3 });
    }
    let validation = rng.gen_range(0..support_len);
    let split = FinetuneSplit { pseudo_support: Vec::new(), pseudo_query: Vec::new(), validation };
    Ok(split.repartition(support_len, rng))
}

impl FinetuneSplit {
    /// New random pseudo-support / pseudo-query partition, same validation pair.
    pub fn repartition<R: Rng + ?Sized>(&self, support_len: usize, rng: &mut R) -> FinetuneSplit {
        let mut rest: Vec<usize> = (0..support_len).filter(|&i| i != self.validation).collect();
        rest.shuffle(rng);
        let k = pseudo_support_size(support_len);
        let pseudo_query = rest.split_off(k);
        FinetuneSplit { pseudo_support: rest, pseudo_query, validation: self.validation }
    }
}
