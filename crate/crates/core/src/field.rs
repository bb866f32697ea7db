//! Self-consistent plasma field `E(x) = sum_j w_j K(x - y_j)` with the
//! desingularized kernel `K(z) = z / max(|z|, blob)^2`, the matching log
//! potential, and the momentum integrals used by the relative-energy
//! estimates.
//!
//! Every sum runs over sources in index order with compensated accumulation,
//! so batch evaluation is bitwise reproducible for any worker count.

use rayon::prelude::*;

use crate::mollifier::{kernel_core, ln_core};
use crate::summation::{CompensatedSum, CompensatedVec2};
use crate::{Error, Particle, Result, Vec2};

const LEAF_CAPACITY: usize = 8;
const MAX_DEPTH: usize = 48;

/// How plasma–plasma sums are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SummationMethod {
    Direct,
    /// Quadtree with monopole far-field and opening angle in `(0, 1)`.
    Tree { opening_angle: f64 },
}

/// Configuration of the plasma self-field evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldModel {
    method: SummationMethod,
    blob_width: f64,
}

impl FieldModel {
    pub fn direct(blob_width: f64) -> Result<Self> {
        Self::new(SummationMethod::Direct, blob_width)
    }

    pub fn tree(blob_width: f64, opening_angle: f64) -> Result<Self> {
        Self::new(SummationMethod::Tree { opening_angle }, blob_width)
    }

    pub fn new(method: SummationMethod, blob_width: f64) -> Result<Self> {
        if !(blob_width >= 0.0) || !blob_width.is_finite() {
            return Err(Error::Config(format!("blob width must be >= 0, got {blob_width}")));
        }
        if let SummationMethod::Tree { opening_angle } = method {
            if !(opening_angle > 0.0 && opening_angle < 1.0) {
                return Err(Error::Config(format!(
                    "tree opening angle must lie in (0, 1), got {opening_angle}"
                )));
            }
        }
        Ok(Self { method, blob_width })
    }

    #[inline]
    pub fn method(&self) -> SummationMethod {
        self.method
    }

    #[inline]
    pub fn blob_width(&self) -> f64 {
        self.blob_width
    }

    pub fn with_blob_width(self, blob_width: f64) -> Result<Self> {
        Self::new(self.method, blob_width)
    }

    /// Declared accuracy of a batch evaluation against direct summation:
    /// `max_i |E_i - E_i^direct| <= tolerance * max_i |E_i^direct|`.
    pub fn tolerance(&self) -> f64 {
        match self.method {
            SummationMethod::Direct => 0.0,
            SummationMethod::Tree { opening_angle } => tree_tolerance(opening_angle),
        }
    }
}

/// Monopole truncation error scales with the square of the opening angle
/// (the dipole moment about the centre of mass vanishes).
pub fn tree_tolerance(opening_angle: f64) -> f64 {
    0.1 * opening_angle * opening_angle
}

/// Default blob width: half the mean nearest-neighbour spacing of the
/// weighted particles (zero when fewer than two carry weight).
pub fn default_blob_width(particles: &[Particle]) -> f64 {
    let pos: Vec<Vec2> = particles.iter().filter(|p| p.weight > 0.0).map(|p| p.x()).collect();
    if pos.len() < 2 {
        return 0.0;
    }
    let nearest: Vec<f64> = pos
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            pos.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &y)| (x - y).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    let mean = nearest.iter().copied().collect::<CompensatedSum>().value() / pos.len() as f64;
    0.5 * mean
}

/// Weighted point sources prepared for repeated field evaluation.
///
/// Zero-weight particles are dropped; `exclude` arguments refer to the
/// index in the original particle list.
pub struct PlasmaSources {
    pos: Vec<Vec2>,
    weight: Vec<f64>,
    /// Position in `pos` for every original index, if the particle carries weight.
    slot: Vec<Option<usize>>,
    model: FieldModel,
    tree: Option<QuadTree>,
}

impl PlasmaSources {
    pub fn new(positions: &[Vec2], weights: &[f64], model: FieldModel) -> Self {
        assert_eq!(positions.len(), weights.len());
        let mut pos = Vec::with_capacity(positions.len());
        let mut weight = Vec::with_capacity(positions.len());
        let mut slot = Vec::with_capacity(positions.len());
        for (&x, &w) in positions.iter().zip(weights) {
            if w > 0.0 {
                slot.push(Some(pos.len()));
                pos.push(x);
                weight.push(w);
            } else {
                slot.push(None);
            }
        }
        let tree = match model.method {
            SummationMethod::Direct => None,
            SummationMethod::Tree { .. } => Some(QuadTree::build(&pos, &weight)),
        };
        Self {
            pos,
            weight,
            slot,
            model,
            tree,
        }
    }

    pub fn from_particles(particles: &[Particle], model: FieldModel) -> Self {
        let pos: Vec<Vec2> = particles.iter().map(|p| p.x()).collect();
        let w: Vec<f64> = particles.iter().map(|p| p.weight).collect();
        Self::new(&pos, &w, model)
    }

    pub fn model(&self) -> &FieldModel {
        &self.model
    }

    fn excluded_slot(&self, exclude: Option<usize>) -> Option<usize> {
        exclude.and_then(|i| self.slot.get(i).copied().flatten())
    }

    /// Field at `x`, leaving out the source with original index `exclude`.
    pub fn field_at(&self, x: Vec2, exclude: Option<usize>) -> Result<Vec2> {
        let skip = self.excluded_slot(exclude);
        match (&self.tree, self.model.method) {
            (Some(tree), SummationMethod::Tree { opening_angle }) => {
                tree.field(x, skip, opening_angle, &self.pos, &self.weight, self.model.blob_width)
            }
            _ => direct_field(x, skip, &self.pos, &self.weight, self.model.blob_width),
        }
    }

    /// Log potential at `x`, leaving out the source with original index `exclude`.
    pub fn potential_at(&self, x: Vec2, exclude: Option<usize>) -> Result<f64> {
        let skip = self.excluded_slot(exclude);
        match (&self.tree, self.model.method) {
            (Some(tree), SummationMethod::Tree { opening_angle }) => {
                tree.potential(x, skip, opening_angle, &self.pos, &self.weight, self.model.blob_width)
            }
            _ => direct_potential(x, skip, &self.pos, &self.weight, self.model.blob_width),
        }
    }

    /// Field at each of `targets`, evaluated in parallel.
    pub fn field_batch(&self, targets: &[Vec2]) -> Result<Vec<Vec2>> {
        targets.par_iter().map(|&x| self.field_at(x, None)).collect()
    }

    /// Field at each source position of the original list (including
    /// zero-weight ones), each excluding its own contribution.
    pub fn field_at_own_positions(&self, positions: &[Vec2]) -> Result<Vec<Vec2>> {
        positions
            .par_iter()
            .enumerate()
            .map(|(i, &x)| self.field_at(x, Some(i)))
            .collect()
    }
}

fn singular(x: Vec2) -> Error {
    Error::Singularity(format!(
        "plasma field evaluated on a source at {x:?} with zero blob width"
    ))
}

fn direct_field(x: Vec2, skip: Option<usize>, pos: &[Vec2], weight: &[f64], blob: f64) -> Result<Vec2> {
    let c2 = blob * blob;
    let skip = skip.unwrap_or(usize::MAX);
    let mut ax = CompensatedSum::new();
    let mut ay = CompensatedSum::new();
    for (j, (&y, &w)) in pos.iter().zip(weight).enumerate() {
        if j == skip {
            continue;
        }
        let dx = x.x - y.x;
        let dy = x.y - y.y;
        let r2 = dx * dx + dy * dy;
        if r2 == 0.0 && c2 == 0.0 {
            return Err(singular(x));
        }
        let s = w / r2.max(c2);
        ax.add(dx * s);
        ay.add(dy * s);
    }
    Ok(Vec2::new(ax.value(), ay.value()))
}

fn direct_potential(x: Vec2, skip: Option<usize>, pos: &[Vec2], weight: &[f64], blob: f64) -> Result<f64> {
    let skip = skip.unwrap_or(usize::MAX);
    let mut acc = CompensatedSum::new();
    for (j, (&y, &w)) in pos.iter().zip(weight).enumerate() {
        if j == skip {
            continue;
        }
        let r = (x - y).norm();
        if r == 0.0 && blob == 0.0 {
            return Err(singular(x));
        }
        acc.add(w * ln_core(r, blob));
    }
    Ok(acc.value())
}

/// Plasma field at `x`: `sum_j w_j K(x - y_j)`.
pub fn plasma_field_at(x: Vec2, particles: &[Particle], model: &FieldModel) -> Result<Vec2> {
    PlasmaSources::from_particles(particles, *model).field_at(x, None)
}

/// Plasma field at every target; parallel and deterministic.
pub fn plasma_field_batch(targets: &[Vec2], particles: &[Particle], model: &FieldModel) -> Result<Vec<Vec2>> {
    PlasmaSources::from_particles(particles, *model).field_batch(targets)
}

/// Plasma log potential `sum_j w_j ln_blob |x - y_j|`.
pub fn plasma_potential_at(x: Vec2, particles: &[Particle], model: &FieldModel) -> Result<f64> {
    PlasmaSources::from_particles(particles, *model).potential_at(x, None)
}

/// `sum_j w_j |v_j| / max(|x - y_j|, blob)`: the speed-weighted inverse
/// distance integral. Always summed directly.
pub fn momentum_kernel_integral(x: Vec2, particles: &[Particle], model: &FieldModel) -> Result<f64> {
    momentum_kernel_excluding(x, particles, model, None)
}

pub(crate) fn momentum_kernel_excluding(
    x: Vec2,
    particles: &[Particle],
    model: &FieldModel,
    exclude: Option<usize>,
) -> Result<f64> {
    let blob = model.blob_width();
    let mut acc = CompensatedSum::new();
    for (j, p) in particles.iter().enumerate() {
        if Some(j) == exclude || p.weight == 0.0 {
            continue;
        }
        let r = (x - p.x()).norm();
        if r == 0.0 && blob == 0.0 {
            return Err(singular(x));
        }
        acc.add(p.weight * p.v().norm() / r.max(blob));
    }
    Ok(acc.value())
}

/// `sum_j w_j v_j . K(x - y_j)`, the rate at which the plasma potential at a
/// fixed point decreases as the sources move: `d/dt Phi(x) = -flux`.
pub fn momentum_flux_at(x: Vec2, particles: &[Particle], model: &FieldModel) -> Result<f64> {
    momentum_flux_excluding(x, particles, model, None)
}

pub(crate) fn momentum_flux_excluding(
    x: Vec2,
    particles: &[Particle],
    model: &FieldModel,
    exclude: Option<usize>,
) -> Result<f64> {
    let blob = model.blob_width();
    let mut acc = CompensatedSum::new();
    for (j, p) in particles.iter().enumerate() {
        if Some(j) == exclude || p.weight == 0.0 {
            continue;
        }
        let z = x - p.x();
        if z == Vec2::ZERO && blob == 0.0 {
            return Err(singular(x));
        }
        acc.add(p.weight * p.v().dot(kernel_core(z, blob)));
    }
    Ok(acc.value())
}

#[derive(Debug, Clone)]
struct Node {
    center: Vec2,
    half: f64,
    mass: f64,
    com: Vec2,
    /// Index of the first of four consecutive children, or 0 for a leaf.
    first_child: u32,
    /// Range into the permuted source order (leaves only).
    start: u32,
    end: u32,
}

/// Quadtree over weighted sources with monopole moments.
#[derive(Debug, Clone)]
struct QuadTree {
    nodes: Vec<Node>,
    /// Source indices, permuted so every leaf owns a contiguous range.
    order: Vec<usize>,
}

impl QuadTree {
    fn build(pos: &[Vec2], weight: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..pos.len()).collect();
        let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for &p in pos {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let (center, half) = if pos.is_empty() {
            (Vec2::ZERO, 1.0)
        } else {
            let half = 0.5 * (hi.x - lo.x).max(hi.y - lo.y).max(1e-12) * (1.0 + 1e-9);
            ((lo + hi) * 0.5, half)
        };
        let mut tree = QuadTree {
            nodes: vec![Node {
                center,
                half,
                mass: 0.0,
                com: Vec2::ZERO,
                first_child: 0,
                start: 0,
                end: pos.len() as u32,
            }],
            order: Vec::new(),
        };
        let n = order.len();
        tree.subdivide(0, &mut order[..], 0, pos, weight, 0);
        debug_assert_eq!(n, order.len());
        tree.order = order;
        tree
    }

    fn subdivide(&mut self, node: usize, idx: &mut [usize], offset: usize, pos: &[Vec2], weight: &[f64], depth: usize) {
        let mut mass = CompensatedSum::new();
        let mut moment = CompensatedVec2::new();
        for &i in idx.iter() {
            mass.add(weight[i]);
            moment.add(pos[i] * weight[i]);
        }
        let m = mass.value();
        let center = self.nodes[node].center;
        self.nodes[node].mass = m;
        self.nodes[node].com = if m > 0.0 { moment.value() / m } else { center };
        self.nodes[node].start = offset as u32;
        self.nodes[node].end = (offset + idx.len()) as u32;
        if idx.len() <= LEAF_CAPACITY || depth >= MAX_DEPTH {
            return;
        }
        let half = self.nodes[node].half;
        // stable partition into quadrants: (x<c, y<c), (x>=c, y<c), (x<c, y>=c), (x>=c, y>=c)
        let quadrant = |p: Vec2| (p.x >= center.x) as usize + 2 * (p.y >= center.y) as usize;
        let mut buckets: [Vec<usize>; 4] = Default::default();
        for &i in idx.iter() {
            buckets[quadrant(pos[i])].push(i);
        }
        let first = self.nodes.len();
        self.nodes[node].first_child = first as u32;
        for q in 0..4 {
            let sx = if q & 1 == 1 { 0.5 } else { -0.5 };
            let sy = if q & 2 == 2 { 0.5 } else { -0.5 };
            self.nodes.push(Node {
                center: center + Vec2::new(sx * half, sy * half),
                half: 0.5 * half,
                mass: 0.0,
                com: Vec2::ZERO,
                first_child: 0,
                start: 0,
                end: 0,
            });
        }
        let mut cursor = 0;
        for (q, bucket) in buckets.iter().enumerate() {
            let len = bucket.len();
            idx[cursor..cursor + len].copy_from_slice(bucket);
            let (_, rest) = idx.split_at_mut(cursor);
            self.subdivide(first + q, &mut rest[..len], offset + cursor, pos, weight, depth + 1);
            cursor += len;
        }
    }

    fn contains(node: &Node, x: Vec2) -> bool {
        (x.x - node.center.x).abs() <= node.half && (x.y - node.center.y).abs() <= node.half
    }

    /// Visits accepted monopoles and leaf sources in a fixed order.
    fn walk(
        &self,
        x: Vec2,
        skip: Option<usize>,
        theta: f64,
        mut on_monopole: impl FnMut(f64, Vec2),
        mut on_source: impl FnMut(usize) -> Result<()>,
    ) -> Result<()> {
        let mut stack = vec![0usize];
        while let Some(k) = stack.pop() {
            let node = &self.nodes[k];
            if node.mass <= 0.0 {
                continue;
            }
            if node.first_child == 0 {
                for &i in &self.order[node.start as usize..node.end as usize] {
                    if Some(i) != skip {
                        on_source(i)?;
                    }
                }
                continue;
            }
            let d = (x - node.com).norm();
            if !Self::contains(node, x) && 2.0 * node.half < theta * d {
                on_monopole(node.mass, node.com);
            } else {
                let first = node.first_child as usize;
                // reversed push so children are visited in quadrant order
                for q in (0..4).rev() {
                    stack.push(first + q);
                }
            }
        }
        Ok(())
    }

    fn field(&self, x: Vec2, skip: Option<usize>, theta: f64, pos: &[Vec2], weight: &[f64], blob: f64) -> Result<Vec2> {
        let mut acc = CompensatedVec2::new();
        let c2 = blob * blob;
        let mut far = CompensatedVec2::new();
        self.walk(
            x,
            skip,
            theta,
            |m, com| far.add(kernel_core(x - com, blob) * m),
            |i| {
                let z = x - pos[i];
                let r2 = z.norm_squared();
                if r2 == 0.0 && c2 == 0.0 {
                    return Err(singular(x));
                }
                acc.add(z * (weight[i] / r2.max(c2)));
                Ok(())
            },
        )?;
        Ok(acc.value() + far.value())
    }

    fn potential(&self, x: Vec2, skip: Option<usize>, theta: f64, pos: &[Vec2], weight: &[f64], blob: f64) -> Result<f64> {
        let mut acc = CompensatedSum::new();
        let mut far = CompensatedSum::new();
        self.walk(
            x,
            skip,
            theta,
            |m, com| far.add(m * ln_core((x - com).norm(), blob)),
            |i| {
                let r = (x - pos[i]).norm();
                if r == 0.0 && blob == 0.0 {
                    return Err(singular(x));
                }
                acc.add(weight[i] * ln_core(r, blob));
                Ok(())
            },
        )?;
        Ok(acc.value() + far.value())
    }
}
