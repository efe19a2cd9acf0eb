//! Primitives, ray intersection, and a binary BVH.

use crate::math::{vec3, Aabb, Vec3};

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3) -> Ray {
        debug_assert!(dir.is_unit(1e-6));
        Ray { origin, dir }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Primitive {
    Triangle {
        p0: Vec3,
        p1: Vec3,
        p2: Vec3,
        material: u32,
    },
    Sphere {
        center: Vec3,
        radius: f64,
        material: u32,
    },
}

impl Primitive {
    pub fn material(&self) -> u32 {
        match self {
            Primitive::Triangle { material, .. } | Primitive::Sphere { material, .. } => *material,
        }
    }

    pub fn aabb(&self) -> Aabb {
        match self {
            Primitive::Triangle { p0, p1, p2, .. } => {
                let mut b = Aabb::EMPTY;
                b.extend_point(*p0);
                b.extend_point(*p1);
                b.extend_point(*p2);
                b
            }
            Primitive::Sphere { center, radius, .. } => Aabb::new(
                *center - Vec3::ONE * *radius,
                *center + Vec3::ONE * *radius,
            ),
        }
    }

    /// Nearest hit in (t_min, t_max); returns (t, geometric normal).
    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<(f64, Vec3)> {
        match self {
            Primitive::Triangle { p0, p1, p2, .. } => {
                // Moller-Trumbore.
                let e1 = *p1 - *p0;
                let e2 = *p2 - *p0;
                let pv = ray.dir.cross(e2);
                let det = e1.dot(pv);
                if det.abs() < 1e-12 {
                    return None;
                }
                let inv_det = 1.0 / det;
                let tv = ray.origin - *p0;
                let u = tv.dot(pv) * inv_det;
                if !(0.0..=1.0).contains(&u) {
                    return None;
                }
                let qv = tv.cross(e1);
                let v = ray.dir.dot(qv) * inv_det;
                if v < 0.0 || u + v > 1.0 {
                    return None;
                }
                let t = e2.dot(qv) * inv_det;
                if t <= t_min || t >= t_max {
                    return None;
                }
                Some((t, e1.cross(e2).normalized()))
            }
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - *center;
                let b = oc.dot(ray.dir);
                let c = oc.length_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let mut t = -b - sq;
                if t <= t_min {
                    t = -b + sq;
                }
                if t <= t_min || t >= t_max {
                    return None;
                }
                let n = (ray.at(t) - *center) / *radius;
                Some((t, n))
            }
        }
    }
}

#[derive(Debug, Clone)]
struct BvhNode {
    aabb: Aabb,
    /// Interior: index of right child (left is node+1). Leaf: start into
    /// the primitive index list, with `count > 0`.
    offset: u32,
    count: u16,
    axis: u8,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(primitives: &[Primitive]) -> Bvh {
        assert!(!primitives.is_empty());
        let mut order: Vec<u32> = (0..primitives.len() as u32).collect();
        let mut nodes = Vec::new();
        let bounds: Vec<Aabb> = primitives.iter().map(|p| p.aabb()).collect();
        let centers: Vec<Vec3> = bounds.iter().map(|b| b.center()).collect();
        Self::build_range(&mut nodes, &mut order, &bounds, &centers, 0, primitives.len());
        Bvh { nodes, order }
    }

    fn build_range(
        nodes: &mut Vec<BvhNode>,
        order: &mut [u32],
        bounds: &[Aabb],
        centers: &[Vec3],
        start: usize,
        end: usize,
    ) -> usize {
        let node_index = nodes.len();
        let mut aabb = Aabb::EMPTY;
        for &i in &order[start..end] {
            aabb.extend(&bounds[i as usize]);
        }
        let count = end - start;
        if count <= LEAF_SIZE {
            nodes.push(BvhNode {
                aabb,
                offset: start as u32,
                count: count as u16,
                axis: 0,
            });
            return node_index;
        }
        let ext = aabb.extent();
        let axis = if ext.x > ext.y && ext.x > ext.z {
            0
        } else if ext.y > ext.z {
            1
        } else {
            2
        };
        let mid = start + count / 2;
        order[start..end].select_nth_unstable_by(mid - start, |a, b| {
            centers[*a as usize]
                .axis(axis)
                .total_cmp(&centers[*b as usize].axis(axis))
        });
        nodes.push(BvhNode {
            aabb,
            offset: 0,
            count: 0,
            axis: axis as u8,
        });
        Self::build_range(nodes, order, bounds, centers, start, mid);
        let right = Self::build_range(nodes, order, bounds, centers, mid, end);
        nodes[node_index].offset = right as u32;
        node_index
    }

    /// Nearest intersection beyond `t_min`; identical result to testing
    /// every primitive.
    pub fn intersect(
        &self,
        primitives: &[Primitive],
        ray: &Ray,
        t_min: f64,
    ) -> Option<(usize, f64, Vec3)> {
        let inv_dir = vec3(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        let mut best: Option<(usize, f64, Vec3)> = None;
        let mut t_max = f64::INFINITY;
        let mut stack = [0u32; 64];
        let mut sp = 0usize;
        stack[sp] = 0;
        sp += 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if !node.aabb.hit(ray.origin, inv_dir, t_max) {
                continue;
            }
            if node.count > 0 {
                let start = node.offset as usize;
                for &pi in &self.order[start..start + node.count as usize] {
                    if let Some((t, n)) =
                        primitives[pi as usize].intersect(ray, t_min, t_max)
                    {
                        t_max = t;
                        best = Some((pi as usize, t, n));
                    }
                }
            } else {
                // Near child first for earlier t_max cutoffs.
                let left = stack[sp] + 1;
                let right = node.offset;
                let (first, second) = if ray.dir.axis(node.axis as usize) >= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                stack[sp] = second;
                sp += 1;
                stack[sp] = first;
                sp += 1;
            }
        }
        best
    }
}
