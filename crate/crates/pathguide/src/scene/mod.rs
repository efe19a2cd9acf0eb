//! Scene representation and ingestion: JSON scene documents, geometry
//! with a BVH, materials, emitters, and the pinhole camera.
//!
//! The on-disk format is documented in `docs/scene-format.md`.

pub mod bsdf;
pub mod geometry;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bsdf::{bsdf_eval, bsdf_pdf, bsdf_sample, BsdfSample, Material, MaterialKind};
pub use geometry::{Bvh, Primitive, Ray};

use crate::math::{vec3, Aabb, Vec3};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown material {0:?} referenced by primitive {1}")]
    DanglingMaterial(String, usize),
    #[error("duplicate material name {0:?}")]
    DuplicateMaterial(String),
    #[error("scene contains no primitives")]
    Empty,
    #[error("degenerate triangle at primitive {0}")]
    DegenerateTriangle(usize),
    #[error("sphere {0} has non-positive radius")]
    BadSphere(usize),
    #[error("glossy material {0:?} needs roughness in (0, 1]")]
    BadRoughness(String),
    #[error("camera field of view must be in (0, 180) degrees")]
    BadFov,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraDesc {
    pub position: Vec3,
    pub look_at: Vec3,
    #[serde(default = "default_up")]
    pub up: Vec3,
    /// Vertical field of view, degrees.
    pub fov_y: f64,
}

fn default_up() -> Vec3 {
    vec3(0.0, 1.0, 0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum PrimitiveDesc {
    Triangle {
        vertices: [Vec3; 3],
        material: String,
    },
    /// Parallelogram: corner plus two edge vectors; expands to two
    /// triangles with consistent winding.
    Quad {
        corner: Vec3,
        edge_u: Vec3,
        edge_v: Vec3,
        material: String,
    },
    Sphere {
        center: Vec3,
        radius: f64,
        material: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDesc {
    pub camera: CameraDesc,
    pub materials: Vec<Material>,
    pub primitives: Vec<PrimitiveDesc>,
}

#[derive(Debug, Clone)]
pub struct Camera {
    pub position: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    tan_half_fov: f64,
}

impl Camera {
    pub fn new(desc: &CameraDesc) -> Result<Camera, SceneError> {
        if !(desc.fov_y > 0.0 && desc.fov_y < 180.0) {
            return Err(SceneError::BadFov);
        }
        let forward = (desc.look_at - desc.position).normalized();
        let right = forward.cross(desc.up).normalized();
        let up = right.cross(forward);
        Ok(Camera {
            position: desc.position,
            forward,
            right,
            up,
            tan_half_fov: (desc.fov_y.to_radians() * 0.5).tan(),
        })
    }

    /// Primary ray through film coordinates (s, t) ∈ [0,1]² with (0,0) at
    /// the top-left corner.
    pub fn primary_ray(&self, s: f64, t: f64, aspect: f64) -> Ray {
        let x = (2.0 * s - 1.0) * self.tan_half_fov * aspect;
        let y = (1.0 - 2.0 * t) * self.tan_half_fov;
        Ray::new(
            self.position,
            (self.forward + self.right * x + self.up * y).normalized(),
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Intersection {
    pub position: Vec3,
    /// Shading normal, oriented toward ω_o.
    pub normal: Vec3,
    /// Geometric normal as defined by the primitive's winding.
    pub geo_normal: Vec3,
    pub t: f64,
    pub material: u32,
    pub omega_o: Vec3,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub materials: Vec<Material>,
    pub camera: Camera,
    pub aabb: Aabb,
    bvh: Bvh,
    ray_epsilon: f64,
}

impl Scene {
    pub fn from_desc(desc: &SceneDesc) -> Result<Scene, SceneError> {
        let mut seen = std::collections::HashSet::new();
        for m in &desc.materials {
            if !seen.insert(m.name.clone()) {
                return Err(SceneError::DuplicateMaterial(m.name.clone()));
            }
            if let MaterialKind::GgxGlossy { roughness } = m.kind {
                if !(roughness > 0.0 && roughness <= 1.0) {
                    return Err(SceneError::BadRoughness(m.name.clone()));
                }
            }
        }
        let lookup = |name: &str, prim: usize| -> Result<u32, SceneError> {
            desc.materials
                .iter()
                .position(|m| m.name == name)
                .map(|i| i as u32)
                .ok_or_else(|| SceneError::DanglingMaterial(name.to_string(), prim))
        };

        let mut primitives = Vec::new();
        for (i, p) in desc.primitives.iter().enumerate() {
            match p {
                PrimitiveDesc::Triangle { vertices, material } => {
                    let material = lookup(material, i)?;
                    push_triangle(&mut primitives, vertices[0], vertices[1], vertices[2], material, i)?;
                }
                PrimitiveDesc::Quad {
                    corner,
                    edge_u,
                    edge_v,
                    material,
                } => {
                    let material = lookup(material, i)?;
                    let a = *corner;
                    let b = *corner + *edge_u;
                    let c = *corner + *edge_u + *edge_v;
                    let d = *corner + *edge_v;
                    push_triangle(&mut primitives, a, b, c, material, i)?;
                    push_triangle(&mut primitives, a, c, d, material, i)?;
                }
                PrimitiveDesc::Sphere {
                    center,
                    radius,
                    material,
                } => {
                    if !(*radius > 0.0) {
                        return Err(SceneError::BadSphere(i));
                    }
                    primitives.push(Primitive::Sphere {
                        center: *center,
                        radius: *radius,
                        material: lookup(material, i)?,
                    });
                }
            }
        }
        if primitives.is_empty() {
            return Err(SceneError::Empty);
        }

        let mut aabb = Aabb::EMPTY;
        for p in &primitives {
            aabb.extend(&p.aabb());
        }
        // Pad so surface points never sit exactly on the grid boundary.
        let pad = aabb.extent().max_component() * 0.01 + 1e-9;
        aabb.min = aabb.min - Vec3::ONE * pad;
        aabb.max = aabb.max + Vec3::ONE * pad;

        let bvh = Bvh::build(&primitives);
        let ray_epsilon = aabb.extent().max_component() * 1e-4;
        Ok(Scene {
            primitives,
            materials: desc.materials.clone(),
            camera: Camera::new(&desc.camera)?,
            aabb,
            bvh,
            ray_epsilon,
        })
    }

    pub fn load(path: &Path) -> Result<Scene, SceneError> {
        let text = std::fs::read_to_string(path)?;
        let desc: SceneDesc = serde_json::from_str(&text)?;
        Scene::from_desc(&desc)
    }

    /// Parses and validates a scene document from raw bytes.
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Scene, SceneError> {
        let desc: SceneDesc = serde_json::from_slice(bytes)?;
        Scene::from_desc(&desc)
    }

    pub fn ray_epsilon(&self) -> f64 {
        self.ray_epsilon
    }

    pub fn material(&self, id: u32) -> &Material {
        &self.materials[id as usize]
    }

    /// Nearest hit beyond the scene-scale epsilon.
    pub fn intersect(&self, ray: &Ray) -> Option<Intersection> {
        let (prim, t, geo_normal) = self.bvh.intersect(&self.primitives, ray, self.ray_epsilon)?;
        let omega_o = -ray.dir;
        let normal = if geo_normal.dot(omega_o) < 0.0 {
            -geo_normal
        } else {
            geo_normal
        };
        Some(Intersection {
            position: ray.at(t),
            normal,
            geo_normal,
            t,
            material: self.primitives[prim].material(),
            omega_o,
        })
    }
}

fn push_triangle(
    out: &mut Vec<Primitive>,
    p0: Vec3,
    p1: Vec3,
    p2: Vec3,
    material: u32,
    desc_index: usize,
) -> Result<(), SceneError> {
    let area2 = (p1 - p0).cross(p2 - p0).length();
    if !(area2 > 1e-12) {
        return Err(SceneError::DegenerateTriangle(desc_index));
    }
    out.push(Primitive::Triangle { p0, p1, p2, material });
    Ok(())
}
