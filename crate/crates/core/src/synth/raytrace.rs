//! Exact ray casting against spheres, vertical-axis boxes and the floor square.

use nalgebra::Vector3;

use super::{FloorPattern, ObjectState, Rgb, SceneSpec, Shape};
use crate::geometry::{CameraModel, Ray};

/// One camera's RGB-D image at one timestep.
///
/// `rgb` is row-major `[height, width, 3]` in `[0, 1]`; `depth` is row-major
/// `[height, width]` camera-frame z in meters, `+inf` where nothing was hit.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub width: usize,
    pub height: usize,
    pub camera: usize,
    pub timestep: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
}

impl RgbdFrame {
    pub fn pixel_rgb(&self, i: usize, j: usize) -> [f32; 3] {
        let k = 3 * (j * self.width + i);
        [self.rgb[k], self.rgb[k + 1], self.rgb[k + 2]]
    }

    pub fn pixel_depth(&self, i: usize, j: usize) -> f32 {
        self.depth[j * self.width + i]
    }
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    color: Rgb,
    object: Option<usize>,
}

const EPS: f64 = 1e-9;

fn hit_sphere(ray: &Ray, c: &Vector3<f64>, r: f64) -> Option<(f64, Vector3<f64>)> {
    let oc = ray.origin - c;
    let b = oc.dot(&ray.direction);
    let cc = oc.norm_squared() - r * r;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = if -b - s > EPS { -b - s } else { -b + s };
    (t > EPS).then(|| (t, (ray.at(t) - c) / r))
}

fn hit_box(ray: &Ray, c: &Vector3<f64>, half: f64, yaw: f64) -> Option<(f64, Vector3<f64>)> {
    let (sn, cs) = yaw.sin_cos();
    // Rotate into the box frame by -yaw about z.
    let to_local = |v: Vector3<f64>| Vector3::new(cs * v.x + sn * v.y, -sn * v.x + cs * v.y, v.z);
    let o = to_local(ray.origin - c);
    let d = to_local(ray.direction);
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis_near = 0;
    let mut axis_far = 0;
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            if o[a].abs() > half {
                return None;
            }
            continue;
        }
        let mut t0 = (-half - o[a]) / d[a];
        let mut t1 = (half - o[a]) / d[a];
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            axis_near = a;
        }
        if t1 < t_far {
            t_far = t1;
            axis_far = a;
        }
    }
    if t_near > t_far {
        return None;
    }
    let (t, axis, sign) = if t_near > EPS {
        (t_near, axis_near, -d[axis_near].signum())
    } else if t_far > EPS {
        (t_far, axis_far, d[axis_far].signum())
    } else {
        return None;
    };
    let mut n = Vector3::zeros();
    n[axis] = sign;
    let world = Vector3::new(cs * n.x - sn * n.y, sn * n.x + cs * n.y, n.z);
    Some((t, world))
}

fn floor_color(spec: &SceneSpec, p: &Vector3<f64>) -> Rgb {
    let f = &spec.floor;
    match &f.pattern {
        FloorPattern::Solid => f.color,
        FloorPattern::Checker { cell, color } => {
            let k = (p.x / cell).floor() as i64 + (p.y / cell).floor() as i64;
            if k.rem_euclid(2) == 0 {
                f.color
            } else {
                *color
            }
        }
        FloorPattern::Ramp { color } => {
            let s = ((p.x / f.half_extent + 1.0) * 0.5).clamp(0.0, 1.0);
            [
                f.color[0] + s * (color[0] - f.color[0]),
                f.color[1] + s * (color[1] - f.color[1]),
                f.color[2] + s * (color[2] - f.color[2]),
            ]
        }
    }
}

fn cast(spec: &SceneSpec, states: &[ObjectState], ray: &Ray, objects_only: bool) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |h: Hit| {
        if best.as_ref().is_none_or(|b| h.t < b.t) {
            best = Some(h);
        }
    };
    for (i, (o, s)) in spec.objects.iter().zip(states).enumerate() {
        let c = Vector3::from(s.position);
        let hit = match o.shape {
            Shape::Sphere => hit_sphere(ray, &c, o.size),
            Shape::Box => hit_box(ray, &c, o.size, s.yaw),
        };
        if let Some((t, normal)) = hit {
            consider(Hit {
                t,
                normal,
                color: o.color,
                object: Some(i),
            });
        }
    }
    if !objects_only && ray.direction.z.abs() > 1e-300 {
        let f = &spec.floor;
        let t = (f.height - ray.origin.z) / ray.direction.z;
        if t > EPS {
            let p = ray.at(t);
            if p.x.abs() <= f.half_extent && p.y.abs() <= f.half_extent {
                let up = if ray.direction.z < 0.0 { 1.0 } else { -1.0 };
                consider(Hit {
                    t,
                    normal: Vector3::new(0.0, 0.0, up),
                    color: floor_color(spec, &p),
                    object: None,
                });
            }
        }
    }
    best
}

fn shade(spec: &SceneSpec, states: &[ObjectState], ray: &Ray, hit: &Hit) -> Rgb {
    let light = &spec.light;
    let l = Vector3::from(light.direction).normalize();
    let mut lambert = hit.normal.dot(&l).max(0.0);
    if light.shadows && lambert > 0.0 {
        let p = ray.at(hit.t) + hit.normal * 1e-6;
        let shadow_ray = Ray::new(p, l);
        if let Some(blocker) = cast(spec, states, &shadow_ray, true) {
            if blocker.object != hit.object || hit.object.is_none() {
                lambert = 0.0;
            }
        }
    }
    let k = light.ambient + light.diffuse * lambert;
    hit.color.map(|c| (c * k).clamp(0.0, 1.0))
}

/// Renders one camera view of the scene in the given object states.
pub fn render_frame(
    spec: &SceneSpec,
    states: &[ObjectState],
    cam: &CameraModel,
    camera: usize,
    timestep: usize,
) -> RgbdFrame {
    let (w, h) = (cam.width, cam.height);
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let forward = cam.forward();
    for j in 0..h {
        for i in 0..w {
            let ray = cam.ray_through_pixel(i, j);
            match cast(spec, states, &ray, false) {
                Some(hit) => {
                    let c = shade(spec, states, &ray, &hit);
                    rgb.extend(c.iter().map(|&x| x as f32));
                    depth.push((hit.t * ray.direction.dot(&forward)) as f32);
                }
                None => {
                    rgb.extend(spec.background.iter().map(|&x| x as f32));
                    depth.push(f32::INFINITY);
                }
            }
        }
    }
    RgbdFrame {
        width: w,
        height: h,
        camera,
        timestep,
        rgb,
        depth,
    }
}

/// Renders every state sequence frame from every camera; time-major.
pub fn render_analytic(
    spec: &SceneSpec,
    states: &[Vec<ObjectState>],
    cameras: &[CameraModel],
) -> Vec<Vec<RgbdFrame>> {
    states
        .iter()
        .enumerate()
        .map(|(t, s)| {
            cameras
                .iter()
                .enumerate()
                .map(|(c, cam)| render_frame(spec, s, cam, c, t))
                .collect()
        })
        .collect()
}
