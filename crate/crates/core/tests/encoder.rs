use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpd::encoder::{encode_timestep, init_encoder, EncoderSpec, View};
use vpd::geometry::{CameraModel, RigidTransform, Workspace};
use vpd::synth::RgbdFrame;
use vpd_diff::check::{finite_difference, rel_error};
use vpd_diff::{Graph, ParameterStore, Tensor, Var};

fn camera(eye: [f64; 3], res: usize) -> CameraModel {
    let pose = RigidTransform::look_at(Vector3::from(eye), Vector3::zeros(), Vector3::z()).unwrap();
    CameraModel::with_fov(res, res, 0.8, pose).unwrap()
}

fn frame(rng: &mut ChaCha8Rng, res: usize, cam: usize, t: usize) -> RgbdFrame {
    let n = res * res;
    RgbdFrame {
        width: res,
        height: res,
        camera: cam,
        timestep: t,
        rgb: (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect(),
        depth: (0..n).map(|_| rng.random_range(2.0..3.0)).collect(),
    }
}

fn big_workspace() -> Workspace {
    Workspace {
        min: [-10.0; 3],
        max: [10.0; 3],
    }
}

fn spec(predict_depth: bool, budget: usize) -> EncoderSpec {
    EncoderSpec {
        unet_channels: vec![3, 4, 3, 4 + usize::from(predict_depth)],
        pool_levels: 1,
        feature_dim: 4,
        particle_budget: budget,
        predict_depth,
        depth_prior: 2.5,
    }
}

fn params(spec: &EncoderSpec, seed: u64) -> ParameterStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterStore::new();
    init_encoder(&mut p, spec, &mut rng).unwrap();
    // Zero biases sit on ReLU kinks for constant regions; move them off.
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        for x in p.get_mut(&n).unwrap().data_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    p
}

fn weighted_sum(g: &mut Graph<f64>, v: Var, w: &[f64]) -> Var {
    let shape = g.value(v).shape().to_vec();
    let c = g.constant(Tensor::new(shape, w.to_vec()).unwrap());
    let m = g.mul(v, c).unwrap();
    g.sum(m)
}

fn check_gradients(predict_depth: bool) {
    let sp = spec(predict_depth, 20);
    let base = params(&sp, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cams = [camera([0.0, -2.5, 1.0], 4), camera([2.5, 0.3, 0.8], 4)];
    let frames = [frame(&mut rng, 4, 0, 0), frame(&mut rng, 4, 1, 0)];
    let views: Vec<View> = frames.iter().zip(&cams).map(|(frame, camera)| View { frame, camera }).collect();
    let wp: Vec<f64> = (0..20 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wf: Vec<f64> = (0..20 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ws = big_workspace();
    let loss = |g: &mut Graph<f64>, p: &ParameterStore<f64>| {
        let e = encode_timestep(g, p, &sp, &views, &ws, 7).unwrap();
        assert_eq!(e.particles.len(), 20);
        let a = weighted_sum(g, e.particles.feat, &wf);
        let mut l = if predict_depth {
            let b = weighted_sum(g, e.particles.pos, &wp);
            g.add(a, b).unwrap()
        } else {
            a
        };
        if let Some(d) = e.depth_loss {
            l = g.add(l, d).unwrap();
        }
        l
    };
    let mut g = Graph::new();
    let l = loss(&mut g, &base);
    let grads = g.backward(l).unwrap().params();
    for (name, t) in base.iter() {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let numeric = finite_difference(
            |x| {
                let mut p = base.clone();
                p.get_mut(name).unwrap().data_mut().copy_from_slice(x);
                let mut g = Graph::new();
                let l = loss(&mut g, &p);
                g.value(l).item()
            },
            t.data(),
            1e-6,
        );
        let err = rel_error(analytic.data(), &numeric);
        assert!(err < 1e-4, "{name}: rel err {err}");
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    check_gradients(false);
}

#[test]
fn predicted_depth_gradients_match_finite_differences() {
    check_gradients(true);
}

#[test]
fn particles_sit_on_the_unprojected_pixels() {
    let sp = spec(false, 1000);
    let p = params(&sp, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cams = [camera([0.0, -2.5, 1.0], 8), camera([2.5, 0.3, 0.8], 8)];
    let frames = [frame(&mut rng, 8, 0, 5), frame(&mut rng, 8, 1, 5)];
    let views: Vec<View> = frames.iter().zip(&cams).map(|(frame, camera)| View { frame, camera }).collect();
    let mut g = Graph::new();
    let e = encode_timestep(&mut g, &p, &sp, &views, &big_workspace(), 0).unwrap();
    // Under budget: every pixel of both views is kept, in view-major order.
    assert_eq!(e.particles.len(), 128);
    for (k, &(v, px)) in e.sources.iter().enumerate() {
        assert_eq!((v, px), (k / 64, k % 64));
        let (u, w) = CameraModel::pixel_center(px % 8, px / 8);
        let x = cams[v].unproject(u, w, frames[v].depth[px] as f64).unwrap();
        let got = e.particles.points[k];
        assert!((Vector3::new(got[0], got[1], got[2]) - x).norm() < 1e-12);
    }
}

#[test]
fn workspace_crop_invalid_depth_and_budget() {
    let sp = spec(false, 10);
    let p = params(&sp, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cam = camera([0.0, -2.5, 1.0], 8);
    let mut f = frame(&mut rng, 8, 0, 0);
    for px in 0..20 {
        f.depth[px] = 0.0;
    }
    f.depth[20] = f32::NAN;
    let views = [View { frame: &f, camera: &cam }];
    let tight = Workspace {
        min: [-0.5, -0.5, -0.5],
        max: [0.5, 0.5, 0.5],
    };
    let mut g = Graph::new();
    let all = encode_timestep(&mut g, &p, &spec(false, 1000), &views, &big_workspace(), 0).unwrap();
    assert_eq!(all.particles.len(), 64 - 21);
    let e = encode_timestep(&mut g, &p, &sp, &views, &tight, 9).unwrap();
    assert!(e.particles.len() <= 10);
    assert!(e.particles.points.iter().all(|x| tight.contains(x)));
    let again = encode_timestep(&mut g, &p, &sp, &views, &tight, 9).unwrap();
    assert_eq!(e.sources, again.sources);

    let far = Workspace {
        min: [50.0; 3],
        max: [60.0; 3],
    };
    assert!(encode_timestep(&mut g, &p, &sp, &views, &far, 0).is_err());
}

#[test]
fn mixed_timesteps_are_rejected() {
    let sp = spec(false, 10);
    let p = params(&sp, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cam = camera([0.0, -2.5, 1.0], 4);
    let (a, b) = (frame(&mut rng, 4, 0, 0), frame(&mut rng, 4, 1, 1));
    let views = [View { frame: &a, camera: &cam }, View { frame: &b, camera: &cam }];
    let mut g = Graph::new();
    assert!(encode_timestep(&mut g, &p, &sp, &views, &big_workspace(), 0).is_err());
    assert!(encode_timestep(&mut g, &p, &sp, &[], &big_workspace(), 0).is_err());
}
