mod common;

use common::{tiny_config, tiny_dataset};
use proptest::prelude::*;
use vpd::model::Model;
use vpd::particles::ParticleSet;
use vpd::scenekit::{
    apply_edits, benchmark_csv, evaluate_rollout, particle_scaling_benchmark, psnr, save_strip,
    ssim, Action, Edit, EditScript, Selection, PSNR_CAP,
};
use vpd::vpt::Split;
use vpd_diff::Tensor;

fn cloud(n: usize) -> ParticleSet {
    let pos = (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [t * 2.0 - 1.0, (t * 7.0).sin(), t * 0.5]
        })
        .collect();
    let feat = (0..n * 2).map(|i| i as f32).collect();
    ParticleSet::new(pos, Tensor::new(vec![n, 2], feat).unwrap(), 1).unwrap()
}

fn edit(select: Selection, action: Action) -> EditScript {
    EditScript {
        edits: vec![Edit {
            select,
            action,
            timestep: None,
        }],
    }
}

fn everything() -> Selection {
    Selection::Box {
        min: [-10.0; 3],
        max: [10.0; 3],
    }
}

#[test]
fn empty_script_is_identity() {
    let p = cloud(50);
    let (q, warnings) = apply_edits(&p, &EditScript::default()).unwrap();
    assert_eq!(q, p);
    assert!(warnings.is_empty());
}

#[test]
fn deleting_everything_leaves_nothing() {
    let p = cloud(50);
    let (q, _) = apply_edits(&p, &edit(everything(), Action::Delete)).unwrap();
    assert!(q.is_empty());
    assert_eq!(q.feature_dim(), 2);
}

#[test]
fn empty_selection_is_a_warning() {
    let p = cloud(50);
    let far = Selection::Sphere {
        center: [50.0; 3],
        radius: 1.0,
    };
    let (q, warnings) = apply_edits(&p, &edit(far, Action::Delete)).unwrap();
    assert_eq!(q, p);
    assert_eq!(warnings.len(), 1);
}

#[test]
fn selections_use_pre_edit_positions() {
    let p = cloud(10);
    let low = Selection::Box {
        min: [-10.0, -10.0, -1.0],
        max: [10.0, 10.0, 0.1],
    };
    let script = EditScript {
        edits: vec![
            Edit {
                select: everything(),
                action: Action::Translate { offset: [0.0, 0.0, -5.0] },
                timestep: None,
            },
            Edit {
                select: low.clone(),
                action: Action::Delete,
                timestep: None,
            },
        ],
    };
    let (q, _) = apply_edits(&p, &script).unwrap();
    let originally_low = p.positions.iter().filter(|x| low.contains(x)).count();
    assert_eq!(q.len(), p.len() - originally_low);
    assert!(q.positions.iter().all(|x| x[2] < -4.0));
}

#[test]
fn recolor_scales_selected_features_only() {
    let p = cloud(4);
    let first = Selection::Sphere {
        center: p.positions[0],
        radius: 1e-9,
    };
    let (q, _) = apply_edits(&p, &edit(first, Action::RecolorFeature { scale: 2.0 })).unwrap();
    assert_eq!(q.features.row(0), &[0.0, 2.0]);
    assert_eq!(q.features.row(1), p.features.row(1));
    assert_eq!(q.positions, p.positions);
}

#[test]
fn timestep_filter() {
    let p = cloud(5);
    let mut script = edit(everything(), Action::Delete);
    script.edits[0].timestep = Some(3);
    assert_eq!(apply_edits(&p, &script).unwrap().0, p);
    script.edits[0].timestep = Some(1);
    assert!(apply_edits(&p, &script).unwrap().0.is_empty());
}

#[test]
fn script_round_trips_through_toml() {
    let text = r#"
        [[edits]]
        select = { kind = "box", min = [-1.0, -1.0, -0.1], max = [1.0, 1.0, 0.05] }
        action = { kind = "delete" }

        [[edits]]
        select = { kind = "sphere", center = [0.0, 0.0, 0.5], radius = 0.3 }
        action = { kind = "translate", offset = [0.0, 0.0, -0.5] }
        timestep = 1
    "#;
    let s = EditScript::from_toml(text).unwrap();
    assert_eq!(s.edits.len(), 2);
    assert_eq!(EditScript::from_toml(&s.to_toml()).unwrap(), s);
    assert!(EditScript::from_toml("[[edits]]\nselect = { kind = \"cone\" }\naction = { kind = \"delete\" }").is_err());
}

proptest! {
    #[test]
    fn delete_is_idempotent(cx in -1.0f64..1.0, r in 0.0f64..1.5) {
        let p = cloud(40);
        let s = edit(Selection::Sphere { center: [cx, 0.0, 0.2], radius: r }, Action::Delete);
        let (once, _) = apply_edits(&p, &s).unwrap();
        let (twice, _) = apply_edits(&once, &s).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn delete_nothing_is_identity(cx in 5.0f64..9.0) {
        let p = cloud(40);
        let s = edit(Selection::Sphere { center: [cx, cx, cx], radius: 0.5 }, Action::Delete);
        prop_assert_eq!(apply_edits(&p, &s).unwrap().0, p);
    }

    #[test]
    fn translate_then_inverse_restores(dx in -2.0f64..2.0, dy in -2.0f64..2.0, dz in -2.0f64..2.0) {
        let p = cloud(40);
        let sel = Selection::Box { min: [-10.0; 3], max: [10.0; 3] };
        let (q, _) = apply_edits(&p, &edit(sel, Action::Translate { offset: [dx, dy, dz] })).unwrap();
        let back = Selection::Box { min: [-20.0; 3], max: [20.0; 3] };
        let (r, _) = apply_edits(&q, &edit(back, Action::Translate { offset: [-dx, -dy, -dz] })).unwrap();
        for (a, b) in r.positions.iter().zip(&p.positions) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn psnr_symmetric_and_decreasing(base in 0.2f32..0.6, d1 in 0.01f32..0.1, d2 in 0.11f32..0.3) {
        let a = vec![base; 48];
        let b1: Vec<f32> = a.iter().map(|x| x + d1).collect();
        let b2: Vec<f32> = a.iter().map(|x| x + d2).collect();
        prop_assert_eq!(psnr(&a, &b1).unwrap(), psnr(&b1, &a).unwrap());
        prop_assert!(psnr(&a, &b1).unwrap() > psnr(&a, &b2).unwrap());
    }
}

#[test]
fn psnr_reference_values() {
    let a: Vec<f32> = (0..300).map(|i| (i % 7) as f32 / 10.0).collect();
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let b: Vec<f32> = a.iter().map(|x| x + 0.1).collect();
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    // A quarter of the values off by one gives MSE 0.25.
    let z = vec![0.0f32; 400];
    let h: Vec<f32> = (0..400).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let expected = -10.0 * 0.25f64.log10();
    assert!((psnr(&z, &h).unwrap() - expected).abs() < 1e-9);
    assert!((expected - 6.0206).abs() < 1e-4);
    assert!(psnr(&a, &a[1..]).is_err());
}

/// SSIM written out window by window with an 11-tap Gaussian, sigma 1.5.
fn ssim_oracle(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let n = 11;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let s: f64 = g.iter().sum();
    let (c1, c2) = (0.0001, 0.0009);
    let mut acc = 0.0;
    let mut cnt = 0.0;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let wsum = |f: &dyn Fn(usize) -> f64| -> f64 {
                let mut t = 0.0;
                for j in 0..n {
                    for i in 0..n {
                        t += g[i] * g[j] / (s * s) * f((y + j) * w + x + i);
                    }
                }
                t
            };
            let ma = wsum(&|k| a[k]);
            let mb = wsum(&|k| b[k]);
            let va = wsum(&|k| (a[k] - ma).powi(2));
            let vb = wsum(&|k| (b[k] - mb).powi(2));
            let cov = wsum(&|k| (a[k] - ma) * (b[k] - mb));
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            cnt += 1.0;
        }
    }
    acc / cnt
}

fn rgb_from_gray(v: &[f64]) -> Vec<f32> {
    v.iter().flat_map(|&x| [x as f32; 3]).collect()
}

#[test]
fn ssim_reference_values() {
    let (w, h) = (16, 13);
    let a: Vec<f64> = (0..w * h).map(|k| ((k * 37 % 11) as f64) / 10.0).collect();
    let b: Vec<f64> = a.iter().enumerate().map(|(k, x)| (x * 0.7 + (k % 5) as f64 * 0.05).min(1.0)).collect();
    let (ra, rb) = (rgb_from_gray(&a), rgb_from_gray(&b));
    assert!((ssim(&ra, &ra, w, h).unwrap() - 1.0).abs() < 1e-9);
    let got = ssim(&ra, &rb, w, h).unwrap();
    assert!((got - ssim_oracle(&a, &b, w, h)).abs() < 1e-6, "{got}");

    let neg: Vec<f32> = ra.iter().map(|x| 1.0 - x).collect();
    assert!(ssim(&ra, &neg, w, h).unwrap() < 1.0);

    let lo = vec![0.2f32; w * h * 3];
    let hi = vec![0.8f32; w * h * 3];
    let c1 = 1e-4;
    let expected = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
    assert!((ssim(&lo, &hi, w, h).unwrap() - expected).abs() < 1e-6);

    assert!(ssim(&lo[..10 * 10 * 3], &hi[..10 * 10 * 3], 10, 10).is_err());
    assert!(ssim(&lo, &hi[3..], w, h).is_err());
}

#[test]
fn rollout_evaluation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"));
    let mut cfg = tiny_config();
    cfg.train.views = 1;
    let model = Model::init(cfg, 5).unwrap();
    let trajs = data.load_split(Split::Heldout).unwrap();
    let a = evaluate_rollout(&model, &trajs, 3).unwrap();
    let b = evaluate_rollout(&model, &trajs, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.psnr.len(), 3);
    assert!(a.ssim.iter().all(|s| (-1.0..=1.0).contains(s)));
    assert!(a.to_csv().lines().count() == 5);
    assert!(evaluate_rollout(&model, &trajs, 7).is_err());

    let rows = particle_scaling_benchmark(&model, &trajs, 1, &[16, 64]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(benchmark_csv(&rows).starts_with("budget,psnr\n16,"));
    assert!(particle_scaling_benchmark(&model, &trajs, 1, &[64, 16]).is_err());
}

#[test]
fn static_scene_and_static_baseline() {
    // The static-copy baseline reaches the cap on a frozen scene.
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"));
    let mut traj = data.load_split(Split::Heldout).unwrap().remove(0);
    let first = traj.frames[0].clone();
    for (t, views) in traj.frames.iter_mut().enumerate() {
        *views = first.clone();
        views.iter_mut().for_each(|f| f.timestep = t);
    }
    let model = Model::init(tiny_config(), 1).unwrap();
    let r = evaluate_rollout(&model, &[traj], 2).unwrap();
    assert!(r.baseline_psnr.iter().all(|&p| p == PSNR_CAP));
    assert!(r.mean_psnr() < r.mean_baseline_psnr());
}

#[test]
fn strips_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let a = vec![0.5f32; 4 * 3 * 3];
    let path = dir.path().join("s.png");
    save_strip(&path, &[vec![&a, &a], vec![&a]], 4, 3).unwrap();
    let img = image::open(&path).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (8, 6));
    assert_eq!(img.get_pixel(0, 0).0, [128, 128, 128]);
}
