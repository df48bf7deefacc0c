use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use viewdiff::geometry::{Camera, Pose};
use viewdiff::image::PosedImage;
use viewdiff::scenes::{orbit_pose, random_hemisphere_pose, render_scene, SceneSpec};
use viewdiff::scoring::{
    consistency_score, holdout_indices, psnr, render_field, scene_bounds, ssim, train_field, FieldConfig,
};

fn sphere_views(n: usize, size: usize) -> Vec<PosedImage> {
    let spec = SceneSpec::sphere(0.6, [0.8, 0.3, 0.2]);
    let camera = Camera::centered(size as f64, size, size).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    (0..n)
        .map(|_| {
            let pose = random_hemisphere_pose(&mut rng, (2.0, 2.5)).unwrap();
            PosedImage {
                image: render_scene(&spec, &pose, &camera).unwrap(),
                pose,
                camera,
            }
        })
        .collect()
}

#[test]
fn bounds_follow_camera_distances() {
    let poses = [orbit_pose(2.0, 0.0, 0.3).unwrap(), orbit_pose(2.0, 1.5, 0.8).unwrap()];
    let (near, far) = scene_bounds(&poses).unwrap();
    assert!((near - 0.75).abs() < 1e-12);
    assert!((far - 3.0).abs() < 1e-12);
}

#[test]
fn consistent_sphere_views_score_above_25_db() {
    let views = sphere_views(40, 32);
    let holdout = holdout_indices(views.len(), 0.1, 0, &[]).unwrap();
    assert_eq!(holdout.len(), 4);
    let (score, tf, renders) = consistency_score("sphere", &views, &[], &holdout, &FieldConfig::default()).unwrap();
    assert_eq!(score.train_views, 36);
    assert_eq!(renders.len(), 4);
    assert!(tf.losses.iter().all(|l| l.is_finite()));
    assert!(score.psnr > 25.0, "held-out psnr {}", score.psnr);
    assert!(score.ssim.is_finite());
}

/// Mean over channels of the spatial standard deviation.
fn channel_std(data: &[f32]) -> f64 {
    (0..3)
        .map(|c| {
            let v: Vec<f64> = data.iter().skip(c).step_by(3).map(|&x| x as f64).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        })
        .sum::<f64>()
        / 3.0
}

#[test]
fn untrained_field_renders_near_uniform_images() {
    let views = sphere_views(4, 16);
    let refs: Vec<&PosedImage> = views.iter().collect();
    let cfg = FieldConfig {
        steps: 0,
        ..FieldConfig::default()
    };
    let tf = train_field(&refs, &cfg).unwrap();
    assert!(tf.losses.is_empty());
    let img = render_field(&tf, &views[0].pose, &views[0].camera).unwrap();
    let (flat, truth) = (channel_std(&img.data), channel_std(&views[0].image.data));
    assert!(flat < 0.25 * truth, "untrained std {flat} vs ground truth {truth}");
}

#[test]
fn renders_are_bit_identical_across_calls() {
    let views = sphere_views(4, 12);
    let refs: Vec<&PosedImage> = views.iter().collect();
    let cfg = FieldConfig {
        steps: 5,
        ..FieldConfig::default()
    };
    let tf = train_field(&refs, &cfg).unwrap();
    let pose = Pose::look_at(
        nalgebra::Vector3::new(0.3, -2.1, 0.9),
        nalgebra::Vector3::zeros(),
        nalgebra::Vector3::z(),
    )
    .unwrap();
    let a = render_field(&tf, &pose, &views[0].camera).unwrap();
    let b = render_field(&tf, &pose, &views[0].camera).unwrap();
    assert_eq!(a, b);
}

#[test]
fn holdout_is_reused_and_conditioning_is_never_held_out() {
    let a = holdout_indices(251, 0.1, 7, &[0]).unwrap();
    let b = holdout_indices(251, 0.1, 7, &[0]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 25);
    assert!(!a.contains(&0));
    let views = sphere_views(5, 8);
    assert!(consistency_score("s", &views, &[1], &[1], &FieldConfig::default()).is_err());
}

#[test]
fn metrics_are_symmetric_on_rendered_views() {
    let views = sphere_views(2, 16);
    let (a, b) = (&views[0].image, &views[1].image);
    assert_eq!(psnr(a, b).unwrap(), psnr(b, a).unwrap());
    assert!((ssim(a, b).unwrap() - ssim(b, a).unwrap()).abs() < 1e-12);
    assert_eq!(psnr(a, a).unwrap(), 99.0);
}
