use super::*;
use crate::env::{generate_episodes, DatasetConfig};
use crate::model::Ablation;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct two-pass SSIM over every 7×7 window.
fn ssim_oracle(a: &Field, b: &Field) -> f64 {
    let (_, h, w) = a.shape();
    let k = 7;
    let n = 49.0;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut vals = Vec::new();
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let px: Vec<(f64, f64)> = (0..k)
                .flat_map(|y| (0..k).map(move |x| (y, x)))
                .map(|(y, x)| (a.at(0, y0 + y, x0 + x), b.at(0, y0 + y, x0 + x)))
                .collect();
            let ma = px.iter().map(|p| p.0).sum::<f64>() / n;
            let mb = px.iter().map(|p| p.1).sum::<f64>() / n;
            let va = px.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / (n - 1.0);
            let vb = px.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / (n - 1.0);
            let cab = px.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / (n - 1.0);
            vals.push(
                ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
            );
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut r = rng(0);
    for i in 0..100 {
        let (h, w) = (r.gen_range(7..20), r.gen_range(7..20));
        let a = Field::random_uniform(1, h, w, 0.0, 1.0, &mut r);
        let b = if i % 3 == 0 {
            a.map(|v| (v + 0.05).min(1.0))
        } else {
            Field::random_uniform(1, h, w, 0.0, 1.0, &mut r)
        };
        let mut direct = 0.0;
        for y in 0..h {
            for x in 0..w {
                direct += (a.at(0, y, x) - b.at(0, y, x)).powi(2);
            }
        }
        direct /= (h * w) as f64;
        let m = mse(&a, &b).unwrap();
        assert!((m - direct).abs() < 1e-9);
        assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / direct).log10()).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn ssim_identity_and_constants() {
    let mut r = rng(1);
    for _ in 0..20 {
        let a = Field::random_uniform(1, 16, 16, 0.0, 1.0, &mut r);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
    let (x, y) = (0.3, 0.7);
    let c1 = 1e-4;
    let expect = (2.0 * x * y + c1) / (x * x + y * y + c1);
    let got = ssim(&Field::constant(1, 9, 9, x), &Field::constant(1, 9, 9, y)).unwrap();
    assert!((got - expect).abs() < 1e-12);
    assert!(ssim(&Field::zeros(1, 6, 6), &Field::zeros(1, 6, 6)).is_err());
    assert!(ssim(&Field::zeros(2, 8, 8), &Field::zeros(2, 8, 8)).is_err());
    assert!(ssim(&Field::zeros(1, 8, 8), &Field::zeros(1, 9, 9)).is_err());
}

#[test]
fn psnr_closed_form_and_clamp() {
    assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
    let a = Field::constant(1, 4, 4, 0.2);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    assert!(mse(&a, &Field::zeros(1, 3, 3)).is_err());
}

#[test]
fn closer_predictions_score_lower() {
    let mut r = rng(2);
    for _ in 0..50 {
        let t = Field::random_uniform(1, 8, 8, 0.0, 1.0, &mut r);
        let far = Field::random_uniform(1, 8, 8, 0.0, 1.0, &mut r);
        let near = Field::from_vec(
            1,
            8,
            8,
            t.as_slice()
                .iter()
                .zip(far.as_slice())
                .map(|(a, b)| a + 0.5 * (b - a))
                .collect(),
        )
        .unwrap();
        if t.max_abs_diff(&far) > 0.0 {
            assert!(mse(&near, &t).unwrap() < mse(&far, &t).unwrap());
        }
    }
}

fn tiny_setup(frames: usize) -> (FloWMConfig, Params, Vec<Episode>) {
    let mut dc = DatasetConfig::desk();
    dc.world_size = 12;
    dc.window_size = 8;
    dc.sprite_size = 5;
    dc.n_frames = frames;
    let eps = generate_episodes(&dc, 4, 7).unwrap();
    let cfg = FloWMConfig {
        world_size: 12,
        window_size: 8,
        hidden_channels: 4,
        ..FloWMConfig::default()
    }
    .with_ablation(Ablation::Full, 1);
    let params = Params::init(&cfg, &mut rng(3));
    (cfg, params, eps)
}

#[test]
fn evaluation_baseline_and_tables() {
    let (cfg, params, eps) = tiny_setup(12);
    let ev = evaluate_params(&params, &cfg, &eps, 4, &[3, 8], "full").unwrap();
    assert_eq!(ev.model.len(), 8);
    assert_eq!(ev.baseline.episodes, 4);
    // all-black MSE is the mean squared target pixel
    for t in 0..8 {
        let mut s = 0.0;
        for e in &eps {
            s += e.frames[4 + t].as_slice().iter().map(|v| v * v).sum::<f64>() / 64.0;
        }
        assert!((ev.baseline.per_step[t].mse - s / 4.0).abs() < 1e-15);
    }
    let csv = metrics_csv(std::slice::from_ref(&ev));
    assert_eq!(csv.lines().count(), 1 + 2 * 8);
    assert!(csv.starts_with("model,t,mse,psnr,ssim\nfull,1,"));
    let sum = summary_csv(std::slice::from_ref(&ev)).unwrap();
    let lines: Vec<&str> = sum.lines().collect();
    assert_eq!(lines[0], "model,mse@3,psnr@3,ssim@3,mse@8,psnr@8,ssim@8");
    assert!(lines[1].starts_with("full,"));
    assert!(lines[2].starts_with("all-black,"));
    assert_eq!(lines.len(), 3);
    let m3 = ev.model.mean_over(3).unwrap();
    let direct = ev.model.per_step[..3].iter().map(|f| f.mse).sum::<f64>() / 3.0;
    assert!((m3.mse - direct).abs() < 1e-15);
    assert!(ev.model.mean_over(9).is_err());

    assert!(matches!(
        evaluate_params(&params, &cfg, &eps, 4, &[9], "full"),
        Err(crate::Error::Config(_))
    ));
    assert!(evaluate_params(&params, &cfg, &eps, 4, &[], "full").is_err());
}

#[test]
fn evaluation_files_are_deterministic() {
    let (cfg, params, eps) = tiny_setup(10);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    for d in [&d1, &d2] {
        let ev = evaluate_params(&params, &cfg, &eps, 4, &[2, 6], "full").unwrap();
        write_eval_outputs(d.path(), &[ev]).unwrap();
    }
    for f in ["metrics.csv", "summary.csv"] {
        assert_eq!(
            std::fs::read(d1.path().join(f)).unwrap(),
            std::fs::read(d2.path().join(f)).unwrap()
        );
    }
}

#[test]
fn pgm_encoding_and_render() {
    let f = Field::from_vec(1, 1, 4, vec![-0.5, 0.0, 0.5, 2.0]).unwrap();
    let pgm = encode_pgm(&f);
    assert_eq!(&pgm[..11], b"P5\n4 1\n255\n");
    assert_eq!(&pgm[11..], &[0, 0, 128, 255]);

    let (cfg, params, eps) = tiny_setup(10);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let p1 = render_rollout(&params, &cfg, &eps[0], 4, 5, d1.path()).unwrap();
    let p2 = render_rollout(&params, &cfg, &eps[0], 4, 5, d2.path()).unwrap();
    assert_eq!(p1.len(), 11);
    let gt: Vec<_> = p1.iter().filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("gt_")).collect();
    assert_eq!(gt.len(), 5);
    for (a, b) in p1.iter().zip(&p2) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    let gt0 = std::fs::read(d1.path().join("gt_000.pgm")).unwrap();
    let expect: Vec<u8> = eps[0].frames[4].as_slice().iter().map(|&v| to_u8(v)).collect();
    assert_eq!(&gt0[gt0.len() - 64..], &expect[..]);
    let strip = std::fs::read(d1.path().join("strip.pgm")).unwrap();
    assert!(strip.starts_with(b"P5\n44 17\n255\n"));
    assert!(render_rollout(&params, &cfg, &eps[0], 4, 7, d1.path()).is_err());
}
