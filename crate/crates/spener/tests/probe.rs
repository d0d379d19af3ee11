// Temporary diagnostics; removed before release.
use spener::geometry::{default_detector_spacing, make_geometry};
use spener::simulate::{disk_phantom, shepp_logan, shepp_logan_ellipses};
use spener::tomo::{fbp, forward_project, ramp_filter_row, FbpFilter, Image};

#[test]
fn probe_component_speed() {
    use spener::nn::*;
    let cfg = NetConfig {
        hash: HashEncodingConfig { table_size_log2: 16, ..Default::default() },
        encoder: Some(EncoderConfig { channels: 48 }),
        mlp: MlpConfig { hidden_width: 64 },
    };
    let params = NetworkParams::<f32>::init(&cfg, 1).unwrap();
    let n = 128usize;
    let img = shepp_logan::<f32>(n, 1.0 / n as f32).unwrap();
    let (fm, acts) = encode_image(&img, &params);
    let m = 4096usize;
    let coords: Vec<[f32; 2]> = (0..m)
        .map(|i| {
            let a = (i as f32 * 0.01).sin() * 0.49;
            let b = (i as f32 * 0.013).cos() * 0.49;
            [a, b]
        })
        .collect();
    let mut scratch = MlpScratch::new(&params);
    let mut grads = vec![0.0f32; params.param_count()];
    let mut dfm = vec![0.0f32; fm.data().len()];
    let d_out = vec![0.5f32; m];
    let reps = 50;

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        forward_points(&params, &fm, &coords, &mut scratch);
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;

    // Input building alone.
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        build_inputs(&params, &fm, &coords, &mut scratch.x);
    }
    let build = t0.elapsed().as_secs_f64() / reps as f64;

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        backward_points(&params, m, &d_out, &mut scratch, &mut grads);
    }
    let bwd = t0.elapsed().as_secs_f64() / reps as f64;

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        scatter_input_grads(&params, &fm, &coords, &scratch, &mut grads, Some(&mut dfm));
    }
    let scatter = t0.elapsed().as_secs_f64() / reps as f64;

    let t0 = std::time::Instant::now();
    for _ in 0..10 {
        encoder_backward(&dfm, &acts, &img, &params, &mut grads);
    }
    let encb = t0.elapsed().as_secs_f64() / 10.0;

    let t0 = std::time::Instant::now();
    for _ in 0..10 {
        let mut p2 = params.clone();
        adam_step(&mut p2, &grads, 1e-3, 0.9, 0.99, 1e-15).unwrap();
    }
    let adam = t0.elapsed().as_secs_f64() / 10.0;

    // Per point: fwd = 18.6 kflop, bwd-only = 37 kflop.
    println!(
        "per {m}-pt batch: build {:.2}ms fwd {:.2}ms ({:.1} Gflops) bwd {:.2}ms ({:.1} Gflops) scatter {:.2}ms",
        build * 1e3,
        fwd * 1e3,
        m as f64 * 18.6e3 / (fwd - build).max(1e-9) / 1e9,
        bwd * 1e3,
        m as f64 * 37.0e3 / bwd / 1e9,
        scatter * 1e3
    );
    println!(
        "encoder_backward {:.1}ms ({:.1} Gflops), adam+clone {:.2}ms",
        encb * 1e3,
        1.38e9 / encb / 1e9,
        adam * 1e3
    );
    // Extrapolate one epoch: 2.9M pts fwd+bwd+scatter+build + 8 steps of
    // encoder bwd + adam.
    let per_pt = (fwd + bwd + scatter) / m as f64;
    println!(
        "epoch estimate: {:.2}s mlp+scatter + {:.2}s encoder + adam",
        2.9e6 * per_pt,
        8.0 * encb
    );
}

#[test]
fn probe_recon_quality_short() {
    use spener::config::preset;
    use spener::spener::{reconstruct, Ablation};
    let cfg = preset("desk-60").unwrap();
    let geom = cfg.geometry.build::<f32>().unwrap();
    let phantom = shepp_logan::<f32>(128, 1.0 / 128.0).unwrap();
    let sino = forward_project(&phantom, &geom).unwrap();
    let fbp_img = fbp(&sino).unwrap();
    println!(
        "FBP PSNR: {:.2}",
        spener::metrics::psnr(&fbp_img, &phantom, 1.0).unwrap()
    );
    for levels in [16usize, 12] {
        let mut sp = cfg.spener_config(Ablation::None, None, None);
        sp.net.hash.levels = levels;
        sp.hqs.outer_iterations = 3;
        sp.hqs.epochs_first = 100;
        sp.hqs.epochs_rest = 50;
        let t0 = std::time::Instant::now();
        let state = reconstruct(&sino, &sp, Some(&phantom)).unwrap();
        println!(
            "L={levels}: {:?} in {:.0}s",
            state
                .trace
                .iter()
                .map(|r| (r.iteration, format!("{:.2}", r.psnr.unwrap())))
                .collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64()
        );
    }
}

#[test]
fn probe_training_speed() {
    use spener::config::preset;
    use spener::spener::solve_data_fidelity;
    use spener::nn::NetworkParams;
    let cfg = preset("desk-60").unwrap();
    let geom = cfg.geometry.build::<f32>().unwrap();
    let phantom = shepp_logan::<f32>(128, 1.0 / 128.0).unwrap();
    let sino = forward_project(&phantom, &geom).unwrap();
    let prior = fbp(&sino).unwrap();
    let mut sp = cfg.spener_config(spener::spener::Ablation::None, None, None);
    sp.hqs.epochs_first = 4;
    let params = NetworkParams::<f32>::init(&sp.effective_net(), 1).unwrap();
    println!("param count: {}", params.param_count());
    let t0 = std::time::Instant::now();
    let (_, stats) = solve_data_fidelity(params, &prior, &sino, &sp, 1).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "4 epochs in {dt:.2}s => {:.2}s/epoch => desk run (650 epochs) ~{:.0}s",
        dt / 4.0,
        dt / 4.0 * 650.0
    );
    println!("loss trace: {:?}", stats.epoch_loss_dc);
}

#[test]
fn probe_fbp_scale() {
    let size = 128;
    let px = 1.0 / size as f64;
    let n_d = 2 * size;
    let spacing = default_detector_spacing(n_d, 3.0, 3.0, 0.5);
    let geom = make_geometry::<f64>(360, n_d, 3.0, 3.0, spacing, size, px).unwrap();
    let disk = disk_phantom::<f64>(size, px, 0.35, 1.0);
    let sino = forward_project(&disk, &geom).unwrap();
    let rec = fbp(&sino).unwrap();
    let center = rec.get(size / 2, size / 2);
    println!("disk center value after FBP: {center}");
    let phantom = shepp_logan::<f64>(size, px).unwrap();
    let psino = forward_project(&phantom, &geom).unwrap();
    let prec = fbp(&psino).unwrap();
    let psnr = spener::metrics::psnr(&prec, &phantom, 1.0).unwrap();
    println!("phantom 360-view FBP PSNR: {psnr}");
    let mean_ratio: f64 = prec.values().iter().sum::<f64>() / phantom.values().iter().sum::<f64>();
    println!("sum ratio fbp/phantom: {mean_ratio}");
}

#[test]
fn probe_fbp_720() {
    let size = 256;
    let px = 1.0 / size as f64;
    let n_d = 512;
    let spacing = default_detector_spacing(n_d, 3.0, 3.0, 0.5);
    let geom = make_geometry::<f64>(720, n_d, 3.0, 3.0, spacing, size, px).unwrap();
    let phantom = shepp_logan::<f64>(size, px).unwrap();
    let sino = forward_project(&phantom, &geom).unwrap();
    let rec = fbp(&sino).unwrap();
    let psnr = spener::metrics::psnr(&rec, &phantom, 1.0).unwrap();
    println!("720-view 256px FBP PSNR: {psnr}");
    // Sparse-view reference points for the desk benchmark.
    for views in [60usize, 90] {
        let g = make_geometry::<f64>(views, 256, 3.0, 3.0, default_detector_spacing(256, 3.0, 3.0, 0.5), 128, 1.0 / 128.0).unwrap();
        let ph = shepp_logan::<f64>(128, 1.0 / 128.0).unwrap();
        let s = forward_project(&ph, &g).unwrap();
        let r = fbp(&s).unwrap();
        println!("{views}-view 128px FBP PSNR: {}", spener::metrics::psnr(&r, &ph, 1.0).unwrap());
    }
}

#[test]
fn probe_filter_against_analytic_disk() {
    // Continuous result: ramp-filtering the chord profile 2 sqrt(R^2-s^2)
    // gives 1/pi at s = 0.
    let r = 0.35f64;
    for n in [256usize, 1024] {
        let half = 0.533;
        let ds = 2.0 * half / n as f64;
        let row: Vec<f64> = (0..n)
            .map(|j| {
                let s = (j as f64 - (n as f64 - 1.0) / 2.0) * ds;
                if s.abs() < r { 2.0 * (r * r - s * s).sqrt() } else { 0.0 }
            })
            .collect();
        let q = ramp_filter_row(&row, ds, FbpFilter::RamLak);
        let center = n / 2;
        let got = (q[center - 1] + q[center]) / 2.0; // s=0 between bins for even n
        println!("n={n}: q(0) = {got} vs 1/pi = {}", 1.0 / std::f64::consts::PI);
    }
}

#[test]
fn probe_quasi_parallel_fbp() {
    let size = 128;
    let px = 1.0 / size as f64;
    let n_d = 256;
    let sd = 300.0;
    let spacing = default_detector_spacing(n_d, sd, sd, 0.5);
    let geom = make_geometry::<f64>(360, n_d, sd, sd, spacing, size, px).unwrap();
    let disk = disk_phantom::<f64>(size, px, 0.35, 1.0);
    let sino = forward_project(&disk, &geom).unwrap();
    let rec = fbp(&sino).unwrap();
    println!("quasi-parallel disk center: {}", rec.get(size / 2, size / 2));
}

#[test]
fn probe_ramp_dc() {
    for n in [64usize, 512] {
        let row = vec![1.0f64; n];
        let q = ramp_filter_row(&row, 0.01, FbpFilter::RamLak);
        let mean = q.iter().sum::<f64>() / n as f64;
        println!("n={n}: window mean {mean:e} (vs 1/ds = {})", 1.0 / 0.01);
    }
}

#[test]
fn probe_phantom_bounds() {
    let img = shepp_logan::<f64>(128, 1.0 / 128.0).unwrap();
    let (lo, hi) = img.min_max();
    println!("phantom min {lo} max {hi}");
    for e in shepp_logan_ellipses() {
        println!(
            "ellipse A={} a={} b={} x0={} y0={}",
            e.intensity, e.semi_x, e.semi_y, e.center_x, e.center_y
        );
    }
}

#[test]
fn probe_disk_chords() {
    for (size, views, n_d) in [(512usize, 16usize, 64usize), (256, 24, 48)] {
        let px = 1.0 / size as f64;
        let spacing = default_detector_spacing(n_d, 3.0, 3.0, 0.5);
        let geom = make_geometry::<f64>(views, n_d, 3.0, 3.0, spacing, size, px).unwrap();
        // Place the disk edge midway between two detector distances.
        let mut dists: Vec<f64> = (0..n_d)
            .map(|d| geom.ray_for(0, d).unwrap().distance_to_isocenter())
            .collect();
        dists.sort_by(f64::total_cmp);
        let below = dists.iter().filter(|&&t| t < 0.4).last().copied().unwrap();
        let above = dists.iter().find(|&&t| t >= 0.4).copied().unwrap();
        let radius = 0.5 * (below + above);
        println!("size={size} n_d={n_d}: R={radius} (gap {below}..{above})");
        let img = disk_phantom::<f64>(size, px, radius, 1.0);
        let sino = forward_project(&img, &geom).unwrap();
        let mut worst: (f64, f64, f64) = (0.0, 0.0, 0.0); // rel err, chord, dist
        let mut count = 0;
        for v in 0..geom.n_views {
            for d in 0..geom.n_detectors {
                let ray = geom.ray_for(v, d).unwrap();
                let dist = ray.distance_to_isocenter();
                if dist >= radius {
                    continue;
                }
                count += 1;
                let chord = 2.0 * (radius * radius - dist * dist).sqrt();
                let got = sino.get(v, d);
                let rel = ((got - chord) / chord).abs();
                if rel > worst.0 {
                    worst = (rel, chord, dist);
                }
            }
        }
        println!(
            "views={views} n_d={n_d}: {count} rays, worst rel err {:.4}% at chord {:.4} (dist {:.4})",
            worst.0 * 100.0,
            worst.1,
            worst.2
        );
    }
}

#[test]
fn probe_encoder_gradcheck() {
    use spener::nn::*;
    let cfg = NetConfig {
        hash: HashEncodingConfig {
            levels: 2,
            features_per_level: 2,
            table_size_log2: 10,
            base_resolution: 2,
            growth: 2.0,
        },
        encoder: Some(EncoderConfig { channels: 4 }),
        mlp: MlpConfig { hidden_width: 8 },
    };
    let mut p = NetworkParams::<f64>::init(&cfg, 5).unwrap();
    let n = 10usize;
    let values: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect();
    let z = Image::new(n, 1.0 / n as f64, values).unwrap();
    let probe_w: Vec<f64> = (0..n * n * 4).map(|i| ((i * 31 % 17) as f64 - 8.0) / 8.0).collect();
    let probe = |params: &NetworkParams<f64>| -> f64 {
        let (fm, _) = encode_image(&z, params);
        fm.data().iter().zip(&probe_w).map(|(a, b)| a * b).sum()
    };
    let (_, acts) = encode_image(&z, &p);
    // Pre-activation proximity to the ReLU kink.
    let min_abs = acts
        .relu1
        .iter()
        .filter(|v| **v > 0.0)
        .fold(f64::INFINITY, |a, &b| a.min(b));
    println!("min positive relu1 activation: {min_abs:e}");
    let mut grads = vec![0.0; p.param_count()];
    encoder_backward(&probe_w, &acts, &z, &p, &mut grads);
    let step = 1e-5;
    let ranges = [
        ("enc1_w", p.layout.enc1_w.clone()),
        ("enc1_b", p.layout.enc1_b.clone()),
        ("enc2_w", p.layout.enc2_w.clone()),
        ("enc2_b", p.layout.enc2_b.clone()),
    ];
    for (name, range) in ranges {
        let mut worst = (0.0f64, 0usize, 0.0, 0.0);
        for idx in range.step_by(7) {
            let orig = p.data[idx];
            p.data[idx] = orig + step;
            let up = probe(&p);
            p.data[idx] = orig - step;
            let down = probe(&p);
            p.data[idx] = orig;
            let fd = (up - down) / (2.0 * step);
            let g = grads[idx];
            let rel = (fd - g).abs() / fd.abs().max(1e-3);
            if rel > worst.0 {
                worst = (rel, idx, fd, g);
            }
        }
        println!("{name}: worst rel {:.3e} at {} (fd {} vs {})", worst.0, worst.1, worst.2, worst.3);
    }
}
