//! Acceptance suite.
//!
//! Every test prints one `criterion N ... PASS|FAIL` line (written straight to
//! stdout so it shows without `--nocapture`) and then asserts the outcome.
//!
//! Criteria 5 to 7 share one synthetic dataset and four trained models, built
//! once on first use. Training dominates the run time: about 6 minutes per
//! bi-directional model on one core.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stylemap::autodiff::LrSchedule;
use stylemap::flow::{build_model, Conditioning, FlowConfig, FlowModel, Variant};
use stylemap::imaging::{generate_synthetic, psnr, ImageBuffer, ImagePair, Split, SynthSpec};
use stylemap::pcc::{apply_style_matrix, fit_style_matrix, pca_fit, pcc_basis, StyleMatrix};
use stylemap::style::{apply_with_conditioning, extract_style, kmeans, cluster_purity};
use stylemap::training::{evaluate, loss_and_grad, loss_value, train_with, PixelBatch, TrainConfig, PSNR_CAP_DB};
use stylemap::{ContainerError, ModelContainer, StyleVector, Tensor2D};

const VARIANTS: [Variant; 3] = [Variant::Dim2Split, Variant::Dim3, Variant::Dim4Augmented];

/// Serializes the heavy tests so timings are not disturbed by training
/// running on other test threads.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2} {status} {name}: {detail}");
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn capped_db(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    psnr(a, b, 1.0).unwrap().db().min(PSNR_CAP_DB)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn jittered(variant: Variant, std: f64, seed: u64) -> FlowModel<f32> {
    let mut m = build_model(FlowConfig::new(variant, 4, 28, seed)).unwrap();
    m.jitter_params(std, seed + 1);
    m.mark_actnorm_ready();
    m
}

// ---------------------------------------------------------------------------
// shared experiment

struct Experiment {
    train: Vec<ImagePair>,
    test: Vec<ImagePair>,
    full: FlowModel<f32>,
    nll_only: FlowModel<f32>,
    dim2: FlowModel<f32>,
    dim4: FlowModel<f32>,
}

fn train_config(rec_weight: f64) -> TrainConfig {
    TrainConfig {
        epochs: 80,
        initial_lr: 5e-4,
        schedule: LrSchedule::Step { every: 20, factor: 0.5 },
        pixels_per_step: 1024,
        steps_per_epoch: 100,
        nll_weight: 1.0,
        rec_weight,
        seed: 11,
        eval_frames: 8,
        eval_pixels: 4096,
        ..TrainConfig::default()
    }
}

fn train_model(variant: Variant, rec_weight: f64, train: &[ImagePair]) -> FlowModel<f32> {
    let start = Instant::now();
    let mut model = build_model(FlowConfig::new(variant, 4, 28, 7)).unwrap();
    let report = train_with(&mut model, train, &[], &train_config(rec_weight), |_| {}).unwrap();
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "  trained {variant:?} (reconstruction weight {rec_weight}) in {:.0} s, best epoch {}",
        secs(start.elapsed()),
        report.best_epoch
    );
    model
}

fn experiment() -> &'static Experiment {
    static EXP: OnceLock<Experiment> = OnceLock::new();
    EXP.get_or_init(|| {
        let data = generate_synthetic(&SynthSpec {
            factors: 3,
            pairs: 200,
            width: 256,
            height: 256,
            degree: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let train: Vec<ImagePair> = data.split(Split::Train).into_iter().cloned().collect();
        let test: Vec<ImagePair> = data.split(Split::Test).into_iter().cloned().collect();
        let full = train_model(Variant::Dim3, 10.0, &train);
        let nll_only = train_model(Variant::Dim3, 0.0, &train);
        let dim2 = train_model(Variant::Dim2Split, 10.0, &train);
        let dim4 = train_model(Variant::Dim4Augmented, 10.0, &train);
        Experiment {
            train,
            test,
            full,
            nll_only,
            dim2,
            dim4,
        }
    })
}

fn trained(variant: Variant) -> &'static FlowModel<f32> {
    let e = experiment();
    match variant {
        Variant::Dim2Split => &e.dim2,
        Variant::Dim3 => &e.full,
        Variant::Dim4Augmented => &e.dim4,
    }
}

fn test_psnr(model: &FlowModel<f32>) -> (f64, f64) {
    let s = evaluate(model, &experiment().test).unwrap();
    (s.mean_db, s.p5_db)
}

// ---------------------------------------------------------------------------

/// Largest `‖forward(inverse(x, c)) − x‖∞` over `n` random pixels and
/// conditionings, augmentation channel included.
fn round_trip_error(model: &FlowModel<f32>, n: usize, seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels: Vec<[f32; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let sources: Vec<[f32; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let aug: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let cond = Conditioning::from_pixels(&sources, model.degree()).unwrap();
    let lat = model.inverse_batch(&pixels, &cond, Some(&aug)).unwrap();
    let back = model.forward_channels_batch(&lat.z, lat.split.as_deref(), &cond).unwrap();
    let width = model.variant().input_width();
    let mut worst = 0.0f32;
    for (i, got) in back.chunks_exact(width).enumerate() {
        let mut want = pixels[i].to_vec();
        if width == 4 {
            want.push(aug[i]);
        }
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

#[test]
fn criterion_01_invertibility() {
    let trained: Vec<&FlowModel<f32>> = VARIANTS.iter().map(|&v| trained(v)).collect();
    let _guard = exclusive();
    let start = Instant::now();
    let mut worst = 0.0f32;
    let mut details = Vec::new();
    for (i, &variant) in VARIANTS.iter().enumerate() {
        for (label, model) in [("untrained", jittered(variant, 0.0, 3)), ("jittered", jittered(variant, 0.2, 5))] {
            let e = round_trip_error(&model, 10_000, 100 + i as u64);
            worst = worst.max(e);
            details.push(format!("{variant:?}/{label} {e:.1e}"));
        }
        let e = round_trip_error(trained[i], 10_000, 200 + i as u64);
        worst = worst.max(e);
        details.push(format!("{variant:?}/trained {e:.1e}"));
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "invertibility",
        pass,
        &format!("max error {worst:.2e} (< 1e-4) over 10^4 pixels x 9 models in {:.2} s (< 10 s); {}", secs(elapsed), details.join(", ")),
    );
    assert!(pass);
}

fn central_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

#[test]
fn criterion_02_log_det_oracle() {
    let models: Vec<(String, FlowModel<f64>)> = VARIANTS
        .iter()
        .flat_map(|&v| [(format!("{v:?}/trained"), trained(v).cast()), (format!("{v:?}/jittered"), jittered(v, 0.2, 9).cast())])
        .collect();
    let _guard = exclusive();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for (_, m) in &models {
        assert_eq!(m.config().blocks, 8);
        let width = m.variant().input_width();
        for _ in 0..100 {
            let mut x: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            if width == 4 {
                x.push(rng.sample(StandardNormal));
            }
            let c = pcc_basis([rng.random(), rng.random(), rng.random()], 4).unwrap().values;
            let f = |x: &[f64]| {
                let r = m.inverse_channels(x, &c).unwrap();
                let mut out = r.z;
                out.extend(r.split);
                out
            };
            let det = central_jacobian(f, &x, 1e-6).determinant().abs();
            let analytic = m.inverse_channels(&x, &c).unwrap().log_det.exp();
            worst = worst.max((analytic - det).abs() / det);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-3 && elapsed < Duration::from_secs(30);
    verdict(
        2,
        "log-det oracle",
        pass,
        &format!(
            "max relative determinant error {worst:.2e} (< 1e-3), 100 instances x {} full 8-block models in {:.2} s (< 30 s)",
            models.len(),
            secs(elapsed)
        ),
    );
    assert!(pass);
}

fn gradient_error(m: &FlowModel<f64>, batch: &PixelBatch<f64>) -> f64 {
    let (_, grads) = loss_and_grad(m, batch, 1.0, 1.0).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut probe = m.clone();
    for id in m.params().ids() {
        for j in 0..m.params().get(id).data().len() {
            let orig = m.params().get(id).data()[j];
            probe.params_mut().get_mut(id).data_mut()[j] = orig + h;
            let up = loss_value(&probe, batch, 1.0, 1.0).unwrap();
            probe.params_mut().get_mut(id).data_mut()[j] = orig - h;
            let down = loss_value(&probe, batch, 1.0, 1.0).unwrap();
            probe.params_mut().get_mut(id).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = grads.get(id).data()[j];
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn criterion_03_gradient_oracle() {
    let _guard = exclusive();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut params = 0;
    for variant in VARIANTS {
        let mut m = build_model(FlowConfig {
            blocks: 2,
            ..FlowConfig::new(variant, 4, 4, 13)
        })
        .unwrap();
        m.jitter_params(0.3, 14);
        m.mark_actnorm_ready();
        let m: FlowModel<f64> = m.cast();
        params += m.num_params();
        let width = variant.input_width();
        let mut x = Tensor2D::zeros(16, width);
        let mut cond = Tensor2D::zeros(16, m.conditioning_len());
        for r in 0..16 {
            for c in 0..width {
                x.set(r, c, rng.random());
            }
            let p = [rng.random(), rng.random(), rng.random()];
            cond.row_mut(r).copy_from_slice(&pcc_basis(p, 4).unwrap().values);
        }
        worst = worst.max(gradient_error(&m, &PixelBatch::new(x, cond)));
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-3 && elapsed < Duration::from_secs(60);
    verdict(
        3,
        "gradient oracle",
        pass,
        &format!(
            "NLL + reconstruction, width 4, 2 blocks, 16 pixels, {params} parameters over 3 variants: max relative error {worst:.2e} (< 1e-3) in {:.2} s (< 60 s)",
            secs(elapsed)
        ),
    );
    assert!(pass);
}

fn random_pixels(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
}

/// Held-out PSNR of degree-`d` fits to per-channel gamma curves with a mild
/// channel cross-talk.
fn gamma_fit_psnr(degree: u8) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let grade = |p: [f64; 3], g: f64| {
        let q = p.map(|v| v.powf(g));
        [0.9 * q[0] + 0.1 * q[1], q[1], 0.85 * q[2] + 0.15 * q[0]]
    };
    let mut scores = Vec::new();
    for g in [1.0 / 2.2, 0.7, 1.6, 2.4] {
        let fit_src = random_pixels(&mut rng, 4000);
        let fit_tgt: Vec<_> = fit_src.iter().map(|&p| grade(p, g)).collect();
        let m = fit_style_matrix(&fit_src, &fit_tgt, degree).unwrap();
        let test_src = random_pixels(&mut rng, 4000);
        let sse: f64 = test_src
            .iter()
            .map(|&p| {
                let (o, t) = (m.map_pixel(p), grade(p, g));
                (0..3).map(|c| (o[c] - t[c]).powi(2)).sum::<f64>()
            })
            .sum();
        scores.push(-10.0 * (sse / (3.0 * test_src.len() as f64)).log10());
    }
    mean(&scores)
}

#[test]
fn criterion_04_pcc_fit_oracle() {
    let _guard = exclusive();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let truth = StyleMatrix::new(4, (0..102).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let src = random_pixels(&mut rng, 1000);
    let tgt: Vec<_> = src.iter().map(|&p| truth.map_pixel(p)).collect();
    let fit = fit_style_matrix(&src, &tgt, 4).unwrap();
    let err = fit.flat().iter().zip(truth.flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ablation: Vec<f64> = (1..=4).map(gamma_fit_psnr).collect();
    let ordered = ablation.windows(2).all(|w| w[0] < w[1]);
    let pass = err < 1e-5 && ordered;
    verdict(
        4,
        "PCC fit oracle",
        pass,
        &format!(
            "recovery max abs error {err:.2e} (< 1e-5); gamma-fit PSNR RGB {:.2} < PCC-2 {:.2} < PCC-3 {:.2} < PCC-4 {:.2} dB: {}",
            ablation[0],
            ablation[1],
            ablation[2],
            ablation[3],
            if ordered { "ordered" } else { "not ordered" }
        ),
    );
    assert!(pass);
}

/// Pixels at a regular stride, for fitting matrices quickly.
fn stride_samples(img: &ImageBuffer, stride: usize) -> Vec<[f32; 3]> {
    img.pixels().iter().step_by(stride).copied().collect()
}

#[test]
fn criterion_05_end_to_end_synthetic() {
    let e = experiment();
    let _guard = exclusive();
    let (flow_mean, flow_p5) = test_psnr(&e.full);

    let oracle: Vec<f64> = e
        .test
        .iter()
        .map(|p| {
            let m = fit_style_matrix(p.source.pixels(), p.target.pixels(), 4).unwrap();
            capped_db(&apply_style_matrix(&p.source, &m), &p.target)
        })
        .collect();
    let oracle_mean = mean(&oracle);

    // PCA baseline: principal directions of the training pairs' matrices;
    // a test pair is scored through the projection of its own fit.
    let train_mats: Vec<StyleMatrix> = e
        .train
        .iter()
        .map(|p| fit_style_matrix(&stride_samples(&p.source, 7), &stride_samples(&p.target, 7), 4).unwrap())
        .collect();
    let pca = pca_fit(&train_mats, 3).unwrap();
    let pca_scores: Vec<f64> = e
        .test
        .iter()
        .map(|p| {
            let m = fit_style_matrix(p.source.pixels(), p.target.pixels(), 4).unwrap();
            let projected = pca.decode(&pca.encode(&m).unwrap()).unwrap();
            capped_db(&apply_style_matrix(&p.source, &projected), &p.target)
        })
        .collect();
    let pca_mean = mean(&pca_scores);

    let floor = flow_mean >= 35.0;
    let near_oracle = flow_mean >= oracle_mean - 3.0;
    let beats_pca = pca_mean < flow_mean;
    let pass = floor && near_oracle && beats_pca;
    verdict(
        5,
        "end-to-end synthetic",
        pass,
        &format!(
            "{} train / {} test pairs; flow test mean {flow_mean:.2} dB (>= 35: {floor}), p5 {flow_p5:.2} dB; \
             least-squares PCC oracle {oracle_mean:.2} dB (flow within 3 dB: {near_oracle}); PCA k=3 {pca_mean:.2} dB (below flow: {beats_pca})",
            e.train.len(),
            e.test.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_bidirectional_ablation() {
    let e = experiment();
    let _guard = exclusive();
    let (full, _) = test_psnr(&e.full);
    let (nll, _) = test_psnr(&e.nll_only);
    let pass = nll <= full - 2.0;
    verdict(
        6,
        "bi-directional ablation",
        pass,
        &format!("NLL-only {nll:.2} dB vs NLL + reconstruction {full:.2} dB (gap {:.2} dB, need >= 2)", full - nll),
    );
    assert!(pass);
}

#[test]
fn criterion_07_latent_dimension_ablation() {
    let e = experiment();
    let _guard = exclusive();
    let (d2, _) = test_psnr(&e.dim2);
    let (d3, _) = test_psnr(&e.full);
    let (d4, _) = test_psnr(&e.dim4);
    let pass = d2 <= d3 && d3 <= d4 + 1.0;
    verdict(
        7,
        "latent-dimension ablation",
        pass,
        &format!("dim-2 {d2:.2} dB <= dim-3 {d3:.2} dB <= dim-4 {d4:.2} dB + 1 dB: {pass}"),
    );
    assert!(pass);
}

#[test]
fn criterion_08_style_clustering() {
    let model = &experiment().full;
    let _guard = exclusive();
    let data = generate_synthetic(&SynthSpec {
        factors: 3,
        pairs: 60,
        width: 128,
        height: 128,
        clusters: Some(3),
        seed: 808,
        ..SynthSpec::default()
    })
    .unwrap();
    let styles: Vec<Vec<f64>> = data
        .pairs
        .iter()
        .map(|p| extract_style(model, &p.source, &p.target, &p.id).unwrap().values().to_vec())
        .collect();
    let assignments = kmeans(&styles, 3, 10, 8);
    let purity = cluster_purity(&assignments, data.cluster_labels.as_ref().unwrap());
    let pass = purity >= 0.9;
    verdict(
        8,
        "style clustering",
        pass,
        &format!("k-means purity {:.1}% (>= 90%) on {} pairs from 3 style clusters", 100.0 * purity, styles.len()),
    );
    assert!(pass);
}

fn render_time(model: &FlowModel<f32>, cond: &Conditioning<f32>, style: &StyleVector, threads: usize) -> Duration {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut times: Vec<Duration> = (0..5)
            .map(|_| {
                let t = Instant::now();
                let img = apply_with_conditioning(model, cond, 960, 540, style).unwrap();
                let d = t.elapsed();
                assert_eq!(img.dims(), (960, 540));
                d
            })
            .collect();
        times.sort();
        times[2]
    })
}

#[test]
fn criterion_09_performance() {
    let _guard = exclusive();
    let model = jittered(Variant::Dim3, 0.05, 99);
    let frame = ImageBuffer::from_fn(960, 540, |x, y| {
        let u = x as f32 / 960.0;
        let v = y as f32 / 540.0;
        [u, v, 0.5 + 0.4 * (7.0 * u * v).sin()]
    })
    .unwrap();
    let cond = Conditioning::from_image(&frame, 4).unwrap();
    let style = StyleVector::manual(vec![0.3, -0.5, 0.8]).unwrap();
    let single = render_time(&model, &cond, &style, 1);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let single_ok = single < Duration::from_secs(1);
    let (multi_ok, multi_detail) = if cores >= 4 {
        let t = render_time(&model, &cond, &style, 4);
        (t < Duration::from_millis(250), format!("{:.0} ms on 4 threads (< 250 ms)", 1e3 * secs(t)))
    } else {
        (true, format!("4-thread bound not measured: this machine has {cores} core(s)"))
    };
    let pass = single_ok && multi_ok;
    verdict(
        9,
        "performance",
        pass,
        &format!("960x540 render with cached conditioning: {:.0} ms single-threaded (< 1000 ms); {multi_detail}", 1e3 * secs(single)),
    );
    assert!(pass);
}

#[test]
fn criterion_10_serialization() {
    let model = trained(Variant::Dim3).clone();
    let _guard = exclusive();
    let pair = &experiment().test[0];
    let style = extract_style(&model, &pair.source, &pair.target, &pair.id).unwrap();
    let cond = Conditioning::from_image(&pair.source, 4).unwrap();
    let (w, h) = pair.source.dims();
    let before = apply_with_conditioning(&model, &cond, w, h, &style).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.stylemap");
    ModelContainer::new(model).save(&path).unwrap();
    let loaded = ModelContainer::load(&path).unwrap();
    let after = apply_with_conditioning(&loaded.model, &cond, w, h, &style).unwrap();
    let identical = before
        .pixels()
        .iter()
        .flatten()
        .zip(after.pixels().iter().flatten())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    let rejected = matches!(ModelContainer::from_bytes(&bytes), Err(ContainerError::Checksum));
    let pass = identical && rejected;
    verdict(
        10,
        "serialization",
        pass,
        &format!("save -> load -> apply bit-identical: {identical}; corrupted checksum rejected: {rejected}"),
    );
    assert!(pass);
}
