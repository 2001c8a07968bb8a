//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use mrnorm::manifest::LoadedSubject;
use mrnorm::metrics::{
    consistent_winner, entropy, exact_null_counts, mssim, mutual_information, ncc, wilcoxon_signed_rank, Metric,
    SsimOptions,
};
use mrnorm::normalize::{
    apply, apply_with_audit, fcm_wm_mask, fit, gmm_wm_mean, hm_apply, hm_fit, kde_wm_peak, Method, ModelState,
    NormalizerSpec, Sample, DEFAULT_SCALE,
};
use mrnorm::phantom::{generate_cohort, PhantomSpec, Subject};
use mrnorm::pipeline::{run_experiment, ExperimentConfig, Normalization, SynthSettings, RAW};
use mrnorm::ravel::{ravel_fit_apply, RavelInput};
use mrnorm::synth::{fit_forest, fit_poly, predict_volume, rf_fit, ForestOptions, PatchSpec, PolyOptions, TrainingSet};
use mrnorm::{masked_stats, par, Contrast, Mask, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: mrnorm::Error) -> String {
    e.to_string()
}

fn cohort(outlier: bool) -> Vec<Subject> {
    let spec = PhantomSpec {
        outlier,
        ..PhantomSpec::default()
    };
    generate_cohort(&spec).expect("default phantom cohort")
}

fn max_abs_diff(a: &Volume, b: &Volume, m: &Mask) -> f64 {
    m.indices().map(|i| (a.data()[i] - b.data()[i]).abs()).fold(0.0, f64::max)
}

fn max_abs(a: &Volume, m: &Mask) -> f64 {
    m.indices().map(|i| a.data()[i].abs()).fold(0.0, f64::max)
}

/// Pearson correlation, written out independently of the library.
fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn normalizer_contracts(subjects: &[Subject]) -> Check {
    let test = &subjects[9];
    let (v, b) = (&test.t1, &test.brain);
    let sample = Sample::new(&test.id, v, b);
    let stateless = |m: Method| fit(&NormalizerSpec::new(m).with_contrast(Contrast::T1), &[sample]).map_err(err);

    // z-score
    let z = apply(&stateless(Method::Zscore)?, &sample).map_err(err)?;
    let st = masked_stats(&z, b).map_err(err)?;
    ensure(st.mean.abs() <= 1e-9 && (st.std - 1.0).abs() <= 1e-9, format!("zscore mean {} std {}", st.mean, st.std))?;

    // FCM: exact on its own mask, within 1% on the truth mask
    let fcm = apply(&stateless(Method::Fcm)?, &sample).map_err(err)?;
    let fitted = fcm_wm_mask(v, b, Contrast::T1).map_err(err)?;
    let own = masked_stats(&fcm, &fitted).map_err(err)?.mean;
    let truth = masked_stats(&fcm, &test.wm).map_err(err)?.mean;
    ensure((own - 1000.0).abs() <= 1e-9 * 1000.0, format!("fcm fitted-mask WM mean {own}"))?;
    ensure((truth - 1000.0).abs() <= 10.0, format!("fcm truth WM mean {truth}"))?;

    // GMM and KDE: the same statistic recomputed on the output
    let gmm = apply(&stateless(Method::Gmm)?, &sample).map_err(err)?;
    let g = gmm_wm_mean(&gmm, b, Contrast::T1).map_err(err)?;
    ensure((g - 1000.0).abs() <= 10.0, format!("gmm recomputed WM mean {g}"))?;
    let kde = apply(&stateless(Method::Kde)?, &sample).map_err(err)?;
    let k = kde_wm_peak(&kde, b, Contrast::T1, 0.05).map_err(err)?;
    ensure((k - 1000.0).abs() <= 10.0, format!("kde recomputed WM peak {k}"))?;

    // HM: a sub-mask of 100 * 200 + 1 voxels puts every landmark exactly on a
    // voxel, so the mapped voxel must carry the standard value.
    let pairs: Vec<(&Volume, &Mask)> = subjects[..9].iter().map(|s| (&s.t1, &s.brain)).collect();
    let labels = mrnorm::normalize::default_labels();
    let sh = hm_fit(&pairs, &labels, DEFAULT_SCALE).map_err(err)?;
    let n = 20_001;
    let chosen: Vec<usize> = b.indices().take(n).collect();
    ensure(chosen.len() == n, "brain too small for the landmark probe")?;
    let mut sub = vec![false; v.len()];
    chosen.iter().for_each(|&i| sub[i] = true);
    let sub = Mask::new(v.dims(), sub).map_err(err)?;
    let out = hm_apply(v, &sub, &sh).map_err(err)?;
    let mut order = chosen.clone();
    order.sort_by(|&a, &c| v.data()[a].total_cmp(&v.data()[c]));
    let mut worst = 0.0f64;
    for (l, want) in labels.iter().zip(&sh.standard_values) {
        let rank = (l / 100.0 * (n - 1) as f64).round() as usize;
        worst = worst.max((out.data()[order[rank]] - want).abs());
    }
    ensure(worst <= 1e-9, format!("hm knot error {worst:e}"))?;
    ensure(
        order.windows(2).all(|w| out.data()[w[0]] <= out.data()[w[1]]),
        "hm map is not monotone",
    )?;

    // WhiteStripe: recompute over the stripe voxels of the input
    let (ws_out, audit) = apply_with_audit(&stateless(Method::Whitestripe)?, &sample).map_err(err)?;
    let stripe = audit.stripe.ok_or("no stripe in audit")?;
    let [lo, hi] = stripe.interval;
    let vals: Vec<f64> = b
        .indices()
        .filter(|&i| v.data()[i] > lo && v.data()[i] < hi)
        .map(|i| ws_out.data()[i])
        .collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (vals.len() as f64 - 1.0)).sqrt();
    ensure(m.abs() <= 1e-6 && (sd - 1.0).abs() <= 1e-6, format!("stripe mean {m} std {sd}"))?;

    // RAVEL on a cohort with one injected factor
    let (before, after) = ravel_injected()?;
    ensure(before >= 0.95 && after <= 0.05, format!("ravel CSF correlation {before:.3} -> {after:.3}"))?;

    Ok(format!(
        "fcm truth WM {truth:.1}, gmm {g:.1}, kde {k:.1}, hm knot err {worst:.1e}, ravel corr {before:.3} -> {after:.3}"
    ))
}

/// Mean |corr| between CSF voxel series and the injected factor, before and
/// after RAVEL.
fn ravel_injected() -> Result<(f64, f64), String> {
    let z = [-1.5, -0.8, -0.2, 0.1, 0.4, 0.9, 1.3, -0.6, 0.7, 1.0, -1.1, 0.3];
    let dims = [16, 16, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let base = Volume::from_fn(dims, |i, j, k| 2.0 + 0.1 * i as f64 - 0.05 * j as f64 + 0.02 * k as f64).map_err(err)?;
    let load = Volume::from_fn(dims, |i, j, _| 1.0 + 0.3 * ((i + j) as f64 * 0.5).cos()).map_err(err)?;
    let vols: Vec<Volume> = z
        .iter()
        .map(|zi| {
            let d = base.data().iter().zip(load.data()).map(|(b, g)| b + zi * g + noise.sample(&mut rng)).collect();
            base.with_data(d).unwrap()
        })
        .collect();
    let brain = Mask::from_fn(dims, |i, j, _| (1..15).contains(&i) && (1..15).contains(&j)).map_err(err)?;
    let csf = Mask::from_fn(dims, |i, j, _| (4..12).contains(&i) && (4..12).contains(&j)).map_err(err)?;
    let ids: Vec<String> = (0..z.len()).map(|i| format!("img{i}")).collect();
    let inputs: Vec<RavelInput<'_>> = vols
        .iter()
        .zip(&ids)
        .map(|(v, id)| RavelInput {
            id,
            volume: v,
            brain: &brain,
            csf: &csf,
        })
        .collect();
    let (out, _) = ravel_fit_apply(&inputs, 1, true).map_err(err)?;
    let mean_corr = |vs: &[Volume]| {
        let per: Vec<f64> = csf
            .indices()
            .map(|idx| corr(&vs.iter().map(|v| v.data()[idx]).collect::<Vec<_>>(), &z).abs())
            .collect();
        per.iter().sum::<f64>() / per.len() as f64
    };
    Ok((mean_corr(&vols), mean_corr(&out)))
}

fn gain_invariance(subjects: &[Subject]) -> Check {
    let s = &subjects[10];
    let b = &s.brain;
    let pairs: Vec<(&Volume, &Mask)> = subjects[..9].iter().map(|s| (&s.t1, &s.brain)).collect();
    let hm_model = fit(
        &NormalizerSpec::new(Method::Hm).with_contrast(Contrast::T1),
        &[Sample::new("x", &s.t1, b)],
    )
    .map_err(err)?;
    let sh = hm_fit(&pairs, &mrnorm::normalize::default_labels(), DEFAULT_SCALE).map_err(err)?;
    let hm_model = mrnorm::normalize::NormalizerModel {
        state: ModelState::Hm(sh),
        ..hm_model
    };
    let mut worst = 0.0f64;
    for a in [0.5, 2.0, 10.0] {
        let scaled = s.t1.map(|x| a * x).map_err(err)?;
        let shifted = s.t1.map(|x| a * x + 250.0).map_err(err)?;
        for m in [Method::Fcm, Method::Gmm, Method::Kde, Method::Hm, Method::Whitestripe] {
            let model = if m == Method::Hm {
                hm_model.clone()
            } else {
                fit(&NormalizerSpec::new(m).with_contrast(Contrast::T1), &[Sample::new("x", &s.t1, b)]).map_err(err)?
            };
            let o1 = apply(&model, &Sample::new("x", &s.t1, b)).map_err(err)?;
            let o2 = apply(&model, &Sample::new("x", &scaled, b)).map_err(err)?;
            let rel = max_abs_diff(&o1, &o2, b) / max_abs(&o1, b);
            worst = worst.max(rel);
            ensure(rel <= 1e-6, format!("{m} at gain {a}: relative difference {rel:e}"))?;
        }
        let zm = fit(&NormalizerSpec::new(Method::Zscore), &[Sample::new("x", &s.t1, b)]).map_err(err)?;
        let z1 = apply(&zm, &Sample::new("x", &s.t1, b)).map_err(err)?;
        for other in [&scaled, &shifted] {
            let z2 = apply(&zm, &Sample::new("x", other, b)).map_err(err)?;
            let d = max_abs_diff(&z1, &z2, b);
            ensure(d <= 1e-9, format!("zscore at gain {a}: difference {d:e}"))?;
        }
    }
    Ok(format!("worst relative difference {worst:.1e}"))
}

/// Brute-force SSIM straight from the windowed moments.
fn ssim_brute(a: &Volume, b: &Volume, m: &Mask, window: usize, sigma: f64) -> f64 {
    let dims = a.dims();
    let r = (window / 2) as i64;
    let (lo, hi) = m.indices().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
        (lo.min(a.data()[i]).min(b.data()[i]), hi.max(a.data()[i]).max(b.data()[i]))
    });
    let (c1, c2) = ((0.01 * (hi - lo)).powi(2), (0.03 * (hi - lo)).powi(2));
    let mut total = 0.0;
    for idx in m.indices() {
        let c = a.coords(idx);
        let (mut w, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for dk in -r..=r {
            for dj in -r..=r {
                for di in -r..=r {
                    let p = [c[0] as i64 + di, c[1] as i64 + dj, c[2] as i64 + dk];
                    if (0..3).any(|ax| p[ax] < 0 || p[ax] >= dims[ax] as i64) {
                        continue;
                    }
                    let g = (-((di * di + dj * dj + dk * dk) as f64) / (2.0 * sigma * sigma)).exp();
                    let (x, y) = (a.get(p[0] as usize, p[1] as usize, p[2] as usize), b.get(p[0] as usize, p[1] as usize, p[2] as usize));
                    w += g;
                    sx += g * x;
                    sy += g * y;
                    sxx += g * x * x;
                    syy += g * y * y;
                    sxy += g * x * y;
                }
            }
        }
        let (mx, my) = (sx / w, sy / w);
        let (vx, vy, cxy) = (sxx / w - mx * mx, syy / w - my * my, sxy / w - mx * my);
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    total / m.count() as f64
}

fn metric_oracles(subjects: &[Subject]) -> Check {
    let s = &subjects[0];
    let (v, b) = (&s.t1, &s.brain);
    let n = ncc(v, v, b).map_err(err)?;
    let ss = mssim(v, v, b, SsimOptions::default()).map_err(err)?;
    let mi = mutual_information(v, v, b, 32).map_err(err)?;
    let h = entropy(v, b, 32).map_err(err)?;
    ensure((n - 1.0).abs() <= 1e-9 && (ss - 1.0).abs() <= 1e-9, format!("self ncc {n} mssim {ss}"))?;
    ensure((mi - h).abs() <= 1e-9, format!("self MI {mi} vs entropy {h}"))?;

    let dims = [8, 8, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Volume::from_fn(dims, |_, _, _| 0.0).map_err(err)?;
    let a = a.with_data((0..512).map(|_| rng.random_range(0.0..1.0)).collect()).map_err(err)?;
    let c = a.with_data(a.data().iter().map(|x| 0.6 * x + 0.2 * rng.random_range(0.0..1.0)).collect()).map_err(err)?;
    let m = Mask::from_fn(dims, |i, j, k| (i * 3 + j + k) % 4 != 0).map_err(err)?;
    let mut worst = 0.0f64;
    for (window, sigma) in [(3, 0.8), (5, 1.0), (7, 1.5)] {
        let opts = SsimOptions {
            window,
            sigma,
            ..SsimOptions::default()
        };
        let fast = mssim(&a, &c, &m, opts).map_err(err)?;
        worst = worst.max((fast - ssim_brute(&a, &c, &m, window, sigma)).abs());
    }
    ensure(worst <= 1e-9, format!("SSIM oracle difference {worst:e}"))?;

    let x: Vec<f64> = (0..9).map(|i| 10.0 + i as f64).collect();
    let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + 0.5 + 0.25 * i as f64).collect();
    let w = wilcoxon_signed_rank(&x, &y).map_err(err)?;
    // enumeration: only the all-positive and all-negative sign patterns reach
    // W+ = 45 or 0 among 2^9
    let extreme = (0u32..512)
        .filter(|mask| {
            let s: u32 = (0..9).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).sum();
            s == 45 || s == 0
        })
        .count();
    let oracle = extreme as f64 / 512.0;
    ensure(w.p_value == 2.0 / 512.0 && w.p_value == oracle, format!("wilcoxon p {} oracle {oracle}", w.p_value))?;
    let counts = exact_null_counts(&(1..=9).map(|r| 2 * r).collect::<Vec<u64>>());
    ensure(counts.iter().sum::<f64>() == 512.0, "null distribution does not sum to 2^9")?;
    Ok(format!("SSIM oracle diff {worst:.1e}, wilcoxon p = {}", w.p_value))
}

fn synthesis_oracles() -> Check {
    // exact cubic with cross terms in 7 features
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = 7;
    let n = 3000;
    let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(0.0..2.0)).collect();
    let f = |r: &[f64]| 3.0 + r[0] - 2.0 * r[1] * r[2] + 0.5 * r[3].powi(3) - r[4] * r[5] * r[6] + 0.25 * r[0] * r[0] * r[6];
    let y: Vec<f64> = x.chunks(p).map(f).collect();
    let ts = TrainingSet::from_rows(x, p, y.clone()).map_err(err)?;
    let patch = PatchSpec::center_six();
    let poly = fit_poly(&ts, &patch, RAW, PolyOptions::default()).map_err(err)?;
    let resid = (0..n).map(|i| (poly.predict_row(ts.row(i)) - y[i]).abs()).fold(0.0, f64::max);
    ensure(resid <= 1e-6, format!("poly training residual {resid:e}"))?;

    // step function, held out
    let step = |n: usize, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(0.0..1000.0)).collect();
        let y = x
            .chunks(p)
            .map(|r| if r[0] > 600.0 { 1500.0 } else if r[0] > 300.0 { 800.0 } else { 100.0 })
            .collect();
        TrainingSet::from_rows(x, p, y).unwrap()
    };
    let (train, test) = (step(6000, 1), step(2000, 2));
    let opts = ForestOptions {
        seed: 3,
        ..ForestOptions::default()
    };
    let forest = rf_fit(&train, opts).map_err(err)?;
    let mean = test.targets.iter().sum::<f64>() / test.len() as f64;
    let var = test.targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / test.len() as f64;
    let mse = (0..test.len()).map(|i| (forest.predict_row(test.row(i)) - test.targets[i]).powi(2)).sum::<f64>()
        / test.len() as f64;
    ensure(mse <= 0.05 * var, format!("forest held-out MSE {mse:.1} vs variance {var:.1}"))?;

    // bit determinism: refit, sequential refit, and full-volume prediction
    let again = rf_fit(&train, opts).map_err(err)?;
    let seq = par::sequential(|| rf_fit(&train, opts)).map_err(err)?;
    ensure(again == forest && seq == forest, "forest refit differs")?;
    let poly2 = par::sequential(|| fit_poly(&ts, &patch, RAW, PolyOptions::default())).map_err(err)?;
    ensure(poly2 == poly, "poly refit differs")?;
    let dims = [24, 24, 24];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let src = Volume::from_fn(dims, |_, _, _| 0.0).map_err(err)?;
    let src = src.with_data((0..src.len()).map(|_| rng.random_range(0.0..1000.0)).collect()).map_err(err)?;
    let brain = Mask::from_fn(dims, |i, j, k| (7..17).contains(&i) && (7..17).contains(&j) && (7..17).contains(&k)).map_err(err)?;
    let jog = PatchSpec::jog25();
    let wide = step(3000, 5);
    let wide = TrainingSet::from_rows(
        wide.features.chunks(p).flat_map(|r| (0..25).map(move |j| r[j % p])).collect(),
        25,
        wide.targets.clone(),
    )
    .map_err(err)?;
    let rf_model = fit_forest(&wide, &jog, RAW, ForestOptions { trees: 10, ..opts }).map_err(err)?;
    let p1 = predict_volume(&rf_model, &src, &brain).map_err(err)?;
    let p2 = par::sequential(|| predict_volume(&rf_model, &src, &brain)).map_err(err)?;
    ensure(p1 == p2, "forest prediction differs between runs")?;
    Ok(format!("poly residual {resid:.1e}, forest MSE/var {:.4}", mse / var))
}

fn loaded(s: &Subject) -> LoadedSubject {
    LoadedSubject {
        id: s.id.clone(),
        images: BTreeMap::from([
            (Contrast::T1, s.t1.clone()),
            (Contrast::T2, s.t2.clone()),
            (Contrast::Flair, s.flair.clone()),
        ]),
        brain: s.brain.clone(),
        truth: None,
    }
}

/// Voxels drawn per training image in the cohort experiment. The method
/// itself draws 100,000; a smaller draw keeps the run inside its time budget
/// and the forest still fits the phantom tissue map.
const SAMPLES_PER_IMAGE: usize = 1000;
/// Smallest FCM-over-raw NCC margin seen across the four task/model cells
/// on the first full run, frozen as a regression floor.
const FCM_MARGIN_FLOOR: f64 = 0.02;

fn core_claim(report: &mrnorm::metrics::QualityReport) -> Check {
    let mut notes = Vec::new();
    let mut min_margin = f64::INFINITY;
    for task in ["t1-flair", "t1-t2"] {
        for synth in ["pr", "rf"] {
            let mean = |m: &str| report.summary(task, synth, m, Metric::Ncc).map(|s| s.mean).ok_or(format!("no {m} summary"));
            let raw = mean(RAW)?;
            let fcm = mean("fcm")?;
            let cmp = report
                .comparison(task, synth, Metric::Ncc, "fcm", RAW)
                .ok_or("no fcm vs raw comparison")?;
            ensure(
                fcm > raw && cmp.tested && cmp.p_value < 0.05,
                format!("{task} {synth}: fcm {fcm:.4} vs raw {raw:.4}, p {}", cmp.p_value),
            )?;
            for m in Method::ALL {
                let v = mean(m.as_str())?;
                ensure(v > raw, format!("{task} {synth}: {m} {v:.4} does not beat raw {raw:.4}"))?;
            }
            min_margin = min_margin.min(fcm - raw);
            notes.push(format!("{task}/{synth} +{:.3} (p={:.4})", fcm - raw, cmp.p_value));
        }
    }
    ensure(min_margin >= FCM_MARGIN_FLOOR, format!("smallest fcm margin {min_margin:.4}"))?;
    Ok(notes.join(", "))
}

fn no_consistent_winner(report: &mrnorm::metrics::QualityReport) -> Check {
    for task in ["t1-flair", "t1-t2"] {
        for synth in ["pr", "rf"] {
            if let Some(w) = consistent_winner(report, task, synth, 0.05) {
                return Err(format!("{w} wins every metric on {task}/{synth}"));
            }
        }
    }
    let smallest = report
        .comparisons
        .iter()
        .filter(|c| c.baseline != RAW)
        .map(|c| c.p_adjusted)
        .fold(f64::INFINITY, f64::min);
    Ok(format!("smallest Bonferroni-adjusted pairwise p {smallest:.4}"))
}

fn report_line(n: usize, name: &str, result: &Check, elapsed: Duration) -> bool {
    match result {
        Ok(detail) => println!("PASS criterion {n}: {name} [{:.1} s] {detail}", elapsed.as_secs_f64()),
        Err(why) => println!("FAIL criterion {n}: {name} [{:.1} s] {why}", elapsed.as_secs_f64()),
    }
    result.is_ok()
}

fn timed(f: impl FnOnce() -> Check) -> (Check, Duration) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed())
}

fn main() {
    let mut ok = true;
    let (subjects, gen) = {
        let t = Instant::now();
        (cohort(false), t.elapsed())
    };

    let (r, t) = timed(|| normalizer_contracts(&subjects));
    let r = r.and_then(|d| {
        ensure(t + gen < Duration::from_secs(60), format!("took {:.1} s", (t + gen).as_secs_f64()))?;
        Ok(d)
    });
    ok &= report_line(1, "normalizer contracts", &r, t + gen);

    let (r, t) = timed(|| gain_invariance(&subjects));
    ok &= report_line(2, "gain invariance", &r, t);

    let (r, t) = timed(|| metric_oracles(&subjects));
    ok &= report_line(3, "metric oracles", &r, t);

    let (r, t) = timed(synthesis_oracles);
    ok &= report_line(4, "synthesis oracles", &r, t);

    let start = Instant::now();
    let with_outlier: Vec<LoadedSubject> = cohort(true).iter().map(loaded).collect();
    let ids: Vec<String> = with_outlier.iter().map(|s| s.id.clone()).collect();
    let cfg = ExperimentConfig {
        normalizations: Normalization::all(),
        synth_settings: SynthSettings {
            samples_per_image: SAMPLES_PER_IMAGE,
            ..SynthSettings::default()
        },
        ..ExperimentConfig::default()
    };
    let report = run_experiment(&with_outlier, &ids[..9], &ids[9..], &cfg);
    let elapsed = start.elapsed();
    match report {
        Ok(report) => {
            let r = core_claim(&report).and_then(|d| {
                ensure(elapsed < Duration::from_secs(600), format!("took {:.1} s", elapsed.as_secs_f64()))?;
                Ok(d)
            });
            ok &= report_line(5, "normalization beats raw synthesis", &r, elapsed);
            ok &= report_line(6, "no consistent winner among methods", &no_consistent_winner(&report), Duration::ZERO);
        }
        Err(e) => {
            let r = Err(e.to_string());
            ok &= report_line(5, "normalization beats raw synthesis", &r, elapsed);
            ok &= report_line(6, "no consistent winner among methods", &r, Duration::ZERO);
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
