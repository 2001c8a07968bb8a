use mrnorm::manifest::CohortManifest;
use mrnorm::normalize::{load_model, save_model, Method};
use mrnorm::phantom::{generate_cohort, write_cohort, PhantomSpec};
use mrnorm::pipeline::{fit_normalizers, normalize_subject, NormSettings};
use mrnorm::synth::{
    fit_forest, fit_poly, load_regression, predict_volume, sample_patches, save_regression, ForestOptions, PatchSpec,
    PolyOptions,
};
use mrnorm::{nifti, Contrast};

fn spec() -> PhantomSpec {
    PhantomSpec {
        n_subjects: 4,
        dims: [32, 32, 32],
        seed: 21,
        ..PhantomSpec::default()
    }
}

#[test]
fn written_cohort_reloads_voxel_for_voxel() {
    let dir = tempfile::tempdir().unwrap();
    let subjects = generate_cohort(&spec()).unwrap();
    write_cohort(&subjects, dir.path()).unwrap();
    let cohort = CohortManifest::load(dir.path().join("manifest.json")).unwrap();
    for s in &subjects {
        let loaded = cohort.load_subject(&s.id).unwrap();
        for c in [Contrast::T1, Contrast::T2, Contrast::Flair] {
            assert_eq!(loaded.image(c).unwrap().data(), s.image(c).unwrap().data());
        }
        assert_eq!(loaded.brain, s.brain);
        assert_eq!(loaded.truth.unwrap().wm, s.wm);
    }
}

#[test]
fn saved_normalizers_reproduce_their_output() {
    let dir = tempfile::tempdir().unwrap();
    let subjects = generate_cohort(&spec()).unwrap();
    write_cohort(&subjects, dir.path()).unwrap();
    let cohort = CohortManifest::load(dir.path().join("manifest.json")).unwrap();
    let loaded: Vec<_> = cohort.manifest.subjects.iter().map(|e| cohort.load_subject(&e.id).unwrap()).collect();
    let refs: Vec<_> = loaded.iter().collect();
    let settings = NormSettings::default();
    for method in [Method::Zscore, Method::Fcm, Method::Hm, Method::Whitestripe, Method::Ravel] {
        let models = fit_normalizers(method, &refs, &[Contrast::T1, Contrast::Flair], &settings).unwrap();
        let reloaded = models
            .iter()
            .map(|(&c, m)| {
                let p = dir.path().join(format!("{method}-{c}.json"));
                save_model(m, &p).unwrap();
                (c, load_model(&p).unwrap())
            })
            .collect();
        let a = normalize_subject(&models, &loaded[0], &settings).unwrap();
        let b = normalize_subject(&reloaded, &loaded[0], &settings).unwrap();
        for (c, v) in &a.volumes {
            assert_eq!(v.data(), b.volumes[c].data(), "{method} {c}");
        }
        // the NIfTI writer keeps every bit of the normalized image
        let p = dir.path().join(format!("{method}.nii.gz"));
        nifti::save_volume(&a.volumes[&Contrast::T1], &p).unwrap();
        assert_eq!(nifti::load_volume(&p).unwrap().data(), a.volumes[&Contrast::T1].data());
    }
}

#[test]
fn saved_regressions_predict_identically() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_cohort(&spec()).unwrap().remove(0);
    let center = PatchSpec::center_six();
    let jog = PatchSpec::jog25();
    let poly_ts = sample_patches(&s.id, &s.t1, &s.flair, &s.brain, &center, 2_000, 3).unwrap();
    let forest_ts = sample_patches(&s.id, &s.t1, &s.flair, &s.brain, &jog, 2_000, 3).unwrap();
    let forest_opts = ForestOptions {
        trees: 5,
        ..ForestOptions::default()
    };
    let models = [
        fit_poly(&poly_ts, &center, "raw", PolyOptions::default()).unwrap(),
        fit_forest(&forest_ts, &jog, "raw", forest_opts).unwrap(),
    ];
    for m in &models {
        let p = dir.path().join(format!("{}.bin", m.kind()));
        save_regression(m, &p).unwrap();
        let back = load_regression(&p).unwrap();
        let a = predict_volume(m, &s.t1, &s.brain).unwrap();
        let b = predict_volume(&back, &s.t1, &s.brain).unwrap();
        assert_eq!(a.data(), b.data(), "{}", m.kind());
    }
}
