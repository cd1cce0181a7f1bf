use std::fs;
use std::io::BufReader;

use ddpnkit::datagen::{generate_splits, Process};
use ddpnkit::ensemble::train_ensemble;
use ddpnkit::metrics::evaluate;
use ddpnkit::network::train;
use ddpnkit::{Ensemble, Error, Family, LossSpec, MlpConfig, MlpModel, MomentMode, TrainConfig};

fn small(family: Family, beta: f64, epochs: usize) -> (MlpConfig, TrainConfig) {
    let mut cfg = TrainConfig::new(LossSpec::new(family, beta).unwrap(), epochs, 3);
    cfg.lr0 = 0.01;
    (MlpConfig::new(1, vec![16, 16], family, 3), cfg)
}

#[test]
fn training_is_deterministic() {
    let s = generate_splits(Process::MisspecNb, [200, 50, 50], 2, 1).unwrap();
    let (mlp, cfg) = small(Family::DoublePoisson, 0.5, 8);
    let a = train(&s.train.data, &s.val.data, &mlp, &cfg).unwrap();
    let b = train(&s.train.data, &s.val.data, &mlp, &cfg).unwrap();
    assert!(a.report.same_run(&b.report));
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.best.write_checkpoint(&mut ca).unwrap();
    b.best.write_checkpoint(&mut cb).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn report_tracks_the_best_validation_epoch() {
    let s = generate_splits(Process::MisspecPoisson, [300, 60, 60], 0, 1).unwrap();
    for family in [Family::DoublePoisson, Family::Poisson, Family::NegBinomial, Family::Gaussian] {
        let (mlp, cfg) = small(family, 0.0, 25);
        let out = train(&s.train.data, &s.val.data, &mlp, &cfg).unwrap();
        let r = &out.report;
        assert_eq!(r.train_loss.len(), 25);
        assert_eq!(r.val_loss.len(), 25);
        let (argmin, min) = r
            .val_loss
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert_eq!(r.best_epoch, argmin + 1, "{family}");
        assert_eq!(r.best_val_loss, *min);
        assert!(r.train_loss[24] < r.train_loss[0], "{family}: {:?}", r.train_loss);
        // the kept weights reproduce the recorded validation loss
        let again = out.best.mean_loss(&s.val.data, false).unwrap();
        assert!((again - r.best_val_loss).abs() <= 1e-9 * again.abs().max(1.0));
    }
}

#[test]
fn divergence_carries_a_partial_report() {
    let s = generate_splits(Process::MisspecNb, [200, 50, 50], 0, 1).unwrap();
    let (mlp, mut cfg) = small(Family::DoublePoisson, 0.0, 20);
    cfg.lr0 = 1e6;
    match train(&s.train.data, &s.val.data, &mlp, &cfg) {
        Err(Error::NumericDivergence { epoch, partial, .. }) => {
            let partial = partial.expect("partial report");
            assert!(epoch >= 1);
            assert_eq!(partial.train_loss.len(), epoch - 1);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn glm_is_the_zero_hidden_layer_network() {
    let s = generate_splits(Process::MisspecPoisson, [400, 100, 100], 1, 1).unwrap();
    let mut cfg = TrainConfig::new(LossSpec::new(Family::Poisson, 0.0).unwrap(), 60, 1);
    cfg.lr0 = 0.05;
    let mlp = MlpConfig::new(1, Vec::new(), Family::Poisson, 1);
    let out = train(&s.train.data, &s.val.data, &mlp, &cfg).unwrap();
    let dists = out.best.predict_distributions(s.test.data.x.view()).unwrap();
    let rec = evaluate(&dists, &s.test.data.y, MomentMode::EfronApprox).unwrap();
    assert!(rec.mae.is_finite() && rec.crps_mean.is_finite());
    // a log-linear model has one weight and one bias
    let mut buf = Vec::new();
    out.best.write_checkpoint(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.contains("hidden_widths=\n"), "{text}");
}

#[test]
fn ensembles_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_splits(Process::SineConflation, [200, 50, 50], 0, 1).unwrap();
    let (mlp, cfg) = small(Family::DoublePoisson, 0.0, 5);
    let (ens, reports) = train_ensemble(&s.train.data, &s.val.data, &mlp, &cfg, 3).unwrap();
    assert_eq!(reports.len(), 3);
    let seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, [3, 4, 5]);

    let mut paths = Vec::new();
    for (i, m) in ens.members().iter().enumerate() {
        let p = dir.path().join(format!("m{i}.ckpt"));
        m.write_checkpoint(fs::File::create(&p).unwrap()).unwrap();
        let back = MlpModel::read_checkpoint(BufReader::new(fs::File::open(&p).unwrap())).unwrap();
        assert_eq!(
            back.predict_heads(s.test.data.x.view()).unwrap(),
            m.predict_heads(s.test.data.x.view()).unwrap()
        );
        paths.push(p);
    }
    let manifest = dir.path().join("run.ensemble");
    Ensemble::write_manifest(&manifest, Family::DoublePoisson, &paths).unwrap();
    let loaded = Ensemble::load_manifest(&manifest).unwrap();
    let x = s.test.data.x.view();
    assert_eq!(loaded.decompose(x).unwrap(), ens.decompose(x).unwrap());
    // members trained from different seeds disagree somewhere
    assert!(ens.decompose(x).unwrap().iter().any(|d| d.epistemic > 0.0));
}

#[test]
fn data_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_splits(Process::BetaStudy, [50, 10, 10], 4, 2).unwrap();
    let p = dir.path().join("beta.csv");
    s.train.data.write_csv(fs::File::create(&p).unwrap()).unwrap();
    let back = ddpnkit::Dataset::read_csv(fs::File::open(&p).unwrap()).unwrap();
    assert_eq!(back, s.train.data);
    assert_eq!(back.len(), 54);
}
