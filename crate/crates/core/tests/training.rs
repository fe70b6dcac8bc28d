use softrec::data::{split_chronological, synthesize_dataset, PromptTemplate, SampleCaps, SplitRatios, SyntheticSpec};
use softrec::distill::{build_sd_dataset, mean_sd_loss, SdPair};
use softrec::model::{ModelConfig, ModelState};
use softrec::trainer::{
    batch_gradient, train, train_sdft_only, train_sft, train_soft, EpochReport, TauSource, TrainConfig, TrainOutcome,
};
use softrec::{PromptTargetPair, SplitDataset};

fn toy() -> (SplitDataset, ModelState) {
    let spec = SyntheticSpec { n_users: 24, n_items: 18, n_categories: 3, stickiness: 0.8, min_len: 6, max_len: 9, popularity_skew: 1.0 };
    let data = synthesize_dataset(&spec, 4).unwrap();
    let ds = split_chronological(&data, SplitRatios::default(), &PromptTemplate::default(), 128, SampleCaps::default(), 4).unwrap();
    let m = ModelState::init(ModelConfig { d_model: 12, d_ff: 16, ..ModelConfig::new(ds.vocab.len()) }, 4);
    (ds, m)
}

fn grads(m: &ModelState) -> Vec<Vec<f64>> {
    m.params().iter().map(|p| p.grad().unwrap().to_vec()).collect()
}

fn sd_for(m: &ModelState, ds: &SplitDataset) -> Vec<SdPair> {
    // A briefly trained teacher, so labels differ from the targets.
    let cfg = TrainConfig { epochs_max: 1, ..Default::default() };
    let out = train_sft(&cfg, m.clone(), ds, 0, &mut |_: &ModelState, _: usize| Ok(0.0)).unwrap();
    build_sd_dataset(&out.last, &ds.train, ds.max_gen_len).unwrap()
}

#[test]
fn mixed_gradient_is_the_convex_combination() {
    let (ds, m) = toy();
    let sd = sd_for(&m, &ds);
    let real: Vec<&PromptTargetPair> = ds.train.iter().take(8).collect();
    let sdb: Vec<&SdPair> = sd.iter().take(8).collect();
    let mut a = m.clone();
    batch_gradient(&mut a, &real, &sdb, 0.0).unwrap();
    let g_real = grads(&a);
    batch_gradient(&mut a, &real, &sdb, 1.0).unwrap();
    let g_sd = grads(&a);
    for tau in [0.0, 0.25, 1.0] {
        let bl = batch_gradient(&mut a, &real, &sdb, tau).unwrap();
        let mixed = grads(&a);
        for ((gm, gr), gs) in mixed.iter().zip(&g_real).zip(&g_sd) {
            for ((x, r), s) in gm.iter().zip(gr).zip(gs) {
                assert!((x - ((1.0 - tau) * r + tau * s)).abs() < 1e-9, "tau {tau}");
            }
        }
        let expect = (1.0 - tau) * bl.real.unwrap_or(0.0) + tau * bl.sd.unwrap_or(0.0);
        assert_eq!(bl.total, expect);
    }
}

fn same_params(a: &ModelState, b: &ModelState) -> bool {
    a.params().iter().zip(b.params()).all(|(x, y)| x.data() == y.data())
}

fn losses(r: &[EpochReport]) -> Vec<f64> {
    r.iter().map(|e| e.loss).collect()
}

fn run(ds: &SplitDataset, m: &ModelState, sd: Option<&[SdPair]>, tau: TauSource) -> TrainOutcome {
    let cfg = TrainConfig { epochs_max: 2, patience: 5, ..Default::default() };
    let mut v = |_: &ModelState, e: usize| Ok(e as f64);
    let mut hook = |_: &EpochReport, _: &ModelState| Ok(());
    train(&cfg, m.clone(), &ds.train, sd, tau, ds.max_gen_len, 7, &mut v, &mut hook).unwrap()
}

#[test]
fn fixed_tau_endpoints_reduce_to_single_source_regimes() {
    let (ds, m) = toy();
    let sd = sd_for(&m, &ds);
    let sft = run(&ds, &m, None, TauSource::Fixed(0.0));
    let mixed0 = run(&ds, &m, Some(&sd), TauSource::Fixed(0.0));
    assert!(same_params(&sft.last, &mixed0.last));
    assert_eq!(losses(&sft.reports), losses(&mixed0.reports));

    let cfg = TrainConfig { epochs_max: 2, patience: 5, ..Default::default() };
    let only = train_sdft_only(&cfg, m.clone(), &ds, &sd, 7, &mut |_: &ModelState, e: usize| Ok(e as f64)).unwrap();
    let mixed1 = run(&ds, &m, Some(&sd), TauSource::Fixed(1.0));
    assert!(same_params(&only.last, &mixed1.last));

    // alpha = 0 pins tau at one for every epoch.
    let cfg0 = TrainConfig { alpha: 0.0, m: 16, ..cfg };
    let soft = train_soft(&cfg0, m.clone(), &ds, &sd, 7, &mut |_: &ModelState, e: usize| Ok(e as f64)).unwrap();
    assert!(soft.reports.iter().all(|r| r.tau == 1.0));
    assert!(same_params(&only.last, &soft.last));
    assert_eq!(losses(&only.reports), losses(&soft.reports));
}

#[test]
fn runs_are_deterministic() {
    let (ds, m) = toy();
    let sd = sd_for(&m, &ds);
    let cfg = TrainConfig { epochs_max: 3, m: 16, ..Default::default() };
    let go = || {
        let mut v = softrec::trainer::HitRatioValidator { data: &ds, k: 5 };
        train_soft(&cfg, m.clone(), &ds, &sd, 3, &mut v).unwrap()
    };
    let (a, b) = (go(), go());
    assert_eq!(a.reports.len(), b.reports.len());
    assert!(a.reports.iter().zip(&b.reports).all(|(x, y)| x.same_numbers(y)));
    assert!(same_params(&a.best, &b.best));
    assert_eq!(a.scheduler, b.scheduler);
}

#[test]
fn soft_schedule_follows_measured_distances() {
    let (ds, m) = toy();
    let sd = sd_for(&m, &ds);
    let cfg = TrainConfig { epochs_max: 3, patience: 5, m: 16, alpha: 2.0, ..Default::default() };
    let out = train_soft(&cfg, m, &ds, &sd, 1, &mut |_: &ModelState, e: usize| Ok(e as f64)).unwrap();
    assert_eq!(out.reports[0].tau, 1.0);
    let s = out.scheduler.unwrap();
    for r in &out.reports {
        let expect = (2.0 * (r.d_t.unwrap() / r.d0.unwrap() - 1.0)).exp().min(1.0);
        assert_eq!(r.tau, expect);
        assert_eq!(r.d0, Some(s.d0));
    }
    assert_eq!(s.sample.len(), 16);
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let (ds, m) = toy();
    let scores = [0.2, 0.5, 0.4, 0.45, 0.1];
    let cfg = TrainConfig { epochs_max: 5, patience: 3, ..Default::default() };
    let mut seen = Vec::new();
    let out = train_sft(&cfg, m, &ds, 0, &mut |mm: &ModelState, e: usize| {
        seen.push(mm.clone());
        Ok(scores[e - 1])
    })
    .unwrap();
    assert_eq!(out.best_epoch, 2);
    assert_eq!(out.reports.len(), 5);
    assert!(same_params(&out.best, &seen[1]));
    let best = out.reports[out.best_epoch - 1].valid_score;
    assert!(out.reports[..out.best_epoch].iter().all(|r| r.valid_score <= best));
}

#[test]
fn empty_self_labels_carry_no_gradient() {
    let (ds, m) = toy();
    let sd = sd_for(&m, &ds);
    let real: Vec<&PromptTargetPair> = ds.train.iter().take(6).collect();
    let kept: Vec<&SdPair> = sd.iter().take(6).collect();
    let junk: Vec<SdPair> = sd.iter().skip(6).take(4).map(|p| SdPair { empty: true, ..p.clone() }).collect();
    let mut with_junk = kept.clone();
    with_junk.extend(junk.iter());

    let mut a = m.clone();
    let la = batch_gradient(&mut a, &real, &kept, 0.5).unwrap();
    let mut b = m.clone();
    let lb = batch_gradient(&mut b, &real, &with_junk, 0.5).unwrap();
    assert_eq!(grads(&a), grads(&b));
    assert_eq!(la, lb);

    let all_empty: Vec<&SdPair> = junk.iter().collect();
    let mut c = m.clone();
    let lc = batch_gradient(&mut c, &[], &all_empty, 1.0).unwrap();
    assert_eq!(lc.sd, None);
    assert!(grads(&c).iter().flatten().all(|g| *g == 0.0));
}

#[test]
fn ten_self_labels_can_be_memorised() {
    let (mut ds, m) = toy();
    ds.train.truncate(10);
    let sd = sd_for(&m, &ds);
    let cfg = TrainConfig {
        epochs_max: 300,
        patience: 300,
        batch_size: 10,
        optimizer: softrec::optim::OptimizerKind::Adam,
        lr: 1e-2,
        ..Default::default()
    };
    let out = train_sdft_only(&cfg, m, &ds, &sd, 1, &mut |_: &ModelState, e: usize| Ok(e as f64)).unwrap();
    let (loss, skipped) = mean_sd_loss(&out.last, &sd).unwrap();
    assert_eq!(skipped, 0);
    assert!(loss < 0.01, "sd loss {loss}");
}
