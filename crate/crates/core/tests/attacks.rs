mod common;

use projres_core::attacks::{
    self, AdversaryView, AttackContext, EvalPlan, NonmemberSource, ScoreFunction,
};
use projres_core::metrics::roc_and_auc;
use projres_core::{Error, Execution};

fn plan(round: usize) -> EvalPlan {
    EvalPlan {
        round,
        repetitions: 40,
        seed: 3,
        nonmember_source: NonmemberSource::Holdout,
    }
}

#[test]
fn projres_separates_perfectly_in_the_recoverable_regime() {
    let toy = common::small_toy(5);
    let trace = toy.train(Execution::default());
    let e = attacks::evaluate_attack(&ScoreFunction::PROJRES, &toy.backbone, &toy.dataset, &trace, &plan(4), Execution::default())
        .unwrap();
    assert_eq!(roc_and_auc(&e.member_scores(), &e.nonmember_scores()).unwrap().auc, 1.0);
    assert!(e.member_residuals().unwrap().iter().all(|&r| r < 1e-8));
    assert!(e.nonmember_residuals().unwrap().iter().all(|&r| r > 1e-3));
}

#[test]
fn evaluation_is_deterministic_across_modes() {
    let toy = common::small_toy(5);
    let trace = toy.train(Execution::default());
    let mut fs = vec![ScoreFunction::PROJRES];
    fs.extend(ScoreFunction::baselines());
    for f in fs {
        let f = match f {
            ScoreFunction::Fta { .. } => ScoreFunction::Fta { window: 3 },
            other => other,
        };
        let a = attacks::evaluate_attack(&f, &toy.backbone, &toy.dataset, &trace, &plan(4), Execution::Sequential).unwrap();
        let b = attacks::evaluate_attack(&f, &toy.backbone, &toy.dataset, &trace, &plan(4), Execution::Parallel).unwrap();
        assert_eq!(a, b, "{}", f.name());
    }
}

#[test]
fn other_client_nonmembers_come_from_outside_the_partition() {
    let toy = common::small_toy(2);
    let trace = toy.train(Execution::default());
    let mut p = plan(1);
    p.nonmember_source = NonmemberSource::OtherClients;
    for (m, n) in attacks::draw_candidates(&trace, &toy.dataset, &p).unwrap() {
        assert!(trace.batch(1, m.client).unwrap().contains(&m.sample));
        assert!(!trace.partition_of(n.client).unwrap().contains(&n.sample));
        assert!(toy.dataset.train_ids.contains(&n.sample));
    }
}

#[test]
fn starved_baselines_report_missing_history() {
    let toy = common::small_toy(3);
    let trace = toy.train(Execution::default());
    let ctx = AttackContext {
        backbone: &toy.backbone,
        dataset: &toy.dataset,
        view: AdversaryView::new(&trace),
    };
    let sample = toy.dataset.holdout_ids[0];
    assert!(matches!(attacks::score_diff(&ctx, 0, sample), Err(Error::NeedsHistory(_))));
    assert!(matches!(attacks::fta_score(&ctx, 1, 5, sample), Err(Error::NeedsHistory(_))));
    assert!(matches!(attacks::fta_score(&ctx, 2, 1, sample), Err(Error::NeedsHistory(_))));
    assert!(attacks::fta_score(&ctx, 2, 3, sample).is_ok());

    let mut few = trace.clone();
    few.round_mut(2).unwrap().retain_clients(&[0, 1]);
    let ctx = AttackContext {
        view: AdversaryView::new(&few),
        ..ctx
    };
    assert!(matches!(
        attacks::fedmia_score(&ctx, 2, 0, sample),
        Err(Error::InsufficientPopulation { needed: 3, found: 2 })
    ));
}

#[test]
fn score_ratio_and_diff_read_consecutive_rounds() {
    let toy = common::small_toy(3);
    let trace = toy.train(Execution::default());
    let ctx = AttackContext {
        backbone: &toy.backbone,
        dataset: &toy.dataset,
        view: AdversaryView::new(&trace),
    };
    let s = toy.dataset.train_ids[0];
    let l1 = -attacks::fedloss_score(&ctx, 1, s).unwrap();
    let l2 = -attacks::fedloss_score(&ctx, 2, s).unwrap();
    assert!((attacks::score_diff(&ctx, 2, s).unwrap() - (l1 - l2)).abs() < 1e-15);
    assert!((attacks::score_ratio(&ctx, 2, s).unwrap() - l1 / l2).abs() < 1e-15);
}
