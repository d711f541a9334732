"""Scoring, action selection, and the deployment loop."""

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from scoopgp.decide import (
    DatasetTarget,
    DeploymentTrace,
    LiveTarget,
    ScorerConfig,
    SupportSet,
    run_deployment,
    score_greedy,
    score_mean_only,
    score_ucb,
    select_action,
)
from scoopgp.errors import SelectionError
from scoopgp.gp import DeepGpModel, mean_eval_batch, posterior_batch
from scoopgp.nnet import NetworkSpec, params_from_layers
from scoopgp.tasks import DEPTH_MIN, ScoopAction, ScoopRecord, TaskDataset

from helpers import flat_task, identity_embedding_model, identity_params


def _linear_mean_model(d, w, bias=0.0, log_noise=np.log(0.1)):
    fspec = NetworkSpec(d, (), d)
    mspec = NetworkSpec(d, (), 1)
    kspec = NetworkSpec(d, (), d)
    W = np.asarray(w, dtype=np.float64).reshape(1, d)
    mean = params_from_layers(mspec, [(W, np.array([bias]))])
    return DeepGpModel(
        feature_spec=fspec, feature_params=identity_params(fspec),
        mean_spec=mspec, mean_params=mean,
        kernel_spec=kspec, kernel_params=identity_params(kspec),
        log_lengthscale=0.0, log_outputscale=0.0, log_noise=float(log_noise),
    )


def _deploy_dataset(rewards, task_id="dep0", seed=0):
    """Distinct actions, features that expose the reward in coordinate 0."""
    rewards = np.asarray(rewards, dtype=np.float64)
    n = len(rewards)
    records = []
    for i, r in enumerate(rewards):
        action = ScoopAction(0.05 + 0.7 * i / max(n - 1, 1), 0.1 + 0.3 * (i % 7) / 7,
                            i % 8, DEPTH_MIN, "soft")
        records.append(ScoopRecord(action, float(r), np.array([r / 10.0])))
    return TaskDataset(task_id, "single", ("matA",), tuple(records))


# ---------------------------------------------------------------------------
# scorers

def test_scorer_config_validation():
    assert ScorerConfig().kind == "ucb"
    assert ScorerConfig().gamma == 2.0
    with pytest.raises(ValueError):
        ScorerConfig(kind="thompson")


def test_ucb_combines_mean_and_uncertainty():
    model = identity_embedding_model(2, log_outputscale=np.log(4.0),
                                     log_noise=np.log(0.5), mean_bias=5.0)
    support = SupportSet(2)
    candidates = np.array([[0.0, 0.0], [1.0, 2.0]])
    scores = score_ucb(model, support, candidates, gamma=2.0)
    # empty support: mean bias plus gamma * sqrt(outputscale + noise var)
    assert np.allclose(scores, 5.0 + 2.0 * np.sqrt(4.0 + 0.25))

    support.append(np.array([0.0, 0.0]), 9.0)
    mu, var = posterior_batch(model, *support.arrays(), candidates)
    assert np.allclose(score_ucb(model, support, candidates, gamma=1.7),
                       mu + 1.7 * np.sqrt(var))
    assert np.allclose(score_ucb(model, support, candidates, gamma=0.0),
                       score_greedy(model, support, candidates))


def test_mean_scorer_ignores_the_support_set():
    model = identity_embedding_model(2, mean_bias=3.0)
    candidates = np.array([[0.0, 0.0], [0.5, 0.5], [5.0, 5.0]])
    base = score_mean_only(model, candidates)
    assert np.allclose(base, mean_eval_batch(model, candidates))

    support = SupportSet(2)
    support.append(np.array([0.0, 0.0]), 50.0)
    assert np.array_equal(score_mean_only(model, candidates), base)
    # the adaptive scorer does react to the same evidence
    adapted = score_greedy(model, support, candidates)
    assert not np.allclose(adapted, base)
    assert adapted[0] > base[0]


def test_greedy_ranking_follows_the_posterior_mean():
    model = _linear_mean_model(3, (10.0, 0.0, 0.0))
    candidates = np.array([[0.3, 0.0, 0.0], [0.9, 0.0, 0.0], [0.1, 0.0, 0.0]])
    scores = score_greedy(model, SupportSet(3), candidates)
    assert np.allclose(scores, candidates[:, 0] * 10.0)
    assert select_action(scores, np.ones(3, dtype=bool)) == 1


# ---------------------------------------------------------------------------
# selection

def test_select_action_basics():
    scores = np.array([3.0, 9.0, 5.0])
    only_last = np.array([False, False, True])
    assert select_action(scores, only_last) == 2
    assert select_action(scores, np.ones(3, dtype=bool)) == 1
    with pytest.raises(SelectionError):
        select_action(scores, np.zeros(3, dtype=bool))
    with pytest.raises(ValueError):
        select_action(scores, np.ones(4, dtype=bool))


def test_select_action_breaks_ties_deterministically():
    scores = np.array([7.0, 7.0, 1.0, 7.0])
    mask = np.ones(4, dtype=bool)
    assert select_action(scores, mask) == 0
    picks = {select_action(scores, mask, tie_seed=s) for s in range(24)}
    assert picks <= {0, 1, 3}
    assert len(picks) > 1
    assert select_action(scores, mask, tie_seed=5) == select_action(scores, mask, tie_seed=5)


@st.composite
def _scores_and_mask(draw):
    n = draw(st.integers(1, 20))
    scores = draw(st.lists(st.floats(-1e6, 1e6), min_size=n, max_size=n))
    mask = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    assume(any(mask))
    return np.asarray(scores), np.asarray(mask)


@given(_scores_and_mask())
@settings(max_examples=200, deadline=None, derandomize=True)
def test_select_action_matches_masked_argmax(case):
    scores, mask = case
    oracle = int(np.argmax(np.where(mask, scores, -np.inf)))
    assert select_action(scores, mask) == oracle


def test_support_set_validates_and_preserves_order():
    support = SupportSet(2)
    assert len(support) == 0
    xs, ys = support.arrays()
    assert xs.shape == (0, 2) and ys.shape == (0,)
    support.append(np.array([1.0, 2.0]), 4.0)
    support.append(np.array([3.0, 4.0]), 5.0)
    xs, ys = support.arrays()
    assert np.array_equal(xs, [[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ys, [4.0, 5.0])
    with pytest.raises(ValueError):
        support.append(np.zeros(3), 1.0)


# ---------------------------------------------------------------------------
# deployment, dataset mode

def test_deployment_rejects_hopeless_or_empty_targets():
    ds = _deploy_dataset([1.0, 4.0, 9.0])
    with pytest.raises(ValueError, match="dep0.*threshold"):
        run_deployment(None, ScorerConfig(kind="random"), DatasetTarget(ds), 10.0, budget=5)
    empty = TaskDataset("dep1", "single", ("matA",), ())
    with pytest.raises(ValueError, match="no records"):
        run_deployment(None, ScorerConfig(kind="random"), DatasetTarget(empty), 1.0, budget=5)
    with pytest.raises(ValueError, match="budget"):
        run_deployment(None, ScorerConfig(kind="random"), DatasetTarget(ds), 1.0, budget=0)


def test_deployment_succeeds_immediately_when_everything_clears():
    ds = _deploy_dataset([5.0, 6.0, 7.0])
    trace = run_deployment(None, ScorerConfig(kind="random"), DatasetTarget(ds), 5.0, budget=3)
    assert trace.success and trace.attempts == 1
    assert trace.episodes[0].support_size == 0
    assert trace.episodes[0].reward >= 5.0


def test_perfect_mean_model_goes_straight_to_the_best_record():
    rewards = [3.0, 7.0, 11.0, 5.0, 2.0]
    ds = _deploy_dataset(rewards)
    model = _linear_mean_model(3, (10.0, 0.0, 0.0))
    trace = run_deployment(model, ScorerConfig(kind="mean"), DatasetTarget(ds), 11.0, budget=5)
    assert trace.success and trace.attempts == 1
    assert trace.episodes[0].reward == 11.0
    assert trace.episodes[0].action == ds.records[2].action


def test_failures_accumulate_without_repeats():
    rewards = [1.0, 2.0, 3.0, 4.0, 50.0, 5.0, 6.0, 7.0]
    ds = _deploy_dataset(rewards)
    trace = run_deployment(None, ScorerConfig(kind="random"), DatasetTarget(ds), 50.0,
                           budget=len(rewards), seed=3)
    assert trace.success
    taken = [e.action for e in trace.episodes]
    assert len(set(taken)) == len(taken)
    for e in trace.episodes[:-1]:
        assert e.reward < 50.0
    assert trace.episodes[-1].reward == 50.0
    # the support set holds exactly the failures seen before each episode
    assert [e.support_size for e in trace.episodes[:-1]] == list(range(1, trace.attempts))
    assert trace.episodes[-1].support_size == trace.attempts - 1


def test_budget_caps_the_episode_count():
    rewards = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 100.0]
    ds = _deploy_dataset(rewards)
    found_failure = False
    for seed in range(6):
        trace = run_deployment(None, ScorerConfig(kind="random"), DatasetTarget(ds), 100.0,
                               budget=2, seed=seed)
        assert trace.attempts <= 2
        if not trace.success:
            found_failure = True
            assert trace.attempts == 2
    assert found_failure


def test_deployment_is_deterministic_and_renders():
    ds = _deploy_dataset([1.0, 9.0, 2.0, 8.0, 3.0])
    sc = ScorerConfig(kind="random")
    a = run_deployment(None, sc, DatasetTarget(ds), 9.0, budget=5, seed=11)
    b = run_deployment(None, sc, DatasetTarget(ds), 9.0, budget=5, seed=11)
    assert a == b
    text = a.to_text()
    assert text.splitlines()[0].startswith("# deployment trace task=dep0")
    assert f"success={int(a.success)}" in text
    assert len(text.strip().splitlines()) == 2 + a.attempts


def test_adaptive_scorers_require_a_model():
    ds = _deploy_dataset([1.0, 2.0, 3.0])
    for kind in ("ucb", "greedy", "mean"):
        with pytest.raises(ValueError, match="needs a model"):
            run_deployment(None, ScorerConfig(kind=kind), DatasetTarget(ds), 3.0, budget=2)


def test_unknown_target_type_is_rejected():
    with pytest.raises(TypeError):
        run_deployment(None, ScorerConfig(kind="random"), "not-a-target", 1.0, budget=2)


def test_random_policy_matches_the_sampling_odds():
    # 5 winners among 100 records: uniform draws without replacement stop
    # after (100 + 1) / (5 + 1) attempts on average
    rewards = np.zeros(100)
    rewards[[7, 23, 41, 66, 90]] = 2.0
    ds = _deploy_dataset(rewards)
    sc = ScorerConfig(kind="random")
    attempts = [
        run_deployment(None, sc, DatasetTarget(ds), 1.0, budget=100, seed=t).attempts
        for t in range(2500)
    ]
    assert abs(np.mean(attempts) - 101.0 / 6.0) < 1.0


# ---------------------------------------------------------------------------
# deployment, live mode

def _live_material():
    from scoopgp.tasks import Material
    return Material("live0", np.array([0.9, 0.05, 0.7, 0.0]), np.full(3, 0.5))


def test_live_deployment_runs_against_a_mutable_copy():
    task = flat_task(_live_material(), task_id="liveA")
    original = task.heightmap.copy()
    trace = run_deployment(None, ScorerConfig(kind="random"), LiveTarget(task),
                           threshold=1e9, budget=2, seed=4)
    assert not trace.success
    assert trace.attempts == 2
    assert all(e.reward >= 0.0 for e in trace.episodes)
    assert [e.support_size for e in trace.episodes] == [1, 2]
    assert np.array_equal(task.heightmap, original)
    assert trace.task_id == "liveA"


def test_live_deployment_stops_at_the_threshold():
    task = flat_task(_live_material(), task_id="liveB")
    trace = run_deployment(None, ScorerConfig(kind="random"), LiveTarget(task),
                           threshold=0.0, budget=3, seed=5)
    assert trace.success and trace.attempts == 1
    assert isinstance(trace, DeploymentTrace)
