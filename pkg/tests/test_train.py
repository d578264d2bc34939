import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from posehmm.detector import LinearDetector
from posehmm.evaluation import EventInterval, match_intervals
from posehmm.hmm import TransitionMatrix
from posehmm.synth import SceneSpec, generate_scene
from posehmm.train import (
    DetectorEmissions,
    HmmEventModel,
    StarvedStateError,
    TableEmissions,
    TrainingInstance,
    best_threshold,
    describe_tracks,
    e_step,
    initialize_assignments,
    instances_for_label,
    m_step,
    run_em,
)


def _instances(rng, lengths, d=5):
    return [TrainingInstance(None, 0, T, rng.normal(size=(T, d))) for T in lengths]


def test_initial_segmentation_puts_remainder_last():
    g = initialize_assignments(_instances(np.random.default_rng(0), [7]), 3)[0]
    assert g.sum(axis=0).tolist() == [2, 2, 3]
    assert np.array_equal(np.argmax(g, axis=1), [0, 0, 1, 1, 2, 2, 2])
    g = initialize_assignments(_instances(np.random.default_rng(0), [9]), 3)[0]
    assert g.sum(axis=0).tolist() == [3, 3, 3]


def test_initial_segmentation_rejects_short_instances():
    with pytest.raises(ValueError, match="fewer than"):
        initialize_assignments(_instances(np.random.default_rng(0), [2]), 3)


def _negatives(rng, n=60, d=5):
    return rng.normal(-1.0, 1.0, size=(n, d))


def test_one_hot_gammas_train_each_detector_on_its_segment():
    rng = np.random.default_rng(1)
    inst = _instances(rng, [9, 12, 10])
    negs = _negatives(rng)
    gammas = initialize_assignments(inst, 3)
    hyper = {"reg": 1.0, "seed": 4}
    em = DetectorEmissions().fit(inst, gammas, negs, hyper)
    X = np.concatenate([i.descriptors for i in inst])
    states = np.argmax(np.concatenate(gammas), axis=1)
    for i, det in enumerate(em.detectors):
        Xi = np.vstack([X[states == i], negs])
        y = np.r_[np.ones((states == i).sum()), -np.ones(len(negs))]
        ref = LinearDetector(reg=1.0, seed=4).fit(Xi, y)
        assert det.coef_.tobytes() == ref.coef_.tobytes()
        assert det.intercept_ == ref.intercept_


def test_uniform_gammas_give_identical_detectors():
    rng = np.random.default_rng(2)
    inst = _instances(rng, [8, 11])
    gammas = [np.full((len(i), 4), 0.25) for i in inst]
    em = DetectorEmissions().fit(inst, gammas, _negatives(rng), {"reg": 1.0})
    for det in em.detectors[1:]:
        assert det.coef_.tobytes() == em.detectors[0].coef_.tobytes()
        assert det.score_min_ == em.detectors[0].score_min_


def test_uniform_emissions_leave_gammas_to_transitions():
    rng = np.random.default_rng(3)
    inst = _instances(rng, [6, 6])
    trans = TransitionMatrix.left_right(3)
    table = TableEmissions(np.full((3, 1), 0.5))
    for k in inst:
        k.descriptors = np.zeros(len(k), dtype=int)
    gammas, _, _ = e_step(inst, trans, table)
    np.testing.assert_array_equal(gammas[0], gammas[1])
    # same result with all-ones emissions: only the transitions matter
    ones, _, _ = e_step(inst, trans, TableEmissions(np.ones((3, 1))))
    np.testing.assert_allclose(gammas[0], ones[0], atol=1e-12)


def _random_generative_problem(rng):
    n = int(rng.integers(2, 5))
    k = int(rng.integers(2, 5))
    table = rng.uniform(0.05, 1.0, size=(n, k))
    table /= table.sum(axis=1, keepdims=True)
    inst = []
    for _ in range(int(rng.integers(2, 6))):
        T = int(rng.integers(n, 12))
        inst.append(TrainingInstance(None, 0, T, rng.integers(0, k, size=T)))
    return n, table, inst


@pytest.mark.parametrize("update", [False, True])
def test_generative_em_is_monotone(update):
    rng = np.random.default_rng(4 + update)
    for _ in range(50):
        n, table, inst = _random_generative_problem(rng)
        _, _, trace, _, n_iter = run_em(inst, n, TableEmissions(table, update=update),
                                        max_iter=10, tol=0.0)
        assert n_iter == 10
        assert np.all(np.diff(trace) >= -1e-9), trace


def test_starved_state_is_reported():
    rng = np.random.default_rng(5)
    inst = _instances(rng, [4, 4])
    gammas = [np.tile([0.7, 0.2, 0.1], (4, 1)) for _ in inst]
    with pytest.raises(StarvedStateError, match="starved state 2") as err:
        m_step(inst, gammas, TransitionMatrix.left_right(3), TableEmissions(np.ones((3, 1))),
               None, {})
    assert err.value.state == 2


def _oracle_threshold(lls, hits, truth, thr):
    """Every nested keep-set, scored independently; ties favour the smaller set."""
    values = sorted(set(lls))
    best = (-1.0, None)
    for cut in values + [np.inf]:
        kept = [h for h, ll in zip(hits, lls) if ll >= cut]
        f1 = match_intervals(truth, kept, thr).f1
        if f1 >= best[0]:
            best = (f1, len(kept))
    return best


def test_threshold_sweep_matches_oracle():
    rng = np.random.default_rng(6)
    for _ in range(60):
        truth = [EventInterval("e", int(s), int(s) + int(rng.integers(5, 30)))
                 for s in rng.integers(0, 300, size=rng.integers(1, 6))]
        hits = [EventInterval("e", int(s), int(s) + int(rng.integers(5, 30)))
                for s in rng.integers(0, 300, size=rng.integers(1, 10))]
        hits += [EventInterval("e", t.start + 1, t.end) for t in truth[: int(rng.integers(0, 3))]]
        lls = [float(rng.integers(-8, 0)) for _ in hits]
        cut, f1 = best_threshold(lls, hits, truth, 0.1)
        ref_f1, ref_kept = _oracle_threshold(lls, hits, truth, 0.1)
        assert f1 == ref_f1
        assert sum(ll >= cut for ll in lls) == ref_kept


def test_threshold_prefers_higher_cutoff_on_ties():
    truth = [EventInterval("e", 0, 10)]
    hits = [EventInterval("e", 0, 10), EventInterval("e", 50, 60)]
    cut, f1 = best_threshold([-1.0, -3.0], hits, truth, 0.1)
    assert f1 == 1.0 and cut == -2.0
    cut, f1 = best_threshold([-1.0], [EventInterval("e", 50, 60)], truth, 0.1)
    assert f1 == 0.0 and cut == np.inf


@pytest.fixture(scope="module")
def small_scene():
    spec = SceneSpec(n_frames=500, events_per_class=4, seed=3)
    frames, tracks, truth = generate_scene(spec)
    return spec, frames, tracks, truth, describe_tracks(tracks, frames)


def test_trained_state_detectors_prefer_their_pose(small_scene):
    spec, frames, tracks, truth, desc = small_scene
    inst = instances_for_label("raise", tracks, truth.annotations, desc)
    model = HmmEventModel(label="raise", n_states=3, max_iter=8, seed=0).fit(inst, frames=frames)
    starts = {t.track_id: t.start for t in tracks}
    X, poses = [], []
    for a, i in zip([a for a in truth.annotations if a.label == "raise"], inst):
        X.append(i.descriptors)
        poses.append(truth.pose_labels[a.track_id][a.start - starts[a.track_id]:
                                                   a.end - starts[a.track_id]])
    X, poses = np.concatenate(X), np.concatenate(poses)
    scores = model.output_probs(X)
    for i in range(3):
        assert scores[poses == i, i].mean() > scores[poses != i, i].mean()
    for d in model.detectors_:
        assert d.score_max_ > d.score_min_


def test_fit_is_thread_count_invariant(small_scene):
    spec, frames, tracks, truth, desc = small_scene
    inst = instances_for_label("grow", tracks, truth.annotations, desc)
    a = HmmEventModel(label="grow", n_states=3, max_iter=3, n_threads=1).fit(inst, frames=frames)
    b = clone(a).set_params(n_threads=4).fit(inst, frames=frames)
    assert a.trans_.probs.tobytes() == b.trans_.probs.tobytes()
    assert a.trace_ == b.trace_
    for da, db in zip(a.detectors_, b.detectors_):
        assert da.coef_.tobytes() == db.coef_.tobytes()


def test_learned_threshold_is_finite(small_scene):
    spec, frames, tracks, truth, desc = small_scene
    inst = instances_for_label("lower", tracks, truth.annotations, desc)
    model = HmmEventModel(label="lower", n_states=3, max_iter=3).fit(inst, frames=frames)
    model.learn_threshold(tracks, truth.annotations, frames, desc)
    assert np.isfinite(model.threshold_)


def test_estimator_contract():
    model = HmmEventModel(n_states=4, reg=5.0)
    assert clone(model).get_params()["reg"] == 5.0
    with pytest.raises(NotFittedError):
        model.output_probs(np.zeros((2, 576)))
    with pytest.raises(ValueError, match="at least 2"):
        model.fit([], negatives=np.zeros((3, 576)))
