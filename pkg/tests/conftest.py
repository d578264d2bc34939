import numpy as np
import pytest

from posehmm.hmm import TransitionMatrix


def random_left_right(rng, n):
    """Random bi-diagonal transitions with exit only from the last state."""
    probs = np.zeros((n, n))
    for i in range(n - 1):
        stay = rng.uniform(0.05, 0.95)
        probs[i, i] = stay
        probs[i, i + 1] = 1.0 - stay
    end = np.zeros(n)
    stay = rng.uniform(0.05, 0.95)
    probs[-1, -1] = stay
    end[-1] = 1.0 - stay
    return TransitionMatrix(probs, end)


def random_instance(rng, n_max=4, t_max=8):
    n = int(rng.integers(1, n_max + 1))
    T = int(rng.integers(n, t_max + 1))
    b = rng.uniform(1e-3, 1.0, size=(T, n))
    return b, random_left_right(rng, n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_scene():
    from posehmm.synth import SceneSpec, generate_scene

    spec = SceneSpec(n_frames=300, events_per_class=2, seed=11)
    frames, tracks, truth = generate_scene(spec)
    return spec, frames, tracks, truth


@pytest.fixture(scope="session")
def tiny_model(tiny_scene):
    from posehmm.train import HmmEventModel, describe_tracks, instances_for_label

    spec, frames, tracks, truth = tiny_scene
    desc = describe_tracks(tracks, frames)
    inst = instances_for_label("raise", tracks, truth.annotations, desc)
    model = HmmEventModel(label="raise", n_states=3, max_iter=2, seed=5)
    model.fit(inst, frames=frames)
    model.learn_threshold(tracks, truth.annotations, frames, desc)
    return model


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
