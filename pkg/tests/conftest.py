import numpy as np
import pytest

from hoigaze.datamodel import FrameWindow, Sequence
from hoigaze.synthgen import SynthConfig, generate_sequence


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_sequence(rng, frames=20, n=4, j=3, seq_id="s0") -> Sequence:
    """Unstructured random sequence with valid unit direction fields."""
    return Sequence(
        head_pos=rng.normal(size=(frames, 3)),
        head_dir=_unit(rng.normal(size=(frames, 3))),
        eye_pos=rng.normal(size=(frames, 3)),
        gaze_dir=_unit(rng.normal(size=(frames, 3))),
        left_wrist=rng.normal(size=(frames, 3)),
        right_wrist=rng.normal(size=(frames, 3)),
        left_hand=rng.normal(size=(frames, n, 3)),
        right_hand=rng.normal(size=(frames, n, 3)),
        objects=rng.normal(size=(frames, j, 3)),
        seq_id=seq_id,
    )


def random_window(rng, T=15, n=4, j=3) -> FrameWindow:
    s = random_sequence(rng, T, n, j)
    return FrameWindow(**{k: getattr(s, k) for k in ("head_pos", "head_dir", "eye_pos", "gaze_dir",
                                                     "left_wrist", "right_wrist", "left_hand",
                                                     "right_hand", "objects")}, seq_id="w", start=0)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture(scope="session")
def small_synth():
    """Two short synthetic sequences with few joints."""
    cfg = SynthConfig(seed=11, num_sequences=2, frames_per_sequence=120, n_joints=4, n_objects=3)
    return cfg, [generate_sequence(cfg, i) for i in range(2)]


# acceptance results are collected here and printed once at the end of the run
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
