import numpy as np
import pytest

from collablstm.features import SynthSpec

TINY_DIMS = dict(input=3, cell=4, rproj=2, pproj=3, out=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return SynthSpec(n_speakers_per_language=4, n_utts_per_speaker=4, frames_per_utt=(20, 30), dim=5,
                     n_eval_speakers_per_language=2, n_enroll_per_speaker=2, seed=3)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
