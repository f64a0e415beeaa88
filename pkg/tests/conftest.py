import numpy as np
import pytest

from emstop.core import RngStream
from emstop.operators import convolution_operator, dense_operator, gaussian_psf


@pytest.fixture
def rng():
    return RngStream(12345)


@pytest.fixture
def conv16():
    return convolution_operator(gaussian_psf((16, 16), 1.5), (16, 16))


@pytest.fixture
def dense10():
    gen = np.random.default_rng(3)
    return dense_operator(gen.random((10, 10)) + 0.01)


CONFIG_DIR = __import__("pathlib").Path(__file__).resolve().parents[1] / "configs"

_VERDICTS = {}


def record(number, title, ok, detail):
    """Store an acceptance verdict for the end-of-run summary."""
    _VERDICTS[number] = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    print(_VERDICTS[number])


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
