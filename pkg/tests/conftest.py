import numpy as np
import pytest

from lafem import eit, flb


@pytest.fixture(scope="session")
def space16():
    return eit.reconstruction_space(16)


@pytest.fixture(scope="session")
def basis16(space16):
    return flb.build_spectral_basis(space16.trace, K0=32, refine_level=2)


@pytest.fixture(scope="session")
def space32():
    return eit.reconstruction_space(32)


@pytest.fixture(scope="session")
def basis32(space32):
    return flb.build_spectral_basis(space32.trace)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed live and repeated in the terminal summary
_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(k, title, ok, detail=""):
        line = f"ACCEPTANCE {k} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
