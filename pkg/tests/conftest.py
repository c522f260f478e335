import pytest

from thermomag.spin_bath import BathConfig, BathParameters, build_bath_model, sample_bath

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []

BATH_SEED = 13


@pytest.fixture(scope="session")
def bath_model():
    """The bundled N = 500 bath used by the flip-flop, polarise and lifetime scenarios."""
    sample = sample_bath(BathConfig(n_spins=500, seed=BATH_SEED))
    return build_bath_model(sample, BathParameters())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
