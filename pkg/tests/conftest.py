"""Shared fixtures: one small synthetic city reused across the suite."""

import pytest

from flowcast import pipeline, synth

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collect per-criterion verdict lines for the terminal summary."""

    def record(criterion: int, ok: bool, detail: str) -> None:
        verdict = "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append(f"[criterion {criterion:2d}] {verdict}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_spec():
    return synth.SynthSpec(
        seed=11,
        n_nodes=40,
        n_pois=3,
        n_hours=45 * 24,
        events_per_poi=2,
        coverage=0.05,
    )


@pytest.fixture(scope="session")
def small_data(small_spec):
    return synth.generate(small_spec)


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory, small_data):
    out = tmp_path_factory.mktemp("city")
    small_data.write(out)
    return out


@pytest.fixture(scope="session")
def split_hour(small_spec):
    return small_spec.start_hour + 3 * (small_spec.n_hours // 4)


@pytest.fixture(scope="session")
def preprocessed(data_dir, split_hour):
    return pipeline.preprocess(data_dir, split_hour, seq_len=24, input_mode="visitors+features")


@pytest.fixture(scope="session")
def preprocessed_pings(data_dir, split_hour):
    return pipeline.preprocess(data_dir, split_hour, seq_len=24, input_mode="pings")
