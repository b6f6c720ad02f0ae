import pytest

from pilno.lno import LNOConfig
from pilno.training import TrainConfig

_COND = {"poisson": "none", "fitting": "none", "screened_poisson": "scalar", "darcy": "field"}


def tiny_config(problem="poisson", **kw) -> TrainConfig:
    model = LNOConfig(S=4, R=4, T=2, kernel_layers=[6, 4], decoder_layers=[4, 1],
                      conditioning=_COND.get(problem, "none"))
    base = dict(problem=problem, model=model, steps=30, batch=3, n_sensor=32, n_target=16,
                n_boundary=8, resample_interval=7, log_interval=5, warmup_functions=40, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


# one verdict line per acceptance criterion in the terminal summary
_VERDICTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        num, title = crit
        _VERDICTS[num] = ("PASS" if report.outcome == "passed" else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_VERDICTS):
        verdict, title = _VERDICTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  {title}")
