import pytest

from dmdt.config import RunConfig

TINY = {
    "model": {"dim": 16, "heads": 2, "ffn_dim": 32, "enc_layers": 1, "dec_layers": 2, "points": 4,
              "patch": 16, "dropout": 0.1},
    "train": {"epochs": 2, "batch_size": 8, "lr_drop_epoch": 1, "seed": 3},
    "data": {"train_count": 16, "val_count": 8, "test_count": 8},
}


@pytest.fixture
def tiny_cfg():
    """Seconds-scale run config exercising every mechanism."""
    return RunConfig.from_dict(TINY)


@pytest.fixture(scope="session")
def desk_runs():
    import acceptance_runs

    return acceptance_runs.desk_results()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("acceptance_runs")
    if mod and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
