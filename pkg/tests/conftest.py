import json

import pytest

TINY = {
    "pnp": {"neighbors": 4, "reduction": 2},
    "model": {"lift_dim": 8, "epochs": 2, "batch_size": 4},
    "data": {"n_points": 32, "train_per_class": 4, "test_per_class": 3},
    "gradcheck": {"n": 8, "channels": 4, "neighbors": 2, "reduction": 2},
    "ablate": {"seeds": 1},
    "bench": {"n": 64, "repeats": 1},
}


def write_config(path, overrides=None):
    cfg = json.loads(json.dumps(TINY))
    for section, values in (overrides or {}).items():
        cfg.setdefault(section, {}).update(values)
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture
def tiny_config(tmp_path):
    return write_config(tmp_path / "tiny.json")


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE: list[str] = []


class _Criterion:
    def __init__(self):
        self.name = None

    def __call__(self, name, passed, detail=""):
        self.name = name
        ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def criterion(request):
    rec = _Criterion()
    yield rec
    if rec.name is None:
        ACCEPTANCE.append(f"FAIL  {request.node.name}: raised before reaching a verdict")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
