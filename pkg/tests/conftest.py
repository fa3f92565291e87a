import numpy as np
import pytest
import torch

from incseg.dataset import AnnotationSet, Volume
from incseg.network import NetworkConfig, build_network
from incseg.dataset import ClassRegistry, ClassEntry

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return NetworkConfig(levels=3, base_filters=4, dropout_rate=0.3, input_shape=(16, 16))


@pytest.fixture
def tiny_net(tiny_config):
    reg = ClassRegistry([ClassEntry("A", "A", 0)])
    return build_network(tiny_config, reg, seed=3)


def make_volume(vid="v0", shape=(8, 8, 4), seed=0, contrast="A"):
    r = np.random.default_rng(seed)
    vox = r.normal(size=shape).astype(np.float32)
    m = np.zeros(shape, np.uint8)
    m[2:5, 2:5, 1:3] = 1
    return Volume(vox, (1.0, 1.0, 2.0), vid, contrast), AnnotationSet({"A": m, "B": 1 - m})


# -- acceptance criterion reporting ---------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"] if rep.when == "call" else []
    if rep.failed:
        entry["details"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        detail = "; ".join(dict.fromkeys(e["details"]))
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
                                    + (f"  ({detail})" if detail else ""))
