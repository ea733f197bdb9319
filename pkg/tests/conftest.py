import pytest
import torch

_RESULTS = {}


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        item.user_properties.append(("criterion", marker.args[0]))
        item.user_properties.append(("title", marker.args[1] if len(marker.args) > 1 else ""))


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    crit = props.get("criterion")
    if crit is None:
        return
    entry = _RESULTS.setdefault(crit, {"ok": True, "title": props.get("title", ""), "details": []})
    entry["ok"] = entry["ok"] and report.outcome == "passed"
    entry["details"] += [v for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_RESULTS):
        e = _RESULTS[crit]
        line = f"criterion {crit} [{'PASS' if e['ok'] else 'FAIL'}] {e['title']}"
        if e["details"]:
            line += " | " + "; ".join(e["details"])
        terminalreporter.write_line(line)


TINY_RUN = dict(epochs=2, batch_size=8, seed=0, dataset="synthetic:striped-classes,classes=2,per_class=8,size=16",
                image_size=16, queue_k=16, widths=(4, 8), hidden_dim=16, embed_dim=8)


@pytest.fixture
def tiny_config():
    from mixmask.trainer import TrainConfig

    def make(**overrides):
        return TrainConfig(**{**TINY_RUN, **overrides})

    return make
