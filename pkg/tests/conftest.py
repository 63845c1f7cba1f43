"""Shared fixtures: generated datasets and fitted fields are built once per session."""

from __future__ import annotations

import time

import pytest
import torch

from voldis.scenes import default_scene, generate_dataset, occluder_scene
from voldis.train import TrainConfig, fit_field, make_model

torch.set_num_threads(1)

# Desk-scale voxel fit used by the acceptance checks: the optimizer defaults are
# tuned for MLP fields, a dense grid needs a far larger step size.
ACCEPT_TRAIN = dict(iterations=1000, rays_per_batch=1024, n_coarse=64, n_fine=0, fine_pass=False,
                    lr_start=0.1, lr_end=0.01, eval_every=250, checkpoint_every=10**9)


@pytest.fixture(scope="session")
def default_gen():
    return generate_dataset(default_scene())


@pytest.fixture(scope="session")
def occluder_gen():
    return generate_dataset(occluder_scene(), n_views=8)


@pytest.fixture(scope="session")
def full_fit(default_gen):
    cfg = TrainConfig(**ACCEPT_TRAIN)
    model = make_model("voxel", fine=False, resolution=(64, 64, 64))
    start = time.perf_counter()
    result = fit_field(default_gen.dataset, model, "full", cfg)
    return result, time.perf_counter() - start, cfg


@pytest.fixture(scope="session")
def bg_fit(default_gen):
    cfg = TrainConfig(**ACCEPT_TRAIN, mask_dilation=1)
    model = make_model("voxel", fine=False, resolution=(64, 64, 64))
    result = fit_field(default_gen.dataset, model, "masked_bg", cfg)
    return result, cfg


# --- one summary line per acceptance criterion ------------------------------------

_CRITERIA: dict[str, dict] = {}


@pytest.fixture
def criterion(request):
    """Record ``(number, title)`` and free-form details for the end-of-run summary."""
    entry = {"detail": []}

    def record(number: int, title: str):
        entry.update(number=number, title=title)
        _CRITERIA[request.node.nodeid] = entry
        return entry["detail"]

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _CRITERIA.get(item.nodeid)
    if entry is not None and (rep.when == "call" or rep.failed):
        entry["passed"] = rep.passed and entry.get("passed", True)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(_CRITERIA.values(), key=lambda e: e.get("number", 0)):
        status = "PASS" if entry.get("passed") else "FAIL"
        detail = "; ".join(entry["detail"])
        terminalreporter.write_line(f"criterion {entry['number']:>2} {status}  {entry['title']}: {detail}")
