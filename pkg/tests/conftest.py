import time

import numpy as np
import pytest

from functa.data import synthetic_images
from functa.field import SirenConfig
from functa.meta import MetaConfig, encode_batch, init_meta_state, meta_train, psnr_from_mse

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    n = marker.args[0]
    if rep.when == "setup" and rep.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[n] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")


# desk-scale meta-training setup shared by several acceptance checks
DESK = dict(width=64, depth=4, omega0=30.0, outer_lr=1e-3, batch_size=16, max_steps=20000, check_every=250)


@pytest.fixture(scope="session")
def desk_model():
    """Meta-train on 64 synthetic 16x16 images until train PSNR >= 30 dB."""
    train = synthetic_images(64, 16, seed=0)
    held_out = synthetic_images(8, 16, seed=123)
    siren = SirenConfig(2, 3, DESK["width"], DESK["depth"], DESK["omega0"])
    state = init_meta_state(siren, (4, 4, 8), interpolation="nearest", coord_scheme="per_patch", resolution=16, seed=0)
    cfg = MetaConfig(
        inner_steps=3, outer_lr=DESK["outer_lr"], batch_size=DESK["batch_size"], iterations=DESK["max_steps"], seed=0, log_every=0
    )
    trace = []
    start = time.perf_counter()

    def check(st, metrics):
        if metrics["iteration"] % DESK["check_every"]:
            return False
        _, losses = encode_batch(st, train)
        value = float(psnr_from_mse(losses).mean())
        trace.append((metrics["iteration"], value))
        return value >= 30.0

    state = meta_train(train, cfg, state, callback=check)
    elapsed = time.perf_counter() - start
    _, train_losses = encode_batch(state, train)
    _, test_losses = encode_batch(state, held_out)
    return {
        "state": state,
        "train": train,
        "held_out": held_out,
        "train_psnr": float(psnr_from_mse(train_losses).mean()),
        "test_psnr": psnr_from_mse(test_losses),
        "steps": state.step,
        "seconds": elapsed,
        "trace": trace,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
