import time

import pytest

from beamcap.corpus import build_wordmap, gen_synthetic
from beamcap.decoder import TrainConfig, init_params, train

# The 8-record overfit fixture: vocab 20, P=4, D=8, H=16.
FIXTURE = dict(seed=7, items=8, vocab=20, pixels=4, dim=8, max_len=50)
MODEL = dict(embed=16, hidden=16, attn=16)
TRAIN = TrainConfig(lambda_ds=1.0, learning_rate=0.03, epochs=2000, seed=7, grad_clip=5.0)

ACCEPTANCE = []


def record_criterion(name, passed, detail):
    ACCEPTANCE.append((name, passed, detail))


@pytest.fixture(scope="session")
def overfit():
    """Records, wordmap, training result and wall-clock seconds for the fixture."""
    recs = gen_synthetic(FIXTURE["seed"], FIXTURE["items"], FIXTURE["vocab"], FIXTURE["pixels"],
                         FIXTURE["dim"], FIXTURE["max_len"])
    wm = build_wordmap([r for rec in recs for r in rec.refs])
    params = init_params(len(wm), MODEL["embed"], FIXTURE["dim"], MODEL["hidden"], MODEL["attn"],
                         seed=TRAIN.seed)
    start = time.perf_counter()
    result = train(recs, wm, params, TRAIN)
    return recs, wm, result, time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
