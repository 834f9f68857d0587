"""Shared training runs for the acceptance suite, plus a one-line-per-criterion report."""

import time

import pytest

from scalab import data as D
from scalab import evaluation as E
from scalab.model import symbolic_config, toy_panel_config
from scalab.train import ArrayData, StreamData, TrainConfig, train_run

SEEDS = (0, 1, 2)
REPORT: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    REPORT[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(REPORT):
        terminalreporter.write_line(REPORT[number])


@pytest.fixture(scope="session")
def toy_data():
    train = D.gen_panel_dataset("a", 4096, seed=0)
    test = D.gen_panel_dataset("b", 512, seed=1)
    x, y = D.panel_arrays(train)
    tx, ty = D.panel_arrays(test)
    return ArrayData(x, targets=y), ArrayData(tx, targets=ty)


@pytest.fixture(scope="session")
def toy_runs(toy_data):
    """Both toy models at every seed: 200 epochs, batch 128, Adam lr 1e-3."""
    train, test = toy_data
    runs = {"sca": [], "softmax": []}
    for name, cfg in (("sca", toy_panel_config("prox", True)), ("softmax", toy_panel_config("softmax", False))):
        for seed in SEEDS:
            tc = TrainConfig(epochs=200, batch_size=128, learning_rate=1e-3, seed=seed, shuffle_seed=seed)
            start = time.time()
            ckpt, rows = train_run(cfg, tc, train)
            runs[name].append({
                "ckpt": ckpt,
                "seconds": time.time() - start,
                "train_loss": rows[-1]["train_loss"],
                "test_mse": E.target_mse(ckpt.params, cfg, test.inputs, test.targets),
                "coverage": E.psnr_coverage(ckpt.params, cfg, test.inputs, test.targets),
            })
    return runs


@pytest.fixture(scope="session")
def symbolic_runs():
    """2-layer d=64 H=4 models on a 200k-task stream from the training combos."""
    train_combos, test_combos = D.split_rule_combos(D.all_rule_combos(), 0.25, seed=0)
    test_tasks = D.gen_symbolic_dataset(test_combos, 2000, seed=999)
    batch, total = 128, 200_000
    runs = {"sca": [], "softmax": []}
    for name, cfg in (("sca", symbolic_config("prox", True)), ("softmax", symbolic_config("softmax", False))):
        for seed in SEEDS:
            tc = TrainConfig(epochs=1, steps=-(-total // batch), batch_size=batch, learning_rate=1e-3,
                             weight_decay=0.1, seed=seed, shuffle_seed=seed, loss="cross-entropy")
            stream = StreamData(D.symbolic_stream(train_combos, 100 + seed, batch))
            start = time.time()
            ckpt, _ = train_run(cfg, tc, stream)
            runs[name].append({
                "seconds": time.time() - start,
                "accuracy": E.accuracy(ckpt.params, cfg, test_tasks),
            })
    return runs
