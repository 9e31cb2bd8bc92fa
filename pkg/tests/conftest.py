import numpy as np
import pytest

from memepair import data as D
from memepair import model as M

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")


@pytest.fixture(scope="session")
def small_data():
    records, vocab, meta = D.generate_synthetic(D.SyntheticSpec(num_samples=64, seed=3))
    return records, vocab, meta


@pytest.fixture
def toy_cfg(small_data):
    _, vocab, _ = small_data
    return M.ModelConfig(vocab_size=len(vocab), hidden_dim=16, num_layers=2, num_heads=4)


def make_record(rid="r0", text="a b c", caption="d e", k=4, dim=16, seed=0, label=1):
    rng = np.random.default_rng(seed)
    xs = np.sort(rng.random((k, 2)), axis=1)
    ys = np.sort(rng.random((k, 2)), axis=1)
    boxes = np.stack([xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]], axis=1)
    return D.MemeRecord(id=rid, text=text, caption=caption, features=rng.normal(size=(k, dim)),
                        boxes=boxes, label=label)
