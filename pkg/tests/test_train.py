import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memepair import data as D
from memepair import model as M
from memepair import train as TR
from memepair.errors import CheckpointError, InputError, NonFiniteError, ShapeError
from memepair.tensor import Graph, Tensor


# ---------------------------------------------------------------- loss

def test_cross_entropy_saturated():
    assert TR.cross_entropy(Tensor([30.0, -30.0]), 0).item() <= 1e-12


@pytest.mark.parametrize("label", [0, 1])
def test_cross_entropy_uniform_is_ln2(label):
    assert TR.cross_entropy(Tensor([0.0, 0.0]), label).item() == pytest.approx(math.log(2), abs=1e-15)


@given(st.floats(-500, 500), st.floats(-500, 500), st.integers(0, 1))
def test_cross_entropy_nonnegative(a, b, y):
    assert TR.cross_entropy(Tensor([a, b]), y).item() >= 0.0


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(InputError):
        TR.cross_entropy(Tensor([0.0, 0.0]), 2)
    with pytest.raises(ShapeError):
        TR.cross_entropy(Tensor(np.zeros((3, 2))), [0, 1])


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = Tensor(np.array([[1.0, -2.0], [0.5, 0.25]]), requires_grad=True)
    with Graph() as g:
        loss = TR.cross_entropy(z, [1, 0])
    g.backward(loss)
    p = np.exp(z.data) / np.exp(z.data).sum(1, keepdims=True)
    np.testing.assert_allclose(z.grad, (p - np.eye(2)[[1, 0]]) / 2, rtol=1e-13)


# ---------------------------------------------------------------- AdamW

def scalar_params(v=1.0, name="w"):
    return M.ParameterSet({name: Tensor(np.array([v]))})


def test_adamw_zero_grad_no_decay_is_noop():
    ps = scalar_params(1.7)
    TR.adamw_step(ps, {"w": np.zeros(1)}, TR.AdamState.zeros_like(ps), 1, TR.TrainConfig(weight_decay=0.0))
    assert ps["w"].data[0] == 1.7


def test_adamw_single_step_hand_value():
    ps = scalar_params(1.0)
    cfg = TR.TrainConfig(lr=0.1, weight_decay=0.0)
    TR.adamw_step(ps, {"w": np.ones(1)}, TR.AdamState.zeros_like(ps), 1, cfg)
    # m_hat = v_hat = 1 -> theta = 1 - 0.1 / (1 + 1e-8)
    assert ps["w"].data[0] == pytest.approx(0.9000000009999999900000001, abs=1e-15)
    assert abs(ps["w"].data[0] - 0.9) <= 1e-8


def test_adamw_pure_decay():
    ps = scalar_params(2.0)
    cfg = TR.TrainConfig(lr=0.05, weight_decay=0.1)
    TR.adamw_step(ps, {"w": np.zeros(1)}, TR.AdamState.zeros_like(ps), 1, cfg)
    assert ps["w"].data[0] == pytest.approx(2.0 * (1 - 0.05 * 0.1), abs=1e-15)


@pytest.mark.parametrize("name", ["head.fc1.bias", "emb.ln.gamma", "layer0.ln1.beta"])
def test_adamw_skips_decay_for_bias_and_norm(name):
    ps = scalar_params(2.0, name)
    TR.adamw_step(ps, {name: np.zeros(1)}, TR.AdamState.zeros_like(ps), 1, TR.TrainConfig(weight_decay=0.5))
    assert ps[name].data[0] == 2.0


def test_adamw_matches_reference_adam_over_steps():
    rng = np.random.default_rng(0)
    ps = M.ParameterSet({"a": Tensor(rng.normal(size=(3, 2)))})
    theta = ps["a"].data.copy()
    m = v = np.zeros_like(theta)
    cfg = TR.TrainConfig(lr=0.01, weight_decay=0.0)
    st_ = TR.AdamState.zeros_like(ps)
    for t in range(1, 6):
        g = rng.normal(size=theta.shape)
        TR.adamw_step(ps, {"a": g}, st_, t, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(ps["a"].data, theta, rtol=1e-14, atol=1e-15)


def test_adamw_errors():
    ps = scalar_params()
    st_ = TR.AdamState.zeros_like(ps)
    with pytest.raises(NonFiniteError, match="'w'|w"):
        TR.adamw_step(ps, {"w": np.array([np.nan])}, st_, 1, TR.TrainConfig())
    with pytest.raises(ShapeError):
        TR.adamw_step(ps, {"w": np.zeros(2)}, st_, 1, TR.TrainConfig())
    with pytest.raises(InputError):
        TR.adamw_step(ps, {"w": np.zeros(1)}, st_, 0, TR.TrainConfig())


# ---------------------------------------------------------------- schedule / clipping

def test_lr_schedule_examples():
    cfg = TR.TrainConfig(lr=1e-3, warmup_fraction=0.1)
    assert TR.lr_at(10, 100, cfg) == 1e-3
    assert TR.lr_at(100, 100, cfg) == 0.0
    assert abs(TR.lr_at(55, 100, cfg) - 5e-4) <= 1e-12
    assert TR.lr_at(5, 100, cfg) == pytest.approx(5e-4)
    with pytest.raises(InputError):
        TR.lr_at(0, 100, cfg)


@given(st.integers(2, 500), st.floats(0, 0.9))
def test_lr_bounded_by_peak(total, wf):
    cfg = TR.TrainConfig(lr=3e-3, warmup_fraction=wf)
    lrs = [TR.lr_at(s, total, cfg) for s in range(1, total + 1)]
    assert all(0.0 <= x <= 3e-3 for x in lrs) and lrs[-1] == 0.0


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.floats(0.01, 10))
def test_clipping_bounds_global_norm(seed, scale, max_norm):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.normal(scale=scale, size=(4, 3)), "b": rng.normal(scale=scale, size=7)}
    before = TR.global_norm(grads)
    reported = TR.clip_grad_norm(grads, max_norm)
    assert reported == before
    assert TR.global_norm(grads) <= max_norm + 1e-9
    if before <= max_norm:
        assert TR.global_norm(grads) == before


def test_train_config_validation():
    for bad in ({"lr": 0.0}, {"warmup_fraction": 1.0}, {"batch_size": 0}, {"epochs": -1}):
        with pytest.raises(InputError):
            TR.TrainConfig(**bad)
    c = TR.TrainConfig(betas=[0.8, 0.99])
    assert TR.TrainConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------- training runs

@pytest.fixture(scope="module")
def tiny():
    records, vocab, _ = D.generate_synthetic(D.SyntheticSpec(num_samples=96, seed=7))
    tr, va, _ = D.split_dataset(records, (0.6, 0.3, 0.1), seed=0)
    cfg = M.ModelConfig(vocab_size=len(vocab), hidden_dim=16, num_layers=1, num_heads=2, init_std=0.1)
    return cfg, tr, va, vocab


@pytest.fixture(scope="module")
def tiny_run(tiny):
    cfg, tr, va, vocab = tiny
    return TR.train_run(cfg, TR.TrainConfig(seed=3, epochs=2, batch_size=16, lr=3e-3), tr, va, vocab)


def test_checkpoint_roundtrip_bitwise(tiny_run, tmp_path):
    ck = tiny_run.checkpoint
    TR.save_checkpoint(ck, tmp_path / "c.hmpa")
    back = TR.load_checkpoint(tmp_path / "c.hmpa")
    assert back.model_config == ck.model_config and back.train_config == ck.train_config
    assert back.step == ck.step and back.rng_state == ck.rng_state and back.extra == ck.extra
    a, b = ck.arrays(), back.arrays()
    assert list(a) == list(b) == sorted(a)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert TR.checkpoint_bytes(back) == (tmp_path / "c.hmpa").read_bytes()


def test_checkpoint_layout(tiny_run):
    buf = TR.checkpoint_bytes(tiny_run.checkpoint)
    assert buf[:4] == b"HMPA" and struct.unpack_from("<I", buf, 4)[0] == 1


def test_checkpoint_truncated(tiny_run):
    buf = TR.checkpoint_bytes(tiny_run.checkpoint)
    for cut in (3, 11, 40, len(buf) - 1):
        with pytest.raises(CheckpointError, match="corrupt"):
            TR.checkpoint_from_bytes(buf[:cut])


def test_checkpoint_version_99(tiny_run, tmp_path):
    buf = bytearray(TR.checkpoint_bytes(tiny_run.checkpoint))
    struct.pack_into("<I", buf, 4, 99)
    (tmp_path / "v.hmpa").write_bytes(bytes(buf))
    with pytest.raises(CheckpointError, match=r"version 99.*supported: \[1\]"):
        TR.load_checkpoint(tmp_path / "v.hmpa")


def test_checkpoint_bad_magic(tiny_run):
    buf = b"XXXX" + TR.checkpoint_bytes(tiny_run.checkpoint)[4:]
    with pytest.raises(CheckpointError, match="magic"):
        TR.checkpoint_from_bytes(buf)


def test_rerun_is_bitwise_identical(tiny, tiny_run):
    cfg, tr, va, vocab = tiny
    again = TR.train_run(cfg, TR.TrainConfig(seed=3, epochs=2, batch_size=16, lr=3e-3), tr, va, vocab)
    assert TR.checkpoint_bytes(again.checkpoint) == TR.checkpoint_bytes(tiny_run.checkpoint)
    assert again.log == tiny_run.log


def test_different_seed_differs(tiny, tiny_run):
    cfg, tr, va, vocab = tiny
    other = TR.train_run(cfg, TR.TrainConfig(seed=4, epochs=2, batch_size=16, lr=3e-3), tr, va, vocab)
    assert TR.checkpoint_bytes(other.checkpoint) != TR.checkpoint_bytes(tiny_run.checkpoint)


def test_log_and_best_selection(tiny_run):
    log = tiny_run.log
    assert [e["step"] for e in log][0] == 0 and log[0]["loss"] is None
    assert all(set(e) == {"step", "epoch", "loss", "val_auroc"} for e in log)
    best = max(e["val_auroc"] for e in log)
    assert tiny_run.best_val_auroc == best
    last_best = max(e["step"] for e in log if e["val_auroc"] == best)
    assert tiny_run.checkpoint.step == last_best


def test_eval_every_steps(tiny):
    cfg, tr, va, vocab = tiny
    res = TR.train_run(cfg, TR.TrainConfig(epochs=1, batch_size=16, eval_every=2), tr, va, vocab)
    steps = math.ceil(len(tr) / 16)
    expected = sorted({0, *range(2, steps + 1, 2), steps})
    assert [e["step"] for e in res.log] == expected


def test_zero_epochs_returns_init(tiny):
    cfg, tr, va, vocab = tiny
    res = TR.train_run(cfg, TR.TrainConfig(seed=9, epochs=0), tr, va, vocab)
    init = M.init_params(cfg, 9)
    assert all(np.array_equal(res.checkpoint.params[k].data, init[k].data) for k in init)
    assert abs(res.best_val_auroc - 0.5) <= 0.05
    assert res.checkpoint.step == 0


def test_loss_decreases_on_fixed_batch(small_data):
    records, vocab, _ = small_data
    cfg = M.ModelConfig(vocab_size=len(vocab))
    tcfg = TR.TrainConfig(lr=1e-3, weight_decay=0.0)
    ps = M.init_params(cfg, 0)
    st_ = TR.AdamState.zeros_like(ps)
    items = M.encode_records(cfg, vocab, records[:16])
    labels = [it.label for it in items]
    losses = []
    for t in range(1, 12):
        ps.zero_grad()
        with Graph() as g:
            loss = TR.cross_entropy(M.forward_items(cfg, ps, items), labels)
        g.backward(loss)
        losses.append(loss.item())
        grads = {k: ps[k].grad for k in ps}
        TR.clip_grad_norm(grads, tcfg.grad_clip_norm)
        TR.adamw_step(ps, grads, st_, t, tcfg)
    non_decreasing = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert non_decreasing <= 2, losses


def test_unlabeled_training_record_rejected(tiny):
    cfg, tr, va, vocab = tiny
    bad = list(tr)
    bad[2] = D.MemeRecord(bad[2].id, bad[2].text, bad[2].caption, bad[2].features, bad[2].boxes, None)
    with pytest.raises(InputError, match="no label"):
        TR.train_run(cfg, TR.TrainConfig(epochs=1), bad, va, vocab)
    with pytest.raises(InputError):
        TR.train_run(cfg, TR.TrainConfig(epochs=1), [], va, vocab)


def test_nan_aborts_with_step(tiny):
    cfg, tr, va, vocab = tiny
    bad = list(tr)
    r = bad[5]
    bad[5] = D.MemeRecord(r.id, r.text, r.caption, np.where(np.arange(r.features.size).reshape(r.features.shape) == 3, np.inf, r.features), r.boxes, r.label)
    with np.errstate(all="ignore"), pytest.raises(NonFiniteError, match=r"step \d+"):
        TR.train_run(cfg, TR.TrainConfig(epochs=1, batch_size=8), bad, va, vocab)
