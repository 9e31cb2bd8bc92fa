import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memepair import data as D
from memepair import model as M
from memepair import tensor as T
from memepair.errors import InputError, ShapeError
from memepair.gradcheck import finite_diff_check
from memepair.tensor import Graph, Tensor
from memepair.train import cross_entropy

from conftest import make_record

VOCAB = D.Vocab([*D.RESERVED, *"a b c d e f g h i j".split()])


def cfg_for(**kw):
    base = dict(vocab_size=len(VOCAB), region_feat_dim=16, hidden_dim=16, num_layers=2, num_heads=4)
    base.update(kw)
    return M.ModelConfig(**base)


def live_params(cfg, seed=0):
    return M.init_params(cfg.replace(init_std=0.2), seed, zero_head=False)


def batch_of(cfg, records, **kw):
    return M.collate(cfg, M.encode_records(cfg, VOCAB, records), **kw)


# ---------------------------------------------------------------- config / parameters

def test_config_validation():
    with pytest.raises(InputError, match="divisible"):
        cfg_for(hidden_dim=18)
    with pytest.raises(InputError):
        cfg_for(dropout_rate=1.0)
    with pytest.raises(InputError):
        cfg_for(head_kind="late")
    with pytest.raises(InputError, match="unknown"):
        M.ModelConfig.from_dict({"vocab_size": 5, "colour": 1})
    c = cfg_for()
    assert c.ffn_dim == 64 and c.pool_hidden == 16
    assert M.ModelConfig.from_dict(c.to_dict()) == c


def test_parameter_order_and_flags():
    ps = M.init_params(cfg_for(), 0)
    names = list(ps)
    assert names == sorted(names) and len(set(names)) == len(names)
    assert all(ps[n].requires_grad for n in names)
    assert list(M.init_params(cfg_for(), 0).arrays()) == names
    with pytest.raises(KeyError):
        ps["head.fc1.bias"] = Tensor(np.zeros(1))


def test_init_is_seeded_and_head_zeroed():
    a, b, c = M.init_params(cfg_for(), 4), M.init_params(cfg_for(), 4), M.init_params(cfg_for(), 5)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    assert not np.array_equal(a["emb.tok"].data, c["emb.tok"].data)
    assert not a["head.fc2.weight"].data.any()
    assert np.std(a["emb.tok"].data) == pytest.approx(0.02, rel=0.2)


def test_unshared_pool_adds_parameters():
    shared, unshared = M.init_params(cfg_for(), 0), M.init_params(cfg_for(share_pool=False), 0)
    extra = set(unshared) - set(shared)
    assert extra == {"pool_b.proj.weight", "pool_b.score.weight"}


# ---------------------------------------------------------------- embed_sequence

def test_embed_shape_k4_t7():
    cfg = cfg_for(hidden_dim=32)
    rec = make_record(text="a b c d e", caption="f g")  # [CLS] + 5 + [SEP] = 7
    b = batch_of(cfg, [rec])
    x, mask = M.embed_sequence(cfg, M.init_params(cfg, 0), b)
    assert x.shape == (1, 11, 32) and mask.shape == (1, 11)
    assert np.isfinite(x.data).all()


def test_embed_text_only_masks_regions():
    cfg = cfg_for(ablation="text_only")
    b = batch_of(cfg, [make_record()])
    x, mask = M.embed_sequence(cfg, M.init_params(cfg, 0), b)
    t = b.text_len
    assert not mask[0, t:].any() and mask[0, :t].all()
    assert not x.data[0, t:].any()


def test_embed_image_only_masks_text():
    cfg = cfg_for(ablation="image_only")
    b = batch_of(cfg, [make_record()])
    x, mask = M.embed_sequence(cfg, M.init_params(cfg, 0), b)
    assert not mask[0, :b.text_len].any() and mask[0, b.text_len:].all()
    assert not x.data[0, :b.text_len].any()


def test_embed_is_deterministic():
    cfg = cfg_for()
    ps = M.init_params(cfg, 0)
    b = batch_of(cfg, [make_record()])
    assert np.array_equal(M.embed_sequence(cfg, ps, b)[0].data, M.embed_sequence(cfg, ps, b)[0].data)


def test_embed_errors():
    cfg = cfg_for(max_text_len=4)
    ps = M.init_params(cfg, 0)
    b = batch_of(cfg_for(), [make_record(text="a b c d e")])
    with pytest.raises(InputError, match="max_text_len"):
        M.embed_sequence(cfg, ps, b)
    b = batch_of(cfg_for(), [make_record()])
    b.token_ids[0, 1] = 999
    with pytest.raises(InputError, match="vocab_size"):
        M.embed_sequence(cfg_for(), ps, b)
    with pytest.raises(InputError, match="max_regions"):
        M.encode_record(cfg_for(max_regions=3), VOCAB, make_record(k=4))


def test_encode_rejects_bad_features_and_boxes():
    with pytest.raises(ShapeError):
        M.encode_record(cfg_for(region_feat_dim=8), VOCAB, make_record(dim=16))
    rec = make_record()
    rec.boxes[0] = [0.6, 0.1, 0.5, 0.9]
    with pytest.raises(InputError, match="x1≤x2"):
        M.encode_record(cfg_for(), VOCAB, rec)


# ---------------------------------------------------------------- encoder

def test_zero_layers_is_identity():
    cfg = cfg_for(num_layers=0)
    ps = M.init_params(cfg, 0)
    x, mask = M.embed_sequence(cfg, ps, batch_of(cfg, [make_record()]))
    assert np.array_equal(M.encoder_forward(cfg, ps, x, mask).data, x.data)


def test_single_unmasked_key_takes_all_attention():
    cfg = cfg_for(num_layers=1)
    ps = live_params(cfg)
    x = Tensor(np.random.default_rng(0).normal(size=(1, 6, 16)))
    mask = np.zeros((1, 6))
    mask[0, 3] = 1.0
    att = []
    M.encoder_forward(cfg, ps, x, mask, attn_out=att)
    assert np.array_equal(att[0][..., 3], np.ones((1, 4, 6)))


def test_attention_rows_sum_to_one():
    cfg = cfg_for()
    ps = live_params(cfg)
    b = batch_of(cfg, [make_record(), make_record("r1", text="a", seed=1, k=2)])
    x, mask = M.embed_sequence(cfg, ps, b)
    att = []
    M.encoder_forward(cfg, ps, x, mask, attn_out=att)
    assert len(att) == 2
    for a in att:
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)
        # padded keys of the short record get no weight
        assert not a[1][..., mask[1] == 0].any()


def test_encoder_shape_error():
    cfg = cfg_for()
    with pytest.raises(ShapeError):
        M.encoder_forward(cfg, M.init_params(cfg, 0), Tensor(np.zeros((1, 5, 8))), np.ones((1, 5)))


# ---------------------------------------------------------------- attention pool

def pool_params(d=8, p=8, seed=0, zero_w=False):
    rng = np.random.default_rng(seed)
    w = np.zeros((d, p)) if zero_w else rng.normal(size=(d, p))
    return {"pool.proj.weight": Tensor(w), "pool.score.weight": Tensor(rng.normal(size=(p, 1)))}


def test_pool_single_row_exact():
    h = np.random.default_rng(1).normal(size=(1, 5, 8))
    mask = np.array([[0, 0, 1, 0, 0.0]])
    out = M.attention_pool(pool_params(), Tensor(h), mask)
    assert np.array_equal(out.data[0], h[0, 2])


def test_pool_zero_w_is_mean():
    h = np.random.default_rng(2).normal(size=(1, 5, 8))
    mask = np.array([[1, 1, 0, 1, 0.0]])
    out = M.attention_pool(pool_params(zero_w=True), Tensor(h), mask)
    np.testing.assert_allclose(out.data[0], h[0, [0, 1, 3]].mean(0), rtol=1e-14, atol=1e-15)


def test_pool_all_masked_raises():
    with pytest.raises(InputError, match="masked"):
        M.attention_pool(pool_params(), Tensor(np.ones((2, 3, 8))), np.array([[1, 0, 0], [0, 0, 0.0]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7), st.floats(0.1, 30.0))
def test_pool_in_convex_hull(seed, s, scale):
    rng = np.random.default_rng(seed)
    h = rng.normal(scale=scale, size=(1, s, 8))
    mask = (rng.random((1, s)) < 0.6).astype(float)
    mask[0, rng.integers(s)] = 1.0
    out = M.attention_pool(pool_params(seed=seed), Tensor(h), mask).data[0]
    rows = h[0, mask[0] > 0]
    assert (out >= rows.min(0) - 1e-9).all() and (out <= rows.max(0) + 1e-9).all()


# ---------------------------------------------------------------- heads

def test_cls_forward_two_finite_logits_and_zero_head():
    cfg = cfg_for(head_kind="cls")
    logits = M.cls_forward(cfg, M.init_params(cfg, 0), make_record(), VOCAB)
    assert logits.shape == (2,) and not logits.data.any()
    assert M.predict_proba(cfg, M.init_params(cfg, 0), make_record(), VOCAB) == 0.5
    live = M.cls_forward(cfg, live_params(cfg), make_record(), VOCAB)
    assert np.isfinite(live.data).all() and live.data.any()


def test_cls_forward_deterministic_and_ignores_caption():
    cfg = cfg_for(head_kind="cls")
    ps = live_params(cfg)
    a = M.cls_forward(cfg, ps, make_record(caption="d e"), VOCAB).data
    b = M.cls_forward(cfg, ps, make_record(caption="j j j i"), VOCAB).data
    c = M.cls_forward(cfg, ps, make_record(caption=None), VOCAB).data
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_paired_forward_shape():
    cfg = cfg_for()
    rec = make_record(text="a b c d e", caption="f g h")  # text 7, caption 5 tokens
    out = M.paired_forward(cfg, live_params(cfg), rec, VOCAB)
    assert out.shape == (2,) and np.isfinite(out.data).all()


def test_heads_reject_wrong_kind():
    with pytest.raises(InputError):
        M.cls_forward(cfg_for(), M.init_params(cfg_for(), 0), make_record(), VOCAB)
    with pytest.raises(InputError):
        M.paired_forward(cfg_for(head_kind="cls"), M.init_params(cfg_for(), 0), make_record(), VOCAB)


def test_halves_share_identical_regions():
    cfg = cfg_for()
    a, b = M.paired_batches(cfg, M.encode_records(cfg, VOCAB, [make_record(), make_record("r1", seed=3)]))
    assert np.array_equal(a.features, b.features) and np.array_equal(a.boxes, b.boxes)
    assert np.array_equal(a.region_mask, b.region_mask)
    assert not np.array_equal(a.token_ids, b.token_ids)


@pytest.mark.parametrize("caption", [None, ""])
def test_missing_caption_asks_for_backfill(caption):
    cfg = cfg_for()
    with pytest.raises(InputError, match="backfill"):
        M.paired_forward(cfg, M.init_params(cfg, 0), make_record(caption=caption), VOCAB)


def test_empty_caption_allowed_by_flag():
    cfg = cfg_for(allow_empty_caption=True)
    out = M.paired_forward(cfg, live_params(cfg), make_record(caption=""), VOCAB)
    assert np.isfinite(out.data).all()


@pytest.mark.parametrize("share_pool", [True, False])
def test_swap_text_and_caption_swaps_pooled(share_pool):
    cfg = cfg_for(share_pool=share_pool)
    ps = live_params(cfg)
    rec = make_record(text="a b c d", caption="e f")
    swapped = make_record(text="e f", caption="a b c d")
    pa, pb = M.paired_pooled(cfg, ps, *M.paired_batches(cfg, M.encode_records(cfg, VOCAB, [rec])))
    qa, qb = M.paired_pooled(cfg, ps, *M.paired_batches(cfg, M.encode_records(cfg, VOCAB, [swapped])))
    if share_pool:
        assert np.array_equal(pa.data, qb.data) and np.array_equal(pb.data, qa.data)
    else:
        # separate pool weights per half: swapping moves the encoder states but not the scorers
        assert not np.array_equal(pa.data, qb.data)


@pytest.mark.parametrize("head", ["cls", "paired"])
def test_padding_invariance(head):
    cfg = cfg_for(head_kind=head)
    ps = live_params(cfg)
    items = M.encode_records(cfg, VOCAB, [make_record(text="a b", caption="c")])
    if head == "cls":
        ref = M.cls_logits(cfg, ps, M.collate(cfg, items)).data
        pad = M.cls_logits(cfg, ps, M.collate(cfg, items, text_len=12)).data
    else:
        a, b = M.paired_batches(cfg, items)
        ref = M.paired_logits(cfg, ps, a, b).data
        a2, b2 = M.collate(cfg, items, text_len=12), M.collate(cfg, items, use_caption=True, text_len=12)
        pad = M.paired_logits(cfg, ps, a2, b2).data
    assert np.max(np.abs(ref - pad)) <= 1e-9


def test_region_padding_invariance():
    cfg = cfg_for()
    ps = live_params(cfg)
    short = make_record("s", k=2, seed=5)
    items = M.encode_records(cfg, VOCAB, [short, make_record("l", k=4, seed=6)])
    batched = M.predict_proba_items(cfg, ps, items)
    alone = M.predict_proba_items(cfg, ps, items[:1])
    assert abs(batched[0] - alone[0]) <= 1e-9


def test_batch_equals_single_records():
    cfg = cfg_for()
    ps = live_params(cfg)
    recs = [make_record(f"r{i}", seed=i, text="a b c"[: 1 + 2 * (i % 3)]) for i in range(5)]
    batch = M.predict_proba_items(cfg, ps, M.encode_records(cfg, VOCAB, recs), batch_size=2)
    single = [M.predict_proba(cfg, ps, r, VOCAB) for r in recs]
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- predict_proba

def test_proba_from_logits_examples():
    assert M.proba_from_logits(np.array([0.0, 0.0])) == 0.5
    assert M.proba_from_logits(np.array([0.0, math.log(3)])) == pytest.approx(0.75, abs=1e-15)


@given(st.floats(-700, 700), st.floats(-700, 700))
def test_proba_in_closed_unit_interval(a, b):
    p = float(M.proba_from_logits(np.array([a, b])))
    assert 0.0 <= p <= 1.0
    if abs(a - b) < 30:
        assert 0.0 < p < 1.0


# ---------------------------------------------------------------- gradients

def _encode_half(cfg, params, batch):
    x, mask = M.embed_sequence(cfg, params, batch)
    return M.attention_pool(params, M.encoder_forward(cfg, params, x, mask), mask)


def test_shared_weights_collect_gradient_from_both_halves():
    cfg = cfg_for(init_std=0.2)
    ps = M.init_params(cfg, 1, zero_head=False)
    recs = [make_record("a", text="a b c", caption="d e", seed=1, label=1),
            make_record("b", text="f g", caption="h i j", seed=2, label=0)]
    items = M.encode_records(cfg, VOCAB, recs)
    half_a, half_b = M.paired_batches(cfg, items)
    labels = [1, 0]

    with Graph() as g:
        loss = cross_entropy(M.paired_logits(cfg, ps, half_a, half_b), labels)
    g.backward(loss)

    # untie: each half gets its own copy of the encoder/pool weights, head stays shared
    pa_, pb_ = ps.copy(), ps.copy()
    head = {k: ps[k] for k in ps if k.startswith("head.")}
    for k in head:
        pa_._t[k] = pb_._t[k] = head[k]
    full = {k: ps[k].grad.copy() for k in ps}
    ps.zero_grad()
    with Graph() as g:
        pooled = T.concat([_encode_half(cfg, pa_, half_a), _encode_half(cfg, pb_, half_b)], axis=1)
        loss2 = cross_entropy(M.mlp_head(head, pooled), labels)
    g.backward(loss2)

    assert loss2.item() == pytest.approx(loss.item(), abs=1e-12)
    for k in ps:
        if k.startswith("head."):
            continue
        ga, gb = pa_[k].grad, pb_[k].grad
        np.testing.assert_allclose(ga + gb, full[k], rtol=1e-9, atol=1e-12, err_msg=k)
        if k.startswith(("layer", "pool.", "emb.ln", "emb.region", "emb.seg")):
            assert np.abs(ga).max() > 0 and np.abs(gb).max() > 0, k


def test_shared_gradient_matches_finite_differences():
    cfg = cfg_for(init_std=0.2)
    ps = M.init_params(cfg, 2, zero_head=False)
    items = M.encode_records(cfg, VOCAB, [make_record(seed=7, text="a b", caption="c d e")])
    halves = M.paired_batches(cfg, items)
    enc = M.ParameterSet({k: ps[k] for k in ps if k.startswith(("layer0.attn", "pool."))})
    rep = finite_diff_check(lambda: cross_entropy(M.paired_logits(cfg, ps, *halves), [1]), enc,
                            coords_per_array=8)
    assert rep.passed, rep.summary()


@pytest.mark.parametrize("head,share", [("cls", True), ("paired", True), ("paired", False)])
def test_gradcheck_small_model(head, share, small_data):
    records, vocab, _ = small_data
    cfg = M.ModelConfig(vocab_size=len(vocab), hidden_dim=16, num_layers=2, num_heads=4, head_kind=head,
                        share_pool=share, init_std=0.2)
    ps = M.init_params(cfg, 0, zero_head=False)
    items = M.encode_records(cfg, vocab, records[:3])
    labels = [r.label for r in records[:3]]
    rep = finite_diff_check(lambda: cross_entropy(M.forward_items(cfg, ps, items), labels), ps,
                            tol=1e-4, coords_per_array=6)
    assert rep.passed, rep.summary()


def test_dropout_only_active_with_rng():
    cfg = cfg_for(dropout_rate=0.3)
    ps = live_params(cfg)
    items = M.encode_records(cfg, VOCAB, [make_record()])
    base = M.forward_items(cfg, ps, items).data
    assert np.array_equal(base, M.forward_items(cfg, ps, items).data)
    noisy = M.forward_items(cfg, ps, items, rng=np.random.default_rng(0)).data
    again = M.forward_items(cfg, ps, items, rng=np.random.default_rng(0)).data
    assert not np.array_equal(base, noisy) and np.array_equal(noisy, again)
