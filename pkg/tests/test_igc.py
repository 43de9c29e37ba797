import math
from types import SimpleNamespace

import numpy as np
import pytest

from igc import engine as E
from igc.calculator import Calculator
from igc.data import DataConfig, generate
from igc.engine.gradcheck import check_gradients
from igc.model import FrozenError, HostDims, HostModel
from igc.module import (
    HYBRID,
    IGC,
    PLAIN,
    SHORTCUT,
    IGCConfig,
    IGCModel,
    IgcCache,
    MissingAnchorError,
    freeze_base,
)
from igc.tokenizer import default_vocab
from igc.train import igc_step, pad_ids, template_perplexity

V, EOS, ANCHOR = 40, 2, 3
TINY = HostDims(vocab=V, d_model=8, n_layers=3, n_heads=2, d_ff=16, ctx=14)
VOCAB = SimpleNamespace(eos_id=EOS, anchor_id=ANCHOR)
W = 4
SMALL = dict(width=W, d_feat=8, d_key=4, d_slot=8, d_short=6)


def tiny_host(seed=0, pretrained=True):
    h = HostModel(TINY, seed=seed)
    h.pretrained = pretrained
    return h


def tiny_model(mode=IGC, seed=0, host=None, **kw):
    host = host or freeze_base(tiny_host())
    return IGCModel(host, IGCConfig(mode=mode, **{**SMALL, **kw}), seed=seed, vocab=VOCAB)


def tiny_batch(rng, B=3, T=10):
    ids = rng.integers(4, V, size=(B, T))
    anchors = np.array([4, 5, 6][:B])
    ids[np.arange(B), anchors] = ANCHOR
    lengths = np.array([T, T - 1, T][:B])
    ann = [(0, 12, 34, 46), (2, 7, 9, 63), None][:B]
    return ids, anchors, lengths, ann


def lm_rows(anchors, lengths):
    T = lengths.max()
    pos = np.arange(T)[None]
    return np.nonzero((pos >= anchors[:, None]) & (pos <= lengths[:, None] - 2))


# --- host -------------------------------------------------------------------


def test_host_causal():
    h = tiny_host()
    rng = np.random.default_rng(0)
    ids = rng.integers(0, V, size=(2, 9))
    a = h.forward(ids).data
    ids2 = ids.copy()
    ids2[:, 6:] = rng.integers(0, V, size=(2, 3))
    b = h.forward(ids2).data
    assert np.array_equal(a[:, :6], b[:, :6])
    assert not np.allclose(a[:, 6:], b[:, 6:])


def test_host_context_limit():
    with pytest.raises(ValueError, match="context"):
        tiny_host().forward(np.zeros((1, TINY.ctx + 1), dtype=np.int64))


def test_host_checkpoint_roundtrip(tmp_path):
    h = tiny_host(seed=3)
    h.save(tmp_path / "h.ckpt")
    back = HostModel.load(tmp_path / "h.ckpt")
    ids = np.arange(8)[None] % V
    assert np.array_equal(h.forward(ids).data, back.forward(ids).data)
    assert back.pretrained


def test_two_seeds_differ():
    assert not np.array_equal(tiny_host(0).params["tok_emb"].data, tiny_host(1).params["tok_emb"].data)


# --- freezing ---------------------------------------------------------------


def test_freeze_requires_pretrained():
    with pytest.raises(FrozenError, match="pretrain"):
        freeze_base(tiny_host(pretrained=False))


def test_frozen_base_unchanged_after_step():
    m = tiny_model()
    before = {k: v.data.copy() for k, v in m.host.params.items()}
    params = m.trainable()
    assert not any(k.startswith("host.") for k in params)
    ids, anchors, lengths, ann = tiny_batch(np.random.default_rng(1))
    rows = lm_rows(anchors, lengths)
    logits, inp = m.forward_train(ids, anchors, lengths, ann, rows=rows)
    loss = E.cross_entropy(logits, ids[rows[0], rows[1] + 1]) + m.aux_loss(inp, ann)
    loss.backward()
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    E.Adam(params, 1e-2).step()
    for k, v in m.host.params.items():
        assert v.data.tobytes() == before[k].tobytes()
        assert v.grad is None


def test_unfreeze_lets_gradient_reach_base():
    host = freeze_base(tiny_host(), unfreeze=True)
    m = tiny_model(host=host)
    assert any(k.startswith("host.") for k in m.trainable())
    ids, anchors, lengths, ann = tiny_batch(np.random.default_rng(1))
    rows = lm_rows(anchors, lengths)
    logits, _ = m.forward_train(ids, anchors, lengths, ann, rows=rows)
    E.cross_entropy(logits, ids[rows[0], rows[1] + 1]).backward()
    assert np.abs(host.params["blocks.0.mlp.w1"].grad).sum() > 0


def test_trainable_count_reported():
    rep = tiny_model().param_report()
    assert rep["host_trainable"] == 0
    assert rep["trainable"] == rep["input_mapping"] + rep["output_mapping"] + rep["shortcut"]
    assert tiny_model(SHORTCUT).param_report()["shortcut"] > 0


# --- non-interference -------------------------------------------------------


@pytest.mark.parametrize("mode", [IGC, HYBRID, SHORTCUT])
def test_zero_gates_equal_plain(mode):
    m = tiny_model(mode)
    m.gate_override = 0.0
    ids, anchors, lengths, ann = tiny_batch(np.random.default_rng(2))
    logits, _ = m.forward_train(ids, anchors, lengths, ann)
    plain = m.host.forward(ids).data
    assert np.abs(logits.data - plain).max() <= 1e-12


def test_plain_mode_is_host():
    m = tiny_model(PLAIN)
    ids, anchors, lengths, ann = tiny_batch(np.random.default_rng(2))
    logits, inp = m.forward_train(ids, anchors, lengths, ann)
    assert inp is None
    assert np.array_equal(logits.data, m.host.forward(ids).data)


def test_pre_anchor_positions_untouched():
    m = tiny_model()
    ids, anchors, lengths, ann = tiny_batch(np.random.default_rng(3))
    logits, _ = m.forward_train(ids, anchors, lengths, ann)
    plain = m.host.forward(ids).data
    for b, t in enumerate(anchors):
        assert np.array_equal(logits.data[b, :t], plain[b, :t])
        assert not np.allclose(logits.data[b, t:lengths[b]], plain[b, t:lengths[b]])


def test_untrained_gates_near_sigmoid_minus_four():
    m = tiny_model()
    ids, anchors, _, _ = tiny_batch(np.random.default_rng(4), B=1)
    g = m.gate_report(ids[0], anchors[0])
    assert len(g) == ids.shape[1] - anchors[0]
    assert np.all((g > 0) & (g < 1))
    assert np.allclose(g, 1 / (1 + math.exp(4.0)), atol=0.01)


# --- Input Mapping ----------------------------------------------------------


def test_input_mapping_ignores_positions_at_or_after_anchor():
    m = tiny_model()
    rng = np.random.default_rng(5)
    h = rng.normal(size=(3, 10, TINY.d_model))
    anchors = np.array([3, 5, 9])
    a = m.input_mapping(E.DiffArray(h), anchors)
    h2 = h.copy()
    for b, t in enumerate(anchors):
        h2[b, t + 1:] = rng.normal(size=h2[b, t + 1:].shape)
    b_ = m.input_mapping(E.DiffArray(h2), anchors)
    assert np.array_equal(a.digits.data, b_.digits.data)
    assert np.array_equal(a.op.data, b_.op.data)


def test_request_distributions_normalized():
    m = tiny_model()
    ids, anchors, lengths, ann = tiny_batch(np.random.default_rng(6))
    _, inp = m.forward_train(ids, anchors, lengths, ann)
    req = inp.request("left")
    for arr in (req.a, req.b, req.op):
        assert np.allclose(arr.sum(axis=-1), 1.0)
    assert req.a.shape == (3, W, 11)


def test_aux_loss_uniform_value():
    m = tiny_model()
    for name in ("in.w_slot", "in.b_slot", "in.w_op", "in.b_op"):
        m.params[name].data[:] = 0.0
    ids, anchors, lengths, ann = tiny_batch(np.random.default_rng(7), B=2)
    _, inp = m.forward_train(ids, anchors, lengths, ann)
    expected = 2 * W * math.log(11) + math.log(4)
    assert abs(float(m.aux_loss(inp, ann).data) - expected) < 1e-9


def test_aux_loss_zero_at_perfect_prediction():
    m = tiny_model()
    ann = [(0, 12, 34, 46), (3, 81, 9, 9), None]
    digits, dmask, op, omask = m.aux_targets(ann)
    logits = np.where(np.eye(11)[digits] > 0, 80.0, -80.0)
    from igc.module import InputOut
    inp = InputOut(E.DiffArray(logits), E.DiffArray(np.where(np.eye(4)[op] > 0, 80.0, -80.0)), None)
    assert float(m.aux_loss(inp, ann).data) < 1e-30


def test_arithmetic_without_anchor_rejected():
    m = tiny_model()
    ids, anchors, lengths, ann = tiny_batch(np.random.default_rng(8))
    anchors = [None, anchors[1], anchors[2]]
    with pytest.raises(MissingAnchorError):
        m.forward_train(ids, anchors, lengths, ann)


# --- gradients --------------------------------------------------------------


def _main_and_aux(m, seed=9):
    ids, anchors, lengths, ann = tiny_batch(np.random.default_rng(seed))
    rows = lm_rows(anchors, lengths)

    def main():
        logits, inp = m.forward_train(ids, anchors, lengths, ann, rows=rows)
        return E.cross_entropy(logits, ids[rows[0], rows[1] + 1]), inp
    return main, ann


def _clear(m):
    for p in m.params.values():
        p.grad = None


def test_gradient_isolation_igc():
    m = tiny_model()
    main, ann = _main_and_aux(m)
    _clear(m)
    loss, inp = main()
    loss.backward()
    in_params = [v for k, v in m.params.items() if k.startswith("in.")]
    assert all(p.grad is None or not np.any(p.grad) for p in in_params)
    assert any(p.grad is not None and np.any(p.grad) for k, p in m.params.items() if k.startswith("out."))
    _clear(m)
    _, inp = main()
    m.aux_loss(inp, ann).backward()
    assert all(p.grad is not None and np.any(p.grad) for p in in_params if p.name != "in.b_slot")


@pytest.mark.parametrize("mode", [HYBRID, SHORTCUT])
def test_shortcut_carries_main_gradient(mode):
    m = tiny_model(mode)
    main, _ = _main_and_aux(m)
    _clear(m)
    loss, _ = main()
    loss.backward()
    assert np.any(m.params["in.w_z"].grad)


@pytest.mark.parametrize("mode", [IGC, HYBRID, SHORTCUT])
def test_output_mapping_path_gradcheck(mode):
    m = tiny_model(mode, seed=11)
    rng = np.random.default_rng(12)
    # a generic point: the initial state has saturated gates and 0.01-scale
    # weights whose tiny gradients sit at the finite-difference noise floor
    for k, p in m.params.items():
        if k.startswith(("out.", "sc.")):
            p.data[:] = rng.normal(0.0, 0.5, size=p.shape)
    ids, anchors, lengths, ann = tiny_batch(rng)
    rows = lm_rows(anchors, lengths)
    h_low = E.DiffArray(m.lower(ids).data, requires_grad=True)
    names = [k for k in m.params if k.startswith(("out.", "sc."))]
    if mode != IGC:
        names += ["in.w_z", "in.b_z"]

    def loss():
        logits, _ = m.forward_train(ids, anchors, lengths, ann, h_low=h_low, rows=rows)
        return E.cross_entropy(logits, ids[rows[0], rows[1] + 1])
    # the vocabulary softmax yields many ~1e-7 entries whose central
    # differences carry ~1e-10 round-off, hence the 1e-5 floor
    err = check_gradients(loss, [h_low] + [m.params[k] for k in names], floor=1e-5)
    assert err < 1e-4


# --- generation, cache, single execution ------------------------------------


def _prompts(rng, n=5):
    out = []
    for i in range(n):
        L = 4 + i % 3
        p = list(rng.integers(4, V, size=L))
        out.append(p + [ANCHOR])
    return out


def test_single_execution_per_sequence():
    calc = Calculator(W)
    host = freeze_base(tiny_host())
    m = IGCModel(host, IGCConfig(**SMALL), calculator=calc, vocab=VOCAB)
    prompts = _prompts(np.random.default_rng(13))
    cache = IgcCache()
    m.generate(prompts, max_new=8, cache=cache)
    assert all(cache.executions[i] == 1 for i in range(len(prompts)))
    n_buckets = len({len(p) for p in prompts})
    assert calc.calls == n_buckets


def test_twenty_token_generation_calls_calculator_once():
    calc = Calculator(W)
    host = HostModel(HostDims(vocab=V, d_model=8, n_layers=3, n_heads=2, d_ff=16, ctx=32))
    host.pretrained = True
    freeze_base(host)
    m = IGCModel(host, IGCConfig(**SMALL), calculator=calc, vocab=SimpleNamespace(eos_id=-1, anchor_id=ANCHOR))
    out = m.generate([[5, 6, 7, ANCHOR]], max_new=20)
    assert len(out[0]) == 20
    assert calc.calls == 1


def test_cached_equals_uncached():
    m = tiny_model()
    prompts = _prompts(np.random.default_rng(14), n=6)
    a = m.generate(prompts, max_new=8, use_cache=True)
    b = m.generate(prompts, max_new=8, use_cache=False)
    assert a == b


def test_cache_hit_bit_identical():
    m = tiny_model()
    prompts = _prompts(np.random.default_rng(15), n=2)
    ids = np.array([prompts[0]])
    cache = IgcCache()
    h = m.lower(ids)
    inp1, res1 = m.run_igc(h, np.array([len(prompts[0]) - 1]), [0], cache)
    inp2, res2 = m.run_igc(h, np.array([len(prompts[0]) - 1]), [0], cache)
    assert cache.executions[0] == 1
    assert np.array_equal(res1.magnitude, res2.magnitude)
    assert np.array_equal(inp1.digits.data, inp2.digits.data)
    fresh = m.run_igc(h, np.array([len(prompts[0]) - 1]))[1]
    assert np.array_equal(fresh.magnitude, res1.magnitude)


def test_prompt_without_anchor_skips_igc():
    calc = Calculator(W)
    m = IGCModel(freeze_base(tiny_host()), IGCConfig(**SMALL), calculator=calc, vocab=VOCAB)
    plain = IGCModel(m.host, IGCConfig(mode=PLAIN, **SMALL), vocab=VOCAB)
    prompts = [[5, 6, 7, 8], [9, 10, 11, 12]]
    cache = IgcCache()
    assert m.generate(prompts, cache=cache) == plain.generate(prompts)
    assert calc.calls == 0
    assert len(cache) == 0


# --- persistence ------------------------------------------------------------


def test_igc_checkpoint_roundtrip(tmp_path):
    m = tiny_model(HYBRID, seed=4)
    m.save(tmp_path / "m.ckpt")
    back, meta = IGCModel.load(tmp_path / "m.ckpt", vocab=VOCAB)
    assert meta["igc"]["mode"] == HYBRID
    prompts = _prompts(np.random.default_rng(16), n=3)
    assert m.generate(prompts) == back.generate(prompts)


# --- training objective -----------------------------------------------------


@pytest.fixture(scope="module")
def real_batch():
    vocab = default_vocab()
    splits, _ = generate(DataConfig(n_train=40, n_eval=4, n_eval_distractor=8, filter_cap=0), vocab)
    host = HostModel(HostDims(vocab=len(vocab), d_model=8, n_layers=2, n_heads=2, d_ff=16, ctx=32))
    host.pretrained = True
    freeze_base(host)
    m = IGCModel(host, IGCConfig(d_feat=8, d_key=4, d_slot=8, d_short=6), vocab=vocab)
    arith = [r for r in splits["train"] if r.annotation is not None][:6]
    return m, vocab, arith, splits["eval-distractor"][:3]


def test_gate_penalty_ignores_arithmetic_rows(real_batch):
    m, vocab, arith, _ = real_batch
    idx = np.arange(len(arith))
    plain = igc_step(m, arith, idx, vocab, 1.0)[0]
    pen = igc_step(m, arith, idx, vocab, 1.0, lambda_gate=5.0)[0]
    assert float(pen.data) == float(plain.data)


def test_gate_penalty_is_mean_gate_on_silent_rows(real_batch):
    m, vocab, arith, distract = real_batch
    recs = arith[:3] + distract
    idx = np.arange(len(recs))
    base = float(igc_step(m, recs, idx, vocab, 1.0)[0].data)
    pen = float(igc_step(m, recs, idx, vocab, 1.0, lambda_gate=2.0)[0].data)
    ids, lengths = pad_ids([r.ids for r in distract], vocab.pad_id)
    anchors = np.array([r.anchor_index for r in distract])
    gates = m.forward_train(ids, anchors, lengths, [None] * len(distract), return_gates=True)[2]
    assert pen - base == pytest.approx(2.0 * gates.data.mean(), rel=1e-9)


def test_template_perplexity_skips_distractors_and_drawn_tokens(real_batch):
    m, vocab, arith, distractors = real_batch
    ppl = template_perplexity(m.host, arith, vocab)
    assert ppl == template_perplexity(m.host, arith + distractors, vocab)
    assert ppl > 1.0
