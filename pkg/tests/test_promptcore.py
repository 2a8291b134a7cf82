import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from visprompt import tensor as T
from visprompt.encoders import embed_words, word_vector
from visprompt.errors import ContractError, DegenerateInputError, DimensionError
from visprompt.promptcore import (
    InjectionParams,
    PromptState,
    StyleMemory,
    assemble_prompt,
    assemble_prompt_batch,
    cls_index,
    fuse_content_style,
    gate_forward,
    injection_forward,
    multiscale_features,
    style_statistics,
    visual_tokens,
)
from visprompt.tensor import Tensor


def _gates_as_lists(params):
    return [{k: getattr(g, k).data.tolist() for k in ("W1", "b1", "W2", "b2", "P", "bp")}
            for g in params.gates]


def _randomize_projections(params, rng):
    for g in params.gates:
        g.P = Tensor(np.eye(g.P.shape[0]) + rng.normal(0, 0.3, g.P.shape), requires_grad=True)
        g.bp = Tensor(rng.normal(0, 0.1, g.bp.shape), requires_grad=True)
        g.b1 = Tensor(rng.normal(0, 0.1, g.b1.shape), requires_grad=True)
        g.b2 = Tensor(rng.normal(0, 0.1, g.b2.shape), requires_grad=True)


def test_style_statistics_examples():
    v = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(style_statistics(np.stack([v, v, v])).data, v)
    np.testing.assert_array_equal(style_statistics(np.array([[0.0, 2.0], [2.0, 0.0]])).data, [1.0, 1.0])


def test_style_statistics_matches_loop_oracle():
    x = np.random.default_rng(0).normal(size=(4, 32))
    np.testing.assert_allclose(style_statistics(x).data, oracles.column_means(x.tolist()), rtol=0, atol=1e-14)


def test_style_statistics_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        style_statistics(np.ones(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_style_statistic_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    np.testing.assert_allclose(style_statistics(x).data, style_statistics(x[perm]).data, rtol=0, atol=1e-14)


def test_multiscale_examples():
    m = np.random.default_rng(1).normal(size=(4, 4, 8))
    np.testing.assert_array_equal(multiscale_features([m]).data, T.gap(Tensor(m)).data)
    consts = [np.full((4, 4, 1), 0.7), np.full((2, 2, 1), -3.0)]
    np.testing.assert_allclose(multiscale_features(consts).data, [0.7, -3.0], rtol=0, atol=1e-15)
    with pytest.raises(ContractError):
        multiscale_features([])


def test_multiscale_matches_per_layer_gap_oracle():
    rng = np.random.default_rng(2)
    maps = [rng.normal(size=s) for s in [(8, 8, 8), (4, 4, 8), (2, 2, 8)]]
    out = multiscale_features(maps).data
    assert out.shape == (24,)
    expect = sum((oracles.gap(m.tolist()) for m in maps), [])
    np.testing.assert_allclose(out, expect, rtol=0, atol=1e-14)


def test_fuse_examples():
    np.testing.assert_array_equal(fuse_content_style([1.0, 2.0], [3.0]).data, [1.0, 2.0, 3.0])
    c, s = np.arange(24.0), np.arange(32.0) + 100
    F = fuse_content_style(c, s).data
    assert F.shape == (56,)
    np.testing.assert_array_equal(F[:24], c)
    np.testing.assert_array_equal(F[24:], s)
    with pytest.raises(DegenerateInputError):
        fuse_content_style([np.nan], [1.0])


def test_fuse_batched_content_repeats_style():
    F = fuse_content_style(np.ones((3, 2)), np.array([5.0, 6.0])).data
    np.testing.assert_array_equal(F, [[1, 1, 5, 6]] * 3)


def test_zero_gates_scale_by_one_and_a_half():
    params = InjectionParams.init(6, 4, n_gates=1, rng=np.random.default_rng(0), gate_std=0.0)
    for g in params.gates:
        g.W2 = Tensor(np.zeros_like(g.W2.data), requires_grad=True)
    F = np.random.default_rng(1).normal(size=6)
    np.testing.assert_allclose(injection_forward(F, params).data, 1.5 * F, rtol=0, atol=1e-15)


def test_no_gates_returns_input():
    params = InjectionParams.init(5, 4, n_gates=0, rng=np.random.default_rng(0))
    F = np.random.default_rng(1).normal(size=5)
    np.testing.assert_array_equal(injection_forward(F, params).data, F)


@pytest.mark.parametrize("g", [0.1, 0.5, 0.9])
@pytest.mark.parametrize("Q", [1, 2])
def test_saturated_gates_scale_by_one_plus_g_to_the_q(g, Q):
    d = 8
    params = InjectionParams.init(d, 4, n_gates=Q, rng=np.random.default_rng(0))
    for gate in params.gates:
        gate.W2 = Tensor(np.zeros_like(gate.W2.data), requires_grad=True)
        gate.b2 = Tensor(np.full(d, np.log(g / (1 - g))), requires_grad=True)
    F = np.random.default_rng(3).normal(size=d)
    np.testing.assert_allclose(injection_forward(F, params).data, (1 + g) ** Q * F, rtol=1e-13)


@pytest.mark.parametrize("Q", [0, 1, 2, 3])
def test_injection_matches_unrolled_scalar_oracle(Q):
    for trial in range(5):
        rng = np.random.default_rng([Q, trial])
        params = InjectionParams.init(12, 6, n_gates=Q, rng=rng)
        _randomize_projections(params, rng)
        F = rng.normal(size=12)
        out = injection_forward(F, params).data
        np.testing.assert_allclose(out, oracles.injection(F.tolist(), _gates_as_lists(params)),
                                   rtol=0, atol=1e-12)


def test_injection_batch_rows_match_single():
    rng = np.random.default_rng(4)
    params = InjectionParams.init(10, 6, rng=rng)
    _randomize_projections(params, rng)
    X = rng.normal(size=(3, 10))
    batched = injection_forward(X, params).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], injection_forward(X[i], params).data, rtol=0, atol=1e-13)


def test_injection_dimension_error():
    params = InjectionParams.init(10, 6, rng=np.random.default_rng(0))
    with pytest.raises(DimensionError):
        injection_forward(np.ones(9), params)


def test_gate_values_lie_in_open_unit_interval():
    rng = np.random.default_rng(5)
    params = InjectionParams.init(16, 4, rng=rng)
    a = gate_forward(params.gates[0], Tensor(rng.normal(size=(20, 16)))).data
    assert np.all((a > 0) & (a < 1))


def test_all_injection_parameters_are_trainable():
    params = InjectionParams.init(8, 4, n_gates=2, n_tokens=3, rng=np.random.default_rng(0))
    ts = params.tensors()
    assert len(ts) == 2 * 6 + 3 * 2
    assert all(t.requires_grad for t in ts.values())


def test_visual_token_examples():
    params = InjectionParams.init(6, 4, n_tokens=3, rng=np.random.default_rng(0), head_std=0.0)
    toks = visual_tokens(np.random.default_rng(1).normal(size=6), params)
    assert len(toks) == 3 and all(not np.any(t.data) for t in toks)

    params = InjectionParams.init(6, 4, n_tokens=1, rng=np.random.default_rng(2), head_std=0.5)
    O = np.random.default_rng(3).normal(size=6)
    (tok,) = visual_tokens(O, params)
    np.testing.assert_allclose(tok.data, O @ params.heads_W[0].data + params.heads_b[0].data, rtol=0, atol=1e-14)

    params = InjectionParams.init(6, 4, n_tokens=4, rng=np.random.default_rng(4), head_std=0.5)
    toks = [t.data for t in visual_tokens(O, params)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.allclose(toks[i], toks[j])


def test_cls_index_policy():
    assert cls_index("end", 4) == 4
    assert cls_index("front", 4) == 0
    assert cls_index("middle", 4) == 2
    assert cls_index("middle", 5) == 2
    assert cls_index("middle", 1) == 0
    with pytest.raises(ContractError):
        cls_index("top", 4)


def test_assemble_with_zero_tokens_is_context_plus_class():
    prompt = PromptState.init(4, 32, "manual")
    cls = word_vector("harbor")
    seq = assemble_prompt(prompt, [np.zeros(32)] * 4, cls)
    assert len(seq) == 5
    for m in range(4):
        np.testing.assert_array_equal(seq[m].data, prompt.context.data[m])
    np.testing.assert_array_equal(seq[4].data, cls)


@pytest.mark.parametrize("position,idx", [("end", 4), ("front", 0), ("middle", 2)])
def test_assemble_places_class_once(position, idx):
    rng = np.random.default_rng(6)
    prompt = PromptState.init(4, 8, "random", position, rng=rng)
    cls = np.full(8, 9.0)
    toks = [rng.normal(size=8) for _ in range(4)]
    seq = assemble_prompt(prompt, toks, cls)
    hits = [i for i, t in enumerate(seq) if np.array_equal(t.data, cls)]
    assert hits == [idx]
    ctx_pos = [i for i in range(5) if i != idx]
    for m, i in enumerate(ctx_pos):
        np.testing.assert_allclose(seq[i].data, prompt.context.data[m] + toks[m], rtol=0, atol=1e-15)


def test_assemble_token_count_mismatch():
    prompt = PromptState.init(4, 8, "zeros")
    with pytest.raises(ContractError):
        assemble_prompt(prompt, [np.zeros(8)] * 3, np.ones(8))


@pytest.mark.parametrize("position", ["front", "middle", "end"])
def test_batch_assembly_matches_list_assembly(position):
    rng = np.random.default_rng(7)
    prompt = PromptState.init(3, 8, "random", position, rng=rng)
    toks = rng.normal(size=(2, 3, 8))
    embs = rng.normal(size=(4, 8))
    ctx = prompt.context.data[None] + toks
    out = assemble_prompt_batch(Tensor(ctx), Tensor(embs), position).data
    assert out.shape == (2, 4, 4, 8)
    for b in range(2):
        for k in range(4):
            seq = assemble_prompt(prompt, list(toks[b]), embs[k])
            np.testing.assert_allclose(out[b, k], np.stack([s.data for s in seq]), rtol=0, atol=1e-15)


def test_prompt_init_modes():
    manual = PromptState.init(4, 32, "manual")
    np.testing.assert_array_equal(manual.context.data, np.stack([t.data for t in embed_words("a photo of a")]))
    zeros = PromptState.init(4, 32, "zeros")
    assert not np.any(zeros.context.data)
    rand = PromptState.init(2000, 32, "random", rng=np.random.default_rng(0))
    assert rand.context.data.std() == pytest.approx(0.02, rel=0.02)
    long = PromptState.init(6, 32, "manual")
    assert long.context.shape == (6, 32)
    with pytest.raises(ContractError):
        PromptState.init(0, 32)
    with pytest.raises(ContractError):
        PromptState.init(4, 32, "learned")


def test_gradients_reach_prompt_and_injection_only():
    from visprompt.encoders import EncoderConfig, build_encoders

    enc = build_encoders(EncoderConfig())
    before = enc.snapshot()
    rng = np.random.default_rng(8)
    params = InjectionParams.init(24 + 32, 32, rng=rng)
    prompt = PromptState.init(4, 32, "manual")
    imgs = rng.uniform(size=(3, 16, 16, 3))
    maps, final = enc.vision.forward_numpy(imgs)
    F = fuse_content_style(multiscale_features(maps), style_statistics(final))
    toks = visual_tokens(injection_forward(F, params), params)
    ctx = T.add(T.expand(T.reshape(prompt.context, (1, 4, 32)), (3, 4, 32)), T.stack(toks, axis=1))
    seq = assemble_prompt_batch(ctx, Tensor(rng.normal(0, 0.1, (2, 32))), "end")
    loss = T.sum(enc.text.forward_batch(seq))
    T.backward(loss)
    learnable = [prompt.context, *params.tensors().values()]
    assert all(p.grad is not None for p in learnable)
    assert np.any(prompt.context.grad)
    assert enc.snapshot() == before


def test_style_memory_falls_back_to_pooled_mean():
    mem = StyleMemory()
    with pytest.raises(DegenerateInputError):
        mem.mean(0)
    mem.update(0, np.array([[1.0, 1.0], [3.0, 3.0]]))
    mem.update(1, np.array([[7.0, 7.0]]))
    np.testing.assert_array_equal(mem.mean(0), [2.0, 2.0])
    np.testing.assert_array_equal(mem.mean(5), [11 / 3, 11 / 3])
