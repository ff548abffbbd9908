import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hicropl.encoders import EncoderConfig
from hicropl.errors import ConfigError, DimensionError
from hicropl.numcore import Tensor, grad_check
from hicropl.promptflow import (
    FlowConfig,
    build_proxies,
    compress_layer,
    init_prompt_stack,
    lkp_attention,
    map_prompts,
    mapper_key_count,
    materialize,
    segment_plan,
)

from oracles import lkp_oracle

TWELVE = EncoderConfig(layers=12, text_width=16, vision_width=24, embed_dim=8, prompt_len=4)


def randomize(stack, rng, scale=0.3):
    for t in stack.parameters():
        t.data = rng.normal(0, scale, t.shape)
    return stack


def ln_vec(x, g, b, eps=1e-5):
    mean = math.fsum(x) / len(x)
    var = math.fsum((v - mean) ** 2 for v in x) / len(x)
    return (x - mean) / math.sqrt(var + eps) * g + b


def gelu_vec(x):
    return np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x])


# -- initialization -------------------------------------------------------------------

def test_same_seed_gives_identical_stacks():
    a, b = init_prompt_stack(EncoderConfig(), 4, seed=7), init_prompt_stack(EncoderConfig(), 4, seed=7)
    assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]
    for x, y in zip(a.parameters(), b.parameters()):
        assert np.array_equal(x.data, y.data)


def test_different_seeds_differ():
    a, b = init_prompt_stack(EncoderConfig(), 4, seed=1), init_prompt_stack(EncoderConfig(), 4, seed=2)
    assert not np.array_equal(a.text_prompts[0].data, b.text_prompts[0].data)


def test_prompt_shapes():
    stack = init_prompt_stack(EncoderConfig(), 4, seed=0)
    assert len(stack.text_prompts) == 8
    assert {p.shape for p in stack.text_prompts} == {(4, 32)}
    assert {p.shape for p in stack.visual_prompts} == {(4, 48)}


@pytest.mark.parametrize("mechanism,k", [("bidir_TI_then_IT", 0), ("bidir_TI_then_IT", 8),
                                         ("unidir_TI", 4), ("unidir_IT", 3), ("independent", 9)])
def test_invalid_boundary_rejected(mechanism, k):
    with pytest.raises(ConfigError):
        init_prompt_stack(EncoderConfig(), k, 0, FlowConfig(mechanism=mechanism))


def test_unknown_flow_settings_rejected():
    for kw in (dict(mechanism="sideways"), dict(mapper_scale="huge"), dict(compression="zip")):
        with pytest.raises(ConfigError):
            FlowConfig(**kw)


@pytest.mark.parametrize("mechanism,k,expected", [
    ("bidir_TI_then_IT", 3, {"first": ("text", "visual", 3), "second": ("visual", "text", 5)}),
    ("bidir_IT_then_TI", 3, {"first": ("visual", "text", 3), "second": ("text", "visual", 5)}),
    ("unidir_TI", 8, {"first": ("text", "visual", 8)}),
    ("unidir_IT", 0, {"second": ("visual", "text", 8)}),
    ("independent", 4, {}),
])
def test_segment_plan(mechanism, k, expected):
    plan = segment_plan(mechanism, 8, k)
    assert {n: (s.source, s.target, len(s.layers)) for n, s in plan.items()} == expected


# -- proxy compression ----------------------------------------------------------------

def test_single_prompt_with_identity_projections_is_copied(rng):
    d = 6
    prompt, init = Tensor(rng.normal(size=(1, d))), Tensor(rng.normal(size=d))
    eye = {f"compress.w_{n}": Tensor(np.eye(d)) for n in "qkvo"}
    np.testing.assert_allclose(compress_layer(prompt, init, eye).data, prompt.data[0], atol=1e-15)


def test_lkp_matches_loop_oracle(rng):
    for _ in range(100):
        s, m, d = int(rng.integers(1, 4)), 3, int(rng.integers(2, 7))
        prompts, inits = rng.normal(size=(s, m, d)), rng.normal(size=(s, d))
        wq, wk, wv, wo = (rng.normal(size=(d, d)) for _ in range(4))
        got = lkp_attention(Tensor(prompts), Tensor(inits), *map(Tensor, (wq, wk, wv, wo))).data
        np.testing.assert_allclose(got, lkp_oracle(prompts, inits, wq, wk, wv, wo), atol=1e-9, rtol=0)


def test_lkp_width_mismatch(rng):
    with pytest.raises(DimensionError):
        lkp_attention(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((2, 5))),
                      *(Tensor(np.eye(4)) for _ in range(4)))


def test_first_segment_proxy_count_at_boundary_six():
    stack = init_prompt_stack(TWELVE, 6, 0)
    proxies = build_proxies(stack, "first")
    assert len(proxies) == 6 and {p.shape for p in proxies} == {(16,)}
    assert len(build_proxies(stack, "second")) == 6
    assert {p.shape for p in build_proxies(stack, "second")} == {(24,)}


def test_empty_segment_is_an_error():
    stack = init_prompt_stack(TWELVE, 12, 0, FlowConfig(mechanism="unidir_TI"))
    with pytest.raises(ConfigError):
        build_proxies(stack, "second")
    with pytest.raises(ConfigError):
        init_prompt_stack(TWELVE, 12, 0)


def test_proxy_depends_only_on_its_own_layer(rng):
    stack = randomize(init_prompt_stack(TWELVE, 6, 0), rng)
    before = [p.data.copy() for p in build_proxies(stack, "first")]
    stack.text_prompts[2].data = stack.text_prompts[2].data + 1.0
    stack.visual_prompts[1].data = stack.visual_prompts[1].data + 1.0
    after = [p.data for p in build_proxies(stack, "first")]
    for i in range(6):
        assert np.array_equal(before[i], after[i]) == (i != 2)


def test_lkp_shrinks_mapper_keys_from_prompts_to_layers():
    stack = init_prompt_stack(TWELVE, 6, 0)
    m, k = TWELVE.prompt_len, 6
    raw_keys = sum(stack.text_prompts[i].shape[0] for i in range(k))
    assert raw_keys == m * k
    assert mapper_key_count(stack, "first") == k


@pytest.mark.parametrize("compression", ["average", "mlp"])
def test_alternative_compressions_give_one_proxy_per_layer(compression, rng):
    stack = randomize(init_prompt_stack(TWELVE, 6, 0, FlowConfig(compression=compression)), rng)
    proxies = build_proxies(stack, "first")
    assert len(proxies) == 6
    if compression == "average":
        np.testing.assert_allclose(proxies[3].data, stack.text_prompts[3].data.mean(axis=0))


# -- mapper -------------------------------------------------------------------------

def mapper_params(stack, seg="first"):
    return stack.modules[seg]


def test_zero_residual_mapper_is_identity(rng):
    stack = init_prompt_stack(TWELVE, 6, 0, zero_residual=True)
    for t in stack.parameters():
        if not np.all(t.data == 0):
            t.data = rng.normal(0, 0.5, t.shape)
    params = mapper_params(stack)
    target = Tensor(rng.normal(size=(6, 4, 24)))
    proxies = Tensor(rng.normal(size=(6, 16)))
    assert np.array_equal(map_prompts(target, proxies, params).data, target.data)


def test_mapper_matches_hand_composed_formula(rng):
    for _ in range(100):
        d_t, d_s = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        p = {
            "mapper.ln_q.gain": rng.normal(size=d_t), "mapper.ln_q.bias": rng.normal(size=d_t),
            "mapper.ln_kv.gain": rng.normal(size=d_s), "mapper.ln_kv.bias": rng.normal(size=d_s),
            "mapper.w_q": rng.normal(size=(d_t, d_t)), "mapper.w_k": rng.normal(size=(d_s, d_t)),
            "mapper.w_v": rng.normal(size=(d_s, d_t)), "mapper.w_o": rng.normal(size=(d_t, d_t)),
            "mapper.ln_ffn.gain": rng.normal(size=d_t), "mapper.ln_ffn.bias": rng.normal(size=d_t),
            "mapper.w_1": rng.normal(size=(d_t, 4 * d_t)), "mapper.b_1": rng.normal(size=4 * d_t),
            "mapper.w_2": rng.normal(size=(4 * d_t, d_t)), "mapper.b_2": rng.normal(size=d_t),
        }
        x, proxy = rng.normal(size=d_t), rng.normal(size=d_s)
        got = map_prompts(Tensor(x.reshape(1, 1, d_t)), Tensor(proxy.reshape(1, d_s)),
                          {k: Tensor(v) for k, v in p.items()}).data.reshape(d_t)
        # one key: the attention weight is exactly 1, so the context is the value row
        value = ln_vec(proxy, p["mapper.ln_kv.gain"], p["mapper.ln_kv.bias"]) @ p["mapper.w_v"]
        h = x + value @ p["mapper.w_o"]
        f = gelu_vec(ln_vec(h, p["mapper.ln_ffn.gain"], p["mapper.ln_ffn.bias"]) @ p["mapper.w_1"]
                     + p["mapper.b_1"]) @ p["mapper.w_2"] + p["mapper.b_2"]
        np.testing.assert_allclose(got, h + f, atol=1e-9, rtol=0)


def test_mapper_width_mismatch(rng):
    stack = init_prompt_stack(TWELVE, 6, 0)
    with pytest.raises(DimensionError):
        map_prompts(Tensor(np.zeros((6, 4, 16))), Tensor(np.zeros((6, 16))), mapper_params(stack))


@given(st.permutations(list(range(5))))
def test_mapper_ignores_proxy_order(perm):
    rng = np.random.default_rng(3)
    stack = randomize(init_prompt_stack(TWELVE, 5, 0), rng)
    target = Tensor(rng.normal(size=(5, 4, 24)))
    proxies = rng.normal(size=(5, 16))
    a = map_prompts(target, Tensor(proxies), mapper_params(stack)).data
    b = map_prompts(target, Tensor(proxies[list(perm)]), mapper_params(stack)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_single_scale_differs_from_multi_scale(rng):
    multi = randomize(init_prompt_stack(TWELVE, 6, 0), rng)
    single = init_prompt_stack(TWELVE, 6, 0, FlowConfig(mapper_scale="single"))
    single.load_state(multi.state_dict())
    a, b = materialize(multi), materialize(single)
    assert not np.allclose(a.visual[0].data, b.visual[0].data)


def test_single_scale_uses_only_the_own_proxy(rng):
    stack = randomize(init_prompt_stack(TWELVE, 6, 0), rng)
    target = Tensor(rng.normal(size=(6, 4, 24)))
    proxies = rng.normal(size=(6, 16))
    base = map_prompts(target, Tensor(proxies), mapper_params(stack), single_scale=True).data
    proxies[4] += 1.0
    moved = map_prompts(target, Tensor(proxies), mapper_params(stack), single_scale=True).data
    changed = [not np.array_equal(base[i], moved[i]) for i in range(6)]
    assert changed == [False, False, False, False, True, False]


# -- materialize ----------------------------------------------------------------------

def test_unidirectional_zero_residual_is_the_raw_parameters(rng):
    stack = init_prompt_stack(EncoderConfig(), 8, 0, FlowConfig(mechanism="unidir_TI"), zero_residual=True)
    eff = materialize(stack)
    for raw, got in zip(stack.text_prompts + stack.visual_prompts, eff.text + eff.visual):
        assert np.array_equal(raw.data, got.data)


@pytest.mark.parametrize("mechanism,k", [("bidir_TI_then_IT", 4), ("bidir_IT_then_TI", 3),
                                         ("unidir_IT", 0), ("independent", 4)])
def test_zero_residual_identity_for_every_mechanism(mechanism, k):
    stack = init_prompt_stack(EncoderConfig(), k, 5, FlowConfig(mechanism=mechanism), zero_residual=True)
    eff = materialize(stack)
    for raw, got in zip(stack.text_prompts + stack.visual_prompts, eff.text + eff.visual):
        assert np.array_equal(raw.data, got.data)


def grad_reach(stack, modality, layer):
    """Which raw prompt tensors receive gradient from one effective prompt."""
    for t in stack.parameters():
        t.grad = None
    eff = materialize(stack)
    out = (eff.text if modality == "text" else eff.visual)[layer]
    (out * Tensor(np.ones(out.shape))).sum().backward()
    reach = {}
    for name, t in stack.named_parameters():
        if name.startswith("prompts."):
            reach[name] = t.grad is not None and np.abs(t.grad).max() > 0
    return reach


def test_deep_text_prompts_depend_on_visual_parameters(rng):
    stack = randomize(init_prompt_stack(TWELVE, 6, 0), rng)
    for layer in range(6, 12):
        reach = grad_reach(stack, "text", layer)
        assert all(reach[f"prompts.visual.{i}"] for i in range(6, 12))
        assert not any(reach[f"prompts.visual.{i}"] for i in range(6))
        assert [n for n in reach if n.startswith("prompts.text") and reach[n]] == [f"prompts.text.{layer}"]


def test_segments_are_exclusive(rng):
    stack = randomize(init_prompt_stack(TWELVE, 6, 0), rng)
    for layer in range(6):
        reach = grad_reach(stack, "text", layer)
        assert [n for n, hit in reach.items() if hit] == [f"prompts.text.{layer}"]
    for layer in range(6, 12):
        reach = grad_reach(stack, "visual", layer)
        assert [n for n, hit in reach.items() if hit] == [f"prompts.visual.{layer}"]


def test_shallow_visual_prompts_see_every_shallow_text_layer(rng):
    stack = randomize(init_prompt_stack(TWELVE, 6, 0), rng)
    reach = grad_reach(stack, "visual", 0)
    assert all(reach[f"prompts.text.{i}"] for i in range(6))
    assert not any(reach[f"prompts.text.{i}"] for i in range(6, 12))


def test_materialize_rejects_foreign_flow():
    stack = init_prompt_stack(EncoderConfig(), 4, 0)
    with pytest.raises(ConfigError):
        materialize(stack, FlowConfig(mechanism="unidir_IT"))


def test_partial_depth_stack():
    stack = init_prompt_stack(EncoderConfig(), 2, 0, depth=4)
    eff = materialize(stack)
    assert len(eff.text) == len(eff.visual) == 4


def test_materialize_grad_check(rng):
    cfg = EncoderConfig(layers=4, heads=2, text_width=6, vision_width=8, embed_dim=4, image_size=8,
                        patch_size=4, prompt_len=3, mlp_ratio=2)
    stack = randomize(init_prompt_stack(cfg, 2, 0, FlowConfig(mapper_heads=2)), rng, scale=0.5)
    weights = [Tensor(rng.normal(size=p.shape)) for p in stack.text_prompts + stack.visual_prompts]

    def f():
        eff = materialize(stack)
        total = None
        for out, w in zip(eff.text + eff.visual, weights):
            term = (out * w).sum()
            total = term if total is None else total + term
        return total

    assert grad_check(f, stack.parameters()) < 1e-4
