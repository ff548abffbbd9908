"""Finite-difference checks of every differentiable building block."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .encoders import DualEncoder, EncoderConfig, TokenSequence
from .numcore import (
    Tensor,
    concat,
    cosine_similarity,
    gelu,
    grad_check,
    l2_normalize,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    parameter,
    softmax,
)
from .objectives import class_logits, consistency_loss, cross_entropy_logits, total_loss
from .promptflow import FlowConfig, init_prompt_stack, lkp_attention, map_prompts, materialize

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _p(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return parameter(rng.normal(0.0, scale, shape))


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    a, b, c = _p(rng, 3, 4), _p(rng, 4, 5), _p(rng, 5)
    g, beta = _p(rng, 5), _p(rng, 5)
    pos = parameter(rng.uniform(0.5, 2.0, (3, 5)))
    w = Tensor(rng.normal(size=(3, 5)))
    return {
        "matmul": (lambda: (matmul(a, b) * w).sum(), [a, b]),
        "softmax": (lambda: (softmax(matmul(a, b), temperature=0.7) * w).sum(), [a, b]),
        "log_softmax": (lambda: (log_softmax(matmul(a, b)) * w).sum(), [a, b]),
        "layer_norm": (lambda: (layer_norm(matmul(a, b), g, beta) * w).sum(), [a, b, g, beta]),
        "gelu": (lambda: (gelu(matmul(a, b)) * w).sum(), [a, b]),
        "l2_normalize": (lambda: (l2_normalize(matmul(a, b)) * w).sum(), [a, b]),
        "cosine_similarity": (lambda: (cosine_similarity(matmul(a, b), pos) * w[:, 0]).sum(), [a, b, pos]),
        "linear": (lambda: (linear(a, b, c).tanh() * w).sum(), [a, b, c]),
        "elementwise": (lambda: ((pos.log() + pos.sqrt() / pos - pos ** 3 + pos.exp()) * w).sum(), [pos]),
        "indexing": (lambda: (concat([a[:, 1:], a[[0, 0, 2]]], axis=1) ** 2).mean(), [a]),
        "reductions": (lambda: (matmul(a, b).mean(axis=0) * c).sum() + a.abs().sum(), [a, b]),
    }


def lkp_case(rng: np.random.Generator, s: int = 3, m: int = 4, d: int = 8):
    prompts, inits = _p(rng, s, m, d), _p(rng, s, d)
    ws = [_p(rng, d, d, scale=0.5) for _ in range(4)]
    target = Tensor(rng.normal(size=(s, d)))
    return (lambda: (lkp_attention(prompts, inits, *ws) * target).sum()), [prompts, inits, *ws]


def mapper_case(rng: np.random.Generator, s: int = 2, m: int = 3, d_tgt: int = 6, d_src: int = 4,
                heads: int = 2):
    target_prompts, proxies = _p(rng, s, m, d_tgt), _p(rng, s, d_src)
    params = {
        "mapper.ln_q.gain": _p(rng, d_tgt), "mapper.ln_q.bias": _p(rng, d_tgt),
        "mapper.ln_kv.gain": _p(rng, d_src), "mapper.ln_kv.bias": _p(rng, d_src),
        "mapper.w_q": _p(rng, d_tgt, d_tgt, scale=0.5), "mapper.w_k": _p(rng, d_src, d_tgt, scale=0.5),
        "mapper.w_v": _p(rng, d_src, d_tgt, scale=0.5), "mapper.w_o": _p(rng, d_tgt, d_tgt, scale=0.5),
        "mapper.ln_ffn.gain": _p(rng, d_tgt), "mapper.ln_ffn.bias": _p(rng, d_tgt),
        "mapper.w_1": _p(rng, d_tgt, 4 * d_tgt, scale=0.5), "mapper.b_1": _p(rng, 4 * d_tgt),
        "mapper.w_2": _p(rng, 4 * d_tgt, d_tgt, scale=0.5), "mapper.b_2": _p(rng, d_tgt),
    }
    w = Tensor(rng.normal(size=(s, m, d_tgt)))
    return (lambda: (map_prompts(target_prompts, proxies, params, heads=heads) * w).sum()), \
        [target_prompts, proxies, *params.values()]


def full_objective_case(rng: np.random.Generator, config: EncoderConfig | None = None, seed: int = 0,
                        weight: float = 12.0):
    """CE plus weighted consistency through both prompted towers."""
    cfg = config or EncoderConfig()
    enc = DualEncoder(cfg, seed=seed)
    stack = init_prompt_stack(cfg, max(1, cfg.layers // 2), seed, FlowConfig())
    # larger weights than the 0.02 init keep every gradient well above round-off
    for t in enc.parameters() + stack.parameters():
        if t.ndim >= 1 and t.data.std() > 0:
            t.data = t.data * 10.0
    enc.freeze()
    images = rng.uniform(0, 1, (2, cfg.image_size, cfg.image_size, cfg.channels))
    n_cls = 3
    tokens = [TokenSequence(tuple(int(i) for i in ids), 2)
              for ids in np.concatenate([rng.integers(2, cfg.vocab_size, (n_cls, 2)),
                                         np.ones((n_cls, 1), int),
                                         np.zeros((n_cls, cfg.max_text_len - 3), int)], axis=1)]
    labels = np.array([0, 2])
    v_frozen = enc.encode_image(images).data
    w_frozen = enc.encode_text(tokens).data
    v_frozen = v_frozen / np.linalg.norm(v_frozen, axis=1, keepdims=True)
    w_frozen = w_frozen / np.linalg.norm(w_frozen, axis=1, keepdims=True)

    def loss() -> Tensor:
        eff = materialize(stack)
        v_p = enc.encode_image(images, eff.visual)
        w_p = enc.encode_text(tokens, eff.text)
        ce = cross_entropy_logits(class_logits(v_p, w_p, 0.5), labels)
        cons = consistency_loss(Tensor(v_frozen), l2_normalize(v_p), Tensor(w_frozen), l2_normalize(w_p))
        return total_loss(ce, cons, weight)

    return loss, stack.parameters()


def run_suite(seed: int = 0, max_coords: int = 3, eps: float = 1e-5) -> list[CheckResult]:
    """Grad-check primitives, the proxy compressor, the mapper and the full objective."""
    rng = np.random.default_rng(seed)
    cases = dict(primitive_cases(rng))
    cases["lkp"] = lkp_case(rng)
    cases["mapper"] = mapper_case(rng)
    cases["full_objective"] = full_objective_case(rng, seed=seed)
    results = []
    for name, (f, inputs) in cases.items():
        t0 = time.perf_counter()
        coords = max_coords if name == "full_objective" else None
        err = grad_check(f, inputs, eps=eps, max_coords=coords, seed=seed)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results
