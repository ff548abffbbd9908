"""Cross-modal prompt flow: per-layer prompts, proxy compression and the mapper.

Layers are split at ``boundary_k`` into two segments. Within a segment, the
source modality's prompts of each layer are compressed into one proxy token,
and every target-modality prompt of the segment attends over all of the
segment's proxies. The other modality's prompts pass through untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .encoders import EncoderConfig
from .errors import ConfigError, DimensionError
from .numcore import Tensor, gelu, layer_norm, linear, matmul, parameter, softmax, stack

MECHANISMS = ("unidir_TI", "unidir_IT", "bidir_IT_then_TI", "bidir_TI_then_IT", "independent")
MAPPER_SCALES = ("single", "multi", "single|multi", "multi|single")
COMPRESSIONS = ("lkp", "average", "mlp")

TEXT, VISUAL = "text", "visual"


@dataclass(frozen=True)
class FlowConfig:
    """How prompts of the two towers are coupled.

    ``independent`` disables cross-modal mapping altogether (plain deep
    prompt tuning of both towers). ``mapper_scale`` may name one scale per
    segment as ``"first|second"``.
    """

    mechanism: str = "bidir_TI_then_IT"
    mapper_scale: str = "multi"
    compression: str = "lkp"
    mapper_heads: int = 1

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown flow mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        if self.mapper_scale not in MAPPER_SCALES:
            raise ConfigError(f"unknown mapper_scale {self.mapper_scale!r}")
        if self.compression not in COMPRESSIONS:
            raise ConfigError(f"unknown compression {self.compression!r}")
        if self.mapper_heads < 1:
            raise ConfigError("mapper_heads must be positive")

    def scale_for(self, segment: str) -> str:
        parts = self.mapper_scale.split("|")
        if len(parts) == 1:
            return parts[0]
        return parts[0] if segment == "first" else parts[1]


@dataclass(frozen=True)
class Segment:
    name: str
    layers: tuple[int, ...]
    source: str
    target: str


def default_boundary(mechanism: str, depth: int, k: int) -> int:
    """Boundary implied by ``mechanism``: unidirectional modes pin it to an end."""
    if mechanism == "unidir_TI":
        return depth
    if mechanism == "unidir_IT":
        return 0
    return k


def validate_boundary(mechanism: str, depth: int, k: int) -> None:
    if mechanism.startswith("bidir"):
        if not 1 <= k <= depth - 1:
            raise ConfigError(f"{mechanism} needs 1 <= boundary_k <= {depth - 1}, got {k}")
    elif mechanism == "unidir_TI" and k != depth:
        raise ConfigError(f"unidir_TI needs boundary_k == prompt depth ({depth}), got {k}")
    elif mechanism == "unidir_IT" and k != 0:
        raise ConfigError(f"unidir_IT needs boundary_k == 0, got {k}")
    elif not 0 <= k <= depth:
        raise ConfigError(f"boundary_k {k} outside [0, {depth}]")


def segment_plan(mechanism: str, depth: int, k: int) -> dict[str, Segment]:
    """Nonempty flow segments keyed ``first`` (layers before k) / ``second``."""
    validate_boundary(mechanism, depth, k)
    if mechanism == "independent":
        return {}
    if mechanism == "bidir_IT_then_TI":
        dirs = {"first": (VISUAL, TEXT), "second": (TEXT, VISUAL)}
    else:
        dirs = {"first": (TEXT, VISUAL), "second": (VISUAL, TEXT)}
    spans = {"first": tuple(range(0, k)), "second": tuple(range(k, depth))}
    return {name: Segment(name, spans[name], *dirs[name]) for name in ("first", "second") if spans[name]}


@dataclass
class EffectivePrompts:
    text: list[Tensor]
    visual: list[Tensor]


@dataclass
class PromptStack:
    """Learnable prompts of both towers plus the flow modules that couple them."""

    config: EncoderConfig
    flow: FlowConfig
    boundary_k: int
    text_prompts: list[Tensor]
    visual_prompts: list[Tensor]
    proxy_inits: list[Tensor | None]
    modules: dict[str, dict[str, Tensor]] = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return len(self.text_prompts)

    @property
    def segments(self) -> dict[str, Segment]:
        return segment_plan(self.flow.mechanism, self.depth, self.boundary_k)

    def width(self, modality: str) -> int:
        return self.config.text_width if modality == TEXT else self.config.vision_width

    def prompts(self, modality: str) -> list[Tensor]:
        return self.text_prompts if modality == TEXT else self.visual_prompts

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, t in enumerate(self.text_prompts):
            yield f"prompts.text.{i}", t
        for i, t in enumerate(self.visual_prompts):
            yield f"prompts.visual.{i}", t
        for i, t in enumerate(self.proxy_inits):
            if t is not None:
                yield f"proxy.{i}", t
        for seg in sorted(self.modules):
            for name in sorted(self.modules[seg]):
                yield f"{seg}.{name}", self.modules[seg][name]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in state:
                raise ConfigError(f"prompt checkpoint lacks {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs {t.shape}")
            t.data = arr.copy()


def _init_compressor(rng, kind: str, d: int, m: int) -> dict[str, np.ndarray]:
    if kind == "lkp":
        return {f"compress.w_{n}": rng.normal(0, 0.02, (d, d)) for n in ("q", "k", "v", "o")}
    if kind == "mlp":
        hidden = max(1, m * d // 2)
        return {"compress.w_1": rng.normal(0, 0.02, (m * d, hidden)), "compress.b_1": np.zeros(hidden),
                "compress.w_2": rng.normal(0, 0.02, (hidden, d)), "compress.b_2": np.zeros(d)}
    return {}


def _init_mapper(rng, d_src: int, d_tgt: int, zero_residual: bool) -> dict[str, np.ndarray]:
    hidden = 4 * d_tgt
    out = {
        "mapper.ln_q.gain": np.ones(d_tgt), "mapper.ln_q.bias": np.zeros(d_tgt),
        "mapper.ln_kv.gain": np.ones(d_src), "mapper.ln_kv.bias": np.zeros(d_src),
        "mapper.w_q": rng.normal(0, 0.02, (d_tgt, d_tgt)),
        "mapper.w_k": rng.normal(0, 0.02, (d_src, d_tgt)),
        "mapper.w_v": rng.normal(0, 0.02, (d_src, d_tgt)),
        "mapper.w_o": rng.normal(0, 0.02, (d_tgt, d_tgt)),
        "mapper.ln_ffn.gain": np.ones(d_tgt), "mapper.ln_ffn.bias": np.zeros(d_tgt),
        "mapper.w_1": rng.normal(0, 0.02, (d_tgt, hidden)), "mapper.b_1": np.zeros(hidden),
        "mapper.w_2": rng.normal(0, 0.02, (hidden, d_tgt)), "mapper.b_2": np.zeros(d_tgt),
    }
    if zero_residual:
        for key in ("mapper.w_o", "mapper.w_2", "mapper.b_2"):
            out[key] = np.zeros_like(out[key])
    return out


def init_prompt_stack(config: EncoderConfig, boundary_k: int, seed: int,
                      flow: FlowConfig | None = None, depth: int | None = None,
                      zero_residual: bool = False) -> PromptStack:
    """Fresh prompts, proxies and flow modules drawn from normal(0, 0.02).

    ``depth`` limits prompting to the first layers (defaults to every layer).
    """
    flow = flow or FlowConfig()
    depth = config.layers if depth is None else depth
    if not 1 <= depth <= config.layers:
        raise ConfigError(f"prompt depth {depth} outside [1, {config.layers}]")
    segments = segment_plan(flow.mechanism, depth, boundary_k)
    rng = np.random.default_rng(seed)
    m, dt, dv = config.prompt_len, config.text_width, config.vision_width
    text = [parameter(rng.normal(0, 0.02, (m, dt)), f"prompts.text.{i}") for i in range(depth)]
    visual = [parameter(rng.normal(0, 0.02, (m, dv)), f"prompts.visual.{i}") for i in range(depth)]
    proxies: list[Tensor | None] = [None] * depth
    modules: dict[str, dict[str, Tensor]] = {}
    for seg in segments.values():
        d_src = dt if seg.source == TEXT else dv
        d_tgt = dt if seg.target == TEXT else dv
        if flow.compression == "lkp":
            for i in seg.layers:
                proxies[i] = parameter(rng.normal(0, 0.02, d_src), f"proxy.{i}")
        raw = _init_compressor(rng, flow.compression, d_src, m)
        raw.update(_init_mapper(rng, d_src, d_tgt, zero_residual))
        modules[seg.name] = {k: parameter(v, f"{seg.name}.{k}") for k, v in raw.items()}
    return PromptStack(config, flow, boundary_k, text, visual, proxies, modules)


# -- layer-specific knowledge proxy -------------------------------------------

def lkp_attention(prompts: Tensor, proxy_inits: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                  w_o: Tensor) -> Tensor:
    """Single-head cross-attention from one proxy per layer onto that layer's prompts.

    ``prompts`` is (s, m, d) and ``proxy_inits`` is (s, d); returns (s, d).
    """
    s, m, d = prompts.shape
    if proxy_inits.shape != (s, d):
        raise DimensionError(f"proxy shape {proxy_inits.shape} does not match prompts {prompts.shape}")
    q = matmul(proxy_inits.reshape(s, 1, d), w_q)
    k = matmul(prompts, w_k)
    v = matmul(prompts, w_v)
    att = softmax(matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d)))
    return matmul(matmul(att, v), w_o).reshape(s, d)


def compress_layer(layer_prompts: Tensor, proxy_init: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Compress one layer's m prompts into a refined proxy of the same width."""
    m, d = layer_prompts.shape
    if proxy_init.shape != (d,) or params["compress.w_q"].shape[0] != d:
        raise DimensionError(f"proxy width {proxy_init.shape} / projection "
                             f"{params['compress.w_q'].shape} vs prompt width {d}")
    return lkp_attention(layer_prompts.reshape(1, m, d), proxy_init.reshape(1, d),
                         params["compress.w_q"], params["compress.w_k"],
                         params["compress.w_v"], params["compress.w_o"]).reshape(d)


def _compress_segment(stack: PromptStack, seg: Segment) -> Tensor:
    params = stack.modules[seg.name]
    src = stack.prompts(seg.source)
    prompts = stack_layers([src[i] for i in seg.layers])
    s, m, d = prompts.shape
    kind = stack.flow.compression
    if kind == "lkp":
        inits = stack_layers([stack.proxy_inits[i] for i in seg.layers])
        return lkp_attention(prompts, inits, params["compress.w_q"], params["compress.w_k"],
                             params["compress.w_v"], params["compress.w_o"])
    if kind == "average":
        return prompts.mean(axis=1)
    h = gelu(linear(prompts.reshape(s, m * d), params["compress.w_1"], params["compress.b_1"]))
    return linear(h, params["compress.w_2"], params["compress.b_2"])


def stack_layers(tensors: list[Tensor]) -> Tensor:
    return stack(tensors, axis=0)


def build_proxies(stack: PromptStack, segment: str) -> list[Tensor]:
    """Refined proxies, one per layer of ``segment``, from prompt parameters."""
    segs = stack.segments
    if segment not in ("first", "second"):
        raise ConfigError(f"segment must be 'first' or 'second', got {segment!r}")
    if segment not in segs:
        raise ConfigError(f"segment {segment!r} is empty for {stack.flow.mechanism} with "
                          f"boundary_k={stack.boundary_k}, depth={stack.depth}")
    out = _compress_segment(stack, segs[segment])
    return [out[i] for i in range(out.shape[0])]


# -- hierarchical knowledge mapper ---------------------------------------------

def map_prompts(target: Tensor, proxies: Tensor, params: dict[str, Tensor], heads: int = 1,
                single_scale: bool = False) -> Tensor:
    """Refine (s, m, d_tgt) target prompts by attending over (p, d_src) proxies.

    Pre-LN cross-attention with residual, followed by a residual GELU FFN.
    With ``single_scale`` the queries of layer i see only proxy i.
    """
    s, m, d_tgt = target.shape
    n_prox, d_src = proxies.shape
    if params["mapper.w_q"].shape != (d_tgt, d_tgt) or params["mapper.w_k"].shape != (d_src, d_tgt):
        raise DimensionError(f"mapper projections {params['mapper.w_q'].shape}/"
                             f"{params['mapper.w_k'].shape} vs target {d_tgt}, source {d_src}")
    if single_scale and n_prox != s:
        raise DimensionError(f"single-scale mapping needs one proxy per layer ({s}), got {n_prox}")
    if d_tgt % heads:
        raise ConfigError(f"target width {d_tgt} not divisible by {heads} heads")
    dh = d_tgt // heads
    x = target.reshape(s * m, d_tgt)
    qn = layer_norm(x, params["mapper.ln_q.gain"], params["mapper.ln_q.bias"])
    kvn = layer_norm(proxies, params["mapper.ln_kv.gain"], params["mapper.ln_kv.bias"])
    q = matmul(qn, params["mapper.w_q"]).reshape(s * m, heads, dh).swapaxes(0, 1)
    k = matmul(kvn, params["mapper.w_k"]).reshape(n_prox, heads, dh).swapaxes(0, 1)
    v = matmul(kvn, params["mapper.w_v"]).reshape(n_prox, heads, dh).swapaxes(0, 1)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    if single_scale:
        owner = np.repeat(np.arange(s), m)
        mask = np.where(owner[:, None] == np.arange(n_prox)[None, :], 0.0, -np.inf)
        scores = scores + mask
    ctx = matmul(softmax(scores), v).swapaxes(0, 1).reshape(s * m, d_tgt)
    x = x + matmul(ctx, params["mapper.w_o"])
    h = layer_norm(x, params["mapper.ln_ffn.gain"], params["mapper.ln_ffn.bias"])
    h = linear(gelu(linear(h, params["mapper.w_1"], params["mapper.b_1"])),
               params["mapper.w_2"], params["mapper.b_2"])
    return (x + h).reshape(s, m, d_tgt)


def materialize(stack: PromptStack, flow: FlowConfig | None = None) -> EffectivePrompts:
    """Per-layer prompts actually injected into each tower for one step."""
    if flow is not None and flow != stack.flow:
        raise ConfigError(f"flow {flow} does not match the stack's {stack.flow}")
    text = list(stack.text_prompts)
    visual = list(stack.visual_prompts)
    for seg in stack.segments.values():
        proxies = _compress_segment(stack, seg)
        tgt_list = text if seg.target == TEXT else visual
        targets = stack_layers([tgt_list[i] for i in seg.layers])
        mapped = map_prompts(targets, proxies, stack.modules[seg.name], stack.flow.mapper_heads,
                             single_scale=stack.flow.scale_for(seg.name) == "single")
        for j, i in enumerate(seg.layers):
            tgt_list[i] = mapped[j]
    return EffectivePrompts(text, visual)


def mapper_key_count(stack: PromptStack, segment: str) -> int:
    """Number of key tokens the mapper sees for ``segment``."""
    return len(build_proxies(stack, segment))


__all__ = [
    "COMPRESSIONS", "EffectivePrompts", "FlowConfig", "MAPPER_SCALES", "MECHANISMS", "PromptStack",
    "Segment", "build_proxies", "compress_layer", "default_boundary", "init_prompt_stack",
    "lkp_attention", "map_prompts", "mapper_key_count", "materialize", "segment_plan",
    "validate_boundary",
]
