"""Miniature CLIP-style dual encoders with deep prompt slots.

Both towers are pre-LN transformers without attention masks. When per-layer
prompts are supplied, the first ``prompt_len`` positions of the hidden
sequence are overwritten with that layer's prompts right before the block
runs, so the sequence length never changes across layers.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, VocabularyError
from .numcore import Tensor, concat, gelu, layer_norm, linear, matmul, no_grad, parameter, softmax

PAD, EOS = "pad", "eos"


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 8
    heads: int = 2
    text_width: int = 32
    vision_width: int = 48
    embed_dim: int = 32
    vocab_size: int = 40
    max_text_len: int = 8
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    prompt_len: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.text_width % self.heads or self.vision_width % self.heads:
            raise ConfigError(f"widths ({self.text_width}, {self.vision_width}) must divide by heads={self.heads}")
        if self.layers < 1 or self.prompt_len < 1 or self.max_text_len < 1:
            raise ConfigError("layers, prompt_len and max_text_len must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    eos_position: int


# -- vocabulary ---------------------------------------------------------------

def load_vocab(path=None) -> dict[str, int]:
    """Read a ``word<TAB>id`` file; defaults to the packaged toy vocabulary."""
    if path is None:
        text = resources.files("hicropl.data").joinpath("vocab.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    vocab: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            word, idx = line.split("\t")
            vocab[word] = int(idx)
        except ValueError as exc:
            raise VocabularyError(f"malformed vocabulary line {lineno}: {line!r}") from exc
    for special in (PAD, EOS):
        if special not in vocab:
            raise VocabularyError(f"vocabulary lacks the {special!r} token")
    return vocab


def save_vocab(vocab: Mapping[str, int], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, idx in sorted(vocab.items(), key=lambda kv: kv[1]):
            fh.write(f"{word}\t{idx}\n")


def tokenize(text: str, vocab: Mapping[str, int], max_text_len: int = 8) -> TokenSequence:
    words = text.split()
    ids = []
    for w in words:
        if w not in vocab:
            raise VocabularyError(f"out-of-vocabulary word: {w!r}")
        ids.append(vocab[w])
    if len(ids) + 1 > max_text_len:
        raise DimensionError(f"{text!r} needs {len(ids) + 1} positions, max_text_len is {max_text_len}")
    eos = len(ids)
    ids.append(vocab[EOS])
    ids.extend([vocab[PAD]] * (max_text_len - len(ids)))
    return TokenSequence(tuple(ids), eos)


def _batch_tokens(tokens) -> tuple[np.ndarray, np.ndarray, bool]:
    if isinstance(tokens, TokenSequence):
        return np.array([tokens.ids]), np.array([tokens.eos_position]), True
    ids = np.array([t.ids for t in tokens])
    eos = np.array([t.eos_position for t in tokens])
    return ids, eos, False


# -- transformer pieces ---------------------------------------------------------

def _normal(rng: np.random.Generator, *shape: int, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def _init_block(rng: np.random.Generator, d: int, mlp_ratio: int, prefix: str) -> dict[str, Tensor]:
    h = d * mlp_ratio
    raw = {
        "ln1.gain": np.ones(d), "ln1.bias": np.zeros(d),
        "attn.w_qkv": _normal(rng, d, 3 * d), "attn.b_qkv": np.zeros(3 * d),
        "attn.w_out": _normal(rng, d, d), "attn.b_out": np.zeros(d),
        "ln2.gain": np.ones(d), "ln2.bias": np.zeros(d),
        "mlp.w_fc": _normal(rng, d, h), "mlp.b_fc": np.zeros(h),
        "mlp.w_proj": _normal(rng, h, d), "mlp.b_proj": np.zeros(d),
    }
    return {f"{prefix}.{k}": parameter(v, name=f"{prefix}.{k}") for k, v in raw.items()}


def self_attention(x: Tensor, w_qkv: Tensor, b_qkv: Tensor, w_out: Tensor, b_out: Tensor,
                   heads: int) -> Tensor:
    """Unmasked multi-head self-attention over a (batch, seq, width) tensor."""
    b, s, d = x.shape
    dh = d // heads
    qkv = linear(x, w_qkv, b_qkv).reshape(b, s, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = softmax(matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)))
    ctx = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, s, d)
    return linear(ctx, w_out, b_out)


def transformer_block(x: Tensor, p: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    h = layer_norm(x, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"])
    x = x + self_attention(h, p[f"{prefix}.attn.w_qkv"], p[f"{prefix}.attn.b_qkv"],
                           p[f"{prefix}.attn.w_out"], p[f"{prefix}.attn.b_out"], heads)
    h = layer_norm(x, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"])
    h = gelu(linear(h, p[f"{prefix}.mlp.w_fc"], p[f"{prefix}.mlp.b_fc"]))
    return x + linear(h, p[f"{prefix}.mlp.w_proj"], p[f"{prefix}.mlp.b_proj"])


def run_prompted_blocks(x: Tensor, params: Mapping[str, Tensor], tower: str, cfg: EncoderConfig,
                        prompts: Sequence[Tensor | None] | None, width: int) -> Tensor:
    """Apply every block of ``tower`` with deep-prompt replacement.

    ``prompts[l]`` (shape prompt_len x width) replaces the prompt slots before
    block ``l``; a ``None`` entry after the first layer keeps whatever the
    previous block produced in those slots.
    """
    m = cfg.prompt_len
    batch = x.shape[0]
    if prompts is not None:
        if len(prompts) > cfg.layers:
            raise DimensionError(f"{len(prompts)} prompt layers for a {cfg.layers}-layer {tower} tower")
        if not prompts or prompts[0] is None:
            raise DimensionError(f"{tower} prompts must start at layer 1")
    for layer in range(cfg.layers):
        p = prompts[layer] if prompts is not None and layer < len(prompts) else None
        if p is not None:
            if p.shape != (m, width):
                raise DimensionError(f"{tower} prompt at layer {layer + 1} has shape {p.shape}, "
                                     f"expected {(m, width)}")
            slots = p.reshape(1, m, width).broadcast_to((batch, m, width))
            x = concat([slots, x if layer == 0 else x[:, m:]], axis=1)
        x = transformer_block(x, params, f"{tower}.blocks.{layer}", cfg.heads)
    return x


# -- dual encoder -------------------------------------------------------------

class DualEncoder:
    """Text and vision towers projecting into a shared embedding space."""

    def __init__(self, config: EncoderConfig | None = None, seed: int = 0):
        self.config = cfg = config or EncoderConfig()
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}

        def add(name, value):
            p[name] = parameter(value, name=name)

        add("text.token_embedding", _normal(rng, cfg.vocab_size, cfg.text_width))
        add("text.pos_embedding", _normal(rng, cfg.max_text_len, cfg.text_width))
        for layer in range(cfg.layers):
            p.update(_init_block(rng, cfg.text_width, cfg.mlp_ratio, f"text.blocks.{layer}"))
        add("text.ln_final.gain", np.ones(cfg.text_width))
        add("text.ln_final.bias", np.zeros(cfg.text_width))
        add("text.projection", _normal(rng, cfg.text_width, cfg.embed_dim))

        patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
        add("vision.patch_proj", _normal(rng, patch_dim, cfg.vision_width))
        add("vision.class_embedding", _normal(rng, cfg.vision_width))
        add("vision.pos_embedding", _normal(rng, cfg.num_patches + 1, cfg.vision_width))
        for layer in range(cfg.layers):
            p.update(_init_block(rng, cfg.vision_width, cfg.mlp_ratio, f"vision.blocks.{layer}"))
        add("vision.ln_post.gain", np.ones(cfg.vision_width))
        add("vision.ln_post.bias", np.zeros(cfg.vision_width))
        add("vision.projection", _normal(rng, cfg.vision_width, cfg.embed_dim))
        self.params = p

    # parameters ---------------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "DualEncoder":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def with_prompt_len(self, prompt_len: int) -> "DualEncoder":
        """A view sharing these weights but expecting ``prompt_len`` prompt slots."""
        view = object.__new__(DualEncoder)
        view.config = replace(self.config, prompt_len=prompt_len)
        view.params = self.params
        return view

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.params.values())

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
        extra = set(state) - set(self.params)
        if extra:
            raise ConfigError(f"checkpoint has unknown parameters: {sorted(extra)[:3]}")
        for name, t in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.copy()

    # text tower -----------------------------------------------------------------
    def encode_text(self, tokens, prompts: Sequence[Tensor | None] | None = None) -> Tensor:
        """Embed one TokenSequence (returns a vector) or a sequence of them (a matrix)."""
        cfg, p = self.config, self.params
        ids, eos, single = _batch_tokens(tokens)
        if ids.shape[1] != cfg.max_text_len:
            raise DimensionError(f"token length {ids.shape[1]} != max_text_len {cfg.max_text_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise VocabularyError("token id outside the vocabulary range")
        x = p["text.token_embedding"][ids] + p["text.pos_embedding"]
        x = run_prompted_blocks(x, p, "text", cfg, prompts, cfg.text_width)
        offset = 0 if prompts is None else cfg.prompt_len
        pooled = x[np.arange(len(ids)), eos + offset]
        pooled = layer_norm(pooled, p["text.ln_final.gain"], p["text.ln_final.bias"])
        out = matmul(pooled, p["text.projection"])
        return out[0] if single else out

    # vision tower ---------------------------------------------------------------
    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W, C) -> (B, n, patch*patch*C), row-major over the patch grid."""
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        b, hgt, wid, ch = images.shape
        if hgt != cfg.image_size or wid != cfg.image_size or ch != cfg.channels:
            raise DimensionError(f"image shape {(hgt, wid, ch)} != "
                                 f"{(cfg.image_size, cfg.image_size, cfg.channels)}")
        g, ps = cfg.image_size // cfg.patch_size, cfg.patch_size
        x = images.reshape(b, g, ps, g, ps, ch).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, ps * ps * ch)

    def embed_patches(self, images) -> Tensor:
        """Class token plus patch projections, with positional embeddings added.

        A single H x W x C image yields an (n+1, width) matrix; a batch yields
        (B, n+1, width).
        """
        single = np.asarray(images).ndim == 3
        out = self.embed_flat_patches(self.patchify(images))
        return out[0] if single else out

    def embed_flat_patches(self, flat: np.ndarray) -> Tensor:
        """Embed already-patchified pixels of shape (B, n, patch*patch*C)."""
        p = self.params
        tokens = matmul(Tensor(flat), p["vision.patch_proj"])
        cls = p["vision.class_embedding"].reshape(1, 1, -1).broadcast_to(
            (flat.shape[0], 1, self.config.vision_width))
        return concat([cls, tokens], axis=1) + p["vision.pos_embedding"]

    def encode_image(self, images=None, prompts: Sequence[Tensor | None] | None = None, *,
                     patches: Tensor | None = None) -> Tensor:
        """Final class-token state projected to the joint space.

        Pass raw images (H x W x C or a batch) or a precomputed patch embedding.
        """
        cfg, p = self.config, self.params
        if patches is None:
            patches = self.embed_patches(images)
        single = patches.ndim == 2
        x = patches.reshape(1, *patches.shape) if single else patches
        if x.shape[1:] != (cfg.num_patches + 1, cfg.vision_width):
            raise DimensionError(f"patch embedding shape {x.shape[1:]} != "
                                 f"{(cfg.num_patches + 1, cfg.vision_width)}")
        x = run_prompted_blocks(x, p, "vision", cfg, prompts, cfg.vision_width)
        cls_pos = 0 if prompts is None else cfg.prompt_len
        pooled = layer_norm(x[:, cls_pos], p["vision.ln_post.gain"], p["vision.ln_post.bias"])
        out = matmul(pooled, p["vision.projection"])
        return out[0] if single else out

    def frozen_embed_patches(self, images) -> Tensor:
        with no_grad():
            return Tensor(self.embed_patches(images).data)
