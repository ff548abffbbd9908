"""Zero-shot prediction, training losses and frozen-teacher embeddings."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from .encoders import DualEncoder, tokenize
from .errors import ConfigError, DimensionError, NumericWarning, TemplateError
from .numcore import Tensor, as_tensor, cosine_similarity, l2_normalize, log_softmax, matmul, no_grad, softmax

CRITERIA = ("cosine", "l1", "mse")
PROB_FLOOR = 1e-12


@dataclass
class ClassEmbeddingTable:
    """Per-class frozen teacher rows and, for prompted runs, prompted rows."""

    class_names: list[str]
    frozen: np.ndarray
    prompted: Tensor | None = None

    def __post_init__(self):
        if len(self.class_names) != self.frozen.shape[0]:
            raise DimensionError("one frozen row per class is required")
        if not np.isfinite(self.frozen).all():
            raise ConfigError("class embedding table has non-finite rows")


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    cons: float
    total: float
    weight: float


def class_logits(image_emb, text_emb, tau: float = 0.01) -> Tensor:
    """Cosine similarities between every image and every class, divided by tau."""
    v = l2_normalize(as_tensor(image_emb))
    w = l2_normalize(as_tensor(text_emb))
    if v.shape[-1] != w.shape[-1]:
        raise DimensionError(f"embedding widths differ: {v.shape} vs {w.shape}")
    return matmul(v.reshape(-1, v.shape[-1]), w.T) * (1.0 / tau)


def predict(image_emb, text_emb, tau: float = 0.01) -> Tensor:
    """Class probabilities; a vector for one image, a matrix for a batch."""
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    single = as_tensor(image_emb).ndim == 1
    probs = softmax(class_logits(image_emb, text_emb, 1.0), temperature=tau)
    return probs[0] if single else probs


def ce_loss(probabilities, label) -> Tensor:
    """Negative log-probability of the label (mean over a batch).

    Probabilities below 1e-12 are clamped and a ``NumericWarning`` is issued.
    """
    p = as_tensor(probabilities)
    p2 = p.reshape(-1, p.shape[-1])
    labels = np.atleast_1d(np.asarray(label))
    if labels.min() < 0 or labels.max() >= p2.shape[1]:
        raise DimensionError(f"label out of range for {p2.shape[1]} classes")
    picked = p2[np.arange(len(labels)), labels]
    if (picked.data < PROB_FLOOR).any():
        warnings.warn("label probability clamped at 1e-12", NumericWarning, stacklevel=2)
        picked = picked + Tensor(np.maximum(PROB_FLOOR - picked.data, 0.0))
    return -(picked.log().mean())


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy computed stably from logits."""
    labels = np.asarray(labels)
    lp = log_softmax(logits)
    return -(lp[np.arange(len(labels)), labels].mean())


def consistency_loss(v_frozen, v_prompted, w_frozen, w_prompted, criterion: str = "cosine",
                     reduce: bool = True) -> Tensor:
    """Distance between frozen and prompted embeddings of both towers.

    The cosine criterion is ``2 - cos(V + Vp, Vp) - cos(W + Wp, Wp)``, averaged
    over rows when batches are given (``reduce=False`` keeps one value per row
    when image and text batches have equal length). ``l1`` and ``mse`` use mean
    absolute and mean squared differences between frozen and prompted
    embeddings instead.
    """
    v, vp, w, wp = (as_tensor(x) for x in (v_frozen, v_prompted, w_frozen, w_prompted))
    if v.shape != vp.shape or w.shape != wp.shape:
        raise DimensionError(f"frozen/prompted shapes differ: {v.shape}/{vp.shape}, {w.shape}/{wp.shape}")
    if criterion == "cosine":
        img = cosine_similarity(v + vp, vp)
        txt = cosine_similarity(w + wp, wp)
        if not reduce:
            if img.shape != txt.shape:
                raise DimensionError(f"per-row losses need equal row counts, got {img.shape} and {txt.shape}")
            return 2.0 - img - txt
        return 2.0 - img.mean() - txt.mean()
    if criterion == "l1":
        return (v - vp).abs().mean() + (w - wp).abs().mean()
    if criterion == "mse":
        return ((v - vp) ** 2).mean() + ((w - wp) ** 2).mean()
    raise ConfigError(f"unknown consistency criterion {criterion!r}; expected one of {CRITERIA}")


def total_loss(ce, cons, weight: float):
    """Combine the supervised and consistency terms.

    With plain floats this returns a ``LossBreakdown``; with tensors it returns
    the differentiable total.
    """
    if weight < 0:
        raise ConfigError(f"consistency weight must be non-negative, got {weight}")
    if isinstance(ce, Tensor) or isinstance(cons, Tensor):
        return ce + cons * weight
    ce, cons = float(ce), float(cons)
    return LossBreakdown(ce=ce, cons=cons, total=ce + weight * cons, weight=float(weight))


# -- teacher embeddings ---------------------------------------------------------

def load_templates(path=None) -> list[str]:
    """One template per line, ``{}`` marking the class-name slot."""
    if path is None:
        text = resources.files("hicropl.data").joinpath("templates.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    templates = [line.strip() for line in text.splitlines() if line.strip()]
    if not templates:
        raise TemplateError("template file is empty")
    return templates


def fill_template(template: str, class_name: str) -> str:
    if "{}" not in template:
        raise TemplateError(f"template {template!r} has no '{{}}' slot")
    try:
        return template.format(class_name)
    except (IndexError, KeyError, ValueError) as exc:
        raise TemplateError(f"cannot format template {template!r}: {exc}") from exc


def teacher_text_embeddings(class_names: Sequence[str], templates: Sequence[str],
                            frozen_encoder: DualEncoder, vocab: Mapping[str, int]) -> np.ndarray:
    """Per class, the L2-normalized mean of frozen encodings over all templates."""
    if not templates:
        raise TemplateError("at least one template is required")
    max_len = frozen_encoder.config.max_text_len
    rows = []
    with no_grad():
        for name in class_names:
            toks = [tokenize(fill_template(t, name), vocab, max_len) for t in templates]
            emb = frozen_encoder.encode_text(toks).data
            mean = emb.sum(axis=0) / len(templates)
            norm = np.linalg.norm(mean)
            if norm == 0:
                raise ConfigError(f"teacher embedding of {name!r} is zero")
            rows.append(mean / norm)
    return np.stack(rows)


def teacher_image_embedding(images, frozen_encoder: DualEncoder) -> np.ndarray:
    """Prompt-free image embedding(s) from the frozen encoder."""
    with no_grad():
        return frozen_encoder.encode_image(images, None).data.copy()


def build_table(class_names: Sequence[str], templates: Sequence[str], frozen_encoder: DualEncoder,
                vocab: Mapping[str, int]) -> ClassEmbeddingTable:
    return ClassEmbeddingTable(list(class_names),
                               teacher_text_embeddings(class_names, templates, frozen_encoder, vocab))
