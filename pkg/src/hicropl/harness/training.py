"""Backbone pretraining, prompt training and evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from ..encoders import DualEncoder, EncoderConfig, TokenSequence, tokenize
from ..errors import ConfigError, DomainError, NumericError, ProtocolError
from ..numcore import Adam, Tensor, backward, l2_normalize, log_softmax, no_grad
from ..objectives import (
    class_logits,
    consistency_loss,
    cross_entropy_logits,
    fill_template,
    teacher_image_embedding,
    teacher_text_embeddings,
    total_loss,
)
from ..promptflow import FlowConfig, PromptStack, init_prompt_stack, materialize
from .data import DatasetSpec, FewShotSet, LabeledImages, Task, generate_dataset, sample_few_shot

log = logging.getLogger(__name__)

SINGLE_TEMPLATE = "a photo of a {}"


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 0.0025
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0005
    epochs: int = 50
    batch_size: int = 32
    shots: int = 16
    consistency_weight: float = 12.0
    use_consistency: bool = True
    criterion: str = "cosine"
    teacher_prompts: str = "ensemble"
    boundary_k: int = 4
    prompt_depth: int = 8
    tau: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size", "shots", "prompt_depth", "tau"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.weight_decay < 0 or self.consistency_weight < 0:
            raise ConfigError("weight_decay and consistency_weight must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.criterion not in ("cosine", "l1", "mse"):
            raise ConfigError(f"unknown consistency criterion {self.criterion!r}")
        if self.teacher_prompts not in ("ensemble", "single"):
            raise ConfigError(f"teacher_prompts must be 'ensemble' or 'single', got {self.teacher_prompts!r}")


@dataclass(frozen=True)
class PretrainConfig:
    """Backbone pretraining settings.

    The pretraining corpus is drawn with its own seed and a black background,
    so the downstream task (gray background by default) is a shifted domain
    that the frozen zero-shot classifier handles imperfectly.
    """

    epochs: int = 40
    lr: float = 0.0003
    batch_size: int = 32
    tau: float = 0.05
    seed: int = 0
    data_seed_offset: int = 1000
    background: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size <= 0 or self.tau <= 0:
            raise ConfigError("pretrain epochs must be >= 0 and lr, batch_size, tau positive")


def pretraining_corpus(spec: DatasetSpec, pre: PretrainConfig | None = None) -> LabeledImages:
    """Captioned images for backbone pretraining, disjoint from the downstream draw."""
    pre = pre or PretrainConfig()
    return generate_dataset(replace(spec, seed=spec.seed + pre.data_seed_offset, background=pre.background))


@dataclass
class RunReport:
    base_acc: float
    novel_acc: float
    hm: float
    losses: list[tuple[float, float, float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    variant: str = "run"

    @classmethod
    def from_accuracies(cls, base: float, novel: float, **kw) -> "RunReport":
        hm = harmonic_mean(base, novel) if base > 0 and novel > 0 else 0.0
        return cls(base_acc=base, novel_acc=novel, hm=hm, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def harmonic_mean(base: float, novel: float) -> float:
    if base <= 0 or novel <= 0:
        raise DomainError(f"harmonic mean needs positive accuracies, got {base}, {novel}")
    return 2.0 * base * novel / (base + novel)


def percent(correct: int, total: int) -> float:
    return round(100.0 * correct / total, 2)


def templates_for(hp: Hyperparams, templates: Sequence[str]) -> list[str]:
    return [SINGLE_TEMPLATE] if hp.teacher_prompts == "single" else list(templates)


def class_tokens(names: Sequence[str], vocab: Mapping[str, int], cfg: EncoderConfig) -> list[TokenSequence]:
    return [tokenize(n, vocab, cfg.max_text_len) for n in names]


def effective_boundary(hp: Hyperparams, flow: FlowConfig, layers: int) -> int:
    """Boundary for the stack: proportional to prompt depth, pinned for unidirectional flow."""
    depth = hp.prompt_depth
    if depth > layers:
        raise ConfigError(f"prompt_depth {depth} exceeds encoder layers {layers}")
    if flow.mechanism == "unidir_TI":
        return depth
    if flow.mechanism == "unidir_IT":
        return 0
    k = hp.boundary_k
    if depth != layers:
        k = int(round(k * depth / layers))
    if flow.mechanism.startswith("bidir"):
        if depth < 2:
            raise ConfigError("bidirectional flow needs prompt depth >= 2")
        k = min(max(k, 1), depth - 1)
    return k


# -- pretraining ------------------------------------------------------------------

def pretrain_backbone(dataset: LabeledImages, epochs: int, seed: int, config: EncoderConfig,
                      vocab: Mapping[str, int], templates: Sequence[str],
                      pre: PretrainConfig | None = None) -> DualEncoder:
    """Train prompt-free towers with a symmetric image-caption contrastive loss.

    Captions come from randomly chosen templates; pairs of the same class are
    all treated as positives. The returned encoder is frozen.
    """
    pre = pre or PretrainConfig()
    enc = DualEncoder(config, seed=seed)
    if epochs > 0:
        rng = np.random.default_rng(seed + 1)
        opt = Adam(enc.parameters(), lr=pre.lr)
        names = dataset.class_names
        flat = enc.patchify(dataset.images)
        n = len(dataset)
        for epoch in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, pre.batch_size):
                idx = order[start:start + pre.batch_size]
                labels = dataset.labels[idx]
                caps = [tokenize(fill_template(templates[rng.integers(len(templates))], names[c]),
                                 vocab, config.max_text_len) for c in labels]
                patches = enc.embed_flat_patches(flat[idx])
                img = enc.encode_image(patches=patches)
                txt = enc.encode_text(caps)
                logits = class_logits(img, txt, pre.tau)
                same = (labels[:, None] == labels[None, :]).astype(float)
                target = same / same.sum(axis=1, keepdims=True)
                loss_i = -(log_softmax(logits) * target).sum(axis=1).mean()
                loss_t = -(log_softmax(logits.T) * target).sum(axis=1).mean()
                loss = (loss_i + loss_t) * 0.5
                if not np.isfinite(loss.item()):
                    raise NumericError(f"pretraining loss is non-finite at epoch {epoch}, batch {start}")
                opt.zero_grad()
                backward(loss)
                opt.step()
            log.debug("pretrain epoch %d loss %.4f", epoch, loss.item())
    return enc.freeze()


# -- prompt training ------------------------------------------------------------

@dataclass
class TrainState:
    """Frozen quantities reused by every step of one training run."""

    patches: Tensor
    labels: np.ndarray
    teacher_images: np.ndarray
    teacher_text: np.ndarray
    tokens: list[TokenSequence]


def prepare_state(backbone: DualEncoder, task: Task, shots: FewShotSet, vocab: Mapping[str, int],
                  templates: Sequence[str]) -> TrainState:
    images = task.dataset.images[shots.indices]
    patches = backbone.frozen_embed_patches(images)
    teacher_img = teacher_image_embedding(images, backbone)
    teacher_img = teacher_img / np.linalg.norm(teacher_img, axis=1, keepdims=True)
    teacher_txt = teacher_text_embeddings(task.base_classes, templates, backbone, vocab)
    return TrainState(patches, shots.labels, teacher_img, teacher_txt,
                      class_tokens(task.base_classes, vocab, backbone.config))


def step_losses(backbone: DualEncoder, stack: PromptStack, state: TrainState, idx: np.ndarray,
                hp: Hyperparams) -> tuple[Tensor, Tensor, Tensor]:
    """(ce, cons, total) for one minibatch; cons is detached when unused."""
    eff = materialize(stack)
    w_p = backbone.encode_text(state.tokens, eff.text)
    v_p = backbone.encode_image(patches=state.patches[idx], prompts=eff.visual)
    ce = cross_entropy_logits(class_logits(v_p, w_p, hp.tau), state.labels[idx])
    cons = consistency_loss(Tensor(state.teacher_images[idx]), l2_normalize(v_p),
                            Tensor(state.teacher_text), l2_normalize(w_p), hp.criterion)
    if hp.use_consistency:
        total = total_loss(ce, cons, hp.consistency_weight)
    else:
        cons = cons.detach()
        total = ce
    return ce, cons, total


def train(backbone: DualEncoder, stack: PromptStack, task: Task, shots: FewShotSet, hp: Hyperparams,
          vocab: Mapping[str, int], templates: Sequence[str]) -> list[tuple[float, float, float]]:
    """Optimize the prompt stack in place; returns per-epoch mean (ce, cons, total)."""
    if not backbone.frozen:
        raise ProtocolError("the backbone must be frozen before prompt training")
    base = set(task.base_classes)
    if any(task.dataset.class_names[c] not in base for c in task.dataset.labels[shots.indices]):
        raise ProtocolError("training set contains a non-base image")
    state = prepare_state(backbone, task, shots, vocab, templates_for(hp, templates))
    opt = Adam(stack.parameters(), lr=hp.lr, betas=(hp.beta1, hp.beta2), weight_decay=hp.weight_decay)
    rng = np.random.default_rng(hp.seed + 17)
    n = len(state.labels)
    history = []
    step = 0
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            ce, cons, total = step_losses(backbone, stack, state, idx, hp)
            values = (ce.item(), cons.item(), total.item())
            if not np.all(np.isfinite(values)):
                raise NumericError(f"NaN loss at epoch {epoch}, step {step} (ce={values[0]}, cons={values[1]})")
            opt.zero_grad()
            backward(total)
            opt.step()
            sums += values
            batches += 1
            step += 1
        history.append(tuple(float(v) for v in sums / batches))
        log.debug("epoch %d ce %.4f cons %.4f total %.4f", epoch, *history[-1])
    return history


def mean_ce(backbone: DualEncoder, stack: PromptStack, state: TrainState, hp: Hyperparams) -> float:
    with no_grad():
        ce, _, _ = step_losses(backbone, stack, state, np.arange(len(state.labels)), hp)
    return ce.item()


# -- evaluation -----------------------------------------------------------------

def predictions(backbone: DualEncoder, stack: PromptStack | None, images: np.ndarray,
                class_names: Sequence[str], vocab: Mapping[str, int], templates: Sequence[str],
                tau: float = 0.01) -> np.ndarray:
    """Argmax class index per image.

    Without a stack this is the zero-shot baseline: frozen image embeddings
    against the frozen template-ensemble table. With a stack, class names go
    through the prompted text tower and images through the prompted vision
    tower.
    """
    with no_grad():
        if stack is None:
            text = Tensor(teacher_text_embeddings(class_names, templates, backbone, vocab))
            img = backbone.encode_image(images)
        else:
            eff = materialize(stack)
            text = backbone.encode_text(class_tokens(class_names, vocab, backbone.config), eff.text)
            img = backbone.encode_image(images, eff.visual)
        logits = class_logits(img, text, tau)
    return logits.data.argmax(axis=1)


def evaluate(backbone: DualEncoder, stack: PromptStack | None, images: np.ndarray, labels: np.ndarray,
             class_names: Sequence[str], vocab: Mapping[str, int], templates: Sequence[str],
             tau: float = 0.01) -> float:
    """Top-1 accuracy in percent, rounded to two decimals."""
    if len(labels) == 0:
        raise ProtocolError("cannot evaluate an empty split")
    pred = predictions(backbone, stack, images, class_names, vocab, templates, tau)
    return percent(int((pred == np.asarray(labels)).sum()), len(labels))


def evaluate_task(backbone: DualEncoder, stack: PromptStack | None, task: Task, vocab, templates,
                  tau: float = 0.01) -> tuple[float, float]:
    accs = []
    for split in ("base", "novel"):
        images, labels, names = task.split_arrays(split)
        accs.append(evaluate(backbone, stack, images, labels, names, vocab, templates, tau))
    return accs[0], accs[1]


# -- one complete run -------------------------------------------------------------

def run_variant(backbone: DualEncoder, task: Task, flow: FlowConfig, hp: Hyperparams,
                vocab: Mapping[str, int], templates: Sequence[str], variant: str = "run",
                config: dict | None = None) -> tuple[PromptStack, RunReport]:
    """Sample K shots, train a fresh stack with ``hp.seed`` and score base and novel."""
    shots = sample_few_shot(task, hp.shots, hp.seed)
    k = effective_boundary(hp, flow, backbone.config.layers)
    stack = init_prompt_stack(backbone.config, k, hp.seed, flow, depth=hp.prompt_depth)
    history = train(backbone, stack, task, shots, hp, vocab, templates)
    base, novel = evaluate_task(backbone, stack, task, vocab, templates, hp.tau)
    report = RunReport.from_accuracies(base, novel, losses=history, config=dict(config or {}),
                                       seed=hp.seed, variant=variant)
    return stack, report
