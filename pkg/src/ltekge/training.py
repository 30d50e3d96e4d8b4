"""1-vs-all BCE training with label smoothing and Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, asdict
from typing import Callable

import numpy as np

from . import autograd as ag
from .decoders import DecoderSpec
from .encoders import EncoderSpec
from .exceptions import ConfigError, ContractError, NumericError
from .kg import (MessageGraph, TripleSet, build_message_graph, corrupt_adjacency_rat,
                 sample_neighbors, strip_neighbors_wni, strip_self_loops_wsi)
from .params import ParameterStore

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    """Every knob of a run.  Field names double as config-file keys."""

    dataset: str | None = None
    # model
    encoder: str = "identity"
    decoder: str = "distmult"
    dim: int = 200
    layers: int = 1
    nonlinearity: str = "tanh"
    composition: str = "subtract"
    ltr: bool = True
    basis_count: int | None = None
    compgcn_weights: str = "direction"
    normalize: bool = False
    g_chain: str = ""
    g_dropout: float = 0.2
    share_transform: bool = True
    lte_init: str = "random"
    freeze_transform: bool = False
    transe_margin: float = 0.0
    conve_reshape: str = ""
    conve_filters: int = 32
    conve_kernel: int = 3
    input_dropout: float = 0.2
    feature_dropout: float = 0.2
    hidden_dropout: float = 0.3
    conve_batchnorm: bool = True
    conve_entity_bias: bool = True
    # optimisation
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    label_smoothing: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"
    # graph ablations
    add_inverse: bool = True
    self_loops: bool = True
    rat: bool = False
    wni: bool = False
    wsi: bool = False
    sample_pool: int = 0
    graph_seed: int | None = None
    # evaluation
    eval_every: int = 0
    eval_batch_size: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.wni and self.sample_pool:
            raise ConfigError("wni and sample_pool contradict each other (no edges to resample)")
        if self.wni and self.rat:
            raise ConfigError("wni and rat contradict each other (no edges to corrupt)")
        if self.wni and self.wsi:
            raise ConfigError("wni and wsi together leave an entity no input at all")
        if self.rat and self.sample_pool:
            raise ConfigError("rat and sample_pool are alternative neighbor corruptions; pick one")
        if self.sample_pool < 0:
            raise ConfigError("sample_pool must be >= 0")
        ablations = self.rat or self.wni or self.wsi or self.sample_pool
        if ablations and self.encoder not in ("rgcn", "wgcn", "compgcn"):
            raise ConfigError(f"graph ablations need a GCN encoder, got {self.encoder!r}")
        self.encoder_spec()
        self.decoder_spec()

    # -- derived specs --------------------------------------------------------

    def encoder_spec(self) -> EncoderSpec:
        chain = tuple(g.strip() for g in self.g_chain.split(",") if g.strip()) \
            if isinstance(self.g_chain, str) else tuple(self.g_chain)
        return EncoderSpec(
            kind=self.encoder, layers=self.layers, nonlinearity=self.nonlinearity,
            composition=self.composition if self.encoder == "compgcn" else None,
            relation_transform=self.ltr, basis_count=self.basis_count,
            compgcn_weights=self.compgcn_weights, normalize=self.normalize,
            share_entity_transform=self.share_transform, g_chain=chain,
            g_dropout=self.g_dropout, lte_init=self.lte_init,
            freeze_transform=self.freeze_transform)

    def decoder_spec(self) -> DecoderSpec:
        reshape = None
        if self.decoder == "conve" and self.conve_reshape:
            reshape = tuple(int(v) for v in str(self.conve_reshape).lower().replace("x", ",").split(","))
        kwargs = {}
        if self.decoder == "conve":
            kwargs = dict(reshape=reshape, filters=self.conve_filters,
                          kernel_size=(self.conve_kernel, self.conve_kernel),
                          input_dropout=self.input_dropout, feature_dropout=self.feature_dropout,
                          hidden_dropout=self.hidden_dropout, use_batchnorm=self.conve_batchnorm,
                          entity_bias=self.conve_entity_bias)
        return DecoderSpec(kind=self.decoder, embedding_dim=self.dim,
                           transe_margin=self.transe_margin, **kwargs)

    @property
    def effective_graph_seed(self) -> int:
        return self.seed if self.graph_seed is None else self.graph_seed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key == "lr":
                key = "learning_rate"
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], raw)
        return cls(**kwargs)

    def updated(self, **overrides) -> "TrainConfig":
        values = self.to_dict()
        values.update(overrides)
        return TrainConfig.from_mapping(values)


def _coerce(f, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    annotation = str(f.type)
    if text.lower() in ("none", "null", "") and "None" in annotation:
        return None
    try:
        if annotation.startswith("bool"):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if annotation.startswith("int"):
            return int(text)
        if annotation.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {f.name} ({annotation})") from None
    return text


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        values[key] = value
    return values


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    with open(path, encoding="utf-8") as handle:
        values = parse_config_text(handle.read())
    values.update(overrides or {})
    return TrainConfig.from_mapping(values)


def build_graph(train: TripleSet, num_entities: int, num_relations: int,
                config: TrainConfig) -> MessageGraph:
    """Message graph with the configured ablations applied (RAT/sampling first, then WSI/WNI)."""
    g = build_message_graph(train, num_entities, num_relations,
                            add_inverse=config.add_inverse, self_loops=config.self_loops)
    seed = config.effective_graph_seed
    if config.rat:
        g = corrupt_adjacency_rat(g, seed)
    if config.sample_pool:
        g = sample_neighbors(g, config.sample_pool, seed, keep_self_loops=not config.wsi)
    if config.wsi:
        g = strip_self_loops_wsi(g)
    if config.wni:
        g = strip_neighbors_wni(g)
    return g.replace(seed=seed)


# ---------------------------------------------------------------------------
# loss


def smooth_labels(one_hot, epsilon: float):
    """``(1 - eps) * y + eps / |E|`` with ``|E|`` the size of the last axis."""
    y = np.asarray(one_hot)
    return (1.0 - epsilon) * y + epsilon / y.shape[-1]


def _check_labels(labels):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 1):
        raise ContractError("labels must lie in [0, 1]")


def bce_loss(probabilities, labels) -> float:
    """Mean binary cross entropy, probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    _check_labels(labels)
    p = np.clip(np.asarray(probabilities, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def bce_loss_variable(probabilities, labels):
    """Autograd version of :func:`bce_loss`."""
    _check_labels(labels)
    dtype = probabilities.dtype
    lo = dtype.type(PROB_CLAMP)
    hi = dtype.type(1.0) - lo
    p = ag.clip(probabilities, lo, hi)
    y = np.asarray(labels, dtype=dtype)
    ll = ag.log(p) * y + ag.log(ag.sub(dtype.type(1.0), p)) * (dtype.type(1.0) - y)
    return -ag.mean(ll)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with bias correction; zeroes gradient buffers after each step."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterStore):
        for name in params.names():
            g = params.grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in params.trainable():
            value, g = params.values[name], params.grads[name]
            dt = value.dtype.type
            if name not in self.m:
                self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            m, v = self.m[name], self.v[name]
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * (g * g)
            value -= dt(self.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
        params.zero_grad()


def optimizer_step(params: ParameterStore, optimizer: Adam):
    optimizer.step(params)
    return params


# ---------------------------------------------------------------------------
# training loop


@dataclass
class QuerySet:
    """Unique ``(head, relation)`` training queries with their answer sets."""

    heads: np.ndarray
    rels: np.ndarray
    answers: list

    def __len__(self):
        return len(self.heads)

    def labels(self, idx, num_entities, dtype=np.float32):
        y = np.zeros((len(idx), num_entities), dtype=dtype)
        for row, i in enumerate(idx):
            y[row, self.answers[i]] = 1
        return y


def build_queries(train: TripleSet, num_relations: int, inverse: bool = True) -> QuerySet:
    """Tail queries ``(h, r)`` plus, with ``inverse``, head queries ``(t, r + |R|)``."""
    answers: dict = {}
    for h, r, t in train:
        answers.setdefault((h, r), []).append(t)
        if inverse:
            answers.setdefault((t, r + num_relations), []).append(h)
    keys = sorted(answers)
    return QuerySet(np.array([k[0] for k in keys], dtype=np.int64).reshape(-1),
                    np.array([k[1] for k in keys], dtype=np.int64).reshape(-1),
                    [np.array(sorted(answers[k]), dtype=np.int64) for k in keys])


@dataclass
class LossReport:
    epoch: int
    loss: float
    grad_norm: float
    batch_losses: list = field(default_factory=list, repr=False)


def _batch_seed(seed, epoch, batch):
    return int(np.random.SeedSequence([int(seed), int(epoch), int(batch)]).generate_state(1)[0])


def train_epoch(model, queries: QuerySet, optimizer: Adam, config: TrainConfig,
                epoch: int = 0) -> LossReport:
    """One pass over shuffled query batches: encode, score all tails, BCE, Adam step."""
    n = model.num_entities
    dtype = model.params.dtype
    order = np.random.default_rng([config.seed, 977, epoch]).permutation(len(queries))
    losses, sq_norm = [], 0.0
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        idx = order[start:start + config.batch_size]
        seed = _batch_seed(config.seed, epoch, b)
        logits = model.logits(queries.heads[idx], queries.rels[idx], mode="train", seed=seed)
        labels = smooth_labels(queries.labels(idx, n, dtype), config.label_smoothing).astype(dtype)
        loss = bce_loss_variable(ag.sigmoid(logits), labels)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
        loss.backward()
        sq_norm = sum(float(np.sum(np.square(g, dtype=np.float64))) for g in model.params.grads.values())
        optimizer.step(model.params)
        losses.append(value)
    mean = float(np.mean(losses)) if losses else 0.0
    return LossReport(epoch, mean, float(np.sqrt(sq_norm)), losses)


def make_optimizer(config: TrainConfig) -> Adam:
    return Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)


def fit(model, train: TripleSet, config: TrainConfig, *, valid: TripleSet | None = None,
        filter_index=None, callback: Callable | None = None):
    """Train for ``config.epochs``; track the best validation MRR when ``eval_every`` > 0.

    Returns ``(history, best)`` where ``best`` is ``(mrr, epoch, state)`` or ``None``.
    """
    from .evaluation import evaluate_split

    queries = build_queries(train, model.num_relations)
    optimizer = make_optimizer(config)
    history, best = [], None
    for epoch in range(config.epochs):
        report = train_epoch(model, queries, optimizer, config, epoch)
        history.append(report)
        logger.info("epoch %d loss %.6f grad_norm %.4f", epoch, report.loss, report.grad_norm)
        if config.eval_every and valid is not None and len(valid) \
                and (epoch + 1) % config.eval_every == 0:
            metrics = evaluate_split(model, valid, filter_index, config.eval_batch_size)
            logger.info("epoch %d valid mrr %.4f", epoch, metrics.mrr)
            if best is None or metrics.mrr > best[0]:
                best = (metrics.mrr, epoch, {k: v.copy() for k, v in model.params.state().items()})
        if callback is not None:
            callback(epoch, report)
    return history, best
