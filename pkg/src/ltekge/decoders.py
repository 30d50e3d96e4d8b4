"""Triple scoring functions (TransE, DistMult, ConvE) and 1-vs-all scoring."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .exceptions import ConfigError, ShapeError
from .layers import LayerSpec, init_layer_params, layer_forward
from .params import ParameterStore

KINDS = ("transe_l1", "transe_l2", "distmult", "conve")


@dataclass(frozen=True)
class DecoderSpec:
    kind: str = "distmult"
    embedding_dim: int = 200
    # transe: the logistic mapping is applied to ``margin + score``
    transe_margin: float = 0.0
    # conve only
    reshape: tuple | None = None
    filters: int = 32
    kernel_size: tuple = (3, 3)
    input_dropout: float = 0.2
    feature_dropout: float = 0.2
    hidden_dropout: float = 0.3
    use_batchnorm: bool = True
    entity_bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown decoder {self.kind!r}; expected one of {KINDS}")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")
        if self.kind == "conve":
            shape = self.reshape or default_reshape(self.embedding_dim)
            shape = tuple(int(s) for s in shape)
            if len(shape) != 2 or shape[0] * shape[1] != self.embedding_dim:
                raise ConfigError(f"reshape {shape} does not factor embedding_dim {self.embedding_dim}")
            kh, kw = self.kernel_size
            if kh > 2 * shape[0] or kw > shape[1]:
                raise ConfigError(f"kernel {self.kernel_size} larger than stacked input {(2 * shape[0], shape[1])}")
            object.__setattr__(self, "reshape", shape)
            object.__setattr__(self, "kernel_size", tuple(int(k) for k in self.kernel_size))
            for rate in (self.input_dropout, self.feature_dropout, self.hidden_dropout):
                if not 0.0 <= rate < 1.0:
                    raise ConfigError(f"dropout rate {rate} outside [0, 1)")
        elif self.reshape is not None:
            raise ConfigError("reshape is only meaningful for conve")

    @property
    def norm(self):
        return {"transe_l1": "l1", "transe_l2": "l2"}.get(self.kind)

    def to_dict(self):
        return asdict(self)


def default_reshape(d):
    """Most square ``(h, w)`` with ``h * w == d`` and ``h <= w``; ``(10, 20)`` for 200."""
    if d == 200:
        return (10, 20)
    h = int(np.sqrt(d))
    while d % h:
        h -= 1
    return (h, d // h)


# ---------------------------------------------------------------------------
# single-triple scores (plain numpy)


def score_transe(h, r, t, norm="l1"):
    diff = np.asarray(h) + np.asarray(r) - np.asarray(t)
    if norm == "l1":
        return -np.abs(diff).sum(axis=-1)
    if norm == "l2":
        return -np.sqrt((diff * diff).sum(axis=-1))
    raise ConfigError(f"unknown norm {norm!r}")


def score_distmult(h, r, t):
    # h * t first: exact commutativity makes the score bitwise symmetric in h and t
    return ((np.asarray(h) * np.asarray(t)) * np.asarray(r)).sum(axis=-1)


# ---------------------------------------------------------------------------
# ConvE


class ConvE:
    """The ConvE feature extractor: ``(h, r) -> hidden`` with ``score = hidden . t``."""

    def __init__(self, spec: DecoderSpec, prefix: str = "conve"):
        self.spec = spec
        self.prefix = prefix
        d = spec.embedding_dim
        dh, dw = spec.reshape
        kh, kw = spec.kernel_size
        flat = spec.filters * (2 * dh - kh + 1) * (dw - kw + 1)
        p = prefix
        self.reshape_in = LayerSpec("reshape2d", shape=(1, dh, dw))
        self.stack = LayerSpec("concat", axis=2)
        self.bn0 = LayerSpec.batchnorm(f"{p}.bn0", 1)
        self.drop_in = LayerSpec("dropout", rate=spec.input_dropout)
        self.conv = LayerSpec.conv2d(f"{p}.conv", 1, spec.filters, spec.kernel_size)
        self.bn1 = LayerSpec.batchnorm(f"{p}.bn1", spec.filters)
        self.act = LayerSpec("relu")
        self.drop_feat = LayerSpec("dropout", rate=spec.feature_dropout)
        self.flatten = LayerSpec("reshape2d", shape=(flat,))
        self.fc = LayerSpec.linear(f"{p}.fc", flat, d)
        self.fc_bias = LayerSpec("bias", f"{p}.fc", features=d)
        self.drop_hidden = LayerSpec("dropout", rate=spec.hidden_dropout)
        self.bn2 = LayerSpec.batchnorm(f"{p}.bn2", d)

    def init_params(self, params: ParameterStore, rng_for):
        for spec in (self.conv, self.fc, self.fc_bias):
            init_layer_params(spec, params, rng_for(spec.name + "." + spec.kind))
        if self.spec.use_batchnorm:
            for spec in (self.bn0, self.bn1, self.bn2):
                init_layer_params(spec, params, rng_for(spec.name))

    def pipeline(self):
        """Layer sequence after stacking ``[r; h]``; ``None`` marks the stacking point."""
        bn = self.spec.use_batchnorm
        seq = [self.bn0] if bn else []
        seq += [self.drop_in, self.conv]
        seq += [self.bn1] if bn else []
        seq += [self.act, self.drop_feat, self.flatten, self.fc, self.fc_bias, self.drop_hidden]
        seq += [self.bn2] if bn else []
        seq += [self.act]
        return seq

    def hidden(self, h, r, params, mode="eval", seed=0):
        """Autograd path; ``h`` and ``r`` are ``(B, d)`` variables."""
        x = ag.apply_layer(self.stack, [ag.apply_layer(self.reshape_in, r, params),
                                        ag.apply_layer(self.reshape_in, h, params)], params)
        for i, spec in enumerate(self.pipeline()):
            x = ag.apply_layer(spec, x, params, mode, rng_seed=_layer_seed(seed, i))
        return x

    def hidden_numpy(self, h, r, params, mode="eval", seed=0, caches=None):
        h = np.atleast_2d(h)
        r = np.atleast_2d(r)
        rr, c_r = layer_forward(self.reshape_in, r, params)
        hh, c_h = layer_forward(self.reshape_in, h, params)
        x, c_s = layer_forward(self.stack, [rr, hh], params)
        if caches is not None:
            caches.extend([(self.reshape_in, c_r), (self.reshape_in, c_h), (self.stack, c_s)])
        for i, spec in enumerate(self.pipeline()):
            x, cache = layer_forward(spec, x, params, mode, rng_seed=_layer_seed(seed, i))
            if caches is not None:
                caches.append((spec, cache))
        return x


def _layer_seed(seed, i):
    return int(np.random.SeedSequence([int(seed), 7919, i]).generate_state(1)[0])


def score_conve(h, r, t, params, spec: DecoderSpec, mode="eval", seed=0, prefix="conve"):
    """Pre-sigmoid ConvE score ``hidden(h, r) . t`` (the entity bias is not included)."""
    hidden = ConvE(spec, prefix).hidden_numpy(h, r, params, mode, seed)
    return (hidden * np.atleast_2d(t)).sum(axis=-1)


# ---------------------------------------------------------------------------
# 1-vs-all scoring


@dataclass(frozen=True)
class ScoreVector:
    query: tuple
    scores: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise ShapeError(f"non-finite scores for query {self.query}")


def _l2_rows(diff):
    """Row L2 norm over the last axis with a zero gradient at zero distance."""
    d = ag._data(diff)
    y = np.sqrt((d * d).sum(axis=-1))

    def back(g):
        safe = np.where(y > 0, y, 1)
        return ((g / safe * (y > 0))[..., None] * d,)

    return ag._node(y, (diff,), back)


class Decoder:
    """Batched scoring of ``(head, relation)`` queries against every entity."""

    def __init__(self, spec: DecoderSpec, num_entities: int):
        self.spec = spec
        self.num_entities = num_entities
        self.conve = ConvE(spec) if spec.kind == "conve" else None

    def init_params(self, params: ParameterStore, rng_for):
        if self.conve is not None:
            self.conve.init_params(params, rng_for)
            if self.spec.entity_bias:
                params.add("conve.entity_bias", np.zeros(self.num_entities))

    def raw_scores(self, head, rel, tails, params, mode="eval", seed=0):
        """``(B, N)`` raw scores f(h, r, t) for every row of ``tails``."""
        kind = self.spec.kind
        if kind == "distmult":
            return ag.matmul(head * rel, ag.transpose(tails))
        if kind in ("transe_l1", "transe_l2"):
            b, d = head.shape
            n = tails.shape[0]
            diff = ag.reshape(head + rel, (b, 1, d)) - ag.reshape(tails, (1, n, d))
            if kind == "transe_l1":
                dist = ag.sum_(ag.abs_(diff), axis=2)
            else:
                dist = _l2_rows(diff)
            return -dist
        hidden = self.conve.hidden(head, rel, params, mode, seed)
        return ag.matmul(hidden, ag.transpose(tails))

    def logits(self, head, rel, tails, params, mode="eval", seed=0):
        """Scores mapped into logit space: TransE margin and the ConvE entity bias are added here."""
        out = self.raw_scores(head, rel, tails, params, mode, seed)
        if self.spec.kind.startswith("transe") and self.spec.transe_margin:
            out = out + out.dtype.type(self.spec.transe_margin)
        if self.conve is not None and self.spec.entity_bias:
            out = out + ag.reshape(params.variable("conve.entity_bias"), (1, -1))
        return out


def score_all_tails(head_id: int, rel_id: int, reps, spec: DecoderSpec,
                    params: ParameterStore | None = None) -> ScoreVector:
    """Raw scores of ``(head_id, rel_id, e)`` for every entity ``e``.

    ``reps`` is a :class:`~ltekge.encoders.Representations` (numpy tables).
    """
    heads = reps.head_table
    tails = reps.tail_table
    dec = Decoder(spec, tails.shape[0])
    out = dec.raw_scores(ag.constant(heads[[head_id]]), ag.constant(reps.relation_table[[rel_id]]),
                         ag.constant(tails), params, mode="eval")
    return ScoreVector((int(head_id), int(rel_id)), out.data[0])


def probability(logits):
    """Logistic map used before the BCE loss."""
    return ag.sigmoid(logits)
