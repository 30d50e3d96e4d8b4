"""Entity/relation encoders: identity, LTE and the RGCN/WGCN/CompGCN layers.

Every GCN layer follows the same aggregate/update scheme::

    m_e = sum over edge records of e  (message from the neighbor)
          + W_0 e                     (only if e keeps its self-loop)
    e'  = sigma(m_e)

and differs only in how a message is formed.  Edge records come from a
:class:`~ltekge.kg.MessageGraph`; aggregation is a scatter-add in edge-list
order so results are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag
from .exceptions import ConfigError, ParameterError, ShapeError
from .kg import IN, OUT, MessageGraph
from .layers import LayerSpec, init_layer_params
from .params import ParameterStore

KINDS = ("identity", "lte", "rgcn", "wgcn", "compgcn")
GCN_KINDS = ("rgcn", "wgcn", "compgcn")
COMPOSITIONS = ("subtract", "multiply", "circular_correlation")
G_FUNCTIONS = ("identity", "tanh", "relu", "sigmoid", "batchnorm", "dropout")


@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "identity"
    layers: int = 1
    nonlinearity: str = "tanh"
    composition: str | None = None
    relation_transform: bool = True
    basis_count: int | None = None
    compgcn_weights: str = "direction"
    normalize: bool = False
    # lte
    share_entity_transform: bool = True
    g_chain: tuple = ()
    g_dropout: float = 0.2
    lte_init: str = "random"
    freeze_transform: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown encoder {self.kind!r}; expected one of {KINDS}")
        if self.kind in GCN_KINDS and self.layers < 1:
            raise ConfigError(f"{self.kind} needs at least one layer, got {self.layers}")
        if self.nonlinearity not in ag.ACTIVATIONS:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.kind == "compgcn":
            comp = self.composition or "subtract"
            if comp not in COMPOSITIONS:
                raise ConfigError(f"unknown composition {comp!r}; expected one of {COMPOSITIONS}")
            object.__setattr__(self, "composition", comp)
            if self.compgcn_weights not in ("direction", "relation"):
                raise ConfigError("compgcn_weights must be 'direction' or 'relation'")
        elif self.composition is not None:
            raise ConfigError("composition is only valid for compgcn")
        chain = tuple(self.g_chain)
        for g in chain:
            if g not in G_FUNCTIONS:
                raise ConfigError(f"unknown g-function {g!r}; expected one of {G_FUNCTIONS}")
        object.__setattr__(self, "g_chain", chain)
        if self.lte_init not in ("random", "identity"):
            raise ConfigError("lte_init must be 'random' or 'identity'")
        if not 0.0 <= self.g_dropout < 1.0:
            raise ConfigError("g_dropout must be in [0, 1)")
        if self.basis_count is not None and self.basis_count < 0:
            raise ConfigError("basis_count must be >= 0 (0 means full per-relation matrices)")

    @property
    def uses_graph(self):
        return self.kind in GCN_KINDS

    def to_dict(self):
        out = asdict(self)
        out["g_chain"] = list(self.g_chain)
        return out


@dataclass
class Representations:
    """Encoder output.  ``head_table``/``tail_table`` differ only for LTE."""

    entity_table: object
    relation_table: object
    head_table: object = None
    tail_table: object = None

    def __post_init__(self):
        if self.head_table is None:
            self.head_table = self.entity_table
        if self.tail_table is None:
            self.tail_table = self.entity_table

    def numpy(self) -> "Representations":
        def d(x):
            return x.data if isinstance(x, ag.Variable) else x
        return Representations(d(self.entity_table), d(self.relation_table),
                               d(self.head_table), d(self.tail_table))


def _uniform(rng, shape, d):
    bound = 1.0 / np.sqrt(d)
    return rng.uniform(-bound, bound, shape)


class Encoder:
    """Builds and applies the encoder described by an :class:`EncoderSpec`."""

    def __init__(self, spec: EncoderSpec, num_entities: int, num_relations: int, dim: int):
        self.spec = spec
        self.num_entities = num_entities
        self.num_relations = num_relations  # includes inverse relations
        self.dim = dim
        b = spec.basis_count
        self.basis_count = min(num_relations, 100) if b is None else b
        self._g_layers = {}
        if spec.kind == "lte":
            for role in ("head", "tail"):
                self._g_layers[role] = self._g_specs(role)

    # -- parameters ---------------------------------------------------------

    def _g_specs(self, role):
        specs = []
        for i, g in enumerate(self.spec.g_chain):
            if g == "batchnorm":
                specs.append(LayerSpec.batchnorm(f"lte.g_{role}.{i}.bn", self.dim))
            elif g == "dropout":
                specs.append(LayerSpec("dropout", rate=self.spec.g_dropout))
            elif g != "identity":
                specs.append(LayerSpec(g))
        return specs

    def init_params(self, params: ParameterStore, rng_for):
        d, spec = self.dim, self.spec
        if spec.kind == "lte":
            roles = ("head",) if spec.share_entity_transform else ("head", "tail")
            for role in roles:
                name = f"lte.W_{role}.weight"
                if spec.lte_init == "identity":
                    value = np.eye(d)
                else:
                    value = _uniform(rng_for(name), (d, d), d)
                params.add(name, value, frozen=spec.freeze_transform)
                for ls in self._g_layers[role]:
                    if ls.kind == "batchnorm":
                        init_layer_params(ls, params, rng_for(ls.name))
            return
        for layer in range(spec.layers if spec.uses_graph else 0):
            p = f"enc.{layer}"
            params.add(f"{p}.W0", _uniform(rng_for(f"{p}.W0"), (d, d), d))
            if spec.kind == "rgcn" or (spec.kind == "compgcn" and spec.compgcn_weights == "relation"):
                self._init_relation_weights(params, rng_for, p)
            if spec.kind == "wgcn":
                params.add(f"{p}.W", _uniform(rng_for(f"{p}.W"), (d, d), d))
                params.add(f"{p}.alpha", np.ones(self.num_relations))
            if spec.kind == "compgcn":
                if spec.compgcn_weights == "direction":
                    params.add(f"{p}.W_in", _uniform(rng_for(f"{p}.W_in"), (d, d), d))
                    params.add(f"{p}.W_out", _uniform(rng_for(f"{p}.W_out"), (d, d), d))
                if spec.relation_transform:
                    params.add(f"{p}.W_rel", _uniform(rng_for(f"{p}.W_rel"), (d, d), d))

    def _init_relation_weights(self, params, rng_for, p):
        d, nb = self.dim, self.basis_count
        if nb == 0:
            params.add(f"{p}.W_r", _uniform(rng_for(f"{p}.W_r"), (self.num_relations, d, d), d))
        else:
            params.add(f"{p}.basis", _uniform(rng_for(f"{p}.basis"), (nb, d, d), d))
            params.add(f"{p}.coeff", _uniform(rng_for(f"{p}.coeff"), (self.num_relations, nb), nb))

    def relation_matrices(self, params: ParameterStore, layer: int) -> np.ndarray:
        """Dense ``(|R'|, d, d)`` per-relation weights of a layer (numpy)."""
        p = f"enc.{layer}"
        if f"{p}.W_r" in params:
            return params[f"{p}.W_r"].copy()
        if f"{p}.basis" not in params:
            raise ParameterError(f"layer {layer} has no relation-specific weights")
        return np.einsum("rb,bij->rij", params[f"{p}.coeff"], params[f"{p}.basis"])

    # -- forward ----------------------------------------------------------------

    def __call__(self, params: ParameterStore, graph: MessageGraph | None = None,
                 mode: str = "eval", seed: int = 0, entity=None, relation=None) -> Representations:
        """Encode; ``entity``/``relation`` default to the embedding tables."""
        if entity is None:
            entity = params.variable("entity")
        if relation is None:
            relation = params.variable("relation")
        kind = self.spec.kind
        if kind == "identity":
            return encode_identity(entity, relation)
        if kind == "lte":
            return self.encode_lte(params, entity, relation, mode, seed)
        return self.encode_stack(graph, params, entity, relation)

    def encode_lte(self, params, entity, relation, mode="eval", seed=0):
        head = self._transform("head", params, entity, mode, seed)
        if self.spec.share_entity_transform:
            tail = head
        else:
            tail = self._transform("tail", params, entity, mode, seed + 1)
        return Representations(entity, relation, head, tail)

    def _transform(self, role, params, entity, mode, seed):
        linear = LayerSpec.linear(f"lte.W_{role}", self.dim, self.dim)
        w = params[linear.param("weight")]
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ShapeError(f"{linear.param('weight')} must be square, got {w.shape}")
        x = ag.apply_layer(linear, entity, params)
        for i, ls in enumerate(self._g_layers[role]):
            x = ag.apply_layer(ls, x, params, mode, rng_seed=_mix(seed, 101 + i))
        return x

    def encode_stack(self, graph, params, entity, relation):
        if graph is None:
            raise ConfigError(f"{self.spec.kind} encoder needs a message graph")
        if graph.num_entities != self.num_entities:
            raise ShapeError(f"graph has {graph.num_entities} entities, encoder expects {self.num_entities}")
        if len(graph.rel) and graph.rel.max() >= self.num_relations:
            raise ShapeError("graph relation ids exceed the relation table")
        reps = Representations(entity, relation)
        for layer in range(self.spec.layers):
            reps = self.layer(layer, graph, reps, params)
        return reps

    def layer(self, layer: int, graph: MessageGraph, reps: Representations,
              params: ParameterStore) -> Representations:
        kind = self.spec.kind
        if kind == "rgcn":
            return encode_rgcn_layer(graph, reps, params, layer, self.spec, self.num_relations)
        if kind == "wgcn":
            return encode_wgcn_layer(graph, reps, params, layer, self.spec)
        if kind == "compgcn":
            return encode_compgcn_layer(graph, reps, params, layer, self.spec, self.num_relations)
        raise ConfigError(f"{kind} has no GCN layers")


def _mix(seed, salt):
    return int(np.random.SeedSequence([int(seed), int(salt)]).generate_state(1)[0])


def encode_identity(entity, relation) -> Representations:
    return Representations(entity, relation)


def _self_term(graph, params, p, x):
    """``W_0 e`` masked by the self-loop flags."""
    out = ag.matmul(x, ag.transpose(params.variable(f"{p}.W0")))
    if graph.self_loops.all():
        return out
    return out * graph.self_loops.astype(x.dtype)[:, None]


def _normalizer(graph, dtype, mask=None):
    src = graph.src if mask is None else graph.src[mask]
    deg = np.bincount(src, minlength=graph.num_entities).astype(dtype)
    return (1.0 / np.maximum(deg, 1)).astype(dtype)[:, None]


def _activate(spec, m):
    return ag.ACTIVATIONS[spec.nonlinearity](m)


def _relation_messages(params, p, rel, neighbor, num_relations):
    """``W_rel(e) x_e`` per edge, from full matrices or a basis decomposition."""
    if f"{p}.W_r" in params:
        w = ag.take(params.variable(f"{p}.W_r"), rel)
        return ag.einsum("eij,ej->ei", w, neighbor)
    basis = params.variable(f"{p}.basis")
    proj = ag.einsum("ej,bij->ebi", neighbor, basis)
    return ag.einsum("eb,ebi->ei", ag.take(params.variable(f"{p}.coeff"), rel), proj)


def encode_rgcn_layer(graph, reps, params, layer=0, spec=None, num_relations=None):
    spec = spec or EncoderSpec("rgcn")
    p = f"enc.{layer}"
    if f"{p}.W_r" not in params and f"{p}.basis" not in params:
        raise ParameterError(f"missing relation weights W_r for RGCN layer {layer}")
    x = reps.entity_table
    n = graph.num_entities
    m = _self_term(graph, params, p, x)
    if graph.num_edges:
        msgs = _relation_messages(params, p, graph.rel, ag.take(x, graph.dst), num_relations)
        agg = ag.segment_sum(msgs, graph.src, n)
        if spec.normalize:
            agg = agg * _normalizer(graph, x.dtype)
        m = m + agg
    return Representations(_activate(spec, m), reps.relation_table)


def encode_wgcn_layer(graph, reps, params, layer=0, spec=None):
    spec = spec or EncoderSpec("wgcn")
    p = f"enc.{layer}"
    x = reps.entity_table
    m = _self_term(graph, params, p, x)
    if graph.num_edges:
        alpha = ag.reshape(ag.take(params.variable(f"{p}.alpha"), graph.rel), (-1, 1))
        weighted = alpha * ag.take(x, graph.dst)
        agg = ag.segment_sum(weighted, graph.src, graph.num_entities)
        if spec.normalize:
            agg = agg * _normalizer(graph, x.dtype)
        m = m + ag.matmul(agg, ag.transpose(params.variable(f"{p}.W")))
    return Representations(_activate(spec, m), reps.relation_table)


def compose(kind, x, r):
    if kind == "subtract":
        return x - r
    if kind == "multiply":
        return x * r
    if kind == "circular_correlation":
        return ag.circular_correlation(x, r)
    raise ConfigError(f"unknown composition {kind!r}")


def encode_compgcn_layer(graph, reps, params, layer=0, spec=None, num_relations=None):
    spec = spec or EncoderSpec("compgcn")
    p = f"enc.{layer}"
    x, rel = reps.entity_table, reps.relation_table
    n = graph.num_entities
    m = _self_term(graph, params, p, x)
    if graph.num_edges:
        phi = compose(spec.composition, ag.take(x, graph.dst), ag.take(rel, graph.rel))
        if spec.compgcn_weights == "relation":
            agg = ag.segment_sum(_relation_messages(params, p, graph.rel, phi, num_relations),
                                 graph.src, n)
            if spec.normalize:
                agg = agg * _normalizer(graph, x.dtype)
            m = m + agg
        else:
            for direction, wname in ((IN, "W_in"), (OUT, "W_out")):
                mask = graph.direction == direction
                if not mask.any():
                    continue
                idx = np.flatnonzero(mask)
                agg = ag.segment_sum(ag.take(phi, idx), graph.src[idx], n)
                if spec.normalize:
                    agg = agg * _normalizer(graph, x.dtype, mask)
                m = m + ag.matmul(agg, ag.transpose(params.variable(f"{p}.{wname}")))
    if spec.relation_transform:
        rel = ag.matmul(rel, ag.transpose(params.variable(f"{p}.W_rel")))
    return Representations(_activate(spec, m), rel)


def encode_lte(params, spec: EncoderSpec, dim: int, mode="eval", seed=0) -> Representations:
    enc = Encoder(spec, params["entity"].shape[0], params["relation"].shape[0], dim)
    return enc.encode_lte(params, params.variable("entity"), params.variable("relation"), mode, seed)


def encode_stack(graph, params, spec: EncoderSpec, dim: int) -> Representations:
    enc = Encoder(spec, graph.num_entities, params["relation"].shape[0], dim)
    return enc.encode_stack(graph, params, params.variable("entity"), params.variable("relation"))
