"""Closed-form gradients of log-scores of linearly transformed KGE models.

For a center entity ``h`` with neighbors ``(r, t)`` the objective is
``sum log s(Wh, r, Wt)`` where ``s`` is the TransE distance, the DistMult
score or the ConvE score.  The functions below give the gradient of one
term with respect to ``h``; :func:`certify` checks them against 64-bit
central finite differences and against reverse-mode backprop, and
:func:`decompose_neighborhood_gradient` checks that the neighborhood
gradient is the sum of the per-neighbor terms.

All computations run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .decoders import ConvE, DecoderSpec
from .exceptions import ConfigError, DomainError, SingularityError
from .layers import LayerSpec, layer_backward, layer_forward
from .params import ParameterStore

FORMULAS = ("transe_l1", "transe_l2", "distmult", "conve")
TOLERANCES = {"transe_l1": 1e-6, "transe_l2": 1e-6, "distmult": 1e-6, "conve": 1e-5}
BACKPROP_TOLERANCES = {"transe_l1": 1e-8, "transe_l2": 1e-8, "distmult": 1e-8, "conve": 1e-6}


def _f64(*arrays):
    return [np.asarray(a, dtype=np.float64) for a in arrays]


def kink_indicator(x, y):
    """``I(x, y)``: -1 where ``x_i < y_i``, otherwise 1."""
    return np.where(x < y, -1.0, 1.0)


def analytic_grad_transe_l1(h, r, t, W):
    """Gradient of ``log ||Wh + r - Wt||_1`` with respect to ``h``."""
    h, r, t, W = _f64(h, r, t, W)
    wh, wt = W @ h, W @ t
    dist = np.abs(wh + r - wt).sum()
    if dist == 0:
        raise SingularityError("L1 distance is zero; log-distance gradient undefined")
    return W.T @ kink_indicator(wh, wt - r) / dist


def analytic_grad_transe_l2(h, r, t, W):
    """Gradient of ``log ||Wh + r - Wt||_2`` with respect to ``h``."""
    h, r, t, W = _f64(h, r, t, W)
    wh, wt = W @ h, W @ t
    sq = float(np.sum((wh + r - wt) ** 2))
    if sq == 0:
        raise SingularityError("L2 distance is zero; log-distance gradient undefined")
    return -(W.T @ wt) / sq + W.T @ (r + wh) / sq


def analytic_grad_distmult(h, r, t, W):
    """Gradient of ``log (Wh)^T diag(r) (Wt)`` with respect to ``h``."""
    h, r, t, W = _f64(h, r, t, W)
    wt = W @ t
    score = float((W @ h) @ (r * wt))
    if score <= 0:
        raise DomainError(f"DistMult score {score} is not positive; log undefined")
    return W.T @ (r * wt) / score


def distmult_neighbor_matrix(r, W, score):
    """The matrix ``W^T R / score`` that maps ``Wt`` to the per-neighbor gradient."""
    r, W = _f64(r, W)
    return (W.T * r[None, :]) / score


@dataclass
class ConvEProbe:
    """ConvE weights and hyperparameters shared by the certification routines."""

    spec: DecoderSpec
    params: ParameterStore

    @classmethod
    def random(cls, dim=8, reshape=(2, 4), filters=3, kernel=(2, 2), seed=0,
               batchnorm=True, zero_conv=False):
        spec = DecoderSpec("conve", embedding_dim=dim, reshape=reshape, filters=filters,
                           kernel_size=kernel, use_batchnorm=batchnorm)
        params = ParameterStore(np.float64)
        rng = np.random.default_rng(seed)
        conve = ConvE(spec)
        conve.init_params(params, lambda name: np.random.default_rng([seed, len(name), sum(map(ord, name))]))
        for name, value in params.values.items():
            value[...] = rng.normal(0.0, 0.5, value.shape)
            if name.endswith("bn0.weight") or name.endswith("bn1.weight") or name.endswith("bn2.weight"):
                value[...] = rng.uniform(0.5, 1.5, value.shape)
        for name, value in params.buffers.items():
            if name.endswith("running_var"):
                value[...] = rng.uniform(0.5, 2.0, value.shape)
            else:
                value[...] = rng.normal(0.0, 0.3, value.shape)
        if zero_conv:
            params[conve.conv.param("weight")][...] = 0.0
        return cls(spec, params)


def conve_score(h, r, t, W, probe: ConvEProbe):
    """``g = hidden([r; Wh]) . (Wt)`` in eval mode."""
    h, r, t, W = _f64(h, r, t, W)
    hidden = ConvE(probe.spec).hidden_numpy(W @ h, r, probe.params, "eval")[0]
    return float(hidden @ (W @ t))


def analytic_grad_conve(h, r, t, W, probe: ConvEProbe):
    """Gradient of ``log g`` with respect to ``h``, by chaining layer backward passes.

    The forward pass is the ConvE pipeline applied to ``Wh``; the upstream
    gradient at the hidden layer is ``Wt / g``.
    """
    h, r, t, W = _f64(h, r, t, W)
    d = h.shape[0]
    scratch = probe.params.copy()
    scratch.add("lte.W.weight", W)
    lin = LayerSpec.linear("lte.W", d, d)
    wh, lin_cache = layer_forward(lin, h[None, :], scratch)
    wt = W @ t
    caches = []
    hidden = ConvE(probe.spec).hidden_numpy(wh, r[None, :], scratch, "eval", caches=caches)
    g = float(hidden[0] @ wt)
    if g <= 0:
        raise DomainError(f"ConvE score {g} is not positive; log undefined")
    upstream = (wt / g)[None, :]
    # caches: reshape(r), reshape(h), stack, then the pipeline
    (rs_spec, r_cache), (hs_spec, h_cache), (stack_spec, stack_cache) = caches[:3]
    for spec, cache in reversed(caches[3:]):
        upstream = layer_backward(spec, cache, upstream)
    _, h_part = layer_backward(stack_spec, stack_cache, upstream)
    h_flat = layer_backward(hs_spec, h_cache, h_part)
    return layer_backward(lin, lin_cache, h_flat)[0]


# ---------------------------------------------------------------------------
# reference log-scores (used by the finite-difference and backprop oracles)


def log_score(kind, h, r, t, W, probe=None):
    h, r, t, W = _f64(h, r, t, W)
    diff = W @ h + r - W @ t
    if kind == "transe_l1":
        return float(np.log(np.abs(diff).sum()))
    if kind == "transe_l2":
        return float(np.log(np.sqrt(np.sum(diff * diff))))
    if kind == "distmult":
        return float(np.log((W @ h) @ (r * (W @ t))))
    if kind == "conve":
        return float(np.log(conve_score(h, r, t, W, probe)))
    raise ConfigError(f"unknown formula {kind!r}")


def _log_score_variable(kind, hv, r, t, W, probe=None):
    """Autograd graph of ``log s`` for one neighbor, as a function of ``hv``."""
    Wc = ag.constant(W)
    wh = ag.matmul(ag.reshape(hv, (1, -1)), ag.transpose(Wc))
    wt = (W @ t)[None, :]
    if kind in ("transe_l1", "transe_l2"):
        diff = wh + r[None, :] - wt
        if kind == "transe_l1":
            dist = ag.sum_(ag.abs_(diff))
        else:
            dist = ag.sqrt(ag.sum_(diff * diff))
        return ag.log(dist)
    if kind == "distmult":
        return ag.log(ag.sum_(wh * (r * wt)[0]))
    if kind == "conve":
        hidden = ConvE(probe.spec).hidden(wh, ag.constant(r[None, :]), probe.params, "eval")
        return ag.log(ag.sum_(hidden * wt))
    raise ConfigError(f"unknown formula {kind!r}")


def backprop_grad(kind, h, r, t, W, probe=None):
    """Reverse-mode gradient of the log-score with respect to ``h``."""
    h, r, t, W = _f64(h, r, t, W)
    params = probe.params.copy() if probe is not None else None
    if probe is not None:
        probe = ConvEProbe(probe.spec, params)
    hv = ag.Variable(h.copy())
    _log_score_variable(kind, hv, r, t, W, probe).backward()
    return hv.grad


def finite_difference_grad(fn, x, step=1e-6):
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        plus = fn(x)
        x[i] = orig - step
        minus = fn(x)
        x[i] = orig
        out[i] = (plus - minus) / (2 * step)
    return out


def vector_rel_error(a, b):
    """``max|a - b| / max(max|a|, max|b|)`` (0 when both vanish)."""
    a, b = _f64(a, b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    return 0.0 if scale == 0 else float(np.max(np.abs(a - b)) / scale)


ANALYTIC = {
    "transe_l1": analytic_grad_transe_l1,
    "transe_l2": analytic_grad_transe_l2,
    "distmult": analytic_grad_distmult,
    "conve": analytic_grad_conve,
}


def analytic_grad(kind, h, r, t, W, probe=None, table=None):
    fn = (table or ANALYTIC)[kind]
    if kind == "conve":
        return fn(h, r, t, W, probe)
    return fn(h, r, t, W)


# ---------------------------------------------------------------------------
# probe sampling


def sample_probe(kind, rng, dim, step=1e-6, probe=None, max_tries=1000):
    """Draw ``(h, r, t, W)`` inside the formula's domain.

    Scores must be positive and L1 arguments must stay at least ten
    finite-difference steps (scaled by ``W``) away from every kink.
    """
    for _ in range(max_tries):
        h, r, t = rng.normal(size=(3, dim))
        W = rng.normal(size=(dim, dim)) / np.sqrt(dim)
        diff = W @ h + r - W @ t
        if kind == "transe_l1":
            if np.min(np.abs(diff)) < 10 * step * max(1.0, np.abs(W).sum(axis=1).max()):
                continue
        elif kind == "transe_l2":
            if np.sum(diff * diff) < 1e-6:
                continue
        elif kind == "distmult":
            if (W @ h) @ (r * (W @ t)) <= 1e-3:
                continue
        elif kind == "conve":
            if conve_score(h, r, t, W, probe) <= 1e-3:
                continue
        return h, r, t, W
    raise DomainError(f"could not sample a valid probe for {kind} in {max_tries} tries")


@dataclass
class FormulaReport:
    formula: str
    probes: int
    max_rel_error: float
    max_abs_error: float
    backprop_rel_error: float
    tolerance: float
    backprop_tolerance: float

    @property
    def passed(self) -> bool:
        return (self.probes > 0 and self.max_rel_error < self.tolerance
                and self.backprop_rel_error < self.backprop_tolerance)

    def to_dict(self):
        return {
            "formula": self.formula,
            "probes": self.probes,
            "max_rel_error": self.max_rel_error,
            "max_abs_error": self.max_abs_error,
            "backprop_rel_error": self.backprop_rel_error,
            "tolerance": self.tolerance,
            "backprop_tolerance": self.backprop_tolerance,
            "passed": self.passed,
        }


def certify_formula(kind, probes=20, seed=0, dim=8, step=1e-6, table=None,
                    conve_probe: ConvEProbe | None = None) -> FormulaReport:
    """Check one analytic formula against finite differences and backprop."""
    if kind not in FORMULAS:
        raise ConfigError(f"unknown formula {kind!r}; expected one of {FORMULAS}")
    rng = np.random.default_rng([seed, FORMULAS.index(kind)])
    probe = None
    if kind == "conve":
        probe = conve_probe or ConvEProbe.random(dim=dim, seed=seed)
        dim = probe.spec.embedding_dim
    max_rel = max_abs = max_bp = 0.0
    for _ in range(probes):
        h, r, t, W = sample_probe(kind, rng, dim, step, probe)
        analytic = analytic_grad(kind, h, r, t, W, probe, table)
        numeric = finite_difference_grad(lambda x: log_score(kind, x, r, t, W, probe), h, step)
        bp = backprop_grad(kind, h, r, t, W, probe)
        max_rel = max(max_rel, vector_rel_error(analytic, numeric))
        max_abs = max(max_abs, float(np.max(np.abs(analytic - numeric))))
        max_bp = max(max_bp, vector_rel_error(analytic, bp))
    return FormulaReport(kind, probes, max_rel, max_abs, max_bp, TOLERANCES[kind],
                         BACKPROP_TOLERANCES[kind])


def certify(formulas=FORMULAS, probes=20, seed=0, dim=8, step=1e-6, table=None) -> dict:
    """Run :func:`certify_formula` for each selected formula."""
    return {k: certify_formula(k, probes, seed, dim, step, table) for k in formulas}


# ---------------------------------------------------------------------------
# neighborhood decomposition


@dataclass
class NeighborhoodLoss:
    """``sum_(r, t) log s(Wh, r, Wt)`` over the neighbors of one center entity."""

    center: np.ndarray
    neighbors: list
    kind: str
    W: np.ndarray
    probe: ConvEProbe | None = None
    center_id: int | None = None
    neighbor_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in FORMULAS:
            raise ConfigError(f"unknown decoder kind {self.kind!r}")
        if self.kind == "conve" and self.probe is None:
            raise ConfigError("conve neighborhoods need ConvE weights")


@dataclass
class GradDecomposition:
    total: np.ndarray
    contributions: list
    residual: float


def neighborhood_from_triples(center_id, triples, entity_table, relation_table, W, kind,
                              probe=None) -> NeighborhoodLoss:
    """Collect ``(r, t)`` for every ``(center_id, r, t)`` in ``triples``."""
    triples = np.asarray(triples).reshape(-1, 3)
    rows = triples[triples[:, 0] == center_id]
    neighbors = [(np.asarray(relation_table[r], dtype=np.float64),
                  np.asarray(entity_table[t], dtype=np.float64)) for _, r, t in rows]
    return NeighborhoodLoss(np.asarray(entity_table[center_id], dtype=np.float64), neighbors,
                            kind, np.asarray(W, dtype=np.float64), probe, int(center_id),
                            [(int(r), int(t)) for _, r, t in rows])


def decompose_neighborhood_gradient(loss: NeighborhoodLoss, table=None) -> GradDecomposition:
    """Backprop the summed loss once; compare with the sum of analytic per-neighbor terms."""
    probe = loss.probe
    if probe is not None:
        probe = ConvEProbe(probe.spec, probe.params.copy())
    hv = ag.Variable(np.array(loss.center, dtype=np.float64))
    terms = [_log_score_variable(loss.kind, hv, r, t, loss.W, probe) for r, t in loss.neighbors]
    if not terms:
        return GradDecomposition(np.zeros_like(loss.center), [], 0.0)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    total.backward()
    contributions = [analytic_grad(loss.kind, loss.center, r, t, loss.W, loss.probe, table)
                     for r, t in loss.neighbors]
    residual = float(np.linalg.norm(hv.grad - np.sum(contributions, axis=0)))
    return GradDecomposition(hv.grad, contributions, residual)
