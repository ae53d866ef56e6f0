"""Prototypical concept explanations.

Concept relevance vectors of many predictions are L1-normalised, clustered
with a diagonal-covariance Gaussian mixture, and each component is read as a
prediction strategy ("prototype").  New predictions are assigned to the most
responsible component, scored by their log-likelihood against a training
percentile, and compared concept by concept with their prototype.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


def normalize_vector(v) -> np.ndarray:
    """Divide by the sum of absolute values, keeping signs."""
    v = np.asarray(v, dtype=np.float64)
    total = np.abs(v).sum()
    if total == 0:
        raise ValueError("cannot normalise an all-zero concept vector")
    return v / total


@dataclass
class ConceptMatrix:
    values: np.ndarray  # (N, C), rows L1-normalised
    sample_ids: list
    layer_id: str = ""
    context: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    @classmethod
    def from_raw(cls, raw, sample_ids=None, layer_id: str = "", context=None) -> "ConceptMatrix":
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        ids = list(range(len(raw))) if sample_ids is None else list(sample_ids)
        totals = np.abs(raw).sum(axis=1)
        keep = totals > 0
        excluded = [ids[i] for i in np.flatnonzero(~keep)]
        if excluded:
            log.info("excluding %d all-zero concept vectors: %s", len(excluded), excluded)
        values = raw[keep] / totals[keep, None]
        return cls(values, [ids[i] for i in np.flatnonzero(keep)], layer_id, dict(context or {}), excluded)

    @property
    def shape(self):
        return self.values.shape

    def __len__(self) -> int:
        return len(self.values)


def _as_array(matrix) -> np.ndarray:
    return matrix.values if isinstance(matrix, ConceptMatrix) else np.atleast_2d(np.asarray(matrix, dtype=np.float64))


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, C)
    variances: np.ndarray  # (K, C)
    layer_id: str = ""
    seed: int = 0
    history: list = field(default_factory=list)  # mean log-likelihood per E-step
    n_iter: int = 0
    converged: bool = False
    reseeded: list = field(default_factory=list)  # E-step indices after which a component was re-seeded
    warnings: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.weights)

    def component_log_prob(self, X) -> np.ndarray:
        """(N, K) array of log pi_k + log N(x | mu_k, diag var_k)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.means.shape[1]:
            raise ValueError(f"vector length {X.shape[1]} != {self.means.shape[1]} concepts")
        diff2 = (X[:, None, :] - self.means[None]) ** 2
        log_det = np.log(self.variances).sum(axis=1)
        maha = (diff2 / self.variances[None]).sum(axis=2)
        c = X.shape[1]
        with np.errstate(divide="ignore"):  # an emptied component scores -inf until re-seeded
            log_w = np.log(self.weights)
        return log_w[None] - 0.5 * (c * _LOG_2PI + log_det[None] + maha)

    def score_samples(self, X) -> np.ndarray:
        return logsumexp(self.component_log_prob(X), axis=1)

    def predict(self, X) -> np.ndarray:
        # argmax takes the first maximum, i.e. the lower component id on ties
        return self.component_log_prob(X).argmax(axis=1)

    def to_dict(self) -> dict:
        return {
            "K": self.k,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "layer": self.layer_id,
            "seed": self.seed,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "log_likelihood": self.history[-1] if self.history else None,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        return cls(np.asarray(d["weights"], dtype=np.float64), np.asarray(d["means"], dtype=np.float64),
                   np.asarray(d["variances"], dtype=np.float64), d.get("layer", ""), int(d.get("seed", 0)),
                   n_iter=int(d.get("n_iter", 0)), converged=bool(d.get("converged", False)),
                   warnings=list(d.get("warnings", [])))


def farthest_point_init(X: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Indices of ``k`` rows: a seeded first pick, then repeatedly the row farthest from all picks."""
    rng = np.random.default_rng(seed)
    picks = [int(rng.integers(len(X)))]
    d2 = ((X - X[picks[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(d2.argmax())
        picks.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return np.asarray(picks)


def _m_step(X, resp, var_floor):
    nk = resp.sum(axis=0)
    safe = np.where(nk > 0, nk, 1.0)
    means = (resp.T @ X) / safe[:, None]
    var = (resp.T @ (X ** 2)) / safe[:, None] - means ** 2
    # the direct second-moment form can dip below zero by rounding
    var = np.maximum(var, var_floor)
    return nk / len(X), means, var


def fit_gmm(matrix, k: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-6,
            var_floor: float = VAR_FLOOR, layer_id: str | None = None) -> GmmModel:
    """Fit a diagonal Gaussian mixture by EM.

    Initialisation is farthest-point seeding from ``seed`` followed by one
    hard-assignment M-step.  Iteration stops after ``max_iter`` E-steps or
    when the mean log-likelihood improves by less than ``tol``.  A component
    whose weight falls below 1/(10N) is re-seeded once on the worst-explained
    row; if it degenerates again it is kept and reported in ``warnings``.
    """
    X = _as_array(matrix)
    if layer_id is None:
        layer_id = matrix.layer_id if isinstance(matrix, ConceptMatrix) else ""
    n, c = X.shape
    if k < 1 or n < k:
        raise ValueError(f"need N >= K >= 1, got N={n}, K={k}")
    centers = X[farthest_point_init(X, k, seed)]
    d2 = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
    resp = np.zeros((n, k))
    resp[np.arange(n), d2.argmin(axis=1)] = 1.0
    weights, means, var = _m_step(X, resp, var_floor)
    global_var = np.maximum(X.var(axis=0), var_floor)
    model = GmmModel(weights, means, var, layer_id, seed)
    reseeded_once = set()
    min_weight = 1.0 / (10 * n)
    prev = -np.inf
    for it in range(max_iter):
        bad = np.flatnonzero(model.weights < min_weight)
        if bad.size:
            fresh = [j for j in bad if j not in reseeded_once]
            for j in bad:
                if j in reseeded_once:
                    msg = f"component {int(j)} degenerate (weight {model.weights[j]:.3g}) after re-seeding"
                    if msg not in model.warnings:
                        model.warnings.append(msg)
            if fresh:
                worst = model.score_samples(X).argsort(kind="stable")
                for rank, j in enumerate(fresh):
                    model.means[j] = X[worst[rank]]
                    model.variances[j] = global_var
                    reseeded_once.add(j)
                model.weights = np.maximum(model.weights, min_weight)
                model.weights = model.weights / model.weights.sum()
                model.reseeded.append(len(model.history))
                prev = -np.inf
            # weights must stay strictly positive for the log
            model.weights = np.maximum(model.weights, np.finfo(float).tiny)
            model.weights = model.weights / model.weights.sum()
        logp = model.component_log_prob(X)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.mean())
        model.history.append(ll)
        model.n_iter = it + 1
        if ll - prev < tol:
            model.converged = True
            break
        prev = ll
        resp = np.exp(logp - norm[:, None])
        model.weights, model.means, model.variances = _m_step(X, resp, var_floor)
    return model


@dataclass
class Assignment:
    component: int
    log_likelihood: float
    responsibilities: np.ndarray


def assign(vector, gmm: GmmModel) -> Assignment:
    """Most responsible component for an already-normalised concept vector."""
    logp = gmm.component_log_prob(np.asarray(vector, dtype=np.float64)[None])[0]
    total = float(logsumexp(logp))
    resp = np.exp(logp - total)
    return Assignment(int(logp.argmax()), total, resp)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def centered_cosine(a, b) -> float:
    """Cosine after subtracting each vector's mean over concepts.

    Falls back to the plain cosine when either vector is constant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac, bc = a - a.mean(), b - b.mean()
    if np.allclose(ac, 0.0, atol=1e-15) or np.allclose(bc, 0.0, atol=1e-15):
        return cosine_similarity(a, b)
    return cosine_similarity(ac, bc)


@dataclass
class Prototype:
    component: int
    weight: float
    coverage: float  # percent of training rows hard-assigned here
    similarity: float  # centred cosine of the mean to the global mean
    top_concepts: list


@dataclass
class PrototypeSummary:
    prototypes: list[Prototype]
    global_mean: np.ndarray
    labels: np.ndarray

    def to_dict(self) -> dict:
        return {
            "global_mean": self.global_mean.tolist(),
            "prototypes": [
                {"component": p.component, "weight": p.weight, "coverage": p.coverage,
                 "similarity": p.similarity, "top_concepts": p.top_concepts}
                for p in self.prototypes
            ],
        }


def prototype_summary(gmm: GmmModel, matrix, top_m: int = 5) -> PrototypeSummary:
    X = _as_array(matrix)
    labels = gmm.predict(X)
    counts = np.bincount(labels, minlength=gmm.k)
    mean = X.mean(axis=0)
    protos = []
    for j in range(gmm.k):
        mu = gmm.means[j]
        order = sorted(range(len(mu)), key=lambda c: (-abs(mu[c]), c))[:top_m]
        protos.append(Prototype(j, float(gmm.weights[j]), 100.0 * counts[j] / len(X),
                                centered_cosine(mu, mean), [int(c) for c in order]))
    return PrototypeSummary(protos, mean, labels)


@dataclass
class OutlierCalibration:
    train_log_likelihoods: np.ndarray  # sorted ascending
    q: float
    threshold: float

    def to_dict(self) -> dict:
        lls = self.train_log_likelihoods
        return {
            "q": self.q,
            "threshold": self.threshold,
            "percentiles": {str(p): float(np.percentile(lls, p)) for p in (1, 5, 10, 25, 50, 75, 90, 95, 99)},
            "train_log_likelihoods": lls.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OutlierCalibration":
        return cls(np.asarray(d["train_log_likelihoods"], dtype=np.float64), float(d["q"]), float(d["threshold"]))


def calibrate_outliers(gmm: GmmModel, matrix, q: float = 5.0) -> OutlierCalibration:
    if not 0 < q <= 50:
        raise ValueError("q must lie in (0, 50]")
    lls = np.sort(gmm.score_samples(_as_array(matrix)))
    return OutlierCalibration(lls, float(q), float(np.percentile(lls, q)))


@dataclass
class OutlierScore:
    log_likelihood: float
    percentile: float  # share of training predictions scoring at or below this one, in percent
    flag: bool


def outlier_score(vector, gmm: GmmModel, calibration: OutlierCalibration) -> OutlierScore:
    ll = float(gmm.score_samples(np.asarray(vector, dtype=np.float64)[None])[0])
    lls = calibration.train_log_likelihoods
    pct = 100.0 * np.searchsorted(lls, ll, side="right") / len(lls)
    return OutlierScore(ll, float(pct), bool(ll < calibration.threshold))


@dataclass
class ConceptDiff:
    concept: int
    test: float
    prototype: float
    delta: float
    usage: str  # "over", "under" or "equal"


@dataclass
class DiffReport:
    component: int
    entries: list[ConceptDiff]

    def to_dict(self, top: int | None = None) -> dict:
        return {
            "component": self.component,
            "entries": [vars(e) for e in self.entries[:top]],
        }


def difference_to_prototype(vector, gmm: GmmModel, component: int) -> DiffReport:
    """Per-concept test - prototype differences, largest |delta| first (ties by concept index)."""
    if not 0 <= component < gmm.k:
        raise ValueError(f"component {component} out of range for K={gmm.k}")
    v = np.asarray(vector, dtype=np.float64)
    mu = gmm.means[component]
    delta = v - mu
    order = sorted(range(len(v)), key=lambda c: (-abs(delta[c]), c))
    entries = [
        ConceptDiff(c, float(v[c]), float(mu[c]), float(delta[c]),
                    "over" if delta[c] > 0 else "under" if delta[c] < 0 else "equal")
        for c in order
    ]
    return DiffReport(component, entries)


def k_diagnostic(train, validation, ks, seed: int = 0, **fit_kw) -> dict[int, float]:
    """Mean validation log-likelihood per K, to help choose the number of prototypes."""
    X, V = _as_array(train), _as_array(validation)
    out = {}
    for k in ks:
        if k <= len(X):
            out[int(k)] = float(fit_gmm(X, k, seed, **fit_kw).score_samples(V).mean())
    return out
