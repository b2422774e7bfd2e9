"""Loss components for multi-label training and their hybrid composition.

Everything is computed in float64 numpy with analytic gradients, so the training loop can plug the
loss in through a thin autograd bridge. Functions are generic over the number of classes C; the
label matrices, weights and correlation matrix just have to agree on it.

Components:
- class weights: w_c = N / max(|C_c|, 1), the inverse class frequency.
- weighted binary cross-entropy: batch mean of -sum_c w_c [y log p + (1 - y) log(1 - p)].
- label correlation matrix: M = Y^T Y / N over the training labels.
- correlation penalty: batch mean of lambda * sum_jk M_jk (p_j - p_k)^2.
- residual correlation term: (1/C) sum_jk M_jk <r_j, r_k> / B, where r = p - y.
- contrastive loss: mean over unordered pairs of D for similar pairs and max(0, m - D) for
    dissimilar ones, D being the squared euclidean distance of the pair's embeddings.
- hybrid: alpha * contrastive + beta * correlation term + gamma * weighted BCE / C.
"""

from collections import namedtuple
import dataclasses

import numpy as np
from scipy.spatial.distance import pdist, squareform
from scipy.special import expit, xlogy

from .common import ConfigError, EmptyDatasetError
from .corpus import ClassDistribution, Dataset

kEps = 1e-7

kSimilarityRules = ("share_any", "exact")
kLcmModes = ("residual", "penalty")
kLossModes = ("baseline", "cw", "lcm", "cl", "hybrid")


class ClassWeights(namedtuple("ClassWeights", ["w", "source_total", "source_counts"])):
    __slots__ = ()

    def __new__(cls, w: np.ndarray, source_total: int, source_counts: np.ndarray):
        w = np.asarray(w, dtype=np.float64)
        source_counts = np.asarray(source_counts, dtype=np.int64)
        assert w.ndim == 1 and source_counts.shape == w.shape
        assert np.all(np.isfinite(w)) and np.all(w > 0), "class weights must be positive"
        w.setflags(write=False)
        source_counts.setflags(write=False)
        return super().__new__(cls, w, int(source_total), source_counts)


class LabelCorrelationMatrix(namedtuple("LabelCorrelationMatrix", ["M"])):
    __slots__ = ()

    def __new__(cls, M: np.ndarray):
        M = np.asarray(M, dtype=np.float64)
        assert M.ndim == 2 and M.shape[0] == M.shape[1]
        assert np.array_equal(M, M.T), "correlation matrix must be symmetric"
        assert np.all((M >= 0) & (M <= 1)), "correlation matrix entries must lie in [0, 1]"
        M.setflags(write=False)
        return super().__new__(cls, M)


@dataclasses.dataclass(frozen=True)
class HybridLossConfig:
    alpha: float = 0.3
    beta: float = 0.3
    gamma: float = 0.4
    margin: float = 1.0
    lambda_reg: float = 0.1
    similarity_rule: str = "share_any"
    lcm_mode: str = "residual"

    def __post_init__(self):
        violations = []
        for k in ("alpha", "beta", "gamma", "lambda_reg"):
            v = getattr(self, k)
            if not (isinstance(v, (int, float)) and np.isfinite(v) and v >= 0):
                violations.append(f"loss.{k}: must be a non-negative number, got {v!r}")
        if not (isinstance(self.margin, (int, float)) and np.isfinite(self.margin)) or not (
            self.margin > 0
        ):
            violations.append(f"loss.margin: must be positive, got {self.margin!r}")
        if self.similarity_rule not in kSimilarityRules:
            violations.append(
                f"loss.similarity_rule: must be one of {', '.join(kSimilarityRules)}, "
                f"got {self.similarity_rule!r}"
            )
        if self.lcm_mode not in kLcmModes:
            violations.append(
                f"loss.lcm_mode: must be one of {', '.join(kLcmModes)}, got {self.lcm_mode!r}"
            )
        if len(violations) > 0:
            raise ConfigError(violations)


class LossBatch(namedtuple("LossBatch", ["y_true", "y_pred", "embeddings"])):
    """y_true B x C binary, y_pred B x C probabilities (clipped to [eps, 1 - eps] here), embeddings
    B x E representations used by the contrastive term."""

    __slots__ = ()

    def __new__(cls, y_true: np.ndarray, y_pred: np.ndarray, embeddings: np.ndarray | None = None):
        y_true = np.asarray(y_true, dtype=np.float64)
        y_pred = np.clip(np.asarray(y_pred, dtype=np.float64), kEps, 1.0 - kEps)
        assert y_true.ndim == 2 and y_pred.shape == y_true.shape
        assert np.all((y_true == 0) | (y_true == 1))
        if embeddings is None:
            embeddings = np.zeros((y_true.shape[0], 0), dtype=np.float64)
        embeddings = np.asarray(embeddings, dtype=np.float64)
        assert embeddings.ndim == 2 and embeddings.shape[0] == y_true.shape[0]
        return super().__new__(cls, y_true, y_pred, embeddings)

    @property
    def size(self) -> int:
        return self.y_true.shape[0]

    @property
    def num_classes(self) -> int:
        return self.y_true.shape[1]


class HybridLossResult(
    namedtuple("HybridLossResult", ["value", "grad_pred", "grad_embeddings", "components"])
):
    """Loss value, its gradients with respect to the predictions (probabilities, or logits when
    produced by hybridLossFromLogits) and the embeddings, and the weighted-in unscaled components
    keyed by name."""

    __slots__ = ()


def _asMatrix(M) -> np.ndarray:
    return M.M if isinstance(M, LabelCorrelationMatrix) else np.asarray(M, dtype=np.float64)


def _asWeights(w, n_classes: int) -> np.ndarray:
    w = w.w if isinstance(w, ClassWeights) else np.asarray(w, dtype=np.float64)
    assert w.shape == (n_classes,)
    return w


################################################################################
# statistics
################################################################################


def computeClassWeights(dist: ClassDistribution) -> ClassWeights:
    assert isinstance(dist, ClassDistribution)
    if dist.total < 1:
        raise EmptyDatasetError("class weights need at least one instance")
    w = dist.total / np.maximum(dist.counts, 1).astype(np.float64)
    return ClassWeights(w, dist.total, dist.counts)


def unitClassWeights(n_classes: int) -> np.ndarray:
    return np.ones(n_classes, dtype=np.float64)


def labelCorrelationMatrix(d: Dataset | np.ndarray) -> LabelCorrelationMatrix:
    Y = d.label_matrix if isinstance(d, Dataset) else np.asarray(d)
    Y = Y.astype(np.float64)
    if Y.shape[0] < 1:
        raise EmptyDatasetError("label correlation matrix of an empty dataset is undefined")
    return LabelCorrelationMatrix(Y.T @ Y / Y.shape[0])


################################################################################
# components
################################################################################


def _bce(batch: LossBatch, w: np.ndarray) -> tuple[float, np.ndarray]:
    y, p, B = batch.y_true, batch.y_pred, batch.size
    per = -(xlogy(y, p) + xlogy(1.0 - y, 1.0 - p))
    value = float((per * w).sum() / B)
    grad = -(w / B) * (y / p - (1.0 - y) / (1.0 - p))
    return value, grad


def weightedBce(batch: LossBatch, w: ClassWeights | np.ndarray) -> float:
    assert isinstance(batch, LossBatch)
    return _bce(batch, _asWeights(w, batch.num_classes))[0]


def _penalty(p: np.ndarray, M: np.ndarray, lambda_reg: float) -> tuple[float, np.ndarray]:
    B = p.shape[0]
    diff = p[:, :, None] - p[:, None, :]  # B x C x C, diff[i, j, k] = p_ij - p_ik
    value = float(lambda_reg * (M[None] * diff**2).sum() / B)
    grad = (2.0 * lambda_reg / B) * ((M + M.T)[None] * diff).sum(axis=2)
    return value, grad


def correlationPenalty(
    y_pred: np.ndarray, M: LabelCorrelationMatrix | np.ndarray, lambda_reg: float
) -> float:
    assert lambda_reg >= 0
    p = np.clip(np.asarray(y_pred, dtype=np.float64), kEps, 1.0 - kEps)
    M = _asMatrix(M)
    assert p.ndim == 2 and M.shape == (p.shape[1], p.shape[1])
    return _penalty(p, M, lambda_reg)[0]


def _residual(batch: LossBatch, M: np.ndarray) -> tuple[float, np.ndarray]:
    B, C = batch.size, batch.num_classes
    R = batch.y_pred - batch.y_true
    value = float(np.einsum("ij,jk,ik->", R, M, R) / (C * B))
    grad = R @ (M + M.T) / (C * B)
    return value, grad


def lcmResidualTerm(batch: LossBatch, M: LabelCorrelationMatrix | np.ndarray) -> float:
    assert isinstance(batch, LossBatch)
    M = _asMatrix(M)
    assert M.shape == (batch.num_classes, batch.num_classes)
    return _residual(batch, M)[0]


def similarPairs(y_true: np.ndarray, rule: str = "share_any") -> np.ndarray:
    """B x B boolean matrix of label-similar pairs: sharing at least one label, or having equal
    label vectors. The diagonal is meaningless."""
    Y = np.asarray(y_true, dtype=np.float64)
    if rule == "share_any":
        return (Y @ Y.T) > 0
    assert rule == "exact"
    return np.all(Y[:, None, :] == Y[None, :, :], axis=2)


def _contrastive(batch: LossBatch, cfg: HybridLossConfig) -> tuple[float, np.ndarray]:
    B, H = batch.size, batch.embeddings
    if B < 2:
        return 0.0, np.zeros_like(H)
    D = squareform(pdist(H, metric="sqeuclidean"))
    S = similarPairs(batch.y_true, cfg.similarity_rule)
    hinge = np.maximum(0.0, cfg.margin - D)
    n_pairs = B * (B - 1) / 2
    iu = np.triu_indices(B, k=1)
    value = float(np.where(S, D, hinge)[iu].sum() / n_pairs)

    # dL/dD per pair: 1 for similar pairs, -1 for dissimilar pairs inside the margin
    G = np.where(S, 1.0, np.where(D < cfg.margin, -1.0, 0.0))
    np.fill_diagonal(G, 0.0)
    grad = (2.0 / n_pairs) * (np.diag(G.sum(axis=1)) - G) @ H
    return value, grad


def contrastiveLoss(batch: LossBatch, cfg: HybridLossConfig) -> float:
    assert isinstance(batch, LossBatch) and isinstance(cfg, HybridLossConfig)
    return _contrastive(batch, cfg)[0]


################################################################################
# composition
################################################################################


def hybridLoss(
    batch: LossBatch,
    w: ClassWeights | np.ndarray,
    M: LabelCorrelationMatrix | np.ndarray,
    cfg: HybridLossConfig,
) -> HybridLossResult:
    """alpha * contrastive + beta * correlation term (per cfg.lcm_mode) + gamma * weighted BCE / C.
    Gradients are with respect to the (clipped) probabilities and the embeddings. Components with a
    zero weight aren't computed."""
    assert isinstance(batch, LossBatch) and isinstance(cfg, HybridLossConfig)
    C = batch.num_classes
    w = _asWeights(w, C)
    M = _asMatrix(M)
    assert M.shape == (C, C)

    value = 0.0
    grad_pred = np.zeros_like(batch.y_pred)
    grad_emb = np.zeros_like(batch.embeddings)
    components = {}

    if cfg.gamma > 0:
        v, g = _bce(batch, w)
        components["cw"] = v / C
        value += cfg.gamma * v / C
        grad_pred += (cfg.gamma / C) * g
    if cfg.beta > 0:
        if cfg.lcm_mode == "residual":
            v, g = _residual(batch, M)
        else:
            v, g = _penalty(batch.y_pred, M, cfg.lambda_reg)
        components["lcm"] = v
        value += cfg.beta * v
        grad_pred += cfg.beta * g
    if cfg.alpha > 0:
        v, g = _contrastive(batch, cfg)
        components["cl"] = v
        value += cfg.alpha * v
        grad_emb += cfg.alpha * g

    return HybridLossResult(value, grad_pred, grad_emb, components)


def hybridLossFromLogits(
    logits: np.ndarray,
    y_true: np.ndarray,
    embeddings: np.ndarray,
    w: ClassWeights | np.ndarray,
    M: LabelCorrelationMatrix | np.ndarray,
    cfg: HybridLossConfig,
) -> HybridLossResult:
    """hybridLoss() of sigmoid(logits); the returned `grad_pred` is with respect to the logits.
    Entries whose probability got clipped have a zero gradient."""
    z = np.asarray(logits, dtype=np.float64)
    s = expit(z)
    res = hybridLoss(LossBatch(y_true, s, embeddings), w, M, cfg)
    in_range = (s > kEps) & (s < 1.0 - kEps)
    grad_logits = res.grad_pred * s * (1.0 - s) * in_range
    return res._replace(grad_pred=grad_logits)


class LossPreset(namedtuple("LossPreset", ["cfg", "class_weighted"])):
    __slots__ = ()


def lossConfigForMode(mode: str, cfg: HybridLossConfig) -> LossPreset:
    """Ablation presets, each adding one component to plain cross-entropy:
    - baseline: alpha = beta = 0, gamma = 1, unit class weights
    - cw: alpha = beta = 0, gamma = 1, inverse frequency weights
    - lcm: alpha = 0, beta and gamma from cfg, unit weights
    - cl: beta = 0, alpha and gamma from cfg, unit weights
    - hybrid: cfg as is, inverse frequency weights
    """
    if mode not in kLossModes:
        raise ConfigError(f"loss.mode: must be one of {', '.join(kLossModes)}, got {mode!r}")
    assert isinstance(cfg, HybridLossConfig)
    if mode in ("baseline", "cw"):
        out = dataclasses.replace(cfg, alpha=0.0, beta=0.0, gamma=1.0)
    elif mode == "lcm":
        out = dataclasses.replace(cfg, alpha=0.0)
    elif mode == "cl":
        out = dataclasses.replace(cfg, beta=0.0)
    else:
        out = cfg
    if out.alpha + out.beta + out.gamma <= 0:
        raise ConfigError(f"loss: alpha + beta + gamma must be positive in mode '{mode}'")
    return LossPreset(out, mode in ("cw", "hybrid"))
