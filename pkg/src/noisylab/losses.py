"""Loss functions of the regularized objective, each returning analytic gradients.

Every loss consumes a :class:`BatchOutputs` (classifier logits, SSL embeddings,
noisy labels) and returns a :class:`LossReport` with gradients with respect to
the outputs it reads. Values are batch means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from noisylab.errors import ValidationError
from noisylab.noise import TransitionMatrix

SL_LOSSES = ("ce", "mae", "gce", "fw", "peer")
DISTANCES = ("smooth-l1", "squared-l2")


@dataclass
class BatchOutputs:
    logits: np.ndarray
    noisy_labels: np.ndarray
    ssl_embeddings: np.ndarray | None = None
    ssl_embeddings_aug: np.ndarray | None = None
    cache: Any = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        if self.logits.ndim != 2:
            raise ValidationError(f"logits must be |B| x K, got shape {self.logits.shape}")
        b, k = self.logits.shape
        if b < 2:
            raise ValidationError(f"batch must contain at least 2 rows, got {b}")
        if self.noisy_labels.shape != (b,):
            raise ValidationError(f"noisy_labels shape {self.noisy_labels.shape} != ({b},)")
        if self.noisy_labels.min() < 0 or self.noisy_labels.max() >= k:
            raise ValidationError(f"labels must lie in [0, {k})")
        for name in ("ssl_embeddings", "ssl_embeddings_aug"):
            emb = getattr(self, name)
            if emb is None:
                continue
            emb = np.asarray(emb, dtype=np.float64)
            if emb.ndim != 2 or emb.shape[0] != b:
                raise ValidationError(f"{name} must have {b} rows, got shape {emb.shape}")
            setattr(self, name, emb)

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]


@dataclass
class LossReport:
    value: float
    grad_logits: np.ndarray
    grad_ssl: np.ndarray | None = None
    grad_ssl_aug: np.ndarray | None = None
    degenerate: bool = False
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise FloatingPointError(f"loss value is not finite: {self.value}")


@dataclass(frozen=True)
class RegularizerConfig:
    """Settings of the representation regularizer.

    w_sl / w_ssl are the distance exponents on classifier outputs and SSL
    embeddings. ``couple_ssl`` lets regularizer gradients reach the SSL
    embeddings; by default they are treated as a fixed target.
    """

    w_sl: int = 1
    w_ssl: int = 2
    distance: str = "smooth-l1"
    lam: float = 1.0
    epsilon_floor: float = 1e-8
    couple_ssl: bool = False

    def __post_init__(self):
        if self.w_sl not in (1, 2) or self.w_ssl not in (1, 2):
            raise ValidationError(f"distance exponents must be 1 or 2, got w_sl={self.w_sl}, w_ssl={self.w_ssl}")
        if self.distance not in DISTANCES:
            raise ValidationError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if not self.epsilon_floor > 0:
            raise ValidationError(f"epsilon_floor must be > 0, got {self.epsilon_floor}")


# --- softmax helpers -------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. softmax outputs back to the logits, row-wise."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


# --- supervised losses -----------------------------------------------------------------

def cross_entropy(outputs: BatchOutputs) -> LossReport:
    b, k = outputs.logits.shape
    y = outputs.noisy_labels
    logp = log_softmax(outputs.logits)
    value = -logp[np.arange(b), y].mean()
    grad = (np.exp(logp) - _onehot(y, k)) / b
    return LossReport(value, grad)


def mae_loss(outputs: BatchOutputs) -> LossReport:
    """Mean absolute error between the softmax and the one-hot noisy label."""
    b, k = outputs.logits.shape
    p = softmax(outputs.logits)
    diff = p - _onehot(outputs.noisy_labels, k)
    value = np.abs(diff).sum(axis=1).mean()
    grad = softmax_backward(p, np.sign(diff) / b)
    return LossReport(value, grad)


def gce_loss(outputs: BatchOutputs, q: float = 0.7) -> LossReport:
    """Generalized cross entropy (1 - p_y^q) / q."""
    if not 0.0 < q <= 1.0:
        raise ValidationError(f"GCE exponent q must lie in (0, 1], got {q}")
    b, k = outputs.logits.shape
    y = outputs.noisy_labels
    p = softmax(outputs.logits)
    py = p[np.arange(b), y]
    pq = py ** q
    value = ((1.0 - pq) / q).mean()
    # d/dz of -p_y^q / q is p_y^q (p - onehot)
    grad = pq[:, None] * (p - _onehot(y, k)) / b
    return LossReport(value, grad)


def forward_corrected_ce(outputs: BatchOutputs, transition: TransitionMatrix) -> LossReport:
    """Cross entropy on noise-adjusted probabilities q = T^T softmax(logits)."""
    b, k = outputs.logits.shape
    if transition.num_classes != k:
        raise ValidationError(f"transition is {transition.num_classes}x{transition.num_classes}, logits have K={k}")
    t = transition.entries
    y = outputs.noisy_labels
    p = softmax(outputs.logits)
    q = p @ t
    qy = np.maximum(q[np.arange(b), y], np.finfo(np.float64).tiny)
    value = -np.log(qy).mean()
    grad_q = np.zeros_like(q)
    grad_q[np.arange(b), y] = -1.0 / (qy * b)
    grad = softmax_backward(p, grad_q @ t.T)
    return LossReport(value, grad)


def peer_loss(outputs: BatchOutputs, perm1, perm2, alpha: float = 1.0) -> LossReport:
    """CE(x_n, y_n) - alpha * CE(x_perm1[n], y_perm2[n]), averaged over the batch."""
    b, k = outputs.logits.shape
    perm1 = np.asarray(perm1, dtype=np.int64)
    perm2 = np.asarray(perm2, dtype=np.int64)
    for perm in (perm1, perm2):
        if perm.shape != (b,) or perm.min() < 0 or perm.max() >= b:
            raise ValidationError(f"peer permutation must hold {b} indices in [0, {b})")
    y = outputs.noisy_labels
    logp = log_softmax(outputs.logits)
    p = np.exp(logp)
    peer_y = y[perm2]
    value = (-logp[np.arange(b), y] + alpha * logp[perm1, peer_y]).mean()

    grad = (p - _onehot(y, k)) / b
    np.add.at(grad, perm1, -alpha * (p[perm1] - _onehot(peer_y, k)) / b)
    return LossReport(value, grad)


def supervised_loss(name: str, outputs: BatchOutputs, *, transition: TransitionMatrix | None = None,
                    q: float = 0.7, alpha: float = 1.0, peer_perms=None, rng=None) -> LossReport:
    """Dispatch on a loss-selector name (``ce``, ``mae``, ``gce``, ``fw``, ``peer``)."""
    if name == "ce":
        return cross_entropy(outputs)
    if name == "mae":
        return mae_loss(outputs)
    if name == "gce":
        return gce_loss(outputs, q)
    if name == "fw":
        if transition is None:
            raise ValidationError("loss 'fw' needs a transition matrix")
        return forward_corrected_ce(outputs, transition)
    if name == "peer":
        if peer_perms is None:
            rng = np.random.default_rng(rng)
            b = outputs.batch_size
            peer_perms = (rng.permutation(b), rng.permutation(b))
        return peer_loss(outputs, *peer_perms, alpha=alpha)
    raise ValidationError(f"unknown loss selector {name!r}; choose from {SL_LOSSES}")


# --- contrastive term -------------------------------------------------------------------

def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ValidationError("cosine similarity undefined for an all-zero embedding row")
    return x / norms[:, None], norms


def _unit_rows_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    radial = (grad_unit * unit).sum(axis=1, keepdims=True)
    return (grad_unit - unit * radial) / norms[:, None]


def info_nce(outputs: BatchOutputs, temperature: float = 0.5) -> LossReport:
    """NT-Xent loss with anchors t_n and positives t'_n.

    The denominator for anchor n holds its positive plus, for every other
    index n', both t_n' and t'_n'. Similarities are cosine over ``temperature``.
    """
    if outputs.ssl_embeddings is None or outputs.ssl_embeddings_aug is None:
        raise ValidationError("info_nce needs ssl_embeddings and ssl_embeddings_aug")
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    b = outputs.batch_size
    u, nu = _unit_rows(outputs.ssl_embeddings)
    v, nv = _unit_rows(outputs.ssl_embeddings_aug)
    s_tt = u @ u.T / temperature
    s_tv = u @ v.T / temperature

    eye = np.eye(b, dtype=bool)
    s_tt_masked = np.where(eye, -np.inf, s_tt)
    row_max = np.maximum(s_tt_masked.max(axis=1), s_tv.max(axis=1))
    e_tt = np.exp(s_tt_masked - row_max[:, None])
    e_tv = np.exp(s_tv - row_max[:, None])
    denom = e_tt.sum(axis=1) + e_tv.sum(axis=1)
    per_anchor = np.log(denom) + row_max - np.diag(s_tv)
    value = per_anchor.mean()

    g_tt = e_tt / denom[:, None] / b
    g_tv = (e_tv / denom[:, None] - eye) / b
    grad_u = ((g_tt + g_tt.T) @ u + g_tv @ v) / temperature
    grad_v = (g_tv.T @ u) / temperature
    return LossReport(value, np.zeros_like(outputs.logits),
                      grad_ssl=_unit_rows_backward(u, nu, grad_u),
                      grad_ssl_aug=_unit_rows_backward(v, nv, grad_v))


# --- representation regularizer ------------------------------------------------------------

def _pairwise_dist(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def _raw_normalizer(x: np.ndarray, w: int) -> float:
    m = x.shape[0]
    if m < 2:
        raise ValidationError(f"pairwise normalizer needs at least 2 rows, got {m}")
    return float((_pairwise_dist(x) ** w).sum() / (m * (m - 1)))


def pairwise_normalizer(embeddings, w: int, epsilon_floor: float = 1e-8) -> float:
    """Mean over ordered pairs n != n' of ||x_n - x_n'||^w, floored at ``epsilon_floor``."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return max(_raw_normalizer(x, w), epsilon_floor)


def _distance_and_slope(x: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray]:
    if kind == "squared-l2":
        return x * x, 2.0 * x
    ax = np.abs(x)
    inside = ax < 1.0
    return np.where(inside, 0.5 * x * x, ax - 0.5), np.where(inside, x, np.sign(x))


def _power_dist_backward(x: np.ndarray, dist: np.ndarray, w: int, coef: np.ndarray) -> np.ndarray:
    """Gradient of sum_{n,n'} coef[n,n'] * ||x_n - x_n'||^w w.r.t. x (coef symmetric)."""
    if w == 2:
        k = 2.0 * coef
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.where(dist > 0, coef / dist, 0.0)
    # each unordered pair appears twice in the ordered sum
    a = 2.0 * k
    return a.sum(axis=1, keepdims=True) * x - a @ x


@dataclass
class RelationalResult:
    value: float
    grad_s: np.ndarray
    grad_t: np.ndarray
    norms: tuple[float, float]
    degenerate: bool
    phi_s: np.ndarray
    phi_t: np.ndarray


def relational_loss(t, s, cfg: RegularizerConfig, norms: tuple[float, float] | None = None) -> RelationalResult:
    """Batch mean of d(phi_t, phi_s) over ordered pairs, on raw feature rows.

    ``t`` are SSL embeddings and ``s`` classifier outputs (any row dimension).
    phi is ||x_n - x_n'||^w divided by the batch normalizer of its own side.
    ``norms=(m_t, m_s)`` freezes the normalizers; otherwise they are computed
    from the batch. In both cases they are constants for the gradient.
    """
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    t = t[:, None] if t.ndim == 1 else t
    s = s[:, None] if s.ndim == 1 else s
    b = t.shape[0]
    if b < 2 or s.shape[0] != b:
        raise ValidationError(f"need matching batches of at least 2 rows, got {t.shape[0]} and {s.shape[0]}")
    floor = cfg.epsilon_floor
    if norms is None:
        raw_t, raw_s = _raw_normalizer(t, cfg.w_ssl), _raw_normalizer(s, cfg.w_sl)
        if raw_t <= floor and raw_s <= floor:
            zero = np.zeros((b, b))
            return RelationalResult(0.0, np.zeros_like(s), np.zeros_like(t), (floor, floor), True, zero, zero)
        norms = (max(raw_t, floor), max(raw_s, floor))
    m_t, m_s = norms

    dist_t, dist_s = _pairwise_dist(t), _pairwise_dist(s)
    phi_t = dist_t ** cfg.w_ssl / m_t
    phi_s = dist_s ** cfg.w_sl / m_s
    offdiag = ~np.eye(b, dtype=bool)
    d, slope = _distance_and_slope(phi_t - phi_s, cfg.distance)
    scale = 1.0 / (b * (b - 1))
    value = float(d[offdiag].sum() * scale)
    slope = np.where(offdiag, slope, 0.0) * scale

    grad_s = _power_dist_backward(s, dist_s, cfg.w_sl, -slope / m_s)
    grad_t = _power_dist_backward(t, dist_t, cfg.w_ssl, slope / m_t)
    return RelationalResult(value, grad_s, grad_t, (m_t, m_s), False, phi_s, phi_t)


def representation_regularizer(outputs: BatchOutputs, cfg: RegularizerConfig | None = None,
                               norms: tuple[float, float] | None = None) -> LossReport:
    """Relational regularizer between SSL embeddings and softmax(logits).

    The reported value is unscaled; ``cfg.lam`` is applied by :func:`total_loss`.
    """
    cfg = cfg or RegularizerConfig()
    if outputs.ssl_embeddings is None:
        raise ValidationError("representation_regularizer needs ssl_embeddings")
    p = softmax(outputs.logits)
    res = relational_loss(outputs.ssl_embeddings, p, cfg, norms)
    report = LossReport(res.value, softmax_backward(p, res.grad_s),
                        grad_ssl=res.grad_t if cfg.couple_ssl else np.zeros_like(res.grad_t),
                        degenerate=res.degenerate)
    report.components["norms"] = res.norms
    return report


def total_loss(outputs: BatchOutputs, sl_loss: str = "ce", cfg: RegularizerConfig | None = None,
               temperature: float = 0.5, info_weight: float = 1.0,
               norms: tuple[float, float] | None = None, **sl_kwargs) -> LossReport:
    """Supervised loss + info_weight * InfoNCE + lam * regularizer.

    A zero weight skips a term entirely (its component is reported as 0).
    Extra keyword arguments go to :func:`supervised_loss`.
    """
    cfg = cfg or RegularizerConfig()
    sl = supervised_loss(sl_loss, outputs, **sl_kwargs)
    grad_logits = sl.grad_logits.copy()
    grad_ssl = grad_aug = None
    info_value = reg_value = 0.0
    degenerate = False
    used_norms = None

    if outputs.ssl_embeddings is not None:
        grad_ssl = np.zeros_like(outputs.ssl_embeddings)
    if outputs.ssl_embeddings_aug is not None:
        grad_aug = np.zeros_like(outputs.ssl_embeddings_aug)

    if info_weight:
        info = info_nce(outputs, temperature)
        info_value = info.value
        grad_ssl += info_weight * info.grad_ssl
        grad_aug += info_weight * info.grad_ssl_aug

    if cfg.lam:
        reg = representation_regularizer(outputs, cfg, norms)
        reg_value = reg.value
        degenerate = reg.degenerate
        used_norms = reg.components["norms"]
        grad_logits += cfg.lam * reg.grad_logits
        grad_ssl += cfg.lam * reg.grad_ssl

    value = sl.value + info_weight * info_value + cfg.lam * reg_value
    return LossReport(value, grad_logits, grad_ssl, grad_aug, degenerate,
                      components={"sl": sl.value, "info": info_value, "reg": reg_value,
                                  "norms": used_norms})
