"""Numpy MLP with a shared encoder, a linear classifier and a projection head.

The encoder f is a stack of affine layers each followed by tanh, the classifier
g is affine on top of f, and the projection head h is affine-tanh-affine on top
of f. Weights are stored as (out, in) matrices; a layer computes x @ W.T + b.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from noisylab.data import Dataset, batches, stream_rng
from noisylab.errors import ValidationError
from noisylab.losses import BatchOutputs, LossReport, RegularizerConfig, total_loss
from noisylab.noise import TransitionMatrix

MAGIC = b"NLAB1"


@dataclass
class NetworkParams:
    encoder: list  # [(W, b), ...]
    classifier: tuple
    projection: list  # [(W1, b1), (W2, b2)]

    def layers(self) -> list:
        return [*self.encoder, self.classifier, *self.projection]

    @classmethod
    def from_layers(cls, layers, n_encoder: int) -> "NetworkParams":
        layers = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in layers]
        if len(layers) != n_encoder + 3:
            raise ValidationError(f"expected {n_encoder + 3} layers, got {len(layers)}")
        params = cls(layers[:n_encoder], layers[n_encoder], layers[n_encoder + 1:])
        params.validate()
        return params

    def validate(self) -> None:
        width = None
        for i, (w, b) in enumerate(self.encoder):
            if width is not None and w.shape[1] != width:
                raise ValidationError(f"encoder layer {i} expects input {w.shape[1]}, previous layer gives {width}")
            width = w.shape[0]
        for name, (w, b) in [("classifier", self.classifier), ("projection[0]", self.projection[0])]:
            if width is not None and w.shape[1] != width:
                raise ValidationError(f"{name} expects input {w.shape[1]}, encoder gives {width}")
        if self.projection[1][0].shape[1] != self.projection[0][0].shape[0]:
            raise ValidationError("projection layers do not compose")
        for w, b in self.layers():
            if b.shape != (w.shape[0],):
                raise ValidationError(f"bias shape {b.shape} does not match weight {w.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError("parameters must be finite")

    @property
    def input_dim(self) -> int:
        return (self.encoder[0][0] if self.encoder else self.classifier[0]).shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier[0].shape[0]

    def copy(self) -> "NetworkParams":
        return self.map(lambda a: a.copy())

    def map(self, fn) -> "NetworkParams":
        return NetworkParams([(fn(w), fn(b)) for w, b in self.encoder],
                             (fn(self.classifier[0]), fn(self.classifier[1])),
                             [(fn(w), fn(b)) for w, b in self.projection])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for wb in self.layers() for a in wb])

    def unflat(self, vec) -> "NetworkParams":
        it = iter(np.split(np.asarray(vec, dtype=np.float64),
                           np.cumsum([a.size for wb in self.layers() for a in wb])[:-1]))
        return self.map(lambda a: next(it).reshape(a.shape).copy())

    # --- NLAB1 binary format ---------------------------------------------------
    def to_bytes(self) -> bytes:
        """Magic, u32 layer count, u32 encoder-layer count, (out, in) per layer,
        then each layer's row-major weights followed by its bias, float64 LE."""
        layers = self.layers()
        out = [MAGIC, struct.pack("<II", len(layers), len(self.encoder))]
        out += [struct.pack("<II", *w.shape) for w, _ in layers]
        for w, b in layers:
            out.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NetworkParams":
        if blob[:5] != MAGIC:
            raise ValidationError("not an NLAB1 parameter file")
        n_layers, n_enc = struct.unpack_from("<II", blob, 5)
        pos = 13
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<II", blob, pos))
            pos += 8
        layers = []
        for rows, cols in shapes:
            w = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
            pos += 8 * rows * cols
            b = np.frombuffer(blob, dtype="<f8", count=rows, offset=pos)
            pos += 8 * rows
            layers.append((w.astype(np.float64), b.astype(np.float64)))
        if pos != len(blob):
            raise ValidationError(f"trailing bytes in parameter file ({len(blob) - pos})")
        return cls.from_layers(layers, n_enc)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "NetworkParams":
        return cls.from_bytes(Path(path).read_bytes())


def _uniform_layer(rng, fan_in: int, fan_out: int):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)


def init_network(dims, num_classes: int, projection_dim: int, seed=None,
                 projection_hidden: int | None = None) -> NetworkParams:
    """``dims = [D, H1, ..., HL]``; ``[D]`` alone gives an identity encoder."""
    dims = [int(d) for d in dims]
    if not dims or min(dims) < 1:
        raise ValidationError(f"dims must be a non-empty list of positive sizes, got {dims}")
    if num_classes < 2 or projection_dim < 1:
        raise ValidationError("need num_classes >= 2 and projection_dim >= 1")
    rng = stream_rng(seed, "init")
    encoder = [_uniform_layer(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    h = dims[-1]
    hidden = projection_hidden or h
    classifier = _uniform_layer(rng, h, num_classes)
    projection = [_uniform_layer(rng, h, hidden), _uniform_layer(rng, hidden, projection_dim)]
    return NetworkParams(encoder, classifier, projection)


# --- forward / backward -----------------------------------------------------------

def _encode(params: NetworkParams, x: np.ndarray) -> list:
    acts = [x]
    for w, b in params.encoder:
        acts.append(np.tanh(acts[-1] @ w.T + b))
    return acts


def _project(params: NetworkParams, feat: np.ndarray):
    (w1, b1), (w2, b2) = params.projection
    hidden = np.tanh(feat @ w1.T + b1)
    return hidden, hidden @ w2.T + b2


def forward(params: NetworkParams, batch_features, aug_features=None, labels=None) -> BatchOutputs:
    """Run g(f(x)) and h(f(x)) (and h(f(x')) for the augmented view).

    Activations are kept on ``outputs.cache`` for :func:`backward`. Without
    labels a placeholder label vector of zeros is attached.
    """
    x = np.asarray(batch_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValidationError(f"expected features of width {params.input_dim}, got shape {x.shape}")
    acts = _encode(params, x)
    logits = acts[-1] @ params.classifier[0].T + params.classifier[1]
    hidden, t = _project(params, acts[-1])
    cache = {"main": (acts, hidden), "aug": None}
    t_aug = None
    if aug_features is not None:
        xa = np.asarray(aug_features, dtype=np.float64)
        if xa.shape != x.shape:
            raise ValidationError(f"augmented batch shape {xa.shape} != {x.shape}")
        acts_a = _encode(params, xa)
        hidden_a, t_aug = _project(params, acts_a[-1])
        cache["aug"] = (acts_a, hidden_a)
    if labels is None:
        labels = np.zeros(x.shape[0], dtype=np.int64)
    return BatchOutputs(logits, labels, t, t_aug, cache=cache)


def _backward_branch(params, acts, hidden, grad_feat, grad_t, grads):
    (w1, _), (w2, _) = params.projection
    if grad_t is not None:
        g2w, g2b = grads["projection"][1]
        g2w += grad_t.T @ hidden
        g2b += grad_t.sum(axis=0)
        gh = (grad_t @ w2) * (1.0 - hidden ** 2)
        g1w, g1b = grads["projection"][0]
        g1w += gh.T @ acts[-1]
        g1b += gh.sum(axis=0)
        grad_feat = grad_feat + gh @ w1
    for i in range(len(params.encoder) - 1, -1, -1):
        w, _ = params.encoder[i]
        gz = grad_feat * (1.0 - acts[i + 1] ** 2)
        gw, gb = grads["encoder"][i]
        gw += gz.T @ acts[i]
        gb += gz.sum(axis=0)
        grad_feat = gz @ w


def backward(params: NetworkParams, outputs: BatchOutputs, report: LossReport) -> NetworkParams:
    """Parameter gradients given the loss gradients w.r.t. the network outputs."""
    if outputs.cache is None:
        raise ValidationError("outputs carry no forward cache; call forward() first")
    zeros = params.map(np.zeros_like)
    grads = {"encoder": zeros.encoder, "projection": zeros.projection}
    wc, _ = params.classifier
    acts, hidden = outputs.cache["main"]

    gl = report.grad_logits
    gcw, gcb = zeros.classifier
    gcw += gl.T @ acts[-1]
    gcb += gl.sum(axis=0)
    _backward_branch(params, acts, hidden, gl @ wc, report.grad_ssl, grads)
    if report.grad_ssl_aug is not None:
        if outputs.cache["aug"] is None:
            raise ValidationError("gradient for the augmented view but no augmented forward pass")
        acts_a, hidden_a = outputs.cache["aug"]
        _backward_branch(params, acts_a, hidden_a, np.zeros_like(acts_a[-1]), report.grad_ssl_aug, grads)
    return zeros


# --- optimizers -----------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: NetworkParams, grads: NetworkParams, frozen_encoder: bool = False) -> NetworkParams:
        return _apply(params, grads, frozen_encoder, lambda i, p, g: p - self.lr * g)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: NetworkParams, grads: NetworkParams, frozen_encoder: bool = False) -> NetworkParams:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t

        def update(i, p, g):
            m = self.m.get(i, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(i, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[i], self.v[i] = m, v
            return p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

        return _apply(params, grads, frozen_encoder, update)


def _apply(params, grads, frozen_encoder, update) -> NetworkParams:
    n_enc = len(params.encoder)
    new_layers = []
    slot = 0
    for li, ((w, b), (gw, gb)) in enumerate(zip(params.layers(), grads.layers())):
        if frozen_encoder and li < n_enc:
            new_layers.append((w, b))
        else:
            new_layers.append((update(slot, w, gw), update(slot + 1, b, gb)))
        slot += 2
    return NetworkParams(new_layers[:n_enc], new_layers[n_enc], new_layers[n_enc + 1:])


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValidationError(f"unknown optimizer {name!r}; choose 'adam' or 'sgd'")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    freeze_encoder: bool = False
    sl_loss: str = "ce"
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    temperature: float = 0.5
    info_weight: float = 1.0
    jitter_std: float = 0.1
    seed: int = 0
    hidden: tuple = (64, 64)
    projection_dim: int = 16
    gce_q: float = 0.7
    peer_alpha: float = 1.0
    transition: TransitionMatrix | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValidationError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.jitter_std < 0:
            raise ValidationError(f"jitter_std must be >= 0, got {self.jitter_std}")

    def loss_kwargs(self) -> dict:
        return {"transition": self.transition, "q": self.gce_q, "alpha": self.peer_alpha}


def backward_and_step(params: NetworkParams, outputs: BatchOutputs, report: LossReport,
                      config: TrainConfig, optimizer=None) -> NetworkParams:
    """Backpropagate ``report`` and apply one optimizer update.

    Pass a persistent ``optimizer`` for stateful rules (Adam); a fresh one is
    built from ``config`` otherwise. Encoder arrays are returned untouched
    when ``config.freeze_encoder`` is set.
    """
    grads = backward(params, outputs, report)
    for i, (gw, gb) in enumerate(grads.layers()):
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise FloatingPointError(f"non-finite gradient in layer {i} (loss value {report.value})")
    optimizer = optimizer or make_optimizer(config.optimizer, config.learning_rate)
    return optimizer.step(params, grads, frozen_encoder=config.freeze_encoder)


def augment(batch_features, jitter_std: float, seed=None) -> np.ndarray:
    """Positive view: features plus i.i.d. N(0, jitter_std^2) noise."""
    if jitter_std < 0:
        raise ValidationError(f"jitter_std must be >= 0, got {jitter_std}")
    x = np.asarray(batch_features, dtype=np.float64)
    if jitter_std == 0:
        return x.copy()
    return x + stream_rng(seed, "augment").normal(0.0, jitter_std, x.shape)


def predict(params: NetworkParams, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    acts = _encode(params, x)
    logits = acts[-1] @ params.classifier[0].T + params.classifier[1]
    return np.argmax(logits, axis=1)  # ties resolve to the lowest class id


def evaluate(params: NetworkParams, dataset: Dataset, use_clean: bool = True) -> float:
    labels = dataset.clean_labels if use_clean else dataset.noisy_labels
    if labels is None:
        raise ValidationError("dataset has no noisy_labels column")
    return float(np.mean(predict(params, dataset.features) == labels))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    noisy_train_acc: float
    clean_train_acc: float
    clean_test_acc: float
    loss_sl: float
    loss_info: float
    loss_reg: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def __len__(self) -> int:
        return len(self.records)


def _batch_step(params, x, y, config, aug_rng, peer_rng, optimizer=None):
    x_aug = augment(x, config.jitter_std, aug_rng) if config.info_weight else None
    outputs = forward(params, x, x_aug, y)
    perms = None
    if config.sl_loss == "peer":
        perms = (peer_rng.permutation(len(y)), peer_rng.permutation(len(y)))
    report = total_loss(outputs, config.sl_loss, config.reg, config.temperature,
                        config.info_weight, peer_perms=perms, **config.loss_kwargs())
    if optimizer is not None:
        params = backward_and_step(params, outputs, report, config, optimizer)
    return params, report


def train(dataset: Dataset, test: Dataset, config: TrainConfig,
          init_params: NetworkParams | None = None, on_epoch=None) -> tuple[NetworkParams, TrainTrace]:
    """Minibatch training on the noisy labels of ``dataset``.

    Epoch 0 of the trace evaluates the initial network (accuracies and loss
    components over one pass without updates). ``on_epoch(record)`` is called
    after each record is appended.
    """
    if dataset.noisy_labels is None:
        raise ValidationError("training set needs noisy_labels")
    if test.n_features != dataset.n_features:
        raise ValidationError("train and test feature widths differ")
    streams = np.random.SeedSequence(config.seed, spawn_key=(100,)).spawn(5)  # disjoint from data streams
    init_seed, batch_seq, aug_seq, peer_seq, probe_seq = streams
    if init_params is None:
        params = init_network([dataset.n_features, *config.hidden], dataset.num_classes,
                              config.projection_dim, np.random.default_rng(init_seed))
    else:
        params = init_params.copy()
    batch_rng = np.random.default_rng(batch_seq)
    aug_rng = np.random.default_rng(aug_seq)
    peer_rng = np.random.default_rng(peer_seq)
    optimizer = make_optimizer(config.optimizer, config.learning_rate)
    trace = TrainTrace()
    x, y = dataset.features, dataset.noisy_labels

    def record(epoch, reports):
        rec = EpochRecord(
            epoch,
            evaluate(params, dataset, use_clean=False),
            evaluate(params, dataset, use_clean=True),
            evaluate(params, test, use_clean=True),
            float(np.mean([r.components["sl"] for r in reports])),
            float(np.mean([r.components["info"] for r in reports])),
            float(np.mean([r.components["reg"] for r in reports])),
        )
        trace.records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)

    probe_rng = np.random.default_rng(probe_seq)
    probe = []
    for idx in batches(dataset, config.batch_size, probe_rng):
        _, rep = _batch_step(params, x[idx], y[idx], config, probe_rng, probe_rng)
        probe.append(rep)
    record(0, probe)

    for epoch in range(1, config.epochs + 1):
        reports = []
        for idx in batches(dataset, config.batch_size, batch_rng):
            params, rep = _batch_step(params, x[idx], y[idx], config, aug_rng, peer_rng, optimizer)
            reports.append(rep)
        record(epoch, reports)
    return params, trace
