"""Second-stage classifier over stacked token embeddings: a bidirectional LSTM (masked, with
variational input and recurrent dropout), a dense ReLU layer whose activation doubles as the
contrastive representation, and a sigmoid multi-label head. Also the training loop driven by the
hybrid loss, and the checkpoint container."""

from collections.abc import Sequence
import copy
import dataclasses
import json
import math
import struct

import numpy as np
from rich.progress import Progress
from scipy.special import expit
import torch
from torch import nn

from .common import (
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    EmptyDatasetError,
    LoggingConsole,
    NonFiniteLossError,
    ShapeError,
    toLogger,
)
from .corpus import Dataset, classDistribution, kNumLabels
from .embeddings import StackedBatch
from .loss import (
    LossPreset,
    computeClassWeights,
    hybridLossFromLogits,
    kEps,
    labelCorrelationMatrix,
    unitClassWeights,
)
from .metrics import microF1

kCheckpointMagic = b"EMSK"
kCheckpointVersion = 1


@dataclasses.dataclass(frozen=True)
class MetaLearnerConfig:
    lstm_units: int = 25
    dropout: float = 0.3
    recurrent_dropout: float = 0.3
    dense_units: int = 50
    output_units: int = kNumLabels
    max_len: int = 32
    batch_size: int = 32
    learning_rate: float = 0.001
    epochs: int = 100
    threshold: float = 0.5

    def __post_init__(self):
        violations = []
        for k in ("lstm_units", "dense_units", "output_units", "max_len", "batch_size"):
            v = getattr(self, k)
            if not (isinstance(v, int) and not isinstance(v, bool) and v >= 1):
                violations.append(f"meta_learner.{k}: must be a positive integer, got {v!r}")
        if not (isinstance(self.epochs, int) and not isinstance(self.epochs, bool)) or (
            self.epochs < 0
        ):
            violations.append(
                f"meta_learner.epochs: must be a non-negative integer, got {self.epochs!r}"
            )
        for k in ("dropout", "recurrent_dropout"):
            v = getattr(self, k)
            if not (isinstance(v, (int, float)) and 0.0 <= v < 1.0):
                violations.append(f"meta_learner.{k}: must lie in [0, 1), got {v!r}")
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0):
            violations.append(
                f"meta_learner.learning_rate: must be positive, got {self.learning_rate!r}"
            )
        if not (isinstance(self.threshold, (int, float)) and 0.0 < self.threshold < 1.0):
            violations.append(f"meta_learner.threshold: must lie in (0, 1), got {self.threshold!r}")
        if self.output_units != kNumLabels:
            violations.append(f"meta_learner.output_units: must be {kNumLabels}")
        if len(violations) > 0:
            raise ConfigError(violations)

    def asDict(self) -> dict:
        return dataclasses.asdict(self)


################################################################################
# network
################################################################################


class _BiLstmNet(nn.Module):
    def __init__(self, cfg: MetaLearnerConfig, input_width: int) -> None:
        super().__init__()
        self.units = cfg.lstm_units
        self.dropout = cfg.dropout
        self.recurrent_dropout = cfg.recurrent_dropout
        self.fwd = nn.LSTMCell(input_width, cfg.lstm_units)
        self.bwd = nn.LSTMCell(input_width, cfg.lstm_units)
        self.dense = nn.Linear(2 * cfg.lstm_units, cfg.dense_units)
        self.out = nn.Linear(cfg.dense_units, cfg.output_units)

    def _dropMask(self, shape, rate: float, generator: torch.Generator | None):
        if not self.training or rate <= 0.0:
            return None
        keep = torch.full(shape, 1.0 - rate)
        return torch.bernoulli(keep, generator=generator) / (1.0 - rate)

    def _run(self, cell: nn.LSTMCell, x, m, steps, generator):
        B = x.shape[0]
        h = x.new_zeros(B, self.units)
        c = x.new_zeros(B, self.units)
        # variational dropout: one mask per sequence, shared by all time steps
        in_mask = self._dropMask((B, x.shape[2]), self.dropout, generator)
        rec_mask = self._dropMask((B, self.units), self.recurrent_dropout, generator)
        for t in steps:
            xt = x[:, t] if in_mask is None else x[:, t] * in_mask
            ht = h if rec_mask is None else h * rec_mask
            h_new, c_new = cell(xt, (ht, c))
            mt = m[:, t : t + 1]
            # padded steps leave the state untouched
            h = mt * h_new + (1.0 - mt) * h
            c = mt * c_new + (1.0 - mt) * c
        return h

    def forward(
        self, x: torch.Tensor, mask: torch.Tensor, generator: torch.Generator | None = None
    ):
        L = x.shape[1]
        m = mask.to(x.dtype)
        h_f = self._run(self.fwd, x, m, range(L), generator)
        h_b = self._run(self.bwd, x, m, range(L - 1, -1, -1), generator)
        h = torch.relu(self.dense(torch.cat([h_f, h_b], dim=1)))
        return self.out(h), h


class MetaLearnerModel:
    """Holds the network together with what's needed to rebuild and use it: the config, the input
    width, the seed, and the provenance and backend specs of the embeddings it was trained on."""

    def __init__(
        self,
        cfg: MetaLearnerConfig,
        input_width: int,
        seed: int,
        net: _BiLstmNet,
        provenance: Sequence[str] = (),
        backend_specs: Sequence[dict] = (),
        preprocess: dict | None = None,
    ) -> None:
        self._cfg = cfg
        self._input_width = input_width
        self._seed = seed
        self._net = net
        self.provenance = tuple(provenance)
        self.backend_specs = [dict(s) for s in backend_specs]
        # cleaning settings the model was trained behind, None if texts were fed as is
        self.preprocess = None if preprocess is None else dict(preprocess)

    @property
    def cfg(self) -> MetaLearnerConfig:
        return self._cfg

    @property
    def input_width(self) -> int:
        return self._input_width

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def net(self) -> _BiLstmNet:
        return self._net

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self._net.state_dict().items()}


def build(
    cfg: MetaLearnerConfig,
    input_width: int,
    seed: int,
    provenance: Sequence[str] = (),
    backend_specs: Sequence[dict] = (),
) -> MetaLearnerModel:
    assert isinstance(cfg, MetaLearnerConfig)
    assert isinstance(input_width, int) and input_width >= 1
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _BiLstmNet(cfg, input_width)
    net.eval()
    return MetaLearnerModel(cfg, input_width, seed, net, provenance, backend_specs)


def _asTensors(model: MetaLearnerModel, x) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(x, StackedBatch):
        matrix, mask = x.matrix, x.mask
    else:
        matrix, mask = x
    matrix = np.asarray(matrix, dtype=np.float32)
    mask = np.asarray(mask)
    if matrix.ndim != 3 or matrix.shape[2] != model.input_width:
        raise ShapeError(
            f"model expects input of width {model.input_width}, got shape {matrix.shape}"
        )
    assert mask.shape == matrix.shape[:2]
    return torch.from_numpy(matrix), torch.from_numpy(mask.astype(np.float32))


def _probs(logits: torch.Tensor) -> np.ndarray:
    return np.clip(expit(logits.detach().double().numpy()), kEps, 1.0 - kEps)


def forward(
    model: MetaLearnerModel,
    x: StackedBatch | tuple[np.ndarray, np.ndarray],
    train_mode: bool = False,
    generator: torch.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Returns B x 12 probabilities and the B x dense_units representation. Dropout is active only
    with train_mode; `generator` makes its masks reproducible.

    Runs a float64 copy of the network: a row's outputs don't depend on the batch it comes in,
    beyond float64 rounding (well under 1e-12)."""
    xt, mt = _asTensors(model, x)
    net = copy.deepcopy(model.net).double()
    net.train(train_mode)
    with torch.no_grad():
        logits, h = net(xt.double(), mt.double(), generator)
    return _probs(logits), h.numpy()


def thresholdProbs(probs: np.ndarray, threshold: float) -> np.ndarray:
    assert 0.0 < threshold < 1.0
    return (np.asarray(probs) >= threshold).astype(np.int8)


def predict(
    model: MetaLearnerModel,
    x: StackedBatch | tuple[np.ndarray, np.ndarray],
    threshold: float | None = None,
) -> np.ndarray:
    threshold = model.cfg.threshold if threshold is None else threshold
    return thresholdProbs(forward(model, x)[0], threshold)


################################################################################
# training
################################################################################


class _HybridLossBridge(torch.autograd.Function):
    """Wraps the numpy hybridLossFromLogits() into autograd: the loss value goes forward, the
    analytic gradients w.r.t. the logits and the representation go backward."""

    @staticmethod
    def forward(ctx, logits, h, y_true, w, M, loss_cfg):
        res = hybridLossFromLogits(
            logits.detach().double().numpy(), y_true, h.detach().double().numpy(), w, M, loss_cfg
        )
        ctx.save_for_backward(
            torch.from_numpy(res.grad_pred).to(logits.dtype),
            torch.from_numpy(res.grad_embeddings).to(h.dtype),
        )
        return logits.new_tensor(res.value)

    @staticmethod
    def backward(ctx, grad_out):
        g_logits, g_h = ctx.saved_tensors
        return grad_out * g_logits, grad_out * g_h, None, None, None, None


def batchLoss(
    model: MetaLearnerModel,
    x: StackedBatch,
    y_true: np.ndarray,
    w: np.ndarray,
    M: np.ndarray,
    preset: LossPreset,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Differentiable hybrid loss of the model on one batch, in train mode"""
    xt, mt = _asTensors(model, x)
    model.net.train()
    logits, h = model.net(xt, mt, generator)
    return _HybridLossBridge.apply(logits, h, np.asarray(y_true), w, M, preset.cfg)


class TrainingState:
    def __init__(self) -> None:
        self._loss_history: list[float] = []
        self._dev_f1_history: list[float] = []
        self._best_epoch: int | None = None
        self._best_dev_f1: float | None = None
        self.optimizer_state: dict | None = None

    @property
    def epochs_completed(self) -> int:
        return len(self._loss_history)

    @property
    def loss_history(self) -> list[float]:
        return self._loss_history

    @property
    def dev_f1_history(self) -> list[float]:
        return self._dev_f1_history

    @property
    def best_epoch(self) -> int | None:
        """1-based epoch whose parameters the model holds after training, None if nothing ran"""
        return self._best_epoch

    @property
    def best_dev_f1(self) -> float | None:
        return self._best_dev_f1


def train(
    model: MetaLearnerModel,
    train_data: Dataset,
    train_x: StackedBatch,
    dev_data: Dataset | None,
    dev_x: StackedBatch | None,
    preset: LossPreset,
    cfg: MetaLearnerConfig | None = None,
    show_progress: bool = False,
    debug_log: None | bool | LoggingConsole = None,
) -> TrainingState:
    """Trains the model in place with Adam for cfg.epochs epochs. Each epoch visits the training
    set in a seeded random order. When dev data is given, the model ends up with the parameters of
    the epoch with the best dev micro-F1 (the earliest on ties), otherwise with the last epoch's.

    Class weights (for class weighted presets) and the label correlation matrix come from the
    training labels.
    """
    cfg = model.cfg if cfg is None else cfg
    assert isinstance(cfg, MetaLearnerConfig) and isinstance(preset, LossPreset)
    assert isinstance(train_data, Dataset) and isinstance(train_x, StackedBatch)
    assert (dev_data is None) == (dev_x is None)
    logger = toLogger(debug_log)

    N = len(train_data)
    if N < 1:
        raise EmptyDatasetError("can't train on an empty dataset")
    if len(train_x) != N:
        raise ShapeError(f"{len(train_x)} embedded rows for {N} training examples")
    if dev_data is not None and len(dev_x) != len(dev_data):
        raise ShapeError(f"{len(dev_x)} embedded rows for {len(dev_data)} dev examples")
    if dev_data is not None and len(dev_data) == 0:
        dev_data = dev_x = None

    Y = train_data.label_matrix
    w = computeClassWeights(classDistribution(train_data)).w
    w = w if preset.class_weighted else unitClassWeights(Y.shape[1])
    M = labelCorrelationMatrix(train_data).M

    state = TrainingState()
    if cfg.epochs == 0:
        return state

    net = model.net
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    generator = torch.Generator().manual_seed(model.seed)
    best_params = None

    if show_progress:
        progress = Progress(transient=True)
        task = progress.add_task("Training", total=cfg.epochs)
        progress.start()
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(model.seed + epoch).permutation(N)
            total = 0.0
            for bi, start in enumerate(range(0, N, cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                loss = batchLoss(model, train_x.rows(idx), Y[idx], w, M, preset, generator)
                value = float(loss.detach())
                if not np.isfinite(value):
                    raise NonFiniteLossError(epoch + 1, bi, value)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += value * len(idx)
            net.eval()
            state._loss_history.append(total / N)

            improved = True
            if dev_data is not None:
                f1 = microF1(dev_data.label_matrix, predict(model, dev_x, cfg.threshold))
                state._dev_f1_history.append(f1)
                improved = state._best_dev_f1 is None or f1 > state._best_dev_f1
                if improved:
                    state._best_dev_f1 = f1
            if improved:
                state._best_epoch = epoch + 1
                best_params = copy.deepcopy(net.state_dict())
                if logger is not None and dev_data is not None:
                    logger.debug(f"epoch {epoch + 1}: new best dev micro-F1 {f1:.4f}")
            if logger is not None:
                logger.debug(f"epoch {epoch + 1}/{cfg.epochs}: loss {total / N:.6f}")
            if show_progress:
                progress.advance(task)
    finally:
        net.eval()
        if show_progress:
            progress.stop()

    net.load_state_dict(best_params)
    state.optimizer_state = optimizer.state_dict()
    if logger is not None:
        logger.info(
            f"Trained {cfg.epochs} epochs, final loss {state.loss_history[-1]:.6f}, "
            f"keeping epoch {state.best_epoch}"
        )
    return state


################################################################################
# checkpoint
################################################################################


def save(model: MetaLearnerModel, path: str) -> None:
    """Checkpoint container (little-endian): magic `EMSK`, uint16 version, uint32 length + UTF-8
    JSON config block, uint32 tensor count, then per tensor: uint16 name length, UTF-8 name, uint8
    ndim, ndim uint32 dims and row-major float32 data."""
    config = {
        "meta_learner": model.cfg.asDict(),
        "input_width": model.input_width,
        "seed": model.seed,
        "provenance": list(model.provenance),
        "backends": model.backend_specs,
        "preprocess": model.preprocess,
    }
    cfg_blob = json.dumps(config, sort_keys=True, ensure_ascii=False).encode("utf-8")
    tensors = model.net.state_dict()

    parts = [kCheckpointMagic, struct.pack("<HI", kCheckpointVersion, len(cfg_blob)), cfg_blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        bname = name.encode("utf-8")
        arr = t.detach().numpy().astype("<f4")
        parts.append(struct.pack("<H", len(bname)) + bname + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes, path: str) -> None:
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError(f"'{self.path}' is truncated")
        ret = self.blob[self.pos : self.pos + n]
        self.pos += n
        return ret

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def readCheckpointConfig(path: str) -> dict:
    return _readCheckpoint(path)[0]


def _readCheckpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CorruptCheckpointError(f"can't read checkpoint '{path}': {e}") from e

    r = _Reader(blob, path)
    if r.take(len(kCheckpointMagic)) != kCheckpointMagic:
        raise CorruptCheckpointError(f"'{path}' isn't a checkpoint file")
    (version,) = r.unpack("<H")
    if version != kCheckpointVersion:
        raise CheckpointVersionError(
            f"'{path}' has checkpoint version {version}, this build reads {kCheckpointVersion}"
        )
    (cfg_len,) = r.unpack("<I")
    try:
        config = json.loads(r.take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"'{path}' has a damaged config block") from e

    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpointError(f"'{path}' has a damaged tensor name") from e
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        count = math.prod(dims)
        if 4 * count > len(blob) - r.pos:
            raise CorruptCheckpointError(
                f"'{path}': tensor '{name}' of shape {dims} runs past the end of the file"
            )
        data = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32)
        tensors[name] = data.reshape(dims)
    if r.pos != len(blob):
        raise CorruptCheckpointError(f"'{path}' has trailing bytes")
    return config, tensors


def load(path: str, expected_input_width: int | None = None) -> MetaLearnerModel:
    config, tensors = _readCheckpoint(path)
    try:
        cfg = MetaLearnerConfig(**config["meta_learner"])
        input_width = int(config["input_width"])
        seed = int(config["seed"])
    except (KeyError, TypeError, ValueError, ConfigError) as e:
        raise CorruptCheckpointError(f"'{path}' has an invalid config block: {e}") from e
    if expected_input_width is not None and expected_input_width != input_width:
        raise ShapeError(
            f"checkpoint '{path}' expects input width {input_width}, got {expected_input_width}"
        )

    model = build(cfg, input_width, seed, config.get("provenance", ()), config.get("backends", ()))
    model.preprocess = config.get("preprocess")
    own = model.net.state_dict()
    if set(own) != set(tensors) or any(own[k].shape != tensors[k].shape for k in own):
        raise CorruptCheckpointError(f"'{path}' tensors don't match the network layout")
    model.net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    return model
