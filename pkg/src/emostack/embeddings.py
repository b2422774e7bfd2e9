"""Describes the embedding backend abstraction (a source of per-token vectors for cleaned texts),
the fine-tune/extract lifecycle, stacking of several backends' outputs and the on-disk
embedding cache.
"""

from collections import namedtuple
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
import dataclasses
import hashlib
import os
import struct

import numpy as np
from rich.progress import Progress

from .common import (
    AlignmentError,
    CacheError,
    CapabilityError,
    EmptyDatasetError,
    LoggingConsole,
    toLogger,
)
from .corpus import Dataset
from .preprocess import CleanText

kDefaultMaxLen = 32

kClsMarker = "[CLS]"
kSepMarker = "[SEP]"

kCacheMagic = b"EMBC"
kCacheVersion = 1


@dataclasses.dataclass(frozen=True)
class BackendSpec:
    """One entry of the run config `backends` list. Keys that don't apply to a backend kind are
    ignored by it."""

    name: str
    kind: str
    dim: int | None = None
    seed: int = 0
    model: str | None = None
    layer: int = -1
    fine_tune_epochs: int = 0
    keep_special_tokens: bool | None = None
    batch_size: int = 16
    learning_rate: float = 2e-5

    def asDict(self) -> dict:
        return dataclasses.asdict(self)


class TokenEmbeddingSequence(namedtuple("TokenEmbeddingSequence", ["matrix", "mask"])):
    """L x d float32 matrix of token vectors and a length L 0/1 mask of real tokens. Padding rows
    are zero."""

    __slots__ = ()

    def __new__(cls, matrix: np.ndarray, mask: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float32)
        mask = np.asarray(mask, dtype=np.uint8)
        assert matrix.ndim == 2 and mask.shape == (matrix.shape[0],)
        assert np.all((mask == 0) | (mask == 1))
        assert np.all(np.isfinite(matrix)), "embeddings must be finite"
        assert not np.any(matrix[mask == 0]), "padding rows must be zero"
        return super().__new__(cls, matrix, mask)

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


class StackedEmbedding(namedtuple("StackedEmbedding", ["matrix", "mask", "provenance"])):
    __slots__ = ()

    def __new__(cls, matrix: np.ndarray, mask: np.ndarray, provenance: Sequence[str]):
        matrix = np.asarray(matrix, dtype=np.float32)
        mask = np.asarray(mask, dtype=np.uint8)
        assert matrix.ndim == 2 and mask.shape == (matrix.shape[0],)
        return super().__new__(cls, matrix, mask, tuple(provenance))


class StackedBatch(namedtuple("StackedBatch", ["matrix", "mask", "provenance"])):
    """Stacked embeddings of a whole dataset: N x L x W float32 tensor, N x L mask, and the ordered
    backend names whose column blocks make up W."""

    __slots__ = ()

    def __new__(cls, matrix: np.ndarray, mask: np.ndarray, provenance: Sequence[str]):
        matrix = np.asarray(matrix, dtype=np.float32)
        mask = np.asarray(mask, dtype=np.uint8)
        assert matrix.ndim == 3 and mask.shape == matrix.shape[:2]
        return super().__new__(cls, matrix, mask, tuple(provenance))

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def width(self) -> int:
        return self.matrix.shape[2]

    def rows(self, indices) -> "StackedBatch":
        return StackedBatch(self.matrix[indices], self.mask[indices], self.provenance)

    def example(self, i: int) -> StackedEmbedding:
        return StackedEmbedding(self.matrix[i], self.mask[i], self.provenance)


class EmbeddingBackend:
    """Base class of embedding sources. A backend maps a cleaned text to a fixed length
    TokenEmbeddingSequence, one row per whitespace token (plus, optionally, the [CLS]/[SEP] marker
    rows), truncated or zero-padded to `max_len`.

    Derived classes implement `_embedTokens()` and, if they can adapt to the task, set
    `supports_training` and implement `_fineTune()`. `extract` must be a pure function of the
    backend state and the text, as it might be called concurrently from several threads.
    """

    supports_training = False

    def __init__(
        self, name: str, dim: int, max_len: int = kDefaultMaxLen, keep_special_tokens: bool = False
    ) -> None:
        assert isinstance(name, str) and len(name) > 0
        assert isinstance(dim, int) and dim >= 1
        assert isinstance(max_len, int) and max_len >= 1
        assert not keep_special_tokens or max_len >= 3, "max_len can't fit the marker rows"
        self._name = name
        self._dim = dim
        self._max_len = max_len
        self._keep_special = bool(keep_special_tokens)

    @classmethod
    def fromSpec(cls, spec: BackendSpec, max_len: int) -> "EmbeddingBackend":
        raise RuntimeError("DERIVED CLASS MUST IMPLEMENT METHOD")

    @property
    def name(self) -> str:
        return self._name

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def max_len(self) -> int:
        return self._max_len

    @property
    def keep_special_tokens(self) -> bool:
        return self._keep_special

    @property
    def cache_key(self) -> str | None:
        """A string identifying the backend state for the embedding cache, or None if outputs of the
        backend must not be cached."""
        return None

    def wordCapacity(self) -> int:
        return self._max_len - 2 if self._keep_special else self._max_len

    def _embedTokens(self, tokens: list[str]) -> np.ndarray:
        """Returns a (n_rows, dim) matrix for the (already truncated) whitespace tokens: one row per
        token, framed by the marker rows if keep_special_tokens is set."""
        raise RuntimeError("DERIVED CLASS MUST IMPLEMENT METHOD")

    def _fineTune(self, data: Dataset, epochs: int, logger: LoggingConsole | None):
        raise RuntimeError("DERIVED CLASS MUST IMPLEMENT METHOD")

    def exportSpec(self, spec: BackendSpec, out_dir: str) -> BackendSpec:
        """Returns a spec that rebuilds the current backend state. State the spec can't express
        (fine-tuned weights) is saved under `out_dir` and referenced relative to it."""
        return spec

    def extract(self, text: CleanText | str) -> TokenEmbeddingSequence:
        s = text.text if isinstance(text, CleanText) else text
        assert isinstance(s, str)
        tokens = s.split()[: self.wordCapacity()]
        matrix = np.zeros((self._max_len, self._dim), dtype=np.float32)
        mask = np.zeros(self._max_len, dtype=np.uint8)
        if len(tokens) == 0:
            return TokenEmbeddingSequence(matrix, mask)
        rows = np.asarray(self._embedTokens(tokens), dtype=np.float32)
        n = rows.shape[0]
        assert rows.shape == (len(tokens) + (2 if self._keep_special else 0), self._dim)
        matrix[:n] = rows
        mask[:n] = 1
        return TokenEmbeddingSequence(matrix, mask)

    def extractMany(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Extracts a batch of texts into an (N, L, d) tensor and an (N, L) mask. Backends that can
        batch their work more efficiently override this."""
        matrix = np.zeros((len(texts), self._max_len, self._dim), dtype=np.float32)
        mask = np.zeros((len(texts), self._max_len), dtype=np.uint8)
        for i, t in enumerate(texts):
            seq = self.extract(t)
            matrix[i], mask[i] = seq.matrix, seq.mask
        return matrix, mask


################################################################################
# lifecycle
################################################################################


def fineTune(
    backend: EmbeddingBackend,
    data: Dataset,
    epochs: int,
    debug_log: None | bool | LoggingConsole = None,
) -> EmbeddingBackend:
    """Adapts the backend to the labeled data. Returns the adapted backend, the argument itself is
    never modified. epochs=0 is a no-op for any backend."""
    assert isinstance(backend, EmbeddingBackend) and isinstance(data, Dataset)
    assert isinstance(epochs, int) and epochs >= 0
    if epochs == 0:
        return backend
    if not backend.supports_training:
        raise CapabilityError(f"backend '{backend.name}' doesn't support fine-tuning")
    if len(data) < 1:
        raise EmptyDatasetError(f"can't fine-tune backend '{backend.name}' on an empty dataset")
    return backend._fineTune(data, epochs, toLogger(debug_log))


def extract(backend: EmbeddingBackend, text: CleanText | str) -> TokenEmbeddingSequence:
    assert isinstance(backend, EmbeddingBackend)
    return backend.extract(text)


def stack(
    seqs: Sequence[TokenEmbeddingSequence], provenance: Sequence[str] | None = None
) -> StackedEmbedding:
    """Feature-wise concatenation of per-token sequences, columns in the order of `seqs`"""
    assert len(seqs) > 0
    assert all(isinstance(s, TokenEmbeddingSequence) for s in seqs)
    if provenance is None:
        provenance = [f"backend{i}" for i in range(len(seqs))]
    assert len(provenance) == len(seqs)

    first = seqs[0]
    for name, s in zip(provenance[1:], seqs[1:]):
        if s.length != first.length:
            raise AlignmentError(
                f"sequence length of '{name}' is {s.length}, '{provenance[0]}' has {first.length}"
            )
        if not np.array_equal(s.mask, first.mask):
            raise AlignmentError(f"token mask of '{name}' differs from '{provenance[0]}'")
    return StackedEmbedding(
        np.concatenate([s.matrix for s in seqs], axis=1), first.mask.copy(), provenance
    )


def toyBackend(
    dim: int, seed: int, max_len: int = kDefaultMaxLen, name: str = "toy", **kwargs
) -> EmbeddingBackend:
    from .backend_Toy import backend_Toy

    return backend_Toy(name, dim, seed, max_len=max_len, **kwargs)


################################################################################
# cache
################################################################################


def writeEmbeddingCache(path: str, matrix: np.ndarray, mask: np.ndarray) -> None:
    """Binary container: magic `EMBC`, uint16 version, uint32 N, L, d (all little-endian), then N*L
    mask bytes and the N*L*d float32 little-endian tensor in row-major order."""
    assert matrix.ndim == 3 and mask.shape == matrix.shape[:2]
    n, length, d = matrix.shape
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(kCacheMagic)
        f.write(struct.pack("<HIII", kCacheVersion, n, length, d))
        f.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    os.replace(tmp, path)


def readEmbeddingCache(path: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CacheError(f"can't read embedding cache '{path}': {e}") from e

    hdr = len(kCacheMagic) + struct.calcsize("<HIII")
    if len(blob) < hdr or blob[: len(kCacheMagic)] != kCacheMagic:
        raise CacheError(f"'{path}' isn't an embedding cache file")
    version, n, length, d = struct.unpack_from("<HIII", blob, len(kCacheMagic))
    if version != kCacheVersion:
        raise CacheError(f"'{path}' has cache version {version}, expected {kCacheVersion}")
    n_mask, n_data = n * length, n * length * d * 4
    if len(blob) != hdr + n_mask + n_data:
        raise CacheError(f"'{path}' is truncated or has trailing bytes")
    mask = np.frombuffer(blob, dtype=np.uint8, count=n_mask, offset=hdr).reshape(n, length)
    matrix = np.frombuffer(blob, dtype="<f4", count=n * length * d, offset=hdr + n_mask)
    return matrix.astype(np.float32).reshape(n, length, d), mask.copy()


def _cacheFileFor(cache_dir: str, backend: EmbeddingBackend, texts: Sequence[str]) -> str | None:
    key = backend.cache_key
    if key is None:
        return None
    h = hashlib.sha256()
    h.update(f"{key}\x00{backend.max_len}\x00{backend.dim}\x00".encode("utf-8"))
    for t in texts:
        h.update(t.encode("utf-8"))
        h.update(b"\n")
    return os.path.join(cache_dir, f"{backend.name}-{h.hexdigest()[:32]}.embc")


################################################################################
# dataset level
################################################################################


def extractDataset(
    backend: EmbeddingBackend,
    texts: Sequence[str],
    cache_dir: str | None = None,
    debug_log: None | bool | LoggingConsole = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Extracts all texts with one backend, going through the embedding cache when `cache_dir` is
    set and the backend is cacheable."""
    logger = toLogger(debug_log)
    cache_file = None if cache_dir is None else _cacheFileFor(cache_dir, backend, texts)
    if cache_file is not None and os.path.isfile(cache_file):
        matrix, mask = readEmbeddingCache(cache_file)
        if matrix.shape == (len(texts), backend.max_len, backend.dim):
            if logger is not None:
                logger.debug(f"'{backend.name}': embeddings loaded from cache '{cache_file}'")
            return matrix, mask
        if logger is not None:
            logger.warning(f"'{backend.name}': ignoring cache '{cache_file}' of a wrong shape")

    matrix, mask = backend.extractMany(texts)
    if cache_file is not None:
        os.makedirs(cache_dir, exist_ok=True)
        writeEmbeddingCache(cache_file, matrix, mask)
        if logger is not None:
            logger.debug(f"'{backend.name}': embeddings cached to '{cache_file}'")
    return matrix, mask


def stackDataset(
    backends: Sequence[EmbeddingBackend],
    texts: Sequence[str],
    workers: int = 1,
    cache_dir: str | None = None,
    show_progress: bool = False,
    debug_log: None | bool | LoggingConsole = None,
) -> StackedBatch:
    """Extracts every text with every backend and concatenates the per-token vectors in backend
    order. With workers > 1 the backends run in a thread pool; results are merged in the backend
    order regardless of completion order."""
    assert len(backends) > 0 and workers >= 1
    assert all(isinstance(b, EmbeddingBackend) for b in backends)
    logger = toLogger(debug_log)
    names = [b.name for b in backends]
    assert len(set(names)) == len(names), "backend names must be unique"

    lengths = {b.max_len for b in backends}
    if len(lengths) != 1:
        raise AlignmentError(f"backends disagree on the sequence length: {sorted(lengths)}")

    if show_progress:
        progress = Progress(transient=True)
        task = progress.add_task("Extracting embeddings", total=len(backends))
        progress.start()

    def _run(b: EmbeddingBackend):
        ret = extractDataset(b, texts, cache_dir, logger)
        if show_progress:
            progress.advance(task)
        return ret

    try:
        if workers == 1 or len(backends) == 1:
            results = [_run(b) for b in backends]
        else:
            with ThreadPoolExecutor(max_workers=min(workers, len(backends))) as pool:
                results = list(pool.map(_run, backends))
    finally:
        if show_progress:
            progress.stop()

    mask = results[0][1]
    for b, (_, m) in zip(backends[1:], results[1:]):
        if not np.array_equal(m, mask):
            raise AlignmentError(f"token masks of '{b.name}' differ from '{backends[0].name}'")
    if len(texts) == 0:
        width = sum(b.dim for b in backends)
        matrix = np.zeros((0, next(iter(lengths)), width), dtype=np.float32)
    else:
        matrix = np.concatenate([r[0] for r in results], axis=2)
    if logger is not None:
        logger.debug(f"Stacked {len(texts)} texts over {names}, width {matrix.shape[2]}")
    return StackedBatch(matrix, mask, names)
