import hashlib

import numpy as np

# also must use abs package path to be dynamically loadable
from emostack.embeddings import (
    BackendSpec,
    EmbeddingBackend,
    kClsMarker,
    kDefaultMaxLen,
    kSepMarker,
)


def toyTokenVector(token: str, dim: int, seed: int) -> np.ndarray:
    """Seeded hash projection of a token: the 8-byte blake2b digest of `token` keyed with the
    decimal seed seeds a numpy generator, which draws `dim` standard normal values."""
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=str(int(seed)).encode("ascii")
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(dim).astype(np.float32)


class backend_Toy(EmbeddingBackend):
    """Desk-scale stand-in for a pretrained encoder: every whitespace token maps to a fixed
    pseudo-random vector, so there's no context and nothing to fine-tune."""

    supports_training = True

    def __init__(
        self,
        name: str,
        dim: int,
        seed: int,
        max_len: int = kDefaultMaxLen,
        keep_special_tokens: bool = False,
    ) -> None:
        super().__init__(name, dim, max_len, keep_special_tokens)
        assert isinstance(seed, int)
        self._seed = seed
        self._vectors: dict[str, np.ndarray] = {}

    @classmethod
    def fromSpec(cls, spec: BackendSpec, max_len: int) -> "backend_Toy":
        return cls(
            spec.name,
            spec.dim,
            spec.seed,
            max_len=max_len,
            keep_special_tokens=bool(spec.keep_special_tokens),
        )

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def cache_key(self) -> str:
        return f"toy:{self._seed}:{int(self.keep_special_tokens)}"

    def _vector(self, token: str) -> np.ndarray:
        # may be filled concurrently, entries only depend on the token
        v = self._vectors.get(token)
        if v is None:
            v = toyTokenVector(token, self.dim, self._seed)
            self._vectors[token] = v
        return v

    def _embedTokens(self, tokens: list[str]) -> np.ndarray:
        if self.keep_special_tokens:
            tokens = [kClsMarker, *tokens, kSepMarker]
        return np.stack([self._vector(t) for t in tokens])

    def _fineTune(self, data, epochs, logger) -> "backend_Toy":
        if logger is not None:
            logger.debug(f"'{self.name}': toy backend has nothing to fine-tune")
        return self
