"""Embedding backends management"""

import os
import importlib
import importlib.util
import sys
from glob import glob

from .common import ConfigError
from .embeddings import BackendSpec, EmbeddingBackend

_kThisDir = os.path.dirname(__file__)
_kPfx = "backend_"


def _getBuiltinBackendFiles() -> list[str]:
    return glob(os.path.join(_kThisDir, f"{_kPfx}*.py"))


def _filepath2BackendId(fpath: str) -> str:
    return os.path.basename(fpath)[len(_kPfx) : -3]


def getBuiltinBackends() -> list[str]:
    return sorted(_filepath2BackendId(f) for f in _getBuiltinBackendFiles())


def _getBuiltinBackendIdFor(kind: str) -> str | None:
    kind = kind.lower()
    for bid in getBuiltinBackends():
        if bid.lower() == kind:
            return bid
    return None


def _loadBackendFrom(fpath: str):
    if not os.path.isfile(fpath):
        raise ConfigError(
            f"'{fpath}' is neither a builtin backend ({', '.join(getBuiltinBackends())}) nor a file"
        )
    module_name = os.path.splitext(os.path.basename(fpath))[0]
    spec = importlib.util.spec_from_file_location(module_name, fpath)
    module = importlib.util.module_from_spec(spec)
    sys.modules[module_name] = module
    spec.loader.exec_module(module)
    backend = getattr(module, module_name, None)
    if not (isinstance(backend, type) and issubclass(backend, EmbeddingBackend)):
        raise ConfigError(
            f"'{fpath}' must define class '{module_name}' derived from "
            "emostack.embeddings.EmbeddingBackend"
        )
    return backend


def getBackendFor(kind_or_filepath: str) -> type[EmbeddingBackend]:
    """Returns a class object corresponding to a given backend kind (if there's such built in
    backend, compared ignoring case) or to a backend class loaded from the given file path"""
    assert isinstance(kind_or_filepath, str) and len(kind_or_filepath) > 0

    builtin_id = _getBuiltinBackendIdFor(kind_or_filepath)
    if builtin_id is not None:
        module = importlib.import_module(f"emostack.{_kPfx}{builtin_id}")
        return getattr(module, f"{_kPfx}{builtin_id}")
    return _loadBackendFrom(kind_or_filepath)


def makeBackend(spec: BackendSpec, max_len: int) -> EmbeddingBackend:
    return getBackendFor(spec.kind).fromSpec(spec, max_len)
