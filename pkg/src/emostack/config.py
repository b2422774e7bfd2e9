"""Run config: a YAML document that drives preprocessing, embedding extraction, training and
evaluation. Validation collects every violation (with its dotted key path) before raising a single
ConfigError.

Documented schema (defaults in brackets):

    seed: int [0]
    paths:
      train: path (required)
      dev: path [null]
      test: path [null]
      output_dir: path (required, created when missing)
      cache_dir: path [null], the EMOSTACK_CACHE_DIR environment variable overrides it
    preprocess:
      enabled: bool [true]
      emoji_map: path [null = built-in map]
      emoticon_map: path [null = built-in map]
      prefix_rules: list of [regex, replacement] [null = split a leading waw]
    backends: non-empty list, stacking order, each entry
      name: unique str (required)
      kind: toy | transformer | path to a .py file with a custom backend (required)
      dim: int (required for toy)
      seed: int [0]
      model: str (required for transformer), a local path or a hub id
      layer: int [-1], hidden layer to take vectors from
      fine_tune_epochs: int [0]
      keep_special_tokens: bool [false for toy, true for transformer], must agree across backends
      batch_size: int [16]
      learning_rate: float [2e-5]
    extract_workers: int [1]
    loss:
      mode: baseline | cw | lcm | cl | hybrid [hybrid]
      alpha, beta, gamma: float [0.3, 0.3, 0.4]
      lambda_reg: float [0.1]
      margin: float [1.0]
      similarity_rule: share_any | exact [share_any]
      lcm_mode: residual | penalty [residual]
    meta_learner: lstm_units [25], dropout [0.3], recurrent_dropout [0.3], dense_units [50],
      output_units [12], max_len [32], batch_size [32], learning_rate [0.001], epochs [100],
      threshold [0.5]

Relative paths resolve against the directory of the config file.
"""

from collections.abc import Mapping, Sequence
import dataclasses
import os

import yaml

from .backends import getBuiltinBackends
from .common import ConfigError, kEnvCacheDir
from .embeddings import BackendSpec
from .loss import HybridLossConfig, kLossModes
from .meta_learner import MetaLearnerConfig
from .preprocess import PreprocessConfig

kTopLevelKeys = (
    "seed",
    "paths",
    "preprocess",
    "backends",
    "extract_workers",
    "loss",
    "meta_learner",
)
kPathKeys = ("train", "dev", "test", "output_dir", "cache_dir")
kBackendKeys = tuple(f.name for f in dataclasses.fields(BackendSpec))
kLossKeys = ("mode", *(f.name for f in dataclasses.fields(HybridLossConfig)))
kMetaLearnerKeys = tuple(f.name for f in dataclasses.fields(MetaLearnerConfig))

# keep_special_tokens defaults per builtin kind, custom backends default to False
_kSpecialTokensDefault = {"toy": False, "transformer": True}


class RunPaths:
    def __init__(self, train, dev, test, output_dir, cache_dir) -> None:
        self.train: str = train
        self.dev: str | None = dev
        self.test: str | None = test
        self.output_dir: str = output_dir
        self.cache_dir: str | None = cache_dir


@dataclasses.dataclass(frozen=True)
class RunConfig:
    source: str
    seed: int
    paths: RunPaths
    preprocess_enabled: bool
    preprocess: PreprocessConfig
    backends: tuple[BackendSpec, ...]
    extract_workers: int
    loss_mode: str
    loss: HybridLossConfig
    meta_learner: MetaLearnerConfig
    snapshot: dict  # resolved document: every key present, paths as written

    def withBackends(self, names: Sequence[str]) -> "RunConfig":
        """Restricts (and reorders) stacking to the named backends"""
        known = {b.name: b for b in self.backends}
        unknown = [n for n in names if n not in known]
        if len(unknown) > 0:
            raise ConfigError(
                [f"--backends: '{n}' isn't a configured backend {list(known)}" for n in unknown]
            )
        if len(set(names)) != len(names) or len(names) == 0:
            raise ConfigError("--backends: names must be unique and non-empty")
        snap = dict(self.snapshot)
        snap["backends"] = [b for b in self.snapshot["backends"] if b["name"] in names]
        snap["backends"].sort(key=lambda b: list(names).index(b["name"]))
        return dataclasses.replace(
            self, backends=tuple(known[n] for n in names), snapshot=snap
        )

    def withLossMode(self, mode: str) -> "RunConfig":
        if mode not in kLossModes:
            raise ConfigError(f"loss.mode: must be one of {', '.join(kLossModes)}, got {mode!r}")
        snap = dict(self.snapshot)
        snap["loss"] = {**self.snapshot["loss"], "mode": mode}
        return dataclasses.replace(self, loss_mode=mode, snapshot=snap)


def _isInt(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _isNum(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _section(d: Mapping, key: str, violations: list[str]) -> dict:
    v = d.get(key)
    if v is None:
        return {}
    if not isinstance(v, dict):
        violations.append(f"{key}: must be a mapping")
        return {}
    return v


def _unknown(d: Mapping, allowed: Sequence[str], prefix: str, violations: list[str]) -> None:
    violations.extend(f"{prefix}{k}: unknown key" for k in sorted(map(str, set(d) - set(allowed))))


def _validateBackends(raw, base_dir: str, violations: list[str]) -> list[BackendSpec]:
    if not isinstance(raw, list) or len(raw) == 0:
        violations.append("backends: must be a non-empty list")
        return []
    builtin = {b.lower() for b in getBuiltinBackends()}
    specs, names = [], set()
    for i, b in enumerate(raw):
        pfx = f"backends[{i}]."
        if not isinstance(b, dict):
            violations.append(f"backends[{i}]: must be a mapping")
            continue
        n_before = len(violations)
        _unknown(b, kBackendKeys, pfx, violations)
        name, kind = b.get("name"), b.get("kind")
        if not isinstance(name, str) or len(name) == 0:
            violations.append(f"{pfx}name: required non-empty string")
        elif name in names:
            violations.append(f"{pfx}name: '{name}' is used twice")
        else:
            names.add(name)
        if not isinstance(kind, str) or len(kind) == 0:
            violations.append(f"{pfx}kind: required, one of {sorted(builtin)} or a .py file path")
        elif kind.lower() not in builtin:
            path = kind if os.path.isabs(kind) else os.path.join(base_dir, kind)
            if not os.path.isfile(path):
                violations.append(f"{pfx}kind: '{kind}' is neither a builtin backend nor a file")
            kind = path
        else:
            kind = kind.lower()

        if kind == "toy" and not (_isInt(b.get("dim")) and b["dim"] >= 1):
            violations.append(f"{pfx}dim: toy backends need a positive integer dim")
        elif "dim" in b and b["dim"] is not None and not (_isInt(b["dim"]) and b["dim"] >= 1):
            violations.append(f"{pfx}dim: must be a positive integer")
        if kind == "transformer" and not (isinstance(b.get("model"), str) and b["model"]):
            violations.append(f"{pfx}model: transformer backends need a model path or hub id")
        for k in ("seed", "layer"):
            if k in b and not _isInt(b[k]):
                violations.append(f"{pfx}{k}: must be an integer")
        for k in ("fine_tune_epochs",):
            if k in b and not (_isInt(b[k]) and b[k] >= 0):
                violations.append(f"{pfx}{k}: must be a non-negative integer")
        if "batch_size" in b and not (_isInt(b["batch_size"]) and b["batch_size"] >= 1):
            violations.append(f"{pfx}batch_size: must be a positive integer")
        if "learning_rate" in b and not (_isNum(b["learning_rate"]) and b["learning_rate"] > 0):
            violations.append(f"{pfx}learning_rate: must be positive")
        kst = b.get("keep_special_tokens")
        if kst is not None and not isinstance(kst, bool):
            violations.append(f"{pfx}keep_special_tokens: must be a boolean")

        if len(violations) == n_before:
            if kst is None:
                kst = _kSpecialTokensDefault.get(kind, False)
            fields = {k: v for k, v in b.items() if v is not None}
            fields.update(kind=kind, keep_special_tokens=kst)
            if isinstance(fields.get("learning_rate"), int):
                fields["learning_rate"] = float(fields["learning_rate"])
            specs.append(BackendSpec(**fields))

    if len(specs) == len(raw) and len({s.keep_special_tokens for s in specs}) > 1:
        violations.append(
            "backends: keep_special_tokens must be the same for all backends (toy defaults to "
            "false, transformer to true), otherwise token rows don't align"
        )
    return specs


def runConfigFromDict(d, source: str = "<dict>", base_dir: str = ".", env=None) -> RunConfig:
    env = os.environ if env is None else env
    if not isinstance(d, dict):
        raise ConfigError(f"{source}: the run config must be a mapping")
    violations: list[str] = []
    _unknown(d, kTopLevelKeys, "", violations)

    seed = d.get("seed", 0)
    if not _isInt(seed):
        violations.append(f"seed: must be an integer, got {seed!r}")
        seed = 0

    def _resolve(p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

    paths_raw = _section(d, "paths", violations)
    _unknown(paths_raw, kPathKeys, "paths.", violations)
    resolved = {}
    for k in kPathKeys:
        v = paths_raw.get(k)
        if v is None:
            if k in ("train", "output_dir"):
                violations.append(f"paths.{k}: required")
            resolved[k] = None
            continue
        if not isinstance(v, str) or len(v) == 0:
            violations.append(f"paths.{k}: must be a non-empty string")
            resolved[k] = None
            continue
        resolved[k] = _resolve(v)
        if k in ("train", "dev", "test") and not os.path.isfile(resolved[k]):
            violations.append(f"paths.{k}: file '{resolved[k]}' doesn't exist")
    env_cache = env.get(kEnvCacheDir)
    if env_cache:
        resolved["cache_dir"] = env_cache
    paths = RunPaths(**resolved)

    pre_raw = _section(d, "preprocess", violations)
    preprocess = None
    try:
        preprocess = PreprocessConfig.fromDict(pre_raw, base_dir)
    except ConfigError as e:
        violations.extend(e.violations)
    pre_enabled = pre_raw.get("enabled", True)

    backends = _validateBackends(d.get("backends"), base_dir, violations)

    workers = d.get("extract_workers", 1)
    if not (_isInt(workers) and workers >= 1):
        violations.append(f"extract_workers: must be a positive integer, got {workers!r}")

    loss_raw = _section(d, "loss", violations)
    _unknown(loss_raw, kLossKeys, "loss.", violations)
    mode = loss_raw.get("mode", "hybrid")
    if mode not in kLossModes:
        violations.append(f"loss.mode: must be one of {', '.join(kLossModes)}, got {mode!r}")
    loss = None
    try:
        loss = HybridLossConfig(**{k: v for k, v in loss_raw.items() if k in kLossKeys[1:]})
    except ConfigError as e:
        violations.extend(e.violations)

    ml_raw = _section(d, "meta_learner", violations)
    _unknown(ml_raw, kMetaLearnerKeys, "meta_learner.", violations)
    meta = None
    try:
        meta = MetaLearnerConfig(**{k: v for k, v in ml_raw.items() if k in kMetaLearnerKeys})
    except ConfigError as e:
        violations.extend(e.violations)

    if len(violations) > 0:
        raise ConfigError([f"{source}: {v}" for v in violations])

    snapshot = {
        "seed": seed,
        "paths": {k: paths_raw.get(k) for k in kPathKeys},
        "preprocess": {
            "enabled": pre_enabled,
            "emoji_map": pre_raw.get("emoji_map"),
            "emoticon_map": pre_raw.get("emoticon_map"),
            "prefix_rules": [list(r) for r in preprocess.prefix_rules],
        },
        "backends": [b.asDict() for b in backends],
        "extract_workers": workers,
        "loss": {"mode": mode, **dataclasses.asdict(loss)},
        "meta_learner": meta.asDict(),
    }
    for b in snapshot["backends"]:
        # custom backend files are recorded as written, not as resolved
        if b["kind"] not in _kSpecialTokensDefault:
            b["kind"] = next(
                r["kind"] for r in d["backends"] if r.get("name") == b["name"]
            )
    return RunConfig(
        source=source,
        seed=seed,
        paths=paths,
        preprocess_enabled=pre_enabled,
        preprocess=preprocess,
        backends=tuple(backends),
        extract_workers=workers,
        loss_mode=mode,
        loss=loss,
        meta_learner=meta,
        snapshot=snapshot,
    )


def loadRunConfig(path: str, env=None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            d = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"can't read run config '{path}': {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"'{path}' isn't valid YAML: {e}") from e
    return runConfigFromDict(d, path, os.path.dirname(os.path.abspath(path)), env)
