"""What the `emostack` subcommands do. Every command is a plain function returning what it produced,
so the pipeline can be driven from Python the same way the CLI drives it."""

from collections.abc import Sequence
import dataclasses
import io
import json
import os

import numpy as np

from . import meta_learner
from .backends import makeBackend
from .common import (
    CheckpointError,
    ConfigError,
    CorruptCheckpointError,
    DataError,
    EmptyDatasetError,
    LoggingConsole,
    ShapeError,
    fileSha256,
    kEnvCacheDir,
    toLogger,
)
from .config import RunConfig, loadRunConfig
from .corpus import (
    Dataset,
    classDistribution,
    kDefaultSchema,
    kIdColumn,
    loadTextTsv,
    loadTsv,
    saveTsv,
)
from .embeddings import BackendSpec, EmbeddingBackend, StackedBatch, fineTune, stackDataset
from .loss import kLossModes, lossConfigForMode
from .metrics import EvaluationReport, classwiseReport
from .preprocess import PreprocessConfig, cleanTexts, preprocessDataset
from .render import exportConsole, renderAblation, renderClassDistribution, renderReport

kCheckpointFile = "model.emsk"
kManifestFile = "manifest.json"
kPredictionsFile = "predictions.tsv"
kReportStem = "report"
kEvaluationStem = "evaluation"
kEmptyLogSuffix = ".empty.log"


################################################################################
# helpers
################################################################################


def _writeJson(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, sort_keys=True, indent=2, ensure_ascii=False)
        f.write("\n")


def writePredictions(path: str, ids: Sequence[str], y_pred: np.ndarray) -> None:
    """Prediction TSV: header `ID<TAB><12 labels>`, then one row of 0/1 cells per input row"""
    y_pred = np.asarray(y_pred)
    assert y_pred.shape == (len(ids), len(kDefaultSchema))
    rows = ["\t".join([kIdColumn, *kDefaultSchema.labels])]
    rows.extend("\t".join([i, *(str(int(v)) for v in r)]) for i, r in zip(ids, y_pred))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(rows) + "\n")


def writeReport(report: EvaluationReport, out_dir: str, stem: str, title: str) -> tuple[str, str]:
    """Writes `<stem>.json` (EvaluationReport.toDict()) and `<stem>.txt` (the rendered tables)"""
    json_path = os.path.join(out_dir, f"{stem}.json")
    txt_path = os.path.join(out_dir, f"{stem}.txt")
    _writeJson(json_path, report.toDict())
    con = LoggingConsole(record=True, file=io.StringIO(), width=100, color_system=None)
    renderReport(report, con, title=title)
    exportConsole(con, txt_path, "txt", light=False)
    return json_path, txt_path


def preprocessSnapshot(cfg: PreprocessConfig | None) -> dict | None:
    """Self-contained form of the cleaning settings, stored in checkpoints"""
    if cfg is None:
        return None
    return {
        "emoji_map": dict(cfg.emoji_map),
        "emoticon_map": dict(cfg.emoticon_map),
        "prefix_rules": [list(r) for r in cfg.prefix_rules],
    }


def _preprocessFromSnapshot(snap: dict | None, path: str) -> PreprocessConfig | None:
    if snap is None:
        return None
    try:
        return PreprocessConfig(
            snap["emoji_map"], snap["emoticon_map"], tuple(tuple(r) for r in snap["prefix_rules"])
        )
    except (KeyError, TypeError, ConfigError) as e:
        raise CorruptCheckpointError(f"'{path}' has invalid preprocess settings: {e}") from e


def _loadSplit(path: str, cfg: RunConfig, logger: LoggingConsole | None) -> Dataset:
    d = loadTsv(path, allow_empty_text=not cfg.preprocess_enabled, debug_log=logger)
    if cfg.preprocess_enabled:
        d, _ = preprocessDataset(d, cfg.preprocess, debug_log=logger)
    return d


def _backendsFromCheckpoint(
    model: meta_learner.MetaLearnerModel, path: str, logger: LoggingConsole | None
) -> list[EmbeddingBackend]:
    if len(model.backend_specs) == 0:
        raise CheckpointError(f"'{path}' doesn't record the embedding backends it was trained on")
    base = os.path.dirname(os.path.abspath(path))
    ret = []
    for d in model.backend_specs:
        try:
            spec = BackendSpec(**d)
        except TypeError as e:
            raise CorruptCheckpointError(f"'{path}' has an invalid backend spec: {e}") from e
        # fine-tuned weights are saved next to the checkpoint
        if spec.model is not None and not os.path.isabs(spec.model):
            local = os.path.join(base, spec.model)
            if os.path.isdir(local):
                spec = dataclasses.replace(spec, model=local)
        ret.append(makeBackend(spec, model.cfg.max_len))
        if logger is not None:
            logger.debug(f"Backend '{spec.name}' ({spec.kind}) restored from the checkpoint")
    if tuple(b.name for b in ret) != model.provenance:
        raise CorruptCheckpointError(
            f"'{path}': backend specs {[b.name for b in ret]} don't match the recorded provenance "
            f"{list(model.provenance)}"
        )
    return ret


def _predictAll(model: meta_learner.MetaLearnerModel, x: StackedBatch, threshold) -> np.ndarray:
    if x.width != model.input_width:
        raise ShapeError(f"model expects input of width {model.input_width}, got {x.width}")
    if len(x) == 0:
        return np.zeros((0, len(kDefaultSchema)), dtype=np.int8)
    return meta_learner.predict(model, x, threshold)


################################################################################
# commands
################################################################################


def cmdPreprocess(
    in_tsv: str,
    out_tsv: str,
    cfg: PreprocessConfig | None = None,
    drop_empty: bool = False,
    debug_log: None | bool | LoggingConsole = None,
) -> list[str]:
    """Rewrites a corpus TSV with every Tweet cleaned. Ids of rows that became empty are listed in
    the `<out_tsv>.empty.log` sidecar (removed when there are none) and returned."""
    logger = toLogger(debug_log)
    cfg = PreprocessConfig.default() if cfg is None else cfg
    d = loadTsv(in_tsv, debug_log=logger)
    cleaned, empty_ids = preprocessDataset(d, cfg, drop_empty, logger)
    saveTsv(cleaned, out_tsv)

    sidecar = out_tsv + kEmptyLogSuffix
    if len(empty_ids) > 0:
        with open(sidecar, "w", encoding="utf-8", newline="\n") as f:
            f.write("".join(f"{i}\n" for i in empty_ids))
        if logger is not None:
            logger.warning(f"Ids of rows empty after cleaning are listed in '{sidecar}'")
    elif os.path.isfile(sidecar):
        os.remove(sidecar)
    if logger is not None:
        logger.info(f"Wrote {len(cleaned)} cleaned rows to '{out_tsv}'")
    return empty_ids


def cmdTrain(
    config_path: str,
    modes: Sequence[str] | None = None,
    backends: Sequence[str] | None = None,
    show_progress: bool = False,
    debug_log: None | bool | LoggingConsole = None,
) -> list[str]:
    """Runs preprocess -> fine-tune -> extract -> stack -> train -> evaluate for each loss mode and
    returns the paths of the written manifests. With a single mode artifacts go straight to the
    output dir, otherwise into one subdirectory per mode. `backends` restricts stacking to the named
    subset of the configured backends.

    Embeddings are extracted once and shared by all modes."""
    logger = toLogger(debug_log)
    cfg = loadRunConfig(config_path)
    if backends is not None and len(backends) > 0:
        cfg = cfg.withBackends(backends)
    modes = [cfg.loss_mode] if modes is None or len(modes) == 0 else list(modes)
    bad = [m for m in modes if m not in kLossModes]
    if len(bad) > 0 or len(set(modes)) != len(modes):
        raise ConfigError(
            f"--modes must be distinct values of {', '.join(kLossModes)}, got {', '.join(modes)}"
        )
    presets = {m: lossConfigForMode(m, cfg.loss) for m in modes}

    train_d = _loadSplit(cfg.paths.train, cfg, logger)
    if len(train_d) == 0:
        raise EmptyDatasetError(f"training file '{cfg.paths.train}' has no rows")
    dev_d = None if cfg.paths.dev is None else _loadSplit(cfg.paths.dev, cfg, logger)
    test_d = None if cfg.paths.test is None else _loadSplit(cfg.paths.test, cfg, logger)
    if logger is not None:
        dist = classDistribution(train_d)
        zero = [lb for lb, c in dist.asDict().items() if c == 0]
        if len(zero) > 0:
            logger.warning(f"Labels without training examples: {', '.join(zero)}")

    max_len = cfg.meta_learner.max_len
    models = []
    for spec in cfg.backends:
        b = makeBackend(spec, max_len)
        models.append(fineTune(b, train_d, spec.fine_tune_epochs, logger))

    def _embed(d: Dataset | None) -> StackedBatch | None:
        if d is None:
            return None
        return stackDataset(
            models, d.texts, cfg.extract_workers, cfg.paths.cache_dir, show_progress, logger
        )

    train_x, dev_x, test_x = _embed(train_d), _embed(dev_d), _embed(test_d)
    eval_name, eval_d, eval_x = next(
        (n, d, x)
        for n, d, x in (
            ("test", test_d, test_x),
            ("dev", dev_d, dev_x),
            ("train", train_d, train_x),
        )
        if d is not None and len(d) > 0
    )
    if eval_name == "train" and logger is not None:
        logger.warning("No dev or test rows, the final report is computed on the training data")

    out_root = cfg.paths.output_dir
    os.makedirs(out_root, exist_ok=True)
    exported = [b.exportSpec(s, out_root) for b, s in zip(models, cfg.backends)]
    inputs = {
        k: fileSha256(p)
        for k, p in (("train", cfg.paths.train), ("dev", cfg.paths.dev), ("test", cfg.paths.test))
        if p is not None
    }

    manifests = []
    for mode in modes:
        out_dir = out_root if len(modes) == 1 else os.path.join(out_root, mode)
        os.makedirs(out_dir, exist_ok=True)
        specs = []
        for orig, e in zip(cfg.backends, exported):
            if e.model != orig.model:
                e = dataclasses.replace(
                    e, model=os.path.relpath(os.path.join(out_root, e.model), out_dir)
                )
            specs.append(e.asDict())

        preset = presets[mode]
        model = meta_learner.build(
            cfg.meta_learner, train_x.width, cfg.seed, train_x.provenance, specs
        )
        model.preprocess = preprocessSnapshot(cfg.preprocess if cfg.preprocess_enabled else None)
        if logger is not None:
            logger.info(f"Training the meta-learner with the '{mode}' loss")
        state = meta_learner.train(
            model,
            train_d,
            train_x,
            dev_d,
            dev_x,
            preset,
            show_progress=show_progress,
            debug_log=logger,
        )

        ckpt = os.path.join(out_dir, kCheckpointFile)
        meta_learner.save(model, ckpt)
        y_pred = _predictAll(model, eval_x, None)
        report = classwiseReport(eval_d.label_matrix, y_pred)
        pred_path = os.path.join(out_dir, kPredictionsFile)
        writePredictions(pred_path, eval_d.ids, y_pred)
        writeReport(report, out_dir, kReportStem, f"'{mode}' loss, {eval_name} split")

        manifest = {
            "config": cfg.withLossMode(mode).snapshot,
            "seed": cfg.seed,
            "loss_mode": mode,
            "loss": {**dataclasses.asdict(preset.cfg), "class_weighted": preset.class_weighted},
            "provenance": list(train_x.provenance),
            "input_width": train_x.width,
            "checksums": {
                "inputs": inputs,
                "checkpoint": fileSha256(ckpt),
                "predictions": fileSha256(pred_path),
            },
            "epochs_completed": state.epochs_completed,
            "loss_history": state.loss_history,
            "dev_f1_history": state.dev_f1_history,
            "best_epoch": state.best_epoch,
            "best_dev_f1": state.best_dev_f1,
            "evaluated_on": eval_name,
            "report": report.toDict(),
        }
        path = os.path.join(out_dir, kManifestFile)
        _writeJson(path, manifest)
        manifests.append(path)
        if logger is not None:
            logger.info(
                f"'{mode}': {eval_name} micro-F1 {report.f1_micro:.4f}, Jaccard "
                f"{report.jaccard_accuracy:.4f}, Hamming {report.hamming_loss:.4f} -> '{path}'"
            )
    return manifests


def cmdEvaluate(
    checkpoint: str,
    test_tsv: str,
    config_path: str,
    show_progress: bool = False,
    debug_log: None | bool | LoggingConsole = None,
) -> EvaluationReport:
    """Scores a checkpoint on a labeled TSV. The checkpoint supplies the backends, the cleaning
    settings and the threshold; the run config supplies the output dir, the embedding cache and the
    extraction workers. Writes `evaluation.json` and `evaluation.txt` into the output dir."""
    logger = toLogger(debug_log)
    cfg = loadRunConfig(config_path)
    model = meta_learner.load(checkpoint)
    pre = _preprocessFromSnapshot(model.preprocess, checkpoint)
    backends = _backendsFromCheckpoint(model, checkpoint, logger)

    d = loadTsv(test_tsv, allow_empty_text=pre is None, debug_log=logger)
    if pre is not None:
        d, _ = preprocessDataset(d, pre, debug_log=logger)
    if len(d) == 0:
        raise EmptyDatasetError(f"'{test_tsv}' has no rows to evaluate on")
    x = stackDataset(
        backends, d.texts, cfg.extract_workers, cfg.paths.cache_dir, show_progress, logger
    )
    report = classwiseReport(d.label_matrix, _predictAll(model, x, None))

    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    title = f"Evaluation on '{os.path.basename(test_tsv)}'"
    json_path, txt_path = writeReport(report, cfg.paths.output_dir, kEvaluationStem, title)
    if logger is not None:
        logger.info(f"Reports written to '{json_path}' and '{txt_path}'")
    return report


def cmdPredict(
    checkpoint: str,
    input_tsv: str,
    out_tsv: str,
    threshold: float | None = None,
    show_progress: bool = False,
    debug_log: None | bool | LoggingConsole = None,
) -> np.ndarray:
    """Labels an `ID<TAB>Tweet` file (further columns are ignored). Everything besides the input
    comes from the checkpoint; `threshold` overrides the one it was trained with."""
    logger = toLogger(debug_log)
    if threshold is not None and not (0.0 < threshold < 1.0):
        raise ConfigError(f"--threshold must lie in (0, 1), got {threshold}")
    model = meta_learner.load(checkpoint)
    pre = _preprocessFromSnapshot(model.preprocess, checkpoint)
    backends = _backendsFromCheckpoint(model, checkpoint, logger)

    rows = loadTextTsv(input_tsv)
    ids = [r[0] for r in rows]
    texts = [r[1] for r in rows]
    if pre is not None:
        texts = cleanTexts(texts, pre)
    cache_dir = os.environ.get(kEnvCacheDir) or None
    x = stackDataset(backends, texts, 1, cache_dir, show_progress, logger)
    y_pred = _predictAll(model, x, threshold)
    writePredictions(out_tsv, ids, y_pred)
    if logger is not None:
        logger.info(f"Wrote predictions for {len(ids)} rows to '{out_tsv}'")
    return y_pred


def _readManifest(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            m = json.load(f)
        EvaluationReport.fromDict(m["report"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, AssertionError) as e:
        raise DataError(f"'{path}' isn't a readable run manifest: {e}") from e
    return m


def cmdReport(
    manifests: Sequence[str],
    distribution_tsv: str | None = None,
    console: LoggingConsole | None = None,
    dark_theme: bool = True,
) -> list[tuple[str, EvaluationReport]]:
    """Renders a single manifest's report, or a side by side comparison of several manifests, and
    optionally the class distribution of a corpus TSV. Returns the (column name, report) pairs."""
    if len(manifests) == 0 and distribution_tsv is None:
        raise ConfigError("report needs at least one manifest or --distribution")
    runs = []
    for p in manifests:
        m = _readManifest(p)
        name = str(m.get("loss_mode", os.path.basename(p)))
        if name in (n for n, _ in runs):
            name = f"{name} ({os.path.basename(os.path.dirname(os.path.abspath(p)))})"
        runs.append((name, EvaluationReport.fromDict(m["report"])))

    if len(runs) == 1:
        renderReport(runs[0][1], console, title=f"'{runs[0][0]}' loss", dark_theme=dark_theme)
    elif len(runs) > 1:
        renderAblation(runs, console, dark_theme=dark_theme)

    if distribution_tsv is not None:
        d = loadTsv(distribution_tsv, allow_empty_text=True, debug_log=console)
        renderClassDistribution(classDistribution(d), console, dark_theme=dark_theme)
    return runs
