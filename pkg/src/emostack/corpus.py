"""Emotion corpus handling: the label schema, SemEval-2018 E-c style TSV reading/writing, class
statistics and seeded splits."""

from collections import namedtuple
from collections.abc import Iterable, Sequence
import numpy as np

from .common import (
    ConfigError,
    EmptyDatasetError,
    LoggingConsole,
    TsvParseError,
    ValidationError,
    toLogger,
)

kEmotionLabels = (
    "anger",
    "anticipation",
    "disgust",
    "fear",
    "joy",
    "love",
    "optimism",
    "pessimism",
    "sadness",
    "surprise",
    "trust",
    "neutral",
)
kNumLabels = len(kEmotionLabels)

# the label that the original SemEval distribution doesn't have
kPaddableLabel = "neutral"

kIdColumn = "ID"
kTextColumn = "Tweet"

kSplitTolerance = 1e-9


class EmotionLabelSet:
    """Ordered, fixed list of label names. The order defines the column order of every label vector
    and label matrix."""

    def __init__(self, labels: Iterable[str] = kEmotionLabels) -> None:
        labels = tuple(labels)
        assert all(isinstance(lb, str) and len(lb) > 0 for lb in labels)
        assert len(labels) == kNumLabels, f"schema must have exactly {kNumLabels} labels"
        assert len(frozenset(labels)) == len(labels), "label names must be unique"
        self._labels = labels

    @property
    def labels(self) -> tuple[str, ...]:
        return self._labels

    def __len__(self) -> int:
        return len(self._labels)

    def __iter__(self):
        return iter(self._labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, EmotionLabelSet) and self._labels == other._labels

    def __hash__(self) -> int:
        return hash(self._labels)

    def index(self, label: str) -> int:
        return self._labels.index(label)


kDefaultSchema = EmotionLabelSet()


class Example(namedtuple("Example", ["id", "raw_text", "labels"])):
    __slots__ = ()

    def __new__(cls, id: str, raw_text: str, labels: Sequence[int] | np.ndarray):
        assert isinstance(id, str) and isinstance(raw_text, str)
        labels = np.asarray(labels, dtype=np.int8)
        assert labels.shape == (kNumLabels,), f"labels must be a vector of {kNumLabels} entries"
        assert np.all((labels == 0) | (labels == 1)), "label components must be 0 or 1"
        labels.setflags(write=False)
        return super().__new__(cls, id, raw_text, labels)


class ClassDistribution(namedtuple("ClassDistribution", ["counts", "total"])):
    """Per-class positive instance counts |C_c| and the number of instances N"""

    __slots__ = ()

    def __new__(cls, counts: np.ndarray, total: int):
        counts = np.asarray(counts, dtype=np.int64)
        assert counts.shape == (kNumLabels,)
        assert isinstance(total, (int, np.integer)) and total >= 0
        assert np.all((counts >= 0) & (counts <= total))
        counts.setflags(write=False)
        return super().__new__(cls, counts, int(total))

    def asDict(self, schema: EmotionLabelSet = kDefaultSchema) -> dict[str, int]:
        return {lb: int(c) for lb, c in zip(schema, self.counts)}


class Dataset:
    """Ordered collection of examples with the derived N x 12 label matrix. Immutable after
    construction, so it is safe to share between readers."""

    def __init__(self, examples: Iterable[Example]) -> None:
        self._examples: tuple[Example, ...] = tuple(examples)
        assert all(isinstance(e, Example) for e in self._examples)
        if len(self._examples) > 0:
            lm = np.stack([e.labels for e in self._examples]).astype(np.int8)
        else:
            lm = np.zeros((0, kNumLabels), dtype=np.int8)
        lm.setflags(write=False)
        self._label_matrix = lm

    @property
    def examples(self) -> tuple[Example, ...]:
        return self._examples

    @property
    def label_matrix(self) -> np.ndarray:
        return self._label_matrix

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self._examples]

    @property
    def texts(self) -> list[str]:
        return [e.raw_text for e in self._examples]

    def __len__(self) -> int:
        return len(self._examples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset) or len(self) != len(other):
            return False
        return all(
            a.id == b.id and a.raw_text == b.raw_text and np.array_equal(a.labels, b.labels)
            for a, b in zip(self._examples, other._examples)
        )

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self._examples[int(i)] for i in indices)

    def withTexts(self, texts: Sequence[str]) -> "Dataset":
        """Returns a dataset with the same ids and labels, but texts replaced"""
        assert len(texts) == len(self._examples)
        return Dataset(Example(e.id, t, e.labels) for e, t in zip(self._examples, texts))


################################################################################
# TSV IO
################################################################################


def _readLines(path: str) -> list[str]:
    # utf-8-sig strips the byte-order mark if there's one
    with open(path, "r", encoding="utf-8-sig", newline="") as f:
        content = f.read()
    lines = content.split("\n")
    if len(lines) > 0 and lines[-1] == "":
        lines.pop()  # trailing newline
    return [ln[:-1] if ln.endswith("\r") else ln for ln in lines]


def loadTsv(
    path: str,
    schema: EmotionLabelSet = kDefaultSchema,
    allow_empty_text: bool = False,
    debug_log: None | bool | LoggingConsole = None,
) -> Dataset:
    """Loads a SemEval-2018 Task 1 E-c formatted file: a header row `ID<TAB>Tweet<TAB><labels...>`
    followed by one row per tweet with 0/1 label cells.

    A file that lacks the `neutral` column (the original 11-emotion distribution) is accepted, its
    neutral column is filled with zeros. `allow_empty_text` admits rows with an empty Tweet cell,
    which is what preprocessing may leave behind.
    """
    assert isinstance(path, str) and isinstance(schema, EmotionLabelSet)
    logger = toLogger(debug_log)

    lines = _readLines(path)
    if len(lines) == 0:
        raise TsvParseError(path, 1, "missing header row")

    header = lines[0].split("\t")
    full = [kIdColumn, kTextColumn, *schema.labels]
    padded = [kIdColumn, kTextColumn, *(lb for lb in schema.labels if lb != kPaddableLabel)]
    if header == full:
        pad_idx = None
    elif kPaddableLabel in schema.labels and header == padded:
        pad_idx = schema.index(kPaddableLabel)
        if logger is not None:
            logger.info(f"'{path}' has no '{kPaddableLabel}' column, filling it with zeros")
    else:
        raise TsvParseError(
            path, 1, f"unexpected header, expected '{chr(9).join(full)}' (or without neutral)"
        )
    n_cols = len(header)

    examples = []
    for line_no, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != n_cols:
            raise TsvParseError(path, line_no, f"expected {n_cols} columns, got {len(cells)}")
        ex_id, text, label_cells = cells[0], cells[1], cells[2:]
        bad = [c for c in label_cells if c not in ("0", "1")]
        if len(bad) > 0:
            raise ValidationError(path, line_no, f"label cell '{bad[0]}' is not 0 or 1")
        if len(text) == 0 and not allow_empty_text:
            raise ValidationError(path, line_no, "empty Tweet cell")
        labels = [int(c) for c in label_cells]
        if pad_idx is not None:
            labels.insert(pad_idx, 0)
        examples.append(Example(ex_id, text, labels))

    if logger is not None:
        logger.debug(f"Loaded {len(examples)} examples from '{path}'")
    return Dataset(examples)


def saveTsv(d: Dataset, path: str, schema: EmotionLabelSet = kDefaultSchema) -> None:
    """Writes the dataset in the exact format loadTsv() reads: UTF-8, tab separated, no quoting,
    `\\n` line endings, always with all schema columns."""
    assert isinstance(d, Dataset)
    rows = ["\t".join([kIdColumn, kTextColumn, *schema.labels])]
    for i, e in enumerate(d.examples):
        for fld in (e.id, e.raw_text):
            if "\t" in fld or "\n" in fld or "\r" in fld:
                raise ValidationError(path, i + 2, "tab or newline can't be stored without quoting")
        rows.append("\t".join([e.id, e.raw_text, *(str(int(v)) for v in e.labels)]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(rows) + "\n")


def loadTextTsv(path: str) -> list[tuple[str, str]]:
    """Reads (id, text) pairs from a TSV whose header starts with `ID<TAB>Tweet`. Any further
    columns (such as gold labels) are ignored."""
    lines = _readLines(path)
    if len(lines) == 0:
        raise TsvParseError(path, 1, "missing header row")
    header = lines[0].split("\t")
    if len(header) < 2 or header[0] != kIdColumn or header[1] != kTextColumn:
        raise TsvParseError(path, 1, f"header must start with '{kIdColumn}', '{kTextColumn}'")
    rows = []
    for line_no, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(header):
            raise TsvParseError(path, line_no, f"expected {len(header)} columns, got {len(cells)}")
        rows.append((cells[0], cells[1]))
    return rows


################################################################################
# statistics & splits
################################################################################


def classDistribution(d: Dataset) -> ClassDistribution:
    assert isinstance(d, Dataset)
    if len(d) < 1:
        raise EmptyDatasetError("class distribution of an empty dataset is undefined")
    return ClassDistribution(d.label_matrix.sum(axis=0, dtype=np.int64), len(d))


def split(
    d: Dataset, fractions: Sequence[float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Partitions `d` into three datasets with sizes proportional to `fractions`. Assignment to the
    parts is a seeded shuffle, while each part keeps the original relative order of its rows."""
    assert isinstance(d, Dataset)
    if len(fractions) != 3:
        raise ConfigError(f"split needs exactly three fractions, got {len(fractions)}")
    fractions = [float(f) for f in fractions]
    bad = [f for f in fractions if not (0.0 <= f <= 1.0)]
    if len(bad) > 0:
        raise ConfigError(f"split fraction {bad[0]} is outside [0, 1]")
    if abs(sum(fractions) - 1.0) > kSplitTolerance:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")

    n = len(d)
    b1 = min(n, int(np.floor(fractions[0] * n + 0.5)))
    b2 = min(n, max(b1, int(np.floor((fractions[0] + fractions[1]) * n + 0.5))))
    if fractions[2] == 0.0:
        b2 = n

    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[:b1], perm[b1:b2], perm[b2:])
    return tuple(d.subset(np.sort(p)) for p in parts)


################################################################################
# synthetic data
################################################################################

# one cue word per label, already in normalized form so preprocessing leaves them intact
kSyntheticCueWords = (
    "غضب",
    "ترقب",
    "قرف",
    "خوف",
    "فرح",
    "حب",
    "تفاؤل",
    "تشاؤم",
    "حزن",
    "دهشه",
    "ثقه",
    "عادي",
)
kSyntheticFillerWords = (
    "كتاب",
    "شارع",
    "مدينه",
    "سماء",
    "بحر",
    "جبل",
    "طريق",
    "بيت",
    "قمر",
    "شمس",
    "نهر",
    "باب",
    "لون",
    "صوت",
    "يوم",
    "ليل",
)
kSyntheticPrevalence = (0.3, 0.1, 0.2, 0.18, 0.25, 0.22, 0.25, 0.2, 0.3, 0.05, 0.08, 0.03)


def synthesizeDataset(
    n: int,
    seed: int,
    prevalence: Sequence[float] = kSyntheticPrevalence,
    max_fillers: int = 3,
    id_prefix: str = "syn",
) -> Dataset:
    """Generates a learnable multi-label dataset: each label is drawn independently with its
    prevalence, and the text holds the cue word of every active label mixed with 1..max_fillers
    filler words in random order. Texts are clean Arabic, so preprocessing is the identity."""
    assert n >= 0 and max_fillers >= 1
    prevalence = np.asarray(prevalence, dtype=np.float64)
    assert prevalence.shape == (kNumLabels,) and np.all((prevalence >= 0) & (prevalence <= 1))

    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n):
        labels = (rng.random(kNumLabels) < prevalence).astype(np.int8)
        words = [kSyntheticCueWords[c] for c in np.flatnonzero(labels)]
        n_fill = int(rng.integers(1, max_fillers + 1))
        fill_idx = rng.integers(0, len(kSyntheticFillerWords), n_fill)
        words.extend(kSyntheticFillerWords[j] for j in fill_idx)
        rng.shuffle(words)
        examples.append(Example(f"{id_prefix}-{i:05d}", " ".join(words), labels))
    return Dataset(examples)
