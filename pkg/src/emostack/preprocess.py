"""Tweet normalization: punctuation and emoji handling, foreign-character stripping, Arabic letter
normalization, repeat reduction, attached-prefix rules and whitespace cleanup.

All functions here are pure. The stages compose in `pipeline()` in a fixed order, and the composed
transform is idempotent.
"""

from collections import namedtuple
from collections.abc import Iterable, Mapping
import dataclasses
import os
import re
import string

import emoji
import yaml

from .common import ConfigError, LoggingConsole, TsvParseError, toLogger
from .corpus import Dataset

_kThisDir = os.path.dirname(os.path.abspath(__file__))
kBuiltinEmojiMap = os.path.join(_kThisDir, "data", "emoji_map.tsv")
kBuiltinEmoticonMap = os.path.join(_kThisDir, "data", "emoticon_map.tsv")

# underscore is excluded: it glues the words of textual emoji tokens
kEnglishPunctuation = string.punctuation.replace("_", "")
kArabicPunctuation = "،؛؟٪٫٬۔«»…“”‘’"
kPunctuation = kEnglishPunctuation + kArabicPunctuation

kDiacritics = "\u0610-\u061a\u064b-\u065f\u0670\u06d6-\u06ed"
kTatweel = "\u0640"
kArabicLetters = (
    "\u0620-\u063f\u0641-\u064a\u066e\u066f\u0671-\u06d3\u06d5\u06ee\u06ef\u06fa-\u06fc\u06ff"
)

# dashes, decorative glyphs and backslash that survive punctuation replacement in raw tweets
kDecorations = (
    "\\‐‑‒–—―•·●○■□◆◇"
    "★☆♥♦♠♣※¤¦"
)

_kPunctuationRe = re.compile("[" + re.escape(kPunctuation) + "]")
_kForeignRe = re.compile(f"[^{kArabicLetters}{kDiacritics}{kTatweel}_\\s]")
_kDiacriticsRe = re.compile(f"[{kDiacritics}{kTatweel}]")
_kDecorationsRe = re.compile("[" + re.escape(kDecorations) + "]")
_kRepeatsRe = re.compile(r"(.)\1+", re.DOTALL)
# variation selector and skin tone modifiers don't change the meaning of a mapped emoji
_kEmojiQualifiersRe = re.compile("[\ufe0e\ufe0f\U0001f3fb-\U0001f3ff]")

_kLetterMap = str.maketrans(
    {
        "آ": "ا",  # alef with madda above
        "أ": "ا",  # alef with hamza above
        "إ": "ا",  # alef with hamza below
        "ة": "ه",  # teh marbuta -> heh
        "ى": "ي",  # alef maksura -> yeh
    }
)

# a leading conjunction waw split off words that have at least 3 more letters; tokens carrying an
# underscore are textual emoji and stay whole
kDefaultPrefixRules = ((r"(?<!\S)و(?=[^\s_]{3,}(?!\S))", "و "),)


def loadSymbolMap(path: str) -> dict[str, str]:
    """Reads a two-column `symbol<TAB>token` UTF-8 file. Blank lines are skipped, there's no
    header."""
    with open(path, "r", encoding="utf-8-sig") as f:
        lines = f.read().split("\n")
    ret = {}
    for line_no, line in enumerate(lines, start=1):
        line = line.rstrip("\r")
        if len(line.strip()) == 0:
            continue
        cells = line.split("\t")
        if len(cells) != 2 or len(cells[0]) == 0 or len(cells[1].strip()) == 0:
            raise TsvParseError(path, line_no, "expected two non-empty columns: symbol, token")
        ret[cells[0]] = cells[1].strip()
    return ret


@dataclasses.dataclass(frozen=True)
class PreprocessConfig:
    emoji_map: Mapping[str, str]
    emoticon_map: Mapping[str, str]
    prefix_rules: tuple[tuple[str, str], ...] = kDefaultPrefixRules

    def __post_init__(self):
        assert all(isinstance(k, str) and len(k) > 0 for k in self.emoji_map)
        assert all(isinstance(k, str) and len(k) > 0 for k in self.emoticon_map)
        rules = tuple((str(p), str(r)) for p, r in self.prefix_rules)
        try:
            compiled = tuple((re.compile(p), r) for p, r in rules)
        except re.error as e:
            raise ConfigError(f"preprocess.prefix_rules: invalid regex: {e}") from e
        object.__setattr__(self, "prefix_rules", rules)
        object.__setattr__(
            self,
            "emoji_map",
            {_kEmojiQualifiersRe.sub("", k) or k: v for k, v in self.emoji_map.items()},
        )
        object.__setattr__(self, "emoticon_map", dict(self.emoticon_map))
        object.__setattr__(self, "_compiled_rules", compiled)
        if len(self.emoticon_map) > 0:
            # longest first, so ':-)' wins over ':-'
            alts = sorted(self.emoticon_map, key=lambda e: (-len(e), e))
            emoticon_re = re.compile("|".join(re.escape(e) for e in alts))
        else:
            emoticon_re = None
        object.__setattr__(self, "_emoticon_re", emoticon_re)

    @property
    def compiled_rules(self) -> tuple[tuple[re.Pattern, str], ...]:
        return self._compiled_rules

    @property
    def emoticon_pattern(self) -> re.Pattern | None:
        return self._emoticon_re

    @staticmethod
    def default() -> "PreprocessConfig":
        return PreprocessConfig(
            loadSymbolMap(kBuiltinEmojiMap), loadSymbolMap(kBuiltinEmoticonMap), kDefaultPrefixRules
        )

    @staticmethod
    def fromDict(d: Mapping | None, base_dir: str = ".") -> "PreprocessConfig":
        """Builds the config from the `preprocess` section of a run config (or a standalone
        preprocess config file). Relative map paths resolve against `base_dir`."""
        d = {} if d is None else d
        violations = []
        unknown = set(d) - {"enabled", "emoji_map", "emoticon_map", "prefix_rules"}
        violations.extend(f"preprocess.{k}: unknown key" for k in sorted(unknown))

        def _map(key: str, builtin: str) -> dict[str, str]:
            p = d.get(key)
            if p is None:
                return loadSymbolMap(builtin)
            if not isinstance(p, str):
                violations.append(f"preprocess.{key}: must be a file path")
                return {}
            p = p if os.path.isabs(p) else os.path.join(base_dir, p)
            if not os.path.isfile(p):
                violations.append(f"preprocess.{key}: file '{p}' doesn't exist")
                return {}
            return loadSymbolMap(p)

        emoji_map = _map("emoji_map", kBuiltinEmojiMap)
        emoticon_map = _map("emoticon_map", kBuiltinEmoticonMap)

        rules = d.get("prefix_rules")
        if rules is None:
            rules = kDefaultPrefixRules
        elif not isinstance(rules, list) or not all(
            isinstance(r, (list, tuple)) and len(r) == 2 and all(isinstance(x, str) for x in r)
            for r in rules
        ):
            violations.append("preprocess.prefix_rules: must be a list of [regex, replacement]")
            rules = ()
        if "enabled" in d and not isinstance(d["enabled"], bool):
            violations.append("preprocess.enabled: must be a boolean")

        if len(violations) > 0:
            raise ConfigError(violations)
        return PreprocessConfig(emoji_map, emoticon_map, tuple(tuple(r) for r in rules))


def loadPreprocessConfig(path: str) -> PreprocessConfig:
    """Loads a standalone YAML preprocess config (the keys of a run config's `preprocess`
    section)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            d = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"can't read preprocess config '{path}': {e}") from e
    if d is not None and not isinstance(d, dict):
        raise ConfigError(f"preprocess config '{path}' must be a mapping")
    return PreprocessConfig.fromDict(d, os.path.dirname(os.path.abspath(path)))


################################################################################
# stages
################################################################################


def replacePunctuation(s: str, keep: re.Pattern | None = None) -> str:
    """Replaces every English and Arabic punctuation character with a space. Spans matching `keep`
    are left untouched (the pipeline uses it to let emoticons reach textualization)."""
    if keep is None:
        return _kPunctuationRe.sub(" ", s)
    parts, pos = [], 0
    for m in keep.finditer(s):
        parts.append(_kPunctuationRe.sub(" ", s[pos : m.start()]))
        parts.append(m.group(0))
        pos = m.end()
    parts.append(_kPunctuationRe.sub(" ", s[pos:]))
    return "".join(parts)


def textualizeEmoji(s: str, cfg: PreprocessConfig) -> str:
    """Replaces mapped emoji and emoticons by their textual token surrounded with spaces. Emoji
    without a mapping are removed."""
    assert isinstance(cfg, PreprocessConfig)

    def _onEmoji(chars: str, _data: dict) -> str:
        token = cfg.emoji_map.get(chars) or cfg.emoji_map.get(_kEmojiQualifiersRe.sub("", chars))
        return " " if token is None else f" {token} "

    s = emoji.replace_emoji(s, replace=_onEmoji)
    if cfg.emoticon_pattern is not None:
        s = cfg.emoticon_pattern.sub(lambda m: f" {cfg.emoticon_map[m.group(0)]} ", s)
    return s


def stripForeign(s: str) -> str:
    """Replaces with a space everything that isn't an Arabic letter, a diacritic, tatweel,
    underscore or whitespace: Latin letters, ASCII and Arabic-Indic digits, and any leftover
    symbols."""
    return _kForeignRe.sub(" ", s)


def normalizeArabic(s: str) -> str:
    return _kDiacriticsRe.sub("", s.translate(_kLetterMap))


def replaceDecorations(s: str) -> str:
    return _kDecorationsRe.sub(" ", s)


def reduceRepeats(s: str) -> str:
    return _kRepeatsRe.sub(r"\1", s)


def applyPrefixRules(s: str, cfg: PreprocessConfig) -> str:
    for pattern, repl in cfg.compiled_rules:
        s = pattern.sub(repl, s)
    return s


def cleanup(s: str) -> str:
    return " ".join(t for t in s.split() if len(t) > 1)


class CleanText(namedtuple("CleanText", ["text"])):
    __slots__ = ()

    def __new__(cls, text: str):
        assert isinstance(text, str)
        return super().__new__(cls, text)

    @property
    def empty(self) -> bool:
        return len(self.text) == 0


def pipeline(raw: str, cfg: PreprocessConfig) -> CleanText:
    assert isinstance(raw, str)
    s = replacePunctuation(raw, keep=cfg.emoticon_pattern)
    s = textualizeEmoji(s, cfg)
    s = stripForeign(s)
    s = normalizeArabic(s)
    s = replaceDecorations(s)
    s = reduceRepeats(s)
    s = applyPrefixRules(s, cfg)
    return CleanText(cleanup(s))


def preprocessDataset(
    d: Dataset,
    cfg: PreprocessConfig,
    drop_empty: bool = False,
    debug_log: None | bool | LoggingConsole = None,
) -> tuple[Dataset, list[str]]:
    """Cleans every Tweet of the dataset. Returns the cleaned dataset and the ids of rows that
    became empty; those rows are kept with an empty text unless `drop_empty` is set."""
    assert isinstance(d, Dataset)
    logger = toLogger(debug_log)
    cleaned = [pipeline(t, cfg) for t in d.texts]
    empty_ids = [e.id for e, c in zip(d.examples, cleaned) if c.empty]

    out = d.withTexts([c.text for c in cleaned])
    if drop_empty and len(empty_ids) > 0:
        out = out.subset(i for i, c in enumerate(cleaned) if not c.empty)

    if logger is not None:
        if len(empty_ids) > 0:
            logger.warning(
                f"{len(empty_ids)} of {len(d)} rows are empty after cleaning"
                + (", dropped" if drop_empty else "")
            )
        logger.debug(f"Preprocessed {len(d)} rows")
    return out, empty_ids


def cleanTexts(texts: Iterable[str], cfg: PreprocessConfig) -> list[str]:
    return [pipeline(t, cfg).text for t in texts]
