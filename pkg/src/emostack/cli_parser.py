import argparse
from .backends import getBuiltinBackends
from .common import ConfigError, kAvailableFormats, kEnvCacheDir, kEnvLogLevel
from .loss import kLossModes


class _Parser(argparse.ArgumentParser):
    """Reports usage errors as ConfigError instead of printing usage and exiting"""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _addExportArgs(parser) -> None:
    g_export = parser.add_argument_group("Export", "Controls how to export rendered tables.")

    g_export.add_argument(
        "--export_to",
        help="Path to file to store rendered tables to.",
        metavar="<path/to/export_file>",
    )

    g_export.add_argument(
        "--export_fmt",
        help=f"Format of the export file. Options are: {', '.join(kAvailableFormats)}. If not set, "
        "inferred from --export_to file extension",
        choices=kAvailableFormats,
        default=None,
        metavar="<format id>",
    )

    g_export.add_argument(
        "--export_light",
        help="If set, uses light theme instead of dark",
        action="store_true",
        default=False,
    )


def makeParser():
    parser = _Parser(
        prog="emostack",
        description="Multi-label emotion classification of Arabic tweets: stacked token "
        "embeddings from several backends feed a Bi-LSTM meta-learner trained with a hybrid "
        "loss (class weighted cross-entropy, label correlation and contrastive terms).\n\n"
        f"Environment: {kEnvLogLevel} overrides the log level, {kEnvCacheDir} the embedding "
        "cache directory.\n"
        "Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error. Failures also "
        "print one 'error:<code>:<detail>' line to stderr.",
        epilog="On custom embedding backends:\n"
        "A run config backend entry accepts in its 'kind' key, in addition to built-in backend "
        f"identifiers ({', '.join(getBuiltinBackends())}), a path to a Python file that defines a "
        "custom backend. The class name must be the same as the file name. The simplest possible "
        "backend, that turns a word into a vector filled with its length, is this:\n\n"
        """# save to ./backend_WordLen.py
import numpy as np
from emostack.embeddings import EmbeddingBackend

class backend_WordLen(EmbeddingBackend):
    @classmethod
    def fromSpec(cls, spec, max_len):
        return cls(spec.name, spec.dim, max_len)

    def _embedTokens(self, tokens):
        return np.stack([np.full(self.dim, len(t), dtype=np.float32) for t in tokens])

"""
        "and the config entry using it:\n"
        "  backends:\n"
        "    - {name: wordlen, kind: ./backend_WordLen.py, dim: 2}\n",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )

    parser.add_argument(
        "--show_debug",
        help="Shows some additional debugging info. Default: %(default)s",
        action=argparse.BooleanOptionalAction,
        default=False,
    )

    parser.add_argument(
        "--colors",
        help="Controls if the output should be colored. Default: %(default)s",
        action=argparse.BooleanOptionalAction,
        default=True,
    )

    parser.add_argument(
        "--progress",
        help="Controls if progress bars are shown for embedding extraction and training. "
        "Default: %(default)s",
        action=argparse.BooleanOptionalAction,
        default=True,
    )

    sub = parser.add_subparsers(dest="command", metavar="<command>", required=True)

    p = sub.add_parser(
        "preprocess",
        help="Cleans the Tweet column of a corpus TSV.",
        description="Cleans the Tweet column of a corpus TSV (ID, Tweet, then 0/1 label columns). "
        "Ids of rows that end up empty are listed in a '<out_tsv>.empty.log' sidecar file.",
    )
    p.add_argument("in_tsv", help="Source corpus file", metavar="<path/to/in.tsv>")
    p.add_argument("out_tsv", help="Where to write the cleaned corpus", metavar="<path/to/out.tsv>")
    p.add_argument(
        "--preprocess_config",
        help="YAML file with the keys of a run config 'preprocess' section (emoji_map, "
        "emoticon_map, prefix_rules). Built-in maps and rules are used when not set.",
        metavar="<path/to/preprocess.yaml>",
        default=None,
    )
    p.add_argument(
        "--drop_empty",
        help="If set, rows that are empty after cleaning are dropped instead of kept with an empty "
        "Tweet cell.",
        action="store_true",
        default=False,
    )

    p = sub.add_parser(
        "train",
        help="Runs the whole pipeline from a run config.",
        description="Preprocesses the configured splits, fine-tunes and runs the embedding "
        "backends, trains the meta-learner and evaluates it. Writes the checkpoint, predictions, "
        "reports and a manifest.json into the output dir (into one subdirectory per loss mode "
        "when several --modes are given).",
    )
    p.add_argument("config", help="Run config file", metavar="<path/to/run.yaml>")
    p.add_argument(
        "--modes",
        help="Loss modes to train with, each on the same embeddings. Options are: "
        f"{', '.join(kLossModes)}. Default: 'loss.mode' of the run config.",
        nargs="+",
        choices=kLossModes,
        metavar="<loss mode>",
        default=None,
    )
    p.add_argument(
        "--backends",
        help="Names of configured backends to stack, in the given order. Default: all of them.",
        nargs="+",
        metavar="<backend name>",
        default=None,
    )

    p = sub.add_parser(
        "evaluate",
        help="Scores a checkpoint on a labeled corpus TSV.",
        description="Scores a checkpoint on a labeled corpus TSV. Writes evaluation.json and "
        "evaluation.txt into the output dir of the run config.",
    )
    p.add_argument("checkpoint", help="Checkpoint written by 'train'", metavar="<path/to/model>")
    p.add_argument("test_tsv", help="Labeled corpus file", metavar="<path/to/test.tsv>")
    p.add_argument("config", help="Run config file", metavar="<path/to/run.yaml>")

    p = sub.add_parser(
        "predict",
        help="Labels tweets with a checkpoint.",
        description="Labels an ID<TAB>Tweet file (further columns are ignored). The output TSV has "
        "the ID column followed by one 0/1 column per emotion.",
    )
    p.add_argument("checkpoint", help="Checkpoint written by 'train'", metavar="<path/to/model>")
    p.add_argument("input_tsv", help="File with ID and Tweet columns", metavar="<path/to/in.tsv>")
    p.add_argument("out_tsv", help="Where to write predictions", metavar="<path/to/out.tsv>")
    p.add_argument(
        "--threshold",
        help="Probability at or above which a label is predicted. Default: the threshold the "
        "checkpoint was trained with.",
        type=float,
        metavar="<float in (0,1)>",
        default=None,
    )

    p = sub.add_parser(
        "report",
        help="Renders run manifests and class distributions.",
        description="Renders the report of a single manifest, or a side by side comparison of "
        "several manifests (for example one per loss mode), and optionally the class distribution "
        "of a corpus TSV.",
    )
    p.add_argument(
        "manifests",
        help="manifest.json files written by 'train'",
        nargs="*",
        metavar="<path/to/manifest.json>",
    )
    p.add_argument(
        "--distribution",
        help="Corpus TSV to render the class distribution of",
        metavar="<path/to/corpus.tsv>",
        default=None,
    )
    _addExportArgs(p)

    return parser
