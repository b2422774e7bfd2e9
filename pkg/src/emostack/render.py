"""Rendering evaluation reports, class distributions and loss-mode comparisons as rich tables"""

from collections.abc import Sequence

import rich.table
from rich.terminal_theme import DIMMED_MONOKAI as DarkTheme, DEFAULT_TERMINAL_THEME as LightTheme
from rich.text import Text

from .common import LoggingConsole
from .corpus import ClassDistribution, EmotionLabelSet, kDefaultSchema
from .metrics import EvaluationReport, kAggregateKeys

kDefaultStyles = {
    "row_styles_dark": ["", "on #202020"],
    "row_styles_light": ["", "on #F0F0F0"],
    "best_value": "bold #40C040",
    "weak_value": "#C0B040",
    "zero_support": "#808080",
}

kAggregateCaptions = {
    "precision_micro": "Micro precision",
    "recall_micro": "Micro recall",
    "f1_micro": "Micro F1",
    "f1_macro": "Macro F1",
    "jaccard_accuracy": "Jaccard accuracy",
    "hamming_loss": "Hamming loss",
}

# lower is better only for the Hamming loss
_kLowerIsBetter = frozenset(("hamming_loss",))


def _console(console: LoggingConsole | None) -> LoggingConsole:
    if console is None:
        return LoggingConsole(emoji=False, highlight=False)
    assert isinstance(console, LoggingConsole)
    return console


def _getFmt(style_overrides: dict | None, field: str):
    return (style_overrides or {}).get(field, kDefaultStyles[field])


def renderReport(
    report: EvaluationReport,
    console: LoggingConsole | None,  # if none will construct own
    title: None | str = "Evaluation results",
    dark_theme: bool = True,
    precision: int = 4,
    weak_f1: float = 0.5,  # per-class F1 below it is highlighted
    style_overrides: dict | None = None,
) -> None:
    """Prints the aggregate metrics table followed by the class-wise table"""
    console = _console(console)
    assert isinstance(report, EvaluationReport)
    row_styles = _getFmt(style_overrides, f"row_styles_{'dark' if dark_theme else 'light'}")

    agg = rich.table.Table(
        rich.table.Column("Metric", no_wrap=True),
        rich.table.Column("Value", justify="right"),
        title=None if title is None else f"{title} ({report.num_instances} instances)",
        row_styles=row_styles,
    )
    for k, v in report.aggregates().items():
        agg.add_row(kAggregateCaptions[k], f"{v:.{precision}f}")
    console.print(agg)

    cls = rich.table.Table(
        rich.table.Column("Emotion", no_wrap=True),
        rich.table.Column("Precision", justify="right"),
        rich.table.Column("Recall", justify="right"),
        rich.table.Column("F1", justify="right"),
        rich.table.Column("Support", justify="right"),
        title="Class-wise performance",
        row_styles=row_styles,
    )
    for s in report.per_class:
        if s.support == 0:
            style = _getFmt(style_overrides, "zero_support")
        elif s.f1 < weak_f1:
            style = _getFmt(style_overrides, "weak_value")
        else:
            style = None
        cls.add_row(
            Text(s.label, style=style),
            f"{s.precision:.{precision}f}",
            f"{s.recall:.{precision}f}",
            Text(f"{s.f1:.{precision}f}", style=style),
            str(s.support),
        )
    console.print(cls)


def renderClassDistribution(
    dist: ClassDistribution,
    console: LoggingConsole | None,
    schema: EmotionLabelSet = kDefaultSchema,
    title: None | str = "Class distribution",
    dark_theme: bool = True,
    style_overrides: dict | None = None,
) -> None:
    console = _console(console)
    assert isinstance(dist, ClassDistribution)
    table = rich.table.Table(
        rich.table.Column("Emotion", no_wrap=True),
        rich.table.Column("No. of instances", justify="right"),
        rich.table.Column("Share", justify="right"),
        title=None if title is None else f"{title} ({dist.total} instances)",
        row_styles=_getFmt(style_overrides, f"row_styles_{'dark' if dark_theme else 'light'}"),
    )
    for label, count in dist.asDict(schema).items():
        share = count / dist.total if dist.total > 0 else 0.0
        style = _getFmt(style_overrides, "zero_support") if count == 0 else None
        table.add_row(Text(label, style=style), str(count), f"{100.0 * share:.1f}%")
    console.print(table)


def renderAblation(
    runs: Sequence[tuple[str, EvaluationReport]],
    console: LoggingConsole | None,
    title: None | str = "Loss mode comparison",
    dark_theme: bool = True,
    precision: int = 4,
    style_overrides: dict | None = None,
) -> None:
    """One column per run (usually one per loss mode), one row per aggregate metric. The best value
    of each row is highlighted."""
    console = _console(console)
    if len(runs) < 1:
        console.failure("Nothing to compare, no runs were given")
        return
    assert all(isinstance(r, EvaluationReport) for _, r in runs)

    table = rich.table.Table(
        rich.table.Column("Metric", no_wrap=True),
        *[rich.table.Column(name, justify="right") for name, _ in runs],
        title=title,
        row_styles=_getFmt(style_overrides, f"row_styles_{'dark' if dark_theme else 'light'}"),
    )
    for k in kAggregateKeys:
        values = [getattr(r, k) for _, r in runs]
        best = min(values) if k in _kLowerIsBetter else max(values)
        table.add_row(
            kAggregateCaptions[k],
            *[
                Text(
                    f"{v:.{precision}f}",
                    style=_getFmt(style_overrides, "best_value") if v == best else None,
                )
                for v in values
            ],
        )
    console.print(table)


def exportConsole(console: LoggingConsole, export_to: str, export_fmt: str, light: bool) -> None:
    """Saves everything the recording console printed"""
    if "txt" == export_fmt:
        console.save_text(export_to)
    elif "svg" == export_fmt:
        console.save_svg(export_to, title="", theme=LightTheme if light else DarkTheme)
    elif "html" == export_fmt:
        console.save_html(export_to, theme=LightTheme if light else DarkTheme)
    else:
        assert False, "NOT IMPLEMENTED?!"
