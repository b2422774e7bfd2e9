# using abs path only here to alleviate debugging
from emostack.cli_parser import makeParser
from emostack.commands import cmdEvaluate, cmdPredict, cmdPreprocess, cmdReport, cmdTrain
from emostack.common import (
    ConfigError,
    EmostackError,
    LoggingConsole,
    detectExportFormat,
    kEnvLogLevel,
    logLevelFromName,
)
from emostack.preprocess import loadPreprocessConfig
from emostack.render import exportConsole, renderReport

import os
import sys
from rich.markup import escape


def _run(args, console: LoggingConsole) -> None:
    if "preprocess" == args.command:
        cfg = None
        if args.preprocess_config is not None:
            cfg = loadPreprocessConfig(args.preprocess_config)
        cmdPreprocess(args.in_tsv, args.out_tsv, cfg, args.drop_empty, debug_log=console)

    elif "train" == args.command:
        manifests = cmdTrain(
            args.config, args.modes, args.backends, show_progress=args.progress, debug_log=console
        )
        cmdReport(manifests, console=console)

    elif "evaluate" == args.command:
        report = cmdEvaluate(
            args.checkpoint, args.test_tsv, args.config, args.progress, debug_log=console
        )
        renderReport(report, console)

    elif "predict" == args.command:
        cmdPredict(
            args.checkpoint,
            args.input_tsv,
            args.out_tsv,
            args.threshold,
            args.progress,
            debug_log=console,
        )

    elif "report" == args.command:
        export_fmt = detectExportFormat(args.export_to, args.export_fmt)
        if export_fmt is not None:
            if os.path.isfile(args.export_to):
                os.remove(args.export_to)
            elif os.path.exists(args.export_to):
                raise ConfigError(f"--export_to '{args.export_to}' exists and isn't a file")
            console.record = True
        cmdReport(args.manifests, args.distribution, console, dark_theme=not args.export_light)
        if export_fmt is not None:
            exportConsole(console, args.export_to, export_fmt, args.export_light)

    else:
        assert False, "NOT IMPLEMENTED?!"


def _fail(e: EmostackError, console: LoggingConsole) -> None:
    print(e.oneLine(), file=sys.stderr)
    console.failure(escape(e.detail))
    exit(e.exit_code)


def main():
    parser = makeParser()
    try:
        args = parser.parse_args()
    except ConfigError as e:
        _fail(e, LoggingConsole(log_level=LoggingConsole.LogLevel.Info))

    console = LoggingConsole(no_color=not args.colors, log_level=LoggingConsole.LogLevel.Info)
    try:
        console.log_level = logLevelFromName(
            os.environ.get(kEnvLogLevel),
            LoggingConsole.LogLevel.Debug if args.show_debug else LoggingConsole.LogLevel.Info,
        )
        _run(args, console)
    except EmostackError as e:
        _fail(e, console)
    except Exception as e:
        detail = " ".join(str(e).split()) or type(e).__name__
        print(f"error:internal:{detail}", file=sys.stderr)
        console.critical(escape(f"{type(e).__name__}: {e}"))
        exit(4)


if __name__ == "__main__":
    main()
