import hashlib
import io
import os
import tempfile
import unittest

import emostack.common as ec

kLvl = ec.LoggingConsole.LogLevel


def _console(level):
    return ec.LoggingConsole(log_level=level, file=io.StringIO(), width=200, no_color=True)


class TestLoggingConsole(unittest.TestCase):
    def test_level_filtering(self):
        con = _console(kLvl.Warning)
        con.debug("d")
        con.info("i")
        con.warning("w")
        con.critical("c")
        out = con.file.getvalue().splitlines()
        self.assertEqual(["[warn] w", "[CRIT] c"], out)

    def test_tags(self):
        con = _console(kLvl.Debug)
        for f in (con.debug, con.info, con.warning, con.error, con.failure, con.critical):
            f("x")
        tags = [s.split("]")[0] for s in con.file.getvalue().splitlines()]
        self.assertEqual(["[dbg ", "[info", "[warn", "[Err ", "[FAIL", "[CRIT"], tags)

    def test_logLevelFromName(self):
        self.assertEqual(kLvl.Info, ec.logLevelFromName(None, kLvl.Info))
        self.assertEqual(kLvl.Info, ec.logLevelFromName("  ", kLvl.Info))
        self.assertEqual(kLvl.Warning, ec.logLevelFromName(" WARNING ", kLvl.Info))
        self.assertEqual(kLvl.Debug, ec.logLevelFromName("debug", kLvl.Info))
        with self.assertRaises(ec.ConfigError) as cm:
            ec.logLevelFromName("loud", kLvl.Info)
        self.assertIn(ec.kEnvLogLevel, cm.exception.detail)

    def test_toLogger(self):
        self.assertIsNone(ec.toLogger(None))
        self.assertIsNone(ec.toLogger(False))
        self.assertIsInstance(ec.toLogger(True), ec.LoggingConsole)
        con = _console(kLvl.Info)
        self.assertIs(con, ec.toLogger(con))


class TestErrors(unittest.TestCase):
    def test_codes(self):
        cases = [
            (ec.ConfigError(["a: bad", "b: worse"]), "config", 2),
            (ec.TsvParseError("x.tsv", 3, "bad row"), "parse", 3),
            (ec.ValidationError("x.tsv", 4, "bad cell"), "validation", 3),
            (ec.EmptyDatasetError("nothing"), "empty", 3),
            (ec.ShapeError("w"), "shape", 4),
            (ec.AlignmentError("m"), "alignment", 4),
            (ec.CapabilityError("c"), "capability", 4),
            (ec.CacheError("c"), "cache", 4),
            (ec.CorruptCheckpointError("c"), "checkpoint_corrupt", 4),
            (ec.CheckpointVersionError("v"), "checkpoint_version", 4),
            (ec.NonFiniteLossError(2, 5, float("nan")), "nonfinite_loss", 4),
        ]
        for e, code, exit_code in cases:
            self.assertIsInstance(e, ec.EmostackError)
            self.assertEqual((code, exit_code), (e.code, e.exit_code))
            self.assertTrue(e.oneLine().startswith(f"error:{code}:"))
            self.assertNotIn("\n", e.oneLine())
        self.assertIsInstance(ec.CorruptCheckpointError("c"), ec.CheckpointError)
        self.assertIsInstance(ec.TsvParseError("x", 1, "d"), ec.DataError)

    def test_config_violations(self):
        e = ec.ConfigError(["a: bad", "b: worse"])
        self.assertEqual(["a: bad", "b: worse"], e.violations)
        self.assertEqual(["x"], ec.ConfigError("x").violations)
        self.assertEqual("error:config:a: bad b: worse", e.oneLine())

    def test_parse_error_location(self):
        e = ec.TsvParseError("x.tsv", 3, "bad row")
        self.assertIn("x.tsv", e.detail)
        self.assertIn("3", e.detail)

    def test_nonfinite(self):
        e = ec.NonFiniteLossError(2, 5, float("inf"))
        self.assertEqual((2, 5), (e.epoch, e.batch_idx))


class TestHelpers(unittest.TestCase):
    def test_detectExportFormat(self):
        self.assertIsNone(ec.detectExportFormat(None, None))
        self.assertEqual("svg", ec.detectExportFormat("a/b.svg", None))
        self.assertEqual("txt", ec.detectExportFormat("a/b.svg", "txt"))
        for to, fmt in (("a/b.png", None), (None, "svg"), ("", None), ("a/b.svg", "pdf")):
            with self.assertRaises(ec.ConfigError):
                ec.detectExportFormat(to, fmt)

    def test_fileSha256(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "f.bin")
            data = bytes(range(256)) * 5000
            with open(path, "wb") as f:
                f.write(data)
            self.assertEqual(hashlib.sha256(data).hexdigest(), ec.fileSha256(path))


if __name__ == "__main__":
    import sys, pytest

    sys.exit(pytest.main(sys.argv))
