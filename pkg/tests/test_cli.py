import contextlib
import io
import json
import os
import shutil
import sys
import tempfile
import unittest
from unittest import mock

import numpy as np
import yaml

import emostack.commands as cmd
import emostack.meta_learner as ml
from emostack.__main__ import main
from emostack.common import ConfigError, DataError, LoggingConsole, ShapeError
from emostack.corpus import Dataset, kEmotionLabels, loadTsv, saveTsv, synthesizeDataset
from emostack.loss import kLossModes
from emostack.metrics import kAggregateKeys

kDataDir = os.path.join(os.path.dirname(__file__), "data")
kSampleTsv = os.path.join(kDataDir, "sample_100.tsv")

kManifestKeys = {
    "config",
    "seed",
    "loss_mode",
    "loss",
    "provenance",
    "input_width",
    "checksums",
    "epochs_completed",
    "loss_history",
    "dev_f1_history",
    "best_epoch",
    "best_dev_f1",
    "evaluated_on",
    "report",
}


def _writeConfig(dir, name="run.yaml", **overrides):
    d = {
        "seed": 3,
        "paths": {
            "train": "train.tsv",
            "dev": "dev.tsv",
            "test": "test.tsv",
            "output_dir": "out",
        },
        "backends": [
            {"name": "toy_a", "kind": "toy", "dim": 4, "seed": 1},
            {"name": "toy_b", "kind": "toy", "dim": 3, "seed": 2},
        ],
        "loss": {"mode": "hybrid"},
        "meta_learner": {"epochs": 3, "max_len": 16, "batch_size": 8, "lstm_units": 8},
    }
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    path = os.path.join(dir, name)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(d, f, allow_unicode=True)
    return path


def _writeSplits(dir):
    saveTsv(synthesizeDataset(30, seed=1, id_prefix="tr"), os.path.join(dir, "train.tsv"))
    saveTsv(synthesizeDataset(10, seed=2, id_prefix="dv"), os.path.join(dir, "dev.tsv"))
    saveTsv(synthesizeDataset(12, seed=3, id_prefix="te"), os.path.join(dir, "test.tsv"))


def _readBytes(path):
    with open(path, "rb") as f:
        return f.read()


def _runMain(*argv):
    """Runs the CLI entry point, returns (exit code, stderr)"""
    err = io.StringIO()
    code = 0
    with mock.patch.object(sys, "argv", ["emostack", "--no-colors", "--no-progress", *argv]):
        with contextlib.redirect_stderr(err), contextlib.redirect_stdout(io.StringIO()):
            try:
                main()
            except SystemExit as e:
                code = e.code
    return code, err.getvalue()


class TestPreprocessCommand(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_golden(self):
        out = os.path.join(self.tmp.name, "clean.tsv")
        empty_ids = cmd.cmdPreprocess(os.path.join(kDataDir, "preprocess_raw.tsv"), out)
        self.assertEqual(["r09"], empty_ids)
        golden = loadTsv(os.path.join(kDataDir, "preprocess_golden.tsv"), allow_empty_text=True)
        self.assertEqual(golden, loadTsv(out, allow_empty_text=True))
        with open(out + cmd.kEmptyLogSuffix, encoding="utf-8") as f:
            self.assertEqual("r09\n", f.read())

        cmd.cmdPreprocess(os.path.join(kDataDir, "preprocess_raw.tsv"), out, drop_empty=True)
        self.assertEqual(9, len(loadTsv(out)))

    def test_stale_sidecar_is_removed(self):
        src = os.path.join(self.tmp.name, "src.tsv")
        out = os.path.join(self.tmp.name, "out.tsv")
        saveTsv(synthesizeDataset(6, seed=0), src)
        with open(out + cmd.kEmptyLogSuffix, "w") as f:
            f.write("old\n")
        self.assertEqual([], cmd.cmdPreprocess(src, out))
        self.assertFalse(os.path.exists(out + cmd.kEmptyLogSuffix))

    def test_clean_input_is_unchanged(self):
        src = os.path.join(self.tmp.name, "src.tsv")
        out = os.path.join(self.tmp.name, "out.tsv")
        d = synthesizeDataset(40, seed=3)
        saveTsv(d, src)
        self.assertEqual([], cmd.cmdPreprocess(src, out))
        self.assertEqual(d.texts, loadTsv(out).texts)
        self.assertEqual(d, loadTsv(out))

    def test_header_only(self):
        src = os.path.join(self.tmp.name, "src.tsv")
        out = os.path.join(self.tmp.name, "out.tsv")
        saveTsv(Dataset([]), src)
        self.assertEqual([], cmd.cmdPreprocess(src, out))
        self.assertEqual(_readBytes(src), _readBytes(out))
        self.assertEqual(1, len(_readBytes(out).decode("utf-8").splitlines()))
        self.assertFalse(os.path.exists(out + cmd.kEmptyLogSuffix))

    def test_main(self):
        out = os.path.join(self.tmp.name, "clean.tsv")
        code, err = _runMain("preprocess", os.path.join(kDataDir, "preprocess_raw.tsv"), out)
        self.assertEqual(0, code)
        self.assertEqual("", err)
        self.assertEqual(10, len(loadTsv(out, allow_empty_text=True)))

        bad = os.path.join(self.tmp.name, "bad.tsv")
        with open(bad, "w", encoding="utf-8") as f:
            f.write("ID\tTweet\n")
        code, err = _runMain("preprocess", bad, out)
        self.assertEqual(3, code)
        self.assertTrue(err.startswith("error:parse:"), err)
        self.assertEqual(1, len(err.strip().splitlines()))


class TestTrainEvaluatePredict(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = cls.tmp.name
        _writeSplits(cls.dir)
        cls.config = _writeConfig(cls.dir)
        (cls.manifest,) = cmd.cmdTrain(cls.config)
        cls.out = os.path.join(cls.dir, "out")
        cls.checkpoint = os.path.join(cls.out, cmd.kCheckpointFile)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def _manifest(self, path=None):
        with open(path or self.manifest, encoding="utf-8") as f:
            return json.load(f)

    def test_artifacts(self):
        self.assertEqual(os.path.join(self.out, cmd.kManifestFile), self.manifest)
        for name in (cmd.kCheckpointFile, cmd.kPredictionsFile, "report.json", "report.txt"):
            self.assertTrue(os.path.isfile(os.path.join(self.out, name)), name)

        m = self._manifest()
        self.assertEqual(kManifestKeys, set(m))
        self.assertEqual("hybrid", m["loss_mode"])
        self.assertEqual(3, m["seed"])
        self.assertEqual(3, m["epochs_completed"])
        self.assertEqual(3, len(m["loss_history"]))
        self.assertEqual(3, len(m["dev_f1_history"]))
        self.assertEqual("test", m["evaluated_on"])
        self.assertEqual(["toy_a", "toy_b"], m["provenance"])
        self.assertEqual(7, m["input_width"])
        self.assertTrue(m["loss"]["class_weighted"])
        self.assertEqual({"train", "dev", "test"}, set(m["checksums"]["inputs"]))
        self.assertEqual(12, m["report"]["num_instances"])
        for k in kAggregateKeys:
            self.assertTrue(0.0 <= m["report"][k] <= 1.0)

        with open(os.path.join(self.out, cmd.kPredictionsFile), encoding="utf-8") as f:
            rows = [r.split("\t") for r in f.read().splitlines()]
        self.assertEqual(["ID", *kEmotionLabels], rows[0])
        self.assertEqual(13, len(rows))
        self.assertTrue(all(len(r) == 13 and set(r[1:]) <= {"0", "1"} for r in rows[1:]))

    def test_checkpoint_is_self_contained(self):
        model = ml.load(self.checkpoint)
        self.assertEqual(("toy_a", "toy_b"), model.provenance)
        self.assertEqual(["toy_a", "toy_b"], [s["name"] for s in model.backend_specs])
        self.assertIsNotNone(model.preprocess)
        self.assertIn("😂", model.preprocess["emoji_map"])

    def test_evaluate(self):
        report = cmd.cmdEvaluate(self.checkpoint, os.path.join(self.dir, "test.tsv"), self.config)
        self.assertEqual(12, report.num_instances)
        for v in report.aggregates().values():
            self.assertTrue(0.0 <= v <= 1.0)
        with open(os.path.join(self.out, "evaluation.json"), encoding="utf-8") as f:
            d = json.load(f)
        self.assertEqual({*kAggregateKeys, "num_instances", "per_class"}, set(d))
        self.assertEqual(list(kEmotionLabels), [r["label"] for r in d["per_class"]])
        # same checkpoint, same split, same numbers as the training run
        self.assertEqual(self._manifest()["report"], d)
        with open(os.path.join(self.out, "evaluation.txt"), encoding="utf-8") as f:
            self.assertIn("Micro F1", f.read())

    def test_predict(self):
        text = synthesizeDataset(1, seed=9).texts[0]
        src = os.path.join(self.dir, "one.tsv")
        with open(src, "w", encoding="utf-8") as f:
            f.write(f"ID\tTweet\tExtra\nq1\t{text} 😂!!\tignored\n")
        out1 = os.path.join(self.dir, "pred1.tsv")
        out2 = os.path.join(self.dir, "pred2.tsv")
        y = cmd.cmdPredict(self.checkpoint, src, out1)
        self.assertEqual((1, 12), y.shape)
        cmd.cmdPredict(self.checkpoint, src, out2)
        self.assertEqual(_readBytes(out1), _readBytes(out2))
        with open(out1, encoding="utf-8") as f:
            lines = f.read().splitlines()
        self.assertEqual(2, len(lines))
        self.assertEqual(13, len(lines[1].split("\t")))
        self.assertEqual("q1", lines[1].split("\t")[0])

        y = cmd.cmdPredict(self.checkpoint, src, out1, threshold=0.999)
        self.assertFalse(np.any(y))
        with self.assertRaises(ConfigError):
            cmd.cmdPredict(self.checkpoint, src, out1, threshold=1.5)

    def test_predict_empty_input(self):
        src = os.path.join(self.dir, "none.tsv")
        with open(src, "w", encoding="utf-8") as f:
            f.write("ID\tTweet\n")
        out = os.path.join(self.dir, "none_pred.tsv")
        y = cmd.cmdPredict(self.checkpoint, src, out)
        self.assertEqual((0, 12), y.shape)
        with open(out, encoding="utf-8") as f:
            self.assertEqual(1, len(f.read().splitlines()))

    def test_width_mismatch(self):
        model = ml.load(self.checkpoint)
        wrong = ml.build(model.cfg, model.input_width + 2, 0, model.provenance, model.backend_specs)
        path = os.path.join(self.dir, "wrong.emsk")
        ml.save(wrong, path)
        with self.assertRaises(ShapeError):
            cmd.cmdEvaluate(path, os.path.join(self.dir, "test.tsv"), self.config)

    def test_report(self):
        console = LoggingConsole(record=True, width=120, file=io.StringIO())
        runs = cmd.cmdReport([self.manifest], os.path.join(self.dir, "train.tsv"), console)
        self.assertEqual(["hybrid"], [n for n, _ in runs])
        text = console.export_text()
        self.assertIn("'hybrid' loss", text)
        self.assertIn("Class distribution (30 instances)", text)

        with self.assertRaises(ConfigError):
            cmd.cmdReport([], None, console)
        bogus = os.path.join(self.dir, "bogus.json")
        with open(bogus, "w") as f:
            f.write("{}")
        with self.assertRaises(DataError):
            cmd.cmdReport([bogus], None, console)

    def test_main(self):
        pred = os.path.join(self.dir, "main_pred.tsv")
        src = os.path.join(self.dir, "test.tsv")
        code, err = _runMain("predict", self.checkpoint, src, pred)
        self.assertEqual((0, ""), (code, err))
        self.assertEqual(13, len(_readBytes(pred).decode("utf-8").splitlines()))

        export = os.path.join(self.dir, "report.txt")
        code, _ = _runMain("report", self.manifest, "--export_to", export)
        self.assertEqual(0, code)
        with open(export, encoding="utf-8") as f:
            self.assertIn("Micro F1", f.read())

        code, err = _runMain("train", os.path.join(self.dir, "missing.yaml"))
        self.assertEqual(2, code)
        self.assertTrue(err.startswith("error:config:"), err)

        code, err = _runMain("predict", os.path.join(self.dir, "missing.emsk"), src, pred)
        self.assertEqual(4, code)
        self.assertTrue(err.startswith("error:checkpoint_corrupt:"), err)

    def test_usage_errors_are_config_errors(self):
        cases = [
            ("predict", "a", "b", "c", "--threshold", "x"),
            ("predict", "a", "b"),
            ("report", self.manifest, "--bogus"),
            ("report", self.manifest, "--export_to", self.dir),
            ("report", self.manifest, "--export_to", os.path.join(self.dir, "r.png")),
            (),
        ]
        for argv in cases:
            code, err = _runMain(*argv)
            self.assertEqual(2, code, argv)
            self.assertTrue(err.startswith("error:config:"), err)
            self.assertEqual(1, len(err.splitlines()), err)
        self.assertTrue(os.path.isdir(self.dir))


class TestTrainRuns(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name
        _writeSplits(self.dir)

    def tearDown(self):
        self.tmp.cleanup()

    def test_deterministic_with_cache(self):
        config = _writeConfig(self.dir, paths={"cache_dir": "cache"})
        with mock.patch.dict(os.environ, {}, clear=False):
            os.environ.pop("EMOSTACK_CACHE_DIR", None)
            (manifest,) = cmd.cmdTrain(config)
            first = _readBytes(manifest)
            ckpt = _readBytes(os.path.join(self.dir, "out", cmd.kCheckpointFile))
            self.assertEqual(6, len(os.listdir(os.path.join(self.dir, "cache"))))
            shutil.rmtree(os.path.join(self.dir, "out"))

            (manifest,) = cmd.cmdTrain(config)
        self.assertEqual(first, _readBytes(manifest))
        self.assertEqual(ckpt, _readBytes(os.path.join(self.dir, "out", cmd.kCheckpointFile)))

    def test_all_modes_on_sample(self):
        config = _writeConfig(
            self.dir,
            paths={"train": kSampleTsv, "dev": None, "test": None},
            meta_learner={"epochs": 2},
        )
        manifests = cmd.cmdTrain(config, modes=list(kLossModes))
        self.assertEqual(5, len(manifests))
        for mode, path in zip(kLossModes, manifests):
            self.assertEqual(os.path.join(self.dir, "out", mode, cmd.kManifestFile), path)
            with open(path, encoding="utf-8") as f:
                m = json.load(f)
            self.assertEqual(mode, m["loss_mode"])
            self.assertEqual(mode, m["config"]["loss"]["mode"])
            self.assertEqual(2, len(m["loss_history"]))
            self.assertEqual(mode in ("cw", "hybrid"), m["loss"]["class_weighted"])
            self.assertEqual("train", m["evaluated_on"])
            self.assertEqual(100, m["report"]["num_instances"])
            for k in kAggregateKeys:
                self.assertTrue(0.0 <= m["report"][k] <= 1.0, k)

        runs = cmd.cmdReport(manifests, console=LoggingConsole(file=io.StringIO()))
        self.assertEqual(list(kLossModes), [n for n, _ in runs])

        with self.assertRaises(ConfigError):
            cmd.cmdTrain(config, modes=["cw", "cw"])

    def test_evaluate_overfit_model(self):
        train = os.path.join(self.dir, "tiny.tsv")
        saveTsv(synthesizeDataset(32, seed=5), train)
        config = _writeConfig(
            self.dir,
            seed=0,
            paths={"train": "tiny.tsv", "dev": None, "test": None},
            backends=[
                {"name": f"toy{i}", "kind": "toy", "dim": 4, "seed": i} for i in range(3)
            ],
            loss={"mode": "baseline"},
            meta_learner={
                "epochs": 200,
                "batch_size": 8,
                "lstm_units": 25,
                "learning_rate": 0.01,
                "dropout": 0.0,
                "recurrent_dropout": 0.0,
            },
        )
        cmd.cmdTrain(config)
        report = cmd.cmdEvaluate(os.path.join(self.dir, "out", cmd.kCheckpointFile), train, config)
        self.assertEqual(32, report.num_instances)
        self.assertGreaterEqual(report.f1_micro, 0.95)

    def test_backend_subset_and_train_only(self):
        config = _writeConfig(
            self.dir,
            paths={"dev": None, "test": None},
            backends=[
                {"name": "a", "kind": "toy", "dim": 2},
                {"name": "b", "kind": "toy", "dim": 5},
            ],
        )
        (manifest,) = cmd.cmdTrain(config, backends=["b"])
        with open(manifest, encoding="utf-8") as f:
            m = json.load(f)
        self.assertEqual(["b"], m["provenance"])
        self.assertEqual(5, m["input_width"])
        self.assertEqual("train", m["evaluated_on"])
        self.assertEqual([], m["dev_f1_history"])
        self.assertEqual({"train"}, set(m["checksums"]["inputs"]))
        with self.assertRaises(ConfigError):
            cmd.cmdTrain(config, backends=["c"])

    def test_custom_backend(self):
        with open(os.path.join(self.dir, "backend_WordLen.py"), "w", encoding="utf-8") as f:
            f.write(
                "import numpy as np\n"
                "from emostack.embeddings import EmbeddingBackend\n\n"
                "class backend_WordLen(EmbeddingBackend):\n"
                "    @classmethod\n"
                "    def fromSpec(cls, spec, max_len):\n"
                "        return cls(spec.name, spec.dim, max_len)\n\n"
                "    def _embedTokens(self, tokens):\n"
                "        return np.stack([np.full(self.dim, len(t), dtype=np.float32) "
                "for t in tokens])\n"
            )
        config = _writeConfig(
            self.dir,
            backends=[
                {"name": "toy", "kind": "toy", "dim": 3},
                {"name": "wordlen", "kind": "./backend_WordLen.py", "dim": 2},
            ],
        )
        (manifest,) = cmd.cmdTrain(config)
        with open(manifest, encoding="utf-8") as f:
            self.assertEqual(5, json.load(f)["input_width"])
        ckpt = os.path.join(self.dir, "out", cmd.kCheckpointFile)
        out = os.path.join(self.dir, "pred.tsv")
        y = cmd.cmdPredict(ckpt, os.path.join(self.dir, "dev.tsv"), out)
        self.assertEqual((10, 12), y.shape)


if __name__ == "__main__":
    import sys, pytest

    sys.exit(pytest.main(sys.argv))
