import hashlib
import importlib.util
import os
import tempfile
import unittest

import numpy as np

import emostack.embeddings as emb
from emostack.backend_Toy import backend_Toy
from emostack.backends import getBackendFor, getBuiltinBackends, makeBackend
from emostack.common import (
    AlignmentError,
    CacheError,
    CapabilityError,
    ConfigError,
    EmptyDatasetError,
)
from emostack.corpus import Dataset, synthesizeDataset

kHaveTransformers = importlib.util.find_spec("transformers") is not None


def _hashProjection(token: str, dim: int, seed: int) -> np.ndarray:
    key = str(seed).encode("ascii")
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(dim).astype(np.float32)


class _Frozen(emb.EmbeddingBackend):
    def _embedTokens(self, tokens):
        return np.ones((len(tokens), self.dim), dtype=np.float32)


class TestToyBackend(unittest.TestCase):
    def test_fixed_token_vector(self):
        b = emb.toyBackend(dim=6, seed=42)
        seq = emb.extract(b, "فرح")
        np.testing.assert_array_equal(_hashProjection("فرح", 6, 42), seq.matrix[0])
        self.assertEqual(1, seq.mask.sum())

    def test_deterministic(self):
        a = emb.toyBackend(dim=4, seed=1)
        b = emb.toyBackend(dim=4, seed=1)
        text = "كتاب شارع كتاب"
        s1, s2 = a.extract(text), b.extract(text)
        np.testing.assert_array_equal(s1.matrix, s2.matrix)
        np.testing.assert_array_equal(s1.matrix[0], s1.matrix[2])
        np.testing.assert_array_equal(s1.matrix, a.extract(text).matrix)

    def test_seeds_differ(self):
        a = emb.toyBackend(dim=4, seed=1)
        b = emb.toyBackend(dim=4, seed=2)
        for i in range(100):
            tok = f"tok{i}"
            self.assertFalse(np.array_equal(a.extract(tok).matrix[0], b.extract(tok).matrix[0]))

    def test_dim(self):
        seq = emb.toyBackend(dim=8, seed=0).extract("حب")
        self.assertEqual((32, 8), seq.matrix.shape)
        self.assertEqual(8, seq.dim)

    def test_padding(self):
        b = emb.toyBackend(dim=4, seed=0)
        seq = b.extract("")
        self.assertEqual((32, 4), seq.matrix.shape)
        self.assertFalse(np.any(seq.matrix))
        self.assertFalse(np.any(seq.mask))

        seq = b.extract("ا ب ج")
        self.assertEqual(3, seq.mask.sum())
        np.testing.assert_array_equal([1, 1, 1] + [0] * 29, seq.mask)
        self.assertFalse(np.any(seq.matrix[3:]))
        self.assertTrue(np.all(np.isfinite(seq.matrix)))

    def test_truncation(self):
        b = emb.toyBackend(dim=2, seed=0, max_len=8)
        text = " ".join(f"w{i}" for i in range(20))
        seq = b.extract(text)
        self.assertEqual(8, seq.mask.sum())
        np.testing.assert_array_equal(_hashProjection("w7", 2, 0), seq.matrix[7])

    def test_special_tokens(self):
        b = emb.toyBackend(dim=3, seed=5, keep_special_tokens=True)
        seq = b.extract("ا ب ج")
        self.assertEqual(5, seq.mask.sum())
        np.testing.assert_array_equal(_hashProjection(emb.kClsMarker, 3, 5), seq.matrix[0])
        np.testing.assert_array_equal(_hashProjection("ا", 3, 5), seq.matrix[1])
        np.testing.assert_array_equal(_hashProjection(emb.kSepMarker, 3, 5), seq.matrix[4])
        self.assertEqual(0, b.extract("").mask.sum())
        self.assertEqual(32, b.extract(" ".join(["x"] * 40)).mask.sum())


class TestFineTune(unittest.TestCase):
    def test_toy_is_identity(self):
        b = emb.toyBackend(dim=4, seed=0)
        data = synthesizeDataset(10, seed=0)
        self.assertIs(b, emb.fineTune(b, data, 3))
        self.assertIs(b, emb.fineTune(b, data, 0))

    def test_unsupported(self):
        b = _Frozen("frozen", 2)
        data = synthesizeDataset(4, seed=0)
        self.assertIs(b, emb.fineTune(b, data, 0))
        with self.assertRaises(CapabilityError):
            emb.fineTune(b, data, 1)

    def test_empty_data(self):
        with self.assertRaises(EmptyDatasetError):
            emb.fineTune(emb.toyBackend(dim=4, seed=0), Dataset([]), 2)


class TestStack(unittest.TestCase):
    def test_three_backends(self):
        seqs = [emb.toyBackend(dim=4, seed=s).extract("حزن شديد") for s in range(3)]
        st = emb.stack(seqs, ["a", "b", "c"])
        self.assertEqual((32, 12), st.matrix.shape)
        self.assertEqual(("a", "b", "c"), st.provenance)
        for k in range(3):
            np.testing.assert_array_equal(seqs[k].matrix, st.matrix[:, 4 * k : 4 * k + 4])
        np.testing.assert_array_equal(seqs[0].mask, st.mask)

    def test_single(self):
        seq = emb.toyBackend(dim=5, seed=0).extract("غضب")
        st = emb.stack([seq])
        np.testing.assert_array_equal(seq.matrix, st.matrix)
        np.testing.assert_array_equal(seq.mask, st.mask)

    def test_permutation_permutes_blocks(self):
        dims = (2, 3, 4)
        seqs = [emb.toyBackend(dim=d, seed=d).extract("ا ب") for d in dims]
        fwd = emb.stack(seqs)
        rev = emb.stack(seqs[::-1])
        np.testing.assert_array_equal(fwd.matrix[:, :2], rev.matrix[:, 7:])
        np.testing.assert_array_equal(fwd.matrix[:, 2:5], rev.matrix[:, 4:7])
        np.testing.assert_array_equal(fwd.matrix[:, 5:], rev.matrix[:, :4])

    def test_width_additivity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 6))
            dims = rng.integers(1, 9, n)
            seqs = [emb.toyBackend(dim=int(d), seed=i).extract("x y z") for i, d in enumerate(dims)]
            st = emb.stack(seqs)
            self.assertEqual(int(dims.sum()), st.matrix.shape[1])
            np.testing.assert_array_equal(seqs[0].mask, st.mask)

    def test_mask_mismatch(self):
        a = emb.toyBackend(dim=2, seed=0).extract("ا ب")
        b = emb.toyBackend(dim=2, seed=1).extract("ا ب ج")
        with self.assertRaises(AlignmentError):
            emb.stack([a, b])
        c = emb.toyBackend(dim=2, seed=1, max_len=16).extract("ا ب")
        with self.assertRaises(AlignmentError):
            emb.stack([a, c])


class TestDatasetLevel(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.texts = synthesizeDataset(12, seed=3).texts + [""]

    def tearDown(self):
        self.tmp.cleanup()

    def _backends(self, **kw):
        return [emb.toyBackend(dim=d, seed=d, name=f"b{d}", **kw) for d in (2, 3, 4)]

    def test_workers_merge_in_backend_order(self):
        single = emb.stackDataset(self._backends(), self.texts, workers=1)
        pooled = emb.stackDataset(self._backends(), self.texts, workers=3)
        np.testing.assert_array_equal(single.matrix, pooled.matrix)
        np.testing.assert_array_equal(single.mask, pooled.mask)
        self.assertEqual(("b2", "b3", "b4"), pooled.provenance)
        self.assertEqual((13, 32, 9), pooled.matrix.shape)
        for i, t in enumerate(self.texts):
            expected = emb.stack([b.extract(t) for b in self._backends()])
            np.testing.assert_array_equal(expected.matrix, pooled.matrix[i])

    def test_empty_texts(self):
        st = emb.stackDataset(self._backends(), [])
        self.assertEqual((0, 32, 9), st.matrix.shape)
        self.assertEqual(0, len(st))

    def test_special_token_disagreement(self):
        bs = [
            emb.toyBackend(dim=2, seed=0, name="a"),
            emb.toyBackend(dim=2, seed=1, name="b", keep_special_tokens=True),
        ]
        with self.assertRaises(AlignmentError):
            emb.stackDataset(bs, ["ا ب"])

    def test_length_disagreement(self):
        bs = [
            emb.toyBackend(dim=2, seed=0, name="a"),
            emb.toyBackend(dim=2, seed=1, name="b", max_len=8),
        ]
        with self.assertRaises(AlignmentError):
            emb.stackDataset(bs, ["ا ب"])

    def test_cache(self):
        cache = os.path.join(self.tmp.name, "cache")
        b = emb.toyBackend(dim=3, seed=7, name="c")
        m1, k1 = emb.extractDataset(b, self.texts, cache_dir=cache)
        files = os.listdir(cache)
        self.assertEqual(1, len(files))
        self.assertTrue(files[0].startswith("c-") and files[0].endswith(".embc"))
        m2, k2 = emb.extractDataset(emb.toyBackend(dim=3, seed=7, name="c"), self.texts, cache)
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(k1, k2)
        # another seed is another cache entry
        emb.extractDataset(emb.toyBackend(dim=3, seed=8, name="c"), self.texts, cache)
        self.assertEqual(2, len(os.listdir(cache)))

    def test_cache_container(self):
        path = os.path.join(self.tmp.name, "x.embc")
        rng = np.random.default_rng(0)
        matrix = rng.standard_normal((3, 5, 2)).astype(np.float32)
        mask = (rng.random((3, 5)) < 0.5).astype(np.uint8)
        emb.writeEmbeddingCache(path, matrix, mask)
        with open(path, "rb") as f:
            blob = f.read()
        self.assertEqual(b"EMBC", blob[:4])
        self.assertEqual(4 + 2 + 12 + 15 + 3 * 5 * 2 * 4, len(blob))
        m, k = emb.readEmbeddingCache(path)
        np.testing.assert_array_equal(matrix, m)
        np.testing.assert_array_equal(mask, k)

        with open(path, "wb") as f:
            f.write(blob[:-1])
        with self.assertRaises(CacheError):
            emb.readEmbeddingCache(path)
        with open(path, "wb") as f:
            f.write(b"NOPE" + blob[4:])
        with self.assertRaises(CacheError):
            emb.readEmbeddingCache(path)
        with open(path, "wb") as f:
            f.write(blob[:4] + b"\x07\x00" + blob[6:])
        with self.assertRaises(CacheError):
            emb.readEmbeddingCache(path)


class TestRegistry(unittest.TestCase):
    def test_builtin(self):
        self.assertEqual(["Toy", "Transformer"], getBuiltinBackends())
        self.assertIs(backend_Toy, getBackendFor("toy"))
        self.assertIs(backend_Toy, getBackendFor("TOY"))

    def test_makeBackend(self):
        spec = emb.BackendSpec(name="t", kind="toy", dim=4, seed=9)
        b = makeBackend(spec, 16)
        self.assertIsInstance(b, backend_Toy)
        self.assertEqual(("t", 4, 16, 9), (b.name, b.dim, b.max_len, b.seed))
        self.assertFalse(b.keep_special_tokens)

    def test_custom_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "backend_WordLen.py")
            with open(path, "w", encoding="utf-8") as f:
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
            b = makeBackend(emb.BackendSpec(name="wl", kind=path, dim=2), 4)
            seq = b.extract("ab cde")
            np.testing.assert_array_equal([[2, 2], [3, 3], [0, 0], [0, 0]], seq.matrix)

            bad = os.path.join(tmp, "backend_Nothing.py")
            with open(bad, "w", encoding="utf-8") as f:
                f.write("x = 1\n")
            with self.assertRaises(ConfigError):
                getBackendFor(bad)
        with self.assertRaises(ConfigError):
            getBackendFor(os.path.join(tmp, "backend_Missing.py"))


def _tinyBert(path: str, words) -> None:
    import torch
    import transformers

    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", *words, "##ا", "##ه", "##ب"]
    vocab_file = os.path.join(path, "vocab.txt")
    with open(vocab_file, "w", encoding="utf-8") as f:
        f.write("\n".join(vocab) + "\n")
    tok = transformers.BertTokenizerFast(vocab_file=vocab_file, do_lower_case=False)
    tok.save_pretrained(path)
    cfg = transformers.BertConfig(
        vocab_size=len(vocab),
        hidden_size=16,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=128,
    )
    torch.manual_seed(0)
    transformers.BertModel(cfg).save_pretrained(path)


@unittest.skipUnless(kHaveTransformers, "needs the transformers extra")
class TestTransformerBackend(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        from emostack.corpus import kSyntheticCueWords, kSyntheticFillerWords

        cls.tmp = tempfile.TemporaryDirectory()
        cls.model_dir = os.path.join(cls.tmp.name, "bert")
        os.makedirs(cls.model_dir)
        _tinyBert(cls.model_dir, [*kSyntheticCueWords, *kSyntheticFillerWords])

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def _backend(self, model=None, **kw):
        from emostack.backend_Transformer import backend_Transformer

        kw.setdefault("max_len", 16)
        return backend_Transformer("bert", model or self.model_dir, **kw)

    def test_extract(self):
        b = self._backend()
        self.assertEqual(16, b.dim)
        self.assertTrue(b.keep_special_tokens)
        seq = b.extract("فرح كتاب غريب")
        self.assertEqual((16, 16), seq.matrix.shape)
        # [CLS], 3 words, [SEP]
        self.assertEqual(5, seq.mask.sum())
        self.assertFalse(np.any(seq.matrix[5:]))
        np.testing.assert_array_equal(seq.matrix, b.extract("فرح كتاب غريب").matrix)
        self.assertEqual(0, b.extract("").mask.sum())

    def test_extractMany_matches_extract(self):
        b = self._backend(batch_size=3)
        texts = synthesizeDataset(7, seed=1).texts + [""]
        matrix, mask = b.extractMany(texts)
        for i, t in enumerate(texts):
            seq = b.extract(t)
            np.testing.assert_allclose(seq.matrix, matrix[i], atol=1e-5)
            np.testing.assert_array_equal(seq.mask, mask[i])

    def test_without_special_tokens(self):
        b = self._backend(keep_special_tokens=False)
        self.assertEqual(3, b.extract("فرح كتاب غريب").mask.sum())

    def test_fine_tune(self):
        b = self._backend(learning_rate=1e-3, batch_size=4)
        data = synthesizeDataset(8, seed=2)
        text = data.texts[0]
        before = b.extract(text).matrix
        tuned = emb.fineTune(b, data, 2)
        self.assertIsNot(b, tuned)
        self.assertFalse(np.array_equal(before, tuned.extract(text).matrix))
        np.testing.assert_array_equal(before, b.extract(text).matrix)
        self.assertNotEqual(b.cache_key, tuned.cache_key)

        spec = emb.BackendSpec(name="bert", kind="transformer", model=self.model_dir)
        out = os.path.join(self.tmp.name, "export")
        exported = tuned.exportSpec(spec, out)
        self.assertEqual(0, exported.fine_tune_epochs)
        self.assertFalse(os.path.isabs(exported.model))
        restored = self._backend(model=os.path.join(out, exported.model))
        np.testing.assert_allclose(
            tuned.extract(text).matrix, restored.extract(text).matrix, atol=1e-5
        )
        self.assertIs(spec, b.exportSpec(spec, out))

    def test_bad_layer(self):
        with self.assertRaises(ConfigError):
            self._backend(layer=7)


if __name__ == "__main__":
    import sys, pytest

    sys.exit(pytest.main(sys.argv))
