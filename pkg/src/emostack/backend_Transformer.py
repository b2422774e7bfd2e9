import copy
import dataclasses
import hashlib
import os

import numpy as np

# also must use abs package path to be dynamically loadable
from emostack.common import CapabilityError, ConfigError
from emostack.corpus import Dataset, kNumLabels
from emostack.embeddings import BackendSpec, EmbeddingBackend, kDefaultMaxLen


def _requireTransformers():
    try:
        import torch
        import transformers
    except ImportError as e:
        raise CapabilityError(
            "transformer backends need the 'transformers' extra: pip install emostack[transformers]"
        ) from e
    return torch, transformers


class backend_Transformer(EmbeddingBackend):
    """Hugging Face encoder (BERT family) backend. Text is fed as pre-split whitespace words, each
    word's vector is the mean of its subword vectors taken from the configured hidden layer. With
    `keep_special_tokens` the [CLS] and [SEP] positions frame the word rows.

    Fine-tuning trains the encoder together with a temporary dense multi-label head on the [CLS]
    vector and then drops the head; the original backend is left intact.
    """

    supports_training = True

    def __init__(
        self,
        name: str,
        model: str,
        max_len: int = kDefaultMaxLen,
        layer: int = -1,
        keep_special_tokens: bool = True,
        batch_size: int = 16,
        learning_rate: float = 2e-5,
        seed: int = 0,
        _loaded=None,
        _fingerprint: str | None = None,
    ) -> None:
        torch, transformers = _requireTransformers()
        assert isinstance(model, str) and len(model) > 0
        assert batch_size >= 1 and learning_rate > 0

        if _loaded is None:
            try:
                tokenizer = transformers.AutoTokenizer.from_pretrained(model, use_fast=True)
                encoder = transformers.AutoModel.from_pretrained(model)
            except (OSError, ValueError) as e:
                raise ConfigError(f"backend '{name}': can't load model '{model}': {e}") from e
            if not tokenizer.is_fast:
                raise CapabilityError(f"backend '{name}': word alignment needs a fast tokenizer")
            encoder.eval()
        else:
            tokenizer, encoder = _loaded

        n_layers = encoder.config.num_hidden_layers
        if not (-(n_layers + 1) <= layer <= n_layers):
            raise ConfigError(f"backend '{name}': layer {layer} is out of range for '{model}'")

        super().__init__(name, int(encoder.config.hidden_size), max_len, keep_special_tokens)
        self._model_id = model
        self._layer = layer
        self._batch_size = batch_size
        self._lr = learning_rate
        self._seed = seed
        self._tokenizer = tokenizer
        self._encoder = encoder
        self._fingerprint = _fingerprint

    @classmethod
    def fromSpec(cls, spec: BackendSpec, max_len: int) -> "backend_Transformer":
        return cls(
            spec.name,
            spec.model,
            max_len=max_len,
            layer=spec.layer,
            keep_special_tokens=spec.keep_special_tokens is not False,
            batch_size=spec.batch_size,
            learning_rate=spec.learning_rate,
            seed=spec.seed,
        )

    @property
    def model_id(self) -> str:
        return self._model_id

    @property
    def cache_key(self) -> str:
        return (
            f"transformer:{self._model_id}:{self._layer}:{int(self.keep_special_tokens)}:"
            f"{self._fingerprint or 'pretrained'}"
        )

    def exportSpec(self, spec: BackendSpec, out_dir: str) -> BackendSpec:
        if self._fingerprint is None:
            return spec
        rel = os.path.join("backends", f"{self.name}-{self._fingerprint}")
        path = os.path.join(out_dir, rel)
        os.makedirs(path, exist_ok=True)
        self._tokenizer.save_pretrained(path)
        self._encoder.save_pretrained(path)
        return dataclasses.replace(spec, model=rel, fine_tune_epochs=0)

    def _encode(self, batch_words: list[list[str]], grad: bool = False):
        torch, _ = _requireTransformers()
        enc = self._tokenizer(
            batch_words,
            is_split_into_words=True,
            padding=True,
            truncation=True,
            return_tensors="pt",
        )
        with torch.set_grad_enabled(grad):
            out = self._encoder(
                input_ids=enc["input_ids"],
                attention_mask=enc["attention_mask"],
                output_hidden_states=True,
            )
        return enc, out.hidden_states[self._layer]

    def _rowsFor(self, enc, hidden: np.ndarray, bi: int, n_words: int) -> np.ndarray:
        word_ids = enc.word_ids(batch_index=bi)
        rows = np.zeros((n_words, self.dim), dtype=np.float32)
        for w in range(n_words):
            pos = [p for p, wid in enumerate(word_ids) if wid == w]
            if len(pos) > 0:
                rows[w] = hidden[pos].mean(axis=0)
        if not self.keep_special_tokens:
            return rows
        last = int(enc["attention_mask"][bi].sum()) - 1
        return np.concatenate([hidden[:1], rows, hidden[last : last + 1]], axis=0)

    def _embedTokens(self, tokens: list[str]) -> np.ndarray:
        enc, hidden = self._encode([tokens])
        return self._rowsFor(enc, hidden[0].float().numpy(), 0, len(tokens))

    def extractMany(self, texts) -> tuple[np.ndarray, np.ndarray]:
        n = len(texts)
        matrix = np.zeros((n, self.max_len, self.dim), dtype=np.float32)
        mask = np.zeros((n, self.max_len), dtype=np.uint8)
        words = [t.split()[: self.wordCapacity()] for t in texts]
        todo = [i for i in range(n) if len(words[i]) > 0]
        for start in range(0, len(todo), self._batch_size):
            idx = todo[start : start + self._batch_size]
            enc, hidden = self._encode([words[i] for i in idx])
            hidden = hidden.float().numpy()
            for bi, i in enumerate(idx):
                rows = self._rowsFor(enc, hidden[bi], bi, len(words[i]))
                matrix[i, : rows.shape[0]] = rows
                mask[i, : rows.shape[0]] = 1
        return matrix, mask

    def _fineTune(self, data: Dataset, epochs: int, logger) -> "backend_Transformer":
        torch, _ = _requireTransformers()
        h = hashlib.sha256(
            f"{self._fingerprint}:{epochs}:{self._lr}:{self._seed}:{self._batch_size}".encode()
        )
        for e in data.examples:
            h.update(e.raw_text.encode("utf-8") + b"\t" + e.labels.tobytes())

        encoder = copy.deepcopy(self._encoder)
        texts = [t.split()[: self.wordCapacity()] for t in data.texts]
        keep = [i for i, w in enumerate(texts) if len(w) > 0]
        texts = [texts[i] for i in keep]
        targets = torch.as_tensor(data.label_matrix[keep], dtype=torch.float32)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self._seed)
            head = torch.nn.Linear(self.dim, kNumLabels)
            optimizer = torch.optim.AdamW(
                list(encoder.parameters()) + list(head.parameters()), lr=self._lr
            )
            criterion = torch.nn.BCEWithLogitsLoss()
            tuned = backend_Transformer(
                self.name,
                self._model_id,
                self.max_len,
                self._layer,
                self.keep_special_tokens,
                self._batch_size,
                self._lr,
                self._seed,
                _loaded=(self._tokenizer, encoder),
                _fingerprint=h.hexdigest()[:16],
            )
            encoder.train()
            for epoch in range(epochs):
                order = np.random.default_rng(self._seed + epoch).permutation(len(texts))
                total = 0.0
                for start in range(0, len(order), self._batch_size):
                    idx = order[start : start + self._batch_size]
                    _, hidden = tuned._encode([texts[i] for i in idx], grad=True)
                    loss = criterion(head(hidden[:, 0]), targets[torch.as_tensor(idx)])
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                    total += float(loss.detach()) * len(idx)
                if logger is not None:
                    logger.debug(
                        f"'{self.name}': fine-tune epoch {epoch + 1}/{epochs}, "
                        f"loss {total / max(len(texts), 1):.5f}"
                    )
            encoder.eval()
        return tuned
