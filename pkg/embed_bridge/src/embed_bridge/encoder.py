"""Token-level encoders behind a common interface.

The exporter only needs `encode_tokens(tokens) -> (n_tokens, dim)` per-token
representations in f32. Two implementations:

- TinyTransformerEncoder: a locally constructed, seeded, frozen transformer
  with a hash-based word vocabulary. Fully offline and deterministic; the
  default when no pretrained checkpoint is available.
- PretrainedEncoder: any Hugging Face encoder checkpoint (e.g. a bimodal
  code/natural-language model); word-level representations are max-pooled
  over the word's subword pieces.
"""

import hashlib
import re

import numpy as np
import torch

_TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|\d+|[^\sA-Za-z0-9_]")


def tokenize_source(text: str) -> list:
    """Whitespace/punctuation lexer; never splits an identifier internally."""
    return _TOKEN_RE.findall(text)


def segment_tokens(tokens, n_segments: int) -> list:
    """n_segments contiguous runs of equal length; trailing runs may be empty."""
    if n_segments <= 0:
        raise ValueError(f"segment count must be positive, got {n_segments}")
    if not tokens:
        return [[] for _ in range(n_segments)]
    size = -(-len(tokens) // n_segments)
    return [list(tokens[i * size:(i + 1) * size]) for i in range(n_segments)]


def _stable_id(token: str, vocab_size: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % vocab_size


class TinyTransformerEncoder:
    """Frozen, seeded transformer over a hashed word vocabulary.

    Weights are random but fixed by the seed, so exports are reproducible
    bit for bit. One word maps to exactly one position (no subwords).
    """

    def __init__(self, dim: int = 768, layers: int = 6, heads: int = 12,
                 vocab_size: int = 4096, max_positions: int = 512, seed: int = 0):
        from transformers import BertConfig, BertModel

        self.dim = dim
        self.vocab_size = vocab_size
        self.max_positions = max_positions
        torch.manual_seed(seed)
        config = BertConfig(
            vocab_size=vocab_size, hidden_size=dim, num_hidden_layers=layers,
            num_attention_heads=heads, intermediate_size=2 * dim,
            max_position_embeddings=max_positions,
        )
        self.model = BertModel(config)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def encode_tokens(self, tokens) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim), dtype=np.float32)
        ids = torch.tensor([[_stable_id(t, self.vocab_size) for t in tokens]])
        with torch.no_grad():
            hidden = self.model(input_ids=ids).last_hidden_state[0]
        return hidden.numpy().astype(np.float32)

    @property
    def context_limit(self) -> int:
        return self.max_positions


class PretrainedEncoder:
    """Hugging Face checkpoint wrapper; per-word vectors max-pool the word's
    subword hidden states."""

    def __init__(self, model_name: str):
        from transformers import AutoModel, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name)
        self.model.eval()
        self.dim = int(self.model.config.hidden_size)

    def encode_tokens(self, tokens) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim), dtype=np.float32)
        enc = self.tokenizer(list(tokens), is_split_into_words=True,
                             return_tensors="pt", truncation=True)
        with torch.no_grad():
            hidden = self.model(**enc).last_hidden_state[0]
        word_ids = enc.word_ids(0)
        out = np.full((len(tokens), self.dim), -np.inf, dtype=np.float32)
        seen = np.zeros(len(tokens), dtype=bool)
        for pos, wid in enumerate(word_ids):
            if wid is None:
                continue
            vec = hidden[pos].numpy()
            out[wid] = np.maximum(out[wid], vec)
            seen[wid] = True
        out[~seen] = 0.0
        return out.astype(np.float32)

    @property
    def context_limit(self) -> int:
        return int(getattr(self.model.config, "max_position_embeddings", 512))


def build_encoder(model_id: str, seed: int = 0):
    """`tiny[:dim[:layers]]` builds the offline encoder; anything else is
    treated as a pretrained checkpoint name."""
    if model_id == "tiny" or model_id.startswith("tiny:"):
        parts = model_id.split(":")
        dim = int(parts[1]) if len(parts) > 1 else 768
        layers = int(parts[2]) if len(parts) > 2 else 6
        heads = 12 if dim % 12 == 0 else 4
        return TinyTransformerEncoder(dim=dim, layers=layers, heads=heads, seed=seed)
    return PretrainedEncoder(model_id)
