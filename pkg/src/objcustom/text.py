"""Frozen toy text encoder: word-level tokens mapped to fixed random embeddings."""
import re
import zlib

import torch

PAD, UNK = 0, 1

# Words of the toy corpus get collision-free ids; anything else is hashed.
BASE_VOCAB = (
    "a an the of photo picture scene background is in on beside at and with"
    " snow grass beach jungle eiffel tower"
    " circle square triangle diamond hexagon star cross"
    " red blue purple orange green yellow white black dog cat toy"
).split()

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text):
    return _WORD.findall(text.lower())


class ToyTextEncoder:
    def __init__(self, d_model, max_len=24, vocab_size=1024, seed=303):
        if vocab_size <= len(BASE_VOCAB) + 2:
            raise ValueError("vocab_size too small for the base vocabulary")
        self.d_model = d_model
        self.max_len = max_len
        self.vocab_size = vocab_size
        self.ids = {w: i + 2 for i, w in enumerate(BASE_VOCAB)}
        g = torch.Generator().manual_seed(seed)
        self.table = torch.randn(vocab_size, d_model, generator=g)
        self.table[PAD] = 0.0

    def token_id(self, word):
        if word in self.ids:
            return self.ids[word]
        offset = len(BASE_VOCAB) + 2
        return offset + zlib.crc32(word.encode()) % (self.vocab_size - offset)

    @property
    def pad_embedding(self):
        return self.table[PAD]

    def class_word_span(self, prompt, class_word):
        words, cw = tokenize(prompt), tokenize(class_word)
        if not cw:
            raise ValueError(f"class word {class_word!r} has no tokens")
        for i in range(len(words) - len(cw) + 1):
            if words[i:i + len(cw)] == cw:
                return i, i + len(cw)
        raise ValueError(f"class word {class_word!r} does not occur in prompt {prompt!r}")

    def encode(self, prompts, class_words):
        """Embed prompts padded to ``max_len``; returns (tokens [B,L,d], spans)."""
        out = torch.zeros(len(prompts), self.max_len, self.d_model)
        spans = []
        for b, (prompt, cw) in enumerate(zip(prompts, class_words)):
            words = tokenize(prompt)
            start, end = self.class_word_span(prompt, cw)
            if end > self.max_len:
                raise ValueError(f"class word {cw!r} falls beyond max_len={self.max_len}")
            ids = torch.tensor([self.token_id(w) for w in words[: self.max_len]], dtype=torch.long)
            out[b, : len(ids)] = self.table[ids]
            spans.append((start, end))
        return out, spans
