"""Byte-level BPE vocabulary and token/label alignment."""
from __future__ import annotations

import bisect
import codecs
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..labels import NL
from .fences import LabeledText

PAD, BOS, EOS = 256, 257, 258
FIRST_MERGE = 259

# every character matches one alternative, so chunks always tile the text
PRETOKEN = re.compile(r" ?[A-Za-z_]+| ?[0-9]+|`+|\n|[ \t]+|[^A-Za-z0-9_`\s]+|\s")


def pretokenize(text: str) -> list[str]:
    return PRETOKEN.findall(text)


class Vocabulary:
    """256 byte symbols, three reserved ids, then learned merges."""

    def __init__(self, merges: list[tuple[int, int]] | None = None):
        self.merges: list[tuple[int, int]] = list(merges or [])
        self._build()

    def _build(self) -> None:
        n = len(self)
        self.rank = np.full((n, n), -1, dtype=np.int32)
        self.pieces: list[bytes] = [bytes([i]) for i in range(256)] + [b"", b"", b""]
        for r, (a, b) in enumerate(self.merges):
            self.rank[a, b] = r
            self.pieces.append(self.pieces[a] + self.pieces[b])
        self._cache: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return FIRST_MERGE + len(self.merges)

    @classmethod
    def train(cls, texts, vocab_size: int = 512) -> "Vocabulary":
        words = Counter()
        for t in texts:
            words.update(pretokenize(t))
        seqs = [list(w.encode("utf-8")) for w in words]
        freqs = list(words.values())
        merges: list[tuple[int, int]] = []
        while FIRST_MERGE + len(merges) < vocab_size:
            pairs = Counter()
            for seq, f in zip(seqs, freqs):
                for a, b in zip(seq, seq[1:]):
                    pairs[a, b] += f
            if not pairs:
                break
            # highest count, ties to the smallest pair for determinism
            best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
            new = FIRST_MERGE + len(merges)
            merges.append(best)
            for j, seq in enumerate(seqs):
                if len(seq) < 2:
                    continue
                out, i = [], 0
                while i < len(seq):
                    if i + 1 < len(seq) and seq[i] == best[0] and seq[i + 1] == best[1]:
                        out.append(new)
                        i += 2
                    else:
                        out.append(seq[i])
                        i += 1
                seqs[j] = out
        return cls(merges)

    def _encode_chunk(self, chunk: str) -> list[int]:
        ids = self._cache.get(chunk)
        if ids is None:
            ids = kernels.bpe_merge(list(chunk.encode("utf-8")), self.rank, FIRST_MERGE)
            if len(self._cache) < 200_000:
                self._cache[chunk] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for chunk in pretokenize(text):
            out.extend(self._encode_chunk(chunk))
        return out

    def encode_with_offsets(self, text: str) -> tuple[list[int], list[int]]:
        """Token ids and the byte offset at which each token starts."""
        ids, offsets = [], []
        pos = 0
        for chunk in pretokenize(text):
            for t in self._encode_chunk(chunk):
                ids.append(t)
                offsets.append(pos)
                pos += len(self.pieces[t])
        return ids, offsets

    def decode_bytes(self, ids) -> bytes:
        return b"".join(self.pieces[int(i)] for i in ids)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def incremental_decoder(self) -> "IncrementalDecoder":
        return IncrementalDecoder(self)

    def to_json(self) -> dict:
        return {"type": "byte-bpe", "merges": [list(m) for m in self.merges]}

    @classmethod
    def from_json(cls, d: dict) -> "Vocabulary":
        return cls([tuple(m) for m in d["merges"]])


class IncrementalDecoder:
    """Turns a token stream into text, holding back split UTF-8 sequences."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._dec = codecs.getincrementaldecoder("utf-8")(errors="replace")

    def push(self, token: int) -> str:
        return self._dec.decode(self.vocab.pieces[int(token)])

    def flush(self) -> str:
        return self._dec.decode(b"", final=True)


@dataclass
class TokenizedSample:
    ids: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    straddles: int = 0

    def __len__(self) -> int:
        return len(self.ids)


def _char_byte_starts(text: str) -> list[int]:
    starts, pos = [], 0
    for c in text:
        starts.append(pos)
        pos += len(c.encode("utf-8"))
    return starts


def tokenize_and_align(lt: LabeledText, vocab: Vocabulary, bos: bool = True,
                       eos: bool = True) -> TokenizedSample:
    """Token ids with the label and target flag of each token's first character.

    A token whose characters fall in more than one span keeps its first
    character's label and is counted in ``straddles``. EOS carries the path the
    router holds after the text, which is what generation sees.
    """
    text = lt.text
    ids, offsets = vocab.encode_with_offsets(text)
    char_starts = _char_byte_starts(text)
    span_of = np.empty(len(text), dtype=np.int64)
    lab_of = np.empty(len(text), dtype=np.int64)
    for j, (s, e, lab) in enumerate(lt.spans):
        span_of[s:e] = j
        lab_of[s:e] = lab
    target = np.zeros(len(text), dtype=bool)
    for s, e in lt.targets:
        target[s:e] = True

    labels, mask = [], []
    straddles = 0
    for t, b in zip(ids, offsets):
        first = bisect.bisect_right(char_starts, b) - 1
        last = bisect.bisect_right(char_starts, b + len(vocab.pieces[t]) - 1) - 1
        labels.append(int(lab_of[first]))
        mask.append(bool(target[first]))
        if span_of[first] != span_of[last]:
            straddles += 1
    if bos:
        ids = [BOS] + ids
        labels = [NL] + labels
        mask = [False] + mask
    if eos:
        ids = ids + [EOS]
        labels = labels + [lt.end_path]
        mask = mask + [bool(lt.targets)]
    return TokenizedSample(np.array(ids, dtype=np.int64), np.array(labels, dtype=np.int64),
                           np.array(mask, dtype=bool), straddles)
