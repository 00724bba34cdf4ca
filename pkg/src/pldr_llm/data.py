"""Tokenizers and corpus packing.

Documents are tokenized with one [END] appended per document, concatenated
in corpus order, cut into fixed-length chunks and the final partial chunk
is right-padded with [PAD].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
import torch

from .errors import ConfigError, InputError, TokenizerFileError

BYTE_FALLBACK_MARKER = "#byte-fallback"
SPACE = "▁"
PAD_PIECE, END_PIECE, UNK_PIECE = "[PAD]", "[END]", "<unk>"


class ByteTokenizer:
    """Bytes 0-255, then [PAD]=256, [END]=257, <unk>=258."""

    vocab_size = 259
    pad_id = 256
    end_id = 257
    unk_id = 258
    digit_split = True
    byte_fallback = True

    def encode(self, text: str, add_end: bool = True) -> list[int]:
        ids = list(text.encode("utf-8"))
        if add_end:
            ids.append(self.end_id)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return bytes(int(i) for i in ids if 0 <= int(i) < 256).decode("utf-8", errors="replace")

    def spec(self) -> str:
        return "byte"


class UnigramTokenizer:
    """Viterbi segmentation over an externally trained unigram vocabulary.

    The vocabulary file has one ``piece<TAB>score`` entry per line; ids are
    line numbers. ``[PAD]``, ``[END]`` and ``<unk>`` must be present. If all
    256 ``<0xXX>`` pieces exist, characters without a piece are decomposed
    into UTF-8 bytes.
    """

    def __init__(self, pieces: list[str], scores: list[float], digit_split: bool = True, source: str = ""):
        self.pieces = pieces
        self.scores = scores
        self.index = {}
        for i, p in enumerate(pieces):
            if p in self.index:
                raise TokenizerFileError(f"duplicate piece {p!r} at line {i + 1}")
            self.index[p] = i
        for special in (PAD_PIECE, END_PIECE, UNK_PIECE):
            if special not in self.index:
                raise TokenizerFileError(f"vocabulary lacks required piece {special}")
        self.pad_id = self.index[PAD_PIECE]
        self.end_id = self.index[END_PIECE]
        self.unk_id = self.index[UNK_PIECE]
        self.byte_ids = [self.index.get(f"<0x{b:02X}>") for b in range(256)]
        self.byte_fallback = all(i is not None for i in self.byte_ids)
        self.byte_of = {i: b for b, i in enumerate(self.byte_ids) if i is not None}
        self.digit_split = digit_split
        self.special = {self.pad_id, self.end_id, self.unk_id}
        self.max_len = max(len(p) for p in pieces)
        self.source = source
        self.unk_score = min(scores) - 10.0

    @property
    def vocab_size(self) -> int:
        return len(self.pieces)

    @classmethod
    def load(cls, path, digit_split: bool = True) -> "UnigramTokenizer":
        pieces, scores = [], []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TokenizerFileError(f"{path}:{n}: expected 'piece<TAB>score'")
            try:
                score = float(parts[1])
            except ValueError:
                raise TokenizerFileError(f"{path}:{n}: score {parts[1]!r} is not a number") from None
            pieces.append(parts[0])
            scores.append(score)
        if not pieces:
            raise TokenizerFileError(f"{path}: empty vocabulary")
        return cls(pieces, scores, digit_split, source=str(path))

    def _allowed(self, piece: str) -> bool:
        if self.digit_split and len(piece) > 1 and any(c.isdigit() for c in piece):
            return False
        return True

    def encode(self, text: str, add_end: bool = True) -> list[int]:
        ids: list[int] = []
        if text:
            s = SPACE + text.replace(" ", SPACE)
            n = len(s)
            best = [-math.inf] * (n + 1)
            back: list[Optional[tuple]] = [None] * (n + 1)
            best[0] = 0.0
            for end in range(1, n + 1):
                for start in range(max(0, end - self.max_len), end):
                    if best[start] == -math.inf:
                        continue
                    piece = s[start:end]
                    i = self.index.get(piece)
                    if i is None or i in self.special or not self._allowed(piece):
                        continue
                    cand = best[start] + self.scores[i]
                    if cand > best[end]:
                        best[end], back[end] = cand, (start, i)
                # unknown single character
                if best[end - 1] > -math.inf and best[end - 1] + self.unk_score > best[end]:
                    best[end], back[end] = best[end - 1] + self.unk_score, (end - 1, None)
            pos, rev = n, []
            while pos > 0:
                start, i = back[pos]
                if i is None:
                    ch = s[start:pos]
                    if self.byte_fallback:
                        rev.extend(self.byte_ids[b] for b in reversed(ch.encode("utf-8")))
                    else:
                        rev.append(self.unk_id)
                else:
                    rev.append(i)
                pos = start
            ids = rev[::-1]
        if add_end:
            ids.append(self.end_id)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out, buf = [], bytearray()
        for i in ids:
            i = int(i)
            if i in self.byte_of:
                buf.append(self.byte_of[i])
                continue
            if buf:
                out.append(buf.decode("utf-8", errors="replace"))
                buf = bytearray()
            if i in self.special or not 0 <= i < len(self.pieces):
                continue
            out.append(self.pieces[i])
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
        text = "".join(out).replace(SPACE, " ")
        return text[1:] if text.startswith(" ") else text

    def spec(self) -> str:
        return self.source


def load_tokenizer(spec: str, digit_split: bool = True, vocab_size: Optional[int] = None):
    """``"byte"`` or a vocabulary path; checks ids fit a model of ``vocab_size``."""
    if spec == "byte":
        tok = ByteTokenizer()
    else:
        path = Path(spec)
        if not path.is_file():
            raise TokenizerFileError(f"vocabulary file not found: {spec}")
        with open(path, encoding="utf-8") as fh:
            first = fh.readline().strip()
        tok = ByteTokenizer() if first == BYTE_FALLBACK_MARKER else UnigramTokenizer.load(path, digit_split)
    if vocab_size is not None and tok.vocab_size > vocab_size:
        raise TokenizerFileError(
            f"tokenizer has {tok.vocab_size} ids but the model vocabulary holds {vocab_size}"
        )
    return tok


def read_documents(path) -> Iterator[str]:
    """One document per line; ``.jsonl``/``.json`` files read the ``text`` field."""
    path = Path(path)
    is_json = path.suffix in (".jsonl", ".json")
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if is_json:
                try:
                    yield json.loads(line)["text"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    raise InputError(f"{path}:{n}: expected a JSON object with a 'text' field") from None
            else:
                yield line


def token_stream(docs: Iterable[str], tokenizer) -> Iterator[int]:
    for doc in docs:
        yield from tokenizer.encode(doc)


@dataclass
class TokenBatch:
    ids: torch.Tensor  # (B, T) long
    pad_mask: torch.Tensor  # (B, T) bool, True at padding
    lengths: torch.Tensor  # (B,) number of real tokens per row

    def __len__(self):
        return self.ids.shape[0]


@dataclass
class PackedStream:
    chunks: np.ndarray  # (n_chunks, context_length) int64
    pad_start: np.ndarray  # (n_chunks,) index of first pad, == context_length if none
    pad_id: int
    batch_size: int = 16

    @property
    def context_length(self) -> int:
        return self.chunks.shape[1]

    def __len__(self):
        return self.chunks.shape[0]

    def n_batches(self) -> int:
        return -(-len(self) // self.batch_size)

    def batches(self, batch_size: Optional[int] = None) -> Iterator[TokenBatch]:
        bs = batch_size or self.batch_size
        for lo in range(0, len(self), bs):
            ids = torch.from_numpy(self.chunks[lo : lo + bs].copy())
            lengths = torch.from_numpy(self.pad_start[lo : lo + bs].copy())
            pad_mask = torch.arange(self.context_length)[None, :] >= lengths[:, None]
            yield TokenBatch(ids, pad_mask, lengths)

    def real_tokens(self) -> list[int]:
        out: list[int] = []
        for row, ps in zip(self.chunks, self.pad_start):
            out.extend(row[:ps].tolist())
        return out


def pack(tokens: Iterable[int], context_length: int = 1024, batch_size: int = 16, pad_id: int = 0) -> PackedStream:
    """Chunk a token stream in order; pad only the final partial chunk."""
    if context_length < 2:
        raise ConfigError(f"context_length must be >= 2 for next-token targets, got {context_length}")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    arr = np.fromiter((int(t) for t in tokens), dtype=np.int64)
    if arr.size == 0:
        raise InputError("cannot pack an empty token stream")
    n_chunks = -(-arr.size // context_length)
    chunks = np.full((n_chunks, context_length), pad_id, dtype=np.int64)
    chunks.reshape(-1)[: arr.size] = arr
    pad_start = np.full(n_chunks, context_length, dtype=np.int64)
    tail = arr.size - (n_chunks - 1) * context_length
    pad_start[-1] = tail
    return PackedStream(chunks, pad_start, pad_id, batch_size)


def pack_corpus(path, tokenizer, context_length: int, batch_size: int) -> PackedStream:
    return pack(token_stream(read_documents(path), tokenizer), context_length, batch_size, tokenizer.pad_id)
