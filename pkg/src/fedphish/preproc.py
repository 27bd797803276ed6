"""Deterministic transformation of raw HTML into three fixed-length index
streams: UTF-8 character bytes, hashed visible words, hashed DOM tag names.

The whole pipeline is a pure function of its input: same page in, same
streams out, byte for byte. Scanning is single-pass and tolerant; malformed
markup degrades to text, never to an exception.
"""

from __future__ import annotations

import re
import struct
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from typing import BinaryIO, Iterator

import numpy as np

__all__ = [
    "PreprocConfig",
    "HtmlStreams",
    "fnv1a64",
    "normalize_html",
    "char_stream",
    "extract_visible_text",
    "tokenize_words",
    "word_stream",
    "dom_stream",
    "preprocess",
    "write_records",
    "read_records",
]

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF

CHAR_PAD = 256

_ZWNJ = "‌"
_ZWJ = "‍"

# C0/C1 controls minus tab/newline/carriage-return (those become spaces)
_CONTROL_RE = re.compile(r"[\x00-\x08\x0b\x0c\x0e-\x1f\x7f\x80-\x9f]")
_JOINER_RE = re.compile(f"[{_ZWNJ}{_ZWJ}]")
_WS_RE = re.compile(r"[ \t\n\r]+")

_RAW_TEXT_TAGS = frozenset({"script", "style", "template"})
_TAG_NAME_RE = re.compile(r"[a-zA-Z][a-zA-Z0-9:_-]*")


@dataclass(frozen=True)
class PreprocConfig:
    """Stream lengths, hash bucket counts and the optional shuffle seed."""

    char_len: int = 4096
    word_len: int = 1024
    dom_len: int = 1024
    word_buckets: int = 131071
    dom_buckets: int = 8190
    shuffle_seed: int | None = 42

    def __post_init__(self):
        for field in ("char_len", "word_len", "dom_len"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")
        if self.word_buckets < 2 or self.dom_buckets < 2:
            raise ValueError("bucket counts must be at least 2")

    @property
    def word_pad(self) -> int:
        return self.word_buckets

    @property
    def dom_pad(self) -> int:
        return self.dom_buckets


@dataclass(frozen=True)
class HtmlStreams:
    """Fixed-length index triple for one page.

    PAD ids (256 / word_buckets / dom_buckets) occur only as a contiguous
    suffix; everything before them is real content in document order.
    """

    char_ids: np.ndarray
    word_ids: np.ndarray
    dom_ids: np.ndarray

    def validate(self, cfg: PreprocConfig) -> None:
        """Raise if any length, range or PAD-suffix invariant is violated."""
        specs = [
            ("char", self.char_ids, cfg.char_len, CHAR_PAD),
            ("word", self.word_ids, cfg.word_len, cfg.word_pad),
            ("dom", self.dom_ids, cfg.dom_len, cfg.dom_pad),
        ]
        for name, ids, length, pad in specs:
            if len(ids) != length:
                raise ValueError(f"{name} stream has length {len(ids)}, expected {length}")
            if ids.min(initial=0) < 0 or ids.max(initial=0) > pad:
                raise ValueError(f"{name} stream has ids outside [0, {pad}]")
            is_pad = ids == pad
            if is_pad.any():
                first = int(np.argmax(is_pad))
                if not is_pad[first:].all():
                    raise ValueError(f"{name} stream PAD is not a contiguous suffix")


def fnv1a64(data: bytes) -> int:
    """Standard FNV-1a 64-bit hash (XOR byte, multiply by prime, wrap)."""
    h = FNV_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _U64_MASK
    return h


@lru_cache(maxsize=4096)
def _is_token_char(ch: str) -> bool:
    if ch == "_" or ch == _ZWJ or ch == _ZWNJ:
        return True
    cat = unicodedata.category(ch)
    return cat[0] in ("L", "N", "M")


def _strip_loose_joiners(text: str) -> str:
    """Remove ZWJ/ZWNJ unless flanked by token characters on both sides."""

    def repl(m: re.Match) -> str:
        i, j = m.start(), m.end()
        before = text[i - 1] if i > 0 else ""
        after = text[j] if j < len(text) else ""
        keep = (
            before and after
            and before not in (_ZWJ, _ZWNJ) and after not in (_ZWJ, _ZWNJ)
            and _is_token_char(before) and _is_token_char(after)
        )
        return m.group(0) if keep else ""

    return _JOINER_RE.sub(repl, text)


def normalize_html(raw: str) -> str:
    """Minimal text normalization; tags and attributes are left untouched.

    Zero-width characters and C0/C1 controls are removed, then line breaks,
    tabs and space runs collapse to single spaces. The removals run first so
    the composition is idempotent.
    """
    text = raw.replace("​", "").replace("﻿", "")
    text = _CONTROL_RE.sub("", text)
    text = _strip_loose_joiners(text)
    return _WS_RE.sub(" ", text)


def char_stream(html: str, cfg: PreprocConfig) -> np.ndarray:
    """UTF-8 byte values 0..255, truncated or PAD(256)-padded to char_len."""
    data = html.encode("utf-8")[: cfg.char_len]
    out = np.full(cfg.char_len, CHAR_PAD, dtype=np.int64)
    out[: len(data)] = np.frombuffer(data, dtype=np.uint8)
    return out


def _scan(html: str) -> Iterator[tuple[str, str]]:
    """Tolerant single-pass markup scanner.

    Yields ("text", segment) for character data and ("tag", name) for each
    opening or self-closing tag, in document order. Comments, declarations,
    closing tags and the contents of raw-text elements (script, style,
    template) are consumed silently. A '<' that does not start markup is
    treated as text.
    """
    n = len(html)
    lower = html.lower()
    i = 0
    text_start = 0
    while i < n:
        if html[i] != "<":
            i += 1
            continue
        nxt = html[i + 1] if i + 1 < n else ""
        if nxt.isascii() and nxt.isalpha():
            if text_start < i:
                yield ("text", html[text_start:i])
            m = _TAG_NAME_RE.match(html, i + 1)
            name = m.group(0).lower()
            j = m.end()
            # skip attributes; '>' inside quoted values does not close the tag
            quote = ""
            self_closing = False
            while j < n:
                ch = html[j]
                if quote:
                    if ch == quote:
                        quote = ""
                elif ch in ("'", '"'):
                    quote = ch
                elif ch == ">":
                    self_closing = html[j - 1] == "/"
                    j += 1
                    break
                j += 1
            else:
                # unterminated tag swallows the rest of the document
                yield ("tag", name)
                return
            yield ("tag", name)
            if name in _RAW_TEXT_TAGS and not self_closing:
                close = lower.find(f"</{name}", j)
                if close < 0:
                    return
                end = html.find(">", close)
                j = n if end < 0 else end + 1
            i = j
            text_start = i
        elif nxt == "/":
            if text_start < i:
                yield ("text", html[text_start:i])
            end = html.find(">", i)
            i = n if end < 0 else end + 1
            text_start = i
        elif nxt == "!" or nxt == "?":
            if text_start < i:
                yield ("text", html[text_start:i])
            if html.startswith("<!--", i):
                end = html.find("-->", i + 4)
                i = n if end < 0 else end + 3
            else:
                end = html.find(">", i)
                i = n if end < 0 else end + 1
            text_start = i
        else:
            i += 1  # literal '<' in text
    if text_start < n:
        yield ("text", html[text_start:n])


def extract_visible_text(html: str) -> str:
    """Visible character data in document order; tags act as separators."""
    parts = [seg for kind, seg in _scan(html) if kind == "text"]
    return " ".join(parts)


def tokenize_words(text: str) -> list[str]:
    """Maximal runs of letters, digits, marks, underscore, ZWJ and ZWNJ,
    lowercased; everything else separates."""
    tokens: list[str] = []
    start = -1
    for i, ch in enumerate(text):
        if _is_token_char(ch):
            if start < 0:
                start = i
        elif start >= 0:
            tokens.append(text[start:i].lower())
            start = -1
    if start >= 0:
        tokens.append(text[start:].lower())
    return tokens


def _bucket(token: str, buckets: int) -> int:
    return fnv1a64(token.encode("utf-8")) % buckets


def word_stream(tokens: list[str], cfg: PreprocConfig) -> np.ndarray:
    """Token bucket ids, truncated or PAD-padded to word_len."""
    out = np.full(cfg.word_len, cfg.word_pad, dtype=np.int64)
    for i, tok in enumerate(tokens[: cfg.word_len]):
        out[i] = _bucket(tok, cfg.word_buckets)
    return out


def dom_stream(html: str, cfg: PreprocConfig) -> np.ndarray:
    """Opening/self-closing tag-name bucket ids in document order."""
    out = np.full(cfg.dom_len, cfg.dom_pad, dtype=np.int64)
    count = 0
    for kind, name in _scan(html):
        if kind != "tag":
            continue
        out[count] = _bucket(name, cfg.dom_buckets)
        count += 1
        if count == cfg.dom_len:
            break
    return out


def preprocess(html: str, cfg: PreprocConfig | None = None) -> HtmlStreams:
    """Normalize, then derive all three streams in one pass over the markup."""
    cfg = cfg or PreprocConfig()
    norm = normalize_html(html)

    chars = char_stream(norm, cfg)
    words = np.full(cfg.word_len, cfg.word_pad, dtype=np.int64)
    doms = np.full(cfg.dom_len, cfg.dom_pad, dtype=np.int64)
    n_words = 0
    n_doms = 0
    for kind, value in _scan(norm):
        if kind == "tag":
            if n_doms < cfg.dom_len:
                doms[n_doms] = _bucket(value, cfg.dom_buckets)
                n_doms += 1
        elif n_words < cfg.word_len:
            for tok in tokenize_words(value):
                words[n_words] = _bucket(tok, cfg.word_buckets)
                n_words += 1
                if n_words == cfg.word_len:
                    break
    return HtmlStreams(char_ids=chars, word_ids=words, dom_ids=doms)


# ---------------------------------------------------------------------------
# binary record stream (CLI `preprocess` output)
# ---------------------------------------------------------------------------

def record_size(cfg: PreprocConfig) -> int:
    return 1 + 2 * cfg.char_len + 4 * cfg.word_len + 2 * cfg.dom_len


def write_records(fh: BinaryIO, items: list[tuple[int, HtmlStreams]], cfg: PreprocConfig) -> None:
    """Per record, little-endian: label u8, char u16[], word u32[], dom u16[]."""
    for label, streams in items:
        streams.validate(cfg)
        fh.write(struct.pack("<B", label))
        fh.write(streams.char_ids.astype("<u2").tobytes())
        fh.write(streams.word_ids.astype("<u4").tobytes())
        fh.write(streams.dom_ids.astype("<u2").tobytes())


def read_records(fh: BinaryIO, cfg: PreprocConfig) -> list[tuple[int, HtmlStreams]]:
    size = record_size(cfg)
    out: list[tuple[int, HtmlStreams]] = []
    while True:
        blob = fh.read(size)
        if not blob:
            return out
        if len(blob) != size:
            raise ValueError(f"truncated record: got {len(blob)} of {size} bytes")
        label = blob[0]
        off = 1
        chars = np.frombuffer(blob, dtype="<u2", count=cfg.char_len, offset=off).astype(np.int64)
        off += 2 * cfg.char_len
        words = np.frombuffer(blob, dtype="<u4", count=cfg.word_len, offset=off).astype(np.int64)
        off += 4 * cfg.word_len
        doms = np.frombuffer(blob, dtype="<u2", count=cfg.dom_len, offset=off).astype(np.int64)
        streams = HtmlStreams(char_ids=chars, word_ids=words, dom_ids=doms)
        streams.validate(cfg)
        out.append((label, streams))
