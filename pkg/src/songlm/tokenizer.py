"""Byte-level tokenizer with reserved ids for tag brackets and section markers.

Ids 0..255 are raw UTF-8 bytes. Specials follow at 256.. and are matched
case-insensitively in the input text, so ``[VERSE]`` and ``[Verse]`` both map
to the single verse token; decoding emits the canonical spelling.
"""

from __future__ import annotations

import re

TAG_OPEN = "<tag>"
TAG_CLOSE = "</tag>"
MARKER_NAMES = ("Intro", "Verse", "Prechorus", "Chorus", "Bridge", "Outro")

SPECIALS: tuple[str, ...] = (TAG_OPEN, TAG_CLOSE) + tuple(f"[{n}]" for n in MARKER_NAMES)
SPECIAL_IDS: dict[str, int] = {s: 256 + i for i, s in enumerate(SPECIALS)}
VOCAB_SIZE = 256 + len(SPECIALS)

TAG_OPEN_ID = SPECIAL_IDS[TAG_OPEN]
TAG_CLOSE_ID = SPECIAL_IDS[TAG_CLOSE]

_SPECIAL_RE = re.compile("|".join(re.escape(s) for s in SPECIALS), re.IGNORECASE)
_LOOKUP = {s.lower(): i for s, i in SPECIAL_IDS.items()}


def encode(text: str) -> list[int]:
    ids: list[int] = []
    pos = 0
    for m in _SPECIAL_RE.finditer(text):
        ids.extend(text[pos:m.start()].encode("utf-8"))
        ids.append(_LOOKUP[m.group(0).lower()])
        pos = m.end()
    ids.extend(text[pos:].encode("utf-8"))
    return ids


def decode(ids) -> str:
    out: list[str] = []
    buf = bytearray()
    for i in ids:
        i = int(i)
        if i < 256:
            buf.append(i)
            continue
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
            buf.clear()
        out.append(SPECIALS[i - 256])
    if buf:
        out.append(buf.decode("utf-8", errors="replace"))
    return "".join(out)
