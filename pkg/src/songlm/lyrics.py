"""Structured lyrics, style annotations, tag sampling and condition assembly.

Lyrics files are plain UTF-8 text where a line holding only ``[Name]`` opens
a section. In the fine-grained format the line right after a marker may be a
bracketed comma list (``[soft pulse, slow build]``), which becomes that
section's style annotation.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tokenizer
from .binfmt import open_maybe, read_exact, read_header, unpack, write_header
from .errors import BadCheckpoint, MalformedMarker


class SectionKind(str, enum.Enum):
    INTRO = "intro"
    VERSE = "verse"
    PRECHORUS = "prechorus"
    CHORUS = "chorus"
    BRIDGE = "bridge"
    OUTRO = "outro"
    OTHER = "other"


_KNOWN = {k.value: k for k in SectionKind if k is not SectionKind.OTHER}
PREAMBLE = "preamble"


@dataclass(frozen=True)
class SectionMarker:
    kind: SectionKind
    name: str | None = None
    # True only for the synthetic section holding lines before the first marker.
    implicit: bool = False

    def __post_init__(self):
        if (self.kind is SectionKind.OTHER) != (self.name is not None):
            raise ValueError("name is required for OTHER markers and forbidden otherwise")

    @classmethod
    def from_text(cls, text: str) -> "SectionMarker":
        """Parse ``[Name]`` or a bare ``Name``; known kinds match case-insensitively."""
        inner = text.strip()
        if inner.startswith("[") and inner.endswith("]"):
            inner = inner[1:-1]
        kind = _KNOWN.get(inner.strip().lower())
        if kind is not None:
            return cls(kind)
        if not inner.strip():
            raise MalformedMarker("empty section marker")
        return cls(SectionKind.OTHER, name=inner)

    @classmethod
    def preamble(cls) -> "SectionMarker":
        return cls(SectionKind.OTHER, name=PREAMBLE, implicit=True)

    def to_text(self) -> str:
        if self.kind is SectionKind.OTHER:
            return f"[{self.name}]"
        return f"[{self.kind.value.capitalize()}]"


@dataclass(frozen=True)
class StyleAnnotation:
    phrases: tuple[str, ...]

    def __post_init__(self):
        if not self.phrases:
            raise ValueError("annotation needs at least one phrase")
        for p in self.phrases:
            if not p or p != p.strip():
                raise ValueError(f"phrase must be non-empty and trimmed: {p!r}")

    @classmethod
    def from_text(cls, inner: str) -> "StyleAnnotation":
        phrases = tuple(p.strip() for p in inner.split(",") if p.strip())
        if not phrases:
            raise MalformedMarker(f"annotation without phrases: [{inner}]")
        return cls(phrases)

    def to_text(self) -> str:
        return "[" + ", ".join(self.phrases) + "]"


@dataclass(frozen=True)
class Section:
    marker: SectionMarker
    annotation: StyleAnnotation | None = None
    lines: tuple[str, ...] = ()


@dataclass(frozen=True)
class LyricsDoc:
    sections: tuple[Section, ...] = ()

    @property
    def markers(self) -> list[SectionMarker]:
        return [s.marker for s in self.sections]


def _parse(text: str, finegrained: bool) -> LyricsDoc:
    done: list[Section] = []
    marker: SectionMarker | None = None
    annotation: StyleAnnotation | None = None
    lines: list[str] = []
    after_marker = False

    def close():
        if marker is None:
            return
        while lines and lines[-1] == "":
            lines.pop()
        done.append(Section(marker, annotation, tuple(lines)))

    for raw in text.splitlines():
        s = raw.strip()
        if s.startswith("["):
            if "]" not in s:
                raise MalformedMarker(f"unterminated marker: {raw!r}")
            if not s.endswith("]"):
                raise MalformedMarker(f"text after marker: {raw!r}")
            inner = s[1:-1]
            if not (finegrained and "," in inner):
                close()
                marker, annotation, lines = SectionMarker.from_text(inner), None, []
                after_marker = True
                continue
            if after_marker:
                annotation = StyleAnnotation.from_text(inner)
                after_marker = False
                continue
            # a comma list anywhere else is lyric text
        after_marker = False
        if marker is None:
            if not s:
                continue
            marker = SectionMarker.preamble()
        lines.append(raw if s else "")
    close()
    return LyricsDoc(tuple(done))


def parse_lyrics(text: str) -> LyricsDoc:
    """Split lyrics into sections at ``[Name]`` lines.

    Lines before the first marker go to an implicit ``preamble`` section.
    Blank lines between sections are dropped; blank lines inside a section
    are kept as empty strings.
    """
    return _parse(text, finegrained=False)


def parse_finegrained(text: str) -> LyricsDoc:
    """Like :func:`parse_lyrics`, binding a comma-list line right after a
    marker as that section's :class:`StyleAnnotation`."""
    return _parse(text, finegrained=True)


def serialize_lyrics(doc: LyricsDoc) -> str:
    blocks = []
    for sec in doc.sections:
        out = [] if sec.marker.implicit else [sec.marker.to_text()]
        if sec.annotation is not None:
            out.append(sec.annotation.to_text())
        out.extend(sec.lines)
        blocks.append("\n".join(out))
    return "\n\n".join(blocks) + "\n" if blocks else ""


def strip_annotations(text: str) -> str:
    """Drop every bracketed comma-list line that directly follows a marker line."""
    kept = []
    prev_marker = False
    for raw in text.splitlines():
        s = raw.strip()
        bracketed = s.startswith("[") and s.endswith("]")
        if bracketed and "," in s and prev_marker:
            prev_marker = False
            continue
        prev_marker = bracketed and "," not in s
        kept.append(raw)
    return "\n".join(kept) + ("\n" if kept else "")


# -- tags -------------------------------------------------------------------

CATEGORIES = ("gender", "genre", "instrument", "mood", "scene", "singer_timbre", "topic", "region")

DEFAULT_TAG_PROBS: dict[str, float] = {
    "genre": 0.95,
    "singer_timbre": 0.5,
    "gender": 0.375,
    "mood": 0.325,
    "instrument": 0.25,
    "scene": 0.2,
    "region": 0.125,
    "topic": 0.1,
}


@dataclass(frozen=True)
class TagSet:
    entries: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for cat, tags in self.entries.items():
            if cat not in CATEGORIES:
                raise ValueError(f"unknown tag category {cat!r}")
            clean[cat] = tuple(tags)
        # canonical category order keeps downstream text stable
        object.__setattr__(self, "entries", {c: clean[c] for c in CATEGORIES if c in clean})

    def all_tags(self) -> list[str]:
        return [t for tags in self.entries.values() for t in tags]

    def is_empty(self) -> bool:
        return not self.all_tags()

    @classmethod
    def parse(cls, spec: str) -> "TagSet":
        """Parse ``"genre=pop;mood=soft,warm"``."""
        entries = {}
        for part in filter(None, (p.strip() for p in spec.split(";"))):
            cat, _, tags = part.partition("=")
            entries[cat.strip()] = tuple(t.strip() for t in tags.split(",") if t.strip())
        return cls(entries)


@dataclass(frozen=True)
class TagProbTable:
    probs: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_TAG_PROBS))

    def __post_init__(self):
        for cat, p in self.probs.items():
            if cat not in CATEGORIES:
                raise ValueError(f"unknown tag category {cat!r}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability for {cat} outside [0, 1]: {p}")


def sample_tags(tags: TagSet, table: TagProbTable, rng: np.random.Generator) -> TagSet:
    """Keep each category whole with its table probability, else empty it.

    One uniform draw per category present in ``tags`` (canonical order), so the
    result is a pure function of the generator state.
    """
    out = {}
    for cat, values in tags.entries.items():
        keep = rng.random() < table.probs.get(cat, 1.0)
        out[cat] = values if keep else ()
    return TagSet(out)


# -- condition sequence ------------------------------------------------------

class Role(enum.IntEnum):
    TAG = 0
    REF_EMBED = 1
    LYRICS = 2


@dataclass(frozen=True)
class CondSegment:
    role: Role
    payload: tuple[int, ...] | np.ndarray

    def __len__(self):
        # a reference embedding occupies one position in the LM prefix
        return 1 if self.role is Role.REF_EMBED else len(self.payload)

    def __eq__(self, other):
        if not isinstance(other, CondSegment):
            return NotImplemented
        return self.role == other.role and np.array_equal(np.asarray(self.payload), np.asarray(other.payload))

    __hash__ = None


@dataclass(frozen=True)
class CondSequence:
    segments: tuple[CondSegment, ...] = ()

    def __post_init__(self):
        roles = [s.role for s in self.segments]
        if roles != sorted(roles) or len(set(roles)) != len(roles):
            raise ValueError(f"segments must be ordered tag, ref_embed, lyrics: {roles}")
        tag = self.get(Role.TAG)
        if tag is not None:
            p = tag.payload
            if len(p) < 2 or p[0] != tokenizer.TAG_OPEN_ID or p[-1] != tokenizer.TAG_CLOSE_ID:
                raise ValueError("tag segment must be wrapped in <tag> ... </tag>")

    def get(self, role: Role) -> CondSegment | None:
        for s in self.segments:
            if s.role == role:
                return s
        return None

    @property
    def roles(self) -> list[Role]:
        return [s.role for s in self.segments]

    def __len__(self):
        return sum(len(s) for s in self.segments)

    @classmethod
    def empty(cls) -> "CondSequence":
        return cls(())


def build_condition(
    tags: TagSet,
    ref_embed: np.ndarray | None,
    lyrics: LyricsDoc,
    drop_ref_prob: float,
    rng: np.random.Generator,
) -> CondSequence:
    """Assemble ``[C_tag, C_ref, C_lyrics]``.

    The reference segment is dropped with ``drop_ref_prob``. A uniform draw is
    consumed on every call so the generator advances identically whether or
    not a reference is supplied.
    """
    if not 0.0 <= drop_ref_prob <= 1.0:
        raise ValueError("drop_ref_prob must lie in [0, 1]")
    tag_ids = [tokenizer.TAG_OPEN_ID, *tokenizer.encode(", ".join(tags.all_tags())), tokenizer.TAG_CLOSE_ID]
    segments = [CondSegment(Role.TAG, tuple(tag_ids))]
    u = rng.random()
    if ref_embed is not None and u >= drop_ref_prob:
        segments.append(CondSegment(Role.REF_EMBED, np.asarray(ref_embed, dtype=np.float64).copy()))
    segments.append(CondSegment(Role.LYRICS, tuple(tokenizer.encode(serialize_lyrics(lyrics)))))
    return CondSequence(tuple(segments))


_CSEQ = b"CSEQ"


def write_cond(cond: CondSequence, target) -> None:
    """Write ``CSEQ`` v1: count, then per segment role byte, byte length, payload.

    Token payloads are u32 LE ids; embeddings are f32 LE.
    """
    fh, own = open_maybe(target, "wb")
    try:
        write_header(fh, _CSEQ)
        fh.write(struct.pack("<I", len(cond.segments)))
        for seg in cond.segments:
            if seg.role is Role.REF_EMBED:
                data = np.asarray(seg.payload, dtype="<f4").tobytes()
            else:
                data = np.asarray(seg.payload, dtype="<u4").tobytes()
            fh.write(struct.pack("<BI", int(seg.role), len(data)))
            fh.write(data)
    finally:
        if own:
            fh.close()


def read_cond(source) -> CondSequence:
    fh, own = open_maybe(source, "rb")
    try:
        read_header(fh, _CSEQ)
        (count,) = unpack(fh, "<I")
        segments = []
        for _ in range(count):
            role_raw, n = unpack(fh, "<BI")
            try:
                role = Role(role_raw)
            except ValueError as exc:
                raise BadCheckpoint(f"unknown segment role {role_raw}") from exc
            data = read_exact(fh, n)
            if role is Role.REF_EMBED:
                payload = np.frombuffer(data, dtype="<f4").astype(np.float64)
            else:
                payload = tuple(int(x) for x in np.frombuffer(data, dtype="<u4"))
            segments.append(CondSegment(role, payload))
        return CondSequence(tuple(segments))
    finally:
        if own:
            fh.close()


def cond_from_files(
    lyrics_text: str,
    tags: TagSet,
    ref_embed: np.ndarray | None = None,
    finegrained: bool = True,
) -> CondSequence:
    """Inference-time helper: all tags kept, reference used when given."""
    doc = parse_finegrained(lyrics_text) if finegrained else parse_lyrics(lyrics_text)
    return build_condition(tags, ref_embed, doc, 0.0, np.random.default_rng(0))


def tags_text(tags: TagSet) -> str:
    return ", ".join(tags.all_tags())
