import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from songlm import tokenizer
from songlm.errors import MalformedMarker
from songlm.lyrics import (CATEGORIES, DEFAULT_TAG_PROBS, CondSegment, CondSequence, LyricsDoc, Role, SectionKind,
                           SectionMarker, StyleAnnotation, TagProbTable, TagSet, build_condition, parse_finegrained,
                           parse_lyrics, read_cond, sample_tags, serialize_lyrics, strip_annotations, write_cond)

from conftest import read_example

WORDS = ["la", "night", "fire", "moon", "run", "away", "love", "we", "sky", "hold"]
NAMES = ["Intro", "Verse", "Prechorus", "Chorus", "Bridge", "Outro", "Interlude", "Hook", "Break"]


def random_doc(rng: np.random.Generator, finegrained: bool) -> str:
    """Grammar: [preamble lines] (marker [annotation] lines)*, with blank lines inside and between."""
    parts = []
    if rng.random() < 0.3:
        parts.append(" ".join(rng.choice(WORDS, 3)))
        parts.append("")
    for _ in range(rng.integers(0, 6)):
        name = str(rng.choice(NAMES))
        if rng.random() < 0.3:
            name = name.upper() if rng.random() < 0.5 else name.lower()
        parts.append(f"[{name}]")
        if finegrained and rng.random() < 0.6:
            parts.append("[" + ", ".join(" ".join(rng.choice(WORDS, 2)) for _ in range(rng.integers(1, 5))) + "]")
        n = int(rng.integers(1, 5))
        for i in range(n):
            parts.append(" ".join(rng.choice(WORDS, int(rng.integers(1, 6)))))
            if i < n - 1 and rng.random() < 0.2:
                parts.append("")
        parts.append("")
    return "\n".join(parts)


def canonical(text: str, finegrained: bool) -> str:
    parse = parse_finegrained if finegrained else parse_lyrics
    return serialize_lyrics(parse(text))


# -- markers ---------------------------------------------------------------------

@pytest.mark.parametrize("text,kind", [("[verse]", SectionKind.VERSE), ("[CHORUS]", SectionKind.CHORUS),
                                       ("[PreChorus]", SectionKind.PRECHORUS)])
def test_marker_case_insensitive(text, kind):
    m = SectionMarker.from_text(text)
    assert m.kind is kind
    assert SectionMarker.from_text(m.to_text()) == m


def test_unknown_marker_keeps_name_verbatim():
    m = SectionMarker.from_text("[Guitar Solo]")
    assert m.kind is SectionKind.OTHER and m.name == "Guitar Solo"
    assert m.to_text() == "[Guitar Solo]"


def test_annotation_phrases_trimmed():
    a = StyleAnnotation.from_text(" soft ,  warm ")
    assert a.phrases == ("soft", "warm")
    with pytest.raises(ValueError):
        StyleAnnotation((" x",))


# -- parser ----------------------------------------------------------------------

def test_structure_box_sections():
    doc = parse_lyrics(read_example("structure_example.txt"))
    kinds = [s.marker.kind for s in doc.sections]
    assert kinds == [SectionKind.CHORUS, SectionKind.VERSE, SectionKind.PRECHORUS, SectionKind.CHORUS,
                     SectionKind.BRIDGE, SectionKind.OUTRO]
    assert len(doc.sections[-1].lines) == 2


def test_finegrained_box_annotations():
    doc = parse_finegrained(read_example("finegrained_example.txt"))
    intro = doc.sections[0]
    assert intro.marker.kind is SectionKind.INTRO
    assert len(intro.annotation.phrases) == 4
    assert intro.annotation.phrases[0] == "Subtle electronic pulse"
    assert len(doc.sections) == 6
    assert all(s.annotation is not None for s in doc.sections)


def test_empty_input():
    assert parse_lyrics("") == LyricsDoc(())
    assert serialize_lyrics(LyricsDoc(())) == ""


def test_preamble_and_blank_lines():
    doc = parse_lyrics("intro words\n\n[Verse]\na\n\nb\n\n\n[Chorus]\nc\n")
    assert doc.sections[0].marker.implicit and doc.sections[0].marker.name == "preamble"
    assert doc.sections[0].lines == ("intro words",)
    assert doc.sections[1].lines == ("a", "", "b")
    assert doc.sections[2].lines == ("c",)


def test_malformed_marker():
    with pytest.raises(MalformedMarker):
        parse_lyrics("[Verse\nline\n")


def test_plain_lyrics_have_no_annotations():
    doc = parse_finegrained(read_example("structure_example.txt"))
    assert all(s.annotation is None for s in doc.sections)


def test_second_bracketed_line_is_lyric_text():
    doc = parse_finegrained("[Verse]\n[a, b]\n[c, d]\nline\n")
    assert doc.sections[0].annotation.phrases == ("a", "b")
    assert doc.sections[0].lines == ("[c, d]", "line")


def test_annotation_line_without_finegrained_is_marker():
    # in the plain format a bracketed line is always a marker
    doc = parse_lyrics("[Verse]\n[a, b]\nline\n")
    assert [s.marker.name for s in doc.sections] == [None, "a, b"]


@pytest.mark.parametrize("finegrained", [False, True])
def test_roundtrip_corpus(finegrained):
    rng = np.random.default_rng(11 + finegrained)
    parse = parse_finegrained if finegrained else parse_lyrics
    for _ in range(50):
        t = random_doc(rng, finegrained)
        doc = parse(t)
        assert serialize_lyrics(doc) == canonical(t, finegrained)
        assert parse(serialize_lyrics(doc)) == doc
        for sec in doc.sections:
            for line in sec.lines:
                s = line.strip()
                assert not (s.startswith("[") and s.endswith("]") and "," not in s)


def test_strip_annotations_oracle():
    for seed in range(30):
        t = random_doc(np.random.default_rng(seed), True)
        a = parse_finegrained(t)
        b = parse_finegrained(strip_annotations(t))
        assert a.markers == b.markers
        assert all(s.annotation is None for s in b.sections)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_parse_serialize_fixed_point(seed):
    t = random_doc(np.random.default_rng(seed), True)
    doc = parse_finegrained(t)
    assert parse_finegrained(serialize_lyrics(doc)) == doc


# -- tags -------------------------------------------------------------------------

def test_default_tag_table():
    assert TagProbTable().probs == {"genre": 0.95, "singer_timbre": 0.5, "gender": 0.375, "mood": 0.325,
                                    "instrument": 0.25, "scene": 0.2, "region": 0.125, "topic": 0.1}
    assert set(DEFAULT_TAG_PROBS) == set(CATEGORIES)


def full_tags():
    return TagSet({c: (f"{c}_a", f"{c}_b") for c in CATEGORIES})


def test_sample_tags_forced():
    tags = full_tags()
    rng = np.random.default_rng(0)
    assert sample_tags(tags, TagProbTable({c: 1.0 for c in CATEGORIES}), rng) == tags
    out = sample_tags(tags, TagProbTable({c: 0.0 for c in CATEGORIES}), rng)
    assert out.is_empty() and set(out.entries) == set(CATEGORIES)


def test_sample_tags_deterministic_and_all_or_nothing():
    tags = full_tags()
    a = [sample_tags(tags, TagProbTable(), np.random.default_rng(5)) for _ in range(2)]
    assert a[0] == a[1]
    for _ in range(50):
        out = sample_tags(tags, TagProbTable(), np.random.default_rng(_))
        for c, v in out.entries.items():
            assert v in ((), tags.entries[c])


def test_genre_keep_rate():
    rng = np.random.default_rng(123)
    tags = TagSet({"genre": ("pop",)})
    kept = sum(bool(sample_tags(tags, TagProbTable(), rng).entries["genre"]) for _ in range(100_000))
    assert abs(kept / 100_000 - 0.95) < 0.01


def test_tagset_parse():
    t = TagSet.parse("genre=pop; mood=soft,warm")
    assert t.entries == {"genre": ("pop",), "mood": ("soft", "warm")}
    with pytest.raises(ValueError):
        TagSet({"colour": ("red",)})


# -- condition --------------------------------------------------------------------

def test_build_condition_order_and_wrapping():
    doc = parse_lyrics("[Verse]\nhello\n")
    c = build_condition(TagSet({"genre": ("pop",)}), np.ones(4), doc, 0.0, np.random.default_rng(0))
    assert c.roles == [Role.TAG, Role.REF_EMBED, Role.LYRICS]
    tag = c.get(Role.TAG).payload
    assert tag[0] == tokenizer.TAG_OPEN_ID and tag[-1] == tokenizer.TAG_CLOSE_ID
    assert tokenizer.decode(tag[1:-1]) == "pop"
    assert tokenizer.SPECIAL_IDS["[Verse]"] in c.get(Role.LYRICS).payload


def test_build_condition_drop_ref():
    doc = parse_lyrics("[Verse]\nhello\n")
    c = build_condition(TagSet(), np.ones(4), doc, 1.0, np.random.default_rng(0))
    assert c.roles == [Role.TAG, Role.LYRICS]
    assert c.get(Role.TAG).payload == (tokenizer.TAG_OPEN_ID, tokenizer.TAG_CLOSE_ID)
    c = build_condition(TagSet(), None, doc, 0.0, np.random.default_rng(0))
    assert Role.REF_EMBED not in c.roles


def test_ref_presence_rate():
    doc = parse_lyrics("[Verse]\nhello\n")
    rng = np.random.default_rng(3)
    n = sum(Role.REF_EMBED in build_condition(TagSet(), np.ones(2), doc, 0.5, rng).roles for _ in range(10_000))
    assert abs(n / 10_000 - 0.5) < 0.02


def test_condition_structure_invariant_under_tag_permutation():
    doc = parse_lyrics("[Verse]\nhello\n")
    a = build_condition(TagSet({"mood": ("soft", "warm")}), None, doc, 0.0, np.random.default_rng(0))
    b = build_condition(TagSet({"mood": ("warm", "soft")}), None, doc, 0.0, np.random.default_rng(0))
    assert a.roles == b.roles and a.get(Role.TAG) != b.get(Role.TAG)


def test_cond_file_roundtrip(tmp_path):
    doc = parse_lyrics("[Verse]\nhello\n")
    c = build_condition(TagSet({"genre": ("pop",)}), np.arange(3.0), doc, 0.0, np.random.default_rng(0))
    write_cond(c, tmp_path / "c.cseq")
    assert read_cond(tmp_path / "c.cseq") == c
    assert (tmp_path / "c.cseq").read_bytes()[:4] == b"CSEQ"


def test_cond_segment_order_enforced():
    lyr = CondSegment(Role.LYRICS, (1, 2))
    tag = CondSegment(Role.TAG, (tokenizer.TAG_OPEN_ID, tokenizer.TAG_CLOSE_ID))
    assert CondSequence((tag, lyr)).roles == [Role.TAG, Role.LYRICS]
    with pytest.raises(ValueError):
        CondSequence((lyr, tag))
    with pytest.raises(ValueError):
        CondSequence((CondSegment(Role.TAG, (1, 2)),))


def test_tokenizer_roundtrip():
    s = "<tag>pop</tag>[verse]héllo"
    ids = tokenizer.encode(s)
    assert tokenizer.decode(ids) == "<tag>pop</tag>[Verse]héllo"
    assert max(ids) < tokenizer.VOCAB_SIZE
