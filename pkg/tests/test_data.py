import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from diffcap.data import (
    ALL_TYPES,
    ChangeType,
    GenerationError,
    ManifestError,
    QUESTION_TEMPLATES,
    Vocabulary,
    build_corpus,
    generate_pair,
    ingest_manifest,
    spec_changes,
    split_sizes,
    split_words,
    to_qa,
)
from diffcap.data import generate as gen_mod
from diffcap.data.scene import GLOBAL_CHANGES, SceneObject, SceneSpec, render, sample_scene
from diffcap.data.generate import ChangePair


def png_bytes(arr):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def test_change_type_names():
    assert [str(t) for t in ChangeType] == [
        "viewpoint", "illumination", "addition", "disappearance", "removal", "substitution",
        "size", "color", "orientation", "pose", "ocr", "counting",
    ]


class TestTokenizer:
    def test_split(self):
        assert split_words("A red square.") == ["a", "red", "square", "."]

    def test_unknown_words(self):
        v = Vocabulary(["a", "red"])
        ids = v.encode("a blue thing")
        assert ids[0] == v.stoi["a"] and ids[1] == 1 and ids[2] == 1

    def test_round_trip_training_captions(self):
        caps = [c for s in range(1000) for c in generate_pair(s).captions]
        vocab = Vocabulary.build(caps)
        for c in caps:
            assert vocab.decode(vocab.encode(c)) == c

    def test_list_round_trip(self):
        v = Vocabulary.build(["the red square, appeared."])
        assert Vocabulary.from_list(v.to_list()).stoi == v.stoi
        with pytest.raises(ValueError):
            Vocabulary.from_list(["a", "b"])


class TestGeneratePair:
    @pytest.mark.parametrize("seed", range(20))
    def test_addition(self, seed):
        p = generate_pair(seed, {ChangeType.ADDITION})
        assert p.change_types == (ChangeType.ADDITION,)
        assert len(p.scene_b.objects) == len(p.scene_a.objects) + 1
        words = split_words(p.captions[0])
        assert "appeared" in words
        assert any(w in words for w in ("left", "right", "top", "bottom", "center"))

    @pytest.mark.parametrize("seed", range(10))
    def test_distractors_never_labelled(self, seed):
        p = generate_pair(seed, {ChangeType.COLOR}, distractors=True)
        assert p.change_types == (ChangeType.COLOR,)
        assert p.scene_a.brightness != p.scene_b.brightness
        assert p.scene_a.offset != p.scene_b.offset
        # global: the background corner changes; local: one object changed colour
        assert not np.array_equal(p.image_a[0, 0], p.image_b[0, 0]) or \
            not np.array_equal(p.image_a[-1, -1], p.image_b[-1, -1])
        ca, cb = p.scene_a.by_cell(), p.scene_b.by_cell()
        assert sum(ca[c].color != cb[c].color for c in ca) == 1

    def test_determinism_harness(self):
        for seed in range(1000):
            a = generate_pair(seed, distractors=bool(seed % 2))
            b = generate_pair(seed, distractors=bool(seed % 2))
            assert png_bytes(a.image_a) == png_bytes(b.image_a)
            assert png_bytes(a.image_b) == png_bytes(b.image_b)
            assert a.captions == b.captions and a.change_types == b.change_types

    @settings(max_examples=300, deadline=None)
    @given(
        st.integers(0, 2**31 - 1),
        st.sets(st.sampled_from(list(ChangeType)), min_size=1),
        st.booleans(),
    )
    def test_label_soundness(self, seed, menu, distractors):
        if menu <= GLOBAL_CHANGES:
            with pytest.raises(ValueError):
                generate_pair(seed, menu)
            return
        p = generate_pair(seed, menu, distractors=distractors)
        assert set(p.change_types) == spec_changes(p.scene_a, p.scene_b)
        assert set(p.change_types) <= menu
        assert 1 <= len(p.change_types) <= 3
        assert any(t not in GLOBAL_CHANGES for t in p.change_types)
        assert 2 <= len(p.scene_b.objects) <= 8
        assert all(c.strip() for c in p.captions)

    def test_every_type_realisable(self):
        for t in ALL_TYPES:
            menu = {t, ChangeType.SIZE} if t in GLOBAL_CHANGES else {t}
            for seed in range(5):
                p = generate_pair(seed, menu, must_include=t)
                assert t in p.change_types

    def test_two_part_captions(self):
        p = generate_pair(7, n_captions=3)
        assert len(p.captions) == 3
        for cap in p.captions:
            for sentence in cap.split(". "):
                assert ", " in sentence

    def test_generation_failure(self, monkeypatch):
        two = SceneSpec((SceneObject("square", "red", "small", "up", (0, 0)),
                         SceneObject("circle", "blue", "small", "up", (1, 1))))
        monkeypatch.setattr(gen_mod, "sample_scene", lambda rng, lo, hi: two)
        with pytest.raises(GenerationError):
            generate_pair(0, {ChangeType.DISAPPEARANCE}, max_attempts=5)


class TestScene:
    def test_cells_unique(self):
        o = SceneObject("square", "red", "small", "up", (0, 0))
        with pytest.raises(ValueError):
            SceneSpec((o, o))

    def test_render_shape(self):
        img = render(sample_scene(np.random.default_rng(0)))
        assert img.shape == (64, 64, 3) and img.dtype == np.uint8


class TestCorpus:
    def test_split_arithmetic(self):
        assert split_sizes(100) == (80, 10, 10)
        sizes = split_sizes(15598)
        assert sum(sizes) == 15598
        for s, r in zip(sizes, (0.8, 0.1, 0.1)):
            assert abs(s - 15598 * r) <= 1

    def test_build_and_validate(self, tmp_path):
        build_corpus(tmp_path, 240, seed=3, distractors=True)
        res = ingest_manifest(tmp_path, check_images=True)
        assert res.errors == []
        assert res.stats.pairs == 240
        assert res.stats.splits == {"train": 192, "val": 24, "test": 24}
        for split in ("train", "val", "test"):
            covered = {t for r in res.records if r.split == split for t in r.change_types}
            assert covered == set(ALL_TYPES)
        used = {}
        for r in res.records:
            for img in (r.image_a, r.image_b):
                assert used.setdefault(img, r.split) == r.split

    def test_deterministic_on_disk(self, tmp_path):
        build_corpus(tmp_path / "a", 20, seed=9)
        build_corpus(tmp_path / "b", 20, seed=9)
        assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
        for f in (tmp_path / "a/images").iterdir():
            assert f.read_bytes() == (tmp_path / "b/images" / f.name).read_bytes()

    def test_too_small(self, tmp_path):
        with pytest.raises(ValueError):
            build_corpus(tmp_path, 5)

    def test_unk_rate_on_validation(self, tmp_path):
        build_corpus(tmp_path, 200, seed=4)
        res = ingest_manifest(tmp_path)
        vocab = Vocabulary.build(c for r in res.records if r.split == "train" for c in r.captions)
        rate = vocab.unk_rate(c for r in res.records if r.split == "val" for c in r.captions)
        assert rate < 0.05


def _write(tmp_path, lines):
    p = tmp_path / "manifest.jsonl"
    p.write_text("\n".join(lines) + "\n")
    return p


def _rec(**kw):
    base = {"id": "x", "image_a": "a.png", "image_b": "b.png", "captions": ["a red square appeared."],
            "change_types": ["addition"], "split": "train", "source": "external"}
    base.update(kw)
    return json.dumps(base)


class TestIngest:
    def test_single_record(self, tmp_path):
        res = ingest_manifest(_write(tmp_path, [_rec()]))
        s = res.stats
        assert (s.pairs, s.captions) == (1, 1)
        assert s.avg_words_per_caption == 4.0
        assert s.sentences_per_caption == 1.0
        assert s.vocabulary_size == 4

    def test_errors_line_numbered(self, tmp_path):
        lines = [
            _rec(id="ok"),
            "{not json",
            json.dumps({"id": "m"}),
            _rec(id="u", change_types=["teleport"]),
            _rec(id="e", captions=[""]),
            _rec(id="g", change_types=["viewpoint"]),
            _rec(id="s", split="dev"),
        ]
        with pytest.raises(ManifestError) as ei:
            ingest_manifest(_write(tmp_path, lines))
        text = str(ei.value)
        assert "line 2: malformed JSON" in text
        assert "line 3: missing field 'image_a'" in text
        assert "line 4: unknown change type 'teleport'" in text
        assert "line 5: empty caption" in text
        assert "line 6:" in text and "line 7:" in text
        assert "line 1" not in text
        res = ingest_manifest(_write(tmp_path, lines), strict=False)
        assert [r.id for r in res.records] == ["ok"]

    def test_split_disjointness_enforced(self, tmp_path):
        lines = [_rec(id="p1"), _rec(id="p2", split="test")]
        with pytest.raises(ManifestError, match="already used by split"):
            ingest_manifest(_write(tmp_path, lines))

    def test_missing_images_checked(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            ingest_manifest(_write(tmp_path, [_rec()]), check_images=True)

    def test_counting_oracle(self, tmp_path):
        build_corpus(tmp_path, 100, seed=5, distractors=True, n_captions=2)
        stats = ingest_manifest(tmp_path).stats
        n_caps = n_words = n_sent = 0
        vocab = set()
        with open(tmp_path / "manifest.jsonl") as fh:
            for line in fh:
                for cap in json.loads(line)["captions"]:
                    n_caps += 1
                    n_words += len(cap.split())
                    in_sentence = False
                    for ch in cap:
                        if ch in ".!?":
                            if in_sentence:
                                n_sent += 1
                            in_sentence = False
                        elif not ch.isspace():
                            in_sentence = True
                    n_sent += in_sentence
                    word = ""
                    for ch in cap.lower() + " ":
                        if ch.isalnum():
                            word += ch
                        else:
                            if word:
                                vocab.add(word)
                            word = ""
        assert stats.pairs == 100 and stats.captions == n_caps == 200
        assert stats.avg_words_per_caption == pytest.approx(n_words / n_caps, abs=1e-12)
        assert stats.total_sentences == n_sent
        assert stats.vocabulary_size == len(vocab)


class TestQa:
    def test_one_sample_per_caption(self):
        p = ChangePair("p", "a.png", "b.png", (ChangeType.COLOR,), ["first caption.", "second caption."])
        qa = to_qa(p)
        assert len(qa) == 2
        assert [q.answer for q in qa] == p.captions
        assert qa[0].question == QUESTION_TEMPLATES[0]

    def test_unknown_template(self):
        p = ChangePair("p", "a.png", "b.png", (ChangeType.COLOR,), ["c."])
        with pytest.raises(ValueError):
            to_qa(p, template_id=len(QUESTION_TEMPLATES))

    def test_answers_round_trip(self):
        pairs = [generate_pair(s) for s in range(50)]
        vocab = Vocabulary.build(c for p in pairs for c in p.captions)
        for p in pairs:
            for q in to_qa(p, 1):
                assert vocab.decode(vocab.encode(q.answer)) == q.answer

    def test_qa_count_matches_captions(self, tmp_path):
        build_corpus(tmp_path, 100, seed=6, n_captions=2)
        res = ingest_manifest(tmp_path)
        assert sum(len(to_qa(r)) for r in res.records) == res.stats.captions
