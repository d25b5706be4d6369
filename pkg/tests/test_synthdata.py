import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slq.errors import GenerationError, InputError, IntegrityError
from slq.synthdata import (COLORS, DESCRIBE, DIMENSIONS, FACTS, KARR_MIX, PATCH_DIM, SHAPES, SIDES, Dimension,
                           PairedDataset, apportion, clue_tokens, decode, describe_batches, encode_words,
                           gen_explicit, gen_reasoning, literal_token, pretrain_corpus, resolve_caption, split)


def caption_oracle(objects):
    """Explicit caption text written from the object list alone."""
    return " and ".join(f"{cnt} {color} {shape}" for cnt, color, shape in objects)


class TestExplicit:
    def test_deterministic(self):
        a, b = gen_explicit(50, 7), gen_explicit(50, 7)
        assert a.to_dict() == b.to_dict()

    def test_single_pair(self):
        ds = gen_explicit(1, 0)
        assert len(ds) == 1 and ds.pairs[0].id == 0

    def test_caption_names_every_attribute(self):
        for p in gen_explicit(200, 3).pairs:
            assert p.caption.text == caption_oracle(p.image.objects())

    def test_features_render_cells(self):
        p = gen_explicit(1, 4).pairs[0]
        f = p.image.features()
        assert f.shape == (16, PATCH_DIM)
        assert int(f[:, 0].sum()) == len(p.image.objects())
        for row in f[f[:, 0] == 1]:
            assert row[1:].sum() == 3

    def test_object_bounds(self):
        for p in gen_explicit(100, 2, min_objects=2, max_objects=2).pairs:
            assert len(p.image.objects()) == 2

    def test_captions_are_distinct(self):
        caps = [p.caption.tokens for p in gen_explicit(300, 5).pairs]
        assert len(set(caps)) == 300

    def test_seeds_differ(self):
        a = {p.caption.tokens for p in gen_explicit(200, 0).pairs}
        b = {p.caption.tokens for p in gen_explicit(200, 1).pairs}
        assert len(a & b) / 200 < 0.1

    @pytest.mark.parametrize("kwargs", [dict(n=0), dict(n=3, min_objects=0), dict(n=3, min_objects=4, max_objects=2)])
    def test_invalid(self, kwargs):
        with pytest.raises(InputError):
            gen_explicit(seed=0, **kwargs)

    def test_vocabulary_round_trip(self):
        p = gen_explicit(1, 9).pairs[0]
        assert encode_words(p.caption.text) == list(p.caption.tokens)
        with pytest.raises(InputError):
            encode_words("zebra")


class TestReasoning:
    def test_literal_never_leaks(self):
        for p in gen_reasoning(300, 1).pairs:
            _, kind, value = p.caption.target
            assert literal_token(kind, value) not in p.caption.tokens

    def test_clue_resolves_to_target(self):
        for p in gen_reasoning(300, 2).pairs:
            idx, kind, value = p.caption.target
            assert resolve_caption(p.caption.tokens) == [(p.caption.dimension, kind, value)]
            cnt, color, shape = p.image.objects()[idx]
            assert value == {"count": cnt, "color": color, "shape": shape}[kind]

    def test_other_attributes_stay_literal(self):
        for p in gen_reasoning(100, 3).pairs:
            text = p.caption.text
            idx, kind, _ = p.caption.target
            for j, (cnt, color, shape) in enumerate(p.image.objects()):
                for k, v in (("count", cnt), ("color", color), ("shape", shape)):
                    if j != idx or k != kind:
                        assert str(v) in text.split()

    def test_mix_counts(self):
        n = 500
        ds = gen_reasoning(n, 4)
        got = {d: 0 for d in DIMENSIONS}
        for p in ds.pairs:
            got[p.caption.dimension] += 1
        for d, share in KARR_MIX.items():
            assert abs(got[d] - n * share) <= 1

    def test_single_dimension(self):
        ds = gen_reasoning(20, 0, {Dimension.LOGICAL_MATHEMATICAL: 1.0})
        assert {p.caption.dimension for p in ds.pairs} == {Dimension.LOGICAL_MATHEMATICAL}
        assert all("plus" in p.caption.text.split() for p in ds.pairs)

    def test_arithmetic_clue(self):
        toks = clue_tokens(Dimension.LOGICAL_MATHEMATICAL, "hexagon")
        words = decode(toks).split()
        assert int(words[0]) + int(words[2]) == SIDES["hexagon"] == 6

    def test_missing_fact_entry(self):
        facts = {**FACTS, Dimension.ENCYCLOPEDIC: {}}
        with pytest.raises(GenerationError):
            gen_reasoning(10, 0, {Dimension.ENCYCLOPEDIC: 1.0}, facts=facts)
        with pytest.raises(GenerationError):
            clue_tokens(Dimension.ENCYCLOPEDIC, "red", facts=facts)

    def test_bad_mix(self):
        with pytest.raises(InputError):
            gen_reasoning(10, 0, {Dimension.FUNCTIONAL: 0.5})

    def test_deterministic(self):
        assert gen_reasoning(40, 8).to_dict() == gen_reasoning(40, 8).to_dict()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400), st.dictionaries(st.sampled_from(DIMENSIONS), st.floats(0.01, 1), min_size=1))
def test_apportion_is_exact_and_close(n, weights):
    total = sum(weights.values())
    mix = {d: w / total for d, w in weights.items()}
    counts = apportion(n, mix)
    assert sum(counts.values()) == n
    assert all(abs(counts[d] - n * p) < 1 for d, p in mix.items())


class TestSplit:
    def test_fractions(self):
        ds = split(gen_explicit(100, 0), (0.8, 0.1, 0.1))
        sizes = {name: len(ds.subset(name)) for name in ds.split_names()}
        assert sizes == {"pretrain": 80, "adapt": 10, "eval": 10}

    def test_disjoint_and_complete(self):
        ds = split(gen_explicit(57, 1), {"adapt": 0.7, "eval": 0.3}, seed=3)
        a, e = set(ds.subset("adapt").ids), set(ds.subset("eval").ids)
        assert not a & e and a | e == set(ds.ids)

    @pytest.mark.parametrize("fractions", [(0.5, 0.4), (1.2, -0.2), (0.999, 0.001)])
    def test_invalid(self, fractions):
        with pytest.raises(InputError):
            split(gen_explicit(10, 0), fractions)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = split(gen_reasoning(30, 5), (0.5, 0.5))
        path = tmp_path / "ds.json"
        ds.save(path)
        back = PairedDataset.load(path)
        assert back.to_dict() == ds.to_dict()
        assert back.pairs[0].image.features().tobytes() == ds.pairs[0].image.features().tobytes()

    def test_version_rejected(self, tmp_path):
        blob = gen_explicit(2, 0).to_dict()
        blob["version"] = 99
        path = tmp_path / "ds.json"
        path.write_text(json.dumps(blob))
        with pytest.raises(IntegrityError):
            PairedDataset.load(path)

    def test_malformed(self, tmp_path):
        path = tmp_path / "ds.json"
        path.write_text("{not json")
        with pytest.raises(IntegrityError):
            PairedDataset.load(path)


class TestCorpus:
    def test_items_carry_literal_description(self):
        ds = gen_reasoning(20, 0)
        for item, p in zip(pretrain_corpus([ds]), ds.pairs):
            assert decode(item.description) == caption_oracle(p.image.objects())
            assert item.caption == p.caption.tokens

    def test_batch_format(self):
        items = pretrain_corpus([gen_explicit(10, 0)])
        batch = next(describe_batches(items, 4, seed=0, text_fraction=0.5))
        assert len(batch) == 6
        assert all(f is not None and toks[0] == DESCRIBE for f, toks in batch[:4])
        assert all(f is None and DESCRIBE in toks[1:] for f, toks in batch[4:])

    def test_empty(self):
        with pytest.raises(InputError):
            pretrain_corpus([])
        with pytest.raises(InputError):
            next(describe_batches([], 4, 0))


def test_vocabulary_layout():
    assert len({literal_token("shape", s) for s in SHAPES}) == len(SHAPES)
    assert len({literal_token("color", c) for c in COLORS}) == len(COLORS)
    assert max(literal_token("count", d) for d in range(10)) < min(literal_token("shape", s) for s in SHAPES)
    assert np.all(np.diff([literal_token("color", c) for c in COLORS]) == 1)
