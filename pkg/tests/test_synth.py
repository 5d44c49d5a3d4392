from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crosslayer.errors import ConfigError
from crosslayer.synth import (
    TASK_KINDS,
    TaskSpec,
    Vocab,
    answer_oracle,
    generate_sample,
    make_batch,
    probe_accuracy,
    read_records,
    scene_label,
    theoretical_floor,
    write_records,
)

from .conftest import small_model

SPEC = TaskSpec()
VOCAB = Vocab()


def _answer_index(sample):
    return sample.answer_tokens[0] - VOCAB.answer_base(sample.task_kind)


@pytest.mark.parametrize("kind", TASK_KINDS)
def test_same_seed_same_sample(kind):
    a, b = generate_sample(77, kind), generate_sample(77, kind)
    assert a.question_tokens == b.question_tokens and a.answer_tokens == b.answer_tokens
    assert np.array_equal(a.image.patches, b.image.patches)
    assert not np.array_equal(a.image.patches, generate_sample(78, kind).image.patches)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**40), kind=st.sampled_from(TASK_KINDS))
def test_answers_recompute_from_image(seed, kind):
    s = generate_sample(seed, kind)
    r, c = s.query
    # independent lookups, not via the generator's helpers
    texture = int(s.image.patches[r * 4 + c, 1])
    shapes = Counter(s.image.patches[:, 0].tolist())
    dominant = max(shapes, key=shapes.get)
    assert list(shapes.values()).count(shapes[dominant]) == 1  # unambiguous
    high = sum(int(x) >= 2 for x in s.image.patches[:, 2])
    scene = dominant + 4 * (high > 8)
    assert s.image.global_label == scene == scene_label(s.image.patches, SPEC)
    expected = {"detail": texture, "semantic": scene, "compositional": (texture + scene) % 8}[kind]
    assert _answer_index(s) == expected == answer_oracle(s, SPEC)


def test_question_template():
    s = generate_sample(5, "detail")
    r, c = s.query
    assert s.question_tokens == (1, VOCAB.task_token("detail"), VOCAB.row_base + r, VOCAB.col_base + c)
    assert s.answer_mask == (False, False, False, True)


@pytest.mark.parametrize("kind", TASK_KINDS)
@pytest.mark.parametrize("start", [0, 12345])
def test_answers_balanced_over_1024_seeds(kind, start):
    counts = Counter(_answer_index(generate_sample(s, kind)) for s in range(start, start + 1024))
    n = SPEC.num_answers(kind)
    assert set(counts) == set(range(n))
    for c in counts.values():
        assert abs(c - 1024 / n) <= 0.1 * 1024 / n


def test_every_image_has_the_texture_profile():
    for seed in range(200):
        s = generate_sample(seed, TASK_KINDS[seed % 3])
        profile = sorted(np.bincount(s.image.patches[:, 1], minlength=4).tolist(), reverse=True)
        assert tuple(profile) == SPEC.texture_counts == (6, 4, 3, 3)


def test_texture_profiles():
    assert TaskSpec(texture_skew=0).texture_counts == (4, 4, 4, 4)
    assert TaskSpec(texture_skew=3).texture_counts == (7, 3, 3, 3)
    with pytest.raises(ConfigError):
        TaskSpec(texture_skew=13).validate()


def test_query_positions_cover_the_grid():
    hits = Counter(generate_sample(s, "detail").query for s in range(800))
    assert len(hits) == 16 and min(hits.values()) > 20


def test_vocab_too_small_rejected():
    assert VOCAB.required <= 64
    with pytest.raises(ConfigError):
        generate_sample(0, "detail", Vocab(size=VOCAB.required - 1))


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        generate_sample(0, "counting")


def test_record_round_trip(tmp_path):
    samples = [generate_sample(s, TASK_KINDS[s % 3]) for s in range(30)]
    path = tmp_path / "samples.rec"
    assert write_records(path, samples) == 30
    back = read_records(path)
    for a, b in zip(samples, back, strict=True):
        assert (a.seed, a.task_kind, a.query) == (b.seed, b.task_kind, b.query)
        assert (a.question_tokens, a.answer_tokens, a.answer_mask) == (b.question_tokens, b.answer_tokens, b.answer_mask)
        assert np.array_equal(a.image.patches, b.image.patches) and a.image.global_label == b.image.global_label


def test_batch_targets_shift_text():
    b = make_batch(range(4), ["detail", "semantic", "compositional", "detail"])
    assert torch.equal(b.targets[:, :-1], b.text[:, 1:])
    assert torch.equal(b.targets[:, -1], b.answers)


# -- floors ---------------------------------------------------------------


def _floor_by_enumeration(counts, kind, n_scenes=8):
    """Exact Bayes accuracy from the texture histogram, with exact fractions."""
    n = sum(counts)
    if kind == "semantic":
        return Fraction(1)
    total = Fraction(0)
    for scene in range(n_scenes):
        best = Counter()
        for t, c in enumerate(counts):
            ans = t if kind == "detail" else (t + scene) % n_scenes
            best[ans] += Fraction(c, n)
        total += max(best.values())
    return total / n_scenes


FROZEN_FLOORS = {"detail": 0.375, "semantic": 1.0, "compositional": 0.375}


@pytest.mark.parametrize("kind", TASK_KINDS)
def test_floor_values(kind):
    enc = small_model().vision
    got = theoretical_floor(kind, enc, SPEC)
    assert got == pytest.approx(FROZEN_FLOORS[kind], abs=1e-12)
    assert got == pytest.approx(float(_floor_by_enumeration(SPEC.texture_counts, kind)), abs=1e-12)


def test_balanced_profile_floor_is_chance():
    enc = small_model().vision
    balanced = TaskSpec(texture_skew=0)
    assert theoretical_floor("detail", enc, balanced) == pytest.approx(0.25)
    assert theoretical_floor("compositional", enc, balanced) == pytest.approx(0.25)
    assert theoretical_floor("semantic", enc, balanced) == 1.0


def test_no_bottleneck_floor_is_one():
    enc = small_model().vision
    enc.detail_bottleneck_layer = None
    assert theoretical_floor("detail", enc) == 1.0


def test_majority_guess_hits_floor_empirically():
    hits = 0
    for seed in range(4096):
        s = generate_sample(seed, "detail")
        counts = np.bincount(s.image.patches[:, 1], minlength=4)
        hits += int(np.argmax(counts)) == _answer_index(s)
    assert abs(hits / 4096 - 0.375) < 0.025


def _features(kind, seeds, layer):
    enc = small_model().vision
    b = make_batch(seeds, [kind] * len(seeds))
    with torch.no_grad():
        v = enc(b.patches.long()).get(layer)
    q = torch.zeros(len(seeds), 16, dtype=v.dtype)
    rows, cols = b.text[:, 2] - VOCAB.row_base, b.text[:, 3] - VOCAB.col_base
    q[torch.arange(len(seeds)), rows * 4 + cols] = 1.0
    y = b.answers - VOCAB.answer_base(kind)
    return v, q, y


def test_deep_features_do_not_reveal_detail():
    v, q, y = _features("detail", range(4096), 8)
    x = torch.cat([v[:, 0], q], dim=1)  # every row is identical past the bottleneck
    acc = probe_accuracy(x[:2048], y[:2048], x[2048:], y[2048:], 4)
    assert acc <= FROZEN_FLOORS["detail"] + 0.05


def test_shallow_features_do_reveal_detail():
    v, q, y = _features("detail", range(4096), 4)
    x = (v * q.unsqueeze(-1)).sum(1)  # the queried patch's own token
    acc = probe_accuracy(x[:2048], y[:2048], x[2048:], y[2048:], 4)
    assert acc >= 0.95


def test_final_features_reveal_scene():
    v, _, y = _features("semantic", range(4096), 8)
    acc = probe_accuracy(v[:2048, 0], y[:2048], v[2048:, 0], y[2048:], 8)
    assert acc >= 0.95
