import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from sgma.grounding import PhraseRegion, ground_caption, phrase_centers
from sgma.objectives import (
    AttackGoal,
    ConfigurationError,
    LossBreakdown,
    NumericError,
    Toggles,
    anchored_losses,
    baseline_feature_distance,
    baseline_text_feature,
    breakdown,
    ensemble_loss,
    loss_image_image,
    loss_local,
    loss_text_image,
    targeted_anchors,
    total_targeted,
    total_untargeted,
    untargeted_anchors,
)
from sgma.surrogate.base import TokenFeatures, VisualOutput, embed_image

D = torch.float64


def _tokens(rows) -> TokenFeatures:
    t = torch.tensor(rows, dtype=D)
    n, d = t.shape[0] - 1, t.shape[1]
    return TokenFeatures(t, torch.ones(n, dtype=D), torch.zeros(n, d, dtype=D), torch.zeros(d, dtype=D))


def _out(embedding, rows) -> VisualOutput:
    t = torch.tensor(rows, dtype=D)[None]
    n, d = t.shape[1] - 1, t.shape[2]
    return VisualOutput(torch.tensor(embedding, dtype=D)[None], t, torch.ones(1, n, dtype=D),
                        torch.zeros(1, n, d, dtype=D), torch.zeros(1, d, dtype=D))


def _region(indices, center) -> PhraseRegion:
    return PhraseRegion("p", torch.zeros(2, 2), torch.tensor(indices), torch.tensor(center, dtype=D))


def _cos(a, b):
    return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))


# ---------------------------------------------------------------- text-image


@pytest.mark.parametrize("a,b,expected", [([1.0, 2.0], [1.0, 2.0], 0.0), ([1.0, 0.0], [0.0, 3.0], 1.0),
                                          ([1.0, 1.0], [-2.0, -2.0], 2.0)])
def test_text_image_trivial(a, b, expected):
    value = loss_text_image(torch.tensor(a, dtype=D), torch.tensor(b, dtype=D))
    assert float(value) == pytest.approx(expected, abs=1e-12)
    assert float(baseline_text_feature(torch.tensor(a, dtype=D), torch.tensor(b, dtype=D))) == pytest.approx(expected, abs=1e-12)


def test_text_image_zero_vector_raises():
    with pytest.raises(NumericError):
        loss_text_image(torch.zeros(3, dtype=D), torch.ones(3, dtype=D))


# ---------------------------------------------------------------- image-image


CLEAN = [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]
ADV = [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -3.0]]


def test_image_image_identity_and_negation():
    clean = _tokens(CLEAN)
    assert float(loss_image_image(clean, clean)) == pytest.approx(0.0, abs=1e-15)
    assert float(loss_image_image(_tokens([[-x for x in r] for r in CLEAN]), clean)) == pytest.approx(2.0, abs=1e-15)


def test_image_image_hand_oracle():
    # cosines by row: 0, 1/sqrt(2), -1/sqrt(2)
    expected = ((1 - 0) + (1 - 1 / math.sqrt(2)) + (1 + 1 / math.sqrt(2))) / 3
    assert float(loss_image_image(_tokens(ADV), _tokens(CLEAN))) == pytest.approx(expected, abs=1e-12)
    assert float(baseline_feature_distance(_tokens(ADV), _tokens(CLEAN))) == pytest.approx(expected, abs=1e-12)


def test_image_image_zero_row_names_row():
    with pytest.raises(NumericError, match="row 1"):
        loss_image_image(_tokens([[1, 0], [0, 0], [1, 1]]), _tokens([[1, 0], [1, 0], [1, 1]]))


def test_image_image_shape_mismatch():
    with pytest.raises(ValueError):
        loss_image_image(_tokens([[1, 0], [0, 1]]), _tokens([[1, 0], [0, 1], [1, 1]]))


# ---------------------------------------------------------------- local


def test_local_singleton_identity_is_zero():
    rows = [[9.0, 9.0], [3.0, 4.0], [0.0, 1.0]]
    tokens = _tokens(rows)
    region = PhraseRegion("p", torch.zeros(1, 2), torch.tensor([0]))
    (region,) = phrase_centers(tokens, [region])
    assert float(loss_local(tokens, [region])) == pytest.approx(0.0, abs=1e-15)


def test_local_no_regions_warns_and_is_zero():
    with pytest.warns(RuntimeWarning):
        value = loss_local(_tokens([[1.0, 0.0], [0.0, 1.0]]), [])
    assert float(value) == 0.0


def test_local_two_regions_hand_oracle():
    rows = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 2.0, 0.0], [3.0, 0.0, 4.0]]
    c1, c2 = [1.0, 0.0, 0.0], [0.0, 0.6, 0.8]
    regions = [_region([0, 1], c1), _region([2, 3], c2)]
    patches = rows[1:]
    r1 = ((1 - _cos(patches[0], c1)) + (1 - _cos(patches[1], c1))) / 2
    r2 = ((1 - _cos(patches[2], c2)) + (1 - _cos(patches[3], c2))) / 2
    assert float(loss_local(_tokens(rows), regions)) == pytest.approx((r1 + r2) / 2, abs=1e-12)


def test_local_skips_unusable_regions():
    rows = [[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]
    usable = _region([0], [1.0, 0.0])
    empty = PhraseRegion("q", torch.zeros(1, 2), torch.tensor([], dtype=torch.long))
    assert float(loss_local(_tokens(rows), [usable, empty])) == pytest.approx(0.0, abs=1e-15)


# ---------------------------------------------------------------- anchored form


def test_anchored_form_matches_component_ops():
    rows = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 2.0, 0.0], [3.0, 0.0, 4.0]]
    clean_rows = [[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 4.0]]
    text = torch.tensor([0.0, 1.0, 0.0], dtype=D)
    regions = [_region([0, 1], [1.0, 0.0, 0.0]), _region([2, 3], [0.0, 0.6, 0.8])]
    out = _out([0.6, 0.0, 0.8], rows)
    losses = breakdown(anchored_losses(out, untargeted_anchors(text, _tokens(clean_rows), regions)))
    assert losses.text_image == pytest.approx(float(loss_text_image(out.embedding[0], text)), abs=1e-12)
    assert losses.image_image == pytest.approx(float(loss_image_image(_tokens(rows), _tokens(clean_rows))), abs=1e-12)
    assert losses.local == pytest.approx(float(loss_local(_tokens(rows), regions)), abs=1e-12)
    assert losses.total == pytest.approx(losses.text_image + losses.image_image + losses.local, abs=1e-12)


def test_targeted_hand_differences():
    rows = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
    clean_rows = [[1.0, 1.0], [0.0, 1.0], [1.0, 0.0]]
    target_rows = [[0.0, 1.0], [1.0, 0.0], [-1.0, 1.0]]
    t_d, t_tgt = torch.tensor([1.0, 0.0], dtype=D), torch.tensor([0.0, 1.0], dtype=D)
    r_orig, r_tgt = [_region([0], [0.0, 1.0])], [_region([1], [1.0, 0.0])]
    emb = [0.8, 0.6]
    anchors = targeted_anchors(untargeted_anchors(t_d, _tokens(clean_rows), r_orig),
                               untargeted_anchors(t_tgt, _tokens(target_rows), r_tgt), 1.0)
    got = breakdown(anchored_losses(_out(emb, rows), anchors))
    ti = (1 - _cos(emb, [1, 0])) - (1 - _cos(emb, [0, 1]))
    ii = (sum(1 - _cos(a, c) for a, c in zip(rows, clean_rows)) - sum(1 - _cos(a, c) for a, c in zip(rows, target_rows))) / 3
    loc = (1 - _cos(rows[1], [0, 1])) - (1 - _cos(rows[2], [1, 0]))
    assert got.text_image == pytest.approx(ti, abs=1e-12)
    assert got.image_image == pytest.approx(ii, abs=1e-12)
    assert got.local == pytest.approx(loc, abs=1e-12)
    assert got.total == pytest.approx(ti + ii + loc, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0))
def test_component_ranges(seed, weight):
    g = torch.Generator().manual_seed(seed)
    n, d = 5, 4
    rand = lambda *s: torch.randn(*s, generator=g, dtype=D)
    out = VisualOutput(F.normalize(rand(1, d), dim=-1), rand(1, n + 1, d), torch.ones(1, n, dtype=D),
                       torch.zeros(1, n, d, dtype=D), torch.zeros(1, d, dtype=D))
    clean, target = _tokens(rand(n + 1, d).tolist()), _tokens(rand(n + 1, d).tolist())
    regions = phrase_centers(clean, [PhraseRegion("a", torch.zeros(1), torch.tensor([0, 2]))])
    regions_t = phrase_centers(target, [PhraseRegion("b", torch.zeros(1), torch.tensor([1, 3, 4]))])
    repel = untargeted_anchors(rand(d), clean, regions)
    plain = breakdown(anchored_losses(out, repel))
    for value in (plain.text_image, plain.image_image, plain.local):
        assert -1e-12 <= value <= 2 + 1e-12
    mixed = breakdown(anchored_losses(out, targeted_anchors(repel, untargeted_anchors(rand(d), target, regions_t), weight)))
    for value in (mixed.text_image, mixed.image_image, mixed.local):
        assert -2 * weight - 1e-12 <= value <= 2 + 1e-12
    assert mixed.total == pytest.approx(mixed.text_image + mixed.image_image + mixed.local, abs=1e-9)


# ---------------------------------------------------------------- encoder-level totals


@pytest.fixture(scope="module")
def grounded(random_encoder64, scene_image):
    caption = "a black square next to a red ring"
    with torch.no_grad():
        tokens = random_encoder64.visual(scene_image.unsqueeze(0)).tokens(0)
    regions, _ = ground_caption(random_encoder64, scene_image, tokens, caption)
    return caption, tokens, regions


def _perturbed(image, seed=3):
    g = torch.Generator().manual_seed(seed)
    return (image + (torch.rand(image.shape, generator=g, dtype=D) * 2 - 1) * 8 / 255).clamp(0, 1)


def test_total_equals_independent_components(random_encoder64, scene_image, grounded):
    caption, clean_tokens, regions = grounded
    adv = _perturbed(scene_image)
    got = total_untargeted(adv, scene_image, caption, random_encoder64, regions)
    with torch.no_grad():
        adv_tokens = random_encoder64.visual(adv.unsqueeze(0)).tokens(0)
    ti = float(loss_text_image(embed_image(random_encoder64, adv), random_encoder64.text_embedding(caption)))
    ii = float(loss_image_image(adv_tokens, clean_tokens))
    loc = float(loss_local(adv_tokens, regions))
    assert got.text_image == pytest.approx(ti, abs=1e-12)
    assert got.image_image == pytest.approx(ii, abs=1e-12)
    assert got.local == pytest.approx(loc, abs=1e-12)
    assert got.total == pytest.approx(ti + ii + loc, abs=1e-9)


def test_identity_zero_with_singleton_regions(random_encoder64, scene_image, grounded):
    caption, tokens, regions = grounded
    singletons = phrase_centers(tokens, [PhraseRegion(r.phrase, r.relevance, r.indices[:1]) for r in regions if r.indices.numel()])
    got = total_untargeted(scene_image, scene_image, caption, random_encoder64, singletons)
    assert got.image_image == pytest.approx(0.0, abs=1e-12)
    assert got.local == pytest.approx(0.0, abs=1e-12)
    text_only = 1 - float(embed_image(random_encoder64, scene_image).vector @ random_encoder64.text_embedding(caption))
    assert got.text_image == pytest.approx(text_only, abs=1e-12)


@pytest.mark.parametrize("flags", [(True, False, False), (False, True, False), (False, False, True), (True, True, False)])
def test_disabled_components_contribute_exactly_zero(random_encoder64, scene_image, grounded, flags):
    caption, _, regions = grounded
    got = total_untargeted(_perturbed(scene_image), scene_image, caption, random_encoder64, regions, Toggles(*flags))
    for enabled, value in zip(flags, (got.text_image, got.image_image, got.local)):
        if not enabled:
            assert value == 0.0
    assert got.total == pytest.approx(got.text_image + got.image_image + got.local, abs=1e-12)


def test_targeted_cancellation_and_zero_weight(random_encoder64, scene_image, grounded):
    caption, _, regions = grounded
    adv = _perturbed(scene_image)
    cancel = AttackGoal("targeted", caption, scene_image, 1.0)
    at_clean = total_targeted(scene_image, scene_image, caption, cancel, random_encoder64, regions, regions)
    assert at_clean.total == 0.0
    reduced = total_targeted(adv, scene_image, caption, AttackGoal("targeted", "a blue star", scene_image * 0.5, 0.0),
                             random_encoder64, regions, regions)
    plain = total_untargeted(adv, scene_image, caption, random_encoder64, regions)
    assert reduced.as_dict() == plain.as_dict()


def test_goal_validation():
    with pytest.raises(ConfigurationError):
        AttackGoal("targeted", "a cat", None).validate()
    with pytest.raises(ConfigurationError):
        AttackGoal("sideways")
    with pytest.raises(ConfigurationError):
        AttackGoal("targeted", "a cat", torch.zeros(3, 4, 4), -1.0)
    AttackGoal("untargeted").validate()


def test_ensemble_loss_is_componentwise_mean():
    a, b = LossBreakdown(0.1, 0.2, 0.3, 0.6), LossBreakdown(0.3, 0.4, 0.5, 1.2)
    assert ensemble_loss([a, b]).as_dict() == pytest.approx({"text_image": 0.2, "image_image": 0.3, "local": 0.4, "total": 0.9})
    with pytest.raises(ValueError):
        ensemble_loss([])
