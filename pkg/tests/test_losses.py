import math

import numpy as np
import pytest
import torch

from xdec.attention import TaskMode
from xdec.config import LossWeights, MatchWeights
from xdec.decoder import DecoderOutput
from xdec.encoders import ConceptEmbeddingTable
from xdec.errors import InputError
from xdec.losses import (
    Assignment,
    DICE_EPS,
    ItpBatch,
    SegTarget,
    bce_mask_loss,
    caption_loss,
    contrastive_loss,
    dice_loss,
    hungarian_match,
    mask_classification_loss,
    matching_cost,
    total_loss,
)

from oracles import brute_force_min_assignment


def _one_hots(*indices, dim=4):
    rows = torch.zeros(len(indices), dim)
    for r, i in enumerate(indices):
        rows[r, i] = 1.0
    return rows


# --- contrastive ------------------------------------------------------------

def test_contrastive_single_pair_is_zero():
    loss = contrastive_loss(torch.randn(1, 8), torch.randn(1, 8), torch.tensor(5.0))
    assert abs(float(loss)) < 1e-6


def test_contrastive_uniform_logits_two_ln_two():
    img = _one_hots(0, 1)
    txt = _one_hots(2, 3)
    loss = contrastive_loss(img, txt, torch.tensor(7.0))
    assert abs(float(loss) - 2.0 * math.log(2.0)) < 1e-6


def test_contrastive_strong_diagonal_closed_form():
    img = _one_hots(0, 1)
    txt = _one_hots(0, 1)
    loss = contrastive_loss(img, txt, torch.tensor(10.0))
    want = 2.0 * math.log(1.0 + math.exp(-10.0))
    assert abs(float(loss) - want) < 1e-6


def test_contrastive_symmetric_in_roles():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        img = torch.randn(4, 8, generator=g)
        txt = torch.randn(4, 8, generator=g)
        scale = torch.rand((), generator=g) * 10 + 0.1
        a = contrastive_loss(img, txt, scale)
        b = contrastive_loss(txt, img, scale)
        assert torch.allclose(a, b, atol=1e-6)


def test_contrastive_rejects_empty_batch():
    with pytest.raises(InputError):
        contrastive_loss(torch.zeros(0, 8), torch.zeros(0, 8), torch.tensor(1.0))


# --- classification ----------------------------------------------------------

def _concepts(rows: torch.Tensor) -> ConceptEmbeddingTable:
    names = tuple(f"cat{i}" for i in range(rows.shape[0] - 1)) + ("background",)
    return ConceptEmbeddingTable(names=names, embeddings=rows)


def test_classification_uniform_two_way():
    concepts = _concepts(torch.zeros(2, 4))
    semantics = torch.zeros(1, 4)
    assignment = Assignment(pairs=((0, 0),), unmatched_predictions=())
    loss = mask_classification_loss(semantics, concepts, assignment, (0,))
    assert abs(float(loss) - math.log(2.0)) < 1e-6


def test_classification_saturated_is_zero():
    concepts = _concepts(torch.eye(3, 8) * 50.0)
    semantics = torch.eye(1, 8)
    assignment = Assignment(pairs=((0, 0),), unmatched_predictions=())
    loss = mask_classification_loss(semantics, concepts, assignment, (0,))
    assert float(loss) < 1e-6


def test_classification_unmatched_targets_background():
    concepts = _concepts(torch.zeros(3, 4))
    semantics = torch.zeros(2, 4)
    assignment = Assignment(pairs=(), unmatched_predictions=(0, 1))
    loss = mask_classification_loss(semantics, concepts, assignment, ())
    assert abs(float(loss) - math.log(3.0)) < 1e-6


def test_classification_rejects_out_of_range_category():
    concepts = _concepts(torch.zeros(2, 4))
    assignment = Assignment(pairs=((0, 0),), unmatched_predictions=())
    with pytest.raises(InputError):
        mask_classification_loss(torch.zeros(1, 4), concepts, assignment, (5,))


# --- captions -----------------------------------------------------------------

def test_caption_uniform_logits():
    semantics = torch.zeros(1, 8)
    table = torch.zeros(4, 8)
    loss = caption_loss(semantics, table, torch.tensor([2]))
    assert abs(float(loss) - math.log(4.0)) < 1e-6


def test_caption_mean_over_non_pad_positions_only():
    table = torch.eye(4, 8) * 50.0
    semantics = torch.zeros(3, 8)
    semantics[0] = torch.eye(1, 8)[0]  # saturated on token 0
    targets = torch.tensor([0, 3, 0])  # last position PAD (id 0) is... excluded
    # PAD id is 0; position 0 targets token 0 which IS pad -> excluded.
    # Use non-pad ids to keep the arithmetic visible instead:
    targets = torch.tensor([1, 2, 0])
    semantics[0] = table[1] / 50.0
    loss = caption_loss(semantics, table, targets)
    # position 0 saturated (≈0), position 1 uniform over V=4 at logit scale 50
    per_uniform = float(
        torch.nn.functional.cross_entropy(torch.zeros(1, 4), torch.tensor([2]))
    )
    assert abs(float(loss) - (0.0 + per_uniform) / 2.0) < 1e-4


def test_caption_all_pad_rejected():
    with pytest.raises(InputError):
        caption_loss(torch.zeros(2, 8), torch.zeros(4, 8), torch.tensor([0, 0]))


# --- masks ---------------------------------------------------------------------

def test_bce_zero_logits_is_ln_two():
    logits = torch.zeros(4, 4)
    gt = torch.zeros(4, 4)
    gt[0, 0] = 1.0
    loss = bce_mask_loss(logits, gt)
    assert abs(float(loss) - math.log(2.0)) < 1e-6


def test_bce_shape_mismatch():
    with pytest.raises(InputError):
        bce_mask_loss(torch.zeros(2, 2), torch.zeros(3, 3))


def test_dice_perfect_overlap_is_zero():
    gt = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert abs(float(dice_loss(gt, gt))) < 1e-7


def test_dice_hand_case_half():
    p = torch.tensor([1.0, 1.0, 0.0, 0.0])
    g = torch.tensor([1.0, 0.0, 1.0, 0.0])
    assert abs(float(dice_loss(p, g, eps=0.0)) - 0.5) < 1e-6


def test_dice_default_eps_is_one():
    assert DICE_EPS == 1.0
    p = torch.zeros(3)
    g = torch.zeros(3)
    assert abs(float(dice_loss(p, g))) < 1e-7  # eps keeps empty/empty at 0


def test_dice_rejects_non_binary_gt():
    with pytest.raises(InputError):
        dice_loss(torch.zeros(4), torch.full((4,), 0.5))


# --- matching cost ---------------------------------------------------------------

def test_matching_cost_saturated_match():
    gt = torch.zeros(1, 4, 4)
    gt[0, :2] = 1.0
    logits = torch.where(gt > 0, torch.tensor(60.0), torch.tensor(-60.0))
    class_logits = torch.tensor([[80.0, 0.0]])
    weights = MatchWeights()
    cost = matching_cost(logits, class_logits, gt, (0,), weights)
    assert cost.shape == (1, 1)
    assert abs(cost[0, 0] + weights.classification) < 1e-3


def test_matching_cost_empty_gt():
    cost = matching_cost(
        torch.zeros(2, 4, 4), torch.zeros(2, 3), torch.zeros(0, 4, 4), (), MatchWeights()
    )
    assert cost.shape == (2, 0)


def test_matching_cost_duplicate_gts_identical_columns():
    torch.manual_seed(0)
    logits = torch.randn(3, 4, 4)
    class_logits = torch.randn(3, 4)
    gt = torch.zeros(2, 4, 4)
    gt[:, 1:3, 1:3] = 1.0
    cost = matching_cost(logits, class_logits, gt, (2, 2), MatchWeights())
    np.testing.assert_allclose(cost[:, 0], cost[:, 1], rtol=0, atol=0)


# --- hungarian --------------------------------------------------------------------

def test_hungarian_identity_on_zero_diagonal():
    cost = np.full((3, 3), 5.0)
    np.fill_diagonal(cost, 0.0)
    assert hungarian_match(cost).pairs == ((0, 0), (1, 1), (2, 2))


def test_hungarian_two_by_two_hand_case():
    out = hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert out.pairs == ((0, 0), (1, 1))
    assert out.unmatched_predictions == ()


def test_hungarian_rect_hand_case():
    out = hungarian_match(np.array([[0.0, 9.0], [9.0, 0.0], [1.0, 1.0]]))
    assert out.pairs == ((0, 0), (1, 1))
    assert out.unmatched_predictions == (2,)


def test_hungarian_matches_brute_force_on_random_matrices():
    rng = np.random.default_rng(0)
    for trial in range(500):
        rows = int(rng.integers(1, 7))
        cols = int(rng.integers(1, 7))
        cost = rng.integers(-8, 9, size=(rows, cols)).astype(float)
        out = hungarian_match(cost)
        total = sum(cost[i, j] for i, j in out.pairs)
        assert total == brute_force_min_assignment(cost), (trial, cost)
        assert len(out.pairs) == min(rows, cols)
        matched = {i for i, _ in out.pairs}
        assert matched | set(out.unmatched_predictions) == set(range(rows))
        assert matched & set(out.unmatched_predictions) == set()


def test_hungarian_tie_break_lowest_pairs():
    out = hungarian_match(np.zeros((2, 3)))
    assert out.pairs == ((0, 0), (1, 1))
    out = hungarian_match(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert out.pairs == ((0, 0), (1, 1))


def test_hungarian_scale_invariance():
    rng = np.random.default_rng(3)
    for _ in range(50):
        cost = rng.normal(size=(4, 4))
        base = hungarian_match(cost).pairs
        assert hungarian_match(cost * 7.25).pairs == base


def test_hungarian_rejects_non_finite():
    with pytest.raises(InputError):
        hungarian_match(np.array([[np.nan, 1.0]]))


# --- total loss -------------------------------------------------------------------

def _fake_output(m=3, n=0, h=4, w=4, dim=8, depth=2, seed=0, mode=TaskMode.GENERIC_SEG):
    g = torch.Generator().manual_seed(seed)
    def draw():
        return (
            torch.randn(m, h, w, generator=g),
            torch.randn(m + n, dim, generator=g),
        )
    final_masks, final_sem = draw()
    traces = tuple(draw() for _ in range(depth))
    return DecoderOutput(
        mask_logits=final_masks,
        semantics=final_sem,
        traces=traces,
        mode=mode,
        m=m,
        n=n,
    )


def _fake_concepts(dim=8, classes=3):
    g = torch.Generator().manual_seed(42)
    rows = torch.randn(classes, dim, generator=g)
    return _concepts(rows)


def test_total_loss_zero_weights():
    output = _fake_output()
    gt = torch.zeros(1, 4, 4)
    gt[0, :2] = 1.0
    target = SegTarget(masks=gt, categories=(0,))
    report = total_loss(
        [(output, target)],
        None,
        None,
        _fake_concepts(),
        None,
        torch.tensor(1.0),
        weights=LossWeights(contrastive=0, classification=0, caption=0, bce=0, dice=0),
    )
    assert float(report.total) == 0.0
    assert report.l_cls > 0.0  # per-term values still reported


def test_total_loss_itp_only_has_no_mask_terms():
    itp = ItpBatch(
        image_embs=_one_hots(0, 1, dim=8),
        text_embs=_one_hots(2, 3, dim=8),
        captions=[],
    )
    report = total_loss(None, itp, None, None, None, torch.tensor(1.0))
    assert report.l_bce == 0.0
    assert report.l_dice == 0.0
    assert report.l_cls == 0.0
    assert abs(report.l_it - 2 * math.log(2.0)) < 1e-6
    assert abs(float(report.total) - report.l_it) < 1e-6


def test_total_loss_deep_supervision_counts_traces_plus_final():
    output = _fake_output(depth=3)
    same = DecoderOutput(
        mask_logits=output.mask_logits,
        semantics=output.semantics,
        traces=(
            (output.mask_logits, output.semantics),
        ) * 3,
        mode=output.mode,
        m=output.m,
        n=output.n,
    )
    gt = torch.zeros(2, 4, 4)
    gt[0, :2] = 1.0
    gt[1, 3:] = 1.0
    target = SegTarget(masks=gt, categories=(0, 1))
    concepts = _fake_concepts()
    deep = total_loss(
        [(same, target)], None, None, concepts, None, torch.tensor(1.0),
        deep_supervision=True,
    )
    flat = total_loss(
        [(same, target)], None, None, concepts, None, torch.tensor(1.0),
        deep_supervision=False,
    )
    assert abs(deep.l_bce - 4 * flat.l_bce) < 1e-5
    assert abs(deep.l_dice - 4 * flat.l_dice) < 1e-5
    assert abs(deep.l_cls - 4 * flat.l_cls) < 1e-5


def test_total_loss_requires_concepts_for_masks():
    output = _fake_output()
    target = SegTarget(masks=torch.zeros(1, 4, 4), categories=(0,))
    with pytest.raises(InputError):
        total_loss([(output, target)], None, None, None, None, torch.tensor(1.0))


def test_total_loss_requires_token_table_for_captions():
    itp = ItpBatch(
        image_embs=torch.randn(2, 8),
        text_embs=torch.randn(2, 8),
        captions=[(torch.zeros(3, 8), torch.tensor([4, 2, 0]))],
    )
    with pytest.raises(InputError):
        total_loss(None, itp, None, None, None, torch.tensor(1.0))


def test_total_loss_report_total_is_weighted_sum():
    output = _fake_output()
    gt = torch.zeros(1, 4, 4)
    gt[0, 1:3, 1:3] = 1.0
    target = SegTarget(masks=gt, categories=(1,))
    itp = ItpBatch(
        image_embs=_one_hots(0, 1, dim=8),
        text_embs=_one_hots(2, 3, dim=8),
        captions=[(torch.zeros(2, 8), torch.tensor([4, 0]))],
    )
    weights = LossWeights(contrastive=1, classification=2, caption=1, bce=5, dice=5)
    report = total_loss(
        [(output, target)],
        itp,
        None,
        _fake_concepts(),
        torch.zeros(6, 8),
        torch.tensor(1.0),
        weights=weights,
    )
    want = (
        weights.contrastive * report.l_it
        + weights.classification * report.l_cls
        + weights.caption * report.l_cap
        + weights.bce * report.l_bce
        + weights.dice * report.l_dice
    )
    assert abs(float(report.total) - want) < 1e-5
