"""Pretraining losses, bipartite matching, and their weighted combination.

Five terms: image-text contrastive, mask classification against concept
embeddings, next-token caption cross-entropy, and Hungarian-matched
BCE + dice mask losses with optional deep supervision over layer traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch.nn import functional as F

from .config import LossWeights, MatchWeights
from .decoder import DecoderOutput
from .encoders import ConceptEmbeddingTable
from .errors import InputError
from .vocab import PAD_ID

DICE_EPS = 1.0


@dataclass(frozen=True)
class Assignment:
    """Matched (prediction, ground truth) index pairs plus the predictions
    left unmatched. Pairs are the canonical (lexicographically smallest)
    optimal assignment."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_predictions: tuple[int, ...]


def _optimal_entries(cost: np.ndarray) -> list[float]:
    rows, cols = linear_sum_assignment(cost)
    return [float(cost[i, j]) for i, j in zip(rows, cols)]


def hungarian_match(cost) -> Assignment:
    """Minimum-total-cost assignment of min(R, G) pairs.

    Ties are broken deterministically: among all optimal assignments the
    lexicographically smallest sorted pair list is returned. Totals are
    compared through math.fsum, so assignments with mathematically equal
    totals compare equal regardless of summation order.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InputError(f"cost must be 2-D, got shape {cost.shape}")
    num_pred, num_gt = cost.shape
    if num_pred == 0 or num_gt == 0:
        return Assignment(pairs=(), unmatched_predictions=tuple(range(num_pred)))
    if not np.isfinite(cost).all():
        raise InputError("cost matrix has non-finite entries")
    rows = list(range(num_pred))
    cols = list(range(num_gt))
    pairs: list[tuple[int, int]] = []
    while rows and cols:
        sub = cost[np.ix_(rows, cols)]
        best = math.fsum(_optimal_entries(sub))
        fixed = None
        for ri, i in enumerate(rows):
            for ci, j in enumerate(cols):
                rest = np.delete(np.delete(sub, ri, axis=0), ci, axis=1)
                entries = [float(sub[ri, ci])]
                if rest.shape[0] and rest.shape[1]:
                    entries += _optimal_entries(rest)
                if math.fsum(entries) == best:
                    fixed = (i, j)
                    break
            if fixed is not None:
                break
        assert fixed is not None  # scipy found an optimum, so one cell must extend to it
        pairs.append(fixed)
        rows.remove(fixed[0])
        cols.remove(fixed[1])
    pairs.sort()
    matched = {i for i, _ in pairs}
    unmatched = tuple(i for i in range(num_pred) if i not in matched)
    return Assignment(pairs=tuple(pairs), unmatched_predictions=unmatched)


def contrastive_loss(image_emb: torch.Tensor, text_emb: torch.Tensor, logit_scale) -> torch.Tensor:
    """Bidirectional InfoNCE over in-batch pairs; row i matches column i."""
    if image_emb.dim() != 2 or image_emb.shape != text_emb.shape:
        raise InputError(
            f"embedding shapes differ: {tuple(image_emb.shape)} vs {tuple(text_emb.shape)}"
        )
    batch = image_emb.shape[0]
    if batch == 0:
        raise InputError("contrastive loss needs at least one pair")
    img = F.normalize(image_emb, dim=-1)
    txt = F.normalize(text_emb, dim=-1)
    logits = logit_scale * (img @ txt.transpose(0, 1))
    targets = torch.arange(batch, dtype=torch.long)
    return F.cross_entropy(logits, targets) + F.cross_entropy(logits.transpose(0, 1), targets)


def mask_classification_loss(
    semantics: torch.Tensor,
    concepts: ConceptEmbeddingTable,
    assignment: Assignment,
    gt_categories,
) -> torch.Tensor:
    """Cross-entropy of object-query class logits. Matched queries target the
    category of their assigned segment; unmatched queries target the
    background row."""
    num_classes = concepts.embeddings.shape[0]
    logits = semantics @ concepts.embeddings.transpose(0, 1)  # (m-1, C)
    targets = torch.full((semantics.shape[0],), concepts.background_index, dtype=torch.long)
    for pred, gt in assignment.pairs:
        cat = int(gt_categories[gt])
        if not (0 <= cat < num_classes):
            raise InputError(f"category id {cat} outside concept table of size {num_classes}")
        targets[pred] = cat
    return F.cross_entropy(logits, targets)


def caption_loss(
    text_semantics: torch.Tensor,
    token_table: torch.Tensor,
    target_ids: torch.Tensor,
) -> torch.Tensor:
    """Next-token cross-entropy; PAD targets excluded. token_table is the
    text-encoder embedding matrix (weight sharing)."""
    if text_semantics.shape[0] != target_ids.shape[0]:
        raise InputError(
            f"{text_semantics.shape[0]} semantic rows vs {target_ids.shape[0]} targets"
        )
    keep = target_ids != PAD_ID
    if not bool(keep.any()):
        raise InputError("caption targets are all PAD")
    logits = text_semantics @ token_table.transpose(0, 1)  # (n, V)
    return F.cross_entropy(logits[keep], target_ids[keep])


def bce_mask_loss(pred_logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred_logits.shape != gt.shape:
        raise InputError(f"mask shapes differ: {tuple(pred_logits.shape)} vs {tuple(gt.shape)}")
    _check_binary(gt)
    return F.binary_cross_entropy_with_logits(pred_logits, gt.to(pred_logits.dtype))


def dice_loss(pred_probs: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    if pred_probs.shape != gt.shape:
        raise InputError(f"mask shapes differ: {tuple(pred_probs.shape)} vs {tuple(gt.shape)}")
    _check_binary(gt)
    p = pred_probs.reshape(-1)
    g = gt.reshape(-1).to(pred_probs.dtype)
    inter = (p * g).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + g.sum() + eps)


def _check_binary(gt: torch.Tensor) -> None:
    if not bool(((gt == 0) | (gt == 1)).all()):
        raise InputError("ground-truth mask must be binary")


def matching_cost(
    mask_logits: torch.Tensor,
    class_logits: torch.Tensor,
    gt_masks: torch.Tensor,
    gt_categories,
    weights: MatchWeights = MatchWeights(),
) -> np.ndarray:
    """(R, G) cost matrix: weighted class prob + BCE + dice, detached."""
    num_pred = mask_logits.shape[0]
    num_gt = gt_masks.shape[0] if gt_masks.dim() > 0 else 0
    if num_gt == 0:
        return np.zeros((num_pred, 0), dtype=np.float64)
    with torch.no_grad():
        logits = mask_logits.reshape(num_pred, -1)
        gts = gt_masks.reshape(num_gt, -1).to(logits.dtype)
        if logits.shape[1] != gts.shape[1]:
            raise InputError("prediction and ground-truth masks disagree in resolution")
        probs = class_logits.softmax(dim=-1)
        cats = torch.as_tensor(list(gt_categories), dtype=torch.long)
        cost_cls = -probs[:, cats]  # (R, G)
        # pixel-averaged bce on logits; the gt-dependent part is a matmul,
        # so the (R, G, P) intermediate never materializes
        row_term = (logits.clamp(min=0) + torch.log1p(torch.exp(-logits.abs()))).mean(
            dim=1, keepdim=True
        )
        bce = row_term - (logits @ gts.transpose(0, 1)) / logits.shape[1]
        p = logits.sigmoid()
        inter = p @ gts.transpose(0, 1)
        denom = p.sum(dim=1, keepdim=True) + gts.sum(dim=1)
        dice = 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
        cost = (
            weights.classification * cost_cls + weights.bce * bce + weights.dice * dice
        )
    return cost.double().cpu().numpy()


@dataclass
class SegTarget:
    """Ground truth for one segmentation sample at mask-head resolution."""

    masks: torch.Tensor  # (G, H', W') binary
    categories: tuple[int, ...]  # indices into the concept table


@dataclass
class RefTarget:
    """Ground truth for one referring sample: a single segment."""

    mask: torch.Tensor  # (H', W') binary
    category: int


@dataclass
class ItpBatch:
    """Image-text sub-batch: paired global/pooled embeddings plus caption
    supervision (text semantic rows and their shifted target ids)."""

    image_embs: torch.Tensor  # (B, d)
    text_embs: torch.Tensor  # (B, d)
    captions: list[tuple[torch.Tensor, torch.Tensor]]  # (text_sem (n,d), targets (n,))


@dataclass
class LossReport:
    total: torch.Tensor
    l_it: float = 0.0
    l_cls: float = 0.0
    l_cap: float = 0.0
    l_bce: float = 0.0
    l_dice: float = 0.0
    y_it: str = ""
    y_cls: tuple = ()
    y_cap: tuple = ()

    def terms(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "l_it": self.l_it,
            "l_cls": self.l_cls,
            "l_cap": self.l_cap,
            "l_bce": self.l_bce,
            "l_dice": self.l_dice,
        }


def _mask_contributions(output: DecoderOutput, deep_supervision: bool):
    if deep_supervision:
        yield from output.traces
    yield output.mask_logits, output.semantics


def _matched_mask_terms(
    output: DecoderOutput,
    gt_masks: torch.Tensor,
    gt_categories,
    concepts: ConceptEmbeddingTable,
    match_weights: MatchWeights,
    deep_supervision: bool,
):
    """Per-contribution Hungarian matching, then cls/bce/dice sums over the
    contributions of one sample. Returns (cls, bce, dice, final targets)."""
    num_obj = output.m - 1
    zero = torch.zeros((), dtype=output.semantics.dtype)
    cls_sum, bce_sum, dice_sum = zero, zero, zero
    last_targets: tuple[int, ...] = ()
    for mask_logits, semantics in _mask_contributions(output, deep_supervision):
        obj_logits = mask_logits[:num_obj]
        if obj_logits.shape[-2:] != gt_masks.shape[-2:]:
            # supervision lives at the mask-head stride; nearest keeps gt binary
            gt_masks = F.interpolate(
                gt_masks.unsqueeze(0), size=obj_logits.shape[-2:], mode="nearest"
            )[0]
        obj_sem = semantics[:num_obj]
        class_logits = obj_sem @ concepts.embeddings.transpose(0, 1)
        cost = matching_cost(obj_logits, class_logits, gt_masks, gt_categories, match_weights)
        assignment = hungarian_match(cost)
        cls_sum = cls_sum + mask_classification_loss(obj_sem, concepts, assignment, gt_categories)
        if assignment.pairs:
            bce_terms = [
                bce_mask_loss(obj_logits[i], gt_masks[j]) for i, j in assignment.pairs
            ]
            dice_terms = [
                dice_loss(obj_logits[i].sigmoid(), gt_masks[j]) for i, j in assignment.pairs
            ]
            bce_sum = bce_sum + torch.stack(bce_terms).mean()
            dice_sum = dice_sum + torch.stack(dice_terms).mean()
        last_targets = tuple(int(gt_categories[j]) for _, j in assignment.pairs)
    return cls_sum, bce_sum, dice_sum, last_targets


def total_loss(
    seg_batch: list[tuple[DecoderOutput, SegTarget]] | None,
    itp_batch: ItpBatch | None,
    ref_batch: list[tuple[DecoderOutput, RefTarget]] | None,
    concepts: ConceptEmbeddingTable | None,
    token_table: torch.Tensor | None,
    logit_scale,
    weights: LossWeights = LossWeights(),
    deep_supervision: bool = True,
    match_weights: MatchWeights = MatchWeights(),
) -> LossReport:
    """Weighted sum over whichever sub-batches are present.

    seg and ref sub-batches contribute classification + bce + dice (averaged
    over their samples, summed over layer traces when deep_supervision);
    the itp sub-batch contributes the contrastive term and caption
    cross-entropy. Missing pieces required by an active sub-batch raise
    InputError.
    """
    report = LossReport(total=torch.zeros(()))
    pieces: list[torch.Tensor] = []

    mask_samples: list[tuple[DecoderOutput, torch.Tensor, tuple[int, ...]]] = []
    if seg_batch:
        if concepts is None:
            raise InputError("segmentation sub-batch needs a concept table")
        for output, target in seg_batch:
            if target.masks.shape[0] != len(target.categories):
                raise InputError("segmentation target masks and categories disagree")
            mask_samples.append((output, target.masks, tuple(target.categories)))
    if ref_batch:
        if concepts is None:
            raise InputError("referring sub-batch needs a concept table")
        for output, target in ref_batch:
            mask_samples.append((output, target.mask.unsqueeze(0), (target.category,)))

    if mask_samples:
        cls_terms, bce_terms, dice_terms = [], [], []
        y_cls: list[tuple[int, ...]] = []
        for output, gt_masks, gt_cats in mask_samples:
            cls_s, bce_s, dice_s, targets = _matched_mask_terms(
                output, gt_masks, gt_cats, concepts, match_weights, deep_supervision
            )
            cls_terms.append(cls_s)
            bce_terms.append(bce_s)
            dice_terms.append(dice_s)
            y_cls.append(targets)
        l_cls = torch.stack(cls_terms).mean()
        l_bce = torch.stack(bce_terms).mean()
        l_dice = torch.stack(dice_terms).mean()
        report.l_cls = float(l_cls.detach())
        report.l_bce = float(l_bce.detach())
        report.l_dice = float(l_dice.detach())
        report.y_cls = tuple(y_cls)
        pieces.append(weights.classification * l_cls)
        pieces.append(weights.bce * l_bce)
        pieces.append(weights.dice * l_dice)

    if itp_batch is not None:
        l_it = contrastive_loss(itp_batch.image_embs, itp_batch.text_embs, logit_scale)
        report.l_it = float(l_it.detach())
        report.y_it = f"diagonal({itp_batch.image_embs.shape[0]})"
        pieces.append(weights.contrastive * l_it)
        if itp_batch.captions:
            if token_table is None:
                raise InputError("caption supervision needs the token table")
            cap_terms = [
                caption_loss(sem, token_table, targets)
                for sem, targets in itp_batch.captions
            ]
            l_cap = torch.stack(cap_terms).mean()
            report.l_cap = float(l_cap.detach())
            report.y_cap = tuple(
                tuple(int(t) for t in targets) for _, targets in itp_batch.captions
            )
            pieces.append(weights.caption * l_cap)

    if pieces:
        report.total = sum(pieces[1:], start=pieces[0])
    return report
