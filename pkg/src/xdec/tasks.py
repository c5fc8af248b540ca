"""Task routing and inference on a trained model: panoptic/semantic/instance
segmentation, referring segmentation, retrieval, captioning, VQA, and the
two-stage compositions. Also the dataset evaluation harness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .attention import TaskMode
from .data import CANVAS_CATEGORY, Dataset
from .decoder import DecoderOutput, XDecoder
from .encoders import ConceptEmbeddingTable, encode_concepts
from .errors import InputError
from .metrics import (
    MetricReport,
    caption_metrics,
    cumulative_iou,
    mask_ap,
    panoptic_quality,
    recall_at_k,
)
from .vocab import BOS_ID, EOS_ID, PAD_ID, TokenSequence, Vocabulary, detokenize, tokenize

SEG_TASKS = ("panoptic", "semantic", "instance")
ALL_TASKS = SEG_TASKS + ("referring", "retrieval", "caption")


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) float array in [0,1] -> (3, H, W) tensor."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputError(f"image must be (H, W, 3), got {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)


def category_scores(
    object_semantics: torch.Tensor, concepts: ConceptEmbeddingTable
) -> torch.Tensor:
    """(m-1, C-1) per-query scores, each real category measured against the
    background row alone: sigmoid(logit_c - logit_background).

    Scoring never normalizes across categories, so a category's score does
    not depend on what else is in the concept table: permuting the table
    permutes the columns bitwise, and appending new names leaves existing
    columns untouched. A score of 0.5 means "as likely as background"."""
    # one matvec per column: a single GEMM would tie each column's rounding
    # to the table size, breaking bitwise stability under added names
    background = object_semantics @ concepts.embeddings[-1]
    columns = [
        torch.sigmoid(object_semantics @ concepts.embeddings[c] - background)
        for c in range(concepts.embeddings.shape[0] - 1)
    ]
    return torch.stack(columns, dim=1)


def upsample_mask_logits(mask_logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if mask_logits.shape[-2:] == tuple(size):
        return mask_logits
    return F.interpolate(
        mask_logits.unsqueeze(0), size=size, mode="bilinear", align_corners=False
    )[0]


def encode_single(model: XDecoder, image: np.ndarray):
    tensor = image_to_tensor(image, next(model.parameters()).dtype)
    pyramid, pixel_map = model.encode_image(tensor.unsqueeze(0))
    return [level[0] for level in pyramid], pixel_map[0]


@dataclass
class PanopticResult:
    """segment_map: (H, W) int32, 0 = void; segments: (id, category index
    into the concept table, score), background never appears."""

    segment_map: np.ndarray
    segments: tuple[tuple[int, int, float], ...]


def panoptic_inference(
    output: DecoderOutput, concepts: ConceptEmbeddingTable, size: tuple[int, int]
) -> PanopticResult:
    """Mask2Former-style merge: queries scoring >= 0.5 on a real category
    compete per pixel with score-weighted mask probability; a pixel sticks
    with the winner only where that query's own mask claims it."""
    fg = category_scores(output.object_semantics, concepts)
    scores, cats = fg.max(dim=-1)
    keep = (scores >= 0.5).nonzero(as_tuple=True)[0]
    height, width = size
    seg_map = np.zeros((height, width), dtype=np.int32)
    if keep.numel() == 0:
        return PanopticResult(segment_map=seg_map, segments=())
    mask_probs = upsample_mask_logits(
        output.mask_logits[: output.m - 1][keep], size
    ).sigmoid()
    weighted = scores[keep].reshape(-1, 1, 1) * mask_probs
    winner = weighted.argmax(dim=0)
    owned = mask_probs.gather(0, winner.unsqueeze(0))[0] >= 0.5
    segments = []
    next_id = 1
    for slot, q in enumerate(keep.tolist()):
        pixels = (winner == slot) & owned
        if not bool(pixels.any()):
            continue
        seg_map[pixels.numpy()] = next_id
        segments.append((next_id, int(cats[q]), float(scores[q])))
        next_id += 1
    return PanopticResult(segment_map=seg_map, segments=tuple(segments))


def semantic_inference(
    output: DecoderOutput, concepts: ConceptEmbeddingTable, size: tuple[int, int]
) -> np.ndarray:
    """Per-pixel category index: class-score-weighted sum of mask
    probabilities per category, argmax over real categories."""
    fg = category_scores(output.object_semantics, concepts)  # (m-1, C-1)
    mask_probs = upsample_mask_logits(output.mask_logits[: output.m - 1], size).sigmoid()
    # accumulate per category for the same bitwise stability as the scores
    votes = torch.stack(
        [(fg[:, c, None, None] * mask_probs).sum(dim=0) for c in range(fg.shape[1])]
    )
    return votes.argmax(dim=0).numpy().astype(np.int32)


def instance_inference(
    output: DecoderOutput, concepts: ConceptEmbeddingTable, size: tuple[int, int]
) -> list[tuple[np.ndarray, int, float]]:
    """Scored instances: every object query's thresholded mask with its top
    real category; confidence = class score x mean in-mask probability."""
    fg = category_scores(output.object_semantics, concepts)
    scores, cats = fg.max(dim=-1)
    mask_probs = upsample_mask_logits(output.mask_logits[: output.m - 1], size).sigmoid()
    instances = []
    for q in range(scores.shape[0]):
        mask = mask_probs[q] >= 0.5
        if not bool(mask.any()):
            continue
        confidence = float(scores[q]) * float(mask_probs[q][mask].mean())
        instances.append((mask.numpy(), int(cats[q]), confidence))
    return instances


def segmentation_inference(
    output: DecoderOutput,
    concepts: ConceptEmbeddingTable,
    kind: str,
    size: tuple[int, int],
):
    if output.mode is not TaskMode.GENERIC_SEG:
        raise InputError(f"segmentation inference needs a generic decode, got {output.mode.value}")
    if concepts.names[-1] != "background":
        raise InputError("concept table lacks the background row")
    with torch.no_grad():
        if kind == "panoptic":
            return panoptic_inference(output, concepts, size)
        if kind == "semantic":
            return semantic_inference(output, concepts, size)
        if kind == "instance":
            return instance_inference(output, concepts, size)
    raise InputError(f"unknown segmentation kind {kind!r}")


@dataclass
class ReferResult:
    mask: np.ndarray  # (H, W) bool
    score: float
    query: int


def referring_segment(
    model: XDecoder, image: np.ndarray, phrase: str, vocab: Vocabulary
) -> ReferResult:
    """Decode with the phrase as text queries; the object query whose
    semantic output best matches the pooled phrase supplies the mask."""
    if not phrase.strip():
        raise InputError("empty referring phrase")
    with torch.no_grad():
        tokens = tokenize(phrase, vocab, model.text_encoder.max_len)
        enc = model.text_encoder.encode(tokens)
        pyramid, pixel_map = encode_single(model, image)
        out = model.decode(pyramid, pixel_map, TaskMode.REFERRING_SEG, text_states=enc.states)
        scores = out.object_semantics @ enc.pooled
        best = int(scores.argmax())
        logits = upsample_mask_logits(out.mask_logits[best : best + 1], image.shape[:2])[0]
        mask = (logits.sigmoid() >= 0.5).numpy()
    return ReferResult(mask=mask, score=float(scores[best]), query=best)


@dataclass
class RetrievalRanking:
    affinity: np.ndarray  # (nI, nT)
    image_rankings: tuple[tuple[int, ...], ...]  # per text, best image first
    text_rankings: tuple[tuple[int, ...], ...]  # per image, best text first


def image_embedding(model: XDecoder, image: np.ndarray) -> torch.Tensor:
    """Global-query row of a latent-only decode."""
    with torch.no_grad():
        pyramid, pixel_map = encode_single(model, image)
        out = model.decode(pyramid, pixel_map, TaskMode.RETRIEVAL)
        return out.global_semantic


def run_retrieval(model: XDecoder, images, texts, vocab: Vocabulary) -> RetrievalRanking:
    """Affinity of every image against every text. Image embeddings are
    computed once per image; each affinity column depends only on its own
    text, so adding texts never perturbs existing columns."""
    images = list(images)
    texts = list(texts)
    if not images or not texts:
        raise InputError("retrieval needs at least one image and one text")
    with torch.no_grad():
        img = torch.stack([image_embedding(model, im) for im in images])
        img = F.normalize(img, dim=-1)
        columns = []
        for text in texts:
            tokens = tokenize(text, vocab, model.text_encoder.max_len)
            pooled = model.text_encoder.encode(tokens).pooled
            txt = F.normalize(pooled, dim=-1)
            columns.append((img @ txt).numpy())
    affinity = np.stack(columns, axis=1)
    image_rankings = tuple(
        tuple(int(i) for i in np.lexsort((np.arange(len(images)), -affinity[:, t])))
        for t in range(len(texts))
    )
    text_rankings = tuple(
        tuple(int(t) for t in np.lexsort((np.arange(len(texts)), -affinity[i, :])))
        for i in range(len(images))
    )
    return RetrievalRanking(affinity, image_rankings, text_rankings)


@dataclass
class CaptionResult:
    tokens: tuple[int, ...]
    text: str
    step_logprobs: tuple[float, ...]


def _next_token_logprobs(
    model: XDecoder,
    pyramid,
    pixel_map,
    prefix_ids: tuple[int, ...],
    forced_mask: torch.Tensor | None,
) -> torch.Tensor:
    """Log-probabilities over the vocabulary for the token after the prefix."""
    n_max = model.text_encoder.max_len
    padded = prefix_ids + (PAD_ID,) * (n_max - len(prefix_ids))
    tokens = TokenSequence(ids=padded, length=len(prefix_ids))
    enc = model.text_encoder.encode(tokens)
    out = model.decode(
        pyramid,
        pixel_map,
        TaskMode.CAPTIONING,
        text_states=enc.states,
        forced_mask=forced_mask,
    )
    logits = out.text_semantics[-1] @ model.text_encoder.token_embed.weight.transpose(0, 1)
    logits = logits.clone()
    logits[PAD_ID] = float("-inf")  # PAD is never a legal emission
    return torch.log_softmax(logits, dim=-1)


def generate_caption(
    model: XDecoder,
    image: np.ndarray,
    vocab: Vocabulary,
    max_len: int | None = None,
    beam_size: int = 5,
    forced_mask: torch.Tensor | None = None,
) -> CaptionResult:
    """Autoregressive decoding from [BOS]. beam_size=1 is greedy argmax;
    larger beams keep the best candidates by mean per-token log-probability.
    Stops at EOS or max_len total tokens."""
    if beam_size < 1:
        raise InputError("beam_size must be >= 1")
    n_max = model.text_encoder.max_len
    if max_len is None:
        max_len = n_max
    if not (2 <= max_len <= n_max):
        raise InputError(f"max_len must be in [2, {n_max}]")
    with torch.no_grad():
        pyramid, pixel_map = encode_single(model, image)
        # beams: (ids, per-step logprobs, finished)
        beams: list[tuple[tuple[int, ...], tuple[float, ...], bool]] = [
            ((BOS_ID,), (), False)
        ]
        while any(not fin for _, _, fin in beams):
            candidates: list[tuple[float, int, tuple, tuple, bool]] = []
            arrival = 0
            for ids, lps, finished in beams:
                if finished:
                    score = sum(lps) / len(lps) if lps else 0.0
                    candidates.append((score, arrival, ids, lps, True))
                    arrival += 1
                    continue
                logprobs = _next_token_logprobs(model, pyramid, pixel_map, ids, forced_mask)
                for tok in range(logprobs.shape[0]):
                    lp = float(logprobs[tok])
                    if lp == float("-inf"):
                        continue
                    new_ids = ids + (tok,)
                    new_lps = lps + (lp,)
                    done = tok == EOS_ID or len(new_ids) >= max_len
                    score = sum(new_lps) / len(new_lps)
                    candidates.append((score, arrival, new_ids, new_lps, done))
                    arrival += 1
            candidates.sort(key=lambda c: (-c[0], c[1]))
            beams = [(ids, lps, fin) for _, _, ids, lps, fin in candidates[:beam_size]]
    ids, lps, _ = beams[0]
    return CaptionResult(tokens=ids, text=detokenize(ids, vocab), step_logprobs=lps)


@dataclass
class VqaResult:
    index: int
    answer: str
    scores: np.ndarray


def run_vqa(
    model: XDecoder,
    image: np.ndarray,
    question: str,
    answer_set,
    vocab: Vocabulary,
    head: torch.Tensor | None = None,
) -> VqaResult:
    """Closed-set answer classification from the last text-query semantic
    row of a VQA-mode decode. The scoring head is task-specific and defaults
    to zeros (pretraining never learns it), giving the tie-rule answer."""
    answers = list(answer_set)
    if not answers:
        raise InputError("answer set is empty")
    if not question.strip():
        raise InputError("empty question")
    with torch.no_grad():
        tokens = tokenize(question, vocab, model.text_encoder.max_len)
        enc = model.text_encoder.encode(tokens)
        pyramid, pixel_map = encode_single(model, image)
        out = model.decode(pyramid, pixel_map, TaskMode.VQA, text_states=enc.states)
        row = out.semantics[-1]
        if head is None:
            head = torch.zeros(len(answers), row.shape[0], dtype=row.dtype)
        if head.shape != (len(answers), row.shape[0]):
            raise InputError(
                f"head shape {tuple(head.shape)} != ({len(answers)}, {row.shape[0]})"
            )
        scores = head @ row
        index = int(scores.argmax())
    return VqaResult(index=index, answer=answers[index], scores=scores.numpy())


def compose_referring_caption(
    model: XDecoder,
    image: np.ndarray,
    word: str,
    vocab: Vocabulary,
    beam_size: int = 5,
) -> tuple[ReferResult, CaptionResult]:
    """Ground a word, then caption with cross-attention confined to the
    grounded region."""
    if any(w not in vocab for w in word.lower().split()):
        raise InputError(f"word {word!r} not in the vocabulary")
    refer = referring_segment(model, image, word, vocab)
    forced = torch.from_numpy(refer.mask)
    caption = generate_caption(model, image, vocab, beam_size=beam_size, forced_mask=forced)
    return refer, caption


def compose_region_retrieval(
    model: XDecoder, images, phrase: str, vocab: Vocabulary
) -> tuple[int, ReferResult]:
    """Retrieve the best image for the phrase, then ground the phrase in it."""
    images = list(images)
    ranking = run_retrieval(model, images, [phrase], vocab)
    best = ranking.image_rankings[0][0]
    return best, referring_segment(model, images[best], phrase, vocab)


def build_concepts(model: XDecoder, names, vocab: Vocabulary) -> ConceptEmbeddingTable:
    with torch.no_grad():
        return encode_concepts(model.text_encoder, names, vocab)


def evaluate_model(
    model: XDecoder,
    dataset: Dataset,
    tasks=ALL_TASKS,
    beam_size: int = 5,
    concept_names=None,
) -> MetricReport:
    """Run the requested tasks over a dataset split and aggregate metrics.

    Panoptic counts aggregate dataset-wide (standard PQ); semantic IoU pools
    intersections/unions per category over all samples; instance AP pools
    all scored masks into one PR curve (gts keyed per sample); retrieval
    pairs every image with its own caption.
    """
    unknown = set(tasks) - set(ALL_TASKS)
    if unknown:
        raise InputError(f"unknown eval tasks: {sorted(unknown)}")
    if len(dataset) == 0:
        raise InputError("empty dataset")
    names = list(concept_names) if concept_names is not None else list(dataset.categories)
    cat_index = {name: i for i, name in enumerate(names)}
    vocab = dataset.vocab
    concepts = build_concepts(model, names, vocab)
    num_real = len(names)  # background row excluded by construction

    report = MetricReport(counts={"samples": len(dataset)})
    want_seg = any(t in tasks for t in SEG_TASKS)

    pq_stats = np.zeros(4)  # iou_sum, tp, fp, fn
    sem_inter = np.zeros(num_real, dtype=np.int64)
    sem_union = np.zeros(num_real, dtype=np.int64)
    inst_preds: list[tuple[np.ndarray, tuple, float]] = []
    inst_gts: list[tuple[np.ndarray, tuple]] = []
    refer_pairs: list[tuple[np.ndarray, np.ndarray]] = []
    cap_exact: list[float] = []
    cap_token: list[float] = []

    for idx in range(len(dataset)):
        sample = dataset.sample(idx)
        size = sample.segment_map.shape
        if want_seg:
            with torch.no_grad():
                pyramid, pixel_map = encode_single(model, sample.image)
                out = model.decode(pyramid, pixel_map, TaskMode.GENERIC_SEG)
            if "panoptic" in tasks:
                pred = panoptic_inference(out, concepts, size)
                pq_stats += _pq_sample_stats(pred, sample, names)
            if "semantic" in tasks:
                sem_map = semantic_inference(out, concepts, size)
                gt_map = _gt_class_map(sample, cat_index)
                for c in range(num_real):
                    p = sem_map == c
                    g = gt_map == c
                    sem_inter[c] += int(np.count_nonzero(p & g))
                    sem_union[c] += int(np.count_nonzero(p | g))
            if "instance" in tasks:
                canvas_idx = cat_index.get(CANVAS_CATEGORY)
                for mask, cat, score in instance_inference(out, concepts, size):
                    if cat == canvas_idx:
                        continue
                    inst_preds.append((mask, (idx, cat), score))
                for sid, cat_name in sample.segments:
                    if cat_name == CANVAS_CATEGORY:
                        continue
                    inst_gts.append((sample.segment_map == sid, (idx, cat_index[cat_name])))
        if "referring" in tasks:
            for phrase, sid in sample.referring:
                result = referring_segment(model, sample.image, phrase, vocab)
                refer_pairs.append((result.mask, sample.segment_map == sid))
        if "caption" in tasks:
            result = generate_caption(model, sample.image, vocab, beam_size=beam_size)
            exact, token = caption_metrics(result.text, [sample.caption])
            cap_exact.append(exact)
            cap_token.append(token)

    if "panoptic" in tasks:
        iou_sum, tp, fp, fn = pq_stats
        denom = tp + 0.5 * fp + 0.5 * fn
        if denom == 0:
            report.pq = report.sq = report.rq = 1.0
        else:
            report.pq = float(iou_sum / denom)
            report.sq = float(iou_sum / tp) if tp else 0.0
            report.rq = float(tp / denom)
        report.counts["panoptic_segments"] = int(tp + fn)
    if "semantic" in tasks:
        present = sem_union > 0
        report.miou = float(
            np.mean(sem_inter[present] / sem_union[present])
        ) if present.any() else 1.0
    if "instance" in tasks:
        report.map50 = mask_ap(inst_preds, inst_gts)
        report.counts["instances"] = len(inst_gts)
    if "referring" in tasks:
        report.ciou = cumulative_iou(refer_pairs)
        report.counts["referring_pairs"] = len(refer_pairs)
    if "retrieval" in tasks:
        images = [dataset.sample(i).image for i in range(len(dataset))]
        captions = [dataset.sample(i).caption for i in range(len(dataset))]
        ranking = run_retrieval(model, images, captions, vocab)
        ir1, tr1 = recall_at_k(ranking.affinity, 1)
        report.ir_at_1 = ir1
        report.tr_at_1 = tr1
    if "caption" in tasks:
        report.caption_exact = float(np.mean(cap_exact))
        report.caption_token_acc = float(np.mean(cap_token))
    report.validate()
    return report


def _gt_class_map(sample, cat_index) -> np.ndarray:
    gt = np.zeros(sample.segment_map.shape, dtype=np.int32)
    for sid, cat_name in sample.segments:
        gt[sample.segment_map == sid] = cat_index[cat_name]
    return gt


def _pq_sample_stats(pred: PanopticResult, sample, names) -> np.ndarray:
    """(iou_sum, tp, fp, fn) for one sample via the metrics-module matcher."""
    pred_segments = [(sid, names[cat]) for sid, cat, _ in pred.segments]
    result = panoptic_quality(
        pred.segment_map, pred_segments, sample.segment_map, list(sample.segments)
    )
    iou_sum = result.sq * result.tp
    return np.array([iou_sum, result.tp, result.fp, result.fn], dtype=np.float64)
