import math

import numpy as np
import pytest
import torch

from xdec.attention import TaskMode
from xdec.data import Dataset
from xdec.decoder import DecoderOutput
from xdec.encoders import ConceptEmbeddingTable
from xdec.errors import InputError
from xdec.metrics import REPORT_FIELDS
from xdec.tasks import (
    ALL_TASKS,
    CaptionResult,
    PanopticResult,
    ReferResult,
    build_concepts,
    category_scores,
    compose_referring_caption,
    compose_region_retrieval,
    encode_single,
    evaluate_model,
    generate_caption,
    image_embedding,
    image_to_tensor,
    referring_segment,
    run_retrieval,
    run_vqa,
    segmentation_inference,
    upsample_mask_logits,
)
from xdec.vocab import BOS_ID, EOS_ID


@pytest.fixture(scope="module")
def eval_split(dataset_dir) -> Dataset:
    return Dataset(str(dataset_dir / "eval"))


@pytest.fixture(scope="module")
def image(train_split) -> np.ndarray:
    return train_split.sample(0).image


# --- numerics ------------------------------------------------------------------

def _random_concepts(n_categories: int, dim: int, seed: int) -> ConceptEmbeddingTable:
    g = torch.Generator().manual_seed(seed)
    names = tuple(f"thing{i}" for i in range(n_categories)) + ("background",)
    return ConceptEmbeddingTable(
        names=names, embeddings=torch.randn(n_categories + 1, dim, generator=g)
    )


def test_category_scores_sigmoid_against_background():
    dim = 4
    concepts = ConceptEmbeddingTable(
        names=("circle", "square", "background"),
        embeddings=torch.stack(
            [torch.eye(2, dim)[0], torch.eye(2, dim)[1], torch.ones(dim)]
        ),
    )
    sem = torch.tensor([[2.0, -1.0, 0.0, 0.0]])
    got = category_scores(sem, concepts)
    bg = float(sem.sum())  # all-ones background row
    want = torch.sigmoid(torch.tensor([[2.0 - bg, -1.0 - bg]]))
    assert got.shape == (1, 2)
    assert torch.allclose(got, want, atol=1e-7)


def test_category_scores_permutation_equivariant_bitwise():
    torch.manual_seed(1)
    sem = torch.randn(6, 8)
    base_concepts = _random_concepts(9, 8, seed=11)
    base = category_scores(sem, base_concepts)
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        perm = torch.randperm(9, generator=g)
        shuffled = ConceptEmbeddingTable(
            names=tuple(base_concepts.names[i] for i in perm) + ("background",),
            embeddings=torch.cat(
                [base_concepts.embeddings[perm], base_concepts.embeddings[-1:]]
            ),
        )
        assert torch.equal(category_scores(sem, shuffled), base[:, perm])


def test_category_scores_superset_leaves_columns_bitwise_equal():
    torch.manual_seed(2)
    sem = torch.randn(6, 8)
    base_concepts = _random_concepts(5, 8, seed=12)
    base = category_scores(sem, base_concepts)
    extra = torch.randn(3, 8, generator=torch.Generator().manual_seed(13))
    bigger = ConceptEmbeddingTable(
        names=base_concepts.names[:-1]
        + ("spare0", "spare1", "spare2", "background"),
        embeddings=torch.cat(
            [base_concepts.embeddings[:-1], extra, base_concepts.embeddings[-1:]]
        ),
    )
    assert torch.equal(category_scores(sem, bigger)[:, :5], base)


def test_image_to_tensor_shape_contract(image):
    tensor = image_to_tensor(image)
    assert tensor.shape == (3,) + image.shape[:2]
    with pytest.raises(InputError):
        image_to_tensor(np.zeros((4, 4)))


def test_upsample_passthrough_and_resize():
    logits = torch.randn(2, 8, 8)
    assert upsample_mask_logits(logits, (8, 8)) is logits
    assert upsample_mask_logits(logits, (32, 32)).shape == (2, 32, 32)


def test_encode_single_unbatched(model, image):
    pyramid, pixel_map = encode_single(model, image)
    assert all(level.dim() == 3 for level in pyramid)
    assert pixel_map.dim() == 3


# --- crafted segmentation outputs -------------------------------------------------

def _craft_concepts(names, embeddings):
    return ConceptEmbeddingTable(names=tuple(names), embeddings=embeddings)


def _seg_output(mask_logits, semantics):
    m = mask_logits.shape[0]
    return DecoderOutput(
        mask_logits=mask_logits,
        semantics=semantics,
        traces=(),
        mode=TaskMode.GENERIC_SEG,
        m=m,
        n=0,
    )


def test_panoptic_unanimous_winner():
    dim = 4
    k = math.log(99.0)  # sigmoid(k - 0) = 0.99 against the zero background row
    concepts = _craft_concepts(
        ("circle", "background"), torch.stack([torch.eye(1, dim)[0], torch.zeros(dim)])
    )
    semantics = torch.stack([torch.eye(1, dim)[0] * k, torch.zeros(dim)])
    mask_logits = torch.full((2, 8, 8), k)
    out = _seg_output(mask_logits, semantics)
    result = segmentation_inference(out, concepts, "panoptic", (8, 8))
    assert isinstance(result, PanopticResult)
    assert len(result.segments) == 1
    sid, cat, score = result.segments[0]
    assert (sid, cat) == (1, 0)
    assert score == pytest.approx(0.99, abs=1e-6)
    assert np.all(result.segment_map == 1)


def test_panoptic_all_background_is_void():
    dim = 4
    concepts = _craft_concepts(
        ("circle", "background"),
        torch.stack([torch.zeros(dim), torch.eye(1, dim)[0]]),
    )
    semantics = torch.stack([torch.eye(1, dim)[0] * 9.0, torch.zeros(dim)])
    out = _seg_output(torch.full((2, 8, 8), 5.0), semantics)
    result = segmentation_inference(out, concepts, "panoptic", (8, 8))
    assert result.segments == ()
    assert np.all(result.segment_map == 0)


def test_panoptic_contested_pixel_goes_to_higher_score():
    dim = 4
    concepts = _craft_concepts(
        ("circle", "background"), torch.stack([torch.eye(1, dim)[0], torch.zeros(dim)])
    )
    hi = torch.eye(1, dim)[0] * math.log(9.0)  # p = 0.9
    lo = torch.eye(1, dim)[0] * math.log(1.5)  # p = 0.6
    semantics = torch.stack([hi, lo, torch.zeros(dim)])
    mask_logits = torch.full((3, 8, 8), 6.0)  # same near-certain mask
    out = _seg_output(mask_logits, semantics)
    result = segmentation_inference(out, concepts, "panoptic", (8, 8))
    assert len(result.segments) == 1  # losing query keeps no pixels
    _, cat, score = result.segments[0]
    assert score == pytest.approx(0.9, abs=1e-6)
    assert np.all(result.segment_map == 1)


def test_semantic_split_votes():
    dim = 4
    concepts = _craft_concepts(
        ("circle", "square", "background"),
        torch.cat([torch.eye(2, dim) * 8.0, torch.zeros(1, dim)]),
    )
    semantics = torch.cat([torch.eye(2, dim), torch.zeros(1, dim)])
    mask_logits = torch.full((3, 4, 4), -9.0)
    mask_logits[0, :, :2] = 9.0  # circle query claims the left half
    mask_logits[1, :, 2:] = 9.0  # square query claims the right half
    out = _seg_output(mask_logits, semantics)
    class_map = segmentation_inference(out, concepts, "semantic", (4, 4))
    assert np.all(class_map[:, :2] == 0)
    assert np.all(class_map[:, 2:] == 1)


def test_instance_confidence_product():
    dim = 4
    k = math.log(9.0)
    concepts = _craft_concepts(
        ("circle", "background"), torch.stack([torch.eye(1, dim)[0], torch.zeros(dim)])
    )
    semantics = torch.stack([torch.eye(1, dim)[0] * k, torch.zeros(dim)])
    mask_logits = torch.full((2, 4, 4), -20.0)
    mask_logits[0, :2] = 20.0
    out = _seg_output(mask_logits, semantics)
    instances = segmentation_inference(out, concepts, "instance", (4, 4))
    assert len(instances) == 1
    mask, cat, confidence = instances[0]
    assert mask.sum() == 8
    assert cat == 0
    assert confidence == pytest.approx(0.9 * 1.0, abs=1e-4)


def test_segmentation_inference_guards():
    dim = 4
    concepts = _craft_concepts(
        ("circle", "background"), torch.zeros(2, dim)
    )
    out = _seg_output(torch.zeros(2, 4, 4), torch.zeros(2, dim))
    with pytest.raises(InputError, match="kind"):
        segmentation_inference(out, concepts, "amodal", (4, 4))
    bad_mode = DecoderOutput(
        mask_logits=out.mask_logits,
        semantics=out.semantics,
        traces=(),
        mode=TaskMode.RETRIEVAL,
        m=2,
        n=0,
    )
    with pytest.raises(InputError, match="generic"):
        segmentation_inference(bad_mode, concepts, "panoptic", (4, 4))
    with pytest.raises(InputError, match="background"):
        _craft_concepts(("circle", "square"), torch.zeros(2, dim))


# --- referring ----------------------------------------------------------------------

def test_referring_deterministic(model, vocab, image):
    a = referring_segment(model, image, "the red circle", vocab)
    b = referring_segment(model, image, "the red circle", vocab)
    assert isinstance(a, ReferResult)
    assert np.array_equal(a.mask, b.mask)
    assert a.score == b.score
    assert a.query == b.query
    assert a.mask.shape == image.shape[:2]
    assert a.mask.dtype == bool


def test_referring_rejects_empty_phrase(model, vocab, image):
    with pytest.raises(InputError):
        referring_segment(model, image, "   ", vocab)


# --- retrieval ------------------------------------------------------------------------

def test_retrieval_columns_decoupled(model, vocab, train_split):
    images = [train_split.sample(i).image for i in range(2)]
    texts = [train_split.sample(i).caption for i in range(2)]
    single = run_retrieval(model, images, texts[:1], vocab)
    both = run_retrieval(model, images, texts, vocab)
    np.testing.assert_array_equal(single.affinity[:, 0], both.affinity[:, 0])
    assert both.affinity.shape == (2, 2)


def test_retrieval_duplicate_images_tie_to_lower_index(model, vocab, image):
    ranking = run_retrieval(model, [image, image], ["a scene"], vocab)
    assert ranking.image_rankings[0] == (0, 1)


def test_retrieval_single_pair(model, vocab, image):
    ranking = run_retrieval(model, [image], ["anything"], vocab)
    assert ranking.image_rankings == ((0,),)
    assert ranking.text_rankings == ((0,),)


def test_retrieval_rankings_are_permutations(model, vocab, train_split):
    images = [train_split.sample(i).image for i in range(3)]
    texts = [train_split.sample(i).caption for i in range(3)]
    ranking = run_retrieval(model, images, texts, vocab)
    for r in ranking.image_rankings:
        assert sorted(r) == [0, 1, 2]
    for r in ranking.text_rankings:
        assert sorted(r) == [0, 1, 2]


def test_retrieval_empty_inputs(model, vocab, image):
    with pytest.raises(InputError):
        run_retrieval(model, [], ["text"], vocab)
    with pytest.raises(InputError):
        run_retrieval(model, [image], [], vocab)


def test_image_embedding_matches_retrieval_row(model, vocab, image):
    emb = image_embedding(model, image)
    assert emb.dim() == 1
    again = image_embedding(model, image)
    assert torch.equal(emb, again)


# --- captions ----------------------------------------------------------------------

def test_caption_beam_one_equals_greedy_trace(model, vocab, image, monkeypatch):
    import xdec.tasks as tasks_mod

    result = generate_caption(model, image, vocab, beam_size=1)
    # independent greedy loop over the same next-token distribution
    pyramid, pixel_map = encode_single(model, image)
    ids = (BOS_ID,)
    lps = ()
    with torch.no_grad():
        while True:
            logprobs = tasks_mod._next_token_logprobs(model, pyramid, pixel_map, ids, None)
            tok = int(logprobs.argmax())
            ids = ids + (tok,)
            lps = lps + (float(logprobs[tok]),)
            if tok == EOS_ID or len(ids) >= model.text_encoder.max_len:
                break
    assert result.tokens == ids
    assert result.step_logprobs == lps


def test_caption_stops_at_eos_or_max_len(model, vocab, image):
    result = generate_caption(model, image, vocab, max_len=6, beam_size=2)
    assert result.tokens[0] == BOS_ID
    assert result.tokens[-1] == EOS_ID or len(result.tokens) == 6
    assert all(lp <= 0.0 for lp in result.step_logprobs)
    assert len(result.step_logprobs) == len(result.tokens) - 1


def test_caption_immediate_eos(model, vocab, image, monkeypatch):
    import xdec.tasks as tasks_mod

    vocab_size = model.text_encoder.token_embed.weight.shape[0]

    def forced_eos(model_, pyramid, pixel_map, prefix_ids, forced_mask):
        out = torch.full((vocab_size,), -50.0)
        out[EOS_ID] = -0.01
        return torch.log_softmax(out, dim=-1)

    monkeypatch.setattr(tasks_mod, "_next_token_logprobs", forced_eos)
    result = generate_caption(model, image, vocab, beam_size=3)
    assert result.tokens == (BOS_ID, EOS_ID)
    assert result.text == ""


def test_caption_max_len_forced(model, vocab, image, monkeypatch):
    import xdec.tasks as tasks_mod

    vocab_size = model.text_encoder.token_embed.weight.shape[0]
    target = vocab_size - 1  # an ordinary word id, never EOS

    def forced_word(model_, pyramid, pixel_map, prefix_ids, forced_mask):
        out = torch.full((vocab_size,), -50.0)
        out[target] = -0.01
        return torch.log_softmax(out, dim=-1)

    monkeypatch.setattr(tasks_mod, "_next_token_logprobs", forced_word)
    result = generate_caption(model, image, vocab, max_len=5, beam_size=1)
    assert len(result.tokens) == 5
    assert result.tokens[1:] == (target,) * 4


def test_caption_deterministic(model, vocab, image):
    a = generate_caption(model, image, vocab, beam_size=3)
    b = generate_caption(model, image, vocab, beam_size=3)
    assert a.tokens == b.tokens
    assert a.step_logprobs == b.step_logprobs


def test_caption_argument_guards(model, vocab, image):
    with pytest.raises(InputError):
        generate_caption(model, image, vocab, beam_size=0)
    with pytest.raises(InputError):
        generate_caption(model, image, vocab, max_len=1)
    with pytest.raises(InputError):
        generate_caption(model, image, vocab, max_len=999)


# --- vqa ---------------------------------------------------------------------------

def test_vqa_default_head_tie_rule(model, vocab, image):
    result = run_vqa(model, image, "what shape is red", ["circle", "square"], vocab)
    assert result.index == 0
    assert result.answer == "circle"
    assert np.all(result.scores == 0.0)


def test_vqa_equal_rows_tie_to_first(model, vocab, image):
    dim = model.text_encoder.token_embed.weight.shape[1]
    torch.manual_seed(0)
    v = torch.randn(dim)
    head = torch.stack([v, v, v])
    result = run_vqa(model, image, "what is here", ["a", "b", "c"], vocab, head=head)
    assert result.index == 0
    assert result.scores[0] == result.scores[1] == result.scores[2]


def test_vqa_guards(model, vocab, image):
    with pytest.raises(InputError):
        run_vqa(model, image, "question", [], vocab)
    with pytest.raises(InputError):
        run_vqa(model, image, "  ", ["a"], vocab)
    with pytest.raises(InputError):
        run_vqa(model, image, "question", ["a"], vocab, head=torch.zeros(3, 3))


# --- composition ---------------------------------------------------------------------

def test_compose_referring_caption_runs(model, vocab, image):
    refer, caption = compose_referring_caption(model, image, "circle", vocab, beam_size=1)
    assert isinstance(refer, ReferResult)
    assert isinstance(caption, CaptionResult)
    assert refer.mask.shape == image.shape[:2]
    assert caption.tokens[0] == BOS_ID


def test_compose_referring_caption_rejects_unknown_word(model, vocab, image):
    with pytest.raises(InputError):
        compose_referring_caption(model, image, "zeppelin", vocab)


def test_compose_region_retrieval_single_image(model, vocab, image):
    best, refer = compose_region_retrieval(model, [image], "the circle", vocab)
    assert best == 0
    assert isinstance(refer, ReferResult)


def test_compose_region_retrieval_matches_parts(model, vocab, train_split):
    images = [train_split.sample(i).image for i in range(2)]
    best, refer = compose_region_retrieval(model, images, "a red circle", vocab)
    ranking = run_retrieval(model, images, ["a red circle"], vocab)
    assert best == ranking.image_rankings[0][0]
    direct = referring_segment(model, images[best], "a red circle", vocab)
    assert np.array_equal(refer.mask, direct.mask)


# --- evaluation ------------------------------------------------------------------------

def test_evaluate_model_full_report(model, eval_split):
    report = evaluate_model(model, eval_split, beam_size=1)
    data = report.to_dict()
    for field in REPORT_FIELDS:
        assert field in data, field
        assert 0.0 <= data[field] <= 1.0
    assert all(v > 0 for v in data["counts"].values())


def test_evaluate_model_task_subset(model, eval_split):
    report = evaluate_model(model, eval_split, tasks=("retrieval",))
    assert report.ir_at_1 is not None
    assert report.tr_at_1 is not None
    assert report.pq is None
    assert report.miou is None
    assert report.caption_exact is None


def test_evaluate_model_rejects_unknown_task(model, eval_split):
    with pytest.raises(InputError):
        evaluate_model(model, eval_split, tasks=("panoptic", "depth"))


def test_build_concepts_matches_encoder(model, vocab):
    table = build_concepts(model, ("circle", "square"), vocab)
    assert table.names[-1] == "background"
    assert table.embeddings.shape[0] == 3
    assert ALL_TASKS[0] == "panoptic"
