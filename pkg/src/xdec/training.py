"""Pretraining loop: mixed segmentation / image-text / referring steps over
a preloaded tensor corpus, AdamW updates, JSONL step logs, and a binary
checkpoint format that round-trips parameters, optimizer moments, and RNG
state byte for byte.
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .attention import TaskMode
from .config import Config, config_from_dict, config_hash, config_to_dict
from .data import Dataset, PlanStep, plan_batches
from .decoder import XDecoder, build_model
from .encoders import encode_concepts
from .errors import FormatError, InputError, TrainingError
from .losses import ItpBatch, LossReport, RefTarget, SegTarget, total_loss
from .vocab import PAD_ID, TokenSequence, Vocabulary, tokenize

CHECKPOINT_MAGIC = b"XDEC"
CHECKPOINT_VERSION = 1
_OPT_PREFIX = "opt:"
_OPT_SLOTS = ("exp_avg", "exp_avg_sq", "step")


@dataclass
class CorpusSample:
    image: torch.Tensor  # (3, H, W)
    seg_masks: torch.Tensor  # (G, H, W) float binary, one row per segment
    seg_categories: tuple[int, ...]
    caption_tokens: TokenSequence
    caption_targets: torch.Tensor  # (length,) next-token ids, PAD at the end
    referring: tuple[tuple[TokenSequence, torch.Tensor, int], ...]


class TensorCorpus:
    """Training-ready tensors for every dataset sample, materialized once so
    the loop never touches the filesystem. `n_max` is the model's fixed text
    width; captions and phrases are tokenized to it up front."""

    def __init__(self, dataset: Dataset, n_max: int):
        self.vocab = dataset.vocab
        self.categories = tuple(dataset.categories)
        self.n_max = n_max
        cat_index = {name: i for i, name in enumerate(self.categories)}
        self.samples: list[CorpusSample] = []
        for i in range(len(dataset)):
            self.samples.append(self._convert(dataset.sample(i), cat_index))

    def _convert(self, sample, cat_index) -> CorpusSample:
        image = torch.from_numpy(
            np.ascontiguousarray(sample.image.transpose(2, 0, 1))
        ).float()
        seg_map = torch.from_numpy(sample.segment_map.astype(np.int64))
        masks = torch.stack(
            [(seg_map == sid).float() for sid, _ in sample.segments]
        )
        categories = tuple(cat_index[name] for _, name in sample.segments)
        tokens = tokenize(sample.caption, self.vocab, self.n_max)
        targets = torch.full((tokens.length,), PAD_ID, dtype=torch.long)
        targets[: tokens.length - 1] = torch.tensor(
            tokens.ids[1 : tokens.length], dtype=torch.long
        )
        referring = tuple(
            (
                tokenize(phrase, self.vocab, self.n_max),
                (seg_map == sid).float(),
                cat_index[self._segment_category(sample, sid)],
            )
            for phrase, sid in sample.referring
        )
        return CorpusSample(
            image=image,
            seg_masks=masks,
            seg_categories=categories,
            caption_tokens=tokens,
            caption_targets=targets,
            referring=referring,
        )

    @staticmethod
    def _segment_category(sample, sid: int) -> str:
        for seg_id, name in sample.segments:
            if seg_id == sid:
                return name
        raise InputError(f"referring phrase points at unknown segment {sid}")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class TrainState:
    """Everything a resumable run needs: the model (named parameters), the
    optimizer with its moments, the step counter, and the loss history."""

    model: XDecoder
    optimizer: torch.optim.AdamW
    cfg: Config
    vocab: Vocabulary
    step: int = 0
    history: list[float] = field(default_factory=list)


def create_train_state(cfg: Config, vocab: Vocabulary) -> TrainState:
    model = build_model(cfg, len(vocab))
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay
    )
    return TrainState(model=model, optimizer=optimizer, cfg=cfg, vocab=vocab)


def lr_at_step(cfg: Config, step: int) -> float:
    """Constant by default; optional step decay at fractional milestones."""
    t = cfg.train
    passed = sum(1 for p in t.lr_decay_points if step >= p * t.steps)
    return t.lr * (t.lr_decay_factor ** passed)


def _decode_image(model: XDecoder, image: torch.Tensor, mode, text_states=None):
    pyramid, pixel_map = model.encode_image(image.unsqueeze(0))
    return model.decode(
        [level[0] for level in pyramid], pixel_map[0], mode, text_states=text_states
    )


def train_step(state: TrainState, plan_step: PlanStep, corpus: TensorCorpus) -> LossReport:
    """One optimizer update. Forward passes follow the step tag; the loss
    report is computed before the update so repeating a (copied) state
    yields the identical report."""
    if plan_step.tag not in ("seg", "itp", "ref"):
        raise InputError(f"unknown step tag {plan_step.tag!r}")
    model = state.model
    cfg = state.cfg
    lr = lr_at_step(cfg, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    seg_batch = itp_batch = ref_batch = None
    concepts = None
    token_table = None
    if plan_step.tag in ("seg", "ref"):
        concepts = encode_concepts(model.text_encoder, list(corpus.categories), corpus.vocab)
    if plan_step.tag == "seg":
        seg_batch = []
        for idx in plan_step.samples:
            sample = corpus.samples[idx]
            output = _decode_image(model, sample.image, TaskMode.GENERIC_SEG)
            seg_batch.append(
                (output, SegTarget(masks=sample.seg_masks, categories=sample.seg_categories))
            )
    elif plan_step.tag == "itp":
        token_table = model.text_encoder.token_embed.weight
        image_rows, text_rows, captions = [], [], []
        for idx in plan_step.samples:
            sample = corpus.samples[idx]
            enc = model.text_encoder.encode(sample.caption_tokens)
            text_rows.append(enc.pooled)
            # one captioning decode serves both losses: latent rows never
            # attend to text rows outside referring mode, so its global row
            # equals a latent-only decode's
            captioning = _decode_image(
                model, sample.image, TaskMode.CAPTIONING, text_states=enc.states
            )
            image_rows.append(captioning.global_semantic)
            captions.append((captioning.text_semantics, sample.caption_targets))
        itp_batch = ItpBatch(
            image_embs=torch.stack(image_rows),
            text_embs=torch.stack(text_rows),
            captions=captions,
        )
    else:
        ref_batch = []
        for idx in plan_step.samples:
            sample = corpus.samples[idx]
            # every phrase of the scene, sharing one image encoding
            pyramid, pixel_map = model.encode_image(sample.image.unsqueeze(0))
            levels = [level[0] for level in pyramid]
            for tokens, mask, category in sample.referring:
                enc = model.text_encoder.encode(tokens)
                output = model.decode(
                    levels, pixel_map[0], TaskMode.REFERRING_SEG, text_states=enc.states
                )
                ref_batch.append((output, RefTarget(mask=mask, category=category)))

    report = total_loss(
        seg_batch,
        itp_batch,
        ref_batch,
        concepts,
        token_table,
        model.clamped_logit_scale(),
        weights=cfg.loss,
        deep_supervision=cfg.train.deep_supervision,
        match_weights=cfg.match,
    )
    total = report.total
    if not torch.isfinite(total):
        raise TrainingError(
            f"non-finite loss at step {state.step} ({plan_step.tag}): {report.terms()}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    state.history.append(float(total.detach()))
    return report


def _write_entry(fh, name: str, tensor: torch.Tensor) -> None:
    data = tensor.detach().to(torch.float32).contiguous()
    name_bytes = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_bytes)))
    fh.write(name_bytes)
    fh.write(struct.pack("<B", data.dim()))
    for dim in data.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(data.numpy().astype("<f4").tobytes())


def checkpoint_save(state: TrainState, path: str) -> None:
    """Binary layout: magic, u32 version, u32 entry count; each entry is a
    u16-length UTF-8 name, u8 rank, rank u32 dims, little-endian f32 data;
    then u32 metadata length and a JSON blob."""
    entries: list[tuple[str, torch.Tensor]] = list(state.model.state_dict().items())
    opt_state = state.optimizer.state_dict()["state"]
    names = [name for name, _ in state.model.named_parameters()]
    # canonical (parameter) order; the live dict is in first-touched order
    for index, slots in sorted(opt_state.items()):
        for slot in _OPT_SLOTS:
            entries.append((f"{_OPT_PREFIX}{names[index]}:{slot}", slots[slot]))
    metadata = {
        "step": state.step,
        "seed": state.cfg.train.seed,
        "config_hash": config_hash(state.cfg),
        "config": config_to_dict(state.cfg),
        "vocabulary": state.vocab.to_dict(),
        "torch_rng": torch.get_rng_state().numpy().tobytes().hex(),
        "loss_history": state.history,
    }
    blob = json.dumps(metadata).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            _write_entry(fh, name, tensor)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _read_checkpoint(path: str):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    reader = _Reader(data)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    entries: dict[str, torch.Tensor] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u16()).decode("utf-8")
        rank = reader.u8()
        shape = tuple(reader.u32() for _ in range(rank))
        count = math.prod(shape)
        payload = reader.take(4 * count)
        array = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        entries[name] = torch.from_numpy(array)
    blob = reader.take(reader.u32())
    if reader.pos != len(data):
        raise FormatError(f"{path}: trailing bytes after metadata")
    try:
        metadata = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: metadata is not valid JSON: {exc}") from exc
    return entries, metadata


def checkpoint_load(path: str) -> TrainState:
    entries, metadata = _read_checkpoint(path)
    for key in ("step", "seed", "config_hash", "config", "vocabulary"):
        if key not in metadata:
            raise FormatError(f"{path}: metadata missing {key!r}")
    cfg = config_from_dict(metadata["config"])
    if config_hash(cfg) != metadata["config_hash"]:
        raise FormatError(f"{path}: config hash mismatch")
    vocab = Vocabulary(metadata["vocabulary"])
    state = create_train_state(cfg, vocab)
    state.step = int(metadata["step"])
    state.history = [float(v) for v in metadata.get("loss_history", [])]

    param_entries = {k: v for k, v in entries.items() if not k.startswith(_OPT_PREFIX)}
    missing = set(state.model.state_dict()) - set(param_entries)
    extra = set(param_entries) - set(state.model.state_dict())
    if missing or extra:
        raise FormatError(
            f"{path}: parameter names do not match the config "
            f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})"
        )
    with torch.no_grad():
        state.model.load_state_dict(param_entries)

    names = [name for name, _ in state.model.named_parameters()]
    opt_sd = state.optimizer.state_dict()
    opt_entries: dict[int, dict] = {}
    for index, name in enumerate(names):
        slots = {}
        for slot in _OPT_SLOTS:
            key = f"{_OPT_PREFIX}{name}:{slot}"
            if key in entries:
                slots[slot] = entries[key]
        if len(slots) == len(_OPT_SLOTS):
            opt_entries[index] = slots
        elif slots:
            raise FormatError(f"{path}: incomplete optimizer moments for {name}")
    if opt_entries:
        opt_sd["state"] = opt_entries
        state.optimizer.load_state_dict(opt_sd)

    if "torch_rng" in metadata:
        rng = torch.from_numpy(
            np.frombuffer(bytes.fromhex(metadata["torch_rng"]), dtype=np.uint8).copy()
        )
        torch.set_rng_state(rng)
    return state


def run_training(
    cfg: Config,
    dataset: Dataset,
    out_dir: str,
    resume: str | None = None,
    checkpoint_name: str = "checkpoint.xdec",
    log_name: str = "train_log.jsonl",
) -> TrainState:
    """Full run: plan every step from the config, execute from scratch or
    from a checkpoint, append one JSONL record per step, save the final
    checkpoint. Returns the final state."""
    os.makedirs(out_dir, exist_ok=True)
    corpus = TensorCorpus(dataset, cfg.model.max_text_len)
    if resume is not None:
        state = checkpoint_load(resume)
        if config_hash(state.cfg) != config_hash(cfg):
            raise InputError("resume checkpoint was trained with a different config")
    else:
        state = create_train_state(cfg, corpus.vocab)
    plan = plan_batches(len(corpus), cfg.train, cfg.train.seed)
    log_path = os.path.join(out_dir, log_name)
    ckpt_path = os.path.join(out_dir, checkpoint_name)
    mode = "a" if resume is not None else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        while state.step < len(plan.steps):
            plan_step = plan.steps[state.step]
            started = time.perf_counter()
            report = train_step(state, plan_step, corpus)
            record = {
                "step": state.step,
                "tag": plan_step.tag,
                "losses": report.terms(),
                "lr": lr_at_step(cfg, state.step - 1),
                "wall_ms": round((time.perf_counter() - started) * 1000.0, 3),
            }
            log.write(json.dumps(record) + "\n")
            if state.step % max(cfg.train.log_every, 1) == 0 or state.step == len(
                plan.steps
            ):
                log.flush()
    checkpoint_save(state, ckpt_path)
    return state
