"""Feature encoding, frozen projection, trainable alignment, and loss.

The only trainable parameters in the whole system live in
``AlignmentLayer``; the projection head and decoder are frozen,
seed-deterministic stubs. All math is double precision so the gradient
checks at 1e-5 tolerance are meaningful.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .decoder import Decoder
from .errors import (
    DimensionMismatchError,
    EmptyMaskError,
    MalformedLineError,
    SequenceTooLongError,
    UnresolvedImageRefError,
)
from .instruction import BOS, EOS, IMG_SLOT, TrainingExample, Vocabulary


@dataclass(frozen=True)
class ModelConfig:
    d_raw: int = 64
    v_dim: int = 512
    d_model: int = 32
    vocab_size: int = 512
    max_len: int = 128
    decoder_kind: str = "transformer_tier1"
    n_layers: int = 2
    n_heads: int = 2
    grid_size: int = 8
    num_img_tokens: int = 1
    projection_seed: int = 1
    decoder_seed: int = 2
    alignment_seed: int = 3

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class ImageFeatures:
    vector: np.ndarray
    source: str


class FeatureTable:
    """Precomputed feature rows: line-delimited {image_id, vector}."""

    def __init__(self, rows: dict[str, np.ndarray]):
        self.rows = rows

    @classmethod
    def load(cls, path: str | Path) -> "FeatureTable":
        rows: dict[str, np.ndarray] = {}
        with Path(path).open("r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    rows[obj["image_id"]] = np.asarray(obj["vector"], dtype=np.float64)
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise MalformedLineError(line_no, str(exc)) from exc
        return cls(rows)

    def get(self, image_id: str) -> np.ndarray | None:
        return self.rows.get(image_id)


def grid_features(pixels: np.ndarray, grid_size: int) -> np.ndarray:
    """Mean pixel intensity per cell of a g x g grid, scaled to [0, 1]."""
    blocks_r = np.array_split(pixels.astype(np.float64), grid_size, axis=0)
    out = np.empty(grid_size * grid_size, dtype=np.float64)
    i = 0
    for block_r in blocks_r:
        for block in np.array_split(block_r, grid_size, axis=1):
            out[i] = block.mean() / 255.0 if block.size else 0.0
            i += 1
    return out


def encode_image(
    image_ref: str,
    config: ModelConfig,
    features: FeatureTable | None = None,
    image_root: str | Path | None = None,
) -> ImageFeatures:
    """Resolve a ref to a stored feature row or a grayscale image file."""
    if features is not None:
        vec = features.get(image_ref)
        if vec is not None:
            if vec.shape != (config.d_raw,):
                raise DimensionMismatchError(
                    f"feature row {image_ref!r} has dim {vec.shape[0]}, expected {config.d_raw}"
                )
            if not np.all(np.isfinite(vec)):
                raise DimensionMismatchError(f"feature row {image_ref!r} has non-finite entries")
            return ImageFeatures(vector=vec, source=image_ref)
    path = Path(image_root) / image_ref if image_root else Path(image_ref)
    if not path.is_file():
        raise UnresolvedImageRefError(image_ref)
    if config.d_raw != config.grid_size**2:
        raise DimensionMismatchError(
            f"d_raw {config.d_raw} is not grid_size^2 = {config.grid_size**2}"
        )
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("L"))
    return ImageFeatures(vector=grid_features(pixels, config.grid_size), source=image_ref)


class ProjectionHead:
    """Frozen linear map from raw features to the shared feature space."""

    def __init__(self, d_raw: int, v_dim: int, seed: int):
        rng = np.random.default_rng(seed)
        self.matrix = rng.normal(0.0, 1.0 / math.sqrt(d_raw), size=(v_dim, d_raw))
        self.matrix.flags.writeable = False
        self.seed = seed

    def project(self, features: ImageFeatures | np.ndarray) -> np.ndarray:
        vec = features.vector if isinstance(features, ImageFeatures) else features
        if vec.shape != (self.matrix.shape[1],):
            raise DimensionMismatchError(
                f"feature dim {vec.shape} incompatible with head {self.matrix.shape}"
            )
        return self.matrix @ vec

    def fingerprint(self) -> str:
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()


class AlignmentLayer:
    """The one trainable component: features -> decoder embedding space."""

    def __init__(self, v_dim: int, d_model: int, seed: int | None = None):
        if seed is None:
            self.weight = np.zeros((v_dim, d_model))
            self.bias = np.zeros(d_model)
        else:
            rng = np.random.default_rng(seed)
            self.weight = rng.normal(0.0, 1.0 / math.sqrt(v_dim), size=(v_dim, d_model))
            self.bias = np.zeros(d_model)

    def align(self, v_p: np.ndarray) -> np.ndarray:
        if v_p.shape != (self.weight.shape[0],):
            raise DimensionMismatchError(
                f"projected dim {v_p.shape} incompatible with alignment {self.weight.shape}"
            )
        return v_p @ self.weight + self.bias


def masked_cross_entropy(
    logits: np.ndarray, target_ids, loss_mask
) -> float:
    loss, _ = masked_cross_entropy_with_grad(logits, target_ids, loss_mask)
    return loss


def masked_cross_entropy_with_grad(logits: np.ndarray, target_ids, loss_mask):
    """Mean next-token loss over masked targets, plus d loss / d logits.

    A true mask entry at position j means token j is a label: its
    contribution is -log softmax(logits[j-1])[target[j]]. Positions with
    a false mask contribute nothing, and their targets are never read.
    """
    targets = np.asarray(target_ids, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if len(targets) != logits.shape[0] or len(mask) != logits.shape[0]:
        raise ValueError("logits, targets, and mask lengths must agree")
    if not mask.any():
        raise EmptyMaskError("loss mask selects no positions")
    if mask[0]:
        raise EmptyMaskError("position 0 has no preceding logits to predict it")
    label_pos = np.nonzero(mask)[0]
    pred_pos = label_pos - 1
    rows = logits[pred_pos]
    rows = rows - rows.max(axis=1, keepdims=True)
    exp = np.exp(rows)
    probs = exp / exp.sum(axis=1, keepdims=True)
    picked = probs[np.arange(len(label_pos)), targets[label_pos]]
    loss = float(-np.log(picked).mean())
    dlogits = np.zeros_like(logits)
    drows = probs.copy()
    drows[np.arange(len(label_pos)), targets[label_pos]] -= 1.0
    dlogits[pred_pos] = drows / len(label_pos)
    return loss, dlogits


class AlignmentModel:
    """Config-built bundle of frozen components plus the alignment layer."""

    def __init__(self, config: ModelConfig, alignment: AlignmentLayer | None = None):
        self.config = config
        self.head = ProjectionHead(config.d_raw, config.v_dim, config.projection_seed)
        self.decoder = Decoder(
            kind=config.decoder_kind,
            d_model=config.d_model,
            vocab_size=config.vocab_size,
            max_len=config.max_len,
            seed=config.decoder_seed,
            n_layers=config.n_layers,
            n_heads=config.n_heads,
        )
        self.alignment = alignment or AlignmentLayer(
            config.v_dim, config.d_model, config.alignment_seed
        )

    def _embed_example(self, token_ids, img_slots, feature_vec: np.ndarray):
        v_p = self.head.project(feature_vec)
        l_v = self.alignment.align(v_p)
        emb = self.decoder.embed(token_ids)
        for pos in img_slots:
            emb[pos] = l_v
        return emb, v_p

    def example_loss(self, example: TrainingExample, feature_vec: np.ndarray) -> float:
        emb, _ = self._embed_example(example.token_ids, example.img_slot_positions, feature_vec)
        logits, _ = self.decoder.forward(emb)
        return masked_cross_entropy(logits, example.token_ids, example.loss_mask)

    def loss_and_grads(self, example: TrainingExample, feature_vec: np.ndarray):
        """Loss plus exact gradients for the alignment weight and bias."""
        emb, v_p = self._embed_example(example.token_ids, example.img_slot_positions, feature_vec)
        logits, cache = self.decoder.forward(emb)
        loss, dlogits = masked_cross_entropy_with_grad(
            logits, example.token_ids, example.loss_mask
        )
        demb = self.decoder.backward(dlogits, cache)
        d_lv = np.zeros(self.config.d_model)
        for pos in example.img_slot_positions:
            d_lv += demb[pos]
        grad_w = np.outer(v_p, d_lv)
        grad_b = d_lv
        return loss, grad_w, grad_b

    def generate(
        self,
        feature_vec: np.ndarray,
        prompt: str,
        vocab: Vocabulary,
        max_new_tokens: int = 64,
        mode: str = "greedy",
        temperature: float = 1.0,
        rng: np.random.Generator | None = None,
    ) -> str:
        """Autoregressive decoding; greedy mode is fully deterministic."""
        ids = [BOS] + vocab.encode(prompt)
        if len(ids) > self.config.max_len:
            raise SequenceTooLongError(f"prompt of {len(ids)} tokens exceeds max_len")
        slots = [i for i, t in enumerate(ids) if t == IMG_SLOT]
        generated: list[int] = []
        for _ in range(max_new_tokens):
            if len(ids) >= self.config.max_len:
                break
            emb, _ = self._embed_example(ids, slots, feature_vec)
            logits, _ = self.decoder.forward(emb)
            last = logits[-1]
            if mode == "greedy":
                nxt = int(np.argmax(last))
            elif mode == "sample":
                if rng is None:
                    raise ValueError("sample mode needs an rng")
                scaled = last / max(temperature, 1e-8)
                scaled -= scaled.max()
                p = np.exp(scaled)
                p /= p.sum()
                nxt = int(rng.choice(len(p), p=p))
            else:
                raise ValueError(f"unknown decode mode {mode!r}")
            if nxt == EOS:
                break
            generated.append(nxt)
            ids.append(nxt)
        return vocab.decode(generated)

    def frozen_fingerprints(self) -> dict[str, str]:
        return {"projection_head": self.head.fingerprint(), "decoder": self.decoder.fingerprint()}
