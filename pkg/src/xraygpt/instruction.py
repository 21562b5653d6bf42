"""Prompt templates, word-level vocabulary, and loss-masked examples.

The tokenizer is deliberately simple: lowercase, whitespace-split, with
the conversation markers kept atomic even when not space-separated.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .curation import CuratedRecord
from .errors import EmptyCorpusError

PAD, UNK, BOS, EOS, IMG_SLOT = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>", "<imgslot>")

DOCTOR_MARKER = "###doctor:"
ASSISTANT_MARKER = "###assistant:"
IMG_OPEN = "<img>"
IMG_CLOSE = "</img>"
MARKER_TOKENS = (DOCTOR_MARKER, ASSISTANT_MARKER, IMG_OPEN, IMG_CLOSE)

# "<imagefeature>" in prompt text denotes the image slot; it maps to
# IMG_SLOT at encode time rather than getting its own id.
IMG_FEATURE_ALIAS = "<imagefeature>"

_SPLIT_RE = re.compile(
    "({})".format("|".join(re.escape(m) for m in MARKER_TOKENS + (IMG_FEATURE_ALIAS,)))
)

SYSTEM_PREAMBLE = "You are a helpful healthcare virtual assistant."
PROMPT_TEMPLATE = "###Doctor: <Img><ImageFeature></Img> {instruction} ###Assistant:"

DEFAULT_INSTRUCTIONS = (
    "Describe the given chest x-ray image in detail.",
    "Are there any potential complications or risks associated with the observed "
    "abnormalities in this chest x-ray image? or the x-ray is normal.",
    "Is the overall impression provided by this chest x-ray image normal or abnormal? "
    "Answer based on the observed findings.",
)


def text_tokens(text: str) -> list[str]:
    """Lowercased token strings with conversation markers kept atomic."""
    out: list[str] = []
    for chunk in text.lower().split():
        for piece in _SPLIT_RE.split(chunk):
            if piece:
                out.append(piece)
    return out


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, token: str) -> int:
        if token == IMG_FEATURE_ALIAS:
            return IMG_SLOT
        return self.token_to_id.get(token, UNK)

    def encode(self, text: str) -> list[int]:
        return [self.encode_token(t) for t in text_tokens(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.id_to_token[i] for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(tokens[:5]) != RESERVED_TOKENS:
            raise ValueError("vocabulary file lacks the reserved token block")
        return cls(id_to_token=tokens, token_to_id={t: i for i, t in enumerate(tokens)})


def build_vocab(
    records: Sequence[CuratedRecord],
    instructions: Sequence[str] = DEFAULT_INSTRUCTIONS,
    max_size: int = 512,
    extra_texts: Sequence[str] = (),
) -> Vocabulary:
    """Most frequent ``max_size`` word tokens, ties broken lexicographically.

    Ids 0..4 are the reserved tokens, followed by the conversation
    markers; template text is always counted so prompts encode UNK-free.
    """
    if not records:
        raise EmptyCorpusError("cannot build a vocabulary from zero records")
    counts: Counter[str] = Counter()
    texts = [r.summary for r in records]
    texts.extend(instructions)
    texts.append(SYSTEM_PREAMBLE)
    texts.append(PROMPT_TEMPLATE.format(instruction=""))
    texts.extend(extra_texts)
    fixed = set(RESERVED_TOKENS) | set(MARKER_TOKENS) | {IMG_FEATURE_ALIAS}
    for text in texts:
        for tok in text_tokens(text):
            if tok not in fixed:
                counts[tok] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    id_to_token = list(RESERVED_TOKENS) + list(MARKER_TOKENS)
    id_to_token.extend(tok for tok, _ in ranked[:max_size])
    return Vocabulary(
        id_to_token=id_to_token,
        token_to_id={t: i for i, t in enumerate(id_to_token)},
    )


@dataclass(frozen=True)
class InstructionSet:
    instructions: tuple[str, ...]

    def __post_init__(self):
        if not self.instructions:
            raise ValueError("instruction set is empty")
        if any(not s for s in self.instructions):
            raise ValueError("empty instruction in set")
        if len(set(self.instructions)) != len(self.instructions):
            raise ValueError("duplicate instruction in set")

    def __len__(self) -> int:
        return len(self.instructions)


def load_instruction_set(path: str | Path) -> InstructionSet:
    """One instruction per line; blank lines and '#' comments ignored."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    kept = [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    return InstructionSet(instructions=tuple(kept))


def sample_instruction(instruction_set: InstructionSet, rng: np.random.Generator) -> str:
    """Uniform draw; determinism comes from the caller-owned generator."""
    idx = int(rng.integers(len(instruction_set)))
    return instruction_set.instructions[idx]


def build_prompt(instruction: str, with_system: bool = False) -> str:
    """The exact conversational template around one instruction."""
    if not instruction:
        raise ValueError("instruction must be non-empty")
    prompt = PROMPT_TEMPLATE.format(instruction=instruction)
    if with_system:
        return SYSTEM_PREAMBLE + " " + prompt
    return prompt


@dataclass(frozen=True)
class TrainingExample:
    token_ids: tuple[int, ...]
    img_slot_positions: tuple[int, ...]
    loss_mask: tuple[bool, ...]
    source_id: str

    def __post_init__(self):
        if len(self.loss_mask) != len(self.token_ids):
            raise ValueError("loss mask length must match token count")


def build_training_example(
    record: CuratedRecord,
    instruction: str,
    vocab: Vocabulary,
    num_img_tokens: int = 1,
) -> TrainingExample:
    """BOS + prompt (with image slots) + summary + EOS, mask on the answer.

    The loss mask is true exactly on the summary tokens and the EOS, a
    single contiguous tail block.
    """
    if num_img_tokens < 1:
        raise ValueError("num_img_tokens must be >= 1")
    if not instruction:
        raise ValueError("instruction must be non-empty")
    prompt_tokens = (
        [DOCTOR_MARKER, IMG_OPEN]
        + ["<imgslot>"] * num_img_tokens
        + [IMG_CLOSE]
        + text_tokens(instruction)
        + [ASSISTANT_MARKER]
    )
    summary_tokens = text_tokens(record.summary)
    ids = [BOS]
    ids.extend(IMG_SLOT if t == "<imgslot>" else vocab.encode_token(t) for t in prompt_tokens)
    answer_start = len(ids)
    ids.extend(vocab.encode_token(t) for t in summary_tokens)
    ids.append(EOS)
    mask = [False] * answer_start + [True] * (len(summary_tokens) + 1)
    slots = tuple(range(3, 3 + num_img_tokens))
    return TrainingExample(
        token_ids=tuple(ids),
        img_slot_positions=slots,
        loss_mask=tuple(mask),
        source_id=record.id,
    )
