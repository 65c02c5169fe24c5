"""Byte-level causal transformer decoder: the unified text interface.

Vocabulary is the 256 raw bytes plus BOS/EOS/PAD/MEDIA specials. Media slots
in a token sequence expand in place into their bound media-token vectors, so
classification and generation both run as next-token prediction over one
interleaved stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import MEDIA_MARKER, ValidationError
from .encoders import MediaTokens
from .tensor import (
    DTYPE,
    Tensor,
    UsageError,
    concat,
    cross_entropy,
    embedding,
    gelu,
    getitem,
    layer_norm,
    log_softmax_np,
    matmul,
    pad_stack,
    reshape,
    softmax,
    transpose,
)

BOS, EOS, PAD, MEDIA = 256, 257, 258, 259
VOCAB_SIZE = 260

NEG_INF = -1e9  # finite mask constant keeps every activation finite


class LengthError(ValueError):
    """Expanded sequence exceeds the decoder context."""


@dataclass
class DecoderConfig:
    d_model: int = 128
    heads: int = 4
    layers: int = 4
    context: int = 512

    def validate(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_text(ids) -> str:
    """Bytes to text; invalid UTF-8 is escaped as \\xNN, specials dropped."""
    raw = bytes(i for i in ids if 0 <= i < 256)
    return raw.decode("utf-8", errors="backslashreplace")


@dataclass
class TokenSequence:
    """Interleaved text ids and media placeholders plus the loss mask.

    ids holds MEDIA at each media slot; blocks[j] is bound to media_slots[j].
    loss_mask marks answer-region positions (the prediction targets).
    """

    ids: list[int]
    media_slots: list[int] = field(default_factory=list)
    blocks: list[MediaTokens] = field(default_factory=list)
    loss_mask: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if len(self.media_slots) != len(self.blocks):
            raise UsageError(
                f"{len(self.media_slots)} media slots but {len(self.blocks)} media blocks"
            )
        if not self.loss_mask:
            self.loss_mask = [False] * len(self.ids)
        if len(self.loss_mask) != len(self.ids):
            raise UsageError("loss_mask length does not match ids")

    @property
    def expanded_length(self) -> int:
        return len(self.ids) + sum(b.tokens.shape[0] - 1 for b in self.blocks)


def build_sequence(prompt_text: str, media: list[MediaTokens],
                   answer_text: str | None = None, close_answer: bool = True) -> TokenSequence:
    """BOS + prompt (media markers -> MEDIA ids) + optional answer bytes + EOS.

    Only answer positions (and the closing EOS) carry loss_mask.
    """
    ids: list[int] = [BOS]
    mask: list[bool] = [False]
    slots: list[int] = []
    cursor = 0
    while True:
        hit = prompt_text.find(MEDIA_MARKER, cursor)
        if hit < 0:
            break
        seg = encode_text(prompt_text[cursor:hit])
        ids.extend(seg)
        mask.extend([False] * len(seg))
        slots.append(len(ids))
        ids.append(MEDIA)
        mask.append(False)
        cursor = hit + len(MEDIA_MARKER)
    seg = encode_text(prompt_text[cursor:])
    ids.extend(seg)
    mask.extend([False] * len(seg))
    if len(slots) != len(media):
        raise UsageError(f"prompt has {len(slots)} media markers but {len(media)} blocks given")
    if answer_text is not None:
        ans = encode_text(answer_text)
        ids.extend(ans)
        mask.extend([True] * len(ans))
        if close_answer:
            ids.append(EOS)
            mask.append(True)
    return TokenSequence(ids=ids, media_slots=slots, blocks=list(media), loss_mask=mask)


class Decoder:
    """Pre-LN causal transformer over the expanded token/media stream."""

    def __init__(self, model, cfg: DecoderConfig):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        p = model.params
        d = cfg.d_model
        p.add("decoder.tok.w", (VOCAB_SIZE, d))
        p.add("decoder.pos.w", (cfg.context, d))
        for i in range(cfg.layers):
            pre = f"decoder.block{i}"
            p.add(f"{pre}.ln1.g", (d,), init="ones")
            p.add(f"{pre}.ln1.b", (d,), init="zeros")
            for proj in ("wq", "wk", "wv", "wo"):
                p.add(f"{pre}.attn.{proj}", (d, d))
            for b in ("bq", "bk", "bv", "bo"):
                p.add(f"{pre}.attn.{b}", (d,), init="zeros")
            p.add(f"{pre}.ln2.g", (d,), init="ones")
            p.add(f"{pre}.ln2.b", (d,), init="zeros")
            p.add(f"{pre}.mlp.w1", (d, 4 * d))
            p.add(f"{pre}.mlp.b1", (4 * d,), init="zeros")
            p.add(f"{pre}.mlp.w2", (4 * d, d))
            p.add(f"{pre}.mlp.b2", (d,), init="zeros")
        p.add("decoder.final.g", (d,), init="ones")
        p.add("decoder.final.b", (d,), init="zeros")
        p.add("decoder.head.w", (d, VOCAB_SIZE))
        p.add("decoder.head.b", (VOCAB_SIZE,), init="zeros")

    # -- expansion ----------------------------------------------------------

    def _expand(self, seq: TokenSequence):
        """Replace media ids by their bound vectors; returns (embeddings,
        expanded ids, expanded loss mask)."""
        tok = self.model.params["decoder.tok.w"]
        pieces = []
        ids_out: list[int] = []
        mask_out: list[bool] = []
        cursor = 0
        for slot, block in zip(seq.media_slots, seq.blocks):
            if slot > cursor:
                seg = seq.ids[cursor:slot]
                pieces.append(embedding(tok, seg))
                ids_out.extend(seg)
                mask_out.extend(seq.loss_mask[cursor:slot])
            n = block.tokens.shape[0]
            pieces.append(block.tokens)
            ids_out.extend([MEDIA] * n)
            mask_out.extend([False] * n)
            cursor = slot + 1
        if cursor < len(seq.ids):
            seg = seq.ids[cursor:]
            pieces.append(embedding(tok, seg))
            ids_out.extend(seg)
            mask_out.extend(seq.loss_mask[cursor:])
        emb = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
        return emb, np.array(ids_out, dtype=np.int64), np.array(mask_out, dtype=bool)

    # -- forward ------------------------------------------------------------

    def forward(self, seqs: list[TokenSequence]):
        """Batched causal forward; returns (logits [B, Lmax, V], targets [B, Lmax],
        lengths). targets hold next-token ids at loss positions, -1 elsewhere."""
        rows, all_ids, all_masks = [], [], []
        for seq in seqs:
            emb, ids, lmask = self._expand(seq)
            if len(ids) > self.cfg.context:
                raise LengthError(
                    f"expanded length {len(ids)} exceeds context {self.cfg.context}"
                )
            rows.append(emb)
            all_ids.append(ids)
            all_masks.append(lmask)
        lengths = [len(i) for i in all_ids]
        lmax = max(lengths)
        h = pad_stack(rows, lmax)
        pos = getitem(self.model.params["decoder.pos.w"], slice(0, lmax))
        h = h + pos

        causal = np.triu(np.full((lmax, lmax), NEG_INF, dtype=DTYPE), k=1)
        mask = np.broadcast_to(causal, (len(seqs), 1, lmax, lmax)).copy()
        for b, ln in enumerate(lengths):
            mask[b, :, :, ln:] = NEG_INF
        amask = Tensor(mask)

        for i in range(self.cfg.layers):
            h = h + self._attention(f"decoder.block{i}", h, amask)
            h = h + self._mlp(f"decoder.block{i}", h)
        h = layer_norm(h, self.model.params["decoder.final.g"], self.model.params["decoder.final.b"])
        logits = self.model.linear("decoder.head.w", h, "decoder.head.b")

        targets = np.full((len(seqs), lmax), -1, dtype=np.int64)
        for b, (ids, lmask) in enumerate(zip(all_ids, all_masks)):
            nxt = np.flatnonzero(lmask)
            nxt = nxt[nxt > 0]
            targets[b, nxt - 1] = ids[nxt]
        return logits, targets, lengths

    def _attention(self, pre: str, h: Tensor, amask: Tensor) -> Tensor:
        b, l, d = h.shape
        nh = self.cfg.heads
        dh = d // nh
        x = layer_norm(h, self.model.params[f"{pre}.ln1.g"], self.model.params[f"{pre}.ln1.b"])
        q = self.model.linear(f"{pre}.attn.wq", x, f"{pre}.attn.bq")
        k = self.model.linear(f"{pre}.attn.wk", x, f"{pre}.attn.bk")
        v = self.model.linear(f"{pre}.attn.wv", x, f"{pre}.attn.bv")
        q = transpose(reshape(q, (b, l, nh, dh)), (0, 2, 1, 3))
        k = transpose(reshape(k, (b, l, nh, dh)), (0, 2, 1, 3))
        v = transpose(reshape(v, (b, l, nh, dh)), (0, 2, 1, 3))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        scores = scores + amask
        attn = softmax(scores, axis=-1)
        ctx = matmul(attn, v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, l, d))
        return self.model.linear(f"{pre}.attn.wo", ctx, f"{pre}.attn.bo")

    def _mlp(self, pre: str, h: Tensor) -> Tensor:
        x = layer_norm(h, self.model.params[f"{pre}.ln2.g"], self.model.params[f"{pre}.ln2.b"])
        x = gelu(self.model.linear(f"{pre}.mlp.w1", x, f"{pre}.mlp.b1"))
        return self.model.linear(f"{pre}.mlp.w2", x, f"{pre}.mlp.b2")


# ---------------------------------------------------------------------------
# losses and decoding


def sequence_loss(model, seqs: list[TokenSequence]):
    """Token-pooled mean cross-entropy over every loss-masked position."""
    logits, targets, _ = model.decoder.forward(seqs)
    b, l, v = logits.shape
    flat = reshape(logits, (b * l, v))
    return cross_entropy(flat, targets.reshape(-1), ignore_index=-1)


def label_loss(model, prompt_text: str, media: list[MediaTokens], gold: str, options: list[str]):
    """Classification loss: cross-entropy over the gold label's bytes + EOS."""
    if gold not in options:
        raise ValidationError(f"gold label {gold!r} not among options {options}")
    seq = build_sequence(prompt_text, media, answer_text=gold)
    return sequence_loss(model, [seq])


def score_options(model, prompt_text: str, media: list[MediaTokens], options: list[str]) -> np.ndarray:
    """Total log-probability of each option's byte sequence (+EOS) as the answer.

    The predicted class is argmax; ties resolve to the lowest option index.
    """
    seqs = [build_sequence(prompt_text, media, answer_text=o) for o in options]
    logits, targets, _ = model.decoder.forward(seqs)
    logp = log_softmax_np(logits.data, axis=-1)
    scores = np.zeros(len(options))
    for i in range(len(options)):
        idx = np.flatnonzero(targets[i] >= 0)
        scores[i] = logp[i, idx, targets[i, idx]].sum()
    return scores


def generate_greedy(model, prompt: TokenSequence, max_new: int) -> list[int]:
    """Argmax decoding (ties -> lowest token id); stops at EOS or max_new."""
    if max_new < 0:
        raise UsageError("max_new must be >= 0")
    if prompt.expanded_length + max(1, max_new) > model.decoder.cfg.context:
        raise LengthError("prompt leaves no room for new tokens")
    out: list[int] = []
    seq = TokenSequence(
        ids=list(prompt.ids),
        media_slots=list(prompt.media_slots),
        blocks=list(prompt.blocks),
        loss_mask=[False] * len(prompt.ids),
    )
    for _ in range(max_new):
        logits, _, lengths = model.decoder.forward([seq])
        nxt = int(np.argmax(logits.data[0, lengths[0] - 1]))
        out.append(nxt)
        if nxt == EOS:
            break
        seq.ids.append(nxt)
        seq.loss_mask.append(False)
    return out
