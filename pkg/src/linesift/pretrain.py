"""Self-supervised pretraining: masked-statement and masked-token objectives.

The statement-level task selects 15% of the retained lines (minimum one),
then per selected line masks every token (80%), replaces the line with
random non-reserved ids (10%) or keeps it (10%). A single-layer gated
recurrent decoder, seeded with the masked statement's encoder vector,
reconstructs the original token sequence under teacher forcing; the loss
is the summed per-token cross-entropy over all selected lines (a per-token
mean is available for stable learning-rate transfer across lengths).

The token-level objective is the classic setup, kept here so the token
encoder can be warmed up on its own before joint training.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import OptimizerState, Tensor, adamw_step
from .encoding import BOS, EOS, MASK, RESERVED_TOKENS, EncodedSample
from .model import HierarchicalModel, save_bundle

__all__ = [
    "MaskedLine",
    "MaskPlan",
    "MspDecoder",
    "MlmHead",
    "DivergenceError",
    "PretrainSchedule",
    "TrainState",
    "make_mask_plan",
    "apply_mask_plan",
    "msp_loss",
    "mlm_loss",
    "pretrain_run",
]

LINE_FRACTION = 0.15
ACTION_PROBS = {"mask_all": 0.8, "randomize": 0.1, "keep": 0.1}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class MaskedLine:
    line_index: int
    action: str
    original_ids: tuple[int, ...]
    replacement_ids: tuple[int, ...]


@dataclass(frozen=True)
class MaskPlan:
    seed: int
    lines: tuple[MaskedLine, ...]


def make_mask_plan(encoded: EncodedSample, vocab_size: int, seed: int) -> MaskPlan:
    """Pick round(0.15 * L) lines (at least one) and assign 80/10/10 actions."""
    if encoded.L < 1:
        raise ValueError("cannot build a mask plan for an empty sample")
    n_reserved = len(RESERVED_TOKENS)
    if vocab_size <= n_reserved:
        raise ValueError("vocabulary has no non-reserved ids to randomize with")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    count = max(1, round(LINE_FRACTION * encoded.L))
    chosen = np.sort(rng.choice(encoded.L, size=count, replace=False))
    lines = []
    for idx in chosen:
        o, p = encoded.line_spans[int(idx)]
        original = tuple(int(t) for t in encoded.token_ids[o:p])
        draw = rng.random()
        if draw < ACTION_PROBS["mask_all"]:
            action = "mask_all"
            replacement = (MASK,) * len(original)
        elif draw < ACTION_PROBS["mask_all"] + ACTION_PROBS["randomize"]:
            action = "randomize"
            replacement = tuple(
                int(t) for t in rng.integers(n_reserved, vocab_size, len(original))
            )
        else:
            action = "keep"
            replacement = original
        lines.append(MaskedLine(int(idx), action, original, replacement))
    return MaskPlan(seed=seed, lines=tuple(lines))


def apply_mask_plan(encoded: EncodedSample, plan: MaskPlan) -> EncodedSample:
    """Mutate token ids per plan; spans, L and n are untouched."""
    ids = encoded.token_ids.copy()
    for line in plan.lines:
        o, p = encoded.line_spans[line.line_index]
        if tuple(int(t) for t in ids[o:p]) != line.original_ids:
            raise ValueError(
                f"mask plan does not match sample {encoded.id!r} at line "
                f"{line.line_index}"
            )
        ids[o:p] = line.replacement_ids
    return encoded.with_token_ids(ids)


class MspDecoder:
    """Single-layer gated (LSTM-style) decoder over the token vocabulary.

    The masked statement's encoder vector becomes the initial hidden state;
    input embeddings are shared with the token encoder's table. Optionally
    the statement vector is re-added to the input at every step.
    """

    def __init__(
        self,
        hidden: int,
        vocab_size: int,
        rng: np.random.Generator,
        max_decode_len: int = 64,
        feed_vector_each_step: bool = False,
    ):
        self.hidden = hidden
        self.vocab_size = vocab_size
        self.max_decode_len = max_decode_len
        self.feed_vector_each_step = feed_vector_each_step
        def w(shape):
            return T.parameter(rng.normal(0.0, 0.02, shape))
        self.gates = {}
        for gate in ("in", "forget", "cell", "out"):
            self.gates[gate] = (
                w((hidden, hidden)),            # input weights
                w((hidden, hidden)),            # recurrent weights
                T.parameter(np.zeros(hidden)),  # bias
            )
        self.proj_w = w((hidden, vocab_size))
        self.proj_b = T.parameter(np.zeros(vocab_size))

    def parameters(self, prefix: str = "decoder"):
        for gate, (wx, wh, b) in self.gates.items():
            yield f"{prefix}.{gate}.wx", wx
            yield f"{prefix}.{gate}.wh", wh
            yield f"{prefix}.{gate}.b", b
        yield f"{prefix}.proj_w", self.proj_w
        yield f"{prefix}.proj_b", self.proj_b

    def _step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        def gate(name, activation):
            wx, wh, b = self.gates[name]
            return activation(x @ wx + h @ wh + b)
        i = gate("in", T.sigmoid)
        f = gate("forget", T.sigmoid)
        g = gate("cell", T.tanh)
        o = gate("out", T.sigmoid)
        c_next = T.mul(f, c) + T.mul(i, g)
        return T.mul(o, T.tanh(c_next)), c_next

    def sequence_loss(
        self, statement_vector: Tensor, target_ids, token_table: Tensor
    ) -> tuple[Tensor, int, bool]:
        """Teacher-forced summed cross-entropy over [tokens..., EOS].

        Returns (loss_sum, step_count, truncated_flag).
        """
        original = [int(t) for t in target_ids]
        truncated = len(original) > self.max_decode_len
        if truncated:
            original = original[: self.max_decode_len]
        inputs = [BOS] + original
        targets = original + [EOS]
        h = statement_vector
        c = T.constant(np.zeros((1, self.hidden)))
        logit_rows = []
        for inp in inputs:
            x = T.embedding_lookup(token_table, [inp])
            if self.feed_vector_each_step:
                x = x + statement_vector
            h, c = self._step(x, h, c)
            logit_rows.append(h @ self.proj_w + self.proj_b)
        logits = T.concat_rows(logit_rows)
        mean_ce = T.cross_entropy(logits, targets)
        return T.scale(mean_ce, float(len(targets))), len(targets), truncated


def msp_loss(
    encoded: EncodedSample,
    plan: MaskPlan,
    model: HierarchicalModel,
    decoder: MspDecoder,
    per_token_mean: bool = False,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict]:
    """Reconstruction loss of every selected statement from its vector."""
    masked = apply_mask_plan(encoded, plan)
    _, statements = model.encode_program(masked, training, rng)
    total: Tensor | None = None
    tokens = 0
    truncated_lines = 0
    for line in plan.lines:
        vec = statements.rows(line.line_index, line.line_index + 1)
        loss, steps, truncated = decoder.sequence_loss(
            vec, line.original_ids, model.token_encoder.tok_emb
        )
        tokens += steps
        truncated_lines += int(truncated)
        total = loss if total is None else total + loss
    if per_token_mean:
        total = T.scale(total, 1.0 / tokens)
    return total, {"target_tokens": tokens, "truncated_lines": truncated_lines}


class MlmHead:
    """Two-layer feed-forward head from token vectors to vocabulary logits."""

    def __init__(self, hidden: int, ffn_hidden: int, vocab_size: int,
                 rng: np.random.Generator):
        self.w1 = T.parameter(rng.normal(0.0, 0.02, (hidden, ffn_hidden)))
        self.b1 = T.parameter(np.zeros(ffn_hidden))
        self.w2 = T.parameter(rng.normal(0.0, 0.02, (ffn_hidden, vocab_size)))
        self.b2 = T.parameter(np.zeros(vocab_size))

    def parameters(self, prefix: str = "mlm"):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2

    def logits(self, token_vectors: Tensor) -> Tensor:
        return T.gelu(token_vectors @ self.w1 + self.b1) @ self.w2 + self.b2


def mlm_loss(
    encoded: EncodedSample,
    model: HierarchicalModel,
    head: MlmHead,
    seed: int,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor | None, dict]:
    """Token-level masking (15%, 80/10/10 per token) over the token encoder.

    Returns (loss, info); loss is None when the sample has no maskable
    token, which callers should count and skip.
    """
    n = encoded.n
    maskable = n - 1  # the leading [CLS] is never masked
    if maskable < 1:
        return None, {"masked": 0, "skipped": True}
    vocab_size = model.config.encoder.vocab_size
    n_reserved = len(RESERVED_TOKENS)
    gen = np.random.default_rng(np.random.SeedSequence([seed, 0x313A]))
    count = max(1, round(LINE_FRACTION * maskable))
    positions = np.sort(gen.choice(np.arange(1, n), size=count, replace=False))
    ids = encoded.token_ids.copy()
    originals = ids[positions].copy()
    for pos in positions:
        draw = gen.random()
        if draw < 0.8:
            ids[pos] = MASK
        elif draw < 0.9:
            ids[pos] = int(gen.integers(n_reserved, vocab_size))
    masked = encoded.with_token_ids(ids)
    token_vectors = model.encode_tokens(masked, training, rng)
    picked = T.gather_rows(token_vectors, positions)
    loss = T.cross_entropy(head.logits(picked), originals)
    return loss, {"masked": int(count), "skipped": False}


# -- training loop ---------------------------------------------------------


@dataclass
class PretrainSchedule:
    mlm_steps: int = 0
    msp_steps: int = 0
    batch_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 100
    per_token_mean: bool = True


@dataclass
class TrainState:
    seed: int
    step: int = 0
    loss_history: list = field(default_factory=list)  # (step, phase, loss)
    optimizer: OptimizerState | None = None
    skipped_samples: int = 0  # MLM draws with no maskable token


def _write_loss_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "phase", "loss"])
        writer.writerows(rows)


def pretrain_run(
    encodeds: list[EncodedSample],
    model: HierarchicalModel,
    decoder: MspDecoder,
    mlm_head: MlmHead,
    schedule: PretrainSchedule,
    out_dir: str | None = None,
    vocab=None,
) -> TrainState:
    """Optional MLM warm-up of the token encoder, then joint MSP training.

    Checkpoints (model + decoder + MLM head) are saved periodically and at
    the end; a non-finite loss aborts with the last checkpoint on disk.
    """
    if not encodeds:
        raise ValueError("pretraining corpus is empty")
    state = TrainState(seed=schedule.seed)
    vocab_size = model.config.encoder.vocab_size

    def all_arrays():
        arrays = model.state_arrays()
        arrays.update({k: p.data for k, p in decoder.parameters()})
        arrays.update({k: p.data for k, p in mlm_head.parameters()})
        return arrays

    def save(tag: str):
        if out_dir is not None:
            save_bundle(
                os.path.join(out_dir, "checkpoint"),
                model.config,
                all_arrays(),
                vocab=vocab,
                meta={"phase": tag, "step": state.step},
            )

    phases = [("mlm", schedule.mlm_steps), ("msp", schedule.msp_steps)]
    save("init")
    for phase_tag, (phase, steps) in enumerate(phases):
        if steps == 0:
            continue
        if phase == "mlm":
            params = dict(model.token_encoder.parameters("te"))
            params.update(dict(mlm_head.parameters()))
        else:
            params = model.parameters()
            params.update(dict(decoder.parameters()))
        opt = OptimizerState(
            learning_rate=schedule.learning_rate,
            weight_decay=schedule.weight_decay,
        )
        state.optimizer = opt
        for step in range(steps):
            rng = np.random.default_rng(
                np.random.SeedSequence([schedule.seed, phase_tag, step])
            )
            batch_idx = rng.choice(
                len(encodeds),
                size=min(schedule.batch_size, len(encodeds)),
                replace=False,
            )
            for p in params.values():
                p.zero_grad()
            total: Tensor | None = None
            used = 0
            for j, idx in enumerate(batch_idx):
                enc = encodeds[int(idx)]
                sample_seed = int(
                    np.random.SeedSequence(
                        [schedule.seed, phase_tag, step, j]
                    ).generate_state(1)[0]
                )
                if phase == "msp":
                    plan = make_mask_plan(enc, vocab_size, sample_seed)
                    loss, _ = msp_loss(
                        enc, plan, model, decoder,
                        per_token_mean=schedule.per_token_mean,
                    )
                else:
                    loss, info = mlm_loss(enc, model, mlm_head, sample_seed)
                    if loss is None:
                        state.skipped_samples += 1
                        continue
                total = loss if total is None else total + loss
                used += 1
            if total is None:
                continue
            batch_loss = T.scale(total, 1.0 / used)
            value = batch_loss.item()
            if not np.isfinite(value):
                # leave the last periodic checkpoint as the recovery point
                raise DivergenceError(
                    f"{phase} loss became non-finite at step {state.step}"
                )
            batch_loss.backward()
            adamw_step(params, opt)
            state.step += 1
            state.loss_history.append((state.step, phase, value))
            if schedule.checkpoint_every and state.step % schedule.checkpoint_every == 0:
                save(phase)
    save("final")
    if out_dir is not None:
        _write_loss_csv(os.path.join(out_dir, "loss.csv"), state.loss_history)
    return state
