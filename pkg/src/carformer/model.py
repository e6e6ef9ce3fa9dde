"""Condition-aware answer selection with a non-autoregressive conditions reviser.

Pipeline for a batch of dialogues:

1. dialogue encoder: ``[HIST] h1 <eou> h2 [QUES] q`` -> word + position +
   turn embeddings -> encoder stack -> ``z``;
2. conditions reviser: one slot per condition (observed-value embedding
   + slot embedding) -> reviser stack attending to ``z`` -> per-condition
   value distributions, all slots in a single pass;
3. hard argmax of each revised distribution;
4. conditions encoder: per-condition embeddings, concatenated, dense + ReLU;
5. classifier: MLP over ``[c, z[HIST], z[QUES]]`` -> candidate distribution.

The ``"ca"`` variant skips steps 2-3 and encodes the observed conditions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from carformer import autograd as ag
from carformer.autograd import Tensor
from carformer.data.synth import DialogueSample
from carformer.data.vocab import EOU, HIST, QUES, Vocab
from carformer.nn import (EncoderLayer, Linear, Module, ReviserLayer, glorot,
                          positional_encoding)

DEFAULT_CONDITION_SIZES = (2, 7, 4, 3, 2, 3, 3)
HISTORY_TURN, QUESTION_TURN = 0, 1


class InputError(ValueError):
    """A sample cannot be laid out for the model."""


class TrainingDataError(ValueError):
    """A sample lacks the labels needed for the loss."""


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    encoder_layers: int = 2
    reviser_layers: int = 2
    cond_embed_size: int = 32
    conditions_repr_dim: int = 64
    classifier_hidden: tuple[int, ...] | None = None
    d_ff: int | None = None
    eta: float = 0.2
    max_question_len: int = 50
    max_history_turns: int = 2
    max_utterance_len: int = 50
    vocab_size: int = 0
    candidate_count: int = 35
    condition_sizes: tuple[int, ...] = DEFAULT_CONDITION_SIZES
    dropout: float = 0.0
    straight_through: bool = False
    variant: str = "car"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.condition_sizes = tuple(int(v) for v in self.condition_sizes)
        if self.classifier_hidden is None:
            self.classifier_hidden = (2 * self.d,)
        self.classifier_hidden = tuple(int(v) for v in self.classifier_hidden)
        if self.d_ff is None:
            self.d_ff = 4 * self.d
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.variant not in ("car", "ca"):
            raise ValueError(f"variant must be 'car' or 'ca', got {self.variant!r}")
        if not self.condition_sizes:
            raise ValueError("at least one condition is required")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """300-dim embeddings and 6-layer stacks; 6 heads is our choice (300 % 6 == 0)."""
        base = dict(d=300, heads=6, encoder_layers=6, reviser_layers=6,
                    cond_embed_size=300, conditions_repr_dim=300)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        """Tiny configuration for gradient checks and overfitting tests."""
        base = dict(d=8, heads=2, encoder_layers=1, reviser_layers=1,
                    cond_embed_size=4, conditions_repr_dim=8)
        base.update(overrides)
        return cls(**base)

    @property
    def num_conditions(self) -> int:
        return len(self.condition_sizes)

    @property
    def max_seq_len(self) -> int:
        t = self.max_history_turns
        return 2 + t * self.max_utterance_len + max(t - 1, 0) + self.max_question_len

    def to_dict(self) -> dict:
        out = asdict(self)
        out["classifier_hidden"] = list(self.classifier_hidden)
        out["condition_sizes"] = list(self.condition_sizes)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# -- layout -------------------------------------------------------------------

def layout(sample: DialogueSample, cfg: ModelConfig) -> tuple[list[str], list[int], int]:
    """Token sequence, turn ids and the [QUES] position for one dialogue.

    ``[HIST] h_1 <eou> ... <eou> h_k [QUES] q``; the [HIST] marker is kept
    even with no history so the history summary position is always 0.
    """
    if not sample.question:
        raise InputError(f"sample {sample.id!r} has an empty question")
    turns = cfg.max_history_turns
    history = sample.history[-turns:] if turns > 0 else []
    tokens = [HIST]
    for i, utt in enumerate(history):
        if i:
            tokens.append(EOU)
        tokens.extend(utt[-cfg.max_utterance_len:])
    q_idx = len(tokens)
    tokens.append(QUES)
    tokens.extend(sample.question[-cfg.max_question_len:])
    turn_ids = [HISTORY_TURN] * q_idx + [QUESTION_TURN] * (len(tokens) - q_idx)
    return tokens, turn_ids, q_idx


@dataclass
class Batch:
    ids: np.ndarray        # [B, L] token ids
    turns: np.ndarray      # [B, L] 0 = history, 1 = question
    mask: np.ndarray       # [B, L] True = real token
    q_idx: np.ndarray      # [B] position of [QUES]
    observed: np.ndarray   # [B, m]
    true: np.ndarray | None = None    # [B, m]
    labels: np.ndarray | None = None  # [B]

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def hist_idx(self) -> np.ndarray:
        return np.zeros(len(self), dtype=np.int64)


def make_batch(samples: Sequence[DialogueSample], vocab: Vocab, cfg: ModelConfig) -> Batch:
    laid = [layout(s, cfg) for s in samples]
    b, length = len(samples), max(len(t) for t, _, _ in laid)
    ids = np.full((b, length), vocab.pad_id, dtype=np.int64)
    turns = np.zeros((b, length), dtype=np.int64)
    mask = np.zeros((b, length), dtype=bool)
    for r, (tokens, turn_ids, _) in enumerate(laid):
        n = len(tokens)
        ids[r, :n] = vocab.ids(tokens)
        turns[r, :n] = turn_ids
        mask[r, :n] = True
    q_idx = np.array([q for _, _, q in laid], dtype=np.int64)
    observed = np.array([s.observed_conditions for s in samples], dtype=np.int64)
    true = labels = None
    if all(s.true_conditions is not None for s in samples):
        true = np.array([s.true_conditions for s in samples], dtype=np.int64)
    if all(s.gold_label is not None for s in samples):
        labels = np.array([s.gold_label for s in samples], dtype=np.int64)
    return Batch(ids, turns, mask, q_idx, observed, true, labels)


# -- components ---------------------------------------------------------------

class ConditionsEncoder(Module):
    """Per-condition embeddings, concatenated, then ``relu(W c0 + b)``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        s = cfg.cond_embed_size
        self.tables = [glorot(rng, n, s) for n in cfg.condition_sizes]
        self.fc = Linear(len(cfg.condition_sizes) * s, cfg.conditions_repr_dim, rng)
        self._sizes = cfg.condition_sizes

    def embed(self, values: np.ndarray, soft: Sequence[Tensor] | None = None) -> Tensor:
        """``c0`` of shape [B, m*s]; ``soft`` enables straight-through one-hots."""
        values = np.asarray(values, dtype=np.int64)
        if values.ndim != 2 or values.shape[1] != len(self._sizes):
            raise InputError(f"condition values must have shape [B, {len(self._sizes)}], got {values.shape}")
        parts = []
        for i, table in enumerate(self.tables):
            col = values[:, i]
            if col.size and (col.min() < 0 or col.max() >= self._sizes[i]):
                raise InputError(f"condition {i} value out of range: {col.tolist()}")
            if soft is None:
                parts.append(ag.embedding_lookup(table, col))
            else:
                onehot = np.eye(self._sizes[i])[col]
                st = soft[i] - soft[i].detach() + onehot
                parts.append(st @ table)
        return ag.concat(parts, axis=1)

    def __call__(self, values: np.ndarray, soft: Sequence[Tensor] | None = None) -> Tensor:
        return ag.relu(self.fc(self.embed(values, soft)))


class DialogueEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.vocab_size <= 0:
            raise ValueError("vocab_size must be set before building the model")
        self.word = glorot(rng, cfg.vocab_size, cfg.d)
        self.turn = glorot(rng, 2, cfg.d)
        self.layers = [EncoderLayer(cfg.d, cfg.heads, cfg.d_ff, rng, cfg.dropout)
                       for _ in range(cfg.encoder_layers)]
        self._pe = positional_encoding(cfg.max_seq_len, cfg.d)

    def __call__(self, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
        length = batch.ids.shape[1]
        if length > self._pe.shape[0]:
            raise InputError(f"sequence length {length} exceeds positional table {self._pe.shape[0]}")
        x = ag.embedding_lookup(self.word, batch.ids) + Tensor(self._pe[:length]) \
            + ag.embedding_lookup(self.turn, batch.turns)
        for layer in self.layers:
            x = layer(x, batch.mask, rng)
        return x


class ConditionsReviser(Module):
    """Re-predicts every condition jointly from observed values and the dialogue."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, causal: bool = False):
        self.value_tables = [glorot(rng, n, cfg.d) for n in cfg.condition_sizes]
        self.slot = glorot(rng, cfg.num_conditions, cfg.d)
        self.layers = [ReviserLayer(cfg.d, cfg.heads, cfg.d_ff, rng, cfg.dropout, causal)
                       for _ in range(cfg.reviser_layers)]
        self.heads = [Linear(cfg.d, n, rng) for n in cfg.condition_sizes]

    def slot_inputs(self, observed: np.ndarray) -> Tensor:
        b = observed.shape[0]
        d = self.slot.shape[1]
        rows = [ag.reshape(ag.embedding_lookup(t, observed[:, i]), (b, 1, d))
                for i, t in enumerate(self.value_tables)]
        return ag.concat(rows, axis=1) + self.slot

    def __call__(self, observed: np.ndarray, z: Tensor, mask: np.ndarray,
                 rng: np.random.Generator | None = None) -> list[Tensor]:
        """Per-condition logits, each [B, |V_i|]."""
        h = self.slot_inputs(np.asarray(observed, dtype=np.int64))
        for layer in self.layers:
            h = layer(h, z, mask, rng)
        return [head(h[:, i, :]) for i, head in enumerate(self.heads)]


class Classifier(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dims = [cfg.conditions_repr_dim + 2 * cfg.d, *cfg.classifier_hidden, cfg.candidate_count]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def logits(self, c: Tensor, z: Tensor, hist_idx: np.ndarray, q_idx: np.ndarray) -> Tensor:
        rows = np.arange(z.shape[0])
        h = ag.concat([c, z[rows, np.asarray(hist_idx)], z[rows, np.asarray(q_idx)]], axis=1)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ag.relu(h)
        return h


@dataclass
class ForwardResult:
    answer_logits: Tensor
    answer_probs: Tensor
    revised: np.ndarray                      # [B, m] discrete assignment fed to the encoder
    revised_logits: list[Tensor] = field(default_factory=list)
    revised_probs: list[Tensor] = field(default_factory=list)
    conditions_vector: Tensor | None = None
    z: Tensor | None = None


def discretize(revised: Sequence) -> np.ndarray:
    """Argmax per slot (lowest id on ties); accepts Tensors or arrays, [C] or [B, C]."""
    cols = [np.asarray(p.data if isinstance(p, Tensor) else p) for p in revised]
    if all(c.ndim == 1 for c in cols):
        return np.array([int(np.argmax(c)) for c in cols], dtype=np.int64)
    return np.stack([np.argmax(c, axis=-1) for c in cols], axis=1).astype(np.int64)


class CarModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        # shared components first so "car" and "ca" draw identical initial weights for them
        self.dialogue_encoder = DialogueEncoder(cfg, rng)
        self.conditions_encoder = ConditionsEncoder(cfg, rng)
        self.classifier = Classifier(cfg, rng)
        self.reviser = ConditionsReviser(cfg, rng) if cfg.variant == "car" else None
        self.seed = seed

    @property
    def variant(self) -> str:
        return self.config.variant

    def forward(self, batch: Batch, conditions_override: np.ndarray | None = None,
                rng: np.random.Generator | None = None) -> ForwardResult:
        cfg = self.config
        z = self.dialogue_encoder(batch, rng)
        rev_logits: list[Tensor] = []
        rev_probs: list[Tensor] = []
        if self.reviser is not None:
            rev_logits = self.reviser(batch.observed, z, batch.mask, rng)
            rev_probs = [ag.softmax(lg, axis=-1) for lg in rev_logits]
            revised = discretize(rev_probs)
        else:
            revised = np.asarray(batch.observed, dtype=np.int64)
        soft = None
        if conditions_override is not None:
            revised = np.asarray(conditions_override, dtype=np.int64).reshape(len(batch), -1)
        elif cfg.straight_through and rev_probs:
            soft = rev_probs
        c = self.conditions_encoder(revised, soft)
        logits = self.classifier.logits(c, z, batch.hist_idx, batch.q_idx)
        return ForwardResult(logits, ag.softmax(logits, axis=-1), revised,
                             rev_logits, rev_probs, c, z)

    __call__ = forward

    def loss(self, batch: Batch, result: ForwardResult | None = None,
             rng: np.random.Generator | None = None) -> tuple[Tensor, dict[str, float]]:
        """Batch-mean of ``eta * L_c + (1 - eta) * L_r``; the "ca" variant uses ``L_r`` only."""
        if batch.labels is None or (self.reviser is not None and batch.true is None):
            raise TrainingDataError("loss needs gold labels and true conditions")
        res = result or self.forward(batch, rng=rng)
        answer_loss = ag.mean(ag.cross_entropy(res.answer_logits, batch.labels))
        if self.reviser is None:
            return answer_loss, {"answer": answer_loss.item(), "conditions": 0.0}
        cond_loss = ag.mean(sum_tensors(
            ag.cross_entropy(lg, batch.true[:, i]) for i, lg in enumerate(res.revised_logits)))
        eta = self.config.eta
        total = ag.mul(cond_loss, eta) + ag.mul(answer_loss, 1.0 - eta)
        return total, {"answer": answer_loss.item(), "conditions": cond_loss.item()}

    # -- state ------------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in params.items():
            if p.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]


def sum_tensors(items) -> Tensor:
    items = list(items)
    total = items[0]
    for t in items[1:]:
        total = total + t
    return total


def predict(model: CarModel, samples: Sequence[DialogueSample], vocab: Vocab,
            batch_size: int = 64) -> dict[str, np.ndarray]:
    """Inference without graph recording.

    Returns ``answers`` [N], ``answer_probs`` [N, C], ``revised`` [N, m] and
    ``conditions_vectors`` [N, c_dim].
    """
    answers, probs, revised, cvecs = [], [], [], []
    with ag.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = make_batch(samples[start:start + batch_size], vocab, model.config)
            res = model.forward(batch)
            probs.append(res.answer_probs.data)
            answers.append(np.argmax(res.answer_probs.data, axis=1))
            revised.append(res.revised)
            cvecs.append(res.conditions_vector.data)
    if not samples:
        m = model.config.num_conditions
        return {"answers": np.zeros(0, np.int64), "answer_probs": np.zeros((0, model.config.candidate_count)),
                "revised": np.zeros((0, m), np.int64), "conditions_vectors": np.zeros((0, model.config.conditions_repr_dim))}
    return {"answers": np.concatenate(answers), "answer_probs": np.concatenate(probs),
            "revised": np.concatenate(revised), "conditions_vectors": np.concatenate(cvecs)}


# -- single-sample functional forms --------------------------------------------

def encode_conditions(values: Sequence[int], params: ConditionsEncoder) -> Tensor:
    """Conditions vector ``c`` for one assignment."""
    return ag.reshape(params(np.asarray(values, dtype=np.int64)[None, :]), (-1,))


def encode_dialogue(sample: DialogueSample, model: CarModel, vocab: Vocab) -> tuple[Tensor, int, int]:
    """``(z [L, d], idx_hist, idx_question)`` for one dialogue."""
    batch = make_batch([sample], vocab, model.config)
    z = model.dialogue_encoder(batch)
    return ag.reshape(z, z.shape[1:]), 0, int(batch.q_idx[0])


def revise_conditions(observed: Sequence[int], z: Tensor, params: ConditionsReviser,
                      dialogue_pad_mask: np.ndarray | None = None) -> list[Tensor]:
    """Per-condition value distributions for one dialogue, all slots in one pass."""
    length = z.shape[0]
    valid = np.ones((1, length), bool) if dialogue_pad_mask is None \
        else ~np.asarray(dialogue_pad_mask, bool)[None, :]
    logits = params(np.asarray(observed, dtype=np.int64)[None, :],
                    ag.reshape(z, (1,) + z.shape), valid)
    return [ag.reshape(ag.softmax(lg, axis=-1), (-1,)) for lg in logits]


def classify(c: Tensor, z: Tensor, idx_hist: int, idx_q: int, params: Classifier) -> Tensor:
    """Candidate distribution for one dialogue."""
    logits = params.logits(ag.reshape(c, (1, -1)), ag.reshape(z, (1,) + z.shape),
                           np.array([idx_hist]), np.array([idx_q]))
    return ag.reshape(ag.softmax(logits, axis=-1), (-1,))
