"""Training loop, evaluation and the reviser ablation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from carformer import autograd as ag
from carformer.data.synth import (ConditionSchema, CorruptionSpec, Dataset, DialogueSample,
                                  build_default_schema, corrupt, generate_dataset)
from carformer.data.vocab import Vocab
from carformer.metrics import Metrics, bleu_n, compute_metrics
from carformer.model import CarModel, ModelConfig, make_batch, predict

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, params: Sequence[ag.Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    lr_schedule: str = "constant"        # or "linear": decay to 0 by the last step
    lr_decay_from: float = 0.0           # fraction of steps at full rate before a linear decay
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 1
    patience: int | None = None          # epochs without validation gain before stopping
    select_by: str = "accuracy"          # or "bleu"
    stop_at_train_accuracy: float | None = None
    track_train_accuracy: bool = False
    augment_slot_rate: float = 0.1       # extra per-slot corruption of the reviser's input
    augment_unknown_share: float = 0.5
    augment_without_reviser: bool = False  # also corrupt the conditions a "ca" model reads

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = -math.inf
    seconds: float = 0.0

    @property
    def final_train_accuracy(self) -> float | None:
        return self.log[-1].get("train_accuracy") if self.log else None


def augment_observed(batch, spec: CorruptionSpec, rng: np.random.Generator,
                     schema: ConditionSchema) -> None:
    """Re-corrupt the clean observed slots of a training batch in place.

    Slots that are already defective keep their value, so the batch's own
    corruption is preserved and only extra defects are added.
    """
    for r in range(len(batch)):
        fresh, _ = corrupt(batch.true[r], spec, rng, schema)
        clean = batch.observed[r] == batch.true[r]
        batch.observed[r, clean] = np.asarray(fresh)[clean]


def _linear_factor(step: int, total: int, decay_from: float) -> float:
    """Learning-rate multiplier: 1 until ``decay_from * total`` steps, then linear to 0."""
    start = decay_from * total
    return 1.0 if step <= start else (total - step) / (total - start)


def _score(model, samples, vocab, select_by, candidate_tokens=None) -> float:
    pred = predict(model, samples, vocab)["answers"]
    gold = np.array([s.gold_label for s in samples])
    if select_by == "accuracy":
        return float((pred == gold).mean())
    return bleu_n([candidate_tokens[p] for p in pred], [candidate_tokens[g] for g in gold], 4)


def train(model: CarModel, train_samples: Sequence[DialogueSample], vocab: Vocab,
          cfg: TrainConfig | None = None, valid_samples: Sequence[DialogueSample] | None = None,
          log_path: str | Path | None = None,
          candidate_tokens: Sequence[Sequence[str]] | None = None,
          on_epoch: Callable[[int, CarModel, dict], None] | None = None,
          schema: ConditionSchema | None = None) -> TrainResult:
    """Minimize the batch-mean loss with Adam; keeps the best-validation weights.

    Batches are formed from a per-epoch permutation drawn from a generator
    seeded with ``cfg.seed``, so identical inputs give bitwise-identical
    parameters. ``on_epoch(epoch, model, record)`` may add fields to the
    epoch record before it is logged. With ``cfg.augment_slot_rate > 0`` the
    clean observed conditions of every training batch are re-corrupted at
    that per-slot rate from a separate generator, which gives the reviser
    far more defective slots to learn from than the data itself holds. A
    model without a reviser trains on the observed conditions as given
    unless ``cfg.augment_without_reviser`` is set.
    """
    cfg = cfg or TrainConfig()
    if not train_samples:
        raise ValueError("train: empty training set")
    if cfg.select_by not in ("accuracy", "bleu"):
        raise ValueError(f"select_by must be 'accuracy' or 'bleu', got {cfg.select_by!r}")
    if cfg.lr_schedule not in ("constant", "linear"):
        raise ValueError(f"lr_schedule must be 'constant' or 'linear', got {cfg.lr_schedule!r}")
    if not 0.0 <= cfg.lr_decay_from < 1.0:
        raise ValueError(f"lr_decay_from must be in [0, 1), got {cfg.lr_decay_from}")
    if cfg.select_by == "bleu" and candidate_tokens is None:
        raise ValueError("select_by='bleu' needs candidate_tokens")
    rng = np.random.default_rng(cfg.seed)
    dropout_rng = rng if model.config.dropout > 0 else None
    aug_spec = aug_rng = None
    if cfg.augment_slot_rate > 0 and (model.reviser is not None or cfg.augment_without_reviser):
        schema = schema or build_default_schema()
        share = cfg.augment_unknown_share
        aug_spec = CorruptionSpec(cfg.augment_slot_rate * (1 - share), cfg.augment_slot_rate * share)
        aug_rng = np.random.default_rng([cfg.seed, 1])
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
    result = TrainResult()
    best_state = model.state_dict()
    since_best = 0
    total_steps = cfg.epochs * math.ceil(len(train_samples) / cfg.batch_size)
    started = time.perf_counter()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_samples))
            total, seen = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                chunk = [train_samples[i] for i in order[start:start + cfg.batch_size]]
                batch = make_batch(chunk, vocab, model.config)
                if aug_spec is not None:
                    augment_observed(batch, aug_spec, aug_rng, schema)
                if cfg.lr_schedule == "linear":
                    opt.lr = cfg.lr * _linear_factor(opt.step_count, total_steps, cfg.lr_decay_from)
                opt.zero_grad()
                loss, parts = model.loss(batch, rng=dropout_rng)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(
                        f"non-finite loss {value} at epoch {epoch}, batch starting {start}: {parts}")
                ag.backward(loss)
                opt.step()
                total += value * len(chunk)
                seen += len(chunk)
            record = {"epoch": epoch, "train_loss": total / seen}
            if cfg.track_train_accuracy or cfg.stop_at_train_accuracy is not None:
                record["train_accuracy"] = _score(model, train_samples, vocab, "accuracy")
            if valid_samples:
                record["val_accuracy"] = _score(model, valid_samples, vocab, "accuracy")
                score = record["val_accuracy"] if cfg.select_by == "accuracy" \
                    else _score(model, valid_samples, vocab, "bleu", candidate_tokens)
            else:
                record["val_accuracy"] = None
                score = -record["train_loss"]
            if on_epoch is not None:
                on_epoch(epoch, model, record)
            result.log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.4f val_acc %s", epoch, record["train_loss"], record["val_accuracy"])
            # ties go to the later, longer-trained epoch; only a strict gain resets patience
            since_best = 0 if score > result.best_score else since_best + 1
            if score >= result.best_score:
                result.best_score, result.best_epoch = score, epoch
                best_state = model.state_dict()
            if cfg.stop_at_train_accuracy is not None and record["train_accuracy"] >= cfg.stop_at_train_accuracy:
                best_state = model.state_dict()
                result.best_epoch = epoch
                break
            if cfg.patience is not None and since_best >= cfg.patience:
                break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    result.seconds = time.perf_counter() - started
    return result


def evaluate(model: CarModel, samples: Sequence[DialogueSample], vocab: Vocab,
             candidate_tokens: Sequence[Sequence[str]], standard_bp: bool = False,
             return_predictions: bool = False):
    """Metrics over ``samples``; revision metrics only for the "car" variant."""
    out = predict(model, samples, vocab)
    gold = np.array([s.gold_label for s in samples], dtype=np.int64)
    observed = np.array([s.observed_conditions for s in samples], dtype=np.int64).reshape(len(samples), -1)
    true = np.array([s.true_conditions for s in samples], dtype=np.int64).reshape(len(samples), -1)
    revised = out["revised"] if model.reviser is not None else None
    metrics = compute_metrics(out["answers"], gold, candidate_tokens, model.config.candidate_count,
                              observed, true, revised, standard_bp)
    if return_predictions:
        return metrics, out
    return metrics


# -- ablation ------------------------------------------------------------------

def reference_model(**overrides) -> ModelConfig:
    """Model used for the reviser ablation: one encoder and one reviser layer of width 32."""
    return ModelConfig(**{"d": 32, "heads": 4, "encoder_layers": 1, "reviser_layers": 1, **overrides})


def reference_training(**overrides) -> TrainConfig:
    """20 epochs; full rate for the first 75 % of steps, then a linear decay to 0."""
    return TrainConfig(**{"epochs": 20, "lr_schedule": "linear", "lr_decay_from": 0.75, **overrides})


@dataclass
class AblationConfig:
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    data_size: int = 5000
    defect_rate: float = 0.2
    unknown_share: float = 0.5
    model: ModelConfig = field(default_factory=reference_model)
    training: TrainConfig = field(default_factory=reference_training)

    @classmethod
    def reference(cls) -> "AblationConfig":
        return cls()

    def to_dict(self) -> dict:
        return {"seeds": list(self.seeds), "data_size": self.data_size,
                "defect_rate": self.defect_rate, "unknown_share": self.unknown_share,
                "model": self.model.to_dict(), "training": self.training.to_dict()}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _summary(m: Metrics) -> dict:
    return m.to_dict(with_confusion=False)


def run_ablation(cfg: AblationConfig, report_path: str | Path | None = None,
                 dataset_fn=generate_dataset) -> dict:
    """Train the reviser ("car") and no-reviser ("ca") variants on identical data and seeds.

    The report has per-seed metrics on the whole test split and on its
    defective subset (samples with at least one corrupted condition).
    """
    per_seed = []
    for seed in cfg.seeds:
        spec = CorruptionSpec.from_target_rate(cfg.defect_rate, 7, cfg.unknown_share)
        data: Dataset = dataset_fn(cfg.data_size, spec=spec, seed=seed)
        vocab = Vocab.from_world(data.world)
        cand = [c.tokens for c in data.candidates]
        defective = [s for s in data.test if s.is_defective]
        row = {"seed": seed, "test_samples": len(data.test), "defective_samples": len(defective)}
        for variant in ("car", "ca"):
            mcfg = replace(cfg.model, variant=variant, vocab_size=len(vocab),
                           candidate_count=len(data.candidates),
                           condition_sizes=data.world.schema.sizes)
            model = CarModel(mcfg, seed=seed)
            tr = train(model, data.train, vocab, replace(cfg.training, seed=seed), data.valid,
                       schema=data.world.schema)
            row[variant] = {
                "overall": _summary(evaluate(model, data.test, vocab, cand)),
                "defective": _summary(evaluate(model, defective, vocab, cand)),
                "best_epoch": tr.best_epoch,
                "epochs_run": len(tr.log),
                "train_seconds": round(tr.seconds, 2),
            }
            log.info("seed %d %s: acc %.4f defective %.4f", seed, variant,
                     row[variant]["overall"]["accuracy"], row[variant]["defective"]["accuracy"])
        per_seed.append(row)

    def mean_of(variant, subset, key):
        vals = [r[variant][subset][key] for r in per_seed if r[variant][subset][key] is not None]
        return float(np.mean(vals)) if vals else None

    summary = {
        subset: {variant: {"accuracy": mean_of(variant, subset, "accuracy"),
                           "bleu": [float(np.mean([r[variant][subset]["bleu"][k] for r in per_seed]))
                                    for k in range(4)]}
                 for variant in ("car", "ca")}
        for subset in ("overall", "defective")
    }
    summary["car_beats_ca_on_defective"] = sum(
        r["car"]["defective"]["accuracy"] > r["ca"]["defective"]["accuracy"] for r in per_seed)
    summary["car_within_1pt_overall"] = sum(
        r["car"]["overall"]["accuracy"] >= r["ca"]["overall"]["accuracy"] - 0.01 for r in per_seed)
    summary["revision_accuracy_mean"] = mean_of("car", "overall", "revision_accuracy")
    summary["revision_damage_mean"] = mean_of("car", "overall", "revision_damage")
    report = {"config_hash": cfg.digest(), "config": cfg.to_dict(), "seeds": list(cfg.seeds),
              "per_seed": per_seed, "summary": summary}
    if report_path:
        Path(report_path).write_text(json.dumps(report, indent=2) + "\n")
    return report
