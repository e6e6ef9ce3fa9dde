"""Finite-difference gradient suite over every differentiable op and the full model loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from carformer import autograd as ag
from carformer import nn

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _p(rng, *shape, scale=1.0):
    return ag.parameter(rng.normal(0.0, scale, size=shape))


def _weighted(out: ag.Tensor, w: np.ndarray) -> ag.Tensor:
    # a random linear functional turns any output into a scalar with a generic gradient
    return ag.tsum(ag.mul(out, ag.as_tensor(w)))


def _away_from_zero(rng, *shape):
    x = rng.normal(size=shape)
    return x + np.sign(x) * 0.1


def op_cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple[Callable, list]]]:
    """Named factories returning ``(f, inputs)`` on fresh random micro tensors."""

    def unary(fn, shape=(3, 4), init=None):
        def make():
            x = ag.parameter(init(rng, *shape) if init else rng.normal(size=shape))
            w = rng.normal(size=fn(x).shape)
            return (lambda: _weighted(fn(x), w)), [x]
        return make

    def binary(fn, sa, sb):
        def make():
            a, b = _p(rng, *sa), _p(rng, *sb)
            w = rng.normal(size=fn(a, b).shape)
            return (lambda: _weighted(fn(a, b), w)), [a, b]
        return make

    def layer_norm():
        x, g, b = _p(rng, 3, 5), _p(rng, 5), _p(rng, 5)
        w = rng.normal(size=(3, 5))
        return (lambda: _weighted(ag.layer_norm(x, g, b), w)), [x, g, b]

    def embedding():
        table = _p(rng, 6, 3)
        ids = np.array([[0, 2, 2], [5, 1, 0]])
        w = rng.normal(size=(2, 3, 3))
        return (lambda: _weighted(ag.embedding_lookup(table, ids), w)), [table]

    def masked():
        x = _p(rng, 2, 4)
        mask = np.array([[False, True, False, False], [True, False, False, True]])
        w = rng.normal(size=(2, 4))
        return (lambda: _weighted(ag.softmax(ag.masked_fill(x, mask, -1e9)), w)), [x]

    def cross_entropy():
        x = _p(rng, 4, 5)
        target = np.array([0, 3, 4, 1])
        return (lambda: ag.mean(ag.cross_entropy(x, target))), [x]

    def concat():
        a, b = _p(rng, 2, 3), _p(rng, 2, 2)
        w = rng.normal(size=(2, 5))
        return (lambda: _weighted(ag.concat([a, b], axis=-1), w)), [a, b]

    def attention():
        layer = nn.MultiHeadAttention(4, 2, rng)
        x = _p(rng, 2, 3, 4)
        mask = np.array([[True, True, False], [True, True, True]])
        w = rng.normal(size=(2, 3, 4))
        return (lambda: _weighted(layer(x, x, mask), w)), [x] + layer.parameters()

    def encoder_layer():
        layer = nn.EncoderLayer(4, 2, 8, rng)
        x = _p(rng, 1, 3, 4)
        mask = np.ones((1, 3), bool)
        w = rng.normal(size=(1, 3, 4))
        return (lambda: _weighted(layer(x, mask), w)), [x] + layer.parameters()

    def reviser_layer():
        layer = nn.ReviserLayer(4, 2, 8, rng)
        slots, z = _p(rng, 1, 2, 4), _p(rng, 1, 3, 4)
        mask = np.array([[True, True, False]])
        w = rng.normal(size=(1, 2, 4))
        return (lambda: _weighted(layer(slots, z, mask), w)), [slots, z] + layer.parameters()

    return {
        "add": binary(ag.add, (3, 4), (4,)),
        "sub": binary(ag.sub, (3, 4), (3, 4)),
        "mul": binary(ag.mul, (3, 4), (4,)),
        "matmul": binary(ag.matmul, (2, 3, 4), (4, 5)),
        "batched_matmul": binary(ag.matmul, (2, 3, 4), (2, 4, 2)),
        "blocked_matmul": binary(lambda a, b: ag.blocked_matmul(a, b, block=3), (2, 3, 7), (2, 7, 2)),
        "relu": unary(ag.relu, init=_away_from_zero),
        "reshape": unary(lambda x: ag.reshape(x, (2, 6))),
        "transpose": unary(lambda x: ag.transpose(x, (1, 0))),
        "take": unary(lambda x: ag.take(x, (np.array([0, 2, 2]), slice(1, 3)))),
        "sum": unary(lambda x: ag.tsum(x, axis=0)),
        "mean": unary(lambda x: ag.mean(x, axis=1)),
        "softmax": unary(ag.softmax),
        "log_softmax": unary(ag.log_softmax),
        "masked_softmax": masked,
        "layer_norm": layer_norm,
        "embedding": embedding,
        "concat": concat,
        "cross_entropy": cross_entropy,
        "attention": attention,
        "encoder_layer": encoder_layer,
        "reviser_layer": reviser_layer,
    }


def check_ops(seed: int = 0, step: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, make in op_cases(rng).items():
        start = time.perf_counter()
        f, inputs = make()
        err = ag.grad_check(f, inputs, step=step)
        results.append(CheckResult(name, err, OP_TOLERANCE, time.perf_counter() - start))
    return results


def check_model_loss(seed: int = 0, step: float = 1e-5, coords_per_param: int = 6,
                     variant: str = "car", conditions: int = 2) -> CheckResult:
    """Loss gradient of a micro model with ``conditions`` slots on a two-sample batch.

    Up to ``coords_per_param`` coordinates of every parameter tensor are probed.
    """
    from dataclasses import replace as dc_replace

    from carformer.data.synth import generate_dataset
    from carformer.data.vocab import Vocab
    from carformer.model import CarModel, ModelConfig, make_batch

    data = generate_dataset(60, seed=seed)
    vocab = Vocab.from_world(data.world)
    cfg = ModelConfig.micro(vocab_size=len(vocab), variant=variant,
                            candidate_count=len(data.candidates),
                            condition_sizes=data.world.schema.sizes[:conditions])
    model = CarModel(cfg, seed=seed)
    picked = ([s for s in data.train if s.is_defective] + data.train)[:2]
    picked = [dc_replace(s, observed_conditions=s.observed_conditions[:conditions],
                         true_conditions=s.true_conditions[:conditions]) for s in picked]
    batch = make_batch(picked, vocab, cfg)
    start = time.perf_counter()
    err = ag.grad_check(lambda: model.loss(batch)[0], model.parameters(), step=step,
                        max_coords=coords_per_param, rng=np.random.default_rng(seed))
    return CheckResult(f"model_loss[{variant}]", err, MODEL_TOLERANCE, time.perf_counter() - start)


def run_suite(seed: int = 0) -> list[CheckResult]:
    return check_ops(seed) + [check_model_loss(seed, variant="car"),
                              check_model_loss(seed, variant="ca")]
