"""Acceptance suite: one marked group of tests per criterion.

A summary line per criterion is printed at the end of the run (see the
``pytest_terminal_summary`` hook in conftest.py).
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from carformer import autograd as ag
from carformer import nn
from carformer.checkpoint import load_checkpoint, save_checkpoint
from carformer.data.synth import generate_dataset, write_jsonl
from carformer.data.vocab import Vocab
from carformer.gradcheck import MODEL_TOLERANCE, OP_TOLERANCE, run_suite
from carformer.metrics import bleu_n
from carformer.model import CarModel, ModelConfig, make_batch, predict
from carformer.train import AblationConfig, TrainConfig, evaluate, run_ablation, train


def crit(label, title):
    return pytest.mark.criterion(label, title)


# -- 1 -----------------------------------------------------------------------------

@crit("1", "gradient suite: ops < 1e-4, model loss < 1e-3, under 1 min")
def test_gradient_suite(record_property):
    start = time.perf_counter()
    results = run_suite(seed=0)
    seconds = time.perf_counter() - start
    ops = [r for r in results if not r.name.startswith("model_loss")]
    models = [r for r in results if r.name.startswith("model_loss")]
    record_property("detail", f"{len(ops)} ops max {max(r.error for r in ops):.1e}, "
                              f"model max {max(r.error for r in models):.1e}, {seconds:.1f}s")
    assert all(r.error < OP_TOLERANCE for r in ops), [(r.name, r.error) for r in ops if not r.passed]
    assert all(r.error < MODEL_TOLERANCE for r in models)
    assert {r.name for r in models} == {"model_loss[car]", "model_loss[ca]"}
    assert seconds < 60


# -- 2 -----------------------------------------------------------------------------

@crit("2", "10k random forward passes: distributions sum to 1 +- 1e-9, finite")
def test_distribution_invariants(monkeypatch, small_data, vocab, record_property):
    seen = {"softmax_rows": 0, "worst": 0.0}
    original = ag.softmax

    def checked(x, axis=-1):
        out = original(x, axis=axis)
        assert np.all(np.isfinite(out.data))
        worst = float(np.max(np.abs(out.data.sum(axis=axis) - 1.0)))
        seen["worst"] = max(seen["worst"], worst)
        seen["softmax_rows"] += out.data.size // out.data.shape[axis]
        return out

    monkeypatch.setattr(ag, "softmax", checked)
    rng = np.random.default_rng(2024)
    samples = small_data.train + small_data.valid + small_data.test
    sizes = small_data.world.schema.sizes
    passes = 0
    while passes < 10_000:
        cfg = ModelConfig.micro(vocab_size=len(vocab), variant=["car", "ca"][passes // 500 % 2])
        model = CarModel(cfg, seed=int(rng.integers(2**31)))
        scale = float(rng.choice([0.1, 1.0, 5.0]))
        for p in model.parameters():
            p.data *= scale
        for _ in range(10):
            picked = [samples[i] for i in rng.choice(len(samples), 50, replace=False)]
            picked = [replace(s, observed_conditions=tuple(int(rng.integers(n)) for n in sizes))
                      for s in picked]
            with ag.no_grad():
                res = model.forward(make_batch(picked, vocab, cfg))
            dists = [res.answer_probs.data] + [p.data for p in (res.revised_probs or [])]
            for d in dists:
                assert np.all(np.isfinite(d))
                assert np.max(np.abs(d.sum(axis=-1) - 1.0)) <= 1e-9
            passes += len(picked)
    record_property("detail", f"{passes} passes, {seen['softmax_rows']} softmax rows, "
                              f"max |sum-1| {seen['worst']:.1e}")
    assert seen["worst"] <= 1e-9


# -- 3 -----------------------------------------------------------------------------

@crit("3", "reviser: single pass, all-pairs sensitivity vs causal control, bitwise padding invariance")
def test_reviser_single_pass(small_data, vocab, monkeypatch, record_property):
    model = CarModel(ModelConfig.micro(vocab_size=len(vocab), reviser_layers=3), seed=0)
    calls = []
    original = nn.ReviserLayer.__call__

    def counting(self, slots, *args, **kw):
        calls.append((id(self), slots.shape))
        return original(self, slots, *args, **kw)

    monkeypatch.setattr(nn.ReviserLayer, "__call__", counting)
    batch = make_batch(small_data.train[:4], vocab, model.config)
    model.forward(batch)
    # every layer runs exactly once, on all seven slots at the same time
    assert len(calls) == 3 and len({c[0] for c in calls}) == 3
    assert all(shape == (4, 7, model.config.d) for _, shape in calls)
    record_property("detail", "1 call/layer")


@crit("3", "reviser: single pass, all-pairs sensitivity vs causal control, bitwise padding invariance")
def test_reviser_cross_slot_sensitivity(record_property):
    rng = np.random.default_rng(0)
    slots, z = rng.normal(size=(1, 7, 16)), rng.normal(size=(1, 9, 16))
    sens = {}
    for causal in (False, True):
        layer = nn.ReviserLayer(16, 4, 64, np.random.default_rng(1), causal=causal)
        base = layer(ag.Tensor(slots), ag.Tensor(z)).data
        s = np.zeros((7, 7))
        for j in range(7):
            moved = slots.copy()
            moved[0, j] += 1e-3
            s[:, j] = np.abs(layer(ag.Tensor(moved), ag.Tensor(z)).data - base)[0].max(axis=1)
        sens[causal] = s
    forbidden = np.triu(np.ones((7, 7), bool), k=1)
    record_property("detail", f"min pair sensitivity {sens[False].min():.1e}, "
                              f"causal forbidden max {sens[True][forbidden].max():.1e}")
    assert np.all(sens[False] > 0)
    assert np.all(sens[True][forbidden] == 0.0)


@crit("3", "reviser: single pass, all-pairs sensitivity vs causal control, bitwise padding invariance")
def test_padding_invariance_bitwise(small_data, vocab, record_property):
    rng = np.random.default_rng(5)
    layer = nn.ReviserLayer(16, 4, 64, rng)
    slots, z = rng.normal(size=(2, 7, 16)), rng.normal(size=(2, 12, 16))
    mask = np.ones((2, 12), bool)
    mask[0, 8:] = False
    mask[1, 5:] = False
    z2 = z.copy()
    z2[~mask] = rng.normal(scale=50.0, size=int((~mask).sum() * 16)).reshape(-1, 16)
    assert np.array_equal(layer(ag.Tensor(slots), ag.Tensor(z), mask).data,
                          layer(ag.Tensor(slots), ag.Tensor(z2), mask).data)

    model = CarModel(ModelConfig.micro(vocab_size=len(vocab)), seed=2)
    batch = make_batch(small_data.train[:16], vocab, model.config)
    noise = np.random.default_rng(0).integers(0, len(vocab), batch.ids.shape)
    other = replace(batch, ids=np.where(batch.mask, batch.ids, noise))
    a, b = model.forward(batch), model.forward(other)
    assert np.array_equal(a.answer_probs.data, b.answer_probs.data)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.revised_probs, b.revised_probs))
    record_property("detail", f"{int((~batch.mask).sum())} padded positions rewritten")


# -- 4 -----------------------------------------------------------------------------

def _oracle_bleu(cands, refs, n):
    log_sum = 0.0
    for i in range(1, n + 1):
        matched = total = 0
        for c, r in zip(cands, refs):
            cg = [tuple(c[j:j + i]) for j in range(len(c) - i + 1)]
            rg = [tuple(r[j:j + i]) for j in range(len(r) - i + 1)]
            total += len(cg)
            used = [False] * len(rg)
            for g in cg:  # greedy one-to-one matching equals clipped counting
                for k, h in enumerate(rg):
                    if not used[k] and h == g:
                        used[k] = True
                        matched += 1
                        break
        if matched == 0:
            return 0.0
        log_sum += math.log(matched / total)
    c_len, r_len = sum(map(len, cands)), sum(map(len, refs))
    bp = 1.0 if c_len > r_len else c_len / r_len
    return bp * math.exp(log_sum / n)


@crit("4", "BLEU equals brute-force oracle on 100 pairs; worked examples exact")
def test_bleu_oracle(record_property):
    assert bleu_n([["the", "cat", "sat"]], [["the", "cat", "sat"]], 3) == 1.0
    assert round(bleu_n([["the", "cat"]], [["the", "cat", "sat"]], 1), 4) == 0.6667
    assert bleu_n([["the", "the", "the"]], [["the", "cat"]], 1) == 1 / 3
    rng = np.random.default_rng(9)
    words = list("abcdef")
    for _ in range(100):
        cand = [str(w) for w in rng.choice(words, int(rng.integers(1, 12)))]
        ref = [str(w) for w in rng.choice(words, int(rng.integers(1, 12)))]
        for n in range(1, 5):
            got, want = bleu_n([cand], [ref], n), _oracle_bleu([cand], [ref], n)
            assert got == want, (cand, ref, n)
    record_property("detail", "100 pairs x 4 orders")


# -- 5 -----------------------------------------------------------------------------

@crit("5", "micro config overfits 64 samples to 100% within 300 epochs, < 2 min")
def test_overfit(vocab, record_property):
    data = generate_dataset(400, seed=1)
    model = CarModel(ModelConfig.micro(vocab_size=len(vocab)), seed=1)
    start = time.perf_counter()
    res = train(model, data.train[:64], vocab, TrainConfig(epochs=300, seed=1, stop_at_train_accuracy=1.0))
    seconds = time.perf_counter() - start
    record_property("detail", f"train acc {res.final_train_accuracy:.3f} after {len(res.log)} epochs, "
                              f"{seconds:.0f}s")
    assert res.final_train_accuracy == 1.0
    assert len(res.log) <= 300
    assert seconds < 120


# -- 6 and 7 -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    cfg = AblationConfig.reference()
    start = time.perf_counter()
    report = run_ablation(cfg, tmp_path_factory.mktemp("ablation") / "report.json")
    return report, time.perf_counter() - start


@pytest.mark.slow
@crit("6", "CAR > CA on defective subset in >= 4/5 seeds, CAR >= CA - 1pt overall, < 30 min")
def test_directional_ablation(ablation, record_property):
    report, seconds = ablation
    rows = report["per_seed"]
    wins = sum(r["car"]["defective"]["accuracy"] > r["ca"]["defective"]["accuracy"] for r in rows)
    close = [r["car"]["overall"]["accuracy"] >= r["ca"]["overall"]["accuracy"] - 0.01 for r in rows]
    cells = ", ".join(f"s{r['seed']} {r['car']['defective']['accuracy']:.3f}/{r['ca']['defective']['accuracy']:.3f}"
                      for r in rows)
    record_property("detail", f"defective CAR/CA {cells}; wins {wins}/{len(rows)}; "
                              f"overall within 1pt {sum(close)}/{len(rows)}; {seconds / 60:.1f} min")
    assert [r["seed"] for r in rows] == [1, 2, 3, 4, 5]
    assert wins >= 4
    assert all(close)
    assert seconds < 30 * 60


@pytest.mark.slow
@crit("7", "revision accuracy on defective slots >= 0.5 (mean), damage <= 0.1")
def test_revision_quality(ablation, record_property):
    report, _ = ablation
    s = report["summary"]
    per_seed_damage = [r["car"]["overall"]["revision_damage"] for r in report["per_seed"]]
    record_property("detail", f"revision {s['revision_accuracy_mean']:.3f}, damage mean "
                              f"{s['revision_damage_mean']:.3f} max {max(per_seed_damage):.3f}")
    assert s["revision_accuracy_mean"] >= 0.5
    assert max(per_seed_damage) <= 0.1


# -- 8 -----------------------------------------------------------------------------

def _pipeline(tmp, seed):
    """Generate, train briefly, evaluate; returns the bytes of every artefact."""
    data = generate_dataset(500, seed=seed)
    vocab = Vocab.from_world(data.world)
    write_jsonl(data.train, tmp / "train.jsonl")
    model = CarModel(ModelConfig(vocab_size=len(vocab), d=16, heads=2, encoder_layers=1, reviser_layers=1),
                     seed=seed)
    train(model, data.train, vocab, TrainConfig(epochs=2, seed=seed, augment_slot_rate=0.3),
          data.valid, log_path=tmp / "log.jsonl", schema=data.world.schema)
    save_checkpoint(model, tmp / "ck", vocab)
    out = predict(model, data.test, vocab)
    np.save(tmp / "probs.npy", out["answer_probs"])
    return {p.name: p.read_bytes() for p in sorted(tmp.rglob("*")) if p.is_file()}


@crit("8", "same-seed runs, checkpoint round-trip and dataset regeneration are bitwise identical")
def test_determinism_and_persistence(tmp_path, record_property):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    first, second = _pipeline(a, 4), _pipeline(b, 4)
    assert first.keys() == second.keys()
    assert all(first[k] == second[k] for k in first)

    model, vocab, _ = load_checkpoint(a / "ck")
    fresh = CarModel(model.config, seed=99)
    fresh.load_state_dict(model.state_dict())
    save_checkpoint(fresh, tmp_path / "again", vocab)
    assert (tmp_path / "again" / "params.bin").read_bytes() == first["params.bin"]
    data = generate_dataset(500, seed=4)
    probs = predict(model, data.test, vocab)["answer_probs"]
    assert probs.tobytes() == np.load(a / "probs.npy").tobytes()

    write_jsonl(generate_dataset(500, seed=4).train, tmp_path / "regen.jsonl")
    assert (tmp_path / "regen.jsonl").read_bytes() == first["train.jsonl"]
    record_property("detail", f"{len(first)} artefacts identical")


# -- 9 -----------------------------------------------------------------------------

@crit("9", "untrained model accuracy within 1/35 +- 0.03 on >= 2000 samples")
def test_chance_level(record_property):
    data = generate_dataset(10_000, seed=11)
    vocab = Vocab.from_world(data.world)
    samples = data.test + data.valid[:500]
    assert len(samples) >= 2000
    cand = [c.tokens for c in data.candidates]
    accs = []
    for cfg in (ModelConfig(vocab_size=len(vocab)), AblationConfig.reference().model):
        model = CarModel(replace(cfg, vocab_size=len(vocab)), seed=0)
        accs.append(evaluate(model, samples, vocab, cand).accuracy)
    record_property("detail", f"n={len(samples)} acc " + ", ".join(f"{a:.4f}" for a in accs))
    assert all(abs(a - 1 / 35) <= 0.03 for a in accs)
