"""Synthetic customer-service dialogues whose gold answer depends on order conditions.

A *world* file (``default_world.json``) declares the condition schema, a
prior over true condition values, lexical clue phrases for every value,
intents with question templates and first-match decision tables, and the
candidate answer texts. Generation draws an intent and true conditions,
renders a dialogue that mentions clues for the conditions, derives the
gold answer from the *true* conditions and then corrupts the observed
copy of the conditions.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WORLD_FORMAT = "carformer-world/1"
UNKNOWN = "Unknown"
NULL = "Null"

_SLOT = re.compile(r"\{([a-z_]+)\}")


class GenerationError(RuntimeError):
    """The world definition cannot produce a label for an assignment."""


class SchemaError(ValueError):
    """A condition value or name does not belong to the schema."""


class ConfigError(ValueError):
    """Invalid generation settings or world file."""


@dataclass(frozen=True)
class Condition:
    key: str
    name: str
    values: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ConditionSchema:
    conditions: tuple[Condition, ...]

    def __post_init__(self):
        keys = [c.key for c in self.conditions]
        names = [c.name for c in self.conditions]
        if len(set(keys)) != len(keys) or len(set(names)) != len(names):
            raise ConfigError("condition keys and names must be unique")
        for c in self.conditions:
            if not c.values or len(set(c.values)) != len(c.values):
                raise ConfigError(f"condition {c.name!r} needs a nonempty vocabulary of distinct values")

    def __len__(self) -> int:
        return len(self.conditions)

    def __iter__(self):
        return iter(self.conditions)

    def __getitem__(self, i: int) -> Condition:
        return self.conditions[i]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.conditions)

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(c.key for c in self.conditions)

    def index(self, key: str) -> int:
        for i, c in enumerate(self.conditions):
            if c.key == key or c.name == key:
                return i
        raise SchemaError(f"no condition named {key!r}")

    def value_id(self, slot: int, value: str) -> int:
        try:
            return self.conditions[slot].values.index(value)
        except ValueError:
            raise SchemaError(f"{value!r} is not a value of {self.conditions[slot].name!r}") from None

    def missing_id(self, slot: int) -> int | None:
        """Id of the marker used for a missing value: Unknown, else Null, else None."""
        values = self.conditions[slot].values
        for marker in (UNKNOWN, NULL):
            if marker in values:
                return values.index(marker)
        return None

    def unknown_id(self, slot: int) -> int | None:
        values = self.conditions[slot].values
        return values.index(UNKNOWN) if UNKNOWN in values else None

    def encode(self, named: dict[str, str]) -> tuple[int, ...]:
        if set(named) != set(self.keys):
            raise SchemaError(f"assignment keys {sorted(named)} != schema keys {sorted(self.keys)}")
        return tuple(self.value_id(i, named[c.key]) for i, c in enumerate(self.conditions))

    def decode(self, ids: Sequence[int]) -> dict[str, str]:
        self.validate(ids)
        return {c.key: c.values[v] for c, v in zip(self.conditions, ids)}

    def validate(self, ids: Sequence[int]) -> None:
        if len(ids) != len(self.conditions):
            raise SchemaError(f"assignment has {len(ids)} values, schema has {len(self.conditions)}")
        for c, v in zip(self.conditions, ids):
            if not 0 <= int(v) < len(c):
                raise SchemaError(f"value id {v} out of range for {c.name!r} ({len(c)} values)")


@dataclass(frozen=True)
class Candidate:
    label: str
    text: str

    @property
    def tokens(self) -> list[str]:
        return self.text.split()


@dataclass
class Intent:
    id: int
    name: str
    weight: float
    reads: tuple[int, ...]
    templates: tuple[str, ...]
    # first-match rules: (slot -> allowed value ids, candidate id)
    rules: tuple[tuple[dict[int, frozenset[int]], int], ...]

    @property
    def labels(self) -> set[int]:
        return {label for _, label in self.rules}


@dataclass
class CorruptionSpec:
    """Independent per-slot corruption.

    Each slot is replaced by its missing marker with probability
    ``p_unknown`` and by a different legal value with probability
    ``p_wrong`` (never both). Slots that have no missing marker distinct
    from the true value get a wrong value instead, so every slot is
    defective with probability exactly ``p_wrong + p_unknown``.
    """
    p_wrong: float = 0.0
    p_unknown: float = 0.0
    target_rate: float | None = None

    def __post_init__(self):
        for name in ("p_wrong", "p_unknown"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.p_wrong + self.p_unknown > 1.0:
            raise ConfigError("p_wrong + p_unknown must not exceed 1")

    @classmethod
    def from_target_rate(cls, rate: float = 0.2, slots: int = 7,
                         unknown_share: float = 0.5) -> "CorruptionSpec":
        """Per-slot rates giving ``rate`` = P(at least one defective slot)."""
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"target rate must lie in [0, 1), got {rate}")
        q = 1.0 - (1.0 - rate) ** (1.0 / slots)
        return cls(p_wrong=q * (1.0 - unknown_share), p_unknown=q * unknown_share,
                   target_rate=rate)

    def sample_defect_rate(self, slots: int) -> float:
        return 1.0 - (1.0 - self.p_wrong - self.p_unknown) ** slots


@dataclass
class DialogueSample:
    id: str
    history: list[list[str]]
    question: list[str]
    observed_conditions: tuple[int, ...]
    true_conditions: tuple[int, ...]
    gold_label: int
    intent: str = ""
    corruption: dict[int, str] = field(default_factory=dict)
    gold_text: list[str] = field(default_factory=list)

    @property
    def is_defective(self) -> bool:
        return bool(self.corruption)


@dataclass
class World:
    schema: ConditionSchema
    prior: dict
    clues: dict[str, dict[str, list[str]]]
    fillers: dict[str, list[str]]
    intents: list[Intent]
    candidates: list[Candidate]
    raw: dict
    mention_rate: float = 1.0
    neutral: dict[str, list[str]] = field(default_factory=dict)

    @property
    def candidate_count(self) -> int:
        return len(self.candidates)

    def label_id(self, label: str) -> int:
        for i, c in enumerate(self.candidates):
            if c.label == label:
                return i
        raise ConfigError(f"unknown candidate label {label!r}")

    def intent(self, name: str) -> Intent:
        for it in self.intents:
            if it.name == name:
                return it
        raise ConfigError(f"unknown intent {name!r}")

    def word_list(self) -> list[str]:
        """Every word the generator can emit, sorted."""
        words: set[str] = set()
        texts: list[str] = []
        for per_value in self.clues.values():
            for phrases in per_value.values():
                texts.extend(phrases)
        for phrases in self.fillers.values():
            texts.extend(phrases)
        for phrases in self.neutral.values():
            texts.extend(phrases)
        for it in self.intents:
            texts.extend(_SLOT.sub(" ", t) for t in it.templates)
        texts.extend(c.text for c in self.candidates)
        for t in texts:
            words.update(t.split())
        return sorted(words)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def _world_from_dict(raw: dict) -> World:
    if raw.get("format") != WORLD_FORMAT:
        raise ConfigError(f"world file format {raw.get('format')!r}, expected {WORLD_FORMAT!r}")
    schema = ConditionSchema(tuple(
        Condition(c["key"], c["name"], tuple(c["values"])) for c in raw["schema"]))
    candidates = [Candidate(c["label"], c["text"]) for c in raw["candidates"]]
    labels = [c.label for c in candidates]
    if len(set(labels)) != len(labels):
        raise ConfigError("candidate labels must be unique")

    clues = raw["clues"]
    for i, cond in enumerate(schema):
        for v in cond.values:
            if v != UNKNOWN and not clues.get(cond.key, {}).get(v):
                raise ConfigError(f"no clue phrases for {cond.key}={v!r}")

    mention_rate = float(raw.get("mention_rate", 1.0))
    if not 0.0 <= mention_rate <= 1.0:
        raise ConfigError(f"mention_rate must lie in [0, 1], got {mention_rate}")
    neutral = raw.get("neutral", {})
    if mention_rate < 1.0:
        for cond in schema:
            if not neutral.get(cond.key):
                raise ConfigError(f"no neutral phrases for {cond.key!r} while mention_rate < 1")

    intents = []
    for n, it in enumerate(raw["intents"]):
        reads = tuple(schema.index(k) for k in it["reads"])
        templates = tuple(it["templates"])
        if len(templates) < 3:
            raise ConfigError(f"intent {it['name']!r} needs at least 3 templates")
        for t in templates:
            slots = _SLOT.findall(t)
            if sorted(slots) != sorted(it["reads"]):
                raise ConfigError(f"template {t!r} must have exactly one slot per read condition {it['reads']}")
        rules = []
        for r in it["rules"]:
            when = {}
            for key, vals in r["when"].items():
                slot = schema.index(key)
                if slot not in reads:
                    raise ConfigError(f"intent {it['name']!r} rule reads undeclared condition {key!r}")
                when[slot] = frozenset(schema.value_id(slot, v) for v in vals)
            label = labels.index(r["answer"]) if r["answer"] in labels else None
            if label is None:
                raise ConfigError(f"rule answer {r['answer']!r} is not a candidate")
            rules.append((when, label))
        intents.append(Intent(n, it["name"], float(it.get("weight", 1.0)), reads, templates, tuple(rules)))
    return World(schema, raw["prior"], clues, raw["fillers"], intents, candidates, raw,
                 mention_rate, neutral)


def load_world(path: str | Path | None = None) -> World:
    """Load a world definition; the packaged default when ``path`` is None."""
    if path is None:
        text = resources.files("carformer.data").joinpath("default_world.json").read_text()
    else:
        text = Path(path).read_text()
    return _world_from_dict(json.loads(text))


_DEFAULT_WORLD: World | None = None


def default_world() -> World:
    global _DEFAULT_WORLD
    if _DEFAULT_WORLD is None:
        _DEFAULT_WORLD = load_world()
    return _DEFAULT_WORLD


def build_default_schema() -> ConditionSchema:
    """The seven order conditions with their value sets."""
    return default_world().schema


# -- gold answers ----------------------------------------------------------

def gold_answer(intent: Intent, true_conditions: Sequence[int]) -> int:
    """Candidate id chosen by the intent's first matching rule."""
    for slot in intent.reads:
        if slot >= len(true_conditions):
            raise GenerationError(f"intent {intent.name!r} reads slot {slot} beyond the assignment")
    for when, label in intent.rules:
        if all(true_conditions[slot] in allowed for slot, allowed in when.items()):
            return label
    raise GenerationError(
        f"intent {intent.name!r} has no rule for conditions {tuple(true_conditions)}")


def reachable_assignments(world: World, intent: Intent):
    """All value combinations of the intent's read slots, excluding Unknown."""
    schema = world.schema
    choices = []
    for slot in intent.reads:
        unk = schema.unknown_id(slot)
        choices.append([v for v in range(len(schema[slot])) if v != unk])
    base = [0] * len(schema)
    for combo in _product(choices):
        a = list(base)
        for slot, v in zip(intent.reads, combo):
            a[slot] = v
        yield tuple(a)


def _product(choices):
    if not choices:
        yield ()
        return
    for v in choices[0]:
        for rest in _product(choices[1:]):
            yield (v,) + rest


# -- sampling --------------------------------------------------------------

def _draw(rng: np.random.Generator, weights: dict[str, float]) -> str:
    names = list(weights)
    p = np.array([weights[n] for n in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=p / p.sum()))]


def sample_true_conditions(world: World, rng: np.random.Generator) -> tuple[int, ...]:
    named: dict[str, str] = {}
    for cond in world.schema:
        spec = world.prior[cond.key]
        if "weights" in spec:
            named[cond.key] = _draw(rng, spec["weights"])
        else:
            named[cond.key] = _draw(rng, spec["cases"][named[spec["given"]]])
    return world.schema.encode(named)


def _pick(rng: np.random.Generator, options: Sequence[str]) -> str:
    return options[int(rng.integers(len(options)))]


def render_dialogue(intent: Intent, true_conditions: Sequence[int], rng: np.random.Generator,
                    world: World | None = None, return_clues: bool = False):
    """Fill templates for one dialogue.

    Each condition is mentioned with probability ``world.mention_rate``,
    independently of any corruption. A mentioned condition the intent's
    rules read gets a clue phrase in the question, and an unmentioned one
    a neutral phrase; mentioned remaining conditions are spread over two
    history utterances. Returns ``(history, question)`` as token lists,
    plus the clue phrase of each mentioned slot when ``return_clues`` is set.
    """
    world = world or default_world()
    schema = world.schema
    chosen: dict[int, str] = {}
    mentioned = rng.random(len(schema)) < world.mention_rate

    def clue(slot: int) -> str:
        cond = schema[slot]
        if not mentioned[slot]:
            return _pick(rng, world.neutral[cond.key])
        phrase = _pick(rng, world.clues[cond.key][cond.values[true_conditions[slot]]])
        chosen[slot] = phrase
        return phrase

    template = _pick(rng, intent.templates)
    body = _SLOT.sub(lambda mt: clue(schema.index(mt.group(1))), template)
    question = f"{_pick(rng, world.fillers['opener'])} {body} {_pick(rng, world.fillers['closer'])}"

    others = [s for s in range(len(schema)) if s not in intent.reads and mentioned[s]]
    others = [others[i] for i in rng.permutation(len(others))]
    half = (len(others) + 1) // 2
    history = []
    for part in (others[:half], others[half:]):
        if not part:
            continue
        pieces = [_pick(rng, world.fillers["history_opener"]), clue(part[0])]
        for slot in part[1:]:
            pieces += [_pick(rng, world.fillers["joiner"]), clue(slot)]
        history.append(" ".join(pieces).split())
    if rng.random() < 0.3:
        history.insert(0, _pick(rng, world.fillers["chitchat"]).split())

    out = (history, question.split())
    if return_clues:
        return out + (chosen,)
    return out


def corrupt(true_conditions: Sequence[int], spec: CorruptionSpec, rng: np.random.Generator,
            schema: ConditionSchema | None = None) -> tuple[tuple[int, ...], dict[int, str]]:
    """Observed copy of the conditions plus a record {slot: "wrong" | "unknown"}."""
    schema = schema or build_default_schema()
    observed = list(true_conditions)
    record: dict[int, str] = {}
    for slot, true_v in enumerate(true_conditions):
        u = rng.random()
        if u >= spec.p_unknown + spec.p_wrong:
            continue
        missing = schema.missing_id(slot)
        if u < spec.p_unknown and missing is not None and missing != true_v:
            observed[slot] = missing
            record[slot] = "unknown"
            continue
        unk = schema.unknown_id(slot)
        pool = [v for v in range(len(schema[slot])) if v != true_v and v != unk]
        observed[slot] = pool[int(rng.integers(len(pool)))]
        record[slot] = "wrong"
    return tuple(observed), record


@dataclass
class Dataset:
    train: list[DialogueSample]
    valid: list[DialogueSample]
    test: list[DialogueSample]
    candidates: list[Candidate]
    world: World

    def splits(self) -> dict[str, list[DialogueSample]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


def _make_sample(world: World, intent: Intent, true: tuple[int, ...], spec: CorruptionSpec,
                 rng: np.random.Generator) -> DialogueSample:
    history, question = render_dialogue(intent, true, rng, world)
    observed, record = corrupt(true, spec, rng, world.schema)
    label = gold_answer(intent, true)
    return DialogueSample("", history, question, observed, true, label, intent.name, record,
                          world.candidates[label].tokens)


def generate_dataset(size: int, ratios: Sequence[float] = (0.7, 0.1, 0.2),
                     spec: CorruptionSpec | None = None, seed: int = 1,
                     world: World | None = None) -> Dataset:
    """Generate train/valid/test splits.

    The training split is seeded with one sample per candidate label so no
    class is empty there; everything else is drawn from the intent weights
    and the condition prior.
    """
    world = world or default_world()
    spec = spec if spec is not None else CorruptionSpec.from_target_rate(0.2, len(world.schema))
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(size * ratios[0]))
    n_valid = int(round(size * ratios[1]))
    n_test = size - n_train - n_valid
    if size < world.candidate_count or n_train < world.candidate_count:
        raise ConfigError(f"dataset size {size} too small for {world.candidate_count} candidates")

    rng = np.random.default_rng(seed)
    weights = np.array([it.weight for it in world.intents])
    weights = weights / weights.sum()

    forced = []
    for label in range(world.candidate_count):
        owners = [it for it in world.intents if label in it.labels]
        if not owners:
            raise GenerationError(f"no intent can produce candidate {world.candidates[label].label!r}")
        for _ in range(100_000):
            intent = owners[int(rng.integers(len(owners)))]
            true = sample_true_conditions(world, rng)
            if gold_answer(intent, true) == label:
                forced.append(_make_sample(world, intent, true, spec, rng))
                break
        else:
            raise GenerationError(f"could not reach candidate {world.candidates[label].label!r}")

    drawn = []
    for _ in range(size - len(forced)):
        intent = world.intents[int(rng.choice(len(world.intents), p=weights))]
        drawn.append(_make_sample(world, intent, sample_true_conditions(world, rng), spec, rng))

    train = forced + drawn[: n_train - len(forced)]
    rest = drawn[n_train - len(forced):]
    train = [train[i] for i in rng.permutation(len(train))]
    valid, test = rest[:n_valid], rest[n_valid:n_valid + n_test]
    for prefix, split in (("train", train), ("valid", valid), ("test", test)):
        for i, s in enumerate(split):
            s.id = f"{prefix}-{i:06d}"
    return Dataset(train, valid, test, list(world.candidates), world)


def dataset_stats(dataset: Dataset) -> dict:
    out = {}
    for name, split in dataset.splits().items():
        n = len(split)
        hist = np.bincount([s.gold_label for s in split], minlength=dataset.world.candidate_count)
        qlens = [len(s.question) for s in split]
        out[name] = {
            "samples": n,
            "defect_rate": sum(s.is_defective for s in split) / n if n else 0.0,
            "mean_question_len": float(np.mean(qlens)) if n else 0.0,
            "questions_longer_than_40": float(np.mean([q > 40 for q in qlens])) if n else 0.0,
            "label_histogram": {dataset.candidates[i].label: int(c) for i, c in enumerate(hist)},
        }
    return out


# -- JSONL -------------------------------------------------------------------

_FIELDS = ("id", "intent", "history", "question", "observed_conditions", "true_conditions",
           "gold_label", "corruption")
_REQUIRED = set(_FIELDS) - {"intent"}


class DatasetFormatError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


def sample_to_record(s: DialogueSample, schema: ConditionSchema) -> dict:
    return {
        "id": s.id,
        "intent": s.intent,
        "history": s.history,
        "question": s.question,
        "observed_conditions": schema.decode(s.observed_conditions),
        "true_conditions": schema.decode(s.true_conditions),
        "gold_label": int(s.gold_label),
        "corruption": {schema[slot].key: kind for slot, kind in sorted(s.corruption.items())},
    }


def record_to_sample(rec: dict, schema: ConditionSchema,
                     candidates: Sequence[Candidate] | None = None) -> DialogueSample:
    unknown = set(rec) - set(_FIELDS)
    if unknown:
        raise ValueError(f"unknown field(s) {sorted(unknown)}")
    missing = _REQUIRED - set(rec)
    if missing:
        raise ValueError(f"missing field(s) {sorted(missing)}")
    label = rec["gold_label"]
    if not isinstance(label, int) or (candidates is not None and not 0 <= label < len(candidates)):
        raise ValueError(f"gold_label {label!r} is not a valid candidate id")
    corruption = {schema.index(k): v for k, v in rec["corruption"].items()}
    if any(v not in ("wrong", "unknown") for v in corruption.values()):
        raise ValueError(f"corruption kinds must be 'wrong' or 'unknown': {rec['corruption']}")
    return DialogueSample(
        id=rec["id"],
        history=[list(map(str, u)) for u in rec["history"]],
        question=list(map(str, rec["question"])),
        observed_conditions=schema.encode(rec["observed_conditions"]),
        true_conditions=schema.encode(rec["true_conditions"]),
        gold_label=label,
        intent=rec.get("intent", ""),
        corruption=corruption,
        gold_text=candidates[label].tokens if candidates is not None else [],
    )


def write_jsonl(samples: Iterable[DialogueSample], path: str | Path,
                schema: ConditionSchema | None = None) -> None:
    schema = schema or build_default_schema()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s, schema), separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path, schema: ConditionSchema | None = None,
               candidates: Sequence[Candidate] | None = None) -> list[DialogueSample]:
    schema = schema or build_default_schema()
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not a JSON object")
                out.append(record_to_sample(rec, schema, candidates))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(path, line_no, str(exc)) from None
    return out

