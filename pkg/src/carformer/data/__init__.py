"""Synthetic condition-grounded customer-service dialogues."""
from carformer.data.synth import (
    Candidate,
    Condition,
    ConditionSchema,
    CorruptionSpec,
    Dataset,
    DialogueSample,
    GenerationError,
    Intent,
    World,
    build_default_schema,
    corrupt,
    generate_dataset,
    gold_answer,
    load_world,
    read_jsonl,
    render_dialogue,
    write_jsonl,
)

__all__ = [
    "Candidate", "Condition", "ConditionSchema", "CorruptionSpec", "Dataset", "DialogueSample",
    "GenerationError", "Intent", "World", "build_default_schema", "corrupt", "generate_dataset",
    "gold_answer", "load_world", "read_jsonl", "render_dialogue", "write_jsonl",
]
