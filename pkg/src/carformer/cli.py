"""Command line entry points.

Every option can also come from a JSON config file given with ``--config``;
its top-level keys are subcommand names holding option values, e.g.
``{"train": {"epochs": 12}}``. Precedence is command line > config file >
built-in defaults, and the resolved settings are printed when a command starts.

Exit codes: 0 ok, 1 check or acceptance failure, 2 usage error, 3 I/O error.
"""
from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
DATA_DIR_ENV = "CARFORMER_DATA_DIR"
SPLITS = ("train", "valid", "test")
WORLD_FILE, STATS_FILE, LOG_FILE = "world.json", "stats.json", "train_log.jsonl"


class CheckFailed(click.ClickException):
    exit_code = EXIT_FAIL


class IOFailure(click.ClickException):
    exit_code = EXIT_IO


def _default_data_dir() -> str:
    return os.environ.get(DATA_DIR_ENV, "data")


def _echo_settings(ctx: click.Context) -> None:
    """Print resolved options and where each value came from."""
    click.echo(f"# {ctx.info_name}", err=True)
    for name, value in sorted(ctx.params.items()):
        source = ctx.get_parameter_source(name)
        origin = {"COMMANDLINE": "cli", "DEFAULT_MAP": "config", "ENVIRONMENT": "env"}.get(
            source.name if source else "", "default")
        shown = "<preset>" if value is None else repr(value)
        click.echo(f"#   {name} = {shown} ({origin})", err=True)


def _load_config(ctx: click.Context, _param, path):
    if path is None:
        return None
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise click.BadParameter(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
        raise click.BadParameter("config must map subcommand names to option objects")
    ctx.default_map = {k.replace("_", "-"): v for k, v in data.items()}
    return path


def _load_world(data_dir: Path):
    from carformer.data.synth import ConfigError, default_world, load_world
    path = data_dir / WORLD_FILE
    if not path.exists():
        return default_world()
    try:
        return load_world(path)
    except (ConfigError, KeyError, json.JSONDecodeError) as exc:
        raise IOFailure(f"bad world file {path}: {exc}") from None


def _read_split(data_dir: Path, split: str, world):
    from carformer.data.synth import DatasetFormatError, read_jsonl
    path = data_dir / f"{split}.jsonl"
    try:
        return read_jsonl(path, world.schema, world.candidates)
    except FileNotFoundError:
        raise IOFailure(f"missing {path}; run gen-data first") from None
    except (DatasetFormatError, OSError) as exc:
        raise IOFailure(str(exc)) from None


def _load_model(path: Path):
    from carformer.checkpoint import CheckpointError, load_checkpoint
    try:
        model, vocab, manifest = load_checkpoint(path)
    except (CheckpointError, OSError) as exc:
        raise IOFailure(f"cannot load checkpoint {path}: {exc}") from None
    if vocab is None:
        raise IOFailure(f"checkpoint {path} has no vocabulary")
    return model, vocab, manifest


def _write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from None


def _model_options(f):
    for opt in reversed([
        click.option("--d", type=click.IntRange(1), default=None, help="Model width."),
        click.option("--heads", type=click.IntRange(1), default=None),
        click.option("--encoder-layers", type=click.IntRange(1), default=None),
        click.option("--reviser-layers", type=click.IntRange(1), default=None),
        click.option("--eta", type=click.FloatRange(0, 1), default=None,
                     help="Weight of the conditions loss."),
    ]):
        f = opt(f)
    return f


def _training_options(f):
    for opt in reversed([
        click.option("--epochs", type=click.IntRange(0), default=None),
        click.option("--batch-size", type=click.IntRange(1), default=None),
        click.option("--lr", type=click.FloatRange(0, min_open=True), default=None),
        click.option("--patience", type=click.IntRange(1), default=None),
        click.option("--augment-slot-rate", type=click.FloatRange(0, 1), default=None,
                     help="Extra per-slot corruption of training batches."),
        click.option("--select-by", type=click.Choice(["accuracy", "bleu"]), default=None),
        click.option("--lr-schedule", type=click.Choice(["constant", "linear"]), default=None),
        click.option("--lr-decay-from", type=click.FloatRange(0, 1, max_open=True), default=None,
                     help="Fraction of steps at full rate before a linear schedule decays."),
    ]):
        f = opt(f)
    return f


def _overrides(params: dict, keys) -> dict:
    return {k: params[k] for k in keys if params.get(k) is not None}


MODEL_KEYS = ("d", "heads", "encoder_layers", "reviser_layers", "eta")
TRAIN_KEYS = ("epochs", "batch_size", "lr", "lr_schedule", "lr_decay_from", "patience", "augment_slot_rate", "select_by")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", type=click.Path(dir_okay=False), callback=_load_config,
              is_eager=True, expose_value=False, help="JSON file of per-command option defaults.")
@click.option("-v", "--verbose", is_flag=True, help="Log training progress.")
def main(verbose: bool) -> None:
    """Condition-aware answer selection with a conditions reviser."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)


@main.command("gen-data")
@click.option("--size", type=click.IntRange(1), default=5000, show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(file_okay=False), default=_default_data_dir,
              help=f"Output directory (default ${DATA_DIR_ENV} or ./data).")
@click.option("--defect-rate", type=click.FloatRange(0, 1, max_open=True), default=0.2, show_default=True,
              help="Target fraction of samples with at least one defective condition.")
@click.option("--unknown-share", type=click.FloatRange(0, 1), default=0.5, show_default=True)
@click.option("--world", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Alternative world definition.")
@click.pass_context
def gen_data(ctx, size, seed, out, defect_rate, unknown_share, world):
    """Generate train/valid/test JSONL files, the world definition and stats."""
    from carformer.data.synth import (ConfigError, CorruptionSpec, dataset_stats,
                                      default_world, generate_dataset, load_world, write_jsonl)
    _echo_settings(ctx)
    w = load_world(world) if world else default_world()
    spec = CorruptionSpec.from_target_rate(defect_rate, len(w.schema), unknown_share)
    try:
        data = generate_dataset(size, spec=spec, seed=seed, world=w)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from None
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, split in data.splits().items():
            write_jsonl(split, out / f"{name}.jsonl", w.schema)
        (out / WORLD_FILE).write_text(w.to_json())
    except OSError as exc:
        raise IOFailure(f"cannot write dataset to {out}: {exc}") from None
    stats = {"seed": seed, "size": size, "target_defect_rate": defect_rate,
             "per_slot_rates": {"wrong": spec.p_wrong, "unknown": spec.p_unknown},
             "splits": dataset_stats(data)}
    _write_json(out / STATS_FILE, stats)
    for name, split in data.splits().items():
        click.echo(f"{name}: {len(split)} samples, defect rate {stats['splits'][name]['defect_rate']:.4f}")


@main.command("train")
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=_default_data_dir)
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Checkpoint directory.")
@click.option("--seed", type=int, required=True)
@click.option("--variant", type=click.Choice(["car", "ca"]), default="car", show_default=True)
@_model_options
@_training_options
@click.pass_context
def train_cmd(ctx, data_dir, out, seed, variant, **params):
    """Train a model and save the best-validation checkpoint with its log."""
    from carformer.checkpoint import save_checkpoint
    from carformer.data.vocab import Vocab
    from carformer.model import CarModel, ModelConfig
    from carformer.train import TrainConfig, train
    _echo_settings(ctx)
    data_dir, out = Path(data_dir), Path(out)
    world = _load_world(data_dir)
    train_set = _read_split(data_dir, "train", world)
    valid_set = _read_split(data_dir, "valid", world)
    vocab = Vocab.from_world(world)
    try:
        cfg = ModelConfig(vocab_size=len(vocab), variant=variant, candidate_count=world.candidate_count,
                          condition_sizes=world.schema.sizes, **_overrides(params, MODEL_KEYS))
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    tcfg = TrainConfig(seed=seed, **_overrides(params, TRAIN_KEYS))
    model = CarModel(cfg, seed=seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out}: {exc}") from None
    result = train(model, train_set, vocab, tcfg, valid_set, log_path=out / LOG_FILE,
                   candidate_tokens=[c.tokens for c in world.candidates], schema=world.schema)
    save_checkpoint(model, out, vocab, meta={"training": tcfg.to_dict(), "best_epoch": result.best_epoch,
                                             "best_score": result.best_score})
    click.echo(f"trained {variant} for {len(result.log)} epochs; best epoch {result.best_epoch} "
               f"(validation {tcfg.select_by} {result.best_score:.4f}); saved {out}")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(file_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=_default_data_dir)
@click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)
@click.option("--report", type=click.Path(dir_okay=False), default=None, help="Write metrics JSON here.")
@click.option("--predictions", type=click.Path(dir_okay=False), default=None,
              help="Write one JSON line per sample with the predicted and gold ids.")
@click.option("--pca-out", type=click.Path(dir_okay=False), default=None,
              help="Write 2-D PCA coordinates of the conditions vectors.")
@click.option("--standard-bp", is_flag=True, help="Exponential brevity penalty for BLEU.")
@click.pass_context
def eval_cmd(ctx, checkpoint, data_dir, split, report, predictions, pca_out, standard_bp):
    """Accuracy, BLEU-1..4 and revision rates, overall and on defective samples."""
    from carformer.metrics import pca_project
    from carformer.train import evaluate
    _echo_settings(ctx)
    data_dir = Path(data_dir)
    model, vocab, _ = _load_model(Path(checkpoint))
    world = _load_world(data_dir)
    samples = _read_split(data_dir, split, world)
    if not samples:
        raise IOFailure(f"{split} split is empty")
    cand = [c.tokens for c in world.candidates]
    metrics, out = evaluate(model, samples, vocab, cand, standard_bp, return_predictions=True)
    defective = [s for s in samples if s.is_defective]
    sections = {"overall": metrics.to_dict()}
    if defective:
        sections["defective"] = evaluate(model, defective, vocab, cand, standard_bp).to_dict(with_confusion=False)
    for name, m in sections.items():
        rev = "" if m["revision_accuracy"] is None else \
            f" revision {m['revision_accuracy']:.4f} damage {m['revision_damage']:.4f}"
        click.echo(f"{name}: n={m['samples']} accuracy {m['accuracy']:.4f} "
                   f"BLEU-1..4 {' '.join(f'{b:.4f}' for b in m['bleu'])}{rev}")
    if report:
        _write_json(Path(report), {"checkpoint": str(checkpoint), "split": split, **sections})
    if predictions:
        try:
            with open(predictions, "w", encoding="utf-8") as fh:
                for s, p, r in zip(samples, out["answers"], out["revised"]):
                    fh.write(json.dumps({"id": s.id, "predicted": int(p), "gold": int(s.gold_label),
                                         "revised": [int(v) for v in r]}) + "\n")
        except OSError as exc:
            raise IOFailure(f"cannot write {predictions}: {exc}") from None
    if pca_out:
        coords, var = pca_project(out["conditions_vectors"], 2)
        _write_json(Path(pca_out), {"explained_variance": var.tolist(),
                                    "points": [{"id": s.id, "x": float(x), "y": float(y)}
                                               for s, (x, y) in zip(samples, coords)]})


@main.command("ablation")
@click.option("--seeds", default="1,2,3,4,5", show_default=True, help="Comma-separated seeds.")
@click.option("--size", type=click.IntRange(1), default=5000, show_default=True)
@click.option("--defect-rate", type=click.FloatRange(0, 1, max_open=True), default=0.2, show_default=True)
@click.option("--unknown-share", type=click.FloatRange(0, 1), default=0.5, show_default=True)
@click.option("--report", type=click.Path(dir_okay=False), default="ablation_report.json", show_default=True)
@click.option("--check", is_flag=True,
              help="Exit 1 unless the reviser beats the no-reviser variant on defective samples.")
@_model_options
@_training_options
@click.pass_context
def ablation_cmd(ctx, seeds, size, defect_rate, unknown_share, report, check, **params):
    """Train with and without the reviser on identical data and compare."""
    from carformer.train import AblationConfig, reference_model, reference_training, run_ablation
    _echo_settings(ctx)
    try:
        seed_list = tuple(int(s) for s in seeds.split(",") if s.strip())
    except ValueError:
        raise click.BadParameter(f"seeds must be comma-separated integers, got {seeds!r}") from None
    if not seed_list:
        raise click.BadParameter("at least one seed is required")
    try:
        mcfg = reference_model(**_overrides(params, MODEL_KEYS))
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    cfg = AblationConfig(seeds=seed_list, data_size=size, defect_rate=defect_rate,
                         unknown_share=unknown_share, model=mcfg,
                         training=reference_training(**_overrides(params, TRAIN_KEYS)))
    try:
        rep = run_ablation(cfg, report)
    except OSError as exc:
        raise IOFailure(str(exc)) from None
    click.echo(f"{'seed':>4} {'car':>8} {'ca':>8} {'car-def':>8} {'ca-def':>8} {'revise':>7} {'damage':>7}")
    for r in rep["per_seed"]:
        car, ca = r["car"], r["ca"]
        click.echo(f"{r['seed']:>4} {car['overall']['accuracy']:8.4f} {ca['overall']['accuracy']:8.4f} "
                   f"{car['defective']['accuracy']:8.4f} {ca['defective']['accuracy']:8.4f} "
                   f"{car['overall']['revision_accuracy']:7.4f} {car['overall']['revision_damage']:7.4f}")
    s = rep["summary"]
    n = len(seed_list)
    click.echo(f"reviser better on defective samples in {s['car_beats_ca_on_defective']}/{n} seeds; "
               f"within 1 point overall in {s['car_within_1pt_overall']}/{n}; report {report}")
    if check and not (s["car_beats_ca_on_defective"] >= max(1, int(np.ceil(0.8 * n)))
                      and s["car_within_1pt_overall"] == n):
        raise CheckFailed("directional comparison failed")


@main.command("grad-check")
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def grad_check_cmd(ctx, seed):
    """Finite-difference checks of every op and of the micro-model loss."""
    from carformer.gradcheck import run_suite
    _echo_settings(ctx)
    results = run_suite(seed)
    click.echo(f"{'check':<22} {'rel err':>10} {'tol':>8}  status")
    for r in results:
        click.echo(f"{r.name:<22} {r.error:10.3e} {r.tolerance:8.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CheckFailed(f"gradient check failed: {', '.join(failed)}")


@main.command("revise")
@click.option("--checkpoint", type=click.Path(file_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=_default_data_dir)
@click.option("--split", type=click.Choice(SPLITS), default="test", show_default=True)
@click.option("--ids", default=None, help="Comma-separated sample ids.")
@click.option("--limit", type=click.IntRange(1), default=5, show_default=True,
              help="Number of defective samples shown when --ids is not given.")
@click.pass_context
def revise_cmd(ctx, checkpoint, data_dir, split, ids, limit):
    """Show observed, revised and true conditions with predicted and gold answers."""
    from carformer.model import predict
    _echo_settings(ctx)
    data_dir = Path(data_dir)
    model, vocab, _ = _load_model(Path(checkpoint))
    world = _load_world(data_dir)
    samples = _read_split(data_dir, split, world)
    if ids:
        wanted = [i.strip() for i in ids.split(",") if i.strip()]
        by_id = {s.id: s for s in samples}
        missing = [i for i in wanted if i not in by_id]
        if missing:
            raise click.BadParameter(f"unknown sample id(s): {', '.join(missing)}")
        chosen = [by_id[i] for i in wanted]
    else:
        chosen = [s for s in samples if s.is_defective][:limit]
    if not chosen:
        click.echo("no samples selected")
        return
    out = predict(model, chosen, vocab)
    schema = world.schema
    for s, pred, rev in zip(chosen, out["answers"], out["revised"]):
        click.echo(f"== {s.id}")
        click.echo(f"   dialogue: {' | '.join(' '.join(u) for u in s.history)} || {' '.join(s.question)}")
        click.echo(f"   {'condition':<18} {'observed':<22} {'revised':<22} {'true':<22}")
        for slot, cond in enumerate(schema):
            o, r, t = s.observed_conditions[slot], int(rev[slot]), s.true_conditions[slot]
            flag = "" if o == t else ("  fixed" if r == t else "  defective")
            click.echo(f"   {cond.key:<18} {cond.values[o]:<22} {cond.values[r]:<22} {cond.values[t]:<22}{flag}")
        click.echo(f"   predicted: {world.candidates[pred].label}: {world.candidates[pred].text}")
        click.echo(f"   gold:      {world.candidates[s.gold_label].label}: {world.candidates[s.gold_label].text}")


if __name__ == "__main__":
    main()
