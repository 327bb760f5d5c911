"""Umbrella command line: generate corpora, train both stages, evaluate,
ablate, run the control experiment, and export plots.

Exit codes: 0 success, 2 validation error, 3 training/numeric failure,
4 I/O or corruption.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from . import checkpoint
from .behavior import BehaviorConfig, SystemBehaviorModel
from .codec import CodecConfig, SignalCodec
from .corpus import CorpusConfig, CorpusReader, build_corpus
from .errors import (
    CheckpointError,
    CorpusCorruptionError,
    DimensionError,
    InstabilityError,
    NumericOverflowError,
    ParameterError,
    ProbeError,
    SamplingFailureError,
    StateError,
    TrainingError,
)
from .signals import read_signal, write_signal

_VALIDATION_ERRORS = (ParameterError, DimensionError, StateError, SamplingFailureError, ProbeError)
_NUMERIC_ERRORS = (TrainingError, NumericOverflowError, InstabilityError)
_IO_ERRORS = (CorpusCorruptionError, CheckpointError, OSError)


@click.group()
def cli():
    """Two-stage in-context system identification pipeline."""


@cli.command()
@click.option("--systems", default=2000, show_default=True)
@click.option("--pairs", default=3, show_default=True)
@click.option("--length", default=2048, show_default=True)
@click.option("--lti-frac", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--jobs", default=1, show_default=True)
@click.option("--out", required=True, type=click.Path())
def generate(systems, pairs, length, lti_frac, seed, jobs, out):
    """Build a synthetic corpus directory."""
    config = CorpusConfig(
        n_systems=systems, pairs_per_system=pairs, length=length, lti_fraction=lti_frac
    )
    manifest = build_corpus(config, seed=seed, out_dir=out, n_jobs=jobs)
    click.echo(f"corpus written to {out} (sha256 {manifest.content_sha256[:16]}...)")


def _load_json_config(path, cls, tuple_fields=()):
    if path is None:
        return cls()
    data = json.loads(Path(path).read_text())
    for name in tuple_fields:
        if name in data:
            data[name] = tuple(data[name])
    return cls(**data)


@cli.command("train-codec")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def train_codec(corpus_dir, config_path, seed, out):
    """Train the signal representation model on a corpus train split."""
    config = _load_json_config(config_path, CodecConfig, tuple_fields=("strides", "channels"))
    reader = CorpusReader(corpus_dir)
    codec = SignalCodec(config=config, seed=seed)
    codec.fit(reader.signal_matrix("train"))
    codec.save(out)
    click.echo(
        f"codec trained ({codec.training_seconds_:.0f}s, "
        f"final loss {codec.loss_curve_[-1]:.5f}) -> {out}"
    )


@cli.command("train-behavior")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--codec", "codec_path", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["two-stage", "joint"]), default="two-stage",
              show_default=True)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def train_behavior(corpus_dir, codec_path, mode, config_path, seed, out):
    """Train the system behavior model (two-stage uses a frozen codec)."""
    config = _load_json_config(config_path, BehaviorConfig)
    reader = CorpusReader(corpus_dir)
    mode_key = mode.replace("-", "_")
    if mode_key == "two_stage":
        codec = SignalCodec.load(codec_path)
        codec_sha = checkpoint.file_sha256(codec_path)
    else:
        codec = SignalCodec(seed=seed)
        codec_sha = None
    model = SystemBehaviorModel(config=config, seed=seed)
    model.fit(reader, codec, mode=mode_key)
    if mode_key == "joint":
        codec.save(Path(out).with_suffix(".codec"))
        codec_sha = checkpoint.file_sha256(Path(out).with_suffix(".codec"))
    model.save(out, codec_sha256=codec_sha)
    click.echo(
        f"behavior model trained ({model.training_seconds_:.0f}s, "
        f"val one-shot rmse {model.history_['val_one_shot_rmse'][-1]:.4f}) -> {out}"
    )


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--codec", "codec_path", required=True, type=click.Path(exists=True))
@click.option("--prompt-x", required=True, type=click.Path(exists=True))
@click.option("--prompt-y", required=True, type=click.Path(exists=True))
@click.option("--query-x", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def predict(model_path, codec_path, prompt_x, prompt_y, query_x, out):
    """One-shot prediction from binary signal files."""
    codec = SignalCodec.load(codec_path)
    model = SystemBehaviorModel.load(model_path, codec=codec)
    stored = getattr(model, "codec_sha256_", None)
    if stored is not None and stored != checkpoint.file_sha256(codec_path):
        raise ParameterError(
            "codec checkpoint does not match the one this model was trained with"
        )
    signals = []
    for path in (prompt_x, prompt_y, query_x):
        with open(path, "rb") as fp:
            signals.append(read_signal(fp))
    prediction = model.one_shot(*signals)
    with open(out, "wb") as fp:
        write_signal(fp, prediction)
    click.echo(f"prediction written to {out}")


@cli.command("eval")
@click.option("--what", type=click.Choice(["codec", "one-shot", "probe"]), required=True)
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--codec", "codec_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", default=None, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def eval_cmd(what, corpus_dir, codec_path, model_path, seed, out):
    """Evaluate a trained pipeline on the corpus test split."""
    from . import harness

    reader = CorpusReader(corpus_dir)
    codec = SignalCodec.load(codec_path)
    hashes = {"codec": checkpoint.file_sha256(codec_path),
              "corpus": reader.manifest.content_sha256}
    if what == "codec":
        report = harness.eval_codec(codec, reader, checkpoint_hashes=hashes)
        Path(out).write_text(report.to_json())
        click.echo(f"codec: mean rmse {report.mean:.4f}, p95 {report.p95:.4f}")
        return
    if model_path is None:
        raise ParameterError(f"--model is required for --what {what}")
    model = SystemBehaviorModel.load(model_path, codec=codec)
    hashes["model"] = checkpoint.file_sha256(model_path)
    if what == "one-shot":
        report = harness.eval_one_shot(model, codec, reader, checkpoint_hashes=hashes)
        Path(out).write_text(report.to_json())
        base = report.extras["baselines"]
        click.echo(
            f"one-shot: mean rmse {report.mean:.4f} "
            f"(identity {base['identity_mean']:.4f}, copy {base['copy_prompt_mean']:.4f})"
        )
    else:
        probe = harness.probe_embeddings(model, codec, reader, seed=seed)
        Path(out).write_text(probe.to_json())
        click.echo(f"probe: binary accuracy {probe.binary_accuracy:.3f}")


@cli.command()
@click.option("--which", type=click.Choice(["stage-mode", "pretrain-data"]), required=True)
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--codec", "codec_path", default=None, type=click.Path(exists=True),
              help="Pretrained codec (required for stage-mode).")
@click.option("--codec-epochs", default=8, show_default=True)
@click.option("--behavior-epochs", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def ablate(which, corpus_dir, codec_path, codec_epochs, behavior_epochs, seed, out):
    """Run a pretraining ablation at reduced epoch counts and report both arms."""
    from . import harness

    reader = CorpusReader(corpus_dir)
    behavior_config = dataclasses.replace(BehaviorConfig(), epochs=behavior_epochs)
    if which == "stage-mode":
        if codec_path is None:
            raise ParameterError("--codec is required for the stage-mode ablation")
        codec = SignalCodec.load(codec_path)
        report = harness.run_stage_mode_ablation(reader, codec, behavior_config, seed=seed)
    else:
        corpus_config = CorpusConfig(
            n_systems=reader.manifest.n_systems,
            pairs_per_system=reader.manifest.pairs_per_system,
            length=reader.manifest.length,
        )
        codec_config = dataclasses.replace(CodecConfig(), epochs=codec_epochs)
        report = harness.run_pretrain_data_ablation(
            reader, Path(out).parent, corpus_config, codec_config, behavior_config, seed=seed
        )
    Path(out).write_text(report.to_json())
    for line in report.summary_lines():
        click.echo(line)


@cli.command("simulate-control")
@click.option("--plant", "plant_path", required=True, type=click.Path(exists=True))
@click.option("--protocol", "protocol_path", default=None, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--codec", "codec_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def simulate_control(plant_path, protocol_path, model_path, codec_path, out):
    """Run the feedforward comparison protocol on simulated plants."""
    from . import controlsim

    plant_doc = json.loads(Path(plant_path).read_text())
    plants = []
    for entry in plant_doc["conditions"]:
        kind = entry.pop("type")
        if kind == "single_inertia":
            plants.append(controlsim.SingleInertiaPlant(**entry))
        elif kind == "two_inertia":
            plants.append(controlsim.TwoInertiaPlant(**entry))
        else:
            raise ParameterError(f"unknown plant type {kind!r}")
    protocol_kwargs = json.loads(Path(protocol_path).read_text()) if protocol_path else {}
    if "prompt_chirp" in protocol_kwargs:
        from .signals import Chirp

        protocol_kwargs["prompt_chirp"] = Chirp(**protocol_kwargs["prompt_chirp"])
    config = controlsim.ProtocolConfig(
        plants=tuple(plants), held_out=plant_doc["held_out"], **protocol_kwargs
    )
    codec = SignalCodec.load(codec_path)
    model = SystemBehaviorModel.load(model_path, codec=codec)
    report, _ = controlsim.experiment_protocol(config, model, codec)
    report.save(out)
    for method in controlsim.METHODS:
        click.echo(
            f"{method}: held-out tracking rmse {report.rmse(method, held_out=True):.4f}"
        )


@cli.command()
@click.option("--codec-eval", default=None, type=click.Path(exists=True))
@click.option("--one-shot-eval", default=None, type=click.Path(exists=True))
@click.option("--probe", default=None, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def plot(codec_eval, one_shot_eval, probe, out):
    """Export CSV + SVG figures from saved evaluation reports."""
    from . import harness
    from .harness import EvalReport, ProbeReport

    reports = {}
    if codec_eval:
        reports["codec_eval"] = EvalReport(**json.loads(Path(codec_eval).read_text()))
    if one_shot_eval:
        reports["one_shot_eval"] = EvalReport(**json.loads(Path(one_shot_eval).read_text()))
    if probe:
        reports["probe"] = ProbeReport(**json.loads(Path(probe).read_text()))
    if not reports:
        raise ParameterError("nothing to plot: pass at least one report file")
    written = harness.export_plots(reports, out)
    click.echo(f"wrote {len(written)} files to {out}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:  # --help etc.
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc}", err=True)
        return 2
    except _VALIDATION_ERRORS as exc:
        click.echo(f"validation error: {exc}", err=True)
        return 2
    except _NUMERIC_ERRORS as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return 3
    except _IO_ERRORS as exc:
        click.echo(f"i/o error: {exc}", err=True)
        return 4


if __name__ == "__main__":
    sys.exit(main())
