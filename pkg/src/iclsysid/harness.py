"""Evaluation harness: reconstruction/one-shot metrics, embedding probes,
ablation runs, and plot/CSV export.

Percentiles use the nearest-rank definition (value at index ceil(p*n) of the
sorted sample) so reports are bit-stable across platforms. Reports embed the
corpus hash and checkpoint hashes when available, and model-free baselines
(identity: predict the query input; copy: repeat the prompt output) are
computed alongside every one-shot evaluation as permanent regression oracles.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .behavior import SystemBehaviorModel, cosine_similarity
from .codec import SignalCodec
from .corpus import CorpusReader
from .errors import ParameterError, ProbeError, StateError
from .signals import rmse

FULL_SCALE_REFERENCE = {
    # Published full-scale motor-hardware RMSE values, echoed in ablation
    # reports for orientation only — desk-scale runs do not target them.
    "stage_mode": {"two_stage": 1.13, "joint": 1.20},
    "pretrain_data": {
        "ramp": {"mixed": 1.13, "lti_only": 1.17},
        "step": {"mixed": 1.79, "lti_only": 2.16},
    },
}


def nearest_rank(values, p: float) -> float:
    """Nearest-rank percentile: sorted[ceil(p/100 * n) - 1]."""
    values = sorted(values)
    if not values:
        raise ParameterError("needs at least one value")
    if not 0 < p <= 100:
        raise ParameterError("percentile must lie in (0, 100]")
    idx = max(1, math.ceil(p / 100.0 * len(values)))
    return float(values[idx - 1])


@dataclass(frozen=True)
class EvalReport:
    per_signal: tuple[float, ...]
    mean: float
    median: float
    p95: float
    split_sizes: dict
    checkpoint_hashes: dict
    config_echo: dict
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if abs(self.mean - float(np.mean(self.per_signal))) > 1e-12:
            raise ParameterError("stored mean is inconsistent with per-signal values")

    @classmethod
    def from_values(cls, values, split_sizes=None, checkpoint_hashes=None,
                    config_echo=None, extras=None) -> "EvalReport":
        values = tuple(float(v) for v in values)
        return cls(
            per_signal=values,
            mean=float(np.mean(values)),
            median=nearest_rank(values, 50.0),
            p95=nearest_rank(values, 95.0),
            split_sizes=split_sizes or {},
            checkpoint_hashes=checkpoint_hashes or {},
            config_echo=config_echo or {},
            extras=extras or {},
        )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)


@dataclass(frozen=True)
class ProbeReport:
    binary_accuracy: float
    per_class_accuracy: dict
    confusion: dict
    filter_class_accuracy: float | None
    intra_system_cosine: float
    inter_system_cosine: float
    projection: list  # [[x, y, label], ...] 2-D coordinates for plotting
    split_sizes: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)


# --- codec evaluation ----------------------------------------------------------


def eval_codec(codec: SignalCodec, reader: CorpusReader,
               checkpoint_hashes: dict | None = None) -> EvalReport:
    """Reconstruction RMSE over every x and y signal of the test split."""
    if not codec.is_fitted:
        raise StateError("eval_codec needs a trained codec")
    rows = reader.signal_matrix("test")
    latents = codec.transform(rows)
    recon = codec.inverse_transform(latents, original_length=rows.shape[1])
    errors = np.sqrt(np.mean((recon - rows) ** 2, axis=1))
    p95_idx = int(np.argsort(errors)[max(0, math.ceil(0.95 * errors.size) - 1)])
    extras = {
        "p95_overlay": {
            "signal_index": p95_idx,
            "original": rows[p95_idx].astype(float).tolist(),
            "reconstruction": recon[p95_idx].astype(float).tolist(),
        }
    }
    return EvalReport.from_values(
        errors,
        split_sizes={"test_signals": int(rows.shape[0])},
        checkpoint_hashes=checkpoint_hashes or {"corpus": reader.manifest.content_sha256},
        config_echo=dataclasses.asdict(codec.config),
        extras=extras,
    )


# --- one-shot evaluation ----------------------------------------------------------


def _one_shot_cases(reader: CorpusReader):
    """(prompt, query) record pairs: pair 0 prompts, every later pair queries."""
    by_system: dict[int, dict[int, object]] = {}
    for r in reader.records("test"):
        by_system.setdefault(r.system_id, {})[r.pair_index] = r
    cases = []
    for sid in sorted(by_system):
        pairs = by_system[sid]
        if 0 not in pairs:
            continue
        for idx in sorted(pairs):
            if idx != 0:
                cases.append((pairs[0], pairs[idx]))
    return cases


def _batched_predictions(model: SystemBehaviorModel, codec: SignalCodec, cases,
                         chunk: int = 64) -> np.ndarray:
    net = model._require_net()
    net.eval()
    codec._net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(cases), chunk):
            part = cases[start : start + chunk]
            px = torch.from_numpy(np.stack([p.x.samples for p, _ in part]).astype(np.float32))
            py = torch.from_numpy(np.stack([p.y.samples for p, _ in part]).astype(np.float32))
            qx = torch.from_numpy(np.stack([q.x.samples for _, q in part]).astype(np.float32))
            px_l = model._encode_t(codec, px)
            py_l = model._encode_t(codec, py)
            qx_l = model._encode_t(codec, qx)
            z = net.embed(px_l, py_l)
            pred_lat = net.predict(z, qx_l)
            pred = codec._net.decoder(pred_lat.transpose(1, 2))[:, 0, : qx.shape[1]]
            out.append(pred.numpy())
    return np.concatenate(out, axis=0)


def eval_one_shot(model: SystemBehaviorModel, codec: SignalCodec, reader: CorpusReader,
                  checkpoint_hashes: dict | None = None) -> EvalReport:
    """One-shot prediction RMSE on unseen systems, with model-free baselines."""
    if not model.is_fitted:
        raise StateError("eval_one_shot needs a trained behavior model")
    if not codec.is_fitted:
        raise StateError("eval_one_shot needs a trained codec")
    cases = _one_shot_cases(reader)
    preds = _batched_predictions(model, codec, cases)
    errors, identity, copy_prompt = [], [], []
    for (prompt, query), pred in zip(cases, preds):
        truth = query.y.samples
        errors.append(float(np.sqrt(np.mean((pred[: truth.size] - truth) ** 2))))
        identity.append(rmse(query.x, query.y))
        copy_prompt.append(rmse(prompt.y, query.y))
    errors_arr = np.asarray(errors)
    p95_idx = int(np.argsort(errors_arr)[max(0, math.ceil(0.95 * errors_arr.size) - 1)])
    prompt_r, query_r = cases[p95_idx]
    extras = {
        "baselines": {
            "identity_mean": float(np.mean(identity)),
            "copy_prompt_mean": float(np.mean(copy_prompt)),
            "identity_per_signal": [float(v) for v in identity],
            "copy_prompt_per_signal": [float(v) for v in copy_prompt],
        },
        "p95_overlay": {
            "system_id": prompt_r.system_id,
            "query_input": query_r.x.samples.astype(float).tolist(),
            "target": query_r.y.samples.astype(float).tolist(),
            "prediction": preds[p95_idx].astype(float).tolist(),
        },
    }
    return EvalReport.from_values(
        errors,
        split_sizes={
            "test_systems": len(reader.system_ids("test")),
            "cases": len(cases),
        },
        checkpoint_hashes=checkpoint_hashes or {"corpus": reader.manifest.content_sha256},
        config_echo=dataclasses.asdict(model.config),
        extras=extras,
    )


# --- embedding probe ----------------------------------------------------------------


def probe_embeddings(model: SystemBehaviorModel, codec: SignalCodec, reader: CorpusReader,
                     seed: int = 0) -> ProbeReport:
    """Linear separability of test-split embeddings (LTI vs NTI, filter classes)."""
    from sklearn.decomposition import PCA
    from sklearn.linear_model import LogisticRegression

    if not model.is_fitted:
        raise StateError("probe_embeddings needs a trained behavior model")
    records = reader.records("test")
    specs = reader.system_specs
    net = model._require_net()
    net.eval()
    codec._net.eval()

    zs, labels, class_labels, sys_ids = [], [], [], []
    chunk = 64
    with torch.no_grad():
        for start in range(0, len(records), chunk):
            part = records[start : start + chunk]
            x = torch.from_numpy(np.stack([r.x.samples for r in part]).astype(np.float32))
            y = torch.from_numpy(np.stack([r.y.samples for r in part]).astype(np.float32))
            z = net.embed(model._encode_t(codec, x), model._encode_t(codec, y))
            zs.append(z.numpy())
            for r in part:
                spec = specs[r.system_id]
                labels.append(1 if spec.is_lti else 0)
                class_labels.append(spec.dynamics.filter_class if spec.is_lti else None)
                sys_ids.append(r.system_id)
    z_mat = np.concatenate(zs, axis=0)
    labels_arr = np.asarray(labels)
    if len(set(labels)) < 2:
        raise ProbeError("test split has a single class; probe is undefined")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels_arr))
    cut = int(0.7 * len(order))
    tr, te = order[:cut], order[cut:]
    if len(set(labels_arr[tr])) < 2 or len(set(labels_arr[te])) < 2:
        raise ProbeError("degenerate class balance in probe split")
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(z_mat[tr], labels_arr[tr])
    pred = clf.predict(z_mat[te])
    acc = float(np.mean(pred == labels_arr[te]))
    per_class = {
        "nti": float(np.mean(pred[labels_arr[te] == 0] == 0)) if np.any(labels_arr[te] == 0) else None,
        "lti": float(np.mean(pred[labels_arr[te] == 1] == 1)) if np.any(labels_arr[te] == 1) else None,
    }
    confusion = {
        "true_lti_pred_lti": int(np.sum((labels_arr[te] == 1) & (pred == 1))),
        "true_lti_pred_nti": int(np.sum((labels_arr[te] == 1) & (pred == 0))),
        "true_nti_pred_lti": int(np.sum((labels_arr[te] == 0) & (pred == 1))),
        "true_nti_pred_nti": int(np.sum((labels_arr[te] == 0) & (pred == 0))),
    }

    # Secondary probe: 4-way filter class among LTI embeddings.
    lti_mask = labels_arr == 1
    cls_names = sorted({c for c in class_labels if c is not None})
    filter_acc = None
    if len(cls_names) >= 2 and np.sum(lti_mask) >= 20:
        cls_ids = np.asarray([cls_names.index(c) if c is not None else -1 for c in class_labels])
        zl, yl = z_mat[lti_mask], cls_ids[lti_mask]
        order_l = rng.permutation(len(yl))
        cut_l = int(0.7 * len(order_l))
        trl, tel = order_l[:cut_l], order_l[cut_l:]
        if len(set(yl[trl])) >= 2 and tel.size:
            clf4 = LogisticRegression(max_iter=2000, random_state=seed)
            clf4.fit(zl[trl], yl[trl])
            filter_acc = float(np.mean(clf4.predict(zl[tel]) == yl[tel]))

    intra, inter = _cosine_separation(z_mat, np.asarray(sys_ids), rng)
    proj = PCA(n_components=2, random_state=seed).fit_transform(z_mat)
    projection = [
        [float(px), float(py), int(lab)] for (px, py), lab in zip(proj, labels_arr)
    ]
    return ProbeReport(
        binary_accuracy=acc,
        per_class_accuracy=per_class,
        confusion=confusion,
        filter_class_accuracy=filter_acc,
        intra_system_cosine=intra,
        inter_system_cosine=inter,
        projection=projection,
        split_sizes={"embeddings": int(len(labels_arr)), "probe_test": int(te.size)},
    )


def _cosine_separation(z_mat, sys_ids, rng, samples: int = 2000):
    by_system: dict[int, list[int]] = {}
    for i, sid in enumerate(sys_ids):
        by_system.setdefault(int(sid), []).append(i)
    intra_vals, inter_vals = [], []
    ids = [sid for sid, idxs in by_system.items() if len(idxs) >= 2]
    for _ in range(samples):
        sid = ids[rng.integers(0, len(ids))]
        i, j = rng.choice(by_system[sid], size=2, replace=False)
        intra_vals.append(cosine_similarity(z_mat[i], z_mat[j]))
        s1, s2 = rng.choice(len(ids), size=2, replace=False)
        i2 = by_system[ids[s1]][0]
        j2 = by_system[ids[s2]][0]
        inter_vals.append(cosine_similarity(z_mat[i2], z_mat[j2]))
    return float(np.mean(intra_vals)), float(np.mean(inter_vals))


# --- ablations -------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationReport:
    which: str
    arms: dict
    full_scale_reference: dict
    shared_seed: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    def summary_lines(self) -> list[str]:
        lines = [f"ablation: {self.which} (shared seed {self.shared_seed})"]
        for arm, payload in self.arms.items():
            lines.append(
                f"  {arm}: one-shot mean rmse {payload['one_shot_mean']:.4f} "
                f"(identity {payload['identity_mean']:.4f}, copy {payload['copy_prompt_mean']:.4f})"
            )
        lines.append(f"  full-scale reference values (not targets): {self.full_scale_reference}")
        return lines


def _arm_payload(report: EvalReport) -> dict:
    return {
        "one_shot_mean": report.mean,
        "one_shot_p95": report.p95,
        "identity_mean": report.extras["baselines"]["identity_mean"],
        "copy_prompt_mean": report.extras["baselines"]["copy_prompt_mean"],
    }


def run_stage_mode_ablation(reader: CorpusReader, pretrained_codec: SignalCodec,
                            behavior_config, seed: int = 0) -> AblationReport:
    """Sequential (frozen codec) vs joint end-to-end training, shared data seed."""
    from .behavior import BehaviorConfig
    from .codec import SignalCodec as Codec

    two_stage = SystemBehaviorModel(config=behavior_config, seed=seed)
    two_stage.fit(reader, pretrained_codec, mode="two_stage")
    rep_two = eval_one_shot(two_stage, pretrained_codec, reader)

    joint_codec = Codec(config=pretrained_codec.config, seed=pretrained_codec.seed)
    joint = SystemBehaviorModel(config=behavior_config, seed=seed)
    joint.fit(reader, joint_codec, mode="joint")
    rep_joint = eval_one_shot(joint, joint_codec, reader)

    return AblationReport(
        which="stage_mode",
        arms={"two_stage": _arm_payload(rep_two), "joint": _arm_payload(rep_joint)},
        full_scale_reference=FULL_SCALE_REFERENCE["stage_mode"],
        shared_seed=seed,
    )


def run_pretrain_data_ablation(mixed_reader: CorpusReader, work_dir, corpus_config,
                               codec_config, behavior_config, seed: int = 0) -> AblationReport:
    """Mixed (LTI+NTI) vs LTI-only pretraining, evaluated on the mixed test split."""
    import dataclasses as dc

    from .corpus import build_corpus

    work_dir = Path(work_dir)
    lti_dir = work_dir / "lti_only_corpus"
    lti_config = dc.replace(corpus_config, lti_fraction=1.0)
    if not (lti_dir / "manifest.json").exists():
        build_corpus(lti_config, seed=mixed_reader.manifest.seed, out_dir=lti_dir)
    lti_reader = CorpusReader(lti_dir)

    arms = {}
    for arm, arm_reader in (("mixed", mixed_reader), ("lti_only", lti_reader)):
        codec = SignalCodec(config=codec_config, seed=seed)
        codec.fit(arm_reader.signal_matrix("train"))
        model = SystemBehaviorModel(config=behavior_config, seed=seed)
        model.fit(arm_reader, codec, mode="two_stage")
        arms[arm] = _arm_payload(eval_one_shot(model, codec, mixed_reader))

    return AblationReport(
        which="pretrain_data",
        arms=arms,
        full_scale_reference=FULL_SCALE_REFERENCE["pretrain_data"],
        shared_seed=seed,
    )


# --- plotting ---------------------------------------------------------------------------


def export_plots(reports: dict, out_dir) -> list[Path]:
    """Write CSV + standalone SVG for each known report series.

    ``reports`` maps {"codec_eval": EvalReport, "one_shot_eval": EvalReport,
    "probe": ProbeReport}; unknown keys are ignored. Every figure has a CSV
    holding exactly the plotted data.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit(name: str, columns: dict, plot_fn) -> None:
        csv_path = out_dir / f"{name}.csv"
        keys = list(columns)
        n = len(next(iter(columns.values())))
        lines = [",".join(keys)]
        for i in range(n):
            lines.append(",".join(f"{columns[k][i]:.8g}" for k in keys))
        csv_path.write_text("\n".join(lines) + "\n")
        fig, ax = plt.subplots(figsize=(8, 4))
        plot_fn(ax)
        fig.tight_layout()
        svg_path = out_dir / f"{name}.svg"
        fig.savefig(svg_path, format="svg")
        plt.close(fig)
        written.extend([csv_path, svg_path])

    codec_eval = reports.get("codec_eval")
    if codec_eval is not None:
        overlay = codec_eval.extras["p95_overlay"]
        cols = {"original": overlay["original"], "reconstruction": overlay["reconstruction"]}

        def plot_codec(ax):
            ax.plot(cols["original"], label="original", lw=0.8)
            ax.plot(cols["reconstruction"], label="reconstruction", lw=0.8)
            ax.set_title(f"reconstruction at p95 rank (rmse {codec_eval.p95:.4f})")
            ax.legend()

        emit("codec_recon_p95", cols, plot_codec)

    one_shot = reports.get("one_shot_eval")
    if one_shot is not None:
        overlay = one_shot.extras["p95_overlay"]
        cols = {
            "query_input": overlay["query_input"],
            "target": overlay["target"],
            "prediction": overlay["prediction"],
        }

        def plot_pred(ax):
            ax.plot(cols["target"], label="target", lw=0.8)
            ax.plot(cols["prediction"], label="prediction", lw=0.8)
            ax.plot(cols["query_input"], label="query input", lw=0.5, alpha=0.5)
            ax.set_title(f"one-shot prediction at p95 rank (rmse {one_shot.p95:.4f})")
            ax.legend()

        emit("one_shot_p95", cols, plot_pred)

    probe = reports.get("probe")
    if probe is not None:
        xs = [row[0] for row in probe.projection]
        ys = [row[1] for row in probe.projection]
        labs = [row[2] for row in probe.projection]
        cols = {"x": xs, "y": ys, "is_lti": labs}

        def plot_probe(ax):
            xs_a = np.asarray(xs)
            ys_a = np.asarray(ys)
            labs_a = np.asarray(labs)
            for value, name in ((1, "lti"), (0, "nti")):
                m = labs_a == value
                ax.scatter(xs_a[m], ys_a[m], s=4, label=name, alpha=0.6)
            ax.set_title(f"embedding projection (probe acc {probe.binary_accuracy:.3f})")
            ax.legend()

        emit("embedding_projection", cols, plot_probe)

    return written
