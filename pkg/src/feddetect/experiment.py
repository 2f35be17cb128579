"""End-to-end experiments: data preparation, runs, evaluation artifacts, comparison."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .config import ExperimentConfig, derive_seed
from .dataio import Sample, generate_synthetic, load_directory, partition, preprocess, split_train_test, write_directory
from .federation import (
    FedConfig,
    RoundReport,
    checksum,
    quantize,
    run_federation,
    save_checkpoint,
)
from .metrics import MetricsReport, evaluate, table_csv, table_text
from .model import ModelConfig, init_params
from .trainer import TrainConfig, train_local

log = logging.getLogger(__name__)

METRIC_KEYS = (
    "mAP50",
    "mAP50-95",
    "accuracy",
    "best_f1_threshold",
    "classes",
    "confusion_matrix",
    "class_names",
)
SUMMARY_KEYS = tuple(
    sorted(
        METRIC_KEYS
        + (
            "mode",
            "seed",
            "num_rounds",
            "num_clients",
            "local_epochs",
            "train_samples",
            "test_samples",
            "final_train_loss",
            "total_sim_seconds",
            "total_bytes",
            "samples_processed",
            "checkpoint_sha256",
            "history",
        )
    )
)


class SchemaError(ValueError):
    pass


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def load_samples(cfg: ExperimentConfig) -> list[Sample]:
    d = cfg.data
    if d.source == "synthetic":
        return generate_synthetic(
            d.count,
            image_size=d.image_size,
            class_mix=d.class_mix,
            seed=derive_seed(cfg.seed, "data"),
            objects_per_image=d.objects_per_image,
            grid_size=cfg.model.grid_size,
        )
    return load_directory(d.path, cfg.model.num_classes, cfg.model.grid_size)


def prepare(cfg: ExperimentConfig) -> tuple[list[Sample], list[Sample]]:
    """Resized train and test splits, before augmentation."""
    size = (cfg.model.input_height, cfg.model.input_width)
    samples = [preprocess(s, size)[0] for s in load_samples(cfg)]
    return split_train_test(samples, cfg.data.train_fraction, derive_seed(cfg.seed, "split"))


def augmented(samples: Sequence[Sample], cfg: ExperimentConfig) -> list[Sample]:
    size = (cfg.model.input_height, cfg.model.input_width)
    return [out for s in samples for out in preprocess(s, size, cfg.data.augment)]


def client_datasets(train: Sequence[Sample], cfg: ExperimentConfig) -> list[list[Sample]]:
    parts = partition(train, cfg.partition)
    return [augmented([train[i] for i in idx], cfg) for idx in parts]


# --------------------------------------------------------------------------
# centralized baseline
# --------------------------------------------------------------------------


def train_centralized(
    fed: FedConfig,
    data: Sequence[Sample],
    compute_cost: float,
    validation: Sequence[Sample] | None = None,
    log_path: str | Path | None = None,
) -> tuple[np.ndarray, list[RoundReport]]:
    """One model on pooled data for ``K * I`` epochs, reported in blocks of ``I``.

    Shuffle seeds follow the same epoch numbering as a federated client, so a
    one-client federation walks the identical SGD trajectory.
    """
    mcfg, tcfg = fed.model_cfg, fed.train_cfg
    theta = init_params(mcfg)
    reports = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for k in range(1, fed.num_rounds + 1):
            local = TrainConfig(tcfg.learning_rate, tcfg.local_epochs, tcfg.batch_size, fed.client_seed(0))
            theta, traces = train_local(
                theta, data, local, fed.loss_cfg, mcfg, epoch_offset=(k - 1) * tcfg.local_epochs
            )
            loss = math.fsum(t.mean_loss.total for t in traces) / len(traces)
            samples = sum(t.samples_processed for t in traces)
            rep = RoundReport(
                round=k,
                client_losses=[loss],
                train_loss=loss,
                checksum=checksum(theta),
                sim_seconds=samples * compute_cost,
                bytes_up=0,
                bytes_down=0,
                samples_processed=samples,
            )
            if validation is not None and fed.eval_every and k % fed.eval_every == 0:
                ev = evaluate(theta, validation, mcfg)
                rep.validation = {"mAP50": ev.map50, "mAP50-95": ev.map50_95, "accuracy": ev.confusion.accuracy}
            reports.append(rep)
            log.info("epochs %d-%d loss %.5f", (k - 1) * tcfg.local_epochs + 1, k * tcfg.local_epochs, loss)
            if log_fh:
                log_fh.write(json.dumps(rep.as_dict(), sort_keys=True) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return theta, reports


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------


def metrics_dict(report: MetricsReport, class_names: Sequence[str]) -> dict:
    return {
        "mAP50": report.map50,
        "mAP50-95": report.map50_95,
        "accuracy": report.confusion.accuracy,
        "best_f1_threshold": report.best_threshold,
        "classes": [r.as_dict() for r in report.rows],
        "confusion_matrix": report.confusion.counts.tolist(),
        "class_names": list(class_names),
    }


def write_metrics(report: MetricsReport, out_dir: Path, class_names: Sequence[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    c = report.curves
    (out_dir / "p_curve.csv").write_text(c.precision.to_csv())
    (out_dir / "r_curve.csv").write_text(c.recall.to_csv())
    (out_dir / "f1_curve.csv").write_text(c.f1.to_csv())
    (out_dir / "pr_curve.csv").write_text(c.pr.to_csv())
    (out_dir / "map_table.csv").write_text(table_csv(report.rows))
    (out_dir / "map_table.txt").write_text(table_text(report.rows))
    (out_dir / "confusion_matrix.csv").write_text(report.confusion.to_csv(class_names))


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def evaluate_checkpoint(
    params: np.ndarray,
    model_cfg: ModelConfig,
    test: Sequence[Sample],
    out_dir: Path,
    class_names: Sequence[str],
) -> dict:
    report = evaluate(params, test, model_cfg, class_names)
    write_metrics(report, out_dir / "metrics", class_names)
    print(table_text(report.rows), end="")
    return metrics_dict(report, class_names)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, centralized: bool = False, threads: int = 1) -> dict:
    """Train (federated or pooled), evaluate the shipped checkpoint, write artifacts.

    The summary's metrics come from the float32 checkpoint, exactly what
    ``eval`` sees when it reloads ``final_model.fdck``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = prepare(cfg)
    fed = cfg.fed
    validation = test if fed.eval_every else None
    if centralized:
        pooled = augmented(train, cfg)
        params, reports = train_centralized(
            fed, pooled, cfg.network.compute_cost[0], validation, out / "rounds.jsonl"
        )
        n_train, n_clients = len(pooled), 1
    else:
        data = client_datasets(train, cfg)
        result = run_federation(
            fed,
            data,
            net=cfg.network,
            validation=validation,
            threads=threads,
            log_path=out / "rounds.jsonl",
        )
        params, reports = result.params, result.reports
        n_train, n_clients = sum(len(d) for d in data), fed.num_clients

    ckpt = out / "final_model.fdck"
    save_checkpoint(ckpt, params, cfg.model)
    write_directory(
        [Sample(s.image, s.objects, name=f"{k:05d}_{s.name}") for k, s in enumerate(test)],
        out / "test_data",
    )
    metrics = evaluate_checkpoint(quantize(params), cfg.model, test, out, cfg.class_names)

    history = [
        {
            "round": r.round,
            "train_loss": r.train_loss,
            "accuracy": r.validation["accuracy"] if r.validation else None,
            "mAP50": r.validation["mAP50"] if r.validation else None,
        }
        for r in reports
    ]
    summary = {
        **metrics,
        "mode": "centralized" if centralized else "federated",
        "seed": cfg.seed,
        "num_rounds": fed.num_rounds,
        "num_clients": n_clients,
        "local_epochs": fed.train_cfg.local_epochs,
        "train_samples": n_train,
        "test_samples": len(test),
        "final_train_loss": reports[-1].train_loss,
        "total_sim_seconds": math.fsum(r.sim_seconds for r in reports),
        "total_bytes": sum(r.bytes_up + r.bytes_down for r in reports),
        "samples_processed": sum(r.samples_processed for r in reports),
        "checkpoint_sha256": hashlib.sha256(ckpt.read_bytes()).hexdigest(),
        "history": history,
    }
    assert tuple(sorted(summary)) == SUMMARY_KEYS
    dump_json(summary, out / "summary.json")
    return summary


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------


def load_summary(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read summary {path}: {exc}") from None
    if not isinstance(data, dict) or tuple(sorted(data)) != SUMMARY_KEYS:
        raise SchemaError(f"{path} does not have the summary schema")
    return data


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _diff(a, b):
    return None if a is None or b is None else a - b


def comparison_rows(fl: dict, ml: dict) -> list[list[str]]:
    fh = {h["round"]: h for h in fl["history"]}
    mh = {h["round"]: h for h in ml["history"]}
    rows = []
    for k in range(1, max(len(fl["history"]), len(ml["history"])) + 1):
        a, b = fh.get(k, {}), mh.get(k, {})
        fa, ma = a.get("accuracy"), b.get("accuracy")
        fl_loss, ml_loss = a.get("train_loss"), b.get("train_loss")
        rows.append(
            [str(k), _fmt(fa), _fmt(ma), _fmt(_diff(fa, ma)), _fmt(fl_loss), _fmt(ml_loss), _fmt(_diff(fl_loss, ml_loss))]
        )
    return rows


def line_chart_svg(title: str, series: dict[str, Sequence[float | None]], y_label: str) -> str:
    """Static line chart; one ``polyline`` per series, missing points skipped."""
    width, height, pad = 640, 360, 50
    vals = [v for s in series.values() for v in s if v is not None]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    n = max((len(s) for s in series.values()), default=1)

    def xy(k, v):
        x = pad + (width - 2 * pad) * (k / max(n - 1, 1))
        y = height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))
        return f"{x:.2f},{y:.2f}"

    colors = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">round</text>',
        f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})" '
        f'text-anchor="middle">{escape(y_label)}</text>',
        f'<text x="{pad - 6}" y="{height - pad}" text-anchor="end" font-size="10">{lo:.3g}</text>',
        f'<text x="{pad - 6}" y="{pad + 4}" text-anchor="end" font-size="10">{hi:.3g}</text>',
    ]
    for i, (name, s) in enumerate(series.items()):
        pts = " ".join(xy(k, v) for k, v in enumerate(s) if v is not None)
        color = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(
            f'<text x="{width - pad - 110}" y="{pad + 16 * i}" fill="{color}" font-size="12">{escape(name)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _confusion_csv(summary: dict) -> str:
    names = list(summary["class_names"]) + ["background"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["truth\\pred"] + names)
    for name, row in zip(names, summary["confusion_matrix"]):
        w.writerow([name] + row)
    return buf.getvalue()


def compare(fl: dict, ml: dict, out_dir: str | Path) -> list[list[str]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = comparison_rows(fl, ml)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "fl_accuracy", "ml_accuracy", "accuracy_diff", "fl_loss", "ml_loss", "loss_diff"])
    w.writerows(rows)
    (out / "comparison.csv").write_text(buf.getvalue())

    def col(summary, key):
        return [h[key] for h in summary["history"]]

    (out / "accuracy.svg").write_text(
        line_chart_svg("Accuracy per round", {"FL": col(fl, "accuracy"), "centralized": col(ml, "accuracy")}, "accuracy")
    )
    (out / "loss.svg").write_text(
        line_chart_svg("Training loss per round", {"FL": col(fl, "train_loss"), "centralized": col(ml, "train_loss")}, "loss")
    )
    (out / "confusion_fl.csv").write_text(_confusion_csv(fl))
    (out / "confusion_ml.csv").write_text(_confusion_csv(ml))
    return rows
