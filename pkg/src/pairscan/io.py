"""Bit-exact persistence for models, datasets, attack specs, and reports.

Binary formats are little-endian with a 4-byte magic whose trailing digit is
the format version; JSON artifacts are written with a stable key order and a
format_version field, so identical inputs always produce identical bytes.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .attack import PATCH, PERTURBATION, AttackSpec, ClassPair, TriggerSpec
from .data import LabeledDataset
from .errors import InputError
from .nn import DenseClassifier, Layer, LINEAR, RELU
from .reverse import TriggerEstimate
from .transfer import TRMatrix

MODEL_MAGIC = b"UMD1"
DATASET_MAGIC = b"UDS1"
FORMAT_VERSION = 1

_ACT_TAGS = {RELU: 0, LINEAR: 1}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise InputError(f"truncated file while reading {what}")
    return buf


def _open_checked(path, magic: bytes):
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    fh = path.open("rb")
    got = fh.read(len(magic))
    if got != magic:
        fh.close()
        raise InputError(f"{path}: bad magic {got!r}, expected {magic!r}")
    return fh


def save_model(model: DenseClassifier, path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<III", model.num_classes, model.input_dim, len(model.layers)))
        for layer in model.layers:
            fh.write(struct.pack("<IIB", layer.out_dim, layer.in_dim,
                                 _ACT_TAGS[layer.activation]))
            fh.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def load_model(path) -> DenseClassifier:
    with _open_checked(path, MODEL_MAGIC) as fh:
        num_classes, input_dim, n_layers = struct.unpack(
            "<III", _read_exact(fh, 12, "model header"))
        layers = []
        for i in range(n_layers):
            out_dim, in_dim, tag = struct.unpack("<IIB", _read_exact(fh, 9, f"layer {i}"))
            if tag not in _TAG_ACTS:
                raise InputError(f"unknown activation tag {tag}")
            weight = np.frombuffer(_read_exact(fh, 8 * out_dim * in_dim, "weights"),
                                   dtype="<f8").reshape(out_dim, in_dim)
            bias = np.frombuffer(_read_exact(fh, 8 * out_dim, "biases"), dtype="<f8")
            layers.append(Layer(weight, bias, _TAG_ACTS[tag]))
        if fh.read(1):
            raise InputError("trailing bytes after model payload")
    model = DenseClassifier(tuple(layers))
    if model.num_classes != num_classes or model.input_dim != input_dim:
        raise InputError("model header does not match the layer payload")
    return model


def save_dataset(data: LabeledDataset, path) -> None:
    if data.num_classes > 0xFFFF or (len(data) and int(data.labels.max()) > 0xFFFF):
        raise InputError("labels exceed the two-byte label field")
    with Path(path).open("wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", data.num_classes, data.input_dim, len(data)))
        row = struct.Struct(f"<{data.input_dim}dH")
        for x, y in zip(data.images, data.labels):
            fh.write(row.pack(*x, int(y)))


def load_dataset(path) -> LabeledDataset:
    with _open_checked(path, DATASET_MAGIC) as fh:
        num_classes, input_dim, count = struct.unpack(
            "<III", _read_exact(fh, 12, "dataset header"))
        row = struct.Struct(f"<{input_dim}dH")
        images = np.empty((count, input_dim))
        labels = np.empty(count, dtype=np.int64)
        for i in range(count):
            *x, y = row.unpack(_read_exact(fh, row.size, f"sample {i}"))
            images[i] = x
            labels[i] = y
        if fh.read(1):
            raise InputError("trailing bytes after dataset payload")
    return LabeledDataset(images, labels, num_classes)


# ---------------------------------------------------------------------------
# JSON artifacts (attack specs, detection reports, benchmark results)
# ---------------------------------------------------------------------------

def encode_float(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        raise InputError("refusing to serialize NaN")
    return x


def decode_float(x) -> float:
    if x == "inf":
        return math.inf
    if x == "-inf":
        return -math.inf
    return float(x)


def dump_json(payload: dict, path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, allow_nan=False) + "\n")


def load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from exc
    if payload.get("format_version") != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported format_version {payload.get('format_version')!r}")
    return payload


def _trigger_payload(trigger: TriggerSpec) -> dict:
    if trigger.kind == PERTURBATION:
        return {"kind": PERTURBATION, "perturbation": trigger.perturbation.tolist()}
    return {"kind": PATCH, "patch": trigger.patch.tolist(), "mask": trigger.mask.tolist()}


def _trigger_from_payload(payload: dict) -> TriggerSpec:
    if payload["kind"] == PERTURBATION:
        return TriggerSpec(PERTURBATION, perturbation=np.array(payload["perturbation"]))
    return TriggerSpec(PATCH, patch=np.array(payload["patch"]),
                       mask=np.array(payload["mask"]))


def save_attack_spec(spec: AttackSpec, path, seed: int | None = None,
                     setting: str | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "setting": setting,
        "seed": seed,
        "pairs": [list(p.astuple()) for p in spec.pairs],
        "poison_per_source": spec.poison_per_source,
        "trigger": _trigger_payload(spec.trigger),
    }
    dump_json(payload, path)


def load_attack_spec(path) -> AttackSpec:
    payload = load_json(path)
    pairs = tuple(ClassPair(int(s), int(t)) for s, t in payload["pairs"])
    return AttackSpec(pairs, _trigger_from_payload(payload["trigger"]),
                      int(payload["poison_per_source"]))


def _tr_payload(tr: TRMatrix) -> dict:
    rows = [[None if math.isnan(v) else v for v in row] for row in tr.values.tolist()]
    return {"pairs": [list(p.astuple()) for p in tr.pairs], "values": rows}


def _tr_from_payload(payload: dict) -> TRMatrix:
    pairs = tuple(ClassPair(int(s), int(t)) for s, t in payload["pairs"])
    values = np.array([[np.nan if v is None else float(v) for v in row]
                       for row in payload["values"]])
    return TRMatrix(pairs, values)


def _report_payload(report) -> dict:
    pair_rows = []
    for pair in sorted(report.estimates):
        est = report.estimates[pair]
        row = {
            "source": pair.source,
            "target": pair.target,
            "z": encode_float(est.size),
            "converged": est.converged,
            "steps": est.steps_used,
        }
        if est.trigger is not None:
            row["trigger"] = _trigger_payload(est.trigger)
        else:
            row["feature_shift"] = est.feature_shift.tolist()
        pair_rows.append(row)
    return {
        "format_version": FORMAT_VERSION,
        "attacked": report.attacked,
        "score": encode_float(report.score),
        "threshold": encode_float(report.threshold),
        "beta": report.beta,
        "n_null": report.n_null,
        "mode": report.mode,
        "detector": report.detector,
        "seed": report.seed,
        "objective_value": None if report.objective_value is None
        else encode_float(report.objective_value),
        "selected_pairs": [list(p.astuple()) for p in report.selected_pairs],
        "detected_pairs": [list(p.astuple()) for p in report.detected_pairs],
        "pairs": pair_rows,
        "tr_matrix": None if report.tr is None else _tr_payload(report.tr),
        "auxiliary": None if report.auxiliary is None else _report_payload(report.auxiliary),
    }


def save_report(report, path) -> None:
    dump_json(_report_payload(report), path)


def report_bytes(report) -> bytes:
    return (json.dumps(_report_payload(report), indent=2, allow_nan=False) + "\n").encode()


def _report_from_payload(payload: dict):
    from .detector import DetectionReport  # deferred: io must not cycle with detector

    estimates = {}
    for row in payload["pairs"]:
        pair = ClassPair(int(row["source"]), int(row["target"]))
        trigger = _trigger_from_payload(row["trigger"]) if "trigger" in row else None
        shift = np.array(row["feature_shift"]) if "feature_shift" in row else None
        estimates[pair] = TriggerEstimate(
            pair=pair, size=decode_float(row["z"]), converged=bool(row["converged"]),
            steps_used=int(row["steps"]), trigger=trigger, feature_shift=shift)
    return DetectionReport(
        attacked=bool(payload["attacked"]),
        selected_pairs=tuple(ClassPair(int(s), int(t)) for s, t in payload["selected_pairs"]),
        detected_pairs=tuple(ClassPair(int(s), int(t)) for s, t in payload["detected_pairs"]),
        score=decode_float(payload["score"]),
        threshold=decode_float(payload["threshold"]),
        beta=float(payload["beta"]), n_null=int(payload["n_null"]),
        mode=payload["mode"], detector=payload["detector"], seed=int(payload["seed"]),
        estimates=estimates,
        objective_value=None if payload["objective_value"] is None
        else decode_float(payload["objective_value"]),
        tr=None if payload["tr_matrix"] is None else _tr_from_payload(payload["tr_matrix"]),
        auxiliary=None if payload["auxiliary"] is None
        else _report_from_payload(payload["auxiliary"]))


def load_report(path):
    return _report_from_payload(load_json(path))


def save_tr_matrix(tr: TRMatrix, path, row_normalized: bool = False) -> None:
    """Dense text export; optionally each row scaled by its max defined entry."""
    values = tr.values.copy()
    if row_normalized:
        for i in range(values.shape[0]):
            row = values[i]
            peak = np.nanmax(row)
            if peak > 0:
                values[i] = row / peak
    lines = ["# pairs: " + " ".join(f"{p.source}-{p.target}" for p in tr.pairs)]
    for row in values:
        lines.append(" ".join("nan" if math.isnan(v) else repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
