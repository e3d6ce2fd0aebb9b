"""Serialization: checkpoints, record files, CSV traces.

Checkpoints are a single JSON header line followed by raw little-endian
float64 bytes, so round trips are bit-exact. Text formats use repr()
for floats, which round-trips float64 exactly and keeps repeated writes
byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .gem import EpisodicMemory
from .recognizer import LayerShape, RecognizerModel
from .synthesizer import SynthesizerModel
from .tasks import Utterance


def _write_checkpoint(path, header: dict, payload: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())


def _read_checkpoint(path, kind: str):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        payload = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if header.get("kind") != kind:
        raise ValueError(f"expected a {kind} checkpoint, found {header.get('kind')!r}")
    return header, payload


def save_recognizer(model: RecognizerModel, path) -> None:
    header = {
        "kind": "recognizer",
        "input_dim": model.shape.input_dim,
        "hidden_dim": model.shape.hidden_dim,
        "output_dim": model.shape.output_dim,
        "param_count": model.shape.param_count,
    }
    _write_checkpoint(path, header, model.theta)


def load_recognizer(path) -> RecognizerModel:
    header, payload = _read_checkpoint(path, "recognizer")
    shape = LayerShape(header["input_dim"], header["hidden_dim"], header["output_dim"])
    if payload.size != header["param_count"] or payload.size != shape.param_count:
        raise ValueError(f"checkpoint payload has {payload.size} values, expected {shape.param_count}")
    return RecognizerModel(theta=payload, shape=shape)


def save_synthesizer(synth: SynthesizerModel, path) -> None:
    header = {
        "kind": "synthesizer",
        "alphabet_size": int(synth.prototypes.shape[0]),
        "feature_dim": int(synth.prototypes.shape[1]),
        "emission_sigma": synth.emission_sigma,
        "counts": [int(c) for c in synth.counts],
    }
    _write_checkpoint(path, header, synth.prototypes.ravel())


def load_synthesizer(path) -> SynthesizerModel:
    header, payload = _read_checkpoint(path, "synthesizer")
    v, d = header["alphabet_size"], header["feature_dim"]
    if payload.size != v * d:
        raise ValueError(f"checkpoint payload has {payload.size} values, expected {v * d}")
    return SynthesizerModel(
        prototypes=payload.reshape(v, d),
        emission_sigma=header["emission_sigma"],
        counts=np.asarray(header["counts"], dtype=np.int64),
    )


def write_utterances(path, task_id: int, utterances) -> None:
    """One utterance per line: task id, label ids, row-major frame floats."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for utt in utterances:
            labels = " ".join(str(int(l)) for l in utt.labels)
            floats = " ".join(repr(float(x)) for x in utt.features.ravel())
            fh.write(f"{task_id}\t{labels}\t{floats}\n")


def read_utterances(path, feature_dim: int) -> list[tuple[int, Utterance]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            task_field, label_field, float_field = line.split("\t")
            labels = np.array([int(tok) for tok in label_field.split()], dtype=np.int64)
            values = np.array([float(tok) for tok in float_field.split()])
            features = values.reshape(-1, feature_dim)
            out.append((int(task_field), Utterance(labels=labels, features=features)))
    return out


def write_memory_dump(path, memories: dict[int, EpisodicMemory]) -> None:
    """One sample per line: task id, label ids, synthetic flag."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for task_id in sorted(memories):
            for sample in memories[task_id].samples:
                labels = " ".join(str(int(l)) for l in sample.labels)
                fh.write(f"{task_id}\t{labels}\t{int(sample.synthetic)}\n")


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, fieldnames, rows) -> None:
    """DictWriter wrapper with deterministic float formatting."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format_cell(row.get(k, "")) for k in fieldnames})


def read_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_error_matrix_csv(path, matrix) -> None:
    fieldnames = ["phase"] + [f"task_{tid}" for tid in matrix.task_ids]
    rows = []
    for label, row in zip(matrix.phase_labels, matrix.entries):
        record = {"phase": label}
        record.update(
            {f"task_{tid}": float(v) for tid, v in zip(matrix.task_ids, row)}
        )
        rows.append(record)
    write_csv(path, fieldnames, rows)


def write_json_atomic(payload: dict, path) -> None:
    """Serialize to a temp file in the target directory, then rename."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
