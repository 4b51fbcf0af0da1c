"""On-disk formats: dataset/checkpoint containers and CSV emitters.

Binary container layout (datasets and checkpoints share it):

    line 1   canonical one-line JSON header, UTF-8, '\\n' terminated
             (sorted keys, no spaces), naming the payload arrays in order
    8 bytes  little-endian uint64: payload byte length
    payload  the named arrays, concatenated, as little-endian float64

Canonical JSON plus a fixed payload order makes save -> load -> save
byte-identical, which the determinism checks diff directly. CSVs are
RFC-4180 style (csv module defaults, CRLF) with every float rendered at 17
significant digits so equal runs produce equal bytes.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .model import AuxiliaryEncoder, ClassifierHead, ResLstmModel, VLstmModel
from .rnn import LSTM_BLOCK_NAMES, LstmParams, SequenceBatch
from .synthdata import MultimodalDataset

DATASET_FORMAT = "modcomp-dataset"
CHECKPOINT_FORMAT = "modcomp-checkpoint"
FORMAT_VERSION = 1


def fmt_float(x: float) -> str:
    """Fixed 17-significant-digit rendering used by every CSV column."""
    return format(float(x), ".17g")


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def _write_container(path, header: dict, arrays: list[np.ndarray]) -> None:
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    with open(path, "wb") as f:
        f.write(_canonical_json(header))
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)


def _read_container(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: not a container file ({e})") from e
        (length,) = struct.unpack("<Q", f.read(8))
        payload = f.read(length)
        if len(payload) != length:
            raise ConfigError(f"{path}: truncated payload ({len(payload)} of {length} bytes)")
    return header, np.frombuffer(payload, dtype="<f8")


def save_dataset(path, dataset: MultimodalDataset, generator_echo: dict) -> None:
    src, aux = dataset.source, dataset.auxiliary
    order = ["source_features", "aux_features", "source_labels", "aux_labels"]
    arrays = [src.features, aux.features, src.labels.astype(np.float64), aux.labels.astype(np.float64)]
    if dataset.pairing is not None:
        order.append("pairing")
        arrays.append(dataset.pairing.astype(np.float64))
    header = {
        "format": DATASET_FORMAT,
        "format_version": FORMAT_VERSION,
        "generator": generator_echo,
        "alignment": dataset.alignment,
        "counts": {
            "n_source": src.size, "n_aux": aux.size,
            "sequence_length": src.seq_len,
            "source_dim": src.feature_dim, "aux_dim": aux.feature_dim,
            "classes": src.num_classes,
        },
        "order": order,
    }
    _write_container(path, header, arrays)


def load_dataset(path) -> tuple[MultimodalDataset, dict]:
    header, flat = _read_container(path)
    if header.get("format") != DATASET_FORMAT:
        raise ConfigError(f"{path}: format {header.get('format')!r} is not {DATASET_FORMAT!r}")
    c = header["counts"]
    n_src, n_aux, T = c["n_source"], c["n_aux"], c["sequence_length"]
    d_src, d_aux, classes = c["source_dim"], c["aux_dim"], c["classes"]
    sizes = {
        "source_features": n_src * T * d_src,
        "aux_features": n_aux * T * d_aux,
        "source_labels": n_src,
        "aux_labels": n_aux,
        "pairing": n_src,
    }
    pos = 0
    parts = {}
    for name in header["order"]:
        k = sizes[name]
        parts[name] = flat[pos:pos + k]
        pos += k
    if pos != flat.size:
        raise ConfigError(f"{path}: payload size {flat.size} does not match header ({pos} expected)")
    dataset = MultimodalDataset(
        source=SequenceBatch(parts["source_features"].reshape(n_src, T, d_src),
                             parts["source_labels"].astype(np.int64), classes),
        auxiliary=SequenceBatch(parts["aux_features"].reshape(n_aux, T, d_aux),
                                parts["aux_labels"].astype(np.int64), classes),
        alignment=header["alignment"],
        pairing=parts["pairing"].astype(np.int64) if "pairing" in parts else None,
    )
    return dataset, header


def _model_blocks(obj) -> dict[str, np.ndarray]:
    if isinstance(obj, AuxiliaryEncoder):
        return {f"lstm.{k}": v for k, v in obj.lstm.blocks().items()}
    return obj.param_blocks()


def save_checkpoint(path, obj, init_seed: int, config_echo: dict | None = None) -> None:
    """Write a model or encoder as a named-block container."""
    blocks = _model_blocks(obj)
    if isinstance(obj, AuxiliaryEncoder):
        kind = "aux_encoder"
        dims = {"input_dim": obj.lstm.input_dim, "hidden_units": obj.lstm.hidden_units, "classes": None}
        extras = {"frozen": obj.frozen, "pretrain_accuracy": obj.pretrain_accuracy}
    else:
        kind = obj.kind
        dims = {"input_dim": obj.input_dim, "hidden_units": obj.hidden_units, "classes": obj.num_classes}
        extras = {"dropout_rate": obj.dropout_rate}
        if kind == "res_lstm":
            extras["res_lstm_dropout"] = obj.res_lstm_dropout
            extras["res_fc_dropout"] = obj.res_fc_dropout
    header = {
        "format": CHECKPOINT_FORMAT,
        "format_version": FORMAT_VERSION,
        "model_kind": kind,
        "dims": dims,
        "init_seed": int(init_seed),
        "config_echo": config_echo or {},
        "extras": extras,
        "blocks": [[name, list(arr.shape)] for name, arr in blocks.items()],
    }
    _write_container(path, header, list(blocks.values()))


def _lstm_from(blocks: dict, prefix: str) -> LstmParams:
    return LstmParams(**{k: blocks[f"{prefix}.{k}"] for k in LSTM_BLOCK_NAMES})


def load_checkpoint(path):
    """Read a checkpoint; returns (model-or-encoder, header)."""
    header, flat = _read_container(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: format {header.get('format')!r} is not {CHECKPOINT_FORMAT!r}")
    pos = 0
    blocks = {}
    for name, shape in header["blocks"]:
        k = int(np.prod(shape)) if shape else 1
        blocks[name] = flat[pos:pos + k].reshape(shape).copy()
        pos += k
    if pos != flat.size:
        raise ShapeError(f"{path}: payload size {flat.size} does not match block shapes ({pos} expected)")
    kind = header["model_kind"]
    extras = header.get("extras", {})
    if kind == "aux_encoder":
        obj = AuxiliaryEncoder(_lstm_from(blocks, "lstm"), frozen=extras.get("frozen", True),
                               pretrain_accuracy=extras.get("pretrain_accuracy"))
    elif kind == "res_lstm":
        obj = ResLstmModel(
            main_lstm=_lstm_from(blocks, "main_lstm"), res_lstm=_lstm_from(blocks, "res_lstm"),
            res_fc_W=blocks["res_fc.W"], res_fc_b=blocks["res_fc.b"],
            head=ClassifierHead(blocks["head.W"], blocks["head.b"]),
            dropout_rate=extras.get("dropout_rate", 0.5),
            res_lstm_dropout=extras.get("res_lstm_dropout", True),
            res_fc_dropout=extras.get("res_fc_dropout", False),
        )
    elif kind == "v_lstm":
        obj = VLstmModel(
            lstm1=_lstm_from(blocks, "lstm1"), lstm2=_lstm_from(blocks, "lstm2"),
            fc_W=blocks["fc.W"], fc_b=blocks["fc.b"],
            head=ClassifierHead(blocks["head.W"], blocks["head.b"]),
            dropout_rate=extras.get("dropout_rate", 0.5),
        )
    else:
        raise ConfigError(f"{path}: unknown model_kind {kind!r}")
    return obj, header


def _write_csv(path, header_row: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header_row)
        w.writerows(rows)


STEP_CSV_HEADER = ["epoch", "step", "ce", "dist", "loss", "clamped"]
EPOCH_CSV_HEADER = ["epoch", "ce", "dist", "loss", "train_acc", "val_acc", "shuffle_sha"]


def write_metrics(out_dir, history) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    steps_path = out_dir / "metrics_steps.csv"
    epochs_path = out_dir / "metrics_epochs.csv"
    _write_csv(steps_path, STEP_CSV_HEADER,
               ([r.epoch, r.step, fmt_float(r.ce), fmt_float(r.dist), fmt_float(r.loss), r.clamped]
                for r in history.steps))
    _write_csv(epochs_path, EPOCH_CSV_HEADER,
               ([r.epoch, fmt_float(r.ce), fmt_float(r.dist), fmt_float(r.loss),
                 fmt_float(r.train_acc), fmt_float(r.val_acc), r.shuffle_sha]
                for r in history.epochs))
    return steps_path, epochs_path


def write_probs(path, probs: np.ndarray, labels: np.ndarray) -> None:
    header = ["sample_id", "label"] + [f"p_{c}" for c in range(probs.shape[1])]
    rows = ([i, int(labels[i])] + [fmt_float(x) for x in probs[i]] for i in range(probs.shape[0]))
    _write_csv(path, header, rows)


def read_probs(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["sample_id", "label"]:
            raise ConfigError(f"{path}: not a probability CSV (header {header[:2]})")
        labels, rows = [], []
        for row in reader:
            labels.append(int(row[1]))
            rows.append([float(x) for x in row[2:]])
    return np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64)


def write_eval_summary(path, accuracy: float, ap: np.ndarray) -> None:
    rows = [["accuracy", fmt_float(accuracy)]]
    rows += [[f"average_precision_class_{c}", fmt_float(ap[c])] for c in range(ap.shape[0])]
    finite = ap[np.isfinite(ap)]
    rows.append(["mean_average_precision", fmt_float(finite.mean() if finite.size else float("nan"))])
    _write_csv(path, ["metric", "value"], rows)


def write_embeddings(path, rows) -> None:
    """rows: iterable of (sample_id, label, modality, vector)."""
    rows = list(rows)
    if not rows:
        raise ConfigError("write_embeddings: nothing to write")
    n = len(rows[0][3])
    header = ["sample_id", "label", "modality"] + [f"v_{i}" for i in range(n)]
    _write_csv(path, header,
               ([sid, int(lab), mod] + [fmt_float(x) for x in vec] for sid, lab, mod, vec in rows))


def write_sweep(path, result) -> None:
    rows = ([fmt_float(e.lam), fmt_float(e.val_accuracy), int(e.lam == result.selected.lam)]
            for e in result.entries)
    _write_csv(path, ["lambda", "val_accuracy", "selected"], rows)
