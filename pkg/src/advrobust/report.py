"""Accuracy, robustness reports (CSV/JSON) and clean-vs-adversarial image dumps."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .attack import AttackConfig, adversarial_accuracy
from .data import Dataset, Normalization
from .model import Model, predict
from .serialize import atomic_write_bytes

REPORT_FIELDS = ("dataset", "epsilon", "clean_acc", "attacked_acc", "reduction", "defended_attacked_acc")


def accuracy(model: Model, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot compute accuracy on an empty dataset")
    return float(np.mean(predict(model, data.images) == data.labels))


@dataclass
class RobustnessReport:
    """Accuracies are fractions in [0, 1]; ``reduction`` is ``clean - attacked``."""

    dataset: str
    epsilon: float
    clean_acc: float
    attacked_acc: float
    reduction: float
    defended_attacked_acc: Optional[float] = None
    n_evaluated: int = 0
    seed: Optional[int] = None
    defended_clean_acc: Optional[float] = None

    def __post_init__(self):
        for name in ("clean_acc", "attacked_acc", "defended_attacked_acc", "defended_clean_acc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a fraction")
        if abs(self.reduction - (self.clean_acc - self.attacked_acc)) > 1e-9:
            raise ValueError("reduction must equal clean_acc - attacked_acc")

    @classmethod
    def from_accuracies(cls, dataset: str, epsilon: float, clean: float, attacked: float,
                        defended: Optional[float] = None, **extra) -> "RobustnessReport":
        return cls(dataset, epsilon, clean, attacked, clean - attacked, defended, **extra)

    def as_percentages(self) -> dict:
        pct = lambda v: None if v is None else round(100 * v, 2)
        return {"dataset": self.dataset, "epsilon": self.epsilon, "clean_acc": pct(self.clean_acc),
                "attacked_acc": pct(self.attacked_acc), "reduction": pct(self.reduction),
                "defended_attacked_acc": pct(self.defended_attacked_acc)}

    def summary(self) -> str:
        p = self.as_percentages()
        line = (f"{self.dataset} eps={self.epsilon:g}: clean {p['clean_acc']:.2f}% -> "
                f"attacked {p['attacked_acc']:.2f}% (reduction {p['reduction']:.2f})")
        if self.defended_attacked_acc is not None:
            line += f", adversarially trained {p['defended_attacked_acc']:.2f}%"
        return line


def robustness_report(model_plain: Model, model_defended: Optional[Model], data: Dataset,
                      epsilon: float, dataset: Optional[str] = None, clip: bool = True,
                      seed: Optional[int] = None) -> RobustnessReport:
    """Clean and FGSM accuracy of the plain model, plus FGSM accuracy of the defended model.

    The defended model is attacked with its own gradients (white-box).
    """
    if not epsilon >= 0:
        raise ValueError("epsilon must be non-negative")
    cfg = AttackConfig.for_data(epsilon, data, clip)
    clean = accuracy(model_plain, data)
    attacked = clean if epsilon == 0 else adversarial_accuracy(model_plain, data, cfg)
    defended = defended_clean = None
    if model_defended is not None:
        defended = adversarial_accuracy(model_defended, data, cfg)
        defended_clean = accuracy(model_defended, data)
    return RobustnessReport.from_accuracies(dataset or data.name, float(epsilon), clean, attacked,
                                            defended, n_evaluated=len(data), seed=seed,
                                            defended_clean_acc=defended_clean)


# --------------------------------------------------------------------------
# export / import

Reports = Union[RobustnessReport, Sequence[RobustnessReport]]


def _as_list(reports: Reports) -> list[RobustnessReport]:
    return [reports] if isinstance(reports, RobustnessReport) else list(reports)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}" if abs(v) <= 1.0 else repr(v)
    return str(v)


def reports_to_csv(reports: Reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in _as_list(reports):
        w.writerow([r.dataset, repr(float(r.epsilon))] +
                   [_fmt(getattr(r, f)) for f in REPORT_FIELDS[2:]])
    return buf.getvalue()


def reports_to_json(reports: Reports) -> str:
    return json.dumps([asdict(r) for r in _as_list(reports)], indent=2, sort_keys=False) + "\n"


def export_report(reports: Reports, fmt: str, path) -> None:
    """Write one or more reports as ``csv`` or ``json`` (atomically)."""
    if fmt == "csv":
        text = reports_to_csv(reports)
    elif fmt == "json":
        text = reports_to_json(reports)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    atomic_write_bytes(path, text.encode("utf-8"))


def read_reports(path) -> list[RobustnessReport]:
    """Inverse of :func:`export_report`; the format follows the file extension or content."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith(("[", "{")):
        items = json.loads(text)
        if isinstance(items, dict):
            items = [items]
        known = {f.name for f in fields(RobustnessReport)}
        return [RobustnessReport(**{k: v for k, v in d.items() if k in known}) for d in items]
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        opt = lambda k: float(row[k]) if row.get(k) not in (None, "") else None
        clean, attacked = float(row["clean_acc"]), float(row["attacked_acc"])
        out.append(RobustnessReport(row["dataset"], float(row["epsilon"]), clean, attacked,
                                    clean - attacked, opt("defended_attacked_acc")))
    return out


def format_table(reports: Reports) -> str:
    """Plain-text table with percentages to two decimals."""
    head = f"{'dataset':<16}{'eps':>6}{'clean':>9}{'FGSM':>9}{'reduction':>11}{'adv.trained':>13}"
    lines = [head, "-" * len(head)]
    for r in _as_list(reports):
        p = r.as_percentages()
        d = "" if p["defended_attacked_acc"] is None else f"{p['defended_attacked_acc']:.2f}%"
        lines.append(f"{r.dataset:<16}{r.epsilon:>6g}{p['clean_acc']:>8.2f}%{p['attacked_acc']:>8.2f}%"
                     f"{p['reduction']:>11.2f}{d:>13}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# image dumps

def to_bytes(x: np.ndarray, norm: Normalization) -> np.ndarray:
    """Denormalize a (C,H,W) image to uint8 pixels."""
    raw = norm.to_raw(np.asarray(x, dtype=np.float64))
    if norm.mode == "none":
        lo, hi = float(raw.min()), float(raw.max())
        raw = (raw - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(raw)
    return np.clip(np.rint(raw), 0, 255).astype(np.uint8)


def write_pnm(path, img: np.ndarray) -> None:
    """Binary PGM (P5) for 1 channel, PPM (P6) for 3 channels."""
    img = np.asarray(img, dtype=np.uint8)
    c, h, w = img.shape
    if c == 1:
        body = b"P5\n%d %d\n255\n" % (w, h) + img[0].tobytes()
    elif c == 3:
        body = b"P6\n%d %d\n255\n" % (w, h) + img.transpose(1, 2, 0).tobytes()
    else:
        raise ValueError(f"cannot write a {c}-channel image as PGM/PPM")
    atomic_write_bytes(path, body)


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file written by :func:`write_pnm` back to (C,H,W) uint8."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if magic == b"P5":
        return np.frombuffer(rest, dtype=np.uint8).reshape(1, h, w)
    if magic == b"P6":
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    raise ValueError(f"{path}: unsupported PNM magic {magic!r}")


def dump_image_pair(x: np.ndarray, x_adv: np.ndarray, pred_clean: int, pred_adv: int,
                    class_names: Optional[Sequence[str]], path_prefix, norm: Normalization,
                    true_label: Optional[int] = None) -> list[Path]:
    """Write ``<prefix>_clean``/``<prefix>_adv`` images plus a ``<prefix>.txt`` sidecar."""
    x, x_adv = np.asarray(x), np.asarray(x_adv)
    if x.shape != x_adv.shape:
        raise ValueError("clean and adversarial images differ in shape")
    prefix = Path(path_prefix)
    if not prefix.parent.exists():
        raise FileNotFoundError(f"output directory {prefix.parent} does not exist")
    ext = ".pgm" if x.shape[0] == 1 else ".ppm"
    clean_path = prefix.with_name(prefix.name + "_clean" + ext)
    adv_path = prefix.with_name(prefix.name + "_adv" + ext)
    write_pnm(clean_path, to_bytes(x, norm))
    write_pnm(adv_path, to_bytes(x_adv, norm))
    name = (lambda i: class_names[i]) if class_names else str
    lines = [f"clean_prediction: {pred_clean} {name(pred_clean)}",
             f"adversarial_prediction: {pred_adv} {name(pred_adv)}",
             f"flipped: {str(pred_clean != pred_adv).lower()}"]
    if true_label is not None:
        lines.insert(0, f"true_label: {true_label} {name(true_label)}")
    side = prefix.with_name(prefix.name + ".txt")
    atomic_write_bytes(side, ("\n".join(lines) + "\n").encode("utf-8"))
    return [clean_path, adv_path, side]
