"""
Transfer evaluation, threshold sweeps, report serialisation and image export.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .attacks import AdversarialExample, AttackConfig, attack_dataset
from .errors import ContractError, DimensionError, FormatError
from .metrics import ms_ssim

REPORT_SCHEMA_VERSION = 1


@dataclass
class ImageRecord:
    image_id: int
    label: int
    white_box_hit: Optional[bool]
    target_hits: Dict[str, Optional[bool]]
    ms_ssim: float


@dataclass
class AttackReport:
    method: str
    records: List[ImageRecord]
    white_box_rate: Optional[float]
    target_rates: Dict[str, Optional[float]]
    average_rate: Optional[float]
    eligible: Dict[str, int]
    config: dict = field(default_factory=dict)
    seed: int = 0
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        d = dict(d)
        d["records"] = [ImageRecord(**r) for r in d["records"]]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _rate(hits: int, eligible: int) -> Optional[float]:
    return 100.0 * hits / eligible if eligible else None


def average_of(rates: Mapping[str, Optional[float]]) -> Optional[float]:
    defined = [r for r in rates.values() if r is not None]
    return float(np.mean(defined)) if defined else None


def transfer_success_rate(examples: Sequence[AdversarialExample], targets: Mapping[str, object],
                          method: str = "", config: Optional[dict] = None, seed: int = 0,
                          with_ms_ssim: bool = True) -> AttackReport:
    """Score adversarial examples against black-box targets.

    An example is eligible for a target only when that target classifies the
    clean image correctly; a hit is a wrong prediction on the adversarial
    image. Rates are percentages of eligible examples; a target with no
    eligible example gets ``None`` and is left out of the average.
    """
    n = len(examples)
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    hits_by_target: Dict[str, List[Optional[bool]]] = {}
    rates, eligible = {}, {}
    if n:
        x = np.stack([ex.x for ex in examples])
        x_adv = np.stack([ex.x_adv for ex in examples])
    for name, model in targets.items():
        if n == 0:
            hits_by_target[name], rates[name], eligible[name] = [], None, 0
            continue
        try:
            clean = model.predict(x)
            adv = model.predict(x_adv)
        except DimensionError as exc:
            raise DimensionError(f"target {name!r}: {exc}") from None
        ok = clean == labels
        flags = [bool(a != y) if c else None for a, y, c in zip(adv, labels, ok)]
        hits_by_target[name] = flags
        eligible[name] = int(ok.sum())
        rates[name] = _rate(int(((adv != labels) & ok).sum()), eligible[name])

    wb_ok = [ex.clean_prediction == ex.label for ex in examples]
    wb_hits = sum(1 for ex, ok in zip(examples, wb_ok) if ok and ex.fooled)
    eligible["white_box"] = int(sum(wb_ok))
    records = [
        ImageRecord(
            image_id=int(ex.image_id),
            label=int(ex.label),
            white_box_hit=bool(ex.fooled) if wb_ok[i] else None,
            target_hits={name: hits_by_target[name][i] for name in targets},
            ms_ssim=ms_ssim(ex.x, ex.x_adv) if with_ms_ssim else float("nan"),
        )
        for i, ex in enumerate(examples)
    ]
    return AttackReport(
        method=method,
        records=records,
        white_box_rate=_rate(wb_hits, eligible["white_box"]),
        target_rates=rates,
        average_rate=average_of(rates),
        eligible=eligible,
        config=config or {},
        seed=seed,
    )


@dataclass
class SweepRecord:
    threshold: float
    average_rate: Optional[float]
    target_rates: Dict[str, Optional[float]]
    gate_mode: str
    white_box_rate: Optional[float] = None


def p_sweep(grid: Sequence[float], template: AttackConfig, model, targets, images, labels, image_ids=None,
            chunk_size=50, workers=1, return_reports=False):
    """Attack and evaluate once per threshold; records come back in ascending threshold order."""
    if len(grid) == 0:
        raise ContractError("p_sweep needs a non-empty grid")
    records, reports = [], []
    for p in sorted(float(v) for v in grid):
        cfg = replace(template, sapr_enabled=True, threshold=p)
        examples = attack_dataset(images, labels, model, cfg, image_ids, chunk_size=chunk_size, workers=workers)
        report = transfer_success_rate(examples, targets, cfg.label, cfg.to_dict(), cfg.seed, with_ms_ssim=False)
        records.append(SweepRecord(p, report.average_rate, report.target_rates, cfg.gate_mode, report.white_box_rate))
        reports.append(report)
    return (records, reports) if return_reports else records


def sweep_csv(records: Sequence[SweepRecord]) -> str:
    names = list(records[0].target_rates) if records else []
    lines = [",".join(["P", "avg_rate"] + names)]
    fmt = lambda v: "" if v is None else f"{v:.4f}"  # noqa: E731
    for r in records:
        lines.append(",".join([f"{r.threshold:.4f}", fmt(r.average_rate)] + [fmt(r.target_rates[n]) for n in names]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def format_table(reports: Sequence[AttackReport]) -> str:
    """Aligned text table: one row per method, one column per target, then the average."""
    targets: List[str] = []
    for rep in reports:
        targets.extend(t for t in rep.target_rates if t not in targets)
    header = ["Method", "White-box"] + targets + ["Average"]
    fmt = lambda v: "--" if v is None else f"{v:.2f}%"  # noqa: E731
    rows = [[rep.method or "-", fmt(rep.white_box_rate)] + [fmt(rep.target_rates.get(t)) for t in targets]
            + [fmt(rep.average_rate)] for rep in reports]
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    out = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    out.append("  ".join("-" * w for w in widths))
    for r in rows:
        out.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(out) + "\n"


def emit_report(report: AttackReport, path) -> tuple:
    """Write ``<path>.json`` and ``<path>.txt``; returns both paths."""
    base = Path(path)
    json_path, txt_path = base.with_suffix(".json"), base.with_suffix(".txt")
    json_path.write_text(report.to_json())
    txt_path.write_text(format_table([report]))
    return json_path, txt_path


def load_report(path) -> AttackReport:
    return AttackReport.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------


def pnm_bytes(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 2:
        magic, body = b"P5", img
    elif img.ndim == 3 and img.shape[0] == 3:
        magic, body = b"P6", np.transpose(img, (1, 2, 0))
    else:
        raise DimensionError(f"export expects [H, W], [1, H, W] or [3, H, W]; got {img.shape}")
    if not np.isfinite(img).all() or img.min() < 0 or img.max() > 255:
        raise ContractError("pixel values must lie in [0, 255]")
    h, w = body.shape[:2]
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    return header + np.rint(body).astype(np.uint8).tobytes()


def export_image(image, path) -> Path:
    """Write a binary PPM (3 channels) or PGM (1 channel) file."""
    path = Path(path)
    path.write_bytes(pnm_bytes(image))
    return path


def perturbation_image(delta) -> np.ndarray:
    """Map a perturbation to 0..255 around mid-grey, scaled by its peak magnitude."""
    delta = np.asarray(delta, dtype=np.float64)
    peak = np.abs(delta).max()
    if peak == 0:
        return np.full(delta.shape, 127.5)
    return 127.5 + 127.5 * delta / peak


def _pnm_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header", offset=pos)
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Parse a binary P5/P6 file with maxval 255 into ``[C, H, W]`` floats."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pnm_tokens(raw, 4)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}", offset=0)
    if int(maxval) != 255:
        raise FormatError(f"unsupported maxval {int(maxval)}")
    w, h = int(w), int(h)
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    if len(raw) - offset < n:
        raise FormatError("truncated pixel data", offset=len(raw))
    px = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset).astype(np.float64)
    return px.reshape(h, w, channels).transpose(2, 0, 1)
