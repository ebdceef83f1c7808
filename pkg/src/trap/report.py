"""CSV tables and SVG line plots for experiment results."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

ASR_HEADER = (
    "source", "target", "preset", "epsilon_255", "T", "t1", "mu", "p", "beta", "gamma", "seed",
    "asr", "asr_benign_subtracted",
)
DESTRUCTION_HEADER = ("preset", "corruption", "level", "rate", "count")
RFD_HEADER = ("layer_id", "method", "value")
TRACE_HEADER = ("step", "phase", "mean_loss", "transform_rate")
SWEEP_HEADER = ("axis", "value") + ASR_HEADER

NA = "NA"


class ReportError(OSError):
    pass


def format_cell(value) -> str:
    if value is None:
        return NA
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)  # shortest round-trip form, stable across runs
    return str(value)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        if isinstance(row, dict):
            row = [row[k] for k in header]
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} cells, header has {len(header)}")
        writer.writerow([format_cell(v) for v in row])
    return buf.getvalue()


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror or exc}") from None


def write_csv(path, header, rows) -> None:
    write_atomic(path, csv_text(header, rows).encode("utf-8"))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ReportBundle:
    asr_rows: list = field(default_factory=list)
    destruction_rows: list = field(default_factory=list)
    rfd_rows: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)  # preset -> list of trace rows
    sweep_rows: list = field(default_factory=list)

    def tables(self) -> dict:
        """Relative file name -> (header, rows) for every non-empty table."""
        out = {}
        if self.asr_rows:
            out["asr.csv"] = (ASR_HEADER, self.asr_rows)
        if self.destruction_rows:
            out["destruction.csv"] = (DESTRUCTION_HEADER, self.destruction_rows)
        if self.rfd_rows:
            out["rfd.csv"] = (RFD_HEADER, self.rfd_rows)
        for name in sorted(self.traces):
            out[f"{name}/trace.csv"] = (TRACE_HEADER, self.traces[name])
        if self.sweep_rows:
            out["sweep.csv"] = (SWEEP_HEADER, self.sweep_rows)
        return out


@dataclass
class CurveGroup:
    """One plot: x values shared by several named series."""

    name: str
    xlabel: str
    ylabel: str
    series: dict  # label -> list of (x, y)


def _ordered(values):
    seen = []
    for v in values:
        if v not in seen:
            seen.append(v)
    return seen


def curve_groups(bundle: ReportBundle) -> list[CurveGroup]:
    groups = []
    if bundle.asr_rows:
        for source in _ordered(r["source"] for r in bundle.asr_rows):
            series = {}
            for r in bundle.asr_rows:
                if r["source"] == source:
                    series.setdefault(r["target"], []).append((r["preset"], r["asr"]))
            groups.append(CurveGroup(f"asr_{source}", "preset", "attack success rate", series))
    for corruption in _ordered(r["corruption"] for r in bundle.destruction_rows):
        series = {}
        for r in bundle.destruction_rows:
            if r["corruption"] == corruption:
                series.setdefault(r["preset"], []).append((r["level"], r["rate"]))
        groups.append(CurveGroup(f"destruction_{corruption}", "level", "destruction rate", series))
    if bundle.rfd_rows:
        series = {}
        for r in bundle.rfd_rows:
            series.setdefault(r["method"], []).append((r["layer_id"], r["value"]))
        groups.append(CurveGroup("rfd", "layer", "relative feature difference", series))
    for name in sorted(bundle.traces):
        series = {"mean_loss": [(r["step"], r["mean_loss"]) for r in bundle.traces[name]]}
        groups.append(CurveGroup(f"trace_{name}", "step", "mean loss", series))
    if bundle.sweep_rows:
        axis = bundle.sweep_rows[0]["axis"]
        series = {}
        for r in bundle.sweep_rows:
            series.setdefault(f"{r['preset']}->{r['target']}", []).append((r["value"], r["asr"]))
        groups.append(CurveGroup(f"sweep_{axis}", axis, "attack success rate", series))
    return groups


def _plot(group: CurveGroup) -> bytes:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "trap", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        xs = _ordered(x for pts in group.series.values() for x, _ in pts)
        numeric = all(isinstance(x, (int, float)) for x in xs)
        for label, pts in group.series.items():
            x = [p[0] if numeric else xs.index(p[0]) for p in pts]
            y = [float("nan") if p[1] is None else float(p[1]) for p in pts]
            ax.plot(x, y, marker="o", label=str(label))
        if not numeric:
            ax.set_xticks(range(len(xs)))
            ax.set_xticklabels([str(x) for x in xs], rotation=30, ha="right")
        ax.set_xlabel(group.xlabel)
        ax.set_ylabel(group.ylabel)
        ax.set_title(group.name)
        ax.legend(fontsize="small")
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def emit_report(bundle: ReportBundle, out_dir, emit_plots=False) -> list[Path]:
    """Write every table (and one SVG per curve group); returns the written paths."""
    out_dir = Path(out_dir)
    written = []
    for name, (header, rows) in bundle.tables().items():
        write_csv(out_dir / name, header, rows)
        written.append(out_dir / name)
    if emit_plots:
        for group in curve_groups(bundle):
            path = out_dir / "plots" / f"{group.name}.svg"
            write_atomic(path, _plot(group))
            written.append(path)
    return written
