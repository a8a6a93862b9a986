"""Scalar-count cost accounting for training runs.

Memory is tracked as counts of stored activation scalars and compute as
multiply-accumulates (MACCs). Byte-level or allocator-level measurement is
deliberately not attempted.
"""

from __future__ import annotations

import contextlib
import contextvars
import csv
import io
from dataclasses import dataclass, field

_ACTIVE: contextvars.ContextVar["CostLedger | None"] = contextvars.ContextVar(
    "spela_cost_ledger", default=None
)


class ProfilerError(RuntimeError):
    pass


@dataclass
class CostLedger:
    forward_maccs: int = 0
    update_maccs: int = 0
    head_maccs: int = 0
    samples: int = 0
    stored_activation_scalars: int = 0
    peak_stored_activation_scalars: int = 0
    model_param_scalars: int = 0
    forward_calls: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)
    started: bool = False

    def add_forward(self, n: int, layer: int | None = None, calls: int = 1) -> None:
        self.forward_maccs += int(n)
        if layer is not None:
            self.forward_calls[layer] = self.forward_calls.get(layer, 0) + calls

    def add_update(self, n: int) -> None:
        self.update_maccs += int(n)

    def add_head(self, n: int) -> None:
        self.head_maccs += int(n)

    def allocate(self, n: int) -> None:
        self.stored_activation_scalars += int(n)
        if self.stored_activation_scalars > self.peak_stored_activation_scalars:
            self.peak_stored_activation_scalars = self.stored_activation_scalars

    def release(self, n: int) -> None:
        self.stored_activation_scalars -= int(n)
        if self.stored_activation_scalars < 0:
            raise ProfilerError("released more activation scalars than were stored")

    def count_samples(self, n: int) -> None:
        self.samples += int(n)
        self.started = True

    def snapshot(self, epoch: int) -> None:
        self.snapshots.append(
            {
                "epoch": epoch,
                "forward_maccs": self.forward_maccs,
                "update_maccs": self.update_maccs,
                "head_maccs": self.head_maccs,
                "samples": self.samples,
                "peak_stored_activation_scalars": self.peak_stored_activation_scalars,
            }
        )

    def per_sample(self) -> dict:
        n = max(self.samples, 1)
        return {
            "forward_maccs": self.forward_maccs / n,
            "update_maccs": self.update_maccs / n,
            "head_maccs": self.head_maccs / n,
            "train_maccs": (self.forward_maccs + self.update_maccs) / n,
        }


def active_ledger() -> CostLedger | None:
    return _ACTIVE.get()


@contextlib.contextmanager
def attach(ledger: CostLedger | None = None):
    """Make ``ledger`` the active ledger for the enclosed training run.

    Raises if the ledger has already seen training samples: counters must
    start from the beginning of a run.
    """
    if ledger is None:
        ledger = CostLedger()
    if ledger.started:
        raise ProfilerError("cannot attach a ledger after training has started")
    token = _ACTIVE.set(ledger)
    try:
        yield ledger
    finally:
        _ACTIVE.reset(token)


@contextlib.contextmanager
def suspended():
    """Stop counting for the enclosed block (used for evaluation passes)."""
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


def model_memory(net) -> int:
    """Parameter scalar count of a network, including frozen embedding heads."""
    if net is None:
        return 0
    return int(net.param_count())


def per_sample_peak(ledger: CostLedger, batch_size: int) -> float:
    return ledger.peak_stored_activation_scalars / batch_size


def report(rows: list[dict], baseline_key: str = "depth") -> list[dict]:
    """Add relative-to-baseline columns to profile rows.

    ``rows`` are dicts with at least ``algorithm``, ``batch_size``,
    ``baseline_key`` and the per-sample counters. The baseline for each
    (algorithm, batch_size) group is the row with the smallest
    ``baseline_key``; its relative values are 1.0 by construction.
    """
    out = []
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["algorithm"], r["batch_size"]), []).append(r)
    for key in sorted(groups):
        grp = sorted(groups[key], key=lambda r: r[baseline_key])
        base = grp[0]
        for r in grp:
            r = dict(r)
            r["relative_peak_memory"] = r["peak_activation_scalars"] / base["peak_activation_scalars"]
            r["relative_train_maccs"] = r["train_maccs"] / base["train_maccs"]
            out.append(r)
    return out


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def to_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0].keys())
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.rjust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
