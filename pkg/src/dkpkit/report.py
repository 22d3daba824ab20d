"""Compression arithmetic and training-curve instrumentation.

Compression factors count nonzero stored values only: a compressed layer
costs its factor-pair parameters plus the overlay's active entries.  Sparse
index overhead is excluded from the headline factor (that is the accounting
under which 95% overlay sparsity on a 100x100 matrix with 10x10 factors
yields ~14x) but reported alongside for honesty, at two extra 32-bit words
per stored nonzero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .overlay import active_count

CURVE_COLUMNS = ("epoch", "step", "train_ppl", "valid_ppl", "sparsity",
                 "keep_prob", "bcd_phase")


def compression_factor(dense_shape: tuple[int, int], kp_params: int,
                       overlay_sparsity: float) -> float:
    """dense / (kp_params + active overlay entries), values only."""
    dense = dense_shape[0] * dense_shape[1]
    compressed = kp_params + active_count(dense, overlay_sparsity)
    return dense / compressed


def compression_factor_with_index_overhead(dense_shape: tuple[int, int],
                                           kp_params: int,
                                           overlay_sparsity: float) -> float:
    """Same ratio with each stored nonzero costing value + row + col words."""
    dense = dense_shape[0] * dense_shape[1]
    nnz = active_count(dense, overlay_sparsity)
    return dense / (kp_params + 3 * nnz)


def update_ratio(dense_shape: tuple[int, int], kp_params: int) -> float:
    """How many more gradient updates the dense overlay receives than the
    factor pair: its parameter count divided by the pair's."""
    return dense_shape[0] * dense_shape[1] / kp_params


@dataclass
class LayerReport:
    name: str
    dense_params: int
    kp_params: int
    overlay_nnz: int
    total_params: int


@dataclass
class CompressionReport:
    """Per-layer and aggregate parameter accounting for the gate matrices."""

    layers: list[LayerReport] = field(default_factory=list)

    @property
    def dense_params(self) -> int:
        return sum(l.dense_params for l in self.layers)

    @property
    def kp_params(self) -> int:
        return sum(l.kp_params for l in self.layers)

    @property
    def overlay_nnz(self) -> int:
        return sum(l.overlay_nnz for l in self.layers)

    @property
    def total_params(self) -> int:
        return sum(l.total_params for l in self.layers)

    @property
    def factor(self) -> float:
        return self.dense_params / self.total_params if self.total_params else float("inf")

    @property
    def factor_with_index_overhead(self) -> float:
        stored = self.total_params + 2 * self.overlay_nnz
        return self.dense_params / stored if stored else float("inf")

    def render(self) -> str:
        lines = [
            f"{'layer':16s} {'dense':>12s} {'kp':>10s} {'overlay nnz':>12s} {'total':>12s}",
        ]
        for l in self.layers:
            lines.append(f"{l.name:16s} {l.dense_params:12d} {l.kp_params:10d} "
                         f"{l.overlay_nnz:12d} {l.total_params:12d}")
        lines.append("")
        lines.append(f"dense params          : {self.dense_params}")
        lines.append(f"compressed params     : {self.total_params}")
        lines.append(f"compression factor    : {self.factor:.2f}x (values only)")
        lines.append(f"  with index overhead : {self.factor_with_index_overhead:.2f}x")
        if self.kp_params:
            ratio = self.dense_params / self.kp_params
            lines.append(f"update ratio (dense overlay / kp): {ratio:.1f}x")
        return "\n".join(lines)


def gate_report(model) -> CompressionReport:
    """Accounting over a model's gate matrices (the compressed layers)."""
    from .nn import DopedGate
    from .baselines import PrunedGate

    rep = CompressionReport()
    for idx, cell in enumerate(model.cells):
        gate = cell.gate
        dense = gate.out_dim * gate.in_dim
        kp = 0
        nnz = 0
        if isinstance(gate, DopedGate):
            kp = gate.layer.kp.param_count
            nnz = gate.layer.overlay.nnz
        elif isinstance(gate, PrunedGate):
            nnz = gate.pd.nnz
        rep.layers.append(LayerReport(
            name=f"lstm{idx}.gate", dense_params=dense, kp_params=kp,
            overlay_nnz=nnz, total_params=gate.param_count()))
    return rep


# ---------------------------------------------------------------------------
# Training curves
# ---------------------------------------------------------------------------


@dataclass
class CurvePoint:
    epoch: int
    step: int
    train_ppl: float
    valid_ppl: float
    sparsity: float
    keep_prob: float
    bcd_phase: str = ""


def render_curves(points: list[CurvePoint]) -> str:
    """CSV text for a curve log; overlay sparsity must be nondecreasing."""
    for a, b in zip(points, points[1:]):
        if b.sparsity < a.sparsity:
            raise ValueError(
                f"sparsity decreased between steps {a.step} and {b.step}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for p in points:
        writer.writerow([int(p.epoch), int(p.step), repr(float(p.train_ppl)),
                         repr(float(p.valid_ppl)), repr(float(p.sparsity)),
                         repr(float(p.keep_prob)), p.bcd_phase])
    return buf.getvalue()


def write_curves(points: list[CurvePoint], path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(render_curves(points))
    except OSError as exc:
        raise OSError(f"failed writing curves to {path}: {exc}") from exc


def parse_curves(text: str) -> list[CurvePoint]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CURVE_COLUMNS:
        raise ValueError(f"unexpected curve header: {header}")
    out = []
    for row in reader:
        epoch, step, train_ppl, valid_ppl, sparsity, keep_prob, phase = row
        out.append(CurvePoint(
            epoch=int(epoch), step=int(step), train_ppl=float(train_ppl),
            valid_ppl=float(valid_ppl), sparsity=float(sparsity),
            keep_prob=float(keep_prob), bcd_phase=phase))
    return out


def read_curves(path) -> list[CurvePoint]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            return parse_curves(fh.read())
    except OSError as exc:
        raise OSError(f"failed reading curves from {path}: {exc}") from exc
