"""Report emission: per-layer energy tables (CSV/JSON), run summaries, logs.

File outputs carry 6 significant digits; printed tables use 4-digit
scientific notation in MAC-normalised units.
"""

from __future__ import annotations

import json
from pathlib import Path

from .energy import (
    HardwareProfile,
    LayerStats,
    dense_macs,
    network_energy,
    nonskipped_macs,
)
from .nets import CONV, LayerShape, Network
from .tensorio import atomic_write_text

CSV_COLUMNS = ("layer", "macs", "nonskipped_macs", "comp", "ifmap", "ofmap", "weights", "total")


def _sig6(x: float) -> float:
    return float(f"{x:.6g}")


def energy_rows(
    layers: list[tuple[str, LayerShape, LayerStats]], hw: HardwareProfile
) -> tuple[list[dict], dict]:
    """Per-layer report rows plus the totals row."""
    breakdowns, total = network_energy(layers, hw)
    rows = []
    for (name, shape, stats), br in zip(layers, breakdowns):
        rows.append(
            {
                "layer": name,
                "macs": dense_macs(shape),
                "nonskipped_macs": nonskipped_macs(shape, stats),
                "comp": _sig6(br.comp),
                "ifmap": _sig6(br.input_fmap),
                "ofmap": _sig6(br.output_fmap),
                "weights": _sig6(br.weights),
                "total": _sig6(br.total),
            }
        )
    totals = {
        "layer": "TOTAL",
        "macs": sum(r["macs"] for r in rows),
        "nonskipped_macs": sum(r["nonskipped_macs"] for r in rows),
        "comp": _sig6(total.comp),
        "ifmap": _sig6(total.input_fmap),
        "ofmap": _sig6(total.output_fmap),
        "weights": _sig6(total.weights),
        "total": _sig6(total.total),
    }
    return rows, totals


def write_energy_csv(path: str | Path, rows: list[dict], totals: dict) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for r in rows + [totals]:
        lines.append(",".join(str(r[c]) for c in CSV_COLUMNS))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_json(path: str | Path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def write_jsonl(path: str | Path, records: list[dict]) -> None:
    atomic_write_text(path, "\n".join(json.dumps(r) for r in records) + "\n")


def format_energy_table(rows: list[dict], totals: dict) -> str:
    head = f"{'layer':<10}{'macs':>12}{'non-skip':>12}{'comp':>12}{'ifmap':>12}{'ofmap':>12}{'weights':>12}{'total':>12}"
    lines = [head, "-" * len(head)]
    for r in rows + [totals]:
        lines.append(
            f"{r['layer']:<10}{r['macs']:>12}{r['nonskipped_macs']:>12}"
            f"{r['comp']:>12.3e}{r['ifmap']:>12.3e}{r['ofmap']:>12.3e}"
            f"{r['weights']:>12.3e}{r['total']:>12.3e}"
        )
    return "\n".join(lines)


def group_shares(
    layers: list[tuple[str, LayerShape, LayerStats]], hw: HardwareProfile
) -> dict:
    """CONV-vs-FC weight and energy shares (the breakdown-analysis view)."""
    breakdowns, total = network_energy(layers, hw)
    shares = {
        "conv_weights": 0,
        "fc_weights": 0,
        "conv_energy": 0.0,
        "fc_energy": 0.0,
    }
    for (_, shape, _), br in zip(layers, breakdowns):
        key = "conv" if shape.kind == CONV else "fc"
        shares[f"{key}_weights"] += shape.m * shape.n
        shares[f"{key}_energy"] += br.total
    wt = shares["conv_weights"] + shares["fc_weights"]
    et = shares["conv_energy"] + shares["fc_energy"]
    shares["conv_weight_share"] = shares["conv_weights"] / wt if wt else 0.0
    shares["conv_energy_share"] = shares["conv_energy"] / et if et else 0.0
    shares["total_energy"] = _sig6(et)
    return shares


def model_summary(
    net: Network, stats: list[LayerStats], hw: HardwareProfile
) -> dict:
    """One Table-style summary row: nonzeros, non-skipped MACs, energy."""
    layers = [(l.name, l.bank.shape, st) for l, st in zip(net.layers, stats)]
    _, total = network_energy(layers, hw)
    nsk = sum(nonskipped_macs(l.bank.shape, st) for l, st in zip(net.layers, stats))
    return {
        "nonzero_weights": net.total_nnz(),
        "nonskipped_macs": nsk,
        "energy": _sig6(total.total),
    }


def format_summary_table(before: dict, after: dict) -> str:
    """Before/after comparison of nonzeros, non-skipped MACs, energy, accuracy."""

    def pct(new, old):
        return f"({100.0 * new / old:.1f}%)" if old else "(n/a)"

    lines = [
        f"{'':<10}{'nonzero wts':>14}{'non-skip MACs':>16}{'energy':>12}{'top1':>8}{'topk':>8}",
        "-" * 68,
        (
            f"{'dense':<10}{before['nonzero_weights']:>14}{before['nonskipped_macs']:>16}"
            f"{before['energy']:>12.3e}{before['top1']:>8.3f}{before['topk']:>8.3f}"
        ),
        (
            f"{'pruned':<10}{after['nonzero_weights']:>14}{after['nonskipped_macs']:>16}"
            f"{after['energy']:>12.3e}{after['top1']:>8.3f}{after['topk']:>8.3f}"
        ),
        (
            f"{'ratio':<10}{pct(after['nonzero_weights'], before['nonzero_weights']):>14}"
            f"{pct(after['nonskipped_macs'], before['nonskipped_macs']):>16}"
            f"{pct(after['energy'], before['energy']):>12}"
        ),
    ]
    return "\n".join(lines)
