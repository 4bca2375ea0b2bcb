"""Energy-aware weight pruning.

One outer iteration: (1) order layers by estimated energy, most expensive
first; per layer, (2) magnitude-prune past the target ratio by a margin,
(3) greedily restore the weights that best repair the layer's output rows,
(4) refit the surviving weights per filter by least squares; then (5)
fine-tune the whole network with pruned weights frozen at zero. Iterations
advance each layer along its ratio schedule until validation accuracy falls
below the allowed drop, and the last acceptable network is returned.

Layer targets are the layer's own output rows recorded from the network as
it stood at the start of the current outer iteration (bias excluded), so
each layer is refit against what its (possibly already pruned) predecessors
actually feed it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .energy import HardwareProfile, LayerStats, layer_energy
from .errors import ConfigError, NumericError
from .nets import (
    CONV,
    FilterBank,
    Network,
    evaluate,
    network_forward,
    train_step,
)
from .tensorio import Dataset


@dataclass
class PruneConfig:
    """Knobs of the pruning pipeline; ratios count removed/total weights."""

    target_ratio_schedule: list[list[float]]  # per layer: ratio increment per iteration
    overprune_margin: float = 0.05
    restore_batch_g: int = 2
    residual_norm_p: int = 1
    accuracy_drop_budget: float = 0.01
    sample_images: int = 1024
    conv_position_subsample: int = 16
    finetune_epochs: int = 3
    finetune_lr: float = 0.02
    finetune_batch: int = 32
    topk: int = 5
    calib_images: int = 256

    def __post_init__(self) -> None:
        if not 0.0 <= self.overprune_margin < 1.0:
            raise ConfigError("overprune_margin must be in [0, 1)")
        if self.restore_batch_g < 1:
            raise ConfigError("restore_batch_g must be >= 1")
        if self.residual_norm_p not in (1, 2):
            raise ConfigError("residual_norm_p must be 1 or 2")
        if self.accuracy_drop_budget < 0:
            raise ConfigError("accuracy_drop_budget must be >= 0")
        for knob in ("sample_images", "conv_position_subsample", "finetune_batch", "calib_images"):
            if getattr(self, knob) < 1:
                raise ConfigError(f"{knob} must be >= 1")
        if self.finetune_epochs < 0 or self.finetune_lr < 0:
            raise ConfigError("finetune_epochs/lr must be >= 0")
        for li, incs in enumerate(self.target_ratio_schedule):
            total = 0.0
            for inc in incs:
                if inc < 0:
                    raise ConfigError(f"layer {li}: schedule increments must be >= 0")
                total += inc
            if total >= 1.0 + 1e-9:
                raise ConfigError(f"layer {li}: cumulative target ratio {total} >= 1")

    @property
    def iterations(self) -> int:
        return max((len(s) for s in self.target_ratio_schedule), default=0)

    def cumulative_targets(self) -> list[list[float]]:
        """Per layer, the cumulative ratio target at each outer iteration."""
        out = []
        for incs in self.target_ratio_schedule:
            cum: list[float] = []
            total = 0.0
            for it in range(self.iterations):
                if it < len(incs):
                    total = min(total + incs[it], 1.0)
                cum.append(total)
            out.append(cum)
        return out


def uniform_schedule(caps: list[float], step: float, iterations: int) -> list[list[float]]:
    """Per-layer increments of ``step`` per iteration until each layer's cap."""
    sched = []
    for cap in caps:
        incs: list[float] = []
        total = 0.0
        for _ in range(iterations):
            inc = min(step, cap - total)
            if inc <= 1e-12:
                break
            incs.append(inc)
            total += inc
        sched.append(incs)
    return sched


@dataclass
class LayerPruneState:
    """Sampled layer inputs/targets and the bookkeeping of Steps 2-4.

    ``x`` holds sampled patch-matrix rows of the layer input, ``y_hat`` the
    corresponding bias-free layer outputs recorded before any pruning this
    iteration; ``residuals`` stays equal to y_hat - x @ weights throughout.
    """

    x: np.ndarray  # (k', m) float64
    y_hat: np.ndarray  # (k', n) float64
    residuals: np.ndarray  # (k', n) float64
    support: np.ndarray  # (m, n) bool, mirrors the bank mask
    restorable: np.ndarray | None = None  # weights removed in Step 2
    original: np.ndarray | None = None  # weight values before Step 2
    norm_p: int = 1

    def residual_l1(self) -> float:
        return float(np.abs(self.residuals).sum())

    def filter_residual_l1(self) -> np.ndarray:
        return np.abs(self.residuals).sum(axis=0)


def make_state(bank: FilterBank, x_rows: np.ndarray, norm_p: int = 1) -> LayerPruneState:
    """Fresh state against the bank's current weights (zero residual)."""
    x = x_rows.astype(np.float64)
    y_hat = x @ bank.weights.astype(np.float64)
    return LayerPruneState(
        x=x,
        y_hat=y_hat,
        residuals=np.zeros_like(y_hat),
        support=bank.mask.copy(),
        restorable=np.zeros_like(bank.mask),
        original=bank.weights.copy(),
        norm_p=norm_p,
    )


# ---------------------------------------------------------------------------
# Step 1: ordering


def order_layers_by_energy(
    net: Network, stats: list[LayerStats], hw: HardwareProfile
) -> list[int]:
    """Layer indices sorted by descending estimated energy (ties: lower index)."""
    totals = [
        layer_energy(layer.bank.shape, st, hw).total
        for layer, st in zip(net.layers, stats)
    ]
    return sorted(range(len(totals)), key=lambda i: (-totals[i], i))


# ---------------------------------------------------------------------------
# Step 2: magnitude pruning


def magnitude_prune(bank: FilterBank, remove_fraction: float) -> FilterBank:
    """Mask out the smallest-magnitude retained weights, layer-wide.

    Removes ceil(remove_fraction * current nonzeros) weights; magnitude ties
    fall to the lower (column, row) index.
    """
    if not 0.0 <= remove_fraction <= 1.0:
        raise ConfigError(f"remove_fraction must be in [0,1], got {remove_fraction}")
    bank = bank.clone()
    rows, cols = np.nonzero(bank.mask)
    count = math.ceil(remove_fraction * rows.size - 1e-9)
    if count <= 0:
        return bank
    absw = np.abs(bank.weights[rows, cols])
    order = np.lexsort((rows, cols, absw))[:count]
    bank.mask[rows[order], cols[order]] = False
    bank.weights[rows[order], cols[order]] = 0.0
    return bank


# ---------------------------------------------------------------------------
# Step 3: greedy restoration


def _improvements(
    residual: np.ndarray, x_cols: np.ndarray, values: np.ndarray, p: int
) -> np.ndarray:
    """Residual-norm improvement of restoring each candidate weight."""
    trial = residual[:, None] - x_cols * values[None, :]
    if p == 1:
        return np.abs(residual).sum() - np.abs(trial).sum(axis=0)
    return np.square(residual).sum() - np.square(trial).sum(axis=0)


def greedy_restore(
    state: LayerPruneState, bank: FilterBank, q: int, g: int
) -> FilterBank:
    """Restore pruned weights (at their original values) until exactly q remain.

    Each round picks the filter with the largest l1 residual among those with
    restorable weights, evaluates every candidate's improvement, and restores
    the top-g (fewer when q would be overshot; negative improvements still
    count when forced).
    """
    bank = bank.clone()
    nnz = bank.nnz
    if q < nnz:
        raise ConfigError(f"target below current support ({q} < {nnz})")
    if q > bank.mask.size:
        raise ConfigError(f"target {q} exceeds layer size {bank.mask.size}")
    w64 = bank.weights.astype(np.float64)
    while nnz < q:
        per_filter = state.restorable.any(axis=0)
        if not per_filter.any():
            raise ConfigError(f"no restorable weights left below target {q}")
        score = state.filter_residual_l1()
        score[~per_filter] = -np.inf
        fi = int(np.argmax(score))  # ties: lowest filter index
        cand = np.where(state.restorable[:, fi])[0]
        vals = state.original[cand, fi].astype(np.float64)
        delta = _improvements(state.residuals[:, fi], state.x[:, cand], vals, state.norm_p)
        take = min(g, q - nnz, cand.size)
        chosen = cand[np.argsort(-delta, kind="stable")[:take]]
        bank.weights[chosen, fi] = state.original[chosen, fi]
        w64[chosen, fi] = state.original[chosen, fi]
        bank.mask[chosen, fi] = True
        state.support[chosen, fi] = True
        state.restorable[chosen, fi] = False
        state.residuals[:, fi] = state.y_hat[:, fi] - state.x @ w64[:, fi]
        nnz += take
    return bank


# ---------------------------------------------------------------------------
# Step 4: per-filter least-squares refit


def local_finetune_lsq(state: LayerPruneState, bank: FilterBank) -> FilterBank:
    """Refit each filter's surviving weights to minimise its l2 output error.

    Solved via an orthogonal factorisation; a trace-scaled ridge term kicks
    in when the normal equations are numerically singular. Filters with an
    empty support are left all-zero.
    """
    bank = bank.clone()
    n = bank.shape.n
    for fi in range(n):
        sup = np.where(bank.mask[:, fi])[0]
        if sup.size == 0:
            state.residuals[:, fi] = state.y_hat[:, fi]
            continue
        xs = state.x[:, sup]
        y = state.y_hat[:, fi]
        sol, _, rank, _ = np.linalg.lstsq(xs, y, rcond=None)
        if rank < sup.size:
            gram = xs.T @ xs
            ridge = 1e-6 * (np.trace(gram) / sup.size)
            sol = np.linalg.solve(gram + ridge * np.eye(sup.size), xs.T @ y)
        if not np.all(np.isfinite(sol)):
            raise NumericError(f"filter {fi}: least-squares refit diverged")
        col = np.zeros(bank.shape.m, dtype=bank.weights.dtype)
        col[sup] = sol.astype(bank.weights.dtype)
        bank.weights[:, fi] = col
        state.residuals[:, fi] = y - xs @ sol
    return bank


# ---------------------------------------------------------------------------
# Steps 2-4 for one layer


def prune_layer(
    net: Network,
    layer_idx: int,
    target_ratio: float,
    cfg: PruneConfig,
    state: LayerPruneState,
) -> dict:
    """Run Steps 2-4 on one layer in place; returns the layer report."""
    layer = net.layers[layer_idx]
    bank = layer.bank
    total = bank.mask.size
    report = {
        "layer": layer.name,
        "ratio_before": bank.compression_ratio,
        "residual_l1_before": state.residual_l1(),
    }
    q_target = total - int(round(target_ratio * total))
    over_ratio = min(target_ratio + cfg.overprune_margin, 1.0)
    q_over = total - int(round(over_ratio * total))
    remove = bank.nnz - q_over
    if remove <= 0:
        # already sparser than the over-pruned point: nothing to do
        report.update(
            ratio_after=bank.compression_ratio,
            residual_l1_step2=state.residual_l1(),
            residual_l1_step3=state.residual_l1(),
            residual_l1_after=state.residual_l1(),
        )
        return report

    snapshot = bank.weights.copy()
    mask_before = bank.mask.copy()
    pruned = magnitude_prune(bank, remove / bank.nnz)
    state.original = snapshot
    state.restorable = mask_before & ~pruned.mask
    state.support = pruned.mask.copy()
    state.residuals = state.y_hat - state.x @ pruned.weights.astype(np.float64)
    report["residual_l1_step2"] = state.residual_l1()

    q3 = min(q_target, pruned.nnz + int(state.restorable.sum()))
    restored = greedy_restore(state, pruned, q3, cfg.restore_batch_g)
    report["residual_l1_step3"] = state.residual_l1()

    refit = local_finetune_lsq(state, restored)
    report["residual_l1_after"] = state.residual_l1()
    report["ratio_after"] = refit.compression_ratio
    layer.bank = refit
    return report


# ---------------------------------------------------------------------------
# recording and measurement


def sample_rows(
    net: Network, n_images: int, cfg: PruneConfig, rng: np.random.Generator
) -> list[np.ndarray]:
    """Patch-matrix row indices to record per layer (subsampled for CONV)."""
    rows: list[np.ndarray] = []
    for layer in net.layers:
        s = layer.bank.shape
        positions = s.out_h * s.out_w
        if s.kind == CONV and positions > cfg.conv_position_subsample:
            picks = np.stack(
                [
                    rng.choice(positions, size=cfg.conv_position_subsample, replace=False)
                    + i * positions
                    for i in range(n_images)
                ]
            ).reshape(-1)
            rows.append(np.sort(picks))
        else:
            rows.append(np.arange(n_images * positions))
    return rows


def record_states(
    net: Network, images: np.ndarray, cfg: PruneConfig, rng: np.random.Generator
) -> list[LayerPruneState]:
    """Sample X and bias-free targets for every layer from the current net."""
    rows = sample_rows(net, images.shape[0], cfg, rng)
    _, records = network_forward(net, images, record_rows=rows)
    return [
        make_state(layer.bank, rec.x_rows, cfg.residual_norm_p)
        for layer, rec in zip(net.layers, records)
    ]


def measure_stats(net: Network, images: np.ndarray) -> list[LayerStats]:
    """Weight densities from the masks, activation densities from a forward pass."""
    _, records = network_forward(net, images, record_stats=True)
    return [
        LayerStats(
            weight_density=layer.bank.weight_density,
            input_act_density=rec.input_density,
            output_act_density=rec.output_density,
        )
        for layer, rec in zip(net.layers, records)
    ]


# ---------------------------------------------------------------------------
# Step 5: global fine-tuning


def global_finetune(
    net: Network, cfg: PruneConfig, dataset: Dataset, rng: np.random.Generator
) -> Network:
    """Masked SGD over the train split; returns the best-validation snapshot."""
    if cfg.finetune_epochs == 0:
        return net
    xtr = dataset.images[dataset.train_idx]
    ytr = dataset.labels[dataset.train_idx]
    xva = dataset.images[dataset.val_idx]
    yva = dataset.labels[dataset.val_idx]
    best = net.clone()
    best_acc, _ = evaluate(net, xva, yva, topk=cfg.topk)
    for _ in range(cfg.finetune_epochs):
        perm = rng.permutation(xtr.shape[0])
        try:
            for start in range(0, perm.size, cfg.finetune_batch):
                sel = perm[start : start + cfg.finetune_batch]
                train_step(net, xtr[sel], ytr[sel], cfg.finetune_lr, mask_frozen=True)
        except NumericError:
            return best  # diverged: keep the last stable snapshot
        acc, _ = evaluate(net, xva, yva, topk=cfg.topk)
        if acc > best_acc:
            best_acc = acc
            best = net.clone()
    return best


# ---------------------------------------------------------------------------
# outer loop


def prune_network(
    net: Network,
    cfg: PruneConfig,
    dataset: Dataset,
    hw: HardwareProfile,
    rng: np.random.Generator,
) -> tuple[Network, list[dict]]:
    """Iterate Steps 1-5 along the ratio schedule within the accuracy budget.

    Returns the last network whose post-fine-tune validation accuracy stayed
    within ``accuracy_drop_budget`` of the dense baseline, plus the log of
    per-iteration ratios, accuracies and energies.
    """
    if len(cfg.target_ratio_schedule) != len(net.layers):
        raise ConfigError(
            f"schedule covers {len(cfg.target_ratio_schedule)} layers, "
            f"net has {len(net.layers)}"
        )
    net = net.clone()
    net.validate_chain()
    xva = dataset.images[dataset.val_idx]
    yva = dataset.labels[dataset.val_idx]
    xtr = dataset.images[dataset.train_idx]
    baseline_acc, baseline_topk = evaluate(net, xva, yva, topk=cfg.topk)
    floor = baseline_acc - cfg.accuracy_drop_budget - 1e-12

    accepted = net.clone()
    log: list[dict] = []
    targets = cfg.cumulative_targets()
    for it in range(cfg.iterations):
        calib = xtr[rng.choice(xtr.shape[0], size=min(cfg.calib_images, xtr.shape[0]), replace=False)]
        stats = measure_stats(net, calib)
        order = order_layers_by_energy(net, stats, hw)

        sample = xtr[rng.choice(xtr.shape[0], size=min(cfg.sample_images, xtr.shape[0]), replace=False)]
        states = record_states(net, sample, cfg, rng)
        reports = {}
        for li in order:
            reports[li] = prune_layer(net, li, targets[li][it], cfg, states[li])

        net = global_finetune(net, cfg, dataset, rng)
        acc, topk_acc = evaluate(net, xva, yva, topk=cfg.topk)

        calib = xtr[rng.choice(xtr.shape[0], size=min(cfg.calib_images, xtr.shape[0]), replace=False)]
        stats = measure_stats(net, calib)
        total_energy = 0.0
        layer_entries = []
        for li, layer in enumerate(net.layers):
            e = layer_energy(layer.bank.shape, stats[li], hw).total
            total_energy += e
            layer_entries.append(
                {
                    "layer": layer.name,
                    "ratio": layer.bank.compression_ratio,
                    "residual_l1": reports[li]["residual_l1_after"],
                    "energy": e,
                }
            )
        log.append(
            {
                "iteration": it,
                "layers": layer_entries,
                "top1": acc,
                "topk": topk_acc,
                "total_energy": total_energy,
                "baseline_top1": baseline_acc,
                "accepted": bool(acc >= floor),
            }
        )
        if acc >= floor:
            accepted = net.clone()
        else:
            break
    return accepted, log


def magnitude_only_pass(net: Network, ratios: list[float]) -> Network:
    """Ablation reference: magnitude-prune every layer straight to its ratio."""
    out = net.clone()
    for layer, ratio in zip(out.layers, ratios):
        total = layer.bank.mask.size
        keep = total - int(round(ratio * total))
        remove = layer.bank.nnz - keep
        if remove > 0:
            layer.bank = magnitude_prune(layer.bank, remove / layer.bank.nnz)
    return out


def restore_pass(
    net: Network,
    ratios: list[float],
    cfg: PruneConfig,
    images: np.ndarray,
    rng: np.random.Generator,
) -> Network:
    """Ablation counterpart: Steps 2-4 at the same per-layer target ratios."""
    out = net.clone()
    states = record_states(out, images, cfg, rng)
    for li in range(len(out.layers)):
        prune_layer(out, li, ratios[li], cfg, states[li])
    return out
