"""Whole-model compression-ratio selection.

Two allocators choose per-layer ranks under a MAC budget expressed as a
retained fraction ``alpha`` (compressed MACs / original MACs <= alpha):

* :func:`equal_acc_select` minimizes the worst per-layer accuracy drop tau
  over a finite grid of pre-evaluated rank options.
* :func:`greedy_energy_select` maximizes the product over layers of summed
  leading singular values by greedily decrementing the rank whose cut loses
  the least log-energy per MAC saved.

:func:`ranks_from_ratio` converts a per-layer retained fraction directly
into ranks: exactly for single-rank methods, and by proportionally scaling
the maximal ranks for tucker and tt.

A caution on inputs: verification accuracies measured on a compressed
model *before* any fine-tuning are known to be a poor predictor of its
accuracy *after* fine-tuning.  These allocators optimize exactly the
pre-fine-tuning metrics they are handed; treat the resulting plans as
budget allocations, not accuracy guarantees for a retrained model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import mac_cost, max_ranks


@dataclass(frozen=True)
class AccTable:
    """Per-layer verification accuracies over a grid of rank vectors."""

    accuracies: dict[tuple[int, ...], float]
    p_orig: float

    def __post_init__(self):
        object.__setattr__(
            self,
            "accuracies",
            {tuple(int(x) for x in k): float(v) for k, v in self.accuracies.items()},
        )
        if not self.accuracies:
            raise ValueError("accuracy table is empty")
        for r, p in self.accuracies.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"accuracy {p} for ranks {r} outside [0, 1]")
        if not 0.0 <= self.p_orig <= 1.0:
            raise ValueError(f"original accuracy {self.p_orig} outside [0, 1]")

    @property
    def grid(self) -> list[tuple[int, ...]]:
        return list(self.accuracies.keys())


@dataclass(frozen=True)
class GridCosts:
    """MACs of each grid option of one layer plus the uncompressed MACs."""

    macs: dict[tuple[int, ...], int]
    macs_original: int

    def __post_init__(self):
        object.__setattr__(
            self, "macs", {tuple(int(x) for x in k): int(v) for k, v in self.macs.items()}
        )
        if self.macs_original <= 0:
            raise ValueError("original MACs must be positive")


@dataclass(frozen=True)
class RankPlan:
    """A per-layer rank assignment with its achieved budget numbers.

    ``achieved_ratio`` is the retained MAC fraction (compressed / original),
    matching the budget convention of the solvers; reports print the saved
    fraction alongside.
    """

    ranks: tuple[tuple[int, ...], ...]
    tau: float
    achieved_macs: int
    achieved_ratio: float
    strategy: str
    meta: dict = field(default_factory=dict)


def ranks_from_ratio(method: str, s: int, t: int, k: int, alpha: float) -> tuple[int, ...]:
    """Largest rank vector whose MACs stay within ``alpha`` of the original.

    Single-rank methods solve the linear budget directly; tucker and tt
    scale their maximal ranks by a common factor (rounded down, floors at
    1 per component).  Feature-map dims cancel in the ratio.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    full = max_ranks(method, s, t, k)
    budget = alpha * mac_cost(s, t, k, 1, 1, "original").macs_original

    def macs_of(ranks: tuple[int, ...]) -> int:
        return mac_cost(s, t, k, 1, 1, method, ranks).macs_compressed

    if len(full) == 1:
        per_rank = macs_of((1,))
        r = min(full[0], int(budget // per_rank))
        if r < 1:
            raise ValueError(f"budget alpha={alpha} infeasible even at rank 1 for {method}")
        return (r,)

    def scaled(theta: float) -> tuple[int, ...]:
        return tuple(max(1, int(math.floor(theta * rm))) for rm in full)

    if macs_of(scaled(0.0)) > budget:
        raise ValueError(f"budget alpha={alpha} infeasible even at all-ones ranks for {method}")
    thetas = sorted({j / rm for rm in full for j in range(1, rm + 1)})
    lo, hi = 0, len(thetas) - 1
    best = scaled(0.0)
    while lo <= hi:
        mid = (lo + hi) // 2
        cand = scaled(thetas[mid])
        if macs_of(cand) <= budget:
            best = cand
            lo = mid + 1
        else:
            hi = mid - 1
    return best


def equal_acc_select(
    tables: list[AccTable], costs: list[GridCosts], alpha: float
) -> RankPlan:
    """Minimize the worst per-layer accuracy drop under the MAC budget.

    For a candidate tolerance tau each layer independently takes its
    cheapest grid option whose accuracy stays within tau of the original;
    tau is bisected over the finite set of observed accuracy gaps.  Ties in
    a layer's cheapest option break toward higher accuracy, then grid order.
    """
    if not tables:
        raise ValueError("no accuracy tables")
    if len(tables) != len(costs):
        raise ValueError(f"{len(tables)} tables vs {len(costs)} cost grids")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    p_orig = tables[0].p_orig
    for tab in tables[1:]:
        if abs(tab.p_orig - p_orig) > 1e-12:
            raise ValueError("tables disagree on the original accuracy")
    for tab, cost in zip(tables, costs):
        missing = set(tab.accuracies) - set(cost.macs)
        if missing:
            raise ValueError(f"cost grid missing entries for ranks {sorted(missing)}")

    c_orig = sum(c.macs_original for c in costs)
    budget = alpha * c_orig

    def layer_choice(layer: int, tau: float):
        """Cheapest admissible option, or None."""
        best = None
        for idx, (ranks, acc) in enumerate(tables[layer].accuracies.items()):
            if acc < p_orig - tau - 1e-15:
                continue
            key = (costs[layer].macs[ranks], -acc, idx)
            if best is None or key < best[0]:
                best = (key, ranks)
        return best

    def plan_at(tau: float):
        choices = []
        total = 0
        for layer in range(len(tables)):
            got = layer_choice(layer, tau)
            if got is None:
                return None
            choices.append(got[1])
            total += got[0][0]
        if total > budget:
            return None
        return tuple(choices), total

    gaps = sorted({p_orig - acc for tab in tables for acc in tab.accuracies.values()})
    if plan_at(gaps[-1]) is None:
        raise ValueError(f"budget alpha={alpha} infeasible even at maximal tolerance")
    lo, hi = 0, len(gaps) - 1
    best_tau, best_plan = gaps[-1], plan_at(gaps[-1])
    while lo <= hi:
        mid = (lo + hi) // 2
        got = plan_at(gaps[mid])
        if got is not None:
            best_tau, best_plan = gaps[mid], got
            hi = mid - 1
        else:
            lo = mid + 1
    ranks, total = best_plan
    return RankPlan(
        ranks=ranks,
        tau=best_tau,
        achieved_macs=total,
        achieved_ratio=total / c_orig,
        strategy="equal_acc",
        meta={"p_orig": p_orig, "alpha": alpha},
    )


def greedy_energy_select(
    sv_lists: list[np.ndarray], costs: list[GridCosts], alpha: float
) -> RankPlan:
    """Greedy rank allocation maximizing the product of summed singular values.

    Starts from full ranks and repeatedly decrements the rank of the layer
    whose decrement costs the least log-energy per MAC saved, until the
    budget holds.  When one more decrement can already reach the budget,
    the cheapest budget-reaching cut (smallest absolute log-energy loss)
    is taken instead, which avoids overshooting on the last step.  Ties
    break toward the lowest layer index.  Only single-rank layers are
    supported (the grids must cover ranks 1..R).
    """
    if not sv_lists:
        raise ValueError("no singular value lists")
    if len(sv_lists) != len(costs):
        raise ValueError(f"{len(sv_lists)} layers vs {len(costs)} cost grids")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    svs = []
    for i, sv in enumerate(sv_lists):
        sv = np.asarray(sv, dtype=np.float64)
        if sv.ndim != 1 or sv.size == 0:
            raise ValueError(f"layer {i}: singular values must be a nonempty vector")
        if np.any(sv <= 0) or np.any(np.diff(sv) > 0):
            raise ValueError(f"layer {i}: singular values must be positive and descending")
        svs.append(sv)

    def macs_of(layer: int, r: int) -> int:
        return costs[layer].macs[(r,)]

    full = [sv.size for sv in svs]
    for i, r in enumerate(full):
        for j in range(1, r + 1):
            if (j,) not in costs[i].macs:
                raise ValueError(f"layer {i}: cost grid lacks rank {j}")
    cums = [np.cumsum(sv) for sv in svs]
    ranks = list(full)
    c_orig = sum(c.macs_original for c in costs)
    budget = alpha * c_orig
    total = sum(macs_of(i, r) for i, r in enumerate(ranks))
    trajectory = [tuple(ranks)]
    while total > budget:
        best = None
        reaching = None
        for i, r in enumerate(ranks):
            if r <= 1:
                continue
            dlog = math.log(cums[i][r - 1]) - math.log(cums[i][r - 2])
            dmac = macs_of(i, r) - macs_of(i, r - 1)
            if dmac <= 0:
                raise ValueError(f"layer {i}: MACs not increasing in rank")
            if total - dmac <= budget:
                key = (dlog, i)
                if reaching is None or key < reaching:
                    reaching = key
            key = (dlog / dmac, i)
            if best is None or key < best:
                best = key
        if best is None:
            raise ValueError(f"budget alpha={alpha} infeasible even at all-ones ranks")
        i = reaching[1] if reaching is not None else best[1]
        total -= macs_of(i, ranks[i]) - macs_of(i, ranks[i] - 1)
        ranks[i] -= 1
        trajectory.append(tuple(ranks))
    log_energy = float(sum(math.log(cums[i][r - 1]) for i, r in enumerate(ranks)))
    return RankPlan(
        ranks=tuple((r,) for r in ranks),
        tau=0.0,
        achieved_macs=int(total),
        achieved_ratio=total / c_orig,
        strategy="greedy_energy",
        meta={
            "log_energy": log_energy,
            "alpha": alpha,
            "steps": len(trajectory) - 1,
            "trajectory": trajectory,
        },
    )
