"""Rule-based macroeconomic prior graph over the asset universe.

Channel membership is read from role tags rather than ticker names, so a
synthetic universe can exercise every rule. Recognised tags:

``equity-index``, ``sovereign-bond``, ``currency``
    asset classes used by the regional triangles.
``treasury``, ``energy``, ``base-metal``, ``precious-metal``, ``risk-fx``, ``safe-fx``
    members of the cross-asset channels.
``commodity-fx:<tag>``
    a currency linked to every asset carrying ``<tag>``.
``primary``
    the asset that represents its class in its region's triangle.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Each channel connects every pair of assets drawn from two different role sets.
CHANNELS: dict[str, tuple[str, ...]] = {
    "risk_on": ("equity-index", "base-metal", "risk-fx"),
    "inflation": ("energy", "treasury", "precious-metal"),
    "safe_haven": ("treasury", "safe-fx", "precious-metal"),
}
TRIANGLE_CLASSES = ("equity-index", "sovereign-bond", "currency")
TRIANGLE_REGIONS = ("US", "EU", "JP", "UK", "CA")
# Earlier-closing sessions get smaller ranks.
REGION_CLOSE_RANK = {"JP": 0, "APAC": 0, "EU": 1, "UK": 1}
DEFAULT_CLOSE_RANK = 2


@dataclass(frozen=True)
class AssetMeta:
    ticker: str
    group: str
    region: str = "other"
    roles: frozenset[str] = field(default_factory=frozenset)
    struct_bps: float = 1.0
    liquidity_scalar: float = 1.0
    final_bps: float = 1.0
    close_rank: int | None = None

    def __post_init__(self):
        if self.final_bps <= 0:
            raise ValueError(f"{self.ticker}: final_bps must be positive")
        object.__setattr__(self, "roles", frozenset(self.roles))

    @property
    def rank(self) -> int:
        if self.close_rank is not None:
            return self.close_rank
        return REGION_CLOSE_RANK.get(self.region, DEFAULT_CLOSE_RANK)


def load_universe(path: str | Path | None = None) -> list[AssetMeta]:
    """Read universe metadata; ``None`` loads the bundled 50-asset file.

    Columns: ``ticker,group,region,roles,struct_bps,liquidity_scalar,final_bps``
    and optionally ``close_rank``. Roles are ``;``-separated.
    """
    if path is None:
        text = resources.files("deepm").joinpath("resources/universe.csv").read_text()
    else:
        text = Path(path).read_text()
    out = []
    for row in csv.DictReader(text.splitlines()):
        rank = row.get("close_rank")
        out.append(AssetMeta(
            ticker=row["ticker"].strip(),
            group=row["group"].strip(),
            region=row["region"].strip() or "other",
            roles=frozenset(r.strip() for r in row["roles"].split(";") if r.strip()),
            struct_bps=float(row["struct_bps"]),
            liquidity_scalar=float(row["liquidity_scalar"]),
            final_bps=float(row["final_bps"]),
            close_rank=int(rank) if rank not in (None, "") else None,
        ))
    return out


def save_universe(universe: Sequence[AssetMeta], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "group", "region", "roles", "struct_bps", "liquidity_scalar", "final_bps", "close_rank"])
        for a in universe:
            w.writerow([a.ticker, a.group, a.region, ";".join(sorted(a.roles)), a.struct_bps,
                        a.liquidity_scalar, a.final_bps, a.rank])


@dataclass(frozen=True)
class MacroGraph:
    tickers: tuple[str, ...]
    adjacency: np.ndarray
    edge_channels: dict[tuple[int, int], frozenset[str]] = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return len(self.tickers)

    @property
    def degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def laplacian(self) -> np.ndarray:
        """``I - D^{-1/2} A D^{-1/2}``; rows of zero-degree nodes are zero."""
        d = self.degree
        inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
        return np.diag((d > 0).astype(float)) - inv[:, None] * self.adjacency * inv[None, :]

    def gcn_weights(self) -> np.ndarray:
        """Fixed spectral weights ``A_ij / sqrt(d_i d_j)``."""
        d = self.degree
        inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
        return inv[:, None] * self.adjacency * inv[None, :]

    def log_bias(self) -> np.ndarray:
        """``ln A_ij`` with ``-inf`` for non-edges."""
        with np.errstate(divide="ignore"):
            return np.where(self.adjacency > 0, np.log(np.where(self.adjacency > 0, self.adjacency, 1.0)), -np.inf)

    def permute(self, perm: Sequence[int]) -> "MacroGraph":
        perm = np.asarray(perm)
        return MacroGraph(tuple(self.tickers[i] for i in perm), self.adjacency[np.ix_(perm, perm)])

    def edges(self) -> list[tuple[int, int, float]]:
        i, j = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(a), int(b), float(self.adjacency[a, b])) for a, b in zip(i, j)]

    def save_edges(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j", "weight"])
            for a, b, wt in self.edges():
                w.writerow([self.tickers[a], self.tickers[b], repr(wt)])


def build_macro_graph(universe: Sequence[AssetMeta], self_loops: bool = True) -> MacroGraph:
    """Union of intra-group cliques, cross-asset channels, commodity-currency
    links and regional equity/bond/currency triangles. Every edge has weight 1."""
    n = len(universe)
    a = np.zeros((n, n))
    why: dict[tuple[int, int], set[str]] = {}

    def link(i: int, j: int, reason: str) -> None:
        if i == j:
            return
        a[i, j] = a[j, i] = 1.0
        why.setdefault((min(i, j), max(i, j)), set()).add(reason)

    by_group: dict[str, list[int]] = {}
    for i, m in enumerate(universe):
        if not m.group:
            warnings.warn(f"{m.ticker}: no macro group, node left isolated")
            continue
        by_group.setdefault(m.group, []).append(i)
    for g, members in by_group.items():
        for i, j in combinations(members, 2):
            link(i, j, f"group:{g}")

    def having(tag: str) -> list[int]:
        return [i for i, m in enumerate(universe) if tag in m.roles]

    for name, tags in CHANNELS.items():
        sets = [having(t) for t in tags]
        for s1, s2 in combinations(range(len(sets)), 2):
            for i in sets[s1]:
                for j in sets[s2]:
                    link(i, j, name)

    for i, m in enumerate(universe):
        for role in m.roles:
            if role.startswith("commodity-fx:"):
                for j in having(role.split(":", 1)[1]):
                    link(i, j, "commodity_fx")

    for region in TRIANGLE_REGIONS:
        corners = []
        for cls in TRIANGLE_CLASSES:
            cand = [i for i, m in enumerate(universe) if m.region == region and cls in m.roles]
            prim = [i for i in cand if "primary" in universe[i].roles]
            pick = prim or cand
            if pick:
                corners.append(pick[0])
        for i, j in combinations(corners, 2):
            link(i, j, f"region:{region}")

    if self_loops:
        np.fill_diagonal(a, 1.0)
    return MacroGraph(tuple(m.ticker for m in universe), a, {k: frozenset(v) for k, v in why.items()})


def dirichlet_energy(z: np.ndarray, graph: MacroGraph) -> float:
    """``Tr(Z^T L Z)`` with the normalized Laplacian."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != graph.n:
        raise ValueError(f"embedding has {z.shape[0]} rows for {graph.n} nodes")
    return float(np.trace(z.T @ graph.laplacian @ z))


def dirichlet_energy_pairwise(z: np.ndarray, graph: MacroGraph) -> float:
    """``1/2 sum_ij A_ij |z_i/sqrt(d_i) - z_j/sqrt(d_j)|^2``; zero-degree rows count as 0."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    d = graph.degree
    zn = np.where((d > 0)[:, None], z / np.sqrt(np.where(d > 0, d, 1.0))[:, None], 0.0)
    diff = zn[:, None, :] - zn[None, :, :]
    return float(0.5 * np.sum(graph.adjacency * np.sum(diff * diff, axis=-1)))


def synthetic_universe(groups: Sequence[str], roles: Iterable[Iterable[str]] | None = None,
                       regions: Sequence[str] | None = None, cost_bps: float = 1.0) -> list[AssetMeta]:
    """Metadata for synthetic assets ``A00, A01, ...``."""
    n = len(groups)
    roles = list(roles) if roles is not None else [()] * n
    regions = list(regions) if regions is not None else ["other"] * n
    return [
        AssetMeta(f"A{i:02d}", groups[i], regions[i], frozenset(roles[i]), cost_bps, 1.0, cost_bps)
        for i in range(n)
    ]
