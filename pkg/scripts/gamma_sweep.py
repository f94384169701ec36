"""Net Sharpe against the training cost weight for K=1 and K=4 ensembles.

Usage: python scripts/gamma_sweep.py [--out DIR]
"""

from __future__ import annotations

import argparse
from pathlib import Path

from deepm.experiments import SweepConfig, gamma_sweep, write_sweep


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/gamma_sweep"))
    args = ap.parse_args()
    rows = gamma_sweep(SweepConfig())
    args.out.mkdir(parents=True, exist_ok=True)
    write_sweep(args.out / "gamma_sweep.csv", rows)
    for r in rows:
        print(f"gamma {r.gamma:.1f}  K={r.k}  net SR {r.net_sharpe:.3f}  turnover {r.turnover:.2f}"
              f" (members {r.member_turnover:.2f})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
