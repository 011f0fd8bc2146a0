"""Collect eval reports under a run directory into one per-seed table.

    python3 scripts/summarize_runs.py runs/end_to_end
"""

import sys
from pathlib import Path


def read_report(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        if not line or line.startswith("#") or "=" not in line:
            continue
        k, _, v = line.partition("=")
        out[k] = v
    return out


def main(root: str) -> None:
    rows = {}
    for rep in sorted(Path(root).glob("*/seed*/eval/eval_report.txt")):
        model, seed = rep.parts[-4], rep.parts[-3]
        kv = read_report(rep)
        rows.setdefault(seed, {})[model] = float(kv["test_balanced.auc"])
    print("seed    ecg_auc  full_auc  gain")
    wins = 0
    for seed, r in rows.items():
        if "ecg" in r and "full" in r:
            gain = 100 * (r["full"] - r["ecg"])
            wins += gain >= 2.0
            print(f"{seed:<7} {r['ecg']:.4f}   {r['full']:.4f}   {gain:+.2f}")
    print(f"seeds with a fusion gain of at least 2 points: {wins}/{len(rows)}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs/end_to_end")
