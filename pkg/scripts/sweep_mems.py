"""Alpha and beta sweeps of the mean-shift segmenter over several seeded scenes.

Writes one CSV per parameter with the per-seed T_e, F1 and E-score, then
prints the seed-averaged curves.

    python3 scripts/sweep_mems.py --seeds 1 2 3 --out sweep_out
"""

import argparse
from pathlib import Path

import numpy as np

from evgrasp import io
from evgrasp.cli import ALPHA_VALUES, BETA_VALUES
from evgrasp.mems import MemsConfig, sweep
from evgrasp.pipeline import segmentation_stream
from evgrasp.scenario import scenario_from_dict


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--objects", type=int, default=3)
    ap.add_argument("--max-events", type=int, default=2000)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", type=Path, default=Path("sweep_out"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    curves = {"alpha": {}, "beta": {}}
    records = {"alpha": [], "beta": []}
    for seed in args.seeds:
        sc = scenario_from_dict({"schema_version": 1, "seed": seed,
                                 "scene": {"random_objects": args.objects}})
        ev = segmentation_stream(sc, args.max_events)
        base = MemsConfig(alpha=0.0, beta=1)
        for param, values in (("alpha", ALPHA_VALUES), ("beta", BETA_VALUES)):
            for v, r in sweep(ev, base, param, values, args.repeats, seed):
                records[param].append([seed, v, r.T_e, r.F1, r.Ere, r.Fre, r.e_score])
                curves[param].setdefault(v, []).append((r.T_e, r.F1, r.e_score))
        print(f"seed {seed}: {len(ev)} events")

    header = ["seed", "value", "T_e_us", "F1", "Ere", "Fre", "e_score"]
    for param in ("alpha", "beta"):
        io.write_rows(args.out / f"{param}_sweep.csv", header, records[param])
        print(f"\n{param}: mean over {len(args.seeds)} seeds")
        for v, rows in curves[param].items():
            T, F, E = np.mean(rows, axis=0)
            print(f"  {param}={v:<5} T_e={T:9.3f} us F1={F:.4f} E={E:8.3f}")


if __name__ == "__main__":
    main()
