"""Walk through the two-phase picture on the bundled fig2 problem.

Label-noise SGD first shrinks every neuron (the mean norm falls), then plain
GD grows the shrunken neurons back along the teacher direction. The script
prints a coarse table of the trace and the two landmark steps.

    python3 demos/two_phase.py [--config fig4.cfg]
"""

import argparse
import csv
import tempfile
from pathlib import Path

import numpy as np

from twophase import cli, config as C


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="fig2.cfg")
    ap.add_argument("--rows", type=int, default=20)
    args = ap.parse_args()

    cfg = C.load_config(cli.resolve_config(args.config))
    with tempfile.TemporaryDirectory() as tmp:
        summary, status = cli.execute(cfg, Path(tmp))
        with open(Path(tmp) / cfg.trace) as fh:
            rows = list(csv.DictReader(fh))

    step = np.array([int(r["step"]) for r in rows])
    norm = np.array([float(r["mean_norm"]) for r in rows])
    align = np.array([float(r["mean_align"]) for r in rows])
    loss = np.array([float(r["pop_loss"]) for r in rows])

    print(f"{'step':>6} {'mean |w|':>10} {'mean cos':>9} {'pop loss':>10}")
    for j in np.linspace(0, len(rows) - 1, args.rows).astype(int):
        print(f"{step[j]:>6} {norm[j]:>10.4f} {align[j]:>9.3f} {loss[j]:>10.3g}")

    t_min = step[np.argmin(norm)]
    hit = np.flatnonzero(align > 0.9)
    print(f"\nnorm minimum at step {t_min}")
    print(f"alignment first above 0.9 at step {step[hit[0]] if hit.size else 'never'}")
    print(f"final population loss {loss[-1]:.3g} (exit status {status})")


if __name__ == "__main__":
    main()
