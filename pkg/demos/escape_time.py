"""How long label-noise SGD takes to leave the lazy ball, against the noise level.

Every neuron starts within the NTK regime; the run ends once each has moved
more than 1/sqrt(m) from its initialization. Escape slows roughly like
1/sigma^2, and without label noise it does not happen at all on this horizon.

    python3 demos/escape_time.py
"""

import numpy as np

from twophase.verify import escape_run, predicted_escape_time

M, D, ETA, HORIZON = 128, 16, 0.004, 60_000


def main():
    print(f"m={M}, d={D}, eta={ETA}; asymptotic T1 at sigma=1 is "
          f"{predicted_escape_time(M, ETA, 1.0):.3g} steps (a loose upper scale)")
    print(f"{'sigma':>6} {'median escape':>14} {'escaped frac':>13}")
    for sigma in (0.0, 0.5, 1.0, 2.0):
        steps, fracs = [], []
        for seed in range(3):
            t, frac, _ = escape_run(M, D, ETA, sigma, seed, HORIZON)
            steps.append(np.inf if t is None else t)
            fracs.append(frac)
        med = np.median(steps)
        print(f"{sigma:>6} {'-' if np.isinf(med) else int(med):>14} {np.mean(fracs):>13.2f}")


if __name__ == "__main__":
    main()
