"""The three-state oscillation model of the second layer.

Each a_i jumps between -c, 0 and c (c = eta^(1/4)), always passing through 0.
Increments have lag-one autocovariance -sqrt(eta)/2 and none beyond, and
driving the first layer with this chain shrinks the mean squared neuron norm
to the sqrt(eta) scale.

    python3 demos/markov_oscillation.py
"""

import math

from twophase import verify as v


def main():
    eta = 0.01
    exact = v.markov_lag_autocov_exact(eta, 6)
    mc = v.check_markov_autocovariance(100, eta, 500, 20, seed=0)
    print("lag  exact       Monte Carlo")
    for k, (e, m_) in enumerate(zip(exact, mc.details["lag_estimates"]), 1):
        print(f"{k:>3}  {e:+.6f}  {m_:+.6f}")
    print(f"target for lag 1: {-math.sqrt(eta) / 2:+.6f}\n")

    for e in (0.04, 0.01):
        rep = v.check_simulation_decay(e, 16, seed=0)
        print(f"eta={e}: mean |w|^2 from {rep.details['initial']:.3f} down to {rep.statistic:.4f} "
              f"(sqrt(eta)={math.sqrt(e):.2f}); {rep.notes}")


if __name__ == "__main__":
    main()
