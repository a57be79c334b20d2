"""Time average of the min-row beta along stationary filters against its ergodic limit."""

import argparse

import numpy as np

from filtstab.chain_core import FilteringModel, Generator, ObservationModel
from filtstab.duality import ergodic_beta_average


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--T", type=float, default=200.0)
    ap.add_argument("--trials", type=int, default=40)
    ap.add_argument("--dt", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    A = Generator(np.array([[-3.0, 1.0, 2.0], [0.5, -1.0, 0.5], [2.0, 2.0, -4.0]]))
    model = FilteringModel(A, ObservationModel(np.array([[1.0], [0.0], [-1.0]]), np.eye(1)))
    for T in np.geomspace(args.T / 16, args.T, 5):
        out = ergodic_beta_average(model, T=float(round(T / args.dt) * args.dt), n_trials=args.trials,
                                   seed=args.seed, dt=args.dt)
        print(f"T={out['T']:8.2f}  average={out['time_average']:.5f} +- {out['standard_error']:.5f}  "
              f"limit={out['target']:.5f}")


if __name__ == "__main__":
    main()
