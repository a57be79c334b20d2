"""R_T estimates on random models against a^2 = (min mu_bar/mu)^2 and (min mu/mu_bar)^2."""

import argparse

import numpy as np

from filtstab.chain_core import FilteringModel, Generator, ObservationModel, invariant_measure
from filtstab.duality import rt_estimators


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--models", type=int, default=10)
    ap.add_argument("--trials", type=int, default=2000)
    ap.add_argument("--T", type=float, default=1.0)
    ap.add_argument("--dt", type=float, default=1e-2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"{'d':>2} {'rt_part3':>10} {'SE':>8} {'rt_part4':>10} {'a^2':>8} {'(min mu/mubar)^2':>17}")
    for i in range(args.models):
        d = int(rng.integers(2, 5))
        off = rng.uniform(0.2, 2.0, (d, d))
        np.fill_diagonal(off, 0.0)
        A = Generator(off - np.diag(off.sum(axis=1)))
        model = FilteringModel(A, ObservationModel(rng.standard_normal((d, 1)), np.eye(1)))
        mu, mu_bar = rng.dirichlet(np.ones(d)), invariant_measure(A)
        r = rt_estimators(model, mu, mu_bar, args.T, args.trials, seed=i, dt=args.dt)
        alt = np.min(mu / mu_bar) ** 2
        print(f"{d:>2} {r.rt_part3:>10.4f} {r.rt_part3_se:>8.4f} {r.rt_part4:>10.4f} {r.rt_lower_bound:>8.4f} "
              f"{alt:>17.4f}{'  unstable' if r.unstable else ''}")


if __name__ == "__main__":
    main()
