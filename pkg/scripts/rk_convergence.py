"""Measure the integration order of the RK blocks on f(z) = lambda*z.

For each order the single-step error against exp(lambda*h) should
shrink like h^(p+1); the fitted log-log slope makes that visible.
"""

import argparse
import math

import numpy as np

from gnodeformer.autodiff import Tensor
from gnodeformer.model import RK_WEIGHTS, rk_block


def step_error(order: int, lam: float, h: float) -> float:
    weights = Tensor(np.array([RK_WEIGHTS[order]]))
    out = rk_block(Tensor(1.0), lambda z: z.scale(lam * h), order, weights)
    return abs(out.item() - math.exp(lam * h))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--lam", type=float, default=-1.0)
    parser.add_argument(
        "--steps", type=float, nargs="+", default=[0.1, 0.05, 0.025]
    )
    args = parser.parse_args()

    hs = np.array(args.steps)
    print(f"lambda={args.lam}  h={[float(h) for h in hs]}")
    print("order  errors" + " " * 38 + "slope")
    for order in (1, 2, 4):
        errors = [step_error(order, args.lam, h) for h in hs]
        slope = np.polyfit(np.log(hs), np.log(errors), 1)[0]
        err_text = "  ".join(f"{e:.3e}" for e in errors)
        print(f"rk{order}    {err_text}   {slope:.3f}")


if __name__ == "__main__":
    main()
