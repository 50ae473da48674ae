"""Sphere ablation: full model, without the depth-normal consistency term, without cutting.

    python3 scripts/ablation.py --iters 3000
"""

import argparse
import json

from sphere_e2e import run


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--iters", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    full = run(a.iters, a.seed, log_every=500)
    no_c = run(a.iters, a.seed, log_every=500, use_consistency=False)
    rows = {
        "full": full["grid"]["chamfer"],
        "w/o consistency": no_c["grid"]["chamfer"],
        "w/o cut": full["none"]["chamfer"],
    }
    for name, v in rows.items():
        print(f"{name:16s} {v:.5f}")
    print(json.dumps({"full": full, "no_consistency": no_c}, indent=2))


if __name__ == "__main__":
    main()
