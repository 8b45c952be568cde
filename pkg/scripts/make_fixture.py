"""Regenerate the bundled 5x5 lattice example in tests/fixtures/lattice5.

    python scripts/make_fixture.py [--seed 7] [--out tests/fixtures/lattice5]
"""

import argparse
from pathlib import Path

from vreml import io
from vreml.simulate import SimConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--replication", type=int, default=0)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "lattice5"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, icar, u = generate(SimConfig(n0=5, n_sim=1, seed=args.seed), args.replication)
    io.write_model(out / "response.csv", out / "design.csv", model)
    io.write_adjacency(out / "adjacency.mtx", icar.graph)
    io.write_columns(out / "u_true.csv", ["u"], [u])
    print(f"wrote 5x5 fixture (seed {args.seed}) to {out}")


if __name__ == "__main__":
    main()
