"""Write the trajectory CSVs behind the three example figures (T=1, dt=0.005, 10 paths each)."""

import argparse
import pathlib
import sys

from constrained_control import cli

STARTS = {"example1": "-1.5", "example2": "0.2", "example3": "0"}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="figure_data")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--paths", type=int, default=10)
    args = ap.parse_args()
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, x0 in STARTS.items():
        path = out / f"{name}_paths.csv"
        with open(path.with_suffix(".log"), "w") as log:
            code = cli.main(["simulate", "--problem", name, "--x", x0, "--seed", str(args.seed),
                             "--paths", str(args.paths), "--dt", "0.005", "--out", str(path), "--no-timestamp"],
                            out=log)
        if code:
            sys.exit(code)
        summary = [ln for ln in path.read_text().splitlines() if ln.startswith("# summary")]
        print(f"{path}: {summary[0][2:] if summary else ''}")


if __name__ == "__main__":
    main()
