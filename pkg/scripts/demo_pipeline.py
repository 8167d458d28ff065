"""Synthesize a small dataset, reconstruct every sample and evaluate.

Drives the same entry points as the ``lodgarment`` command line, so the
output directory doubles as an example of the on-disk layout:

    out/synth/   manifest.json, assets/, samples/<id>/...
    out/recon/   <id>.obj, <id>.diagnostics.json, manifest.json
    out/eval/    eval.json, eval.txt
"""
import argparse
import json
from pathlib import Path

from lodgarment.cli import main as cli


def run(args):
    rc = cli(args)
    if rc != 0:
        raise SystemExit(f"lodgarment {args[0]} exited with {rc}")


def main():
    ap = argparse.ArgumentParser(description="synth -> reconstruct -> eval demo")
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--category", default="dress")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--config", default=None)
    a = ap.parse_args()

    out = Path(a.out)
    common = ["--seed", str(a.seed), "--workers", str(a.workers)]
    if a.config:
        common += ["--config", a.config]
    run(["synth", "--n", str(a.n), "--category", a.category, "--out", str(out / "synth"), *common])
    run(["reconstruct", "--input", str(out / "synth"), "--out", str(out / "recon"), *common])
    run(["eval", "--pred", str(out / "recon"), "--gt", str(out / "synth"), "--out", str(out / "eval"),
         *common])
    rep = json.loads((out / "eval" / "eval.json").read_text())
    print(f"mean over {len(rep['rows'])} samples: {rep['mean']}")


if __name__ == "__main__":
    main()
