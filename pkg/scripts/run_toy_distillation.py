#!/usr/bin/env python3
"""End-to-end toy distillation experiment, driven through the CLI.

Synthesizes three toy translation directions, trains a 4-enc/4-dec teacher,
distills a 4-enc/1-dec student, trains a CE-only baseline of the same size
and step budget, evaluates everything, and prints the category report plus a
batch-1 latency comparison.

Usage:
    python scripts/run_toy_distillation.py [--workdir runs/toy] [--seed 0]
        [--teacher-steps 4000] [--quick]
"""

import argparse
import sys
from pathlib import Path

from shallowmt.cli import main as shallowmt

SPEC = """\
src\trev\treverse\t2500
src\tcae\tcaesar1\t2500
src\tdup\tduplicate\t2500
"""

# toy languages bucketed like a miniature resource table
RESOURCES = """\
src\t200000000
rev\t50000
cae\t500000
dup\t5000000
"""


def run(args):
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    spec = work / "corpus.spec"
    spec.write_text(SPEC)
    resources = work / "resources.tsv"
    resources.write_text(RESOURCES)
    corpus = work / "corpus"

    teacher_steps = "300" if args.quick else str(args.teacher_steps)
    phase1, phase2 = ("50", "100") if args.quick else ("500", "2000")
    baseline_steps = str(int(phase1) + int(phase2))
    seed = str(args.seed)

    steps = [
        ["synth", "--spec", str(spec), "--out", str(corpus), "--seed", seed,
         "--alphabet", "abcdefghijklmnopqrst"],
        ["train-teacher", "--data", str(corpus), "--out", str(work / "teacher.ckpt"),
         "--steps", teacher_steps, "--quota", "2000", "--seed", seed],
        ["distill", "--teacher", str(work / "teacher.ckpt"), "--data", str(corpus),
         "--out", str(work / "student.ckpt"), "--quota", "2000", "--seed", seed,
         "--phase1-steps", phase1, "--phase2-steps", phase2],
        ["train-baseline", "--data", str(corpus), "--out", str(work / "baseline.ckpt"),
         "--quota", "2000", "--seed", seed, "--steps", baseline_steps,
         "--decoder-layers", "1", "--init-from", str(work / "teacher.ckpt")],
    ]
    for argv in steps:
        print(f"\n$ shallowmt {' '.join(argv)}")
        rc = shallowmt(argv)
        if rc != 0:
            return rc

    for name in ("teacher", "student", "baseline"):
        argv = ["evaluate", "--checkpoint", str(work / f"{name}.ckpt"),
                "--data", str(corpus), "--out", str(work / f"{name}.scores.tsv"),
                "--beam", "1"]
        print(f"\n$ shallowmt {' '.join(argv)}")
        rc = shallowmt(argv)
        if rc != 0:
            return rc

    for name in ("teacher", "student", "baseline"):
        print(f"\n== report: {name} ==")
        rc = shallowmt(["report", "--scores", str(work / f"{name}.scores.tsv"),
                        "--resources", str(resources)])
        if rc != 0:
            return rc

    print("\n== batch-1 latency ==")
    return shallowmt([
        "bench",
        "--checkpoints", f"teacher={work/'teacher.ckpt'}",
        f"student={work/'student.ckpt'}", f"baseline={work/'baseline.ckpt'}",
        "--data", str(corpus), "--sentences", "15", "--beam", "1",
        "--reps", "3", "--warmup", "1", "--reference", "teacher",
    ])


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default="runs/toy")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--teacher-steps", type=int, default=4000)
    parser.add_argument("--quick", action="store_true",
                        help="tiny step counts, just to see the plumbing move")
    sys.exit(run(parser.parse_args()))
