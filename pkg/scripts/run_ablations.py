"""Run ablation axes around the reference configuration and print one table per axis.

    python scripts/run_ablations.py [--root runs] [--axes kd_form,teacher_capacity]
"""
import argparse
import logging

from prompt_distill.harness import AXES, parse_config, run_ablation

DEFAULT_AXES = "kd_form,method,teacher_capacity,images_per_class,projector_layers,temperature"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs")
    ap.add_argument("--axes", default=DEFAULT_AXES)
    ap.add_argument("--fresh", action="store_true", help="do not reuse earlier runs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    config = parse_config(flags={"run.root": args.root})
    for axis in args.axes.split(","):
        if axis not in AXES:
            raise SystemExit(f"unknown axis {axis!r}; choose from {', '.join(sorted(AXES))}")
        report = run_ablation(config, axis, resume=not args.fresh)
        print(f"\n== {axis} ==\n{report.table}")
        for e in report.summary:
            print(f"  {e['variant']:<32} HM {e['hm']:.4f}  teacher HM {e['teacher_hm']:.4f}")


if __name__ == "__main__":
    main()
