"""Train and evaluate the reference configuration over its seeds, then print the report.

    python scripts/run_reference.py [--root runs] [--resume] [section.key=value ...]
"""
import argparse
import logging
import time
from pathlib import Path

from prompt_distill.harness import parse_config, run_pipeline


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs")
    ap.add_argument("--resume", action="store_true")
    ap.add_argument("overrides", nargs="*", help="section.key=value")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    flags = dict(o.split("=", 1) for o in args.overrides)
    config = parse_config(flags={"run.root": args.root, **flags})
    start = time.perf_counter()
    manifest = run_pipeline(config, resume=args.resume)
    print(Path(manifest.reports["table"]).read_text())
    for r in manifest.results:
        print(f"seed {r['seed']}: teacher HM {r['teacher']['hm']:.4f}, agreement {r['agreement']:.4f}")
    print(f"{time.perf_counter() - start:.0f} s, artifacts in {manifest.run_dir}")


if __name__ == "__main__":
    main()
