"""Run the desk-scale sweep, build the report tables and print the wall time.

    python3 scripts/run_desk.py --out runs/desk [--config configs/desk.ini]
"""

import argparse
import json
import sys
import time
from pathlib import Path

from prunebench.cli import cmd_report, cmd_run

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "desk.ini"))
    p.add_argument("--out", default=str(ROOT / "runs" / "desk"))
    p.add_argument("--jobs", type=int)
    args = p.parse_args()

    start = time.perf_counter()
    code = cmd_run(args.config, args.out, jobs=args.jobs)
    elapsed = time.perf_counter() - start
    (Path(args.out) / "elapsed.json").write_text(json.dumps({"seconds": elapsed}) + "\n")
    print(f"run exited {code} after {elapsed / 60:.1f} min")
    if code == 0:
        code = cmd_report(args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
