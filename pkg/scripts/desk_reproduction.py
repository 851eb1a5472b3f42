"""Run the desk-scale MNIST reproduction and print a summary table.

    python3 scripts/desk_reproduction.py [--mnist DIR] [--out runs/desk]
"""
import argparse
import json
import logging
from pathlib import Path

from robustaug.desk import desk_config, run_desk, summary_lines
from robustaug.evaluation import write_csv
from robustaug.experiment import write_resolved


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--mnist", help="directory holding the four MNIST IDX files")
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = desk_config(args.mnist, args.out)
    out = Path(args.out)
    write_resolved(cfg, out)
    res = run_desk(cfg, out)
    write_csv([r.report for r in res.runs.values()], out / "metrics.csv")
    (out / "validation.json").write_text(json.dumps({k: json.loads(v.to_json()) for k, v in res.validation.items()}, indent=2))
    (out / "contrast_worst_case.json").write_text(json.dumps(res.worst_case_counts(), indent=2))
    print("\n".join(summary_lines(res)))


if __name__ == "__main__":
    main()
