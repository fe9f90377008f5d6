#!/usr/bin/env python3
"""Relative BPB change between consecutive context lengths in eval reports.

Reads JSON lines written by `mblm eval --lengths ...` and prints, for each
pair of neighbouring lengths, the fractional improvement (bpb_prev - bpb) / bpb_prev.
"""
import argparse
import json
import sys


def load(paths):
    rows = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
    return rows


def table(rows):
    by_length = {}
    for r in rows:
        if "bpb" in r and "context_length" in r:
            by_length[int(r["context_length"])] = float(r["bpb"])
    lengths = sorted(by_length)
    out = []
    for prev, cur in zip(lengths, lengths[1:]):
        before, after = by_length[prev], by_length[cur]
        out.append((prev, cur, before, after, (before - after) / before if before else float("nan")))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("reports", nargs="+", help="eval.jsonl files")
    ap.add_argument("--json", action="store_true", help="emit JSON lines instead of a table")
    args = ap.parse_args(argv)
    rows = table(load(args.reports))
    if not rows:
        print("need reports for at least two context lengths", file=sys.stderr)
        return 1
    for prev, cur, before, after, rel in rows:
        if args.json:
            print(json.dumps({"from": prev, "to": cur, "bpb_from": before, "bpb_to": after,
                              "relative_improvement": rel}))
        else:
            print(f"{prev:>9} -> {cur:<9} {before:.4f} -> {after:.4f}  {100 * rel:+.2f}%")
    return 0


if __name__ == "__main__":
    sys.exit(main())
