#!/usr/bin/env python3
"""Parse `clim select` output and summarize the positive-selection sets.

Reads the select dump from a file or stdin and prints one JSON object with the
anchor, its cluster, the set sizes and member lists. Exits 1 on malformed input.
"""
import argparse
import json
import sys

SETS = ("omega1", "omega2", "omega_p")


def parse(lines):
    out = {"sets": {}}
    current = None
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        head = line.split(":", 1)
        if len(head) == 2 and head[0] in SETS:
            current = head[0]
            out["sets"][current] = {"declared": int(head[1]), "members": []}
            continue
        fields = line.split("\t")
        if current is None:
            if len(fields) != 2:
                raise ValueError(f"line {lineno}: expected key<TAB>value")
            key, value = fields
            out[key] = float(value) if key == "anchor_center_distance" else int(value)
            continue
        if len(fields) != 3:
            raise ValueError(f"line {lineno}: expected idx<TAB>dist_to_anchor<TAB>dist_to_center")
        out["sets"][current]["members"].append(
            {"index": int(fields[0]), "dist_to_anchor": float(fields[1]), "dist_to_center": float(fields[2])}
        )
    for name in SETS:
        if name not in out["sets"]:
            raise ValueError(f"missing section {name}")
        s = out["sets"][name]
        if s["declared"] != len(s["members"]):
            raise ValueError(f"{name}: header says {s['declared']} members, found {len(s['members'])}")
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("path", nargs="?", help="select output (default: stdin)")
    args = ap.parse_args()
    stream = open(args.path) if args.path else sys.stdin
    try:
        result = parse(stream)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    summary = {
        "anchor": result.get("anchor"),
        "cluster": result.get("cluster"),
        "anchor_center_distance": result.get("anchor_center_distance"),
        "sizes": {k: v["declared"] for k, v in result["sets"].items()},
        "omega_p": [m["index"] for m in result["sets"]["omega_p"]["members"]],
        "omega2": [m["index"] for m in result["sets"]["omega2"]["members"]],
    }
    json.dump(summary, sys.stdout)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
