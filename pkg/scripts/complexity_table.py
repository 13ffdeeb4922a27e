"""Parameter and MAC counts for the ImageNet presets next to the published figures.

    python3 scripts/complexity_table.py [--depth 50|101] [--csv out.csv]
"""

import argparse
import csv
import sys

from embanet.complexity import count_complexity
from embanet.network import build_network

# published (params in millions, MACs in G); None where no figure exists
REPORTED = {
    50: {
        "resnet50": (25.56, 4.12),
        "senet50": (28.07, 4.13),
        "ecanet50": (25.56, 4.13),
        "embanet-s-small-50": (16.33, 2.60),
        "embanet-m-small-50": (22.56, 3.62),
        "embanet-s-large-50": (25.27, 4.29),
        "embanet-m-large-50": (27.90, 4.72),
        "embanet-m-large-v2-50": (27.86, 4.72),
    },
    101: {
        "resnet101": (None, None),
        "senet101": (49.29, 7.86),
        "ecanet101": (44.55, 7.86),
        "embanet-m-large-101": (49.59, 8.97),
        "embanet-m-large-v2-101": (49.51, 8.97),
    },
    "mobile": {
        "mobilenetv2": (3.50, None),
        "mobilenetv2-se": (3.89, None),
        "embanet-l": (3.75, None),
    },
}


def fmt_dev(ours, ref):
    return "" if ref is None else f"{(ours - ref) / ref:+.1%}"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--depth", choices=["50", "101", "mobile", "all"], default="all")
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if args.depth == "all":
        groups = REPORTED
    else:
        key = int(args.depth) if args.depth.isdigit() else args.depth
        groups = {key: REPORTED[key]}
    rows = []
    print(f"{'preset':<24} {'params':>9} {'reported':>9} {'dev':>7} {'MACs':>8} {'reported':>9} {'dev':>7}")
    for table in groups.values():
        for name, (p_ref, m_ref) in table.items():
            rep = count_complexity(build_network(name), (1, 3, 224, 224))
            p, m = rep.total_params / 1e6, rep.total_macs / 1e9
            rows.append([name, rep.total_params, rep.total_macs, p_ref, m_ref])
            print(f"{name:<24} {p:>8.2f}M {'' if p_ref is None else f'{p_ref:.2f}M':>9} {fmt_dev(p, p_ref):>7} "
                  f"{m:>7.3f}G {'' if m_ref is None else f'{m_ref:.2f}G':>9} {fmt_dev(m, m_ref):>7}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["preset", "params", "macs", "reported_params_m", "reported_macs_g"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
