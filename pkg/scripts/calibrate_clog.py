"""Sweep modulation amplitude against background load; record top-3 containment of the true relays.

    python3 scripts/calibrate_clog.py --seeds 10 --out docs/clog_calibration.json

The operating point in the ``clog`` preset is the lowest amplitude whose
containment clears 18/20 with headroom at the preset's background rate.
"""

import argparse
import json
import time

from aranea.adversary.clog_experiment import clog_run
from aranea.simnet.scenario import load_preset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--on-rates", default="20000,40000,60000,100000,140000")
    ap.add_argument("--bg-rates", default="20000,40000,60000")
    ap.add_argument("--out", default="docs/clog_calibration.json")
    args = ap.parse_args()

    cfg = load_preset("clog")
    rows = []
    for bg in [float(x) for x in args.bg_rates.split(",")]:
        for on in [float(x) for x in args.on_rates.split(",")]:
            t0 = time.time()
            hits, ranks = 0, []
            for seed in range(1, args.seeds + 1):
                v = clog_run(cfg, seed=seed, on_rate=on, bg_rate=bg).verdict
                hits += v["true_in_top3"]
                ranks.append(max(v["true_ranks"]) if v["true_ranks"] else None)
            rows.append({"on_rate": on, "bg_rate": bg, "seeds": args.seeds, "top3_hits": hits,
                         "containment": hits / args.seeds, "worst_true_rank": ranks})
            print(f"bg={bg:>8.0f} on={on:>8.0f}  top3 {hits}/{args.seeds}  ({time.time() - t0:.1f}s)", flush=True)
    with open(args.out, "w") as f:
        json.dump({"scenario": "clog", "relay_bandwidth": 200000, "sweep": rows}, f, indent=2, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
