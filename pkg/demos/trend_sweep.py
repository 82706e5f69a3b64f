"""Train every trend variant over three seeds and print a summary table.

Results land in the trial cache (``$MIXPOSE_CACHE`` or ``./.trend_cache``), which
the acceptance tests read, so running this first makes them fast.  Expect a few
minutes per trial on one CPU core.

    python demos/trend_sweep.py [variant ...]
"""
import sys
import time

from mixpose.experiments import VARIANTS, median, variant_trials


def main(names):
    for name in names or VARIANTS:
        t = time.perf_counter()
        rows = variant_trials(name)
        aps = " ".join(f"{r['ap50']:.3f}" for r in rows)
        print(f"{name:20s} AP50 [{aps}] median {median(rows, 'ap50'):.3f} "
              f"dup {median(rows, 'duplicate_rate'):.3f} "
              f"underflow {median(rows, 'mean_underflow'):.2e} "
              f"aborted {sum(r['aborted'] for r in rows)}  ({time.perf_counter() - t:.0f}s)", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
