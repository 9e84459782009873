"""Plot one run directory: request latency over time and keygroup counts per replica.

    python3 -m fogconf run --scenario partition --backend crdt --out runs/crdt
    python3 demos/plot_run.py runs/crdt            # writes runs/crdt/plot.png

Needs matplotlib (``pip install artifact[plot]``).
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from fogconf.bench import counts_by_replica, read_convergence_csv, read_latency_csv  # noqa: E402


def main(run_dir: str) -> Path:
    run = Path(run_dir)
    latency = read_latency_csv((run / "latency.csv").read_text())
    convergence = read_convergence_csv((run / "convergence.csv").read_text())

    fig, (top, bottom) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    ok = [s for s in latency if s.ok]
    failed = [s for s in latency if not s.ok]
    top.scatter([s.t_ms / 1000 for s in ok], [s.latency_ms for s in ok], s=4, label="Ok")
    top.scatter([s.t_ms / 1000 for s in failed], [s.latency_ms for s in failed], s=4, c="tab:red", label="error")
    top.set_ylabel("latency (ms)")
    top.legend(loc="upper right")

    for replica, points in sorted(counts_by_replica(convergence).items()):
        bottom.step([t / 1000 for t, _ in points], [c for _, c in points], where="post", label=replica)
    bottom.set_xlabel("time (s)")
    bottom.set_ylabel("keygroups")
    bottom.legend(loc="upper left")

    out = run / "plot.png"
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    return out


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    print(f"wrote {main(sys.argv[1])}")
