"""Optional SVG charts (needs matplotlib)."""
import logging

log = logging.getLogger(__name__)


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        log.warning("matplotlib is not installed; skipping plots")
        return None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "allinone"      # stable element ids across runs
    return plt


def latency_lines(tables, path, title="Latency per clock level"):
    """One line per policy: latency against clock. ``tables`` maps names to LatencyTable."""
    plt = _pyplot()
    if plt is None:
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, table in tables.items():
        pts = sorted(table.per_clock().items())
        ax.plot([c for c, _ in pts], [ms for _, ms in pts], marker="o", label=f"{name} (var {table.variance:.2f})")
    ax.set_xlabel("clock (MHz)")
    ax.set_ylabel("latency (ms)")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True


def variance_bars(names, variances, path, title="Latency variance"):
    plt = _pyplot()
    if plt is None:
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(names)), variances)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("variance (ms²)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True


def accuracy_curves(history, path):
    """Per-switch test accuracy over joint epochs."""
    plt = _pyplot()
    if plt is None:
        return False
    rows = [h for h in history if h.get("phase") == "joint"]
    if not rows:
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for n in range(len(rows[0]["accuracy"])):
        ax.plot([r["epoch"] for r in rows], [r["accuracy"][n] for r in rows], marker="o", label=f"switch {n + 1}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True
