"""Multi-user bandwidth and CPU allocation for interactive streaming, learned with
graph-attention multi-agent soft actor-critic, plus simulator, baselines and harness."""

__all__ = ["simenv", "qoe", "tensornet", "graphattn", "sacgcn", "baselines", "harness"]
