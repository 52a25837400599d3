"""Document-partitioned scatter-gather top-k search engine with a hybrid
queuing/measurement capacity model."""

__version__ = "0.1.0"
